//! Discrete-time gNB emulator.
//!
//! One TTI is 1 ms and a control window is `tti_per_window` TTIs. Every
//! user owns a FIFO packet queue; each TTI new packets arrive, then every
//! slice's PRB share is handed out among that slice's backlogged users by
//! the scheduler the current [`SlicingAction`] selects. At the end of a
//! window the simulator emits one [`UserKpi`] per configured user.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    split_prbs, validate_action, ActionViolation, PerSlice, SchedulerPolicy, SliceId,
    SlicingAction, UserKpi,
};

/// Lower and upper clamp of the per-PRB capacity, bits per PRB per TTI.
pub const MIN_SPECTRAL_EFF: f64 = 36.0;
pub const MAX_SPECTRAL_EFF: f64 = 1404.0;
const TTI_SECONDS: f64 = 1e-3;
const PF_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("action rejected: {}", join_violations(.0))]
    ActionRejected(Vec<ActionViolation>),
    #[error("unknown drift parameter `{0}`")]
    UnknownParameter(String),
    #[error("drift multiplier must be positive and finite, got {0}")]
    BadMultiplier(f64),
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
}

fn join_violations(v: &[ActionViolation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// On/off bursty Poisson source.
///
/// `burst_on_prob` is the per-TTI probability that an active burst ends and
/// `burst_off_prob` the per-TTI probability that a silent period ends, so the
/// stationary on-fraction is `burst_off_prob / (burst_on_prob + burst_off_prob)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceTrafficProfile {
    pub mean_arrival_kbps: f64,
    pub packet_size_bytes: u32,
    pub burst_on_prob: f64,
    pub burst_off_prob: f64,
}

impl SliceTrafficProfile {
    pub fn always_on(mean_arrival_kbps: f64, packet_size_bytes: u32) -> Self {
        SliceTrafficProfile {
            mean_arrival_kbps,
            packet_size_bytes,
            burst_on_prob: 0.0,
            burst_off_prob: 1.0,
        }
    }

    /// Mean packets per TTI while the source is on.
    pub fn packets_per_tti(&self) -> f64 {
        self.mean_arrival_kbps * 1000.0 / (8.0 * f64::from(self.packet_size_bytes)) * TTI_SECONDS
    }

    pub fn packet_bits(&self) -> u64 {
        u64::from(self.packet_size_bytes) * 8
    }

    pub fn stationary_on_fraction(&self) -> Option<f64> {
        let total = self.burst_on_prob + self.burst_off_prob;
        (total > 0.0).then(|| self.burst_off_prob / total)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.mean_arrival_kbps.is_finite() && self.mean_arrival_kbps >= 0.0) {
            return Err(SimError::InvalidConfig("mean_arrival_kbps must be >= 0".into()));
        }
        if self.packet_size_bytes == 0 {
            return Err(SimError::InvalidConfig("packet_size_bytes must be > 0".into()));
        }
        if !prob_ok(self.burst_on_prob) || !prob_ok(self.burst_off_prob) {
            return Err(SimError::InvalidConfig("burst probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub total_prbs: u32,
    pub tti_per_window: u32,
    pub users_per_slice: u32,
    pub traffic: PerSlice<SliceTrafficProfile>,
    /// Log-normal shadowing sigma for the per-window spectral efficiency.
    pub fading_sigma: f64,
    /// Median bits per PRB per TTI.
    pub median_spectral_eff: f64,
    /// Drop-tail limit of each user's buffer.
    pub buffer_cap_bytes: u64,
    /// Proportional-fair averaging weight.
    pub pf_beta: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            total_prbs: 50,
            tti_per_window: 250,
            users_per_slice: 6,
            traffic: PerSlice {
                embb: SliceTrafficProfile::always_on(4000.0, 1500),
                mmtc: SliceTrafficProfile {
                    mean_arrival_kbps: 50.0,
                    packet_size_bytes: 200,
                    burst_on_prob: 0.3,
                    burst_off_prob: 0.1,
                },
                urllc: SliceTrafficProfile::always_on(200.0, 256),
            },
            fading_sigma: 0.8,
            median_spectral_eff: 360.0,
            buffer_cap_bytes: 1_000_000,
            pf_beta: 0.1,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.total_prbs == 0 {
            return Err(SimError::InvalidConfig("total_prbs must be > 0".into()));
        }
        if self.tti_per_window == 0 {
            return Err(SimError::InvalidConfig("tti_per_window must be > 0".into()));
        }
        if self.users_per_slice == 0 {
            return Err(SimError::InvalidConfig("users_per_slice must be > 0".into()));
        }
        if !(self.fading_sigma.is_finite() && self.fading_sigma >= 0.0) {
            return Err(SimError::InvalidConfig("fading_sigma must be >= 0".into()));
        }
        if !(self.median_spectral_eff.is_finite() && self.median_spectral_eff > 0.0) {
            return Err(SimError::InvalidConfig("median_spectral_eff must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.pf_beta) {
            return Err(SimError::InvalidConfig("pf_beta must lie in [0, 1]".into()));
        }
        for (_, profile) in self.traffic.iter() {
            profile.validate()?;
        }
        Ok(())
    }

    pub fn window_seconds(&self) -> f64 {
        f64::from(self.tti_per_window) * TTI_SECONDS
    }

    pub fn n_users(&self) -> usize {
        self.users_per_slice as usize * SliceId::ALL.len()
    }
}

/// FIFO of whole packets, bit-granular at the head.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PacketQueue {
    // run-length encoded (packet bits, count)
    runs: VecDeque<(u64, u64)>,
    head_sent_bits: u64,
    total_bits: u64,
}

impl PacketQueue {
    pub fn bits(&self) -> u64 {
        self.total_bits
    }

    pub fn is_empty(&self) -> bool {
        self.total_bits == 0
    }

    /// Enqueues up to `count` packets of `packet_bits`; returns how many
    /// were admitted under `cap_bits`.
    pub fn push(&mut self, count: u64, packet_bits: u64, cap_bits: u64) -> u64 {
        if count == 0 || packet_bits == 0 {
            return 0;
        }
        let room = cap_bits.saturating_sub(self.total_bits) / packet_bits;
        let admitted = count.min(room);
        if admitted == 0 {
            return 0;
        }
        match self.runs.back_mut() {
            Some((bits, n)) if *bits == packet_bits => *n += admitted,
            _ => self.runs.push_back((packet_bits, admitted)),
        }
        self.total_bits += admitted * packet_bits;
        admitted
    }

    /// Drains up to `bits`; returns `(bits drained, packets completed)`.
    pub fn drain(&mut self, bits: u64) -> (u64, u64) {
        let mut budget = bits.min(self.total_bits);
        let drained = budget;
        let mut completed = 0;
        while budget > 0 {
            let Some((packet_bits, count)) = self.runs.front_mut() else {
                break;
            };
            let head_left = *packet_bits - self.head_sent_bits;
            if budget < head_left {
                self.head_sent_bits += budget;
                budget = 0;
            } else {
                budget -= head_left;
                self.head_sent_bits = 0;
                completed += 1;
                *count -= 1;
                // whole packets behind the head
                let whole = (budget / *packet_bits).min(*count);
                budget -= whole * *packet_bits;
                *count -= whole;
                completed += whole;
                if *count == 0 {
                    self.runs.pop_front();
                }
            }
        }
        self.total_bits -= drained;
        (drained, completed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserState {
    pub user_id: u32,
    pub slice: SliceId,
    pub queue: PacketQueue,
    /// Bits per PRB per TTI for the current window.
    pub spectral_eff: f64,
    pub ema_throughput_mbps: f64,
    pub burst_on: bool,
}

impl UserState {
    pub fn queue_bits(&self) -> u64 {
        self.queue.bits()
    }
}

/// Packets and bits offered by one source in one TTI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Arrival {
    pub packets: u64,
    pub bits: u64,
}

/// Draws one TTI of arrivals for a user and advances its on/off state.
pub fn arrivals<R: Rng + ?Sized>(profile: &SliceTrafficProfile, burst_on: &mut bool, rng: &mut R) -> Arrival {
    let lambda = profile.packets_per_tti();
    let poisson = (lambda > 0.0).then(|| Poisson::new(lambda).ok()).flatten();
    arrivals_with(profile, poisson.as_ref(), burst_on, rng)
}

fn arrivals_with<R: Rng + ?Sized>(
    profile: &SliceTrafficProfile,
    poisson: Option<&Poisson<f64>>,
    burst_on: &mut bool,
    rng: &mut R,
) -> Arrival {
    let mut out = Arrival::default();
    if *burst_on {
        if let Some(dist) = poisson {
            out.packets = dist.sample(rng) as u64;
            out.bits = out.packets * profile.packet_bits();
        }
    }
    let u: f64 = rng.random();
    if *burst_on {
        if u < profile.burst_on_prob {
            *burst_on = false;
        }
    } else if u < profile.burst_off_prob {
        *burst_on = true;
    }
    out
}

/// Scheduler view of one user during one TTI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedUser {
    pub user_id: u32,
    /// Bits waiting in the queue at the start of the TTI.
    pub queue_bits: u64,
    pub spectral_eff: f64,
    pub ema_throughput_mbps: f64,
    /// Bits already served to this user earlier in the window.
    pub served_bits_window: f64,
}

impl SchedUser {
    fn prbs_needed(&self) -> u64 {
        if self.queue_bits == 0 {
            0
        } else {
            (self.queue_bits as f64 / self.spectral_eff).ceil() as u64
        }
    }
}

/// Round robin: equal split among backlogged users with the remainder
/// handed out one PRB each starting at `rotation mod n`. Grants beyond a
/// user's need are returned to the pool and re-split among the others.
pub fn schedule_rr(users: &[SchedUser], prbs: u32, rotation: usize) -> Vec<u32> {
    let mut grants = vec![0u32; users.len()];
    let mut need: Vec<u64> = users.iter().map(SchedUser::prbs_needed).collect();
    let mut pool = u64::from(prbs);
    loop {
        let active: Vec<usize> = (0..users.len()).filter(|&i| need[i] > 0).collect();
        if active.is_empty() || pool == 0 {
            break;
        }
        let n = active.len() as u64;
        let base = pool / n;
        let rem = (pool % n) as usize;
        let start = rotation % active.len();
        let mut returned = 0u64;
        for (k, &i) in active.iter().enumerate() {
            let pos = (k + active.len() - start) % active.len();
            let offer = base + u64::from(pos < rem);
            let take = offer.min(need[i]);
            grants[i] += take as u32;
            need[i] -= take;
            returned += offer - take;
        }
        if returned == 0 {
            break;
        }
        pool = returned;
    }
    grants
}

/// Greedy max-min ("waterfilling"): each PRB goes to the backlogged user
/// with the fewest bits served so far this window, ties to the lowest id.
pub fn schedule_wf(users: &[SchedUser], prbs: u32) -> Vec<u32> {
    let mut grants = vec![0u32; users.len()];
    let mut served: Vec<f64> = users.iter().map(|u| u.served_bits_window).collect();
    let mut left: Vec<f64> = users.iter().map(|u| u.queue_bits as f64).collect();
    let mut need: Vec<u64> = users.iter().map(SchedUser::prbs_needed).collect();
    for _ in 0..prbs {
        let pick = pick_min_by(users, &need, |i| served[i]);
        let Some(i) = pick else { break };
        let bits = users[i].spectral_eff.min(left[i]);
        grants[i] += 1;
        need[i] -= 1;
        served[i] += bits;
        left[i] -= bits;
    }
    grants
}

/// Proportional fair: each PRB goes to the backlogged user maximizing
/// `spectral_eff / (provisional_ema + 1e-6)`, where the provisional average
/// folds in the bits served so far this window.
pub fn schedule_pf(users: &[SchedUser], prbs: u32, beta: f64, window_seconds: f64) -> Vec<u32> {
    let mut grants = vec![0u32; users.len()];
    let mut served: Vec<f64> = users.iter().map(|u| u.served_bits_window).collect();
    let mut left: Vec<f64> = users.iter().map(|u| u.queue_bits as f64).collect();
    let mut need: Vec<u64> = users.iter().map(SchedUser::prbs_needed).collect();
    let provisional = |i: usize, served: f64| {
        (1.0 - beta) * users[i].ema_throughput_mbps + beta * served / window_seconds / 1e6
    };
    for _ in 0..prbs {
        // maximize the metric == minimize its negation
        let pick = pick_min_by(users, &need, |i| {
            -(users[i].spectral_eff / (provisional(i, served[i]) + PF_EPSILON))
        });
        let Some(i) = pick else { break };
        let bits = users[i].spectral_eff.min(left[i]);
        grants[i] += 1;
        need[i] -= 1;
        served[i] += bits;
        left[i] -= bits;
    }
    grants
}

fn pick_min_by(users: &[SchedUser], need: &[u64], key: impl Fn(usize) -> f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in 0..users.len() {
        if need[i] == 0 {
            continue;
        }
        let k = key(i);
        best = match best {
            None => Some((i, k)),
            Some((bi, bk)) => {
                if k < bk || (k == bk && users[i].user_id < users[bi].user_id) {
                    Some((i, k))
                } else {
                    Some((bi, bk))
                }
            }
        };
    }
    best.map(|(i, _)| i)
}

/// Scales one traffic or channel parameter of a slice from `start_window` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    pub slice: SliceId,
    pub parameter: String,
    pub multiplier: f64,
    pub start_window: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DriftParameter {
    MeanArrival,
    PacketSize,
    BurstOn,
    BurstOff,
    FadingSigma,
    SpectralEff,
}

impl DriftParameter {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "mean_arrival_kbps" | "mean_arrival" => DriftParameter::MeanArrival,
            "packet_size_bytes" => DriftParameter::PacketSize,
            "burst_on_prob" => DriftParameter::BurstOn,
            "burst_off_prob" => DriftParameter::BurstOff,
            "fading_sigma" => DriftParameter::FadingSigma,
            "median_spectral_eff" | "spectral_eff" => DriftParameter::SpectralEff,
            _ => return None,
        })
    }
}

/// Accounting for the most recent window, used by invariant checks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WindowTrace {
    pub offered_bits: Vec<u64>,
    pub dropped_bits: Vec<u64>,
    pub served_bits: Vec<u64>,
    pub queue_start_bits: Vec<u64>,
    pub queue_end_bits: Vec<u64>,
    pub granted_prbs: PerSlice<u64>,
    /// TTIs where a slice's grants differed from `min(prbs, needed)`.
    pub conservation_violations: u64,
    /// PRBs granted to users with an empty queue.
    pub idle_grants: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KpiReport {
    pub window_id: u64,
    pub users: Vec<UserKpi>,
}

impl KpiReport {
    pub fn slice_users(&self, slice: SliceId) -> impl Iterator<Item = &UserKpi> {
        self.users.iter().filter(move |u| u.slice == slice)
    }
}

/// Outcome of one control window. A rejected action is reported here while
/// the window still runs under the last valid action.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowOutcome {
    pub report: KpiReport,
    pub applied: SlicingAction,
    pub rejection: Option<SimError>,
}

#[derive(Debug, Clone)]
pub struct Simulator {
    config: SimConfig,
    users: Vec<UserState>,
    traffic: PerSlice<SliceTrafficProfile>,
    poisson: PerSlice<Option<Poisson<f64>>>,
    fading_sigma: PerSlice<f64>,
    median_eff: PerSlice<f64>,
    pending_drift: Vec<DriftSpec>,
    last_valid: SlicingAction,
    window_id: u64,
    rotation: PerSlice<usize>,
    rng: ChaCha8Rng,
    trace: WindowTrace,
    rejected_actions: u64,
}

/// The initial and fallback action: equal split, round robin everywhere.
pub fn equal_split_action(total_prbs: u32) -> SlicingAction {
    SlicingAction::uniform(split_prbs(total_prbs, [34, 33, 33]), SchedulerPolicy::RoundRobin)
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut users = Vec::with_capacity(config.n_users());
        let mut next_id = 0u32;
        for slice in SliceId::ALL {
            let profile = config.traffic.get(slice);
            for _ in 0..config.users_per_slice {
                let burst_on = match profile.stationary_on_fraction() {
                    None => true,
                    Some(p) => rng.random::<f64>() < p,
                };
                users.push(UserState {
                    user_id: next_id,
                    slice,
                    queue: PacketQueue::default(),
                    spectral_eff: config.median_spectral_eff,
                    ema_throughput_mbps: 0.0,
                    burst_on,
                });
                next_id += 1;
            }
        }
        let traffic = config.traffic;
        let last_valid = equal_split_action(config.total_prbs);
        let mut sim = Simulator {
            users,
            traffic,
            poisson: PerSlice::default(),
            fading_sigma: PerSlice::from_fn(|_| config.fading_sigma),
            median_eff: PerSlice::from_fn(|_| config.median_spectral_eff),
            pending_drift: Vec::new(),
            last_valid,
            window_id: 0,
            rotation: PerSlice::default(),
            rng,
            trace: WindowTrace::default(),
            rejected_actions: 0,
            config,
        };
        sim.refresh_poisson();
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn users(&self) -> &[UserState] {
        &self.users
    }

    /// Id of the next window to run.
    pub fn window_id(&self) -> u64 {
        self.window_id
    }

    pub fn last_trace(&self) -> &WindowTrace {
        &self.trace
    }

    pub fn rejected_actions(&self) -> u64 {
        self.rejected_actions
    }

    pub fn traffic(&self, slice: SliceId) -> &SliceTrafficProfile {
        self.traffic.get(slice)
    }

    fn refresh_poisson(&mut self) {
        self.poisson = self.traffic.map(|p| {
            let lambda = p.packets_per_tti();
            (lambda > 0.0).then(|| Poisson::new(lambda).ok()).flatten()
        });
    }

    /// Registers a drift; it takes effect at the start of `start_window`.
    pub fn inject_drift(&mut self, spec: DriftSpec) -> Result<(), SimError> {
        if DriftParameter::parse(&spec.parameter).is_none() {
            return Err(SimError::UnknownParameter(spec.parameter));
        }
        if !(spec.multiplier.is_finite() && spec.multiplier > 0.0) {
            return Err(SimError::BadMultiplier(spec.multiplier));
        }
        self.pending_drift.push(spec);
        Ok(())
    }

    fn apply_due_drift(&mut self) {
        let now = self.window_id;
        let (due, keep): (Vec<_>, Vec<_>) = self
            .pending_drift
            .drain(..)
            .partition(|d| d.start_window <= now);
        self.pending_drift = keep;
        if due.is_empty() {
            return;
        }
        for d in due {
            let m = d.multiplier;
            let profile = self.traffic.get_mut(d.slice);
            match DriftParameter::parse(&d.parameter).expect("validated on injection") {
                DriftParameter::MeanArrival => profile.mean_arrival_kbps *= m,
                DriftParameter::PacketSize => {
                    profile.packet_size_bytes =
                        ((f64::from(profile.packet_size_bytes) * m).round() as u32).max(1)
                }
                DriftParameter::BurstOn => profile.burst_on_prob = (profile.burst_on_prob * m).min(1.0),
                DriftParameter::BurstOff => profile.burst_off_prob = (profile.burst_off_prob * m).min(1.0),
                DriftParameter::FadingSigma => *self.fading_sigma.get_mut(d.slice) *= m,
                DriftParameter::SpectralEff => *self.median_eff.get_mut(d.slice) *= m,
            }
        }
        self.refresh_poisson();
    }

    /// Runs one window, rejecting an invalid action outright.
    pub fn try_run_window(&mut self, action: &SlicingAction) -> Result<KpiReport, SimError> {
        validate_action(action, self.config.total_prbs).map_err(SimError::ActionRejected)?;
        Ok(self.run_window(action).report)
    }

    /// Runs one window. An invalid action is flagged and the last valid
    /// action is applied instead.
    pub fn run_window(&mut self, action: &SlicingAction) -> WindowOutcome {
        let rejection = match validate_action(action, self.config.total_prbs) {
            Ok(()) => {
                self.last_valid = *action;
                None
            }
            Err(v) => {
                self.rejected_actions += 1;
                Some(SimError::ActionRejected(v))
            }
        };
        let applied = self.last_valid;
        self.apply_due_drift();
        let report = self.simulate(&applied);
        WindowOutcome {
            report,
            applied,
            rejection,
        }
    }

    fn simulate(&mut self, action: &SlicingAction) -> KpiReport {
        let n = self.users.len();
        let window_seconds = self.config.window_seconds();
        let cap_bits = self.config.buffer_cap_bytes.saturating_mul(8);
        let beta = self.config.pf_beta;

        // per-window channel redraw
        for u in &mut self.users {
            let z: f64 = self.rng.sample(StandardNormal);
            let sigma = *self.fading_sigma.get(u.slice);
            let median = *self.median_eff.get(u.slice);
            u.spectral_eff = (median * (sigma * z).exp()).clamp(MIN_SPECTRAL_EFF, MAX_SPECTRAL_EFF);
        }

        let mut trace = WindowTrace {
            offered_bits: vec![0; n],
            dropped_bits: vec![0; n],
            served_bits: vec![0; n],
            queue_start_bits: self.users.iter().map(UserState::queue_bits).collect(),
            queue_end_bits: vec![0; n],
            ..WindowTrace::default()
        };
        let mut packets = vec![0u64; n];

        let slice_members: PerSlice<Vec<usize>> =
            PerSlice::from_fn(|s| (0..n).filter(|&i| self.users[i].slice == s).collect());

        for _ in 0..self.config.tti_per_window {
            for i in 0..n {
                let slice = self.users[i].slice;
                let profile = *self.traffic.get(slice);
                let a = arrivals_with(
                    &profile,
                    self.poisson.get(slice).as_ref(),
                    &mut self.users[i].burst_on,
                    &mut self.rng,
                );
                if a.packets > 0 {
                    let admitted = self.users[i].queue.push(a.packets, profile.packet_bits(), cap_bits);
                    trace.offered_bits[i] += a.bits;
                    trace.dropped_bits[i] += (a.packets - admitted) * profile.packet_bits();
                }
            }

            for slice in SliceId::ALL {
                let members = slice_members.get(slice);
                let alloc = action.get(slice);
                let view: Vec<SchedUser> = members
                    .iter()
                    .map(|&i| {
                        let u = &self.users[i];
                        SchedUser {
                            user_id: u.user_id,
                            queue_bits: u.queue_bits(),
                            spectral_eff: u.spectral_eff,
                            ema_throughput_mbps: u.ema_throughput_mbps,
                            served_bits_window: trace.served_bits[i] as f64,
                        }
                    })
                    .collect();
                let rotation = *self.rotation.get(slice);
                let grants = match alloc.scheduler {
                    SchedulerPolicy::RoundRobin => schedule_rr(&view, alloc.prbs, rotation),
                    SchedulerPolicy::Waterfilling => schedule_wf(&view, alloc.prbs),
                    SchedulerPolicy::ProportionalFair => {
                        schedule_pf(&view, alloc.prbs, beta, window_seconds)
                    }
                };
                *self.rotation.get_mut(slice) = rotation.wrapping_add(1);

                let needed: u64 = view.iter().map(SchedUser::prbs_needed).sum();
                let granted: u64 = grants.iter().map(|&g| u64::from(g)).sum();
                if granted != needed.min(u64::from(alloc.prbs)) {
                    trace.conservation_violations += 1;
                }
                *trace.granted_prbs.get_mut(slice) += granted;

                for (k, &i) in members.iter().enumerate() {
                    let g = grants[k];
                    if g == 0 {
                        continue;
                    }
                    if view[k].queue_bits == 0 {
                        trace.idle_grants += u64::from(g);
                    }
                    let capacity = (f64::from(g) * self.users[i].spectral_eff).floor() as u64;
                    let (bits, done) = self.users[i].queue.drain(capacity);
                    trace.served_bits[i] += bits;
                    packets[i] += done;
                }
            }
        }

        let window_id = self.window_id;
        let mut kpis = Vec::with_capacity(n);
        for (i, u) in self.users.iter_mut().enumerate() {
            let bitrate = trace.served_bits[i] as f64 / window_seconds / 1e6;
            u.ema_throughput_mbps = (1.0 - beta) * u.ema_throughput_mbps + beta * bitrate;
            trace.queue_end_bits[i] = u.queue_bits();
            kpis.push(UserKpi {
                user_id: u.user_id,
                slice: u.slice,
                tx_bitrate_mbps: bitrate,
                tx_packets: packets[i],
                dl_buffer_bytes: u.queue_bits() / 8,
                window_id,
            });
        }
        self.trace = trace;
        self.window_id += 1;
        KpiReport {
            window_id,
            users: kpis,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn user(id: u32, se: f64, ema: f64) -> SchedUser {
        SchedUser {
            user_id: id,
            queue_bits: u64::MAX / 4,
            spectral_eff: se,
            ema_throughput_mbps: ema,
            served_bits_window: 0.0,
        }
    }

    #[test]
    fn zero_rate_source_is_silent() {
        let profile = SliceTrafficProfile::always_on(0.0, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut on = true;
        for _ in 0..1000 {
            assert_eq!(arrivals(&profile, &mut on, &mut rng).bits, 0);
        }
    }

    #[test]
    fn absorbing_off_state_is_silent() {
        let profile = SliceTrafficProfile {
            mean_arrival_kbps: 1000.0,
            packet_size_bytes: 100,
            burst_on_prob: 0.0,
            burst_off_prob: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut on = false;
        for _ in 0..1000 {
            assert_eq!(arrivals(&profile, &mut on, &mut rng).bits, 0);
            assert!(!on);
        }
    }

    #[test]
    fn poisson_mean_matches_rate() {
        let profile = SliceTrafficProfile::always_on(800.0, 1000);
        assert!((profile.packets_per_tti() - 0.1).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut on = true;
        let n = 100_000;
        let total: u64 = (0..n).map(|_| arrivals(&profile, &mut on, &mut rng).packets).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 0.1).abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn bursty_source_on_fraction() {
        let profile = SliceTrafficProfile {
            mean_arrival_kbps: 50.0,
            packet_size_bytes: 200,
            burst_on_prob: 0.3,
            burst_off_prob: 0.1,
        };
        assert_eq!(profile.stationary_on_fraction(), Some(0.25));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut on = true;
        let n = 200_000;
        let mut on_ttis = 0;
        for _ in 0..n {
            if on {
                on_ttis += 1;
            }
            arrivals(&profile, &mut on, &mut rng);
        }
        let frac = on_ttis as f64 / n as f64;
        assert!((frac - 0.25).abs() < 0.01, "on fraction {frac}");
    }

    #[test]
    fn rr_examples() {
        let three = [user(0, 1.0, 0.0), user(1, 1.0, 0.0), user(2, 1.0, 0.0)];
        for rot in 0..5 {
            assert_eq!(schedule_rr(&three, 12, rot), vec![4, 4, 4]);
        }
        assert_eq!(schedule_rr(&three, 10, 0), vec![4, 3, 3]);
        assert_eq!(schedule_rr(&three, 10, 1), vec![3, 4, 3]);
        assert_eq!(schedule_rr(&three, 11, 2), vec![4, 3, 4]);
        assert!(schedule_rr(&[], 5, 0).is_empty());
        let mut idle = three;
        for u in &mut idle {
            u.queue_bits = 0;
        }
        assert_eq!(schedule_rr(&idle, 5, 0), vec![0, 0, 0]);
    }

    #[test]
    fn rr_returns_unneeded_prbs() {
        let mut users = [user(0, 10.0, 0.0), user(1, 10.0, 0.0), user(2, 10.0, 0.0)];
        users[0].queue_bits = 15; // needs 2 PRBs
        let g = schedule_rr(&users, 12, 0);
        assert_eq!(g[0], 2);
        assert_eq!(g[1] + g[2], 10);
        assert_eq!(g, vec![2, 5, 5]);
    }

    #[test]
    fn wf_examples() {
        assert_eq!(schedule_wf(&[user(0, 2.0, 0.0), user(1, 1.0, 0.0)], 3), vec![1, 2]);
        assert_eq!(schedule_wf(&[user(0, 5.0, 0.0)], 7), vec![7]);
        assert_eq!(schedule_wf(&[user(0, 3.0, 0.0), user(1, 3.0, 0.0)], 4), vec![2, 2]);
        assert!(schedule_wf(&[], 4).is_empty());
    }

    #[test]
    fn pf_examples() {
        let g = schedule_pf(&[user(0, 3.0, 1.0), user(1, 1.0, 1.0)], 1, 0.1, 0.25);
        assert_eq!(g, vec![1, 0]);
        let g = schedule_pf(&[user(0, 2.0, 10.0), user(1, 2.0, 1.0)], 1, 0.1, 0.25);
        assert_eq!(g, vec![0, 1]);
        assert_eq!(schedule_pf(&[user(0, 2.0, 4.0)], 9, 0.1, 0.25), vec![9]);
    }

    #[test]
    fn queue_drains_whole_packets() {
        let mut q = PacketQueue::default();
        assert_eq!(q.push(3, 100, u64::MAX), 3);
        assert_eq!(q.drain(150), (150, 1));
        assert_eq!(q.bits(), 150);
        assert_eq!(q.drain(60), (60, 1));
        assert_eq!(q.drain(1000), (90, 1));
        assert!(q.is_empty());
        assert_eq!(q.drain(10), (0, 0));
    }

    #[test]
    fn queue_respects_cap_and_mixed_sizes() {
        let mut q = PacketQueue::default();
        assert_eq!(q.push(10, 100, 450), 4);
        assert_eq!(q.push(1, 40, 450), 1);
        assert_eq!(q.bits(), 440);
        assert_eq!(q.drain(440), (440, 5));
    }

    #[test]
    fn unknown_drift_parameter_rejected() {
        let mut sim = Simulator::new(SimConfig::default()).unwrap();
        let err = sim
            .inject_drift(DriftSpec {
                slice: SliceId::Mmtc,
                parameter: "colour".into(),
                multiplier: 2.0,
                start_window: 0,
            })
            .unwrap_err();
        assert_eq!(err, SimError::UnknownParameter("colour".into()));
    }

    #[test]
    fn invalid_action_falls_back() {
        let mut sim = Simulator::new(SimConfig::default()).unwrap();
        let bad = SlicingAction::uniform([30, 30, 30], SchedulerPolicy::RoundRobin);
        let out = sim.run_window(&bad);
        assert!(matches!(out.rejection, Some(SimError::ActionRejected(_))));
        assert_eq!(out.applied, equal_split_action(50));
        assert_eq!(sim.rejected_actions(), 1);
        assert!(sim.try_run_window(&bad).unwrap_err().to_string().starts_with("action rejected"));
    }
}
