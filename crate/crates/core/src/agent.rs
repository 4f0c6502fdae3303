//! The slicing control agent: reward, state encoding, tabular Q-learning
//! and a hill-climbing baseline over a fixed action catalog.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    nearest_rank, split_prbs, validate_action, PerSlice, SchedulerPolicy, SliceId, SlicingAction, N_SLICES,
};
use crate::ran_sim::{KpiReport, SimConfig, Simulator};

pub const N_STATES: usize = 4096;
pub const N_ACTIONS: usize = 21;
/// Bins per state digit.
pub const STATE_BINS: usize = 4;

/// PRB splits in percent, in catalog order.
pub const SPLITS: [[u32; N_SLICES]; 7] = [
    [60, 20, 20],
    [20, 60, 20],
    [20, 20, 60],
    [40, 40, 20],
    [40, 20, 40],
    [20, 40, 40],
    [34, 33, 33],
];

/// Catalog index of the equal split with round-robin everywhere.
pub const BASELINE_ACTION: usize = 6 * 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("empty slice {0}")]
    EmptySlice(SliceId),
    #[error("index out of range: {what} {index} >= {bound}")]
    OutOfRange { what: &'static str, index: usize, bound: usize },
    #[error("invalid agent parameters: {0}")]
    InvalidParams(String),
    #[error("empty warm-up set")]
    EmptyWarmup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentMode {
    #[serde(rename = "embb")]
    EmbbOriented,
    #[serde(rename = "urllc")]
    UrllcOriented,
}

impl AgentMode {
    pub fn target_slice(self) -> SliceId {
        match self {
            AgentMode::EmbbOriented => SliceId::Embb,
            AgentMode::UrllcOriented => SliceId::Urllc,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "embb" => Some(AgentMode::EmbbOriented),
            "urllc" => Some(AgentMode::UrllcOriented),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgentMode::EmbbOriented => "embb",
            AgentMode::UrllcOriented => "urllc",
        }
    }
}

/// eMBB mode: mean eMBB bitrate. URLLC mode: minus the mean URLLC buffer in
/// megabytes.
pub fn compute_reward(report: &KpiReport, mode: AgentMode) -> Result<f64, AgentError> {
    let slice = mode.target_slice();
    let (n, sum) = report.slice_users(slice).fold((0usize, 0.0), |(n, s), u| {
        let v = match mode {
            AgentMode::EmbbOriented => u.tx_bitrate_mbps,
            AgentMode::UrllcOriented => u.dl_buffer_bytes as f64,
        };
        (n + 1, s + v)
    });
    if n == 0 {
        return Err(AgentError::EmptySlice(slice));
    }
    let mean = sum / n as f64;
    Ok(match mode {
        AgentMode::EmbbOriented => mean,
        AgentMode::UrllcOriented => 0.0 - mean / 1e6,
    })
}

/// The 21 actions: split index times 3 plus scheduler index.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionCatalog {
    actions: Vec<SlicingAction>,
}

impl ActionCatalog {
    pub fn new(total_prbs: u32) -> Self {
        let actions = SPLITS
            .iter()
            .flat_map(|&split| {
                SchedulerPolicy::ALL.map(|sched| SlicingAction::uniform(split_prbs(total_prbs, split), sched))
            })
            .collect();
        ActionCatalog { actions }
    }

    pub fn index(split: usize, scheduler: SchedulerPolicy) -> usize {
        let s = SchedulerPolicy::ALL.iter().position(|&p| p == scheduler).expect("known scheduler");
        split * 3 + s
    }

    pub fn get(&self, index: usize) -> &SlicingAction {
        &self.actions[index]
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SlicingAction> {
        self.actions.iter()
    }

    pub fn validate(&self, total_prbs: u32) -> Result<(), AgentError> {
        for (i, a) in self.actions.iter().enumerate() {
            if validate_action(a, total_prbs).is_err() {
                return Err(AgentError::InvalidParams(format!("catalog entry {i} is not a valid action")));
            }
        }
        Ok(())
    }
}

/// Per-slice quartiles of window-mean bitrate and buffer from a warm-up run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateReference {
    /// `[bitrate quartiles, buffer quartiles]` per slice.
    pub quartiles: PerSlice<[[f64; 3]; 2]>,
}

fn slice_means(report: &KpiReport, slice: SliceId) -> Option<[f64; 2]> {
    let (n, rate, buf) = report
        .slice_users(slice)
        .fold((0usize, 0.0, 0.0), |(n, r, b), u| (n + 1, r + u.tx_bitrate_mbps, b + u.dl_buffer_bytes as f64));
    (n > 0).then(|| [rate / n as f64, buf / n as f64])
}

impl StateReference {
    pub fn from_reports(reports: &[KpiReport]) -> Result<Self, AgentError> {
        let mut columns: PerSlice<[Vec<f64>; 2]> = PerSlice::default();
        for r in reports {
            for slice in SliceId::ALL {
                if let Some(m) = slice_means(r, slice) {
                    let c = columns.get_mut(slice);
                    c[0].push(m[0]);
                    c[1].push(m[1]);
                }
            }
        }
        if SliceId::ALL.iter().any(|&s| columns.get(s)[0].is_empty()) {
            return Err(AgentError::EmptyWarmup);
        }
        let quartiles = columns.map(|cols| {
            std::array::from_fn(|k| {
                let mut v = cols[k].clone();
                v.sort_by(f64::total_cmp);
                [0.25, 0.5, 0.75].map(|q| nearest_rank(&v, q))
            })
        });
        Ok(StateReference { quartiles })
    }

    /// Number of quartile edges at or below `value`, capped at 3.
    pub fn bin(edges: &[f64; 3], value: f64) -> usize {
        edges.iter().filter(|&&e| e <= value).count().min(STATE_BINS - 1)
    }
}

/// Base-4 digits, most significant first: eMBB bitrate, eMBB buffer, mMTC
/// bitrate, mMTC buffer, URLLC bitrate, URLLC buffer. Slices absent from the
/// report encode as bin 0.
pub fn encode_state(report: &KpiReport, reference: &StateReference) -> usize {
    let mut state = 0;
    for slice in SliceId::ALL {
        let means = slice_means(report, slice);
        for k in 0..2 {
            let bin = means.map_or(0, |m| StateReference::bin(&reference.quartiles.get(slice)[k], m[k]));
            state = state * STATE_BINS + bin;
        }
    }
    state
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QParams {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
    /// Multiplies epsilon after every decision.
    pub epsilon_decay: f64,
    pub epsilon_min: f64,
}

impl Default for QParams {
    fn default() -> Self {
        QParams {
            alpha: 0.03,
            gamma: 0.5,
            epsilon: 0.05,
            epsilon_decay: 1.0,
            epsilon_min: 0.0,
        }
    }
}

impl QParams {
    pub fn validate(&self) -> Result<(), AgentError> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("epsilon", self.epsilon),
            ("epsilon_decay", self.epsilon_decay),
            ("epsilon_min", self.epsilon_min),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(AgentError::InvalidParams(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
    values: Vec<f64>,
}

impl QTable {
    pub fn new(n_states: usize, n_actions: usize, params: &QParams) -> Self {
        QTable {
            n_states,
            n_actions,
            alpha: params.alpha,
            gamma: params.gamma,
            epsilon: params.epsilon,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.values.fill(value);
    }

    fn check(&self, s: usize, a: usize) -> Result<(), AgentError> {
        if s >= self.n_states {
            return Err(AgentError::OutOfRange {
                what: "state",
                index: s,
                bound: self.n_states,
            });
        }
        if a >= self.n_actions {
            return Err(AgentError::OutOfRange {
                what: "action",
                index: a,
                bound: self.n_actions,
            });
        }
        Ok(())
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) -> Result<(), AgentError> {
        self.check(s, a)?;
        self.values[s * self.n_actions + a] = v;
        Ok(())
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// First index of the row maximum.
    pub fn greedy(&self, s: usize) -> usize {
        let row = self.row(s);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = i;
            }
        }
        best
    }

    pub fn max_value(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// One-step temporal-difference update of `Q(s, a)`.
    pub fn q_update(&mut self, s: usize, a: usize, r: f64, s_next: usize) -> Result<(), AgentError> {
        self.check(s, a)?;
        self.check(s_next, 0)?;
        let target = r + self.gamma * self.max_value(s_next);
        let idx = s * self.n_actions + a;
        self.values[idx] += self.alpha * (target - self.values[idx]);
        Ok(())
    }
}

/// Epsilon-greedy choice; greedy ties go to the lowest index.
pub fn select_action(q: &QTable, s: usize, epsilon: f64, rng: &mut impl Rng) -> usize {
    let explore: f64 = rng.random();
    if explore < epsilon {
        rng.random_range(0..q.n_actions)
    } else {
        q.greedy(s)
    }
}

/// Hill-climbing baseline walking the splits ordered by the mode slice's
/// share.
#[derive(Debug, Clone, PartialEq)]
pub struct HeuristicPolicy {
    mode: AgentMode,
    path: Vec<usize>,
    position: Option<usize>,
    last_reward: Option<f64>,
}

impl HeuristicPolicy {
    pub fn new(mode: AgentMode) -> Self {
        let slice = mode.target_slice().index();
        let mut path: Vec<usize> = (0..SPLITS.len()).collect();
        path.sort_by(|&a, &b| SPLITS[b][slice].cmp(&SPLITS[a][slice]).then(a.cmp(&b)));
        HeuristicPolicy {
            mode,
            path,
            position: None,
            last_reward: None,
        }
    }

    pub fn scheduler(&self) -> SchedulerPolicy {
        match self.mode {
            AgentMode::EmbbOriented => SchedulerPolicy::ProportionalFair,
            AgentMode::UrllcOriented => SchedulerPolicy::RoundRobin,
        }
    }

    /// Catalog index for the next window given the reward of the last one.
    pub fn step(&mut self, reward: Option<f64>) -> usize {
        let next = match (self.position, reward) {
            (None, _) => 0,
            (Some(p), Some(r)) => {
                let improved = self.last_reward.is_none_or(|prev| r > prev);
                self.last_reward = Some(r);
                match (improved, p) {
                    (true, _) => p,
                    (false, 0) => 1,
                    (false, p) => p - 1,
                }
            }
            (Some(p), None) => p,
        };
        self.position = Some(next);
        ActionCatalog::index(self.path[next], self.scheduler())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    QLearning,
    Heuristic,
    /// Always the equal-split round-robin baseline.
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentParams {
    pub kind: AgentKind,
    pub q: QParams,
    /// Windows run under the baseline action to build the state reference.
    pub warmup_windows: usize,
    /// Seed every Q value with the discounted mean warm-up reward instead
    /// of zero.
    pub baseline_init: bool,
    /// Q-learning windows run against a private simulator before the agent
    /// is put in the loop.
    pub pretrain_windows: usize,
    /// Exploration rate while pretraining.
    pub pretrain_epsilon: f64,
    pub seed: u64,
}

impl Default for AgentParams {
    fn default() -> Self {
        AgentParams {
            kind: AgentKind::QLearning,
            q: QParams::default(),
            warmup_windows: 50,
            baseline_init: true,
            pretrain_windows: 20_000,
            pretrain_epsilon: 0.2,
            seed: 7,
        }
    }
}

impl AgentParams {
    pub fn validate(&self) -> Result<(), AgentError> {
        self.q.validate()?;
        if !(0.0..=1.0).contains(&self.pretrain_epsilon) {
            return Err(AgentError::InvalidParams("pretrain_epsilon must be in [0, 1]".into()));
        }
        if self.kind == AgentKind::QLearning && self.warmup_windows == 0 {
            return Err(AgentError::InvalidParams("warmup_windows must be > 0 for q_learning".into()));
        }
        Ok(())
    }
}

const PRETRAIN_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// One control loop's agent: turns each KPI report into the next action.
#[derive(Debug, Clone)]
pub struct Agent {
    mode: AgentMode,
    params: AgentParams,
    catalog: ActionCatalog,
    q: QTable,
    epsilon: f64,
    reference: Option<StateReference>,
    warmup: Vec<KpiReport>,
    prev: Option<(usize, usize)>,
    heuristic: HeuristicPolicy,
    rng: ChaCha8Rng,
    last_action: usize,
}

impl Agent {
    pub fn new(mode: AgentMode, params: AgentParams, total_prbs: u32) -> Result<Self, AgentError> {
        params.validate()?;
        let catalog = ActionCatalog::new(total_prbs);
        catalog.validate(total_prbs)?;
        Ok(Agent {
            mode,
            q: QTable::new(N_STATES, N_ACTIONS, &params.q),
            epsilon: params.q.epsilon,
            rng: ChaCha8Rng::seed_from_u64(params.seed),
            heuristic: HeuristicPolicy::new(mode),
            reference: None,
            warmup: Vec::new(),
            prev: None,
            catalog,
            params,
            last_action: BASELINE_ACTION,
        })
    }

    pub fn mode(&self) -> AgentMode {
        self.mode
    }

    pub fn catalog(&self) -> &ActionCatalog {
        &self.catalog
    }

    pub fn q_table(&self) -> &QTable {
        &self.q
    }

    pub fn reference(&self) -> Option<&StateReference> {
        self.reference.as_ref()
    }

    pub fn last_action(&self) -> usize {
        self.last_action
    }

    /// Action for the first window, before any report exists.
    pub fn initial_action(&mut self) -> SlicingAction {
        let idx = match self.params.kind {
            AgentKind::Heuristic => self.heuristic.step(None),
            AgentKind::QLearning | AgentKind::Static => BASELINE_ACTION,
        };
        self.last_action = idx;
        *self.catalog.get(idx)
    }

    /// Consumes the report of the window just run and returns the action for
    /// the next one.
    pub fn on_report(&mut self, report: &KpiReport) -> Result<SlicingAction, AgentError> {
        let idx = match self.params.kind {
            AgentKind::Static => BASELINE_ACTION,
            AgentKind::Heuristic => {
                let r = compute_reward(report, self.mode)?;
                self.heuristic.step(Some(r))
            }
            AgentKind::QLearning => self.q_step(report)?,
        };
        self.last_action = idx;
        Ok(*self.catalog.get(idx))
    }

    /// Trains a Q-learning agent on its own simulator, seeded apart from the
    /// live one. No-op for the other kinds or when `pretrain_windows` is 0.
    pub fn pretrain(&mut self, sim_config: &SimConfig) -> Result<(), AgentError> {
        if self.params.kind != AgentKind::QLearning || self.params.pretrain_windows == 0 {
            return Ok(());
        }
        let config = SimConfig {
            seed: sim_config.seed ^ PRETRAIN_SEED_SALT,
            ..sim_config.clone()
        };
        let mut sim = Simulator::new(config).map_err(|e| AgentError::InvalidParams(e.to_string()))?;
        let live_epsilon = self.epsilon;
        self.epsilon = self.params.pretrain_epsilon;
        let mut action = self.initial_action();
        for _ in 0..self.params.pretrain_windows {
            let out = sim.run_window(&action);
            action = self.on_report(&out.report)?;
        }
        self.epsilon = live_epsilon;
        self.prev = None;
        self.last_action = BASELINE_ACTION;
        Ok(())
    }

    fn q_step(&mut self, report: &KpiReport) -> Result<usize, AgentError> {
        let Some(reference) = &self.reference else {
            self.warmup.push(report.clone());
            if self.warmup.len() >= self.params.warmup_windows {
                self.reference = Some(StateReference::from_reports(&self.warmup)?);
                if self.params.baseline_init {
                    let mut total = 0.0;
                    for r in &self.warmup {
                        total += compute_reward(r, self.mode)?;
                    }
                    let mean = total / self.warmup.len() as f64;
                    self.q.fill(mean / (1.0 - self.params.q.gamma).max(1e-3));
                }
                self.warmup.clear();
            }
            return Ok(BASELINE_ACTION);
        };
        let r = compute_reward(report, self.mode)?;
        let s_next = encode_state(report, reference);
        if let Some((s, a)) = self.prev {
            self.q.q_update(s, a, r, s_next)?;
        }
        let a = select_action(&self.q, s_next, self.epsilon, &mut self.rng);
        self.epsilon = (self.epsilon * self.params.q.epsilon_decay).max(self.params.q.epsilon_min);
        self.prev = Some((s_next, a));
        Ok(a)
    }
}
