//! The slice verifier: predicts each user's slice from its KPIs and flags
//! drift, misclassification and conflicting predictions.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{stratified_split, DataError};
use crate::domain::{
    zscore_normalize, DomainError, FeatureStats, FeatureVector, PerSlice, SliceId, UserKpi, N_BINS, N_FEATURES,
};
use crate::metrics::{classification_report, ClassificationReport, ConfusionMatrix, MetricsError};
use crate::ran_sim::KpiReport;
use crate::tree::{BoostParams, Classifier, DecisionTree, Ensemble, TreeError, TreeParams};

/// Proportions below this are floored before taking logs.
pub const PSI_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("insufficient support for class {0}")]
    InsufficientSupport(SliceId),
    #[error("invalid verifier parameters: {0}")]
    InvalidParams(String),
    #[error("no verdicts")]
    NoVerdicts,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Tree,
    Boosted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifierParams {
    pub train_fraction: f64,
    pub min_per_class: usize,
    pub classifier: ClassifierKind,
    pub tree: TreeParams,
    pub boost: BoostParams,
    /// Per-slice sliding window length for drift checks.
    pub drift_window: usize,
    pub psi_threshold: f64,
    pub psi_consecutive: u32,
    pub conflict_epsilon: f64,
    pub conflict_capacity: usize,
    pub misclass_rate_threshold: f64,
    pub misclass_windows: usize,
    pub seed: u64,
}

impl Default for VerifierParams {
    fn default() -> Self {
        VerifierParams {
            train_fraction: 0.1,
            min_per_class: 30,
            classifier: ClassifierKind::Boosted,
            tree: TreeParams::default(),
            boost: BoostParams::default(),
            drift_window: 500,
            psi_threshold: 0.25,
            psi_consecutive: 3,
            conflict_epsilon: 0.1,
            conflict_capacity: 1000,
            misclass_rate_threshold: 0.25,
            misclass_windows: 20,
            seed: 42,
        }
    }
}

impl VerifierParams {
    pub fn validate(&self) -> Result<(), VerifyError> {
        let bad = |m: &str| Err(VerifyError::InvalidParams(m.into()));
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad("train_fraction must lie in (0, 1]");
        }
        if self.drift_window < 2 {
            return bad("drift_window must be >= 2");
        }
        if self.psi_consecutive == 0 {
            return bad("psi_consecutive must be >= 1");
        }
        if !(self.psi_threshold >= 0.0 && self.conflict_epsilon >= 0.0) {
            return bad("thresholds must be >= 0");
        }
        if self.conflict_capacity == 0 || self.misclass_windows == 0 {
            return bad("conflict_capacity and misclass_windows must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.misclass_rate_threshold) {
            return bad("misclass_rate_threshold must lie in [0, 1]");
        }
        self.tree.validate()?;
        Ok(())
    }
}

/// Reference distribution of one slice's features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReference {
    pub stats: FeatureStats,
    /// Proportions of the reference samples in each histogram bin.
    pub histogram: [[f64; N_BINS]; N_FEATURES],
}

impl SliceReference {
    pub fn from_features(features: &[FeatureVector]) -> Result<Self, DomainError> {
        let stats = FeatureStats::from_features(features)?;
        let histogram = std::array::from_fn(|f| stats.proportions(f, features.iter().map(|x| x.0[f])));
        Ok(SliceReference { stats, histogram })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierModel {
    pub classifier: Classifier,
    pub reference: PerSlice<SliceReference>,
    /// Z-score statistics over the whole training subset.
    pub normalization: FeatureStats,
    pub train_fraction: f64,
    pub train_samples: usize,
}

impl VerifierModel {
    pub fn predict(&self, x: &FeatureVector) -> SliceId {
        SliceId::ALL[self.classifier.predict(x)]
    }

    /// Same references, different classifier.
    pub fn with_classifier(&self, classifier: Classifier) -> Self {
        VerifierModel {
            classifier,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedVerifier {
    pub model: VerifierModel,
    pub train: Vec<UserKpi>,
    pub holdout: Vec<UserKpi>,
}

/// Trains on a seeded stratified fraction of `corpus` and keeps the rest as
/// a holdout.
pub fn train_verifier_split(corpus: &[UserKpi], params: &VerifierParams) -> Result<TrainedVerifier, VerifyError> {
    params.validate()?;
    let (train, holdout) = if params.train_fraction >= 1.0 {
        (corpus.to_vec(), Vec::new())
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        match stratified_split(corpus, params.train_fraction, &mut rng) {
            Ok(parts) => parts,
            Err(DataError::EmptyStratum { slice, .. }) => return Err(VerifyError::InsufficientSupport(slice)),
            Err(e) => return Err(e.into()),
        }
    };
    for slice in SliceId::ALL {
        if train.iter().filter(|k| k.slice == slice).count() < params.min_per_class.max(1) {
            return Err(VerifyError::InsufficientSupport(slice));
        }
    }
    let x: Vec<FeatureVector> = train.iter().map(UserKpi::features).collect();
    let y: Vec<usize> = train.iter().map(|k| k.slice.index()).collect();
    let classifier = match params.classifier {
        ClassifierKind::Tree => Classifier::Tree(DecisionTree::fit(&x, &y, params.tree)?),
        ClassifierKind::Boosted => Classifier::Boosted(Ensemble::fit(&x, &y, params.boost, params.tree)?),
    };
    let mut reference = Vec::with_capacity(3);
    for slice in SliceId::ALL {
        let xs: Vec<FeatureVector> = train.iter().filter(|k| k.slice == slice).map(UserKpi::features).collect();
        reference.push(SliceReference::from_features(&xs)?);
    }
    let mut reference = reference.into_iter();
    let reference = PerSlice::from_fn(|_| reference.next().expect("three slices"));
    let model = VerifierModel {
        classifier,
        reference,
        normalization: FeatureStats::from_features(&x)?,
        train_fraction: params.train_fraction,
        train_samples: train.len(),
    };
    Ok(TrainedVerifier { model, train, holdout })
}

pub fn train_verifier(corpus: &[UserKpi], params: &VerifierParams) -> Result<VerifierModel, VerifyError> {
    Ok(train_verifier_split(corpus, params)?.model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VerdictFlags {
    pub drift: bool,
    pub misclass: bool,
    pub conflict: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub window_id: u64,
    pub user_id: u32,
    pub predicted_slice: SliceId,
    pub true_slice: SliceId,
    pub flags: VerdictFlags,
    pub latency_us: u64,
}

/// Population stability index over matching histograms.
pub fn psi(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let a = a.max(PSI_FLOOR);
            let b = b.max(PSI_FLOOR);
            (a - b) * (a / b).ln()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DriftCheck {
    InsufficientData,
    Evaluated {
        psi: [f64; N_FEATURES],
        /// Some feature is above the threshold in this evaluation.
        over_threshold: bool,
        /// The threshold has been exceeded for enough consecutive evaluations.
        breach: bool,
    },
}

impl DriftCheck {
    pub fn is_breach(&self) -> bool {
        matches!(self, DriftCheck::Evaluated { breach: true, .. })
    }
}

#[derive(Debug, Clone)]
pub struct DriftState {
    capacity: usize,
    windows: PerSlice<VecDeque<FeatureVector>>,
    consecutive: PerSlice<u32>,
    drifting: PerSlice<bool>,
    last_psi: PerSlice<Option<[f64; N_FEATURES]>>,
}

impl DriftState {
    pub fn new(capacity: usize) -> Self {
        DriftState {
            capacity,
            windows: PerSlice::default(),
            consecutive: PerSlice::default(),
            drifting: PerSlice::default(),
            last_psi: PerSlice::default(),
        }
    }

    pub fn push(&mut self, slice: SliceId, x: FeatureVector) {
        let w = self.windows.get_mut(slice);
        if w.len() == self.capacity {
            w.pop_front();
        }
        w.push_back(x);
    }

    pub fn len(&self, slice: SliceId) -> usize {
        self.windows.get(slice).len()
    }

    pub fn is_drifting(&self, slice: SliceId) -> bool {
        *self.drifting.get(slice)
    }

    pub fn last_psi(&self, slice: SliceId) -> Option<[f64; N_FEATURES]> {
        *self.last_psi.get(slice)
    }
}

/// One drift evaluation for `slice` against its reference histogram.
pub fn check_drift(state: &mut DriftState, slice: SliceId, reference: &SliceReference, params: &VerifierParams) -> DriftCheck {
    let window = state.windows.get(slice);
    if window.len() * 2 < state.capacity {
        return DriftCheck::InsufficientData;
    }
    let psi_values: [f64; N_FEATURES] = std::array::from_fn(|f| {
        let p = reference.stats.proportions(f, window.iter().map(|x| x.0[f]));
        psi(&p, &reference.histogram[f])
    });
    let over = psi_values.iter().any(|&v| v > params.psi_threshold);
    let run = state.consecutive.get_mut(slice);
    *run = if over { *run + 1 } else { 0 };
    let breach = *run >= params.psi_consecutive;
    *state.drifting.get_mut(slice) = breach;
    *state.last_psi.get_mut(slice) = Some(psi_values);
    DriftCheck::Evaluated {
        psi: psi_values,
        over_threshold: over,
        breach,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub x: FeatureVector,
    pub class: SliceId,
    pub window_id: u64,
}

/// Bounded FIFO of recent normalized predictions.
#[derive(Debug, Clone)]
pub struct ConflictCache {
    capacity: usize,
    epsilon: f64,
    entries: VecDeque<CacheEntry>,
}

impl ConflictCache {
    pub fn new(capacity: usize, epsilon: f64) -> Self {
        ConflictCache {
            capacity,
            epsilon,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True when a cached entry within epsilon carries a different class.
    /// The query is appended afterwards.
    pub fn check_conflict(&mut self, x: FeatureVector, class: SliceId, window_id: u64) -> bool {
        let conflict = self
            .entries
            .iter()
            .any(|e| e.class != class && e.x.distance(&x) <= self.epsilon);
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(CacheEntry { x, class, window_id });
        conflict
    }
}

#[derive(Debug, Clone)]
pub struct VerifierState {
    pub drift: DriftState,
    pub cache: ConflictCache,
}

impl VerifierState {
    pub fn new(params: &VerifierParams) -> Self {
        VerifierState {
            drift: DriftState::new(params.drift_window),
            cache: ConflictCache::new(params.conflict_capacity, params.conflict_epsilon),
        }
    }
}

pub fn verify_sample(model: &VerifierModel, state: &mut VerifierState, kpi: &UserKpi) -> Verdict {
    let start = Instant::now();
    let x = kpi.features();
    let predicted = model.predict(&x);
    let z = zscore_normalize(&x, &model.normalization);
    let conflict = state.cache.check_conflict(z, predicted, kpi.window_id);
    state.drift.push(kpi.slice, x);
    let drift = state.drift.is_drifting(kpi.slice);
    let latency_us = start.elapsed().as_micros() as u64;
    Verdict {
        window_id: kpi.window_id,
        user_id: kpi.user_id,
        predicted_slice: predicted,
        true_slice: kpi.slice,
        flags: VerdictFlags {
            drift,
            misclass: predicted != kpi.slice,
            conflict,
        },
        latency_us,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscalationReason {
    Drift,
    MisclassRate,
    Conflict,
}

impl EscalationReason {
    pub const ALL: [EscalationReason; 3] = [
        EscalationReason::Drift,
        EscalationReason::MisclassRate,
        EscalationReason::Conflict,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EscalationReason::Drift => "drift",
            EscalationReason::MisclassRate => "misclass_rate",
            EscalationReason::Conflict => "conflict",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl std::fmt::Display for EscalationReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Escalation {
    pub reason: EscalationReason,
    pub window_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscalationPolicy {
    pub misclass_rate_threshold: f64,
    pub misclass_windows: usize,
}

impl From<&VerifierParams> for EscalationPolicy {
    fn from(p: &VerifierParams) -> Self {
        EscalationPolicy {
            misclass_rate_threshold: p.misclass_rate_threshold,
            misclass_windows: p.misclass_windows,
        }
    }
}

/// Applies the escalation policy window by window; each reason fires at
/// most once.
#[derive(Debug, Clone)]
pub struct Escalator {
    policy: EscalationPolicy,
    fired: [bool; 3],
    history: VecDeque<(u64, u64)>,
}

impl Escalator {
    pub fn new(policy: EscalationPolicy) -> Self {
        Escalator {
            policy,
            fired: [false; 3],
            history: VecDeque::new(),
        }
    }

    fn fire(&mut self, reason: EscalationReason, window_id: u64, out: &mut Vec<Escalation>) {
        let slot = &mut self.fired[reason as usize];
        if !*slot {
            *slot = true;
            out.push(Escalation { reason, window_id });
        }
    }

    pub fn observe_window(&mut self, window_id: u64, verdicts: &[Verdict], drift_breach: bool) -> Vec<Escalation> {
        let mut out = Vec::new();
        if drift_breach || verdicts.iter().any(|v| v.flags.drift) {
            self.fire(EscalationReason::Drift, window_id, &mut out);
        }
        let errors = verdicts.iter().filter(|v| v.flags.misclass).count() as u64;
        self.history.push_back((errors, verdicts.len() as u64));
        if self.history.len() > self.policy.misclass_windows {
            self.history.pop_front();
        }
        if self.history.len() == self.policy.misclass_windows {
            let (e, n) = self.history.iter().fold((0, 0), |(a, b), &(e, n)| (a + e, b + n));
            if n > 0 && e as f64 / n as f64 > self.policy.misclass_rate_threshold {
                self.fire(EscalationReason::MisclassRate, window_id, &mut out);
            }
        }
        if verdicts.iter().any(|v| v.flags.conflict) {
            self.fire(EscalationReason::Conflict, window_id, &mut out);
        }
        out
    }
}

/// Runs the policy over a verdict stream, grouping consecutive verdicts by
/// window.
pub fn escalate(verdicts: &[Verdict], policy: EscalationPolicy) -> Vec<Escalation> {
    let mut esc = Escalator::new(policy);
    let mut out = Vec::new();
    for group in verdicts.chunk_by(|a, b| a.window_id == b.window_id) {
        out.extend(esc.observe_window(group[0].window_id, group, false));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub p50: u64,
    pub p95: u64,
    pub p99: u64,
    pub max: u64,
}

/// Nearest-rank percentile of sorted values: the element at 1-based rank
/// `ceil(q * n)`.
pub fn nearest_rank_u64(sorted: &[u64], q: f64) -> u64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

pub fn latency_stats_of(values: &[u64]) -> Result<LatencyStats, VerifyError> {
    if values.is_empty() {
        return Err(VerifyError::NoVerdicts);
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    Ok(LatencyStats {
        count: v.len(),
        p50: nearest_rank_u64(&v, 0.50),
        p95: nearest_rank_u64(&v, 0.95),
        p99: nearest_rank_u64(&v, 0.99),
        max: *v.last().expect("nonempty"),
    })
}

pub fn latency_stats(verdicts: &[Verdict]) -> Result<LatencyStats, VerifyError> {
    latency_stats_of(&verdicts.iter().map(|v| v.latency_us).collect::<Vec<_>>())
}

/// Flag and drift-evaluation tallies over a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EventSummary {
    pub verdicts: u64,
    pub misclass: u64,
    pub conflict: u64,
    pub drift_flagged: u64,
    pub drift_evaluations: u64,
    pub breach_evaluations: u64,
}

impl EventSummary {
    fn add_verdict(&mut self, v: &Verdict) {
        self.verdicts += 1;
        self.misclass += u64::from(v.flags.misclass);
        self.conflict += u64::from(v.flags.conflict);
        self.drift_flagged += u64::from(v.flags.drift);
    }
}

#[derive(Debug, Clone)]
pub struct WindowVerdicts {
    pub window_id: u64,
    pub verdicts: Vec<Verdict>,
    pub drift: PerSlice<DriftCheck>,
    pub escalations: Vec<Escalation>,
}

/// Stateful verifier instance: model plus drift, conflict and escalation
/// state.
#[derive(Debug, Clone)]
pub struct Verifier {
    model: Arc<VerifierModel>,
    params: VerifierParams,
    state: VerifierState,
    escalator: Escalator,
    summary: EventSummary,
    confusion: ConfusionMatrix,
}

impl Verifier {
    pub fn new(model: Arc<VerifierModel>, params: VerifierParams) -> Self {
        Verifier {
            state: VerifierState::new(&params),
            escalator: Escalator::new(EscalationPolicy::from(&params)),
            model,
            params,
            summary: EventSummary::default(),
            confusion: ConfusionMatrix::default(),
        }
    }

    pub fn model(&self) -> &Arc<VerifierModel> {
        &self.model
    }

    pub fn swap_model(&mut self, model: Arc<VerifierModel>) {
        self.model = model;
    }

    pub fn state(&self) -> &VerifierState {
        &self.state
    }

    pub fn summary(&self) -> EventSummary {
        self.summary
    }

    pub fn confusion(&self) -> ConfusionMatrix {
        self.confusion
    }

    pub fn verify(&mut self, kpi: &UserKpi) -> Verdict {
        let v = verify_sample(&self.model, &mut self.state, kpi);
        self.summary.add_verdict(&v);
        self.confusion.record(v.true_slice.index(), v.predicted_slice.index());
        v
    }

    /// Verifies every user of one window, then evaluates drift and the
    /// escalation policy once.
    pub fn process_window(&mut self, window_id: u64, users: &[UserKpi]) -> WindowVerdicts {
        let verdicts: Vec<Verdict> = users.iter().map(|k| self.verify(k)).collect();
        let mut drift = PerSlice::from_fn(|_| DriftCheck::InsufficientData);
        for slice in SliceId::ALL {
            let check = check_drift(&mut self.state.drift, slice, self.model.reference.get(slice), &self.params);
            if let DriftCheck::Evaluated { breach, .. } = check {
                self.summary.drift_evaluations += 1;
                self.summary.breach_evaluations += u64::from(breach);
            }
            *drift.get_mut(slice) = check;
        }
        let breach = drift.iter().any(|(_, c)| c.is_breach());
        let escalations = self.escalator.observe_window(window_id, &verdicts, breach);
        WindowVerdicts {
            window_id,
            verdicts,
            drift,
            escalations,
        }
    }

    pub fn process_report(&mut self, report: &KpiReport) -> WindowVerdicts {
        self.process_window(report.window_id, &report.users)
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: ClassificationReport,
    pub verdicts: Vec<Verdict>,
    pub escalations: Vec<Escalation>,
    pub summary: EventSummary,
    /// Wall time of each window's full verdict batch.
    pub window_batch_us: Vec<u64>,
}

/// Streams a labelled dataset through a fresh verifier, one window per run
/// of equal `window_id`.
pub fn evaluate(model: Arc<VerifierModel>, dataset: &[UserKpi], params: &VerifierParams) -> Result<Evaluation, VerifyError> {
    let mut verifier = Verifier::new(model, params.clone());
    let mut verdicts = Vec::with_capacity(dataset.len());
    let mut escalations = Vec::new();
    let mut window_batch_us = Vec::new();
    for group in dataset.chunk_by(|a, b| a.window_id == b.window_id) {
        let start = Instant::now();
        let w = verifier.process_window(group[0].window_id, group);
        window_batch_us.push(start.elapsed().as_micros() as u64);
        verdicts.extend(w.verdicts);
        escalations.extend(w.escalations);
    }
    Ok(Evaluation {
        report: classification_report(&verifier.confusion())?,
        verdicts,
        escalations,
        summary: verifier.summary(),
        window_batch_us,
    })
}
