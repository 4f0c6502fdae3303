//! Shared domain types: slices, per-user KPIs, slicing actions and the
//! reference feature statistics used for normalization and drift binning.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of KPI features per sample.
pub const N_FEATURES: usize = 3;
/// Number of network slices (and classifier classes).
pub const N_SLICES: usize = 3;
/// Number of histogram bins kept in [`FeatureStats`].
pub const N_BINS: usize = 10;

const EDGE_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("empty reference set")]
    EmptyReference,
    #[error("non-finite value in reference set")]
    NonFinite,
    #[error("unknown slice index {0}")]
    UnknownSlice(usize),
}

/// Network slice. The ordinal doubles as class index everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceId {
    Embb,
    Mmtc,
    Urllc,
}

impl SliceId {
    pub const ALL: [SliceId; N_SLICES] = [SliceId::Embb, SliceId::Mmtc, SliceId::Urllc];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Result<Self, DomainError> {
        Self::ALL
            .get(index)
            .copied()
            .ok_or(DomainError::UnknownSlice(index))
    }

    /// Wire / file name (`embb`, `mmtc`, `urllc`).
    pub fn as_str(self) -> &'static str {
        match self {
            SliceId::Embb => "embb",
            SliceId::Mmtc => "mmtc",
            SliceId::Urllc => "urllc",
        }
    }

    /// Name used in rendered reports.
    pub fn display_name(self) -> &'static str {
        match self {
            SliceId::Embb => "eMBB",
            SliceId::Mmtc => "mMTC",
            SliceId::Urllc => "URLLC",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "embb" => Some(SliceId::Embb),
            "mmtc" => Some(SliceId::Mmtc),
            "urllc" => Some(SliceId::Urllc),
            _ => None,
        }
    }
}

impl fmt::Display for SliceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One value per slice, serialized as `{"embb": .., "mmtc": .., "urllc": ..}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PerSlice<T> {
    pub embb: T,
    pub mmtc: T,
    pub urllc: T,
}

impl<T> PerSlice<T> {
    pub fn from_fn(mut f: impl FnMut(SliceId) -> T) -> Self {
        PerSlice {
            embb: f(SliceId::Embb),
            mmtc: f(SliceId::Mmtc),
            urllc: f(SliceId::Urllc),
        }
    }

    pub fn get(&self, slice: SliceId) -> &T {
        match slice {
            SliceId::Embb => &self.embb,
            SliceId::Mmtc => &self.mmtc,
            SliceId::Urllc => &self.urllc,
        }
    }

    pub fn get_mut(&mut self, slice: SliceId) -> &mut T {
        match slice {
            SliceId::Embb => &mut self.embb,
            SliceId::Mmtc => &mut self.mmtc,
            SliceId::Urllc => &mut self.urllc,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> PerSlice<U> {
        PerSlice {
            embb: f(&self.embb),
            mmtc: f(&self.mmtc),
            urllc: f(&self.urllc),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (SliceId, &T)> {
        SliceId::ALL.into_iter().map(move |s| (s, self.get(s)))
    }
}

/// One user's telemetry for one control window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserKpi {
    pub user_id: u32,
    pub slice: SliceId,
    pub tx_bitrate_mbps: f64,
    pub tx_packets: u64,
    pub dl_buffer_bytes: u64,
    pub window_id: u64,
}

impl UserKpi {
    pub fn features(&self) -> FeatureVector {
        FeatureVector([
            self.tx_bitrate_mbps,
            self.tx_packets as f64,
            self.dl_buffer_bytes as f64,
        ])
    }

    pub fn is_valid(&self) -> bool {
        self.tx_bitrate_mbps.is_finite() && self.tx_bitrate_mbps >= 0.0
    }
}

/// `(tx_bitrate_mbps, tx_packets, dl_buffer_bytes)` in that order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; N_FEATURES]);

impl FeatureVector {
    pub const NAMES: [&'static str; N_FEATURES] =
        ["tx_bitrate_mbps", "tx_packets", "dl_buffer_bytes"];

    pub fn get(&self, feature: usize) -> f64 {
        self.0[feature]
    }

    pub fn distance(&self, other: &FeatureVector) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchedulerPolicy {
    #[serde(rename = "RR")]
    RoundRobin,
    #[serde(rename = "WF")]
    Waterfilling,
    #[serde(rename = "PF")]
    ProportionalFair,
}

impl SchedulerPolicy {
    pub const ALL: [SchedulerPolicy; 3] = [
        SchedulerPolicy::RoundRobin,
        SchedulerPolicy::Waterfilling,
        SchedulerPolicy::ProportionalFair,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerPolicy::RoundRobin => "RR",
            SchedulerPolicy::Waterfilling => "WF",
            SchedulerPolicy::ProportionalFair => "PF",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SliceAllocation {
    pub prbs: u32,
    pub scheduler: SchedulerPolicy,
}

/// Per-slice PRB share and scheduler: the control output of an agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SlicingAction {
    pub embb: SliceAllocation,
    pub mmtc: SliceAllocation,
    pub urllc: SliceAllocation,
}

impl SlicingAction {
    pub fn new(prbs: [u32; N_SLICES], schedulers: [SchedulerPolicy; N_SLICES]) -> Self {
        let alloc = |i: usize| SliceAllocation {
            prbs: prbs[i],
            scheduler: schedulers[i],
        };
        SlicingAction {
            embb: alloc(0),
            mmtc: alloc(1),
            urllc: alloc(2),
        }
    }

    pub fn uniform(prbs: [u32; N_SLICES], scheduler: SchedulerPolicy) -> Self {
        Self::new(prbs, [scheduler; N_SLICES])
    }

    pub fn get(&self, slice: SliceId) -> SliceAllocation {
        match slice {
            SliceId::Embb => self.embb,
            SliceId::Mmtc => self.mmtc,
            SliceId::Urllc => self.urllc,
        }
    }

    pub fn prbs(&self) -> [u32; N_SLICES] {
        [self.embb.prbs, self.mmtc.prbs, self.urllc.prbs]
    }

    pub fn total_prbs(&self) -> u64 {
        self.prbs().iter().map(|&p| u64::from(p)).sum()
    }
}

/// Splits `total` PRBs proportionally to `percents` using largest
/// remainders (ties go to the lower slice index). Sums exactly to `total`.
pub fn split_prbs(total: u32, percents: [u32; N_SLICES]) -> [u32; N_SLICES] {
    let pct_sum: u64 = percents.iter().map(|&p| u64::from(p)).sum();
    if pct_sum == 0 {
        return [0; N_SLICES];
    }
    let mut out = [0u32; N_SLICES];
    let mut rems = [0u64; N_SLICES];
    for i in 0..N_SLICES {
        let scaled = u64::from(total) * u64::from(percents[i]);
        out[i] = (scaled / pct_sum) as u32;
        rems[i] = scaled % pct_sum;
    }
    let mut left = total.saturating_sub(out.iter().sum());
    let mut order: Vec<usize> = (0..N_SLICES).collect();
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    for i in order {
        if left == 0 {
            break;
        }
        if rems[i] > 0 {
            out[i] += 1;
            left -= 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActionViolation {
    NoPrbsConfigured,
    OverAllocated { sum: u64, total: u32 },
}

impl fmt::Display for ActionViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActionViolation::NoPrbsConfigured => f.write_str("total_prbs must be > 0"),
            ActionViolation::OverAllocated { sum, total } => write!(f, "sum {sum} > {total}"),
        }
    }
}

/// Checks an action against the cell's PRB budget. Violations are data.
pub fn validate_action(action: &SlicingAction, total_prbs: u32) -> Result<(), Vec<ActionViolation>> {
    let mut violations = Vec::new();
    if total_prbs == 0 {
        violations.push(ActionViolation::NoPrbsConfigured);
    }
    // prbs are unsigned, so the per-slice lower bound holds by construction.
    let sum = action.total_prbs();
    if sum > u64::from(total_prbs) {
        violations.push(ActionViolation::OverAllocated {
            sum,
            total: total_prbs,
        });
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Per-feature moments and decile histogram edges of a reference set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub count: usize,
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
    /// `N_BINS + 1` strictly increasing edges per feature.
    pub edges: [Vec<f64>; N_FEATURES],
}

impl FeatureStats {
    pub fn from_kpis(dataset: &[UserKpi]) -> Result<Self, DomainError> {
        let features: Vec<FeatureVector> = dataset.iter().map(UserKpi::features).collect();
        Self::from_features(&features)
    }

    pub fn from_features(features: &[FeatureVector]) -> Result<Self, DomainError> {
        if features.is_empty() {
            return Err(DomainError::EmptyReference);
        }
        if features.iter().any(|x| x.0.iter().any(|v| !v.is_finite())) {
            return Err(DomainError::NonFinite);
        }
        let n = features.len() as f64;
        let mut mean = [0.0; N_FEATURES];
        let mut std = [0.0; N_FEATURES];
        let mut edges: [Vec<f64>; N_FEATURES] = Default::default();
        for f in 0..N_FEATURES {
            let mut column: Vec<f64> = features.iter().map(|x| x.0[f]).collect();
            let m = column.iter().sum::<f64>() / n;
            let var = column.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[f] = m;
            std[f] = var.max(0.0).sqrt();
            column.sort_by(f64::total_cmp);
            edges[f] = decile_edges(&column);
        }
        Ok(FeatureStats {
            count: features.len(),
            mean,
            std,
            edges,
        })
    }

    /// Histogram bin of `value` for `feature`, in `0..N_BINS`. Values below
    /// the first edge land in bin 0, values above the last in the top bin.
    pub fn bin(&self, feature: usize, value: f64) -> usize {
        let interior = &self.edges[feature][1..N_BINS];
        interior.partition_point(|&edge| edge <= value)
    }

    /// Bin proportions of `values` against this reference's edges.
    pub fn proportions(&self, feature: usize, values: impl IntoIterator<Item = f64>) -> [f64; N_BINS] {
        let mut counts = [0usize; N_BINS];
        let mut total = 0usize;
        for v in values {
            counts[self.bin(feature, v)] += 1;
            total += 1;
        }
        let mut out = [0.0; N_BINS];
        if total > 0 {
            for (o, c) in out.iter_mut().zip(counts) {
                *o = c as f64 / total as f64;
            }
        }
        out
    }
}

/// Nearest-rank value of an already sorted, nonempty column.
pub(crate) fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

fn decile_edges(sorted: &[f64]) -> Vec<f64> {
    let mut edges: Vec<f64> = (0..=N_BINS)
        .map(|k| nearest_rank(sorted, k as f64 / N_BINS as f64))
        .collect();
    for i in 1..edges.len() {
        let prev = edges[i - 1];
        if edges[i] <= prev {
            // at large magnitudes prev + 1e-9 can round back to prev
            edges[i] = (prev + EDGE_EPSILON).max(prev.next_up());
        }
    }
    edges
}

/// Shorthand for [`FeatureStats::from_kpis`].
pub fn feature_stats(dataset: &[UserKpi]) -> Result<FeatureStats, DomainError> {
    FeatureStats::from_kpis(dataset)
}

/// Z-score each coordinate; degenerate (zero-std) coordinates map to 0.
pub fn zscore_normalize(x: &FeatureVector, stats: &FeatureStats) -> FeatureVector {
    let mut out = [0.0; N_FEATURES];
    for (f, o) in out.iter_mut().enumerate() {
        let sd = stats.std[f];
        *o = if sd > 0.0 { (x.0[f] - stats.mean[f]) / sd } else { 0.0 };
    }
    FeatureVector(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kpi(bitrate: f64, packets: u64, buffer: u64) -> UserKpi {
        UserKpi {
            user_id: 0,
            slice: SliceId::Embb,
            tx_bitrate_mbps: bitrate,
            tx_packets: packets,
            dl_buffer_bytes: buffer,
            window_id: 0,
        }
    }

    fn action(prbs: [u32; 3]) -> SlicingAction {
        SlicingAction::uniform(prbs, SchedulerPolicy::RoundRobin)
    }

    #[test]
    fn slice_ordinals_are_fixed() {
        assert_eq!(SliceId::Embb.index(), 0);
        assert_eq!(SliceId::Mmtc.index(), 1);
        assert_eq!(SliceId::Urllc.index(), 2);
        assert_eq!(SliceId::from_index(2).unwrap(), SliceId::Urllc);
        assert!(SliceId::from_index(3).is_err());
    }

    #[test]
    fn validate_action_examples() {
        assert!(validate_action(&action([20, 15, 15]), 50).is_ok());
        assert!(validate_action(&action([50, 0, 0]), 50).is_ok());
        let err = validate_action(&action([30, 30, 30]), 50).unwrap_err();
        assert_eq!(err.len(), 1);
        assert_eq!(err[0].to_string(), "sum 90 > 50");
    }

    #[test]
    fn split_prbs_largest_remainder() {
        assert_eq!(split_prbs(50, [60, 20, 20]), [30, 10, 10]);
        assert_eq!(split_prbs(50, [34, 33, 33]), [17, 17, 16]);
        assert_eq!(split_prbs(50, [20, 40, 40]), [10, 20, 20]);
        assert_eq!(split_prbs(7, [34, 33, 33]), [3, 2, 2]);
    }

    #[test]
    fn validate_action_rejects_zero_budget() {
        let err = validate_action(&action([0, 0, 0]), 0).unwrap_err();
        assert_eq!(err, vec![ActionViolation::NoPrbsConfigured]);
    }

    #[test]
    fn stats_single_sample_has_zero_std() {
        let stats = feature_stats(&[kpi(3.0, 7, 100)]).unwrap();
        assert_eq!(stats.std, [0.0; 3]);
        assert_eq!(stats.mean, [3.0, 7.0, 100.0]);
    }

    #[test]
    fn stats_population_std() {
        let stats = feature_stats(&[kpi(1.0, 0, 0), kpi(3.0, 0, 0)]).unwrap();
        assert_eq!(stats.mean[0], 2.0);
        assert_eq!(stats.std[0], 1.0);
    }

    #[test]
    fn stats_constant_feature_edges_are_padded() {
        let data = vec![kpi(5.0, 5, 5); 3];
        let stats = feature_stats(&data).unwrap();
        for f in 0..3 {
            assert_eq!(stats.std[f], 0.0);
            let e = &stats.edges[f];
            assert_eq!(e.len(), N_BINS + 1);
            assert_eq!(e[0], 5.0);
            assert!(e.windows(2).all(|w| w[0] < w[1]));
            assert!(e[N_BINS] - 5.0 < 1e-7);
        }
    }

    #[test]
    fn stats_empty_is_error() {
        assert_eq!(feature_stats(&[]).unwrap_err().to_string(), "empty reference set");
    }

    #[test]
    fn decile_edges_use_nearest_rank() {
        let data: Vec<UserKpi> = (1..=100).map(|i| kpi(i as f64, 0, 0)).collect();
        let stats = feature_stats(&data).unwrap();
        let expected: Vec<f64> = [1, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100]
            .iter()
            .map(|&v| v as f64)
            .collect();
        assert_eq!(stats.edges[0], expected);
        assert_eq!(stats.bin(0, 0.0), 0);
        assert_eq!(stats.bin(0, 9.9), 0);
        assert_eq!(stats.bin(0, 10.0), 1);
        assert_eq!(stats.bin(0, 95.0), 9);
        assert_eq!(stats.bin(0, 1e9), 9);
    }

    #[test]
    fn zscore_examples() {
        let data = vec![kpi(1.0, 2, 5), kpi(3.0, 6, 5)];
        let stats = feature_stats(&data).unwrap();
        let mean = FeatureVector(stats.mean);
        assert_eq!(zscore_normalize(&mean, &stats).0, [0.0, 0.0, 0.0]);
        let one_up = FeatureVector([
            stats.mean[0] + stats.std[0],
            stats.mean[1] + stats.std[1],
            123.0,
        ]);
        // buffer column is constant: maps to 0 whatever the input
        assert_eq!(zscore_normalize(&one_up, &stats).0, [1.0, 1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn edges_strictly_increasing(values in prop::collection::vec((0.0f64..1e7, 0u64..50, 0u64..5_000_000), 1..200)) {
            let data: Vec<UserKpi> = values.iter().map(|&(b, p, q)| kpi(b, p, q)).collect();
            let stats = feature_stats(&data).unwrap();
            for f in 0..N_FEATURES {
                prop_assert_eq!(stats.edges[f].len(), N_BINS + 1);
                prop_assert!(stats.edges[f].windows(2).all(|w| w[0] < w[1]));
                prop_assert!(stats.std[f] >= 0.0);
            }
            prop_assert_eq!(zscore_normalize(&FeatureVector(stats.mean), &stats).0, [0.0; 3]);
        }

        #[test]
        fn valid_actions_respect_budget(p in prop::array::uniform3(0u32..60), total in 1u32..120) {
            let a = action(p);
            if validate_action(&a, total).is_ok() {
                prop_assert!(a.total_prbs() <= u64::from(total));
            } else {
                prop_assert!(a.total_prbs() > u64::from(total));
            }
        }
    }
}
