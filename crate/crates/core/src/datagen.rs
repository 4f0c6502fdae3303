//! Synthetic labelled KPI datasets, stratified splits and CSV interchange.
//!
//! Each slice draws its three KPIs from zero-truncated Gaussians coupled by
//! a Gaussian copula.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::domain::{PerSlice, SliceId, UserKpi, N_FEATURES, N_SLICES};

pub const CSV_HEADER: [&str; 6] = [
    "window_id",
    "user_id",
    "slice",
    "tx_bitrate_mbps",
    "tx_packets",
    "dl_buffer_bytes",
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid correlation matrix for {slice}: {reason}")]
    BadCorrelation { slice: SliceId, reason: String },
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("fraction {fraction} gives no samples for class {slice}")]
    EmptyStratum { fraction: f64, slice: SliceId },
    #[error("fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("header mismatch: expected `{}`", CSV_HEADER.join(","))]
    Header,
    #[error("line {line}: {reason}")]
    Row { line: u64, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Location and scale of a Gaussian truncated below at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncNormal {
    pub mean: f64,
    pub std: f64,
}

impl TruncNormal {
    pub const fn new(mean: f64, std: f64) -> Self {
        TruncNormal { mean, std }
    }

    fn lower_mass(&self) -> f64 {
        std_normal().cdf(-self.mean / self.std)
    }

    /// Quantile function of the truncated distribution.
    pub fn quantile(&self, u: f64) -> f64 {
        let lo = self.lower_mass();
        let p = (lo + u * (1.0 - lo)).clamp(1e-15, 1.0 - 1e-15);
        (self.mean + self.std * std_normal().inverse_cdf(p)).max(0.0)
    }

    /// Mean of the truncated distribution.
    pub fn truncated_mean(&self) -> f64 {
        let a = -self.mean / self.std;
        let n = std_normal();
        self.mean + self.std * n.pdf(a) / (1.0 - n.cdf(a))
    }

    /// Standard deviation of the truncated distribution.
    pub fn truncated_std(&self) -> f64 {
        let a = -self.mean / self.std;
        let n = std_normal();
        let lambda = n.pdf(a) / (1.0 - n.cdf(a));
        self.std * (1.0 + a * lambda - lambda * lambda).max(0.0).sqrt()
    }
}

fn std_normal() -> Normal {
    Normal::standard()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceKpiDistribution {
    /// Marginals in feature order: bitrate, packets, buffer.
    pub marginals: [TruncNormal; N_FEATURES],
    pub correlation: [[f64; N_FEATURES]; N_FEATURES],
}

impl SliceKpiDistribution {
    pub fn independent(marginals: [TruncNormal; N_FEATURES]) -> Self {
        SliceKpiDistribution {
            marginals,
            correlation: identity(),
        }
    }
}

fn identity() -> [[f64; N_FEATURES]; N_FEATURES] {
    std::array::from_fn(|i| std::array::from_fn(|j| if i == j { 1.0 } else { 0.0 }))
}

/// Lower-triangular factor of a symmetric positive semi-definite matrix.
pub fn cholesky_psd(m: &[[f64; N_FEATURES]; N_FEATURES]) -> Result<[[f64; N_FEATURES]; N_FEATURES], String> {
    const TOL: f64 = 1e-10;
    for i in 0..N_FEATURES {
        if (m[i][i] - 1.0).abs() > 1e-12 {
            return Err(format!("diagonal entry {i} is {} not 1", m[i][i]));
        }
        for j in 0..N_FEATURES {
            if !m[i][j].is_finite() || (m[i][j] - m[j][i]).abs() > 1e-12 {
                return Err("not symmetric".into());
            }
            if m[i][j].abs() > 1.0 {
                return Err(format!("entry ({i},{j}) outside [-1, 1]"));
            }
        }
    }
    let mut l = [[0.0; N_FEATURES]; N_FEATURES];
    for i in 0..N_FEATURES {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = m[i][i] - s;
                if d < -TOL {
                    return Err("not positive semi-definite".into());
                }
                l[i][j] = d.max(0.0).sqrt();
            } else if l[j][j] > TOL {
                l[i][j] = (m[i][j] - s) / l[j][j];
            } else if (m[i][j] - s).abs() > TOL {
                return Err("not positive semi-definite".into());
            }
        }
    }
    Ok(l)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub slices: PerSlice<SliceKpiDistribution>,
    pub n_samples: usize,
    /// Relative class weights in slice order.
    pub class_balance: [f64; N_SLICES],
    /// Pulls eMBB and mMTC packet-count distributions toward each other.
    pub overlap: f64,
    pub users_per_window: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig::embb_oriented()
    }
}

impl GenConfig {
    fn with_slices(slices: PerSlice<SliceKpiDistribution>) -> Self {
        GenConfig {
            slices,
            n_samples: 10_000,
            class_balance: [1.0; N_SLICES],
            overlap: 0.5,
            users_per_window: 18,
            seed: 42,
        }
    }

    /// KPI fingerprints under a bitrate-maximizing agent: eMBB and mMTC
    /// share rate and buffer profiles and differ mostly in packet counts.
    pub fn embb_oriented() -> Self {
        let rho = [[1.0, 0.6, 0.2], [0.6, 1.0, 0.2], [0.2, 0.2, 1.0]];
        Self::with_slices(PerSlice {
            embb: SliceKpiDistribution {
                marginals: [
                    TruncNormal::new(6.0, 2.5),
                    TruncNormal::new(520.0, 100.0),
                    TruncNormal::new(80_000.0, 50_000.0),
                ],
                correlation: rho,
            },
            mmtc: SliceKpiDistribution {
                marginals: [
                    TruncNormal::new(6.0, 2.5),
                    TruncNormal::new(200.0, 100.0),
                    TruncNormal::new(80_000.0, 50_000.0),
                ],
                correlation: rho,
            },
            urllc: SliceKpiDistribution {
                marginals: [
                    TruncNormal::new(1.0, 0.8),
                    TruncNormal::new(260.0, 120.0),
                    TruncNormal::new(4_000.0, 4_000.0),
                ],
                correlation: identity(),
            },
        })
    }

    /// KPI fingerprints under a latency-oriented agent: URLLC queues stay
    /// nearly empty and eMBB runs at a distinctly high rate.
    pub fn urllc_oriented() -> Self {
        let rho = [[1.0, 0.6, 0.2], [0.6, 1.0, 0.2], [0.2, 0.2, 1.0]];
        Self::with_slices(PerSlice {
            embb: SliceKpiDistribution {
                marginals: [
                    TruncNormal::new(14.0, 3.0),
                    TruncNormal::new(420.0, 160.0),
                    TruncNormal::new(220_000.0, 80_000.0),
                ],
                correlation: rho,
            },
            mmtc: SliceKpiDistribution {
                marginals: [
                    TruncNormal::new(2.0, 1.2),
                    TruncNormal::new(140.0, 160.0),
                    TruncNormal::new(12_000.0, 6_000.0),
                ],
                correlation: rho,
            },
            urllc: SliceKpiDistribution {
                marginals: [
                    TruncNormal::new(1.0, 0.8),
                    TruncNormal::new(260.0, 120.0),
                    TruncNormal::new(1_500.0, 1_500.0),
                ],
                correlation: identity(),
            },
        })
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_samples == 0 {
            return Err(DataError::InvalidConfig("n_samples must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(DataError::InvalidConfig("overlap must lie in [0, 1]".into()));
        }
        if self.users_per_window == 0 {
            return Err(DataError::InvalidConfig("users_per_window must be > 0".into()));
        }
        if self.class_balance.iter().any(|w| !w.is_finite() || *w < 0.0) || self.class_balance.iter().sum::<f64>() <= 0.0 {
            return Err(DataError::InvalidConfig("class_balance weights must be >= 0 with a positive sum".into()));
        }
        for (slice, dist) in self.slices.iter() {
            for m in &dist.marginals {
                if !(m.std.is_finite() && m.std > 0.0 && m.mean.is_finite()) {
                    return Err(DataError::InvalidConfig(format!("{slice}: marginal std must be > 0")));
                }
            }
            cholesky_psd(&dist.correlation).map_err(|reason| DataError::BadCorrelation { slice, reason })?;
        }
        Ok(())
    }

    /// Marginals after applying the overlap knob.
    pub fn effective_marginals(&self, slice: SliceId) -> [TruncNormal; N_FEATURES] {
        let mut m = self.slices.get(slice).marginals;
        if slice != SliceId::Urllc {
            let e = self.slices.embb.marginals[1];
            let c = self.slices.mmtc.marginals[1];
            let mid = TruncNormal::new((e.mean + c.mean) / 2.0, (e.std + c.std) / 2.0);
            let own = m[1];
            m[1] = TruncNormal::new(
                own.mean + self.overlap * (mid.mean - own.mean),
                own.std + self.overlap * (mid.std - own.std),
            );
        }
        m
    }
}

/// Splits `n` into integer counts proportional to `weights`; leftovers go to
/// the largest remainders, ties to the lower index.
pub fn apportion(n: usize, weights: &[f64; N_SLICES]) -> [usize; N_SLICES] {
    let total: f64 = weights.iter().sum();
    let exact = weights.map(|w| w / total * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..N_SLICES).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Draws a labelled dataset using the config's own seed.
pub fn generate(config: &GenConfig) -> Result<Vec<UserKpi>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    sample_dataset(config, &mut rng)
}

pub fn sample_dataset(config: &GenConfig, rng: &mut impl Rng) -> Result<Vec<UserKpi>, DataError> {
    config.validate()?;
    let factors = PerSlice::from_fn(|s| cholesky_psd(&config.slices.get(s).correlation).expect("validated"));
    let marginals = PerSlice::from_fn(|s| config.effective_marginals(s));
    let counts = apportion(config.n_samples, &config.class_balance);
    let mut labels: Vec<SliceId> = Vec::with_capacity(config.n_samples);
    for (i, &c) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat_n(SliceId::ALL[i], c));
    }
    labels.shuffle(rng);
    let normal = std_normal();
    let mut out = Vec::with_capacity(config.n_samples);
    for (i, slice) in labels.into_iter().enumerate() {
        let l = factors.get(slice);
        let e: [f64; N_FEATURES] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let z: [f64; N_FEATURES] = std::array::from_fn(|r| (0..=r).map(|k| l[r][k] * e[k]).sum());
        let m = marginals.get(slice);
        let x: [f64; N_FEATURES] = std::array::from_fn(|f| m[f].quantile(normal.cdf(z[f])));
        out.push(UserKpi {
            user_id: (i % config.users_per_window) as u32,
            slice,
            tx_bitrate_mbps: x[0],
            tx_packets: x[1].round() as u64,
            dl_buffer_bytes: x[2].round() as u64,
            window_id: (i / config.users_per_window) as u64,
        });
    }
    Ok(out)
}

/// Per class, `round(fraction * n_c)` samples drawn without replacement.
/// Both halves keep the dataset's original order.
pub fn stratified_split(
    dataset: &[UserKpi],
    fraction: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<UserKpi>, Vec<UserKpi>), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::BadFraction(fraction));
    }
    let mut chosen = vec![false; dataset.len()];
    for slice in SliceId::ALL {
        let members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset[i].slice == slice).collect();
        if members.is_empty() {
            continue;
        }
        let k = (fraction * members.len() as f64).round() as usize;
        if k == 0 {
            return Err(DataError::EmptyStratum { fraction, slice });
        }
        for &i in members.choose_multiple(rng, k) {
            chosen[i] = true;
        }
    }
    let mut subset = Vec::new();
    let mut remainder = Vec::new();
    for (kpi, pick) in dataset.iter().zip(chosen) {
        if pick {
            subset.push(kpi.clone());
        } else {
            remainder.push(kpi.clone());
        }
    }
    Ok((subset, remainder))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvDataset {
    pub kpis: Vec<UserKpi>,
    /// Number of empty KPI cells filled with the column median.
    pub imputed_cells: usize,
}

pub fn save_csv(dataset: &[UserKpi], path: &Path) -> Result<(), DataError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for k in dataset {
        w.write_record([
            k.window_id.to_string(),
            k.user_id.to_string(),
            k.slice.as_str().to_string(),
            k.tx_bitrate_mbps.to_string(),
            k.tx_packets.to_string(),
            k.dl_buffer_bytes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

struct RawRow {
    window_id: u64,
    user_id: u32,
    slice: SliceId,
    kpi: [Option<f64>; N_FEATURES],
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

pub fn load_csv(path: &Path) -> Result<CsvDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut records = reader.records();
    match records.next() {
        Some(Ok(h)) if h.iter().eq(CSV_HEADER.iter().copied()) => {}
        Some(Err(e)) => return Err(e.into()),
        _ => return Err(DataError::Header),
    }
    let mut rows = Vec::new();
    for record in records {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |reason: String| DataError::Row { line, reason };
        if record.len() != CSV_HEADER.len() {
            return Err(bad(format!("expected {} fields, found {}", CSV_HEADER.len(), record.len())));
        }
        let window_id = record[0].trim().parse().map_err(|_| bad(format!("bad window_id `{}`", &record[0])))?;
        let user_id = record[1].trim().parse().map_err(|_| bad(format!("bad user_id `{}`", &record[1])))?;
        let slice = SliceId::parse(record[2].trim()).ok_or_else(|| bad(format!("bad slice `{}`", &record[2])))?;
        let mut kpi = [None; N_FEATURES];
        for f in 0..N_FEATURES {
            let cell = record[3 + f].trim();
            if cell.is_empty() {
                continue;
            }
            let v = if f == 0 {
                cell.parse::<f64>().ok().filter(|v| v.is_finite() && *v >= 0.0)
            } else {
                cell.parse::<u64>().ok().map(|v| v as f64)
            };
            kpi[f] = Some(v.ok_or_else(|| bad(format!("bad {} `{cell}`", CSV_HEADER[3 + f])))?);
        }
        rows.push(RawRow {
            window_id,
            user_id,
            slice,
            kpi,
        });
    }
    let mut fill = [0.0; N_FEATURES];
    for (f, slot) in fill.iter_mut().enumerate() {
        let mut observed: Vec<f64> = rows.iter().filter_map(|r| r.kpi[f]).collect();
        let m = median(&mut observed).unwrap_or(0.0);
        *slot = if f == 0 { m } else { m.round() };
    }
    let mut imputed_cells = 0;
    let kpis = rows
        .into_iter()
        .map(|r| {
            let v: [f64; N_FEATURES] = std::array::from_fn(|f| {
                r.kpi[f].unwrap_or_else(|| {
                    imputed_cells += 1;
                    fill[f]
                })
            });
            UserKpi {
                user_id: r.user_id,
                slice: r.slice,
                tx_bitrate_mbps: v[0],
                tx_packets: v[1] as u64,
                dl_buffer_bytes: v[2] as u64,
                window_id: r.window_id,
            }
        })
        .collect();
    Ok(CsvDataset { kpis, imputed_cells })
}
