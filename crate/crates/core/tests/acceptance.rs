//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every criterion prints exactly one PASS/FAIL line.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slice_verify_core::agent::{ActionCatalog, AgentKind, AgentMode, N_ACTIONS};
use slice_verify_core::bus::{decode_msg, encode_msg, BusMessage};
use slice_verify_core::datagen::{generate, load_csv, save_csv, GenConfig};
use slice_verify_core::domain::{FeatureVector, SliceId, UserKpi};
use slice_verify_core::experiment::{baseline_config, run_experiment, ExperimentConfig, RunMode};
use slice_verify_core::metrics::{classification_report, weighted_mean, ConfusionMatrix};
use slice_verify_core::ran_sim::{DriftSpec, KpiReport};
use slice_verify_core::tree::{fit_tree, load_model, save_model, Classifier, DecisionTree, TreeNode, TreeParams};
use slice_verify_core::verifier::{
    evaluate, latency_stats, train_verifier, verify_sample, ConflictCache, Escalation, EscalationReason, Verdict,
    VerdictFlags, VerifierModel, VerifierParams, VerifierState,
};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 1 -------------------------------------------------------------------------

fn accuracy_ordering() -> Outcome {
    let start = Instant::now();
    let embb = run_experiment(&ExperimentConfig::offline(AgentMode::EmbbOriented)).map_err(|e| e.to_string())?;
    let urllc = run_experiment(&ExperimentConfig::offline(AgentMode::UrllcOriented)).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let (ae, au) = (embb.classification.accuracy, urllc.classification.accuracy);
    let embb_precision = urllc.classification.class(SliceId::Embb).precision;
    let ok = au - ae >= 0.05
        && ae >= 0.75
        && au >= 0.75
        && (ae - 0.82).abs() <= 0.10
        && (au - 0.91).abs() <= 0.10
        && secs < 60.0;
    check(
        ok,
        format!("acc eMBB-oriented {ae:.4}, URLLC-oriented {au:.4} (eMBB precision {embb_precision:.4}), {secs:.1} s"),
    )
}

// 2 -------------------------------------------------------------------------

fn majority(labels: &[usize]) -> usize {
    let mut c = [0usize; 3];
    for &l in labels {
        c[l] += 1;
    }
    *c.iter().max().unwrap()
}

/// Thresholds that separate distinct values of one feature.
fn cuts(points: &[([f64; 2], usize)], f: usize) -> Vec<f64> {
    let mut v: Vec<f64> = points.iter().map(|p| p.0[f]).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect()
}

fn partition(points: &[([f64; 2], usize)], f: usize, t: f64) -> (Vec<([f64; 2], usize)>, Vec<([f64; 2], usize)>) {
    points.iter().partition(|p| p.0[f] <= t)
}

/// Most points any tree of depth <= `depth` can label correctly.
fn best_correct(points: &[([f64; 2], usize)], depth: usize) -> usize {
    let labels: Vec<usize> = points.iter().map(|p| p.1).collect();
    let mut best = majority(&labels);
    if depth == 0 {
        return best;
    }
    for f in 0..2 {
        for t in cuts(points, f) {
            let (l, r) = partition(points, f, t);
            best = best.max(best_correct(&l, depth - 1) + best_correct(&r, depth - 1));
        }
    }
    best
}

fn tree_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = TreeParams {
        max_depth: 2,
        min_samples_split: 2,
        min_gain: 0.0,
    };
    let mut mismatches = Vec::new();
    for case in 0..200 {
        let n = rng.random_range(2..=12);
        let points: Vec<([f64; 2], usize)> = (0..n)
            .map(|_| {
                (
                    [f64::from(rng.random_range(0..6u32)), f64::from(rng.random_range(0..6u32))],
                    rng.random_range(0..3usize),
                )
            })
            .collect();
        let xs: Vec<FeatureVector> = points.iter().map(|p| FeatureVector([p.0[0], p.0[1], 0.0])).collect();
        let ys: Vec<usize> = points.iter().map(|p| p.1).collect();
        let tree = fit_tree(&xs, &ys, params).map_err(|e| e.to_string())?;
        let got = xs.iter().zip(&ys).filter(|(x, &y)| tree.predict(x) == y).count();
        let optimum = best_correct(&points, 2);
        if got != optimum {
            mismatches.push(format!("case {case}: {got}/{n} vs {optimum}/{n}"));
        }
    }
    check(
        mismatches.is_empty(),
        format!("{} of 200 datasets below the exhaustive optimum {:?}", mismatches.len(), mismatches.iter().take(5).collect::<Vec<_>>()),
    )
}

// 3 -------------------------------------------------------------------------

fn metrics_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let mut m = [[0u64; 3]; 3];
        for row in &mut m {
            for c in row.iter_mut() {
                *c = rng.random_range(0..40);
            }
        }
        m[0][0] += 1;
        let r = classification_report(&ConfusionMatrix(m)).map_err(|e| e.to_string())?;
        // recompute from a flattened list of (truth, pred) pairs
        let mut pairs = Vec::new();
        for (t, row) in m.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                pairs.extend(std::iter::repeat_n((t, p), n as usize));
            }
        }
        let total = pairs.len() as f64;
        let (mut f1s, mut ps, mut rs, mut sup) = (vec![], vec![], vec![], vec![]);
        for c in 0..3 {
            let tp = pairs.iter().filter(|&&(t, p)| t == c && p == c).count() as f64;
            let pred = pairs.iter().filter(|&&(_, p)| p == c).count() as f64;
            let truth = pairs.iter().filter(|&&(t, _)| t == c).count() as f64;
            let p = if pred > 0.0 { tp / pred } else { 0.0 };
            let rc = if truth > 0.0 { tp / truth } else { 0.0 };
            let f = if p + rc > 0.0 { 2.0 * p * rc / (p + rc) } else { 0.0 };
            let pc = &r.per_class[c];
            worst = worst.max((pc.precision - p).abs()).max((pc.recall - rc).abs()).max((pc.f1 - f).abs());
            f1s.push(f);
            ps.push(p);
            rs.push(rc);
            sup.push(truth);
        }
        let acc = pairs.iter().filter(|&&(t, p)| t == p).count() as f64 / total;
        let macro_f1 = f1s.iter().sum::<f64>() / 3.0;
        let weighted = |v: &[f64]| v.iter().zip(&sup).map(|(a, s)| a * s).sum::<f64>() / total;
        worst = worst
            .max((r.accuracy - acc).abs())
            .max((r.macro_avg.f1 - macro_f1).abs())
            .max((r.macro_avg.precision - ps.iter().sum::<f64>() / 3.0).abs())
            .max((r.macro_avg.recall - rs.iter().sum::<f64>() / 3.0).abs())
            .max((r.weighted_avg.f1 - weighted(&f1s)).abs())
            .max((r.weighted_avg.precision - weighted(&ps)).abs())
            .max((r.weighted_avg.recall - weighted(&rs)).abs());
    }
    let table = weighted_mean(&[0.99, 0.87, 0.87], &[3392, 3280, 3328]);
    check(
        worst <= 1e-9 && (table - 0.91).abs() <= 0.005,
        format!("max deviation {worst:.2e} over 50 matrices, weighted F1 of published rows {table:.4}"),
    )
}

// 4 -------------------------------------------------------------------------

fn drift_config(seed: u64, run_windows: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        mode: RunMode::ClosedLoop,
        seed,
        run_windows,
        ..ExperimentConfig::default()
    };
    cfg.agent.kind = AgentKind::Static;
    cfg.closed_loop.burn_in_windows = 20;
    cfg.closed_loop.verifier_warmup_windows = 80;
    cfg
}

fn drift_detection() -> Outcome {
    let w = VerifierParams::default().drift_window as u64;
    let per_slice = 6u64;
    let start = 100u64;
    let filled = start + w.div_ceil(per_slice);
    let mut cfg = drift_config(42, (filled + 20) as usize);
    cfg.drift.push(DriftSpec {
        slice: SliceId::Urllc,
        parameter: "mean_arrival_kbps".into(),
        multiplier: 3.0,
        start_window: start,
    });
    let b = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let fired = b.escalations.iter().find(|e| e.reason == EscalationReason::Drift).map(|e| e.window_id);

    let mut breaches = 0u64;
    let mut evaluations = 0u64;
    for seed in 1..=100 {
        let b = run_experiment(&drift_config(seed, 240)).map_err(|e| e.to_string())?;
        breaches += b.events.breach_evaluations;
        evaluations += b.events.drift_evaluations;
    }
    let rate = breaches as f64 / evaluations as f64;
    let ok = matches!(fired, Some(wid) if wid >= start && wid <= filled + 5) && rate < 0.05;
    check(
        ok,
        format!("drift escalation at {fired:?} (window full at {filled}), no-drift false-breach rate {rate:.4} over {evaluations} evaluations"),
    )
}

// 5 -------------------------------------------------------------------------

fn blob_corpus() -> Vec<UserKpi> {
    let mut out = Vec::new();
    for i in 0..90u32 {
        let j = f64::from(i % 9);
        let row = |slice, x: [f64; 3]| UserKpi {
            user_id: i % 18,
            slice,
            tx_bitrate_mbps: x[0],
            tx_packets: x[1] as u64,
            dl_buffer_bytes: x[2] as u64,
            window_id: u64::from(i / 6),
        };
        out.push(row(SliceId::Embb, [20.0 + j, 300.0 + j, 50_000.0 + 10.0 * j]));
        out.push(row(SliceId::Mmtc, [1.0 + 0.1 * j, 20.0 + j, 5_000.0 + 10.0 * j]));
        out.push(row(SliceId::Urllc, [2.0 + 0.1 * j, 100.0 + j, 100.0 + 10.0 * j]));
    }
    out
}

fn constant(base: &VerifierModel, class: usize) -> VerifierModel {
    let mut counts = [0u64; 3];
    counts[class] = 1;
    let mut probs = [0.0; 3];
    probs[class] = 1.0;
    base.with_classifier(Classifier::Tree(DecisionTree {
        params: TreeParams::default(),
        nodes: vec![TreeNode::Leaf { counts, probs }],
    }))
}

fn flag_fixtures() -> Outcome {
    let corpus = blob_corpus();
    let params = VerifierParams {
        train_fraction: 1.0,
        ..VerifierParams::default()
    };
    let model = train_verifier(&corpus, &params).map_err(|e| e.to_string())?;
    let (mut fp, mut fn_, mut cases) = (0, 0, 0);
    let mut tally = |expected: bool, got: bool| {
        cases += 1;
        match (expected, got) {
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            _ => {}
        }
    };

    // misclassification: true labels, then every other label
    for k in &corpus {
        if model.predict(&k.features()) != k.slice {
            return Err("fixture model does not fit its blobs".into());
        }
        let mut state = VerifierState::new(&params);
        tally(false, verify_sample(&model, &mut state, k).flags.misclass);
        for s in SliceId::ALL.into_iter().filter(|&s| s != k.slice) {
            let flipped = UserKpi { slice: s, ..k.clone() };
            let mut state = VerifierState::new(&params);
            tally(true, verify_sample(&model, &mut state, &flipped).flags.misclass);
        }
    }

    // conflict: identical vectors under forced predictions
    let stubs: Vec<VerifierModel> = (0..3).map(|c| constant(&model, c)).collect();
    for k in corpus.iter().step_by(7) {
        for a in 0..3 {
            for b in 0..3 {
                let mut state = VerifierState::new(&params);
                tally(false, verify_sample(&stubs[a], &mut state, k).flags.conflict);
                tally(a != b, verify_sample(&stubs[b], &mut state, k).flags.conflict);
            }
        }
    }

    // conflict: distances around epsilon in normalized space
    let eps = params.conflict_epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..200u64 {
        let base = FeatureVector([rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]);
        let d = [0.0, 0.5 * eps, 0.99 * eps, 1.01 * eps, 2.0 * eps, 30.0 * eps][(i % 6) as usize];
        let mut shifted = base;
        shifted.0[(i % 3) as usize] += d;
        let within = d <= eps;
        let mut cache = ConflictCache::new(params.conflict_capacity, eps);
        tally(false, cache.check_conflict(base, SliceId::Embb, 0));
        tally(within, cache.check_conflict(shifted, SliceId::Urllc, 1));
        let far = FeatureVector(base.0.map(|v| v + 10.0));
        tally(false, cache.check_conflict(far, SliceId::Mmtc, 2));
    }
    check(fp == 0 && fn_ == 0, format!("{cases} fixture checks, {fn_} false negatives, {fp} false positives"))
}

// 6 -------------------------------------------------------------------------

fn latency_budget() -> Outcome {
    let train = generate(&GenConfig::default()).map_err(|e| e.to_string())?;
    let params = VerifierParams::default();
    let model = train_verifier(&train, &params).map_err(|e| e.to_string())?;
    let stream = generate(&GenConfig {
        n_samples: 100_000,
        seed: 6,
        ..GenConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let ev = evaluate(Arc::new(model), &stream, &params).map_err(|e| e.to_string())?;
    let lat = latency_stats(&ev.verdicts).map_err(|e| e.to_string())?;
    let batch_max = ev.window_batch_us.iter().copied().max().unwrap_or(0);
    check(
        lat.count == 100_000 && lat.p99 < 1_000 && batch_max < 50_000,
        format!("{} samples, p50 {} us, p99 {} us, max {} us; worst 18-user batch {} us", lat.count, lat.p50, lat.p99, lat.max, batch_max),
    )
}

// 7 -------------------------------------------------------------------------

fn closed_loop_sanity() -> Outcome {
    let cfg = |mode| ExperimentConfig {
        mode: RunMode::ClosedLoop,
        agent_mode: mode,
        seed: 7,
        run_windows: 2000,
        ..ExperimentConfig::default()
    };
    let summary = |c: &ExperimentConfig| {
        run_experiment(c)
            .map_err(|e| e.to_string())?
            .closed_loop
            .ok_or_else(|| "missing closed-loop summary".to_string())
    };
    let u = cfg(AgentMode::UrllcOriented);
    let (uq, ub) = (summary(&u)?, summary(&baseline_config(&u))?);
    let e = cfg(AgentMode::EmbbOriented);
    let (eq, eb) = (summary(&e)?, summary(&baseline_config(&e))?);
    let buf_ratio = uq.mean_buffer_bytes.urllc / ub.mean_buffer_bytes.urllc;
    let rate_ratio = eq.mean_bitrate_mbps.embb / eb.mean_bitrate_mbps.embb;
    check(
        buf_ratio <= 0.8 && rate_ratio >= 1.1,
        format!(
            "URLLC buffer {:.3} vs baseline {:.3} B (x{buf_ratio:.3}); eMBB bitrate {:.3} vs baseline {:.3} Mbps (x{rate_ratio:.3})",
            uq.mean_buffer_bytes.urllc, ub.mean_buffer_bytes.urllc, eq.mean_bitrate_mbps.embb, eb.mean_bitrate_mbps.embb
        ),
    )
}

// 8 -------------------------------------------------------------------------

fn random_message(rng: &mut ChaCha8Rng, catalog: &ActionCatalog) -> BusMessage {
    let slice = SliceId::ALL[rng.random_range(0..3)];
    let window_id = rng.random_range(0..1_000_000u64);
    match rng.random_range(0..4) {
        0 => BusMessage::KpiReport(KpiReport {
            window_id,
            users: (0..rng.random_range(0..20))
                .map(|i| UserKpi {
                    user_id: i,
                    slice: SliceId::ALL[rng.random_range(0..3)],
                    tx_bitrate_mbps: rng.random::<f64>() * 10f64.powi(rng.random_range(-6..4)),
                    tx_packets: rng.random_range(0..100_000),
                    dl_buffer_bytes: rng.random_range(0..5_000_000),
                    window_id,
                })
                .collect(),
        }),
        1 => BusMessage::Control {
            window_id,
            action: *catalog.get(rng.random_range(0..N_ACTIONS)),
        },
        2 => BusMessage::Verdict(Verdict {
            window_id,
            user_id: rng.random_range(0..18),
            predicted_slice: slice,
            true_slice: SliceId::ALL[rng.random_range(0..3)],
            flags: VerdictFlags {
                drift: rng.random(),
                misclass: rng.random(),
                conflict: rng.random(),
            },
            latency_us: rng.random_range(0..10_000),
        }),
        _ => BusMessage::Escalation(Escalation {
            reason: [EscalationReason::Drift, EscalationReason::MisclassRate, EscalationReason::Conflict]
                [rng.random_range(0..3)],
            window_id,
        }),
    }
}

fn protocol_and_persistence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let catalog = ActionCatalog::new(50);
    let mut bad = 0;
    for _ in 0..10_000 {
        let m = random_message(&mut rng, &catalog);
        if decode_msg(&encode_msg(&m)).ok().as_ref() != Some(&m) {
            bad += 1;
        }
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = generate(&GenConfig {
        n_samples: 3000,
        ..GenConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let csv = dir.path().join("data.csv");
    save_csv(&data, &csv).map_err(|e| e.to_string())?;
    let loaded = load_csv(&csv).map_err(|e| e.to_string())?;
    let data_ok = loaded.kpis == data && loaded.imputed_cells == 0;

    let model = train_verifier(&data, &VerifierParams::default()).map_err(|e| e.to_string())?;
    let path = dir.path().join("model.json");
    save_model(&model, &path).map_err(|e| e.to_string())?;
    let back: VerifierModel = load_model(&path).map_err(|e| e.to_string())?;
    let model_ok = back == model && data.iter().all(|k| back.predict(&k.features()) == model.predict(&k.features()));

    let offline = ExperimentConfig::offline(AgentMode::EmbbOriented);
    let mut closed = drift_config(11, 150);
    closed.agent.kind = AgentKind::QLearning;
    closed.agent.pretrain_windows = 500;
    let mut same = true;
    for cfg in [offline, closed] {
        let a = run_experiment(&cfg).map_err(|e| e.to_string())?.canonical_json();
        let b = run_experiment(&cfg).map_err(|e| e.to_string())?.canonical_json();
        same &= a == b;
    }
    check(
        bad == 0 && data_ok && model_ok && same,
        format!("10000 messages, {bad} roundtrip failures; dataset lossless {data_ok}; model lossless {model_ok}; reports identical {same}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("accuracy ordering", accuracy_ordering),
        ("tree oracle equivalence", tree_oracle),
        ("metrics exactness", metrics_exactness),
        ("drift detection", drift_detection),
        ("conflict and misclassification flags", flag_fixtures),
        ("near-real-time budget", latency_budget),
        ("closed-loop sanity", closed_loop_sanity),
        ("protocol and persistence", protocol_and_persistence),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {} {name}: PASS ({d}) [{secs:.1} s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({d}) [{secs:.1} s]", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
