//! Experiment orchestration: closed-loop runs with the simulator, agent and
//! verifier on separate threads joined by the bus, and offline
//! train/evaluate pipelines over recorded or synthetic datasets.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{compute_reward, Agent, AgentError, AgentKind, AgentMode, AgentParams, N_ACTIONS};
use crate::bus::{encode_msg, open_endpoint, BusConfig, BusError, BusMessage, Endpoint, MessageKind, Subscription};
use crate::datagen::{generate, load_csv, DataError, GenConfig};
use crate::domain::{PerSlice, SliceId, UserKpi};
use crate::metrics::{classification_report, ClassificationReport, MetricsError};
use crate::ran_sim::{DriftSpec, SimConfig, SimError, Simulator};
use crate::verifier::{
    evaluate, latency_stats_of, train_verifier_split, Escalation, EventSummary, LatencyStats, Verdict, Verifier,
    VerifierModel, VerifierParams, VerifyError,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("run aborted: {0}")]
    Aborted(String),
}

impl ExperimentError {
    /// True for errors raised before any run starts.
    pub fn is_validation(&self) -> bool {
        matches!(self, ExperimentError::Invalid(_))
    }
}

fn invalid(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Invalid(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    ClosedLoop,
    Offline,
}

/// Replaces the verifier's classifier mid-run with a class-permuted copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSwap {
    pub window: u64,
    pub permutation: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClosedLoopParams {
    /// Windows whose reports form the verifier's training corpus.
    pub verifier_warmup_windows: usize,
    /// Leading windows left out of the corpus.
    pub burn_in_windows: usize,
    /// Share of the warm-up corpus used for training and the drift
    /// reference; replaces `verifier.train_fraction` in this mode.
    pub train_fraction: f64,
    pub model_swap: Option<ModelSwap>,
}

impl Default for ClosedLoopParams {
    fn default() -> Self {
        ClosedLoopParams {
            verifier_warmup_windows: 200,
            burn_in_windows: 10,
            train_fraction: 1.0,
            model_swap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OfflineParams {
    /// CSV corpus; when absent a dataset is generated.
    pub dataset: Option<PathBuf>,
    /// Generator settings; when absent the preset matching the agent mode.
    pub gen: Option<GenConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode: RunMode,
    /// Overrides the seeds of every sub-config.
    pub seed: u64,
    pub agent_mode: AgentMode,
    pub run_windows: usize,
    pub latency_budget_us: u64,
    pub sim: SimConfig,
    pub agent: AgentParams,
    pub verifier: VerifierParams,
    pub closed_loop: ClosedLoopParams,
    pub drift: Vec<DriftSpec>,
    pub offline: OfflineParams,
    pub bus: String,
    pub verdict_log: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: RunMode::ClosedLoop,
            seed: 42,
            agent_mode: AgentMode::EmbbOriented,
            run_windows: 1000,
            latency_budget_us: 10_000,
            sim: SimConfig::default(),
            agent: AgentParams::default(),
            verifier: VerifierParams::default(),
            closed_loop: ClosedLoopParams::default(),
            drift: Vec::new(),
            offline: OfflineParams::default(),
            bus: "inproc".into(),
            verdict_log: None,
        }
    }
}

impl ExperimentConfig {
    pub fn offline(agent_mode: AgentMode) -> Self {
        ExperimentConfig {
            mode: RunMode::Offline,
            agent_mode,
            ..ExperimentConfig::default()
        }
    }

    /// Copy with the top-level seed pushed into every sub-config.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.sim.seed = c.seed;
        c.agent.seed = c.seed;
        c.verifier.seed = c.seed;
        if let Some(g) = &mut c.offline.gen {
            g.seed = c.seed;
        }
        c
    }

    pub fn gen_config(&self) -> GenConfig {
        let mut g = self.offline.gen.clone().unwrap_or_else(|| match self.agent_mode {
            AgentMode::EmbbOriented => GenConfig::embb_oriented(),
            AgentMode::UrllcOriented => GenConfig::urllc_oriented(),
        });
        g.seed = self.seed;
        g
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.run_windows == 0 {
            return Err(invalid("run_windows must be > 0"));
        }
        if self.latency_budget_us == 0 {
            return Err(invalid("latency_budget_us must be > 0"));
        }
        self.verifier.validate().map_err(invalid)?;
        BusConfig::parse(&self.bus).map_err(invalid)?;
        match self.mode {
            RunMode::Offline => {
                if self.verifier.train_fraction >= 1.0 {
                    return Err(invalid("offline mode needs train_fraction < 1 to leave a holdout"));
                }
                if self.offline.dataset.is_none() {
                    self.gen_config().validate().map_err(invalid)?;
                }
            }
            RunMode::ClosedLoop => {
                let mut sim = Simulator::new(self.sim.clone()).map_err(invalid)?;
                for d in &self.drift {
                    sim.inject_drift(d.clone()).map_err(invalid)?;
                }
                Agent::new(self.agent_mode, self.agent.clone(), self.sim.total_prbs).map_err(invalid)?;
                let cl = &self.closed_loop;
                VerifierParams {
                    train_fraction: cl.train_fraction,
                    ..self.verifier.clone()
                }
                .validate()
                .map_err(invalid)?;
                if cl.verifier_warmup_windows <= cl.burn_in_windows {
                    return Err(invalid("verifier_warmup_windows must exceed burn_in_windows"));
                }
                if cl.verifier_warmup_windows >= self.run_windows {
                    return Err(invalid("run_windows must exceed verifier_warmup_windows"));
                }
                if let Some(swap) = cl.model_swap {
                    let mut seen = [false; 3];
                    for &p in &swap.permutation {
                        if p >= 3 || std::mem::replace(&mut seen[p], true) {
                            return Err(invalid("model_swap.permutation must permute 0, 1, 2"));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopSummary {
    pub windows: u64,
    pub verified_windows: u64,
    pub train_samples: usize,
    pub mean_reward: f64,
    pub mean_bitrate_mbps: PerSlice<f64>,
    pub mean_buffer_bytes: PerSlice<f64>,
    /// How often each catalog action was chosen.
    pub action_counts: Vec<u64>,
    pub rejected_actions: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OfflineSummary {
    pub dataset_samples: usize,
    pub train_samples: usize,
    pub holdout_samples: usize,
    pub imputed_cells: usize,
}

/// Wall-clock measurements; excluded from the canonical serialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub sample_latency_us: LatencyStats,
    pub window_batch_us: LatencyStats,
    pub budget_us: u64,
    pub within_budget: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub config: ExperimentConfig,
    pub classification: ClassificationReport,
    pub events: EventSummary,
    pub escalations: Vec<Escalation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_loop: Option<ClosedLoopSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offline: Option<OfflineSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingSummary>,
}

impl ReportBundle {
    /// Everything except wall-clock timing; identical for identical configs.
    pub fn canonical_json(&self) -> String {
        let mut b = self.clone();
        b.timing = None;
        serde_json::to_string_pretty(&b).expect("bundle serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }
}

fn timing(latencies: &[u64], batches: &[u64], budget_us: u64) -> Option<TimingSummary> {
    let sample = latency_stats_of(latencies).ok()?;
    let batch = latency_stats_of(batches).ok()?;
    Some(TimingSummary {
        within_budget: batch.p99 <= budget_us,
        sample_latency_us: sample,
        window_batch_us: batch,
        budget_us,
    })
}

pub fn write_verdict_log(path: &Path, verdicts: &[Verdict]) -> Result<(), ExperimentError> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in verdicts {
        w.write_all(&encode_msg(&BusMessage::Verdict(v.clone())))?;
    }
    w.flush()?;
    Ok(())
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ReportBundle, ExperimentError> {
    let config = config.resolved();
    config.validate()?;
    match config.mode {
        RunMode::Offline => run_offline(&config),
        RunMode::ClosedLoop => run_closed_loop(&config),
    }
}

/// Loads or generates the offline corpus; returns it with the imputed cell
/// count.
pub fn offline_dataset(config: &ExperimentConfig) -> Result<(Vec<UserKpi>, usize), ExperimentError> {
    Ok(match &config.offline.dataset {
        Some(path) => {
            let d = load_csv(path)?;
            (d.kpis, d.imputed_cells)
        }
        None => (generate(&config.gen_config())?, 0),
    })
}

fn run_offline(config: &ExperimentConfig) -> Result<ReportBundle, ExperimentError> {
    let (data, imputed_cells) = offline_dataset(config)?;
    let split = train_verifier_split(&data, &config.verifier)?;
    if split.train.len() + split.holdout.len() != data.len() || split.holdout.is_empty() {
        return Err(ExperimentError::Aborted("train/holdout split is not a partition".into()));
    }
    let mut bundle = evaluate_model(config, split.model, &split.holdout, imputed_cells)?;
    if let Some(o) = &mut bundle.offline {
        o.dataset_samples = data.len();
    }
    Ok(bundle)
}

/// Runs a trained model over `dataset` and assembles an offline bundle.
pub fn evaluate_model(
    config: &ExperimentConfig,
    model: VerifierModel,
    dataset: &[UserKpi],
    imputed_cells: usize,
) -> Result<ReportBundle, ExperimentError> {
    let offline = OfflineSummary {
        dataset_samples: dataset.len(),
        train_samples: model.train_samples,
        holdout_samples: dataset.len(),
        imputed_cells,
    };
    let ev = evaluate(Arc::new(model), dataset, &config.verifier)?;
    if let Some(path) = &config.verdict_log {
        write_verdict_log(path, &ev.verdicts)?;
    }
    let latencies: Vec<u64> = ev.verdicts.iter().map(|v| v.latency_us).collect();
    Ok(ReportBundle {
        config: config.clone(),
        classification: ev.report,
        events: ev.summary,
        escalations: ev.escalations,
        closed_loop: None,
        offline: Some(offline),
        timing: timing(&latencies, &ev.window_batch_us, config.latency_budget_us),
    })
}

const POLL: Duration = Duration::from_millis(50);

/// Next message, or `None` once `abort` is raised.
fn recv_or_abort(sub: &Subscription, abort: &AtomicBool) -> Option<BusMessage> {
    loop {
        if abort.load(Ordering::Relaxed) {
            return None;
        }
        match sub.recv_timeout(POLL) {
            Ok(m) => return Some(m),
            Err(std::sync::mpsc::RecvTimeoutError::Timeout) => continue,
            Err(std::sync::mpsc::RecvTimeoutError::Disconnected) => return None,
        }
    }
}

struct SimRun {
    sums: PerSlice<(f64, f64, u64)>,
    rejected: u64,
}

fn sim_loop(
    mut sim: Simulator,
    bus: &Endpoint,
    controls: Subscription,
    windows: u64,
    abort: &AtomicBool,
) -> Result<SimRun, ExperimentError> {
    let mut sums: PerSlice<(f64, f64, u64)> = PerSlice::default();
    for k in 0..windows {
        let action = loop {
            match recv_or_abort(&controls, abort) {
                Some(BusMessage::Control { window_id, action }) if window_id == k => break action,
                Some(_) => continue,
                None => return Err(ExperimentError::Aborted(format!("simulator stopped before window {k}"))),
            }
        };
        let out = sim.run_window(&action);
        for u in &out.report.users {
            let s = sums.get_mut(u.slice);
            s.0 += u.tx_bitrate_mbps;
            s.1 += u.dl_buffer_bytes as f64;
            s.2 += 1;
        }
        bus.publish(&BusMessage::KpiReport(out.report));
    }
    Ok(SimRun {
        sums,
        rejected: sim.rejected_actions(),
    })
}

struct AgentRun {
    reward_sum: f64,
    action_counts: Vec<u64>,
}

fn agent_loop(
    mut agent: Agent,
    bus: &Endpoint,
    reports: Subscription,
    windows: u64,
    abort: &AtomicBool,
) -> Result<AgentRun, ExperimentError> {
    let mut counts = vec![0u64; N_ACTIONS];
    let first = agent.initial_action();
    counts[agent.last_action()] += 1;
    bus.publish(&BusMessage::Control {
        window_id: 0,
        action: first,
    });
    let mut reward_sum = 0.0;
    let mut next = 0;
    while next < windows {
        let Some(msg) = recv_or_abort(&reports, abort) else {
            return Err(ExperimentError::Aborted("agent lost the report stream".into()));
        };
        let BusMessage::KpiReport(report) = msg else { continue };
        if report.window_id != next {
            continue;
        }
        reward_sum += compute_reward(&report, agent.mode())?;
        let action = agent.on_report(&report)?;
        next += 1;
        if next < windows {
            counts[agent.last_action()] += 1;
        }
        bus.publish(&BusMessage::Control {
            window_id: next,
            action,
        });
    }
    Ok(AgentRun {
        reward_sum,
        action_counts: counts,
    })
}

struct VerifierRun {
    model: Option<Arc<VerifierModel>>,
    verifier: Option<Verifier>,
    latencies: Vec<u64>,
    batches: Vec<u64>,
    escalations: Vec<Escalation>,
    verified_windows: u64,
}

fn verifier_loop(
    config: &ExperimentConfig,
    bus: &Endpoint,
    reports: Subscription,
    abort: &AtomicBool,
) -> Result<VerifierRun, ExperimentError> {
    let cl = &config.closed_loop;
    let params = VerifierParams {
        train_fraction: cl.train_fraction,
        ..config.verifier.clone()
    };
    let windows = config.run_windows as u64;
    let mut log = match &config.verdict_log {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut corpus: Vec<UserKpi> = Vec::new();
    let mut run = VerifierRun {
        model: None,
        verifier: None,
        latencies: Vec::new(),
        batches: Vec::new(),
        escalations: Vec::new(),
        verified_windows: 0,
    };
    let mut swapped = false;
    let mut next = 0;
    while next < windows {
        let Some(msg) = recv_or_abort(&reports, abort) else {
            return Err(ExperimentError::Aborted("verifier lost the report stream".into()));
        };
        let BusMessage::KpiReport(report) = msg else { continue };
        if report.window_id != next {
            continue;
        }
        next += 1;
        let w = report.window_id as usize;
        if w < cl.burn_in_windows {
            continue;
        }
        if w < cl.verifier_warmup_windows {
            corpus.extend(report.users.iter().cloned());
            if w + 1 == cl.verifier_warmup_windows {
                let trained = train_verifier_split(&corpus, &params)?;
                let model = Arc::new(trained.model);
                run.verifier = Some(Verifier::new(model.clone(), params.clone()));
                run.model = Some(model);
                corpus = Vec::new();
            }
            continue;
        }
        let verifier = run.verifier.as_mut().expect("trained at the end of warm-up");
        if let Some(swap) = cl.model_swap {
            if !swapped && report.window_id >= swap.window {
                let base = verifier.model().clone();
                let relabeled = base.classifier.relabeled(swap.permutation).map_err(VerifyError::from)?;
                verifier.swap_model(Arc::new(base.with_classifier(relabeled)));
                swapped = true;
            }
        }
        let start = Instant::now();
        let out = verifier.process_report(&report);
        run.batches.push(start.elapsed().as_micros() as u64);
        run.verified_windows += 1;
        for v in &out.verdicts {
            run.latencies.push(v.latency_us);
            let msg = BusMessage::Verdict(v.clone());
            if let Some(w) = log.as_mut() {
                w.write_all(&encode_msg(&msg))?;
            }
            bus.publish(&msg);
        }
        for e in &out.escalations {
            bus.publish(&BusMessage::Escalation(*e));
        }
        run.escalations.extend(out.escalations);
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    Ok(run)
}

fn guarded<T>(abort: &AtomicBool, r: Result<T, ExperimentError>) -> Result<T, ExperimentError> {
    if r.is_err() {
        abort.store(true, Ordering::Relaxed);
    }
    r
}

fn join<T>(h: thread::ScopedJoinHandle<'_, Result<T, ExperimentError>>) -> Result<T, ExperimentError> {
    h.join().unwrap_or_else(|_| Err(ExperimentError::Aborted("worker panicked".into())))
}

fn run_closed_loop(config: &ExperimentConfig) -> Result<ReportBundle, ExperimentError> {
    let bus = open_endpoint(&BusConfig::parse(&config.bus)?)?;
    let controls = bus.subscribe(&[MessageKind::Control]);
    let agent_reports = bus.subscribe(&[MessageKind::KpiReport]);
    let verifier_reports = bus.subscribe(&[MessageKind::KpiReport]);
    let mut sim = Simulator::new(config.sim.clone())?;
    for d in &config.drift {
        sim.inject_drift(d.clone())?;
    }
    let mut agent = Agent::new(config.agent_mode, config.agent.clone(), config.sim.total_prbs)?;
    agent.pretrain(&config.sim)?;
    let windows = config.run_windows as u64;
    let abort = AtomicBool::new(false);

    let (sim_run, agent_run, ver_run) = thread::scope(|scope| {
        let abort = &abort;
        let bus = &bus;
        let s = scope.spawn(move || guarded(abort, sim_loop(sim, bus, controls, windows, abort)));
        let a = scope.spawn(move || guarded(abort, agent_loop(agent, bus, agent_reports, windows, abort)));
        let v = scope.spawn(move || guarded(abort, verifier_loop(config, bus, verifier_reports, abort)));
        (join(s), join(a), join(v))
    });
    bus.shutdown();
    let (sim_run, agent_run, ver_run) = match (sim_run, agent_run, ver_run) {
        (Ok(s), Ok(a), Ok(v)) => (s, a, v),
        (s, a, v) => {
            // report the root cause rather than a knock-on abort
            let mut errs: Vec<ExperimentError> = [s.err(), a.err(), v.err()].into_iter().flatten().collect();
            let i = errs.iter().position(|e| !matches!(e, ExperimentError::Aborted(_))).unwrap_or(0);
            return Err(errs.swap_remove(i));
        }
    };

    let verifier = ver_run.verifier.ok_or_else(|| ExperimentError::Aborted("verifier never trained".into()))?;
    let classification = classification_report(&verifier.confusion())?;
    let mean = |f: fn(&(f64, f64, u64)) -> f64| {
        PerSlice::from_fn(|s| {
            let v = sim_run.sums.get(s);
            if v.2 == 0 {
                0.0
            } else {
                f(v) / v.2 as f64
            }
        })
    };
    let summary = ClosedLoopSummary {
        windows,
        verified_windows: ver_run.verified_windows,
        train_samples: ver_run.model.as_ref().map_or(0, |m| m.train_samples),
        mean_reward: agent_run.reward_sum / windows as f64,
        mean_bitrate_mbps: mean(|v| v.0),
        mean_buffer_bytes: mean(|v| v.1),
        action_counts: agent_run.action_counts,
        rejected_actions: sim_run.rejected,
    };
    Ok(ReportBundle {
        config: config.clone(),
        classification,
        events: verifier.summary(),
        escalations: ver_run.escalations,
        closed_loop: Some(summary),
        offline: None,
        timing: timing(&ver_run.latencies, &ver_run.batches, config.latency_budget_us),
    })
}

/// Same closed-loop config with the static equal-split round-robin agent.
pub fn baseline_config(config: &ExperimentConfig) -> ExperimentConfig {
    let mut c = config.clone();
    c.agent.kind = AgentKind::Static;
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Markdown,
    Json,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "text" => Some(ReportFormat::Text),
            "markdown" | "md" => Some(ReportFormat::Markdown),
            "json" => Some(ReportFormat::Json),
            _ => None,
        }
    }
}

struct Row {
    label: &'static str,
    cells: [Option<f64>; 3],
    support: u64,
}

fn table_rows(r: &ClassificationReport) -> Vec<Row> {
    let mut rows: Vec<Row> = SliceId::ALL
        .iter()
        .map(|&s| {
            let c = r.class(s);
            Row {
                label: s.display_name(),
                cells: [Some(c.precision), Some(c.recall), Some(c.f1)],
                support: c.support,
            }
        })
        .collect();
    rows.push(Row {
        label: "Accuracy",
        cells: [None, None, Some(r.accuracy)],
        support: r.support,
    });
    for (label, avg) in [("Macro Avg.", r.macro_avg), ("Weighted Avg.", r.weighted_avg)] {
        rows.push(Row {
            label,
            cells: [Some(avg.precision), Some(avg.recall), Some(avg.f1)],
            support: r.support,
        });
    }
    rows
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.2}"))
}

fn mode_label(config: &ExperimentConfig) -> String {
    let agent = match config.agent_mode {
        AgentMode::EmbbOriented => "eMBB-oriented",
        AgentMode::UrllcOriented => "URLLC-oriented",
    };
    let run = match config.mode {
        RunMode::ClosedLoop => "closed loop",
        RunMode::Offline => "offline",
    };
    format!("{agent} agent, {run}, seed {}", config.seed)
}

fn footer_lines(b: &ReportBundle) -> Vec<String> {
    let e = &b.events;
    let mut lines = vec![format!(
        "verdicts {}, misclassified {}, conflicts {}, drift-flagged {}, drift evaluations {} ({} in breach)",
        e.verdicts, e.misclass, e.conflict, e.drift_flagged, e.drift_evaluations, e.breach_evaluations
    )];
    if let Some(t) = &b.timing {
        let s = &t.sample_latency_us;
        lines.push(format!(
            "sample latency us: p50 {} p95 {} p99 {} max {}; window batch p99 {} us (budget {} us, {})",
            s.p50,
            s.p95,
            s.p99,
            s.max,
            t.window_batch_us.p99,
            t.budget_us,
            if t.within_budget { "met" } else { "missed" }
        ));
    }
    if let Some(c) = &b.closed_loop {
        lines.push(format!(
            "windows {} (verified {}), mean reward {:.4}, rejected actions {}",
            c.windows, c.verified_windows, c.mean_reward, c.rejected_actions
        ));
    }
    if let Some(o) = &b.offline {
        lines.push(format!(
            "samples {} (train {}, holdout {}, imputed cells {})",
            o.dataset_samples, o.train_samples, o.holdout_samples, o.imputed_cells
        ));
    }
    let esc = if b.escalations.is_empty() {
        "none".to_string()
    } else {
        b.escalations
            .iter()
            .map(|e| format!("{} at window {}", e.reason, e.window_id))
            .collect::<Vec<_>>()
            .join(", ")
    };
    lines.push(format!("escalations: {esc}"));
    lines
}

pub fn render_report(bundle: &ReportBundle, format: ReportFormat) -> String {
    let rows = table_rows(&bundle.classification);
    let mut out = String::new();
    match format {
        ReportFormat::Json => {
            out = bundle.to_json();
            out.push('\n');
        }
        ReportFormat::Text => {
            let _ = writeln!(out, "Slice verification ({})", mode_label(&bundle.config));
            let _ = writeln!(out, "{:<14}{:>10}{:>10}{:>10}{:>10}", "", "Precision", "Recall", "F1-score", "Support");
            for r in &rows {
                let _ = writeln!(
                    out,
                    "{:<14}{:>10}{:>10}{:>10}{:>10}",
                    r.label,
                    cell(r.cells[0]),
                    cell(r.cells[1]),
                    cell(r.cells[2]),
                    r.support
                );
            }
            out.push('\n');
            for l in footer_lines(bundle) {
                let _ = writeln!(out, "{l}");
            }
        }
        ReportFormat::Markdown => {
            let _ = writeln!(out, "### Slice verification ({})\n", mode_label(&bundle.config));
            let _ = writeln!(out, "| | Precision | Recall | F1-score | Support |");
            let _ = writeln!(out, "|---|---:|---:|---:|---:|");
            for r in &rows {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} |",
                    r.label,
                    cell(r.cells[0]),
                    cell(r.cells[1]),
                    cell(r.cells[2]),
                    r.support
                );
            }
            out.push('\n');
            for l in footer_lines(bundle) {
                let _ = writeln!(out, "- {l}");
            }
        }
    }
    out
}
