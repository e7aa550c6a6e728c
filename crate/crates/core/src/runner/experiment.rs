//! Subcommand implementations: training, rollouts, sweeps, coverage reports
//! and the verification suite.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::conformal::{
    verify_theorem_with_rule, EtaMode, QuantileTracker, TrackerConfig, standard_rule,
};
use crate::error::{Error, Result};
use crate::policy::{audit_eventually_safe, AuditPoint, EventuallySafeSpec};
use crate::predictor::{
    assemble_samples, AlignedSample, LinearModel, Mlp, MlpSpec, Predictor, Sample, TrainConfig,
};
use crate::runner::config::{ExperimentConfig, Method, ModelKind, Scenario};
use crate::runner::episode::{
    substream, EpisodeResult, HighwayRun, Stream, TrackRun, TRACK_EXTRAS_LEN, TRACK_OBS_LEN,
};
use crate::runner::stats::{mean, mean_std};
use crate::runner::trace::{read_traces, write_sweep, write_traces, StepLog, SweepRow, TRACE_SCHEMA_VERSION};
use crate::track::TrajectoryKind;

pub const MODEL_FILE: &str = "model.txt";
pub const TRACES_FILE: &str = "traces.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const COVERAGE_FILE: &str = "coverage.csv";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn write_summary(out: &Path, command: &str, seed: u64, cfg: &ExperimentConfig, metrics: serde_json::Value) -> Result<()> {
    let summary = json!({
        "tool": "cpl",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "config": cfg,
        "metrics": metrics,
    });
    let path = out.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn ensure_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

/// Loads the configured predictor, or explains how to produce one.
pub fn load_predictor(cfg: &ExperimentConfig) -> Result<Predictor> {
    let hint = |what: String| {
        Error::Config(format!(
            "{what}; train one with `cpl train-predictor --config <file with scenario = {}> --out <dir>` \
             and set `predictor = <dir>/{MODEL_FILE}`",
            cfg.scenario.as_str()
        ))
    };
    let path = cfg.predictor.as_ref().ok_or_else(|| hint("no predictor configured".into()))?;
    if !path.exists() {
        return Err(hint(format!("predictor file {} not found", path.display())));
    }
    let p = Predictor::load(path)?;
    let expected = input_dim(cfg);
    if p.input_dim() != expected {
        return Err(Error::Dimension {
            expected,
            got: p.input_dim(),
        });
    }
    Ok(p)
}

pub fn input_dim(cfg: &ExperimentConfig) -> usize {
    match cfg.scenario {
        Scenario::Track => cfg.history * TRACK_OBS_LEN + TRACK_EXTRAS_LEN,
        _ => cfg.history * crate::highway::HighwayConfig::default().observation_len(),
    }
}

/// A rollout of `method` at threshold `q_safe`.
pub fn run_episode(
    cfg: &ExperimentConfig,
    predictor: Option<&Predictor>,
    method: Method,
    q_safe: f64,
    seed: u64,
    keep_rows: bool,
    keep_data: bool,
) -> Result<EpisodeResult> {
    let tracker = cfg.tracker()?;
    match cfg.scenario {
        Scenario::Highway => HighwayRun {
            config: cfg.highway()?,
            base: cfg.base_policy(),
            tracker,
            predictor,
            method,
            q_safe,
            history: cfg.history,
            horizon: cfg.horizon,
            shift: cfg.shift_step.map(|s| (s, cfg.shift_v_max)),
            keep_rows,
            keep_data,
        }
        .run(seed),
        Scenario::Track => TrackRun {
            config: cfg.track(),
            trajectory: cfg.trajectory,
            gains: cfg.gains()?,
            tracker,
            predictor,
            method,
            q_safe,
            false_positive_limit: cfg.false_positive_limit,
            history: cfg.history,
            horizon: cfg.horizon,
            keep_rows,
            keep_data,
        }
        .run(seed),
        Scenario::Scorestream => Err(Error::Config("scorestream scenario has no rollouts; use `verify`".into())),
    }
}

// ---------------------------------------------------------------- training

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub model_path: PathBuf,
    pub rollouts: usize,
    pub samples: usize,
    pub train_samples: usize,
    pub positives: usize,
    pub epoch_losses: Vec<f64>,
    pub holdout_mse: f64,
    /// `(1 - alpha)` empirical quantile of held-out signed scores.
    pub calibrated_q: f64,
}

/// Collects horizon-aligned samples from data-collection rollouts.
pub fn collect_dataset(cfg: &ExperimentConfig, root: u64) -> Result<(usize, Vec<AlignedSample>)> {
    let episodes: Vec<Result<EpisodeResult>> = match cfg.scenario {
        Scenario::Highway => {
            let seeds: Vec<u64> = (0..cfg.train_rollouts as u64).map(|i| root.wrapping_add(i)).collect();
            seeds
                .par_iter()
                .map(|&s| run_episode(cfg, None, Method::Mixture, cfg.q_safe, s, false, true))
                .collect()
        }
        Scenario::Track => {
            let seeds: Vec<u64> = (0..cfg.zigzag_count as u64).map(|i| root.wrapping_add(i)).collect();
            seeds
                .par_iter()
                .map(|&s| {
                    let mut c = cfg.clone();
                    c.trajectory = TrajectoryKind::Zigzag { seed: s };
                    run_episode(&c, None, Method::Fixed, c.q_safe, s, false, true)
                })
                .collect()
        }
        Scenario::Scorestream => return Err(Error::Config("scorestream scenario has no predictor".into())),
    };
    let mut samples = Vec::new();
    let n = episodes.len();
    for ep in episodes {
        let ep = ep?;
        samples.extend(assemble_samples(&ep.observations, &ep.extras, &ep.labels, cfg.history, cfg.horizon));
    }
    Ok((n, samples))
}

fn empirical_quantile(values: &mut [f64], level: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let k = ((level * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[k - 1]
}

pub fn train_on(cfg: &ExperimentConfig, samples: &[Sample], seed: u64) -> Result<(Predictor, Vec<f64>)> {
    let dim = input_dim(cfg);
    match cfg.model_kind {
        ModelKind::Linear => Ok((Predictor::Linear(LinearModel::fit(samples, cfg.ridge)?), Vec::new())),
        ModelKind::Mlp => {
            let spec = match cfg.scenario {
                Scenario::Track => MlpSpec::tracking(dim),
                _ => MlpSpec::highway(dim),
            };
            let mut mlp = Mlp::new(spec, seed)?;
            let report = mlp.fit(
                samples,
                &TrainConfig {
                    max_epochs: cfg.train_epochs,
                    batch_size: cfg.train_batch,
                    seed,
                    ..TrainConfig::default()
                },
            )?;
            Ok((Predictor::Mlp(mlp), report.epoch_losses))
        }
    }
}

pub fn run_train_predictor(cfg: &ExperimentConfig, root: u64, out: &Path) -> Result<TrainSummary> {
    ensure_dir(out)?;
    let (rollouts, aligned) = collect_dataset(cfg, root)?;
    let mut samples: Vec<Sample> = aligned.into_iter().map(|a| a.sample).collect();
    if samples.is_empty() {
        return Err(Error::Training("data collection produced no samples".into()));
    }
    let positives = samples.iter().filter(|s| s.target > 0.5).count();
    if cfg.scenario == Scenario::Track && cfg.model_kind == ModelKind::Mlp && positives == 0 {
        return Err(Error::Training(format!(
            "degenerate dataset: {} samples and no positive failure labels; \
             weighted BCE needs positives (raise zigzag_count or kp)",
            samples.len()
        )));
    }
    samples.shuffle(&mut substream(root, Stream::Init));
    let holdout = (samples.len() / 10).max(1).min(samples.len() - 1);
    let (test, train) = samples.split_at(holdout);
    let train = if train.is_empty() { test } else { train };
    let (predictor, epoch_losses) = train_on(cfg, train, root)?;

    let mut scores = Vec::with_capacity(test.len());
    let mut sq = 0.0;
    for s in test {
        let p = predictor.predict(&s.input)?.value();
        scores.push(s.target - p);
        sq += (s.target - p).powi(2);
    }
    let holdout_mse = sq / test.len() as f64;
    let calibrated_q = empirical_quantile(&mut scores, 1.0 - cfg.alpha);

    let model_path = out.join(MODEL_FILE);
    predictor.save(&model_path)?;
    let summary = TrainSummary {
        model_path,
        rollouts,
        samples: samples.len(),
        train_samples: train.len(),
        positives,
        epoch_losses,
        holdout_mse,
        calibrated_q,
    };
    write_summary(out, "train-predictor", root, cfg, serde_json::to_value(&summary)?)?;
    Ok(summary)
}

// ---------------------------------------------------------------- rollouts and sweeps

/// Runs every `(q_safe, method, seed)` job in parallel; results come back in job order.
pub fn run_jobs(
    cfg: &ExperimentConfig,
    predictor: Option<&Predictor>,
    jobs: &[(f64, Method, u64)],
    keep_rows: bool,
) -> Result<Vec<EpisodeResult>> {
    jobs.par_iter()
        .map(|&(q, m, s)| run_episode(cfg, predictor, m, q, s, keep_rows, false))
        .collect()
}

/// One tracker per `(q_safe, method)` group, carried across that group's seeds
/// in order: each rollout starts from the quantile the previous one ended with.
/// Groups run in parallel; results come back in group-then-seed order.
pub fn run_chained(
    cfg: &ExperimentConfig,
    predictor: Option<&Predictor>,
    groups: &[(f64, Method)],
    seeds: &[u64],
    keep_rows: bool,
) -> Result<Vec<EpisodeResult>> {
    let per_group: Vec<Result<Vec<EpisodeResult>>> = groups
        .par_iter()
        .map(|&(q, m)| {
            let mut c = cfg.clone();
            let mut eps = Vec::with_capacity(seeds.len());
            for &s in seeds {
                let e = run_episode(&c, predictor, m, q, s, keep_rows, false)?;
                c.q_init = e.final_quantile;
                eps.push(e);
            }
            Ok(eps)
        })
        .collect();
    let mut out = Vec::with_capacity(groups.len() * seeds.len());
    for g in per_group {
        out.extend(g?);
    }
    Ok(out)
}

pub fn aggregate(scenario: Scenario, method: Method, q_safe: f64, eps: &[&EpisodeResult]) -> SweepRow {
    let collect = |f: &dyn Fn(&EpisodeResult) -> f64| eps.iter().map(|e| f(e)).collect::<Vec<f64>>();
    let (duration_mean, duration_std) = mean_std(&collect(&|e| e.duration));
    let (speed_mean, speed_std) = mean_std(&collect(&|e| e.mean_speed));
    let track = scenario == Scenario::Track;
    let (te_mean, te_std) = mean_std(&collect(&|e| e.tracking_error.unwrap_or(f64::NAN)));
    let scored: usize = eps.iter().map(|e| e.scored).sum();
    let misses: usize = eps.iter().map(|e| e.misses).sum();
    SweepRow {
        schema_version: TRACE_SCHEMA_VERSION,
        scenario: scenario.as_str().into(),
        method: method.as_str().into(),
        q_safe,
        n: eps.len(),
        duration_mean,
        duration_std,
        speed_mean,
        speed_std,
        tracking_error_mean: track.then_some(te_mean),
        tracking_error_std: track.then_some(te_std),
        cross_track_mean: track.then(|| mean(&collect(&|e| e.cross_track_rms.unwrap_or(f64::NAN)))),
        collision_rate: (!track).then(|| mean(&collect(&|e| f64::from(u8::from(e.collided))))),
        coverage: if scored == 0 { f64::NAN } else { 1.0 - misses as f64 / scored as f64 },
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub episodes: Vec<((f64, Method), Vec<EpisodeResult>)>,
}

impl SweepOutcome {
    pub fn episodes_for(&self, q_safe: f64, method: Method) -> &[EpisodeResult] {
        self.episodes
            .iter()
            .find(|((q, m), _)| *q == q_safe && *m == method)
            .map_or(&[], |(_, e)| e.as_slice())
    }
}

fn needs_predictor(cfg: &ExperimentConfig) -> bool {
    cfg.methods.iter().any(|m| m.switching())
}

/// Grid x methods x seeds; `rollout` is the single-point special case.
pub fn run_sweep_in_memory(cfg: &ExperimentConfig, root: u64, predictor: Option<&Predictor>) -> Result<SweepOutcome> {
    let grid = cfg.grid();
    let seeds = cfg.rollout_seeds(root);
    let groups: Vec<(f64, Method)> = grid
        .iter()
        .flat_map(|&q| cfg.methods.iter().map(move |&m| (q, m)))
        .collect();
    let results = if cfg.carry_quantile {
        run_chained(cfg, predictor, &groups, &seeds, cfg.write_traces)?
    } else {
        let jobs: Vec<(f64, Method, u64)> = groups
            .iter()
            .flat_map(|&(q, m)| seeds.iter().map(move |&s| (q, m, s)))
            .collect();
        run_jobs(cfg, predictor, &jobs, cfg.write_traces)?
    };
    let mut rows = Vec::new();
    let mut episodes = Vec::new();
    let mut it = results.into_iter();
    for &q in &grid {
        for &m in &cfg.methods {
            let eps: Vec<EpisodeResult> = it.by_ref().take(seeds.len()).collect();
            rows.push(aggregate(cfg.scenario, m, q, &eps.iter().collect::<Vec<_>>()));
            episodes.push(((q, m), eps));
        }
    }
    Ok(SweepOutcome { rows, episodes })
}

fn sweep_to_disk(cfg: &ExperimentConfig, root: u64, out: &Path, command: &str, single: bool) -> Result<SweepOutcome> {
    ensure_dir(out)?;
    let predictor = if needs_predictor(cfg) { Some(load_predictor(cfg)?) } else { None };
    let mut run_cfg = cfg.clone();
    if single {
        run_cfg.q_safe_grid.clear();
    }
    let outcome = run_sweep_in_memory(&run_cfg, root, predictor.as_ref())?;
    if cfg.write_traces {
        let rows: Vec<StepLog> = outcome
            .episodes
            .iter()
            .flat_map(|(_, eps)| eps.iter().flat_map(|e| e.rows.iter().cloned()))
            .collect();
        write_traces(&out.join(TRACES_FILE), &rows)?;
    }
    write_sweep(&out.join(SWEEP_FILE), &outcome.rows)?;
    write_summary(out, command, root, &run_cfg, json!({ "results": outcome.rows }))?;
    Ok(outcome)
}

pub fn run_rollout(cfg: &ExperimentConfig, root: u64, out: &Path) -> Result<SweepOutcome> {
    sweep_to_disk(cfg, root, out, "rollout", true)
}

pub fn run_sweep(cfg: &ExperimentConfig, root: u64, out: &Path) -> Result<SweepOutcome> {
    sweep_to_disk(cfg, root, out, "sweep", false)
}

// ---------------------------------------------------------------- coverage

/// Sliding-window means of `1 - err`. A window longer than the series
/// collapses to one full-series window; the flag reports that fallback.
pub fn sliding_coverage(errs: &[bool], window: usize) -> (Vec<f64>, bool) {
    if errs.is_empty() {
        return (Vec::new(), false);
    }
    let (w, fallback) = if window == 0 || window > errs.len() {
        (errs.len(), true)
    } else {
        (window, false)
    };
    let mut covered = errs[..w].iter().filter(|&&e| !e).count();
    let mut out = vec![covered as f64 / w as f64];
    for i in w..errs.len() {
        covered += usize::from(!errs[i]);
        covered -= usize::from(!errs[i - w]);
        out.push(covered as f64 / w as f64);
    }
    (out, fallback)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRow {
    pub schema_version: u32,
    pub scenario: String,
    pub method: String,
    pub q_safe: f64,
    pub seed: u64,
    pub window_start: usize,
    pub window: usize,
    pub coverage: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageSummary {
    pub episodes: usize,
    pub scored_steps: usize,
    pub overall_coverage: f64,
    pub fallback_episodes: usize,
    /// Overall coverage per `method@q_safe`.
    pub by_group: BTreeMap<String, f64>,
}

pub fn run_coverage_report(traces: &[StepLog], window: usize) -> (Vec<CoverageRow>, CoverageSummary) {
    let mut groups: BTreeMap<(String, String, u64, u64), (f64, Vec<bool>)> = BTreeMap::new();
    for r in traces {
        if let Some(e) = r.err {
            groups
                .entry((r.scenario.clone(), r.method.clone(), r.q_safe.to_bits(), r.seed))
                .or_insert_with(|| (r.q_safe, Vec::new()))
                .1
                .push(e == 1);
        }
    }
    let mut rows = Vec::new();
    let mut fallback_episodes = 0;
    let mut scored = 0;
    let mut missed = 0;
    let mut by_group: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for ((scenario, method, _, seed), (q_safe, errs)) in &groups {
        let (series, fallback) = sliding_coverage(errs, window);
        if fallback {
            log::warn!(
                "window {window} longer than the {} scored steps of {method} seed {seed}; using one full-trace window",
                errs.len()
            );
            fallback_episodes += 1;
        }
        let w = if fallback { errs.len() } else { window };
        rows.extend(series.into_iter().enumerate().map(|(i, c)| CoverageRow {
            schema_version: TRACE_SCHEMA_VERSION,
            scenario: scenario.clone(),
            method: method.clone(),
            q_safe: *q_safe,
            seed: *seed,
            window_start: i,
            window: w,
            coverage: c,
        }));
        let m = errs.iter().filter(|&&e| e).count();
        scored += errs.len();
        missed += m;
        let g = by_group.entry(format!("{method}@{q_safe}")).or_default();
        g.0 += errs.len();
        g.1 += m;
    }
    let summary = CoverageSummary {
        episodes: groups.len(),
        scored_steps: scored,
        overall_coverage: if scored == 0 { f64::NAN } else { 1.0 - missed as f64 / scored as f64 },
        fallback_episodes,
        by_group: by_group
            .into_iter()
            .map(|(k, (n, m))| (k, 1.0 - m as f64 / n as f64))
            .collect(),
    };
    (rows, summary)
}

pub fn run_coverage(cfg: &ExperimentConfig, root: u64, out: &Path) -> Result<CoverageSummary> {
    ensure_dir(out)?;
    let path = cfg.traces.clone().unwrap_or_else(|| out.join(TRACES_FILE));
    let traces = read_traces(&path)?;
    if traces.is_empty() {
        return Err(Error::Config(format!("{} has no rows", path.display())));
    }
    let (rows, summary) = run_coverage_report(&traces, cfg.window);
    let cov_path = out.join(COVERAGE_FILE);
    let mut w = csv::Writer::from_path(&cov_path).map_err(|e| Error::Config(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Config(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&cov_path, e))?;
    write_summary(out, "coverage", root, cfg, serde_json::to_value(&summary)?)?;
    Ok(summary)
}

// ---------------------------------------------------------------- verification

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Uniform,
    RegimeSwitching,
    Adversarial,
}

impl StreamKind {
    pub const ALL: [StreamKind; 3] = [StreamKind::Uniform, StreamKind::RegimeSwitching, StreamKind::Adversarial];
}

/// Scores in `[0, bound]` for stream `index` of `kind`, reproducible by `(seed, kind, index)`.
///
/// The adversary simulates the tracker it attacks and places each score just
/// above the current quantile when that is still inside `[0, B]` (forcing a
/// miss), otherwise at a random covered value.
pub fn score_stream(kind: StreamKind, seed: u64, index: u64, len: usize, cfg: &TrackerConfig, bound: f64) -> Result<Vec<f64>> {
    let mut rng = substream(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index), Stream::Adversary);
    let mut out = Vec::with_capacity(len);
    match kind {
        StreamKind::Uniform => out.extend((0..len).map(|_| rng.gen_range(0.0..=bound))),
        StreamKind::RegimeSwitching => {
            while out.len() < len {
                let seg = rng.gen_range(10..=120usize);
                let a = rng.gen_range(0.0..=bound);
                let b = rng.gen_range(0.0..=bound);
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                for _ in 0..seg.min(len - out.len()) {
                    out.push(rng.gen_range(lo..=hi));
                }
            }
        }
        StreamKind::Adversarial => {
            let mut tracker = QuantileTracker::new(cfg.clone())?;
            let greed: f64 = rng.gen_range(0.5..=1.0);
            for _ in 0..len {
                let q = tracker.quantile();
                let target = q + 1e-6 * bound;
                let s = if target <= bound && rng.gen::<f64>() < greed {
                    target.max(0.0)
                } else if q > 0.0 {
                    rng.gen_range(0.0..=q.min(bound))
                } else {
                    rng.gen_range(0.0..=bound)
                };
                tracker.observe(s)?;
                out.push(s);
            }
        }
    }
    Ok(out)
}

fn flipped_rule(q: f64, eta: f64, err: bool, alpha: f64) -> f64 {
    q - eta * (f64::from(u8::from(err)) - alpha)
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoremSuite {
    pub passed: bool,
    pub streams: usize,
    pub failed_streams: usize,
    pub windows_checked: usize,
    pub violations: usize,
    pub min_slack: f64,
    pub max_telescoping_residual_per_step: f64,
    pub telescoping_passed: bool,
    pub by_kind: BTreeMap<String, usize>,
}

pub fn run_theorem_suite(cfg: &ExperimentConfig, root: u64) -> Result<TheoremSuite> {
    let tracker = TrackerConfig::new(cfg.verify_alpha, EtaMode::Fixed(cfg.verify_eta))?.with_bound(cfg.score_bound);
    let rule = if cfg.sabotage { flipped_rule } else { standard_rule };
    let jobs: Vec<(StreamKind, u64)> = (0..cfg.verify_streams as u64)
        .map(|i| (StreamKind::ALL[(i % 3) as usize], i))
        .collect();
    let checks: Vec<Result<(StreamKind, crate::conformal::TheoremCheck)>> = jobs
        .par_iter()
        .map(|&(kind, i)| {
            let scores = score_stream(kind, root, i, cfg.verify_len, &tracker, cfg.score_bound)?;
            Ok((kind, verify_theorem_with_rule(&scores, &tracker, rule)?))
        })
        .collect();
    let mut suite = TheoremSuite {
        passed: true,
        streams: jobs.len(),
        failed_streams: 0,
        windows_checked: 0,
        violations: 0,
        min_slack: f64::INFINITY,
        max_telescoping_residual_per_step: 0.0,
        telescoping_passed: true,
        by_kind: BTreeMap::new(),
    };
    for c in checks {
        let (kind, check) = c?;
        *suite.by_kind.entry(format!("{kind:?}")).or_default() += 1;
        suite.windows_checked += check.windows_checked;
        suite.violations += check.violations;
        if !check.passed {
            suite.failed_streams += 1;
        }
        if let Some(w) = check.worst {
            suite.min_slack = suite.min_slack.min(w.slack());
        }
        let t = check.state.t.max(1) as f64;
        // the sabotaged rule breaks the identity by construction; only the honest run is held to it
        let residual = if cfg.sabotage { 0.0 } else { check.telescoping_residual };
        suite.max_telescoping_residual_per_step = suite.max_telescoping_residual_per_step.max(residual / t);
    }
    suite.telescoping_passed = suite.max_telescoping_residual_per_step <= 1e-9;
    suite.passed = suite.failed_streams == 0 && suite.telescoping_passed;
    Ok(suite)
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditSuite {
    pub scenario: String,
    pub passed: bool,
    pub rollouts: usize,
    /// Logs at least `K` scored steps long.
    pub auditable: usize,
    pub runs: usize,
    pub windows_checked: usize,
    pub violations: usize,
    pub worst_miss_rate: Option<f64>,
    pub level: f64,
    pub alpha_safe: f64,
    pub k: usize,
}

/// Audits the eventually-safe premise over switching rollouts. Logs shorter
/// than `K` cannot contain a premise window and are counted, not failed.
pub fn audit_rollouts(scenario: Scenario, eps: &[EpisodeResult], level: f64, alpha: f64, k: usize) -> Result<AuditSuite> {
    let logs: Vec<&[AuditPoint]> = eps.iter().map(|e| e.audit.as_slice()).collect();
    audit_logs(scenario, &logs, level, alpha, k)
}

/// Audits rollouts that shared one carried tracker as a single log in seed
/// order, so premise windows may span rollout boundaries.
pub fn audit_chain(scenario: Scenario, eps: &[EpisodeResult], level: f64, alpha: f64, k: usize) -> Result<AuditSuite> {
    let chain: Vec<AuditPoint> = eps.iter().flat_map(|e| e.audit.iter().copied()).collect();
    audit_logs(scenario, &[chain.as_slice()], level, alpha, k)
}

fn audit_logs(scenario: Scenario, logs: &[&[AuditPoint]], level: f64, alpha: f64, k: usize) -> Result<AuditSuite> {
    let spec = EventuallySafeSpec::new(level, alpha / 2.0, k, alpha)?;
    let mut suite = AuditSuite {
        scenario: scenario.as_str().into(),
        passed: true,
        rollouts: logs.len(),
        auditable: 0,
        runs: 0,
        windows_checked: 0,
        violations: 0,
        worst_miss_rate: None,
        level,
        alpha_safe: spec.alpha_safe,
        k,
    };
    for log in logs {
        let report = audit_eventually_safe(log, &spec);
        if !report.auditable {
            continue;
        }
        suite.auditable += 1;
        suite.runs += report.runs.len();
        suite.windows_checked += report.windows_checked;
        suite.violations += report.violations;
        if let Some(w) = report.worst {
            suite.worst_miss_rate = Some(suite.worst_miss_rate.map_or(w.miss_rate, |m: f64| m.max(w.miss_rate)));
        }
    }
    suite.passed = suite.violations == 0;
    Ok(suite)
}

/// Config for the audit rollouts of one simulator.
pub fn audit_config(base: &ExperimentConfig, scenario: Scenario) -> ExperimentConfig {
    let mut c = base.clone();
    c.scenario = scenario;
    c.methods = vec![Method::Quantile];
    c.write_traces = false;
    match scenario {
        Scenario::Track => {
            c.alpha = 0.2;
            c.horizon = 2;
            c.q_safe = 0.8;
            c.kp_min = 0.8;
            c.kp_max = 4.0;
            c.predictor = base.track_predictor.clone();
        }
        _ => {
            c.alpha = 0.1;
            c.horizon = 3;
            c.v_max = 40.0;
            c.predictor = base.highway_predictor.clone();
        }
    }
    c
}

/// Uses the configured model, or fits a ridge forecaster on fresh collection rollouts.
pub fn audit_predictor(cfg: &ExperimentConfig, root: u64) -> Result<(Predictor, &'static str)> {
    if cfg.predictor.is_some() {
        return Ok((load_predictor(cfg)?, "loaded"));
    }
    let mut c = cfg.clone();
    c.model_kind = ModelKind::Linear;
    c.train_rollouts = c.train_rollouts.min(100);
    let (_, aligned) = collect_dataset(&c, root)?;
    let samples: Vec<Sample> = aligned.into_iter().map(|a| a.sample).collect();
    Ok((Predictor::Linear(LinearModel::fit(&samples, c.ridge)?), "ridge fitted in place"))
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub sabotage: bool,
    pub theorem: TheoremSuite,
    pub audits: Vec<AuditSuite>,
    pub predictors: BTreeMap<String, String>,
}

pub fn run_verify(cfg: &ExperimentConfig, root: u64, out: Option<&Path>) -> Result<VerifyReport> {
    let theorem = run_theorem_suite(cfg, root)?;
    let mut audits = Vec::new();
    let mut predictors = BTreeMap::new();
    if cfg.audit_rollouts > 0 {
        for scenario in [Scenario::Highway, Scenario::Track] {
            let c = audit_config(cfg, scenario);
            let (predictor, source) = audit_predictor(&c, root.wrapping_add(1_000_000))?;
            predictors.insert(scenario.as_str().to_string(), source.to_string());
            let jobs: Vec<(f64, Method, u64)> = (0..c.audit_rollouts as u64)
                .map(|i| (c.q_safe, Method::Quantile, root.wrapping_add(2_000_000 + i)))
                .collect();
            let eps = run_jobs(&c, Some(&predictor), &jobs, false)?;
            audits.push(audit_rollouts(scenario, &eps, c.q_safe, c.alpha, c.audit_k)?);
        }
    }
    let report = VerifyReport {
        passed: theorem.passed && audits.iter().all(|a| a.passed),
        sabotage: cfg.sabotage,
        theorem,
        audits,
        predictors,
    };
    if let Some(out) = out {
        ensure_dir(out)?;
        write_summary(out, "verify", root, cfg, serde_json::to_value(&report)?)?;
    }
    Ok(report)
}
