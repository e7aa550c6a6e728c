//! End-to-end runner behavior: sweep bookkeeping, re-aggregation from the
//! persisted traces, determinism, quantile carry-over, the CLI surface, and
//! closed-loop tendencies that need full simulator runs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use conformal_policy::predictor::Predictor;
use conformal_policy::runner::experiment::{
    run_chained, run_coverage_report, run_sweep_in_memory, run_train_predictor, SWEEP_FILE, TRACES_FILE,
};
use conformal_policy::runner::stats::{mean, spearman};
use conformal_policy::runner::trace::{parse_sweep, read_traces};
use conformal_policy::runner::{run_rollout, run_sweep, ExperimentConfig, Method};
use conformal_policy::track::{fixed_gain_failure_rate, TrackConfig, TrajectoryKind};
use tempfile::TempDir;

struct Model {
    _dir: TempDir,
    path: PathBuf,
    calibrated_q: f64,
}

/// Default highway MLP, trained once per test binary.
fn highway_model() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let s = run_train_predictor(&ExperimentConfig::default(), 0, dir.path()).unwrap();
        Model {
            path: s.model_path.clone(),
            calibrated_q: s.calibrated_q,
            _dir: dir,
        }
    })
}

fn highway_cfg() -> ExperimentConfig {
    let m = highway_model();
    ExperimentConfig {
        v_max: 40.0,
        eta_adaptive: false,
        q_init: m.calibrated_q,
        predictor: Some(m.path.clone()),
        ..ExperimentConfig::default()
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn sweep_bookkeeping_and_reaggregation() {
    let out = TempDir::new().unwrap();
    let cfg = ExperimentConfig {
        q_safe_grid: vec![0.5, 0.8],
        n_rollouts: 3,
        ..highway_cfg()
    };
    let outcome = run_sweep(&cfg, 11, out.path()).unwrap();
    assert_eq!(outcome.rows.len(), 2);
    assert!(outcome.rows.iter().all(|r| r.n == 3));

    let traces = read_traces(&out.path().join(TRACES_FILE)).unwrap();
    let episodes: BTreeSet<(u64, u64)> = traces.iter().map(|r| (r.q_safe.to_bits(), r.seed)).collect();
    assert_eq!(episodes.len(), 6);
    assert!(traces.iter().all(|r| r.consistent()), "err must equal score > quantile on every row");

    // recompute every aggregate that the traces determine
    let persisted = parse_sweep(&String::from_utf8(read(&out.path().join(SWEEP_FILE))).unwrap()).unwrap();
    assert_eq!(persisted, outcome.rows);
    for row in &persisted {
        let rows: Vec<_> = traces.iter().filter(|r| r.q_safe == row.q_safe && r.method == row.method).collect();
        let scored = rows.iter().filter(|r| r.err.is_some()).count();
        let misses = rows.iter().filter(|r| r.err == Some(1)).count();
        assert_eq!(row.coverage, 1.0 - misses as f64 / scored as f64);
        let seeds: BTreeSet<u64> = rows.iter().map(|r| r.seed).collect();
        assert_eq!(seeds, (11..14).collect());
        let mut last_t: BTreeMap<u64, f64> = BTreeMap::new();
        for r in &rows {
            if r.decision == "terminal" {
                last_t.insert(r.seed, r.t);
            }
        }
        let eps = outcome.episodes_for(row.q_safe, Method::Quantile);
        for e in eps {
            if let Some(t) = last_t.get(&e.seed) {
                assert_eq!(*t, e.duration);
            }
        }
        assert_eq!(row.duration_mean, mean(&eps.iter().map(|e| e.duration).collect::<Vec<_>>()));
    }
}

#[test]
fn coverage_report_matches_brute_force() {
    let cfg = ExperimentConfig {
        n_rollouts: 4,
        ..highway_cfg()
    };
    let outcome = run_sweep_in_memory(&cfg, 3, Some(&Predictor::load(&highway_model().path).unwrap())).unwrap();
    let traces: Vec<_> = outcome.episodes.iter().flat_map(|(_, e)| e.iter().flat_map(|x| x.rows.clone())).collect();
    let (rows, summary) = run_coverage_report(&traces, 5);
    for e in outcome.episodes.iter().flat_map(|(_, e)| e.iter()) {
        let errs: Vec<bool> = e.rows.iter().filter_map(|r| r.err).map(|b| b == 1).collect();
        let series: Vec<f64> = rows.iter().filter(|r| r.seed == e.seed).map(|r| r.coverage).collect();
        assert_eq!(series.len(), errs.len() - 4);
        for (i, c) in series.iter().enumerate() {
            let covered = errs[i..i + 5].iter().filter(|&&x| !x).count();
            assert_eq!(*c, covered as f64 / 5.0);
        }
    }
    let scored: usize = outcome.episodes.iter().flat_map(|(_, e)| e.iter()).map(|e| e.scored).sum();
    assert_eq!(summary.scored_steps, scored);
}

fn sweep_files(cfg: &ExperimentConfig, threads: usize) -> (Vec<u8>, Vec<u8>) {
    let out = TempDir::new().unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| run_sweep(cfg, 5, out.path())).unwrap();
    (read(&out.path().join(TRACES_FILE)), read(&out.path().join(SWEEP_FILE)))
}

#[test]
fn outputs_independent_of_scheduling() {
    for carry in [false, true] {
        let cfg = ExperimentConfig {
            q_safe_grid: vec![0.4, 0.7],
            methods: vec![Method::Quantile, Method::NoQuantile],
            n_rollouts: 6,
            carry_quantile: carry,
            ..highway_cfg()
        };
        assert_eq!(sweep_files(&cfg, 1), sweep_files(&cfg, 4), "carry = {carry}");
    }
}

#[test]
fn carried_quantile_chains_rollouts() {
    let cfg = highway_cfg();
    let p = Predictor::load(&highway_model().path).unwrap();
    let seeds = [0, 1, 2, 3];
    let chained = run_chained(&cfg, Some(&p), &[(0.6, Method::Quantile)], &seeds, false).unwrap();
    let fresh = conformal_policy::runner::experiment::run_jobs(
        &cfg,
        Some(&p),
        &seeds.iter().map(|&s| (0.6, Method::Quantile, s)).collect::<Vec<_>>(),
        false,
    )
    .unwrap();
    assert_eq!(chained[0], fresh[0]);
    for pair in chained.windows(2) {
        assert_eq!(pair[1].quantiles[0], pair[0].final_quantile);
    }
    assert!(fresh.iter().all(|e| e.quantiles[0] == cfg.q_init));
}

#[test]
fn missing_predictor_explains_how_to_train() {
    let out = TempDir::new().unwrap();
    let cfg = ExperimentConfig {
        predictor: None,
        ..ExperimentConfig::default()
    };
    let err = run_rollout(&cfg, 0, out.path()).unwrap_err().to_string();
    assert!(err.contains("train-predictor"), "{err}");
    let cfg = ExperimentConfig {
        predictor: Some(out.path().join("absent.txt")),
        ..ExperimentConfig::default()
    };
    assert!(run_rollout(&cfg, 0, out.path()).unwrap_err().to_string().contains("not found"));
}

/// With q_safe = 1.5 the switch can only fire once q exceeds 0.5, so after
/// the forecaster warm-up the switching policy drives like the pure speed
/// policy (the warm-up steps themselves run the safe fallback).
#[test]
fn unreachable_threshold_matches_speed_policy() {
    let p = Predictor::load(&highway_model().path).unwrap();
    let cfg = ExperimentConfig {
        q_safe: 1.5,
        methods: vec![Method::Quantile, Method::Speed, Method::Safe],
        n_rollouts: 100,
        q_init: 0.0,
        ..highway_cfg()
    };
    let outcome = run_sweep_in_memory(&cfg, 0, Some(&p)).unwrap();
    let rows = |m| -> Vec<_> { outcome.episodes_for(1.5, m).iter().flat_map(|e| e.rows.iter()).collect() };
    let switching = rows(Method::Quantile);
    assert!(switching.iter().all(|r| r.decision != "safe"));
    let warmup = switching.iter().filter(|r| r.decision == "warmup").map(|r| r.step).max().unwrap();
    // allow four more decisions to accelerate out of the warm-up (5 m/s each across [20, 40])
    let cruise = |rs: &[&conformal_policy::runner::StepLog]| {
        mean(&rs.iter().filter(|r| r.step > warmup + 4).map(|r| r.speed).collect::<Vec<_>>())
    };
    let (q, fast, slow) = (cruise(&switching), cruise(&rows(Method::Speed)), cruise(&rows(Method::Safe)));
    assert!((q - fast).abs() < 1.0, "{q} vs speed policy {fast}");
    assert!((q - fast).abs() < 0.1 * (fast - slow), "{q} vs {fast} / {slow}");
}

/// Higher fixed gain causes more localization failures.
#[test]
fn failure_rate_rises_with_gain() {
    let cfg = TrackConfig::default();
    let (mut kps, mut rates) = (Vec::new(), Vec::new());
    let mut means = Vec::new();
    for kp in [0.8, 1.5, 4.0] {
        let per_seed: Vec<f64> = (0..100)
            .map(|s| fixed_gain_failure_rate(&cfg, TrajectoryKind::Hexagon, kp, &[s]).unwrap())
            .collect();
        means.push(mean(&per_seed));
        kps.extend(std::iter::repeat(kp).take(per_seed.len()));
        rates.extend(per_seed);
    }
    assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");
    let rho = spearman(&kps, &rates);
    assert!(rho > 0.5, "spearman {rho}");
}

/// Under `Safe iff danger + q >= q_safe`, raising q_safe selects the safe
/// policy less often, so episodes get shorter: mean duration should not rise
/// along the grid, allowing one inversion within one standard deviation.
#[test]
fn duration_tendency_along_grid() {
    let p = Predictor::load(&highway_model().path).unwrap();
    let cfg = ExperimentConfig {
        q_safe_grid: vec![0.4, 0.5, 0.6, 0.7, 0.8],
        n_rollouts: 100,
        carry_quantile: true,
        write_traces: false,
        ..highway_cfg()
    };
    let rows = run_sweep_in_memory(&cfg, 0, Some(&p)).unwrap().rows;
    let mut inversions = 0;
    for pair in rows.windows(2) {
        let rise = pair[1].duration_mean - pair[0].duration_mean;
        if rise > 0.0 {
            inversions += 1;
            assert!(rise <= pair[0].duration_std.max(pair[1].duration_std), "rise {rise} at q_safe {}", pair[1].q_safe);
        }
    }
    assert!(inversions <= 1, "{inversions} inversions");
    assert!(rows[0].duration_mean > rows[4].duration_mean);
}

fn cpl(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cpl")).args(args).output().unwrap()
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, format!("schema_version = 1\n{body}")).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn cli_round_trip() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let s = |p: PathBuf| p.to_string_lossy().into_owned();

    let verify = write_cfg(d, "verify.cfg", "scenario = scorestream\nverify_streams = 30\naudit_rollouts = 0\n");
    let ok = cpl(&["verify", "--config", &verify, "--out", &s(d.join("v"))]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    assert!(d.join("v/summary.json").exists());
    let broken = write_cfg(d, "broken.cfg", "scenario = scorestream\nverify_streams = 30\naudit_rollouts = 0\nsabotage = true\n");
    assert_eq!(cpl(&["verify", "--config", &broken, "--out", &s(d.join("vb"))]).status.code(), Some(1));

    let train = write_cfg(d, "train.cfg", "scenario = highway\nmodel = linear\ntrain_rollouts = 20\n");
    let t = cpl(&["train-predictor", "--config", &train, "--seed", "1", "--out", &s(d.join("m"))]);
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    assert!(d.join("m/model.txt").exists());

    let model = s(d.join("m/model.txt"));
    let sweep = write_cfg(
        d,
        "sweep.cfg",
        &format!("scenario = highway\npredictor = {model}\nq_safe_grid = 0.5, 0.8\nn_rollouts = 3\nmethods = quantile, no_quantile\n"),
    );
    let sw = cpl(&["sweep", "--config", &sweep, "--out", &s(d.join("s"))]);
    assert!(sw.status.success(), "{}", String::from_utf8_lossy(&sw.stderr));
    for f in ["traces.csv", "sweep.csv", "summary.json"] {
        assert!(d.join("s").join(f).exists(), "{f}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&read(&d.join("s/summary.json"))).unwrap();
    assert_eq!(summary["command"], "sweep");
    assert_eq!(summary["metrics"]["results"].as_array().unwrap().len(), 4);

    let cov = write_cfg(d, "cov.cfg", &format!("traces = {}\nwindow = 5\n", s(d.join("s/traces.csv"))));
    let c = cpl(&["coverage", "--config", &cov, "--out", &s(d.join("c"))]);
    assert!(c.status.success(), "{}", String::from_utf8_lossy(&c.stderr));
    assert!(d.join("c/coverage.csv").exists());

    let bad = write_cfg(d, "bad.cfg", "scenario = highway\nnot_a_key = 1\n");
    let b = cpl(&["rollout", "--config", &bad, "--out", &s(d.join("b"))]);
    assert_eq!(b.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&b.stderr).contains("not_a_key"));
}

