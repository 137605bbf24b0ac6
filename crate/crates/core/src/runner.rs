//! Experiment orchestration and artifact layout.
//!
//! A training run writes into its output directory:
//!
//! ```text
//! suite.json              generated tasks
//! checkpoints/base.txt    starting policy
//! checkpoints/iter_NNN.txt, checkpoints/best.txt
//! eval/base.json, eval/iter_NNN.json
//! trace.jsonl, trace.csv  one record per phase step
//! rl_steps.csv            one row per RL step
//! histogram.csv           final accuracy histogram
//! manifest.json
//! ```
//!
//! Metric files are written with a `.partial` suffix and renamed once the
//! run finishes, so a failed run leaves them marked as incomplete.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{ExperimentConfig, Mode};
use crate::envs::{make_benchmark_suite, skewed_suite_policy, suite_from_json, suite_to_json, PathTask, SuiteParams};
use crate::error::{Error, Result};
use crate::irl::{run_loop, LoopOptions};
use crate::metrics::{evaluate, EvalParams, EvaluationReport};
use crate::objectives::step_records_csv;
use crate::policy::PolicyTable;
use crate::rng;
use crate::squeeze::{penalize_token, verify_squeeze, CheckResult, SqueezeReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// SHA-256 of the resolved config in TOML form.
    pub config_hash: String,
    pub mode: Mode,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

struct Artifacts {
    root: PathBuf,
    written: Vec<String>,
    partial: Vec<String>,
}

impl Artifacts {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
            partial: Vec::new(),
        })
    }

    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(p)
    }

    /// Written in place.
    fn write(&mut self, rel: &str, contents: &str) -> Result<()> {
        let p = self.path(rel)?;
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        self.written.push(rel.to_string());
        Ok(())
    }

    /// Written as `<rel>.partial` until [`Artifacts::commit`].
    fn write_metric(&mut self, rel: &str, contents: &str) -> Result<()> {
        let p = self.path(&format!("{rel}.partial"))?;
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        self.partial.push(rel.to_string());
        Ok(())
    }

    fn checkpoint(&mut self, rel: &str, policy: &PolicyTable) -> Result<()> {
        let p = self.path(rel)?;
        save_checkpoint(policy, &p)?;
        if !self.written.iter().any(|w| w == rel) {
            self.written.push(rel.to_string());
        }
        Ok(())
    }

    fn commit(&mut self) -> Result<()> {
        for rel in self.partial.drain(..) {
            let from = self.root.join(format!("{rel}.partial"));
            let to = self.root.join(&rel);
            fs::rename(&from, &to).map_err(|e| Error::io(&from, e))?;
            self.written.push(rel);
        }
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Loads the config (honoring the seed override) and runs it.
pub fn run(config_path: impl AsRef<Path>) -> Result<RunManifest> {
    let cfg = ExperimentConfig::load(config_path)?;
    run_config(&cfg)
}

pub fn run_config(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    match cfg.runtime.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("runtime.workers: {e}")))?
            .install(|| dispatch(cfg)),
        None => dispatch(cfg),
    }
}

fn dispatch(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let resolved = cfg.to_toml()?;
    let config_hash = sha256_hex(resolved.as_bytes());
    let mut out = Artifacts::new(&cfg.output_dir)?;
    let mut timings = BTreeMap::new();
    let started = Instant::now();

    match cfg.mode {
        Mode::SqueezeDemo => {
            let demo = squeeze_demo(&cfg.squeeze.logits, cfg.squeeze.penalized, cfg.squeeze.eta)?;
            print!("{}", demo.to_table());
            out.write_metric("squeeze_report.json", &json_pretty(&demo.to_json())?)?;
        }
        Mode::Eval => {
            let (checkpoint, suite) = match (&cfg.eval.checkpoint, &cfg.eval.suite) {
                (Some(c), Some(s)) => (c, s),
                _ => return Err(Error::Config("eval: `checkpoint` and `suite` are required".into())),
            };
            let report = eval_files(checkpoint, suite, None, &cfg.eval_params(), cfg.seed)?;
            out.write_metric("eval/report.json", &json_pretty(&report)?)?;
            out.write_metric("histogram.csv", &report.histogram.to_csv())?;
        }
        Mode::Grpo | Mode::Dapo | Mode::Gspo | Mode::Sps => train(cfg, &mut out, &mut timings)?,
    }
    out.commit()?;
    timings.insert("total".into(), started.elapsed().as_secs_f64());

    let mut artifacts = out.written.clone();
    artifacts.push("manifest.json".into());
    let manifest = RunManifest {
        run_id: config_hash[..12].to_string(),
        config_hash,
        mode: cfg.mode,
        seed: cfg.seed,
        config: cfg.clone(),
        artifacts,
        timings,
    };
    out.write("manifest.json", &json_pretty(&manifest)?)?;
    Ok(manifest)
}

fn heldout_suite(cfg: &ExperimentConfig) -> Result<Vec<PathTask>> {
    if cfg.eval.heldout_tasks == 0 {
        return Ok(Vec::new());
    }
    let params = SuiteParams {
        num_tasks: cfg.suite.num_tasks + cfg.eval.heldout_tasks,
        ..cfg.suite.clone()
    };
    let seed = rng::stream_seed(cfg.seed, &[rng::TAG_HELDOUT]);
    Ok(make_benchmark_suite(seed, &params)?.split_off(cfg.suite.num_tasks))
}

fn train(cfg: &ExperimentConfig, out: &mut Artifacts, timings: &mut BTreeMap<String, f64>) -> Result<()> {
    let t = Instant::now();
    let tasks = make_benchmark_suite(cfg.seed, &cfg.suite)?;
    out.write("suite.json", &suite_to_json(&tasks)?)?;
    let heldout = heldout_suite(cfg)?;
    let base = match &cfg.policy.init_checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => skewed_suite_policy(&tasks, cfg.policy.skew, cfg.seed)?,
    };
    out.checkpoint("checkpoints/base.txt", &base)?;
    timings.insert("setup".into(), t.elapsed().as_secs_f64());

    let eval_params = cfg.eval_params();
    let t = Instant::now();
    let base_report = evaluate(&base, &base, &tasks, "train", &eval_params, cfg.seed)?;
    out.write_metric("eval/base.json", &json_pretty(&base_report)?)?;
    let mut eval_secs = t.elapsed().as_secs_f64();

    let sps = cfg.sps_config();
    let mut best: Option<f64> = None;
    let mut last_report = base_report;
    let mut pending: Vec<(String, String)> = Vec::new();
    let mut hook = |iter: usize, policy: &PolicyTable| -> Result<()> {
        out.checkpoint(&format!("checkpoints/iter_{iter:03}.txt"), policy)?;
        let t = Instant::now();
        let report = evaluate(policy, &base, &tasks, "train", &eval_params, cfg.seed)?;
        eval_secs += t.elapsed().as_secs_f64();
        pending.push((format!("eval/iter_{iter:03}.json"), json_pretty(&report)?));
        // strict improvement keeps the earliest of tied checkpoints
        if best.is_none_or(|b| report.avg_at_k > b) {
            best = Some(report.avg_at_k);
            out.checkpoint("checkpoints/best.txt", policy)?;
        }
        last_report = report;
        Ok(())
    };

    let t = Instant::now();
    let opts = LoopOptions {
        irl_enabled: cfg.mode == Mode::Sps,
        heldout: &heldout,
        on_iteration: Some(&mut hook),
    };
    let result = run_loop(&base, &tasks, &sps, cfg.seed, opts);
    let loop_secs = t.elapsed().as_secs_f64();
    for (rel, text) in pending.drain(..) {
        out.write_metric(&rel, &text)?;
    }
    let (_, trace) = result?;
    timings.insert("train".into(), loop_secs - eval_secs);
    timings.insert("eval".into(), eval_secs);

    out.write_metric("trace.jsonl", &trace.to_jsonl()?)?;
    out.write_metric("trace.csv", &trace.to_csv())?;
    out.write_metric("rl_steps.csv", &step_records_csv(&trace.rl_steps))?;
    out.write_metric("histogram.csv", &last_report.histogram.to_csv())?;
    Ok(())
}

/// Evaluates a saved checkpoint on a saved suite. Greedy drift is measured
/// against `base`, or against the uniform policy when none is given.
pub fn eval_files(
    checkpoint: &Path,
    suite: &Path,
    base: Option<&Path>,
    params: &EvalParams,
    seed: u64,
) -> Result<EvaluationReport> {
    let policy = load_checkpoint(checkpoint)?;
    let text = fs::read_to_string(suite).map_err(|e| Error::io(suite, e))?;
    let tasks = suite_from_json(&text)?;
    let base = match base {
        Some(p) => load_checkpoint(p)?,
        None => PolicyTable::new(policy.vocab(), policy.max_len())?,
    };
    let name = suite
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    evaluate(&policy, &base, &tasks, &name, params, seed)
}

/// A penalized-token report with its verification checks.
pub struct SqueezeDemo {
    pub report: SqueezeReport,
    pub checks: Vec<CheckResult>,
}

#[derive(Serialize)]
pub struct SqueezeDemoJson<'a> {
    pub before: &'a [f64],
    pub after: &'a [f64],
    pub denom: f64,
    pub scale_factor: f64,
    pub checks: &'a [CheckResult],
}

/// Runs [`penalize_token`]; checks are skipped (empty) when the update is not
/// a squeeze setting.
pub fn squeeze_demo(logits: &[f64], penalized: usize, eta: f64) -> Result<SqueezeDemo> {
    let (_, report) = penalize_token(logits, penalized, eta)?;
    let checks = match verify_squeeze(&report) {
        Ok(c) => c,
        Err(Error::NotASqueezeSetting(_)) => Vec::new(),
        Err(e) => return Err(e),
    };
    Ok(SqueezeDemo { report, checks })
}

impl SqueezeDemo {
    pub fn to_json(&self) -> SqueezeDemoJson<'_> {
        SqueezeDemoJson {
            before: self.report.before.probs(),
            after: self.report.after.probs(),
            denom: self.report.denom,
            scale_factor: self.report.scale_factor,
            checks: &self.checks,
        }
    }

    pub fn to_table(&self) -> String {
        let r = &self.report;
        let mut s = format!("{:>5}  {:>12}  {:>12}  {:>13}\n", "token", "before", "after", "delta");
        for (j, ((b, a), d)) in r
            .before
            .probs()
            .iter()
            .zip(r.after.probs())
            .zip(&r.mass_delta)
            .enumerate()
        {
            let mark = if j == r.penalized { " *" } else { "" };
            let _ = writeln!(s, "{j:>5}  {b:>12.9}  {a:>12.9}  {d:>+13.9}{mark}");
        }
        let _ = writeln!(s, "eta           {}", r.eta);
        let _ = writeln!(s, "denom         {:.12}", r.denom);
        let _ = writeln!(s, "scale_factor  {:.12}", r.scale_factor);
        for c in &self.checks {
            let _ = writeln!(
                s,
                "check {:<22} {}  residual {:.3e}",
                c.name,
                if c.passed { "pass" } else { "FAIL" },
                c.residual
            );
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestCheckpoint {
    pub run_dir: PathBuf,
    /// Iteration of the selected report.
    pub iteration: usize,
    pub report: EvaluationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub run_a: f64,
    pub run_b: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub run_a: BestCheckpoint,
    pub run_b: BestCheckpoint,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,run_a,run_b,delta\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:?},{:?},{:?}", r.metric, r.run_a, r.run_b, r.delta);
        }
        s
    }
}

/// Highest Avg@k among `eval/iter_NNN.json`; ties go to the earliest iteration.
pub fn best_checkpoint(run_dir: &Path) -> Result<BestCheckpoint> {
    let eval_dir = run_dir.join("eval");
    let entries = fs::read_dir(&eval_dir)
        .map_err(|_| Error::MissingArtifacts(format!("{} has no evaluation reports", run_dir.display())))?;
    let mut reports = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&eval_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let iteration = name
            .strip_prefix("iter_")
            .and_then(|n| n.strip_suffix(".json"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(iteration) = iteration {
            let text = fs::read_to_string(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
            reports.push((iteration, serde_json::from_str::<EvaluationReport>(&text)?));
        }
    }
    reports.sort_by_key(|(i, _)| *i);
    let mut best: Option<(usize, EvaluationReport)> = None;
    for (i, r) in reports {
        if best.as_ref().is_none_or(|(_, b)| r.avg_at_k > b.avg_at_k) {
            best = Some((i, r));
        }
    }
    let (iteration, report) =
        best.ok_or_else(|| Error::MissingArtifacts(format!("{} has no eval/iter_*.json", run_dir.display())))?;
    Ok(BestCheckpoint {
        run_dir: run_dir.to_path_buf(),
        iteration,
        report,
    })
}

/// Side-by-side metrics of each run's best checkpoint; `delta` is `b - a`.
/// Writes `compare.csv` and `compare.json` into `out_dir` when given.
pub fn compare(run_a: &Path, run_b: &Path, out_dir: Option<&Path>) -> Result<ComparisonReport> {
    let a = best_checkpoint(run_a)?;
    let b = best_checkpoint(run_b)?;
    let metrics = |r: &EvaluationReport| {
        vec![
            ("pass_at_k", r.pass_at_k),
            ("avg_at_k", r.avg_at_k),
            ("support_covered", r.support.covered as f64),
            ("support_mass", r.support.mass),
            ("greedy_drift_mean", r.greedy_drift_mean),
            ("similarity_bigram_jaccard", r.similarity_bigram_jaccard),
        ]
    };
    let rows = metrics(&a.report)
        .into_iter()
        .zip(metrics(&b.report))
        .map(|((name, va), (_, vb))| ComparisonRow {
            metric: name.to_string(),
            run_a: va,
            run_b: vb,
            delta: vb - va,
        })
        .collect();
    let report = ComparisonReport {
        run_a: a,
        run_b: b,
        rows,
    };
    if let Some(dir) = out_dir {
        let mut out = Artifacts::new(dir)?;
        out.write("compare.csv", &report.to_csv())?;
        out.write("compare.json", &json_pretty(&report)?)?;
    }
    Ok(report)
}
