//! Reproducible experiments on top of the library: dataset generation,
//! training, evaluation, sweeps and plots. Every command is a function of
//! the config and seed; every file it writes carries the config hash.

pub mod config;
pub mod plot;

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use config::ExperimentConfig;

use crate::curriculum::{write_metrics, JointTrainer, MonolithicTrainer, StepMetrics};
use crate::env::dataset::{DatasetFile, SampleSet};
use crate::env::rollout_perturbed;
use crate::error::{config_err, Error, Result};
use crate::nn::read_checkpoint_header;
use crate::planner::PlannerModel;
use crate::refiner::RefinerModel;
use crate::rng::{mix_seed, RngState};
use crate::runtime::{
    amortized_latency, clock_trace, evaluate, measure_latency, write_trace, ExecMode, ExecutionTrace, HorizonConfig,
    Policy, SuccessRate,
};

/// First line of every CSV the harness writes.
pub const HASH_PREFIX: &str = "# config_hash=";

pub const DATASET_FILE: &str = "dataset.bin";
pub const EVAL_HEADER: &str = "mode,exec,m,episodes,successes,success,half_width,ci_low,ci_high,latency_ms";
pub const BINS_HEADER: &str = "n_bins,success,half_width,episodes,latency_ms,seed";
pub const HORIZON_HEADER: &str = "m,success,half_width,episodes,latency_ms,measured_ms,seed";
pub const LATENCY_HEADER: &str = "m,amortized_ms,measured_ms";

/// Which policy a command trains or evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RunMode {
    #[default]
    Hierarchical,
    /// Observation-only refiner of equal total width.
    Monolithic,
    /// Scripted expert in the loop.
    Expert,
    /// Freshly initialized hierarchical models.
    Untrained,
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hierarchical" => Ok(Self::Hierarchical),
            "monolithic" => Ok(Self::Monolithic),
            "expert" => Ok(Self::Expert),
            "untrained" => Ok(Self::Untrained),
            other => Err(config_err(format!("unknown mode `{other}`"))),
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Hierarchical => "hierarchical",
            Self::Monolithic => "monolithic",
            Self::Expert => "expert",
            Self::Untrained => "untrained",
        })
    }
}

/// Perturbed expert demonstrations for `cfg`. Episode `i` uses a seed
/// derived from the config seed and task `i mod G`.
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<DatasetFile> {
    let env = cfg.data_env();
    let base = mix_seed(cfg.seed, 0xDA7A);
    let episodes = (0..cfg.data_episodes)
        .map(|i| rollout_perturbed(&env, mix_seed(base, i as u64), i % cfg.num_targets, cfg.data_exec_noise))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetFile {
        config_hash: cfg.data_hash(),
        seed: cfg.seed,
        dims: cfg.dims,
        num_targets: cfg.num_targets,
        episodes,
    })
}

/// Training rows covering the planner's full horizon.
pub fn build_samples(cfg: &ExperimentConfig, data: &DatasetFile) -> Result<SampleSet> {
    if data.dims != cfg.dims || data.num_targets != cfg.num_targets {
        return Err(config_err(format!(
            "dataset has D={} G={}, config wants D={} G={}",
            data.dims, data.num_targets, cfg.dims, cfg.num_targets
        )));
    }
    Ok(SampleSet::from_trajectories(&cfg.env(), &data.episodes, cfg.l_macro()))
}

pub fn new_hierarchical(cfg: &ExperimentConfig) -> Result<(PlannerModel, RefinerModel)> {
    let mut rng = RngState::new(mix_seed(cfg.seed, 0x1417));
    let planner = PlannerModel::new(cfg.planner_config(), &mut rng)?;
    let refiner = RefinerModel::new(cfg.refiner_config(false), &mut rng)?;
    Ok((planner, refiner))
}

pub fn new_monolithic(cfg: &ExperimentConfig) -> Result<RefinerModel> {
    RefinerModel::new(cfg.refiner_config(true), &mut RngState::new(mix_seed(cfg.seed, 0x3040)))
}

pub fn joint_trainer(cfg: &ExperimentConfig) -> Result<JointTrainer> {
    let (planner, refiner) = new_hierarchical(cfg)?;
    JointTrainer::new(planner, refiner, cfg.train_config(), mix_seed(cfg.seed, 0x7A1))
}

pub fn monolithic_trainer(cfg: &ExperimentConfig, data: &SampleSet) -> Result<MonolithicTrainer> {
    MonolithicTrainer::new(new_monolithic(cfg)?, cfg.train_config(), data, mix_seed(cfg.seed, 0x3041))
}

/// Evaluate `policy` with the config's episode count, seeds and clock.
pub fn evaluate_policy(
    cfg: &ExperimentConfig,
    policy: Policy,
    horizon: HorizonConfig,
    mode: ExecMode,
    on_episode: impl FnMut(usize, &ExecutionTrace) -> Result<()>,
) -> Result<SuccessRate> {
    evaluate(
        &cfg.env(),
        policy,
        horizon,
        mode,
        cfg.clock(),
        cfg.eval_seed,
        cfg.eval_episodes,
        on_episode,
    )
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub mode: RunMode,
    pub rate: SuccessRate,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: usize,
    pub rate: SuccessRate,
    /// Closed-form amortized latency.
    pub latency_ms: f64,
    /// Mean simulated latency over evaluation traces.
    pub measured_ms: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Index of the row with the highest success rate (first on ties).
    pub fn best(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, r) in self.rows.iter().enumerate() {
            if best.is_none_or(|b| r.rate.rate() > self.rows[b].rate.rate()) {
                best = Some(i);
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyRow {
    pub m: usize,
    pub amortized_ms: f64,
    pub measured_ms: f64,
}

/// Create a file whose first line is the config hash.
pub fn create_with_hash(path: &Path, hash: &str) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{HASH_PREFIX}{hash}")?;
    Ok(w)
}

/// Hash recorded on the first line of a harness CSV, if any.
pub fn read_hash_line(text: &str) -> Option<&str> {
    text.lines().next()?.strip_prefix(HASH_PREFIX).map(str::trim)
}

/// Command context: config, output directory and the `--force` flag.
#[derive(Debug, Clone)]
pub struct Harness {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub force: bool,
    /// Print progress to stderr.
    pub verbose: bool,
}

impl Harness {
    pub fn new(cfg: ExperimentConfig, out: impl Into<PathBuf>) -> Self {
        Self {
            cfg,
            out: out.into(),
            force: false,
            verbose: false,
        }
    }

    fn note(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn check_hash(&self, what: &Path, found: &str, expected: &str) -> Result<()> {
        if found == expected {
            return Ok(());
        }
        let msg = format!(
            "{} was written for config hash {found}, current config hashes to {expected}",
            what.display()
        );
        if self.force {
            self.note(format!("warning: {msg} (forced)"));
            Ok(())
        } else {
            Err(config_err(format!("{msg}; pass --force to override")))
        }
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.out.join(DATASET_FILE)
    }

    pub fn gen_data(&self) -> Result<PathBuf> {
        self.cfg.validate()?;
        let data = generate_dataset(&self.cfg)?;
        let ok = data.episodes.iter().filter(|e| e.success).count();
        self.note(format!("{} episodes, {ok} reached the goal", data.episodes.len()));
        fs::create_dir_all(&self.out)?;
        let path = self.dataset_path();
        let mut w = BufWriter::new(File::create(&path)?);
        data.write(&mut w)?;
        w.flush()?;
        Ok(path)
    }

    pub fn load_dataset(&self) -> Result<DatasetFile> {
        let path = self.dataset_path();
        let file = File::open(&path)
            .map_err(|e| config_err(format!("cannot open {}: {e}; run gen-data first", path.display())))?;
        let data = DatasetFile::read(BufReader::new(file))?;
        self.check_hash(&path, &data.config_hash, &self.cfg.data_hash())?;
        Ok(data)
    }

    fn metrics_path(&self, mode: RunMode) -> PathBuf {
        match mode {
            RunMode::Monolithic => self.out.join("metrics_monolithic.csv"),
            _ => self.out.join("metrics.csv"),
        }
    }

    /// Train in `mode` (hierarchical or monolithic), writing checkpoints and
    /// the metrics CSV.
    pub fn train(&self, mode: RunMode) -> Result<Vec<StepMetrics>> {
        self.cfg.validate()?;
        let data = self.load_dataset()?;
        self.train_on(&data, mode)
    }

    fn train_on(&self, data: &DatasetFile, mode: RunMode) -> Result<Vec<StepMetrics>> {
        let cfg = &self.cfg;
        let samples = build_samples(cfg, data)?;
        let hash = cfg.hash();
        let every = (cfg.train_steps / 10).max(1);
        let progress = |m: &StepMetrics| {
            if m.step % every == 0 {
                self.note(format!(
                    "step {} l_plan {:.4} l_diff {:.4} acc_ema {:.3} source {}",
                    m.step,
                    m.l_plan,
                    m.l_diff,
                    m.acc_ema,
                    m.source.map_or("none".into(), |s| s.to_string())
                ));
            }
        };
        fs::create_dir_all(&self.out)?;
        let log = match mode {
            RunMode::Hierarchical => {
                let mut t = joint_trainer(cfg)?;
                let log = t.run(&samples, cfg.train_steps, progress)?;
                t.planner.save(File::create(self.out.join("planner.ckpt"))?, &hash)?;
                t.refiner.save(File::create(self.out.join("refiner.ckpt"))?, &hash)?;
                if let Some(s) = t.state.switch_step {
                    self.note(format!("switched to predicted intents at step {s}"));
                }
                log
            }
            RunMode::Monolithic => {
                let mut t = monolithic_trainer(cfg, &samples)?;
                let log = t.run(&samples, cfg.train_steps, progress)?;
                t.refiner.save(File::create(self.out.join("monolithic.ckpt"))?, &hash)?;
                log
            }
            other => return Err(config_err(format!("cannot train in `{other}` mode"))),
        };
        let mut w = create_with_hash(&self.metrics_path(mode), &hash)?;
        write_metrics(&mut w, &log)?;
        w.flush()?;
        Ok(log)
    }

    fn load_planner(&self) -> Result<PlannerModel> {
        let path = self.out.join("planner.ckpt");
        self.check_ckpt(&path)?;
        let (mut p, _) = new_hierarchical(&self.cfg)?;
        p.load(BufReader::new(File::open(&path)?))?;
        Ok(p)
    }

    fn load_refiner(&self, name: &str, monolithic: bool) -> Result<RefinerModel> {
        let path = self.out.join(name);
        self.check_ckpt(&path)?;
        let mut r = if monolithic {
            new_monolithic(&self.cfg)?
        } else {
            new_hierarchical(&self.cfg)?.1
        };
        r.load(BufReader::new(File::open(&path)?))?;
        Ok(r)
    }

    fn check_ckpt(&self, path: &Path) -> Result<()> {
        let file = File::open(path)
            .map_err(|e| config_err(format!("cannot open {}: {e}; run train first", path.display())))?;
        let header = read_checkpoint_header(BufReader::new(file))?;
        self.check_hash(path, &header.config_hash, &self.cfg.hash())
    }

    /// Evaluate at the configured horizon factor and execution mode, writing
    /// a summary CSV and one trace per episode.
    pub fn eval(&self, mode: RunMode) -> Result<EvalSummary> {
        self.cfg.validate()?;
        let cfg = &self.cfg;
        let untrained;
        let (planner, refiner, mono);
        let policy = match mode {
            RunMode::Hierarchical => {
                planner = self.load_planner()?;
                refiner = self.load_refiner("refiner.ckpt", false)?;
                Policy::Hierarchical {
                    planner: &planner,
                    refiner: &refiner,
                    plan_mode: cfg.plan_sampling,
                }
            }
            RunMode::Untrained => {
                untrained = new_hierarchical(cfg)?;
                Policy::Hierarchical {
                    planner: &untrained.0,
                    refiner: &untrained.1,
                    plan_mode: cfg.plan_sampling,
                }
            }
            RunMode::Monolithic => {
                mono = self.load_refiner("monolithic.ckpt", true)?;
                Policy::Monolithic { refiner: &mono }
            }
            RunMode::Expert => Policy::Expert,
        };
        let hash = cfg.hash();
        let trace_dir = self.out.join(format!("traces_{mode}"));
        fs::create_dir_all(&trace_dir)?;
        let rate = evaluate_policy(cfg, policy, cfg.horizon_config(), cfg.exec_mode, |e, trace| {
            let mut w = create_with_hash(&trace_dir.join(format!("episode_{e:05}.csv")), &hash)?;
            write_trace(&mut w, trace)?;
            w.flush()?;
            Ok(())
        })?;
        let latency_ms = match (mode, cfg.exec_mode) {
            (RunMode::Hierarchical | RunMode::Untrained, ExecMode::Async) => amortized_latency(&cfg.clock(), cfg.m_factor)?,
            (RunMode::Hierarchical | RunMode::Untrained, ExecMode::Sync) => amortized_latency(&cfg.clock(), 1)?,
            _ => cfg.c_refine,
        };
        let (lo, hi) = rate.interval();
        let exec = match cfg.exec_mode {
            ExecMode::Sync => "sync",
            ExecMode::Async => "async",
        };
        let mut w = create_with_hash(&self.out.join(format!("eval_{mode}.csv")), &hash)?;
        writeln!(w, "{EVAL_HEADER}")?;
        writeln!(
            w,
            "{mode},{exec},{},{},{},{},{},{lo},{hi},{latency_ms}",
            cfg.m_factor,
            rate.episodes,
            rate.successes,
            rate.rate(),
            rate.half_width()
        )?;
        w.flush()?;
        Ok(EvalSummary { mode, rate, latency_ms })
    }

    fn shared_dataset(&self) -> Result<DatasetFile> {
        match File::open(self.dataset_path()) {
            Ok(f) => {
                let data = DatasetFile::read(BufReader::new(f))?;
                if data.config_hash == self.cfg.data_hash() {
                    return Ok(data);
                }
                self.note("dataset hash differs, regenerating");
            }
            Err(_) => self.note("no dataset found, generating"),
        }
        self.gen_data()?;
        self.load_dataset()
    }

    /// Train and evaluate one hierarchical model per bin count on a shared
    /// dataset and budget.
    pub fn sweep_bins(&self) -> Result<SweepResult> {
        self.cfg.validate()?;
        let data = self.shared_dataset()?;
        let mut rows = Vec::new();
        for &n in &self.cfg.sweep_bins {
            let sub = Harness {
                cfg: ExperimentConfig {
                    n_bins: n,
                    ..self.cfg.clone()
                },
                out: self.out.join(format!("bins_{n}")),
                ..self.clone()
            };
            sub.cfg.validate()?;
            self.note(format!("N = {n}"));
            sub.train_on(&data, RunMode::Hierarchical)?;
            let s = sub.eval(RunMode::Hierarchical)?;
            self.note(format!("N = {n}: success {:.3} ± {:.3}", s.rate.rate(), s.rate.half_width()));
            rows.push(SweepRow {
                value: n,
                rate: s.rate,
                latency_ms: s.latency_ms,
                measured_ms: s.latency_ms,
                seed: self.cfg.seed,
            });
        }
        let mut w = create_with_hash(&self.out.join("sweep_bins.csv"), &self.cfg.hash())?;
        writeln!(w, "{BINS_HEADER}")?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.value,
                r.rate.rate(),
                r.rate.half_width(),
                r.rate.episodes,
                r.latency_ms,
                r.seed
            )?;
        }
        w.flush()?;
        Ok(SweepResult { rows })
    }

    /// Train one model whose planner covers the largest horizon factor, then
    /// evaluate it asynchronously at every factor.
    pub fn sweep_horizon(&self) -> Result<SweepResult> {
        self.cfg.validate()?;
        let max_m = self.cfg.sweep_horizons.iter().copied().max().unwrap_or(1);
        let mut cfg = self.cfg.clone();
        cfg.plan_factor = cfg.trained_factor().max(max_m);
        cfg.validate()?;
        let sub = Harness {
            cfg,
            out: self.out.join("horizon"),
            ..self.clone()
        };
        let data = self.shared_dataset()?;
        sub.train_on(&data, RunMode::Hierarchical)?;
        let planner = sub.load_planner()?;
        let refiner = sub.load_refiner("refiner.ckpt", false)?;
        let policy = Policy::Hierarchical {
            planner: &planner,
            refiner: &refiner,
            plan_mode: sub.cfg.plan_sampling,
        };
        let mut rows = Vec::new();
        for &m in &self.cfg.sweep_horizons {
            let horizon = HorizonConfig::new(m, sub.cfg.h_chunk)?;
            let mut total = 0.0;
            let rate = evaluate_policy(&sub.cfg, policy, horizon, ExecMode::Async, |_, t| {
                total += measure_latency(t)?;
                Ok(())
            })?;
            let row = SweepRow {
                value: m,
                rate,
                latency_ms: amortized_latency(&sub.cfg.clock(), m)?,
                measured_ms: total / rate.episodes as f64,
                seed: self.cfg.seed,
            };
            self.note(format!(
                "M = {m}: success {:.3} ± {:.3}, latency {:.1} ms",
                rate.rate(),
                rate.half_width(),
                row.latency_ms
            ));
            rows.push(row);
        }
        let mut w = create_with_hash(&self.out.join("sweep_horizon.csv"), &sub.cfg.hash())?;
        writeln!(w, "{HORIZON_HEADER}")?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.value,
                r.rate.rate(),
                r.rate.half_width(),
                r.rate.episodes,
                r.latency_ms,
                r.measured_ms,
                r.seed
            )?;
        }
        w.flush()?;
        Ok(SweepResult { rows })
    }

    /// Closed-form amortized latency next to a simulated clock trace whose
    /// length is a multiple of every swept factor.
    pub fn latency_model(&self) -> Result<Vec<LatencyRow>> {
        self.cfg.validate()?;
        let clock = self.cfg.clock();
        let chunks = self.cfg.sweep_horizons.iter().fold(1, |acc, &m| lcm(acc, m)) * 12;
        let rows = self
            .cfg
            .sweep_horizons
            .iter()
            .map(|&m| {
                Ok(LatencyRow {
                    m,
                    amortized_ms: amortized_latency(&clock, m)?,
                    measured_ms: measure_latency(&clock_trace(&clock, m, chunks)?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut w = create_with_hash(&self.out.join("latency.csv"), &self.cfg.hash())?;
        writeln!(w, "{LATENCY_HEADER}")?;
        for r in &rows {
            writeln!(w, "{},{},{}", r.m, r.amortized_ms, r.measured_ms)?;
        }
        w.flush()?;
        Ok(rows)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}
