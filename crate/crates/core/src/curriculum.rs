//! Joint planner/refiner training with a ground-truth to predicted intent
//! curriculum, plus the observation-only baseline trainer.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::{s, Array2, Array3};

use crate::action::CoarseToken;
use crate::env::dataset::SampleSet;
use crate::error::{config_err, Error, Result};
use crate::nn::{Adam, AdamConfig, LrSchedule};
use crate::planner::{batch_plan_loss, sample_coarse, PlanLogits, PlannerModel, SampleMode};
use crate::refiner::RefinerModel;
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntentSource {
    GroundTruth,
    Predicted,
}

impl fmt::Display for IntentSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IntentSource::GroundTruth => "gt",
            IntentSource::Predicted => "pred",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strategy {
    /// Always condition on ground-truth tokens.
    PureTf,
    /// Always condition on planner samples.
    NoTf,
    /// Ground truth until planner accuracy crosses the threshold.
    #[default]
    Dynamic,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pure_tf" => Ok(Strategy::PureTf),
            "no_tf" => Ok(Strategy::NoTf),
            "dynamic" => Ok(Strategy::Dynamic),
            other => Err(config_err(format!("unknown training strategy `{other}`"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::PureTf => "pure_tf",
            Strategy::NoTf => "no_tf",
            Strategy::Dynamic => "dynamic",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumState {
    pub accuracy_ema: f64,
    pub ema_decay: f64,
    pub switched: bool,
    pub switch_step: Option<usize>,
    /// Allow falling back to ground truth when the average drops again.
    pub reversible: bool,
}

impl CurriculumState {
    pub fn new(ema_decay: f64) -> Self {
        Self {
            accuracy_ema: 0.0,
            ema_decay,
            switched: false,
            switch_step: None,
            reversible: false,
        }
    }

    pub fn observe_accuracy(&mut self, acc: f64) {
        self.accuracy_ema = self.ema_decay * self.accuracy_ema + (1.0 - self.ema_decay) * acc;
    }
}

/// Ground truth until the accuracy average reaches `tau`, predicted after.
/// The first crossing records `step` and latches unless the state is
/// reversible.
pub fn select_intent_source(state: &mut CurriculumState, tau: f64, step: usize) -> Result<IntentSource> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(config_err(format!("tau must lie in (0, 1), got {tau}")));
    }
    let above = state.accuracy_ema >= tau;
    if above && !state.switched {
        state.switched = true;
        state.switch_step.get_or_insert(step);
    } else if !above && state.switched && state.reversible {
        state.switched = false;
    }
    Ok(if state.switched {
        IntentSource::Predicted
    } else {
        IntentSource::GroundTruth
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_diff: f64,
    pub lambda_plan: f64,
}

impl LossWeights {
    pub fn new(lambda_diff: f64, lambda_plan: f64) -> Result<Self> {
        if !(lambda_diff > 0.0 && lambda_plan > 0.0) {
            return Err(config_err("loss weights must be positive"));
        }
        Ok(Self {
            lambda_diff,
            lambda_plan,
        })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_diff: 1.0,
            lambda_plan: 0.5,
        }
    }
}

pub fn total_loss(l_diff: f64, l_plan: f64, w: LossWeights) -> f64 {
    w.lambda_diff * l_diff + w.lambda_plan * l_plan
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_planner: f64,
    pub lr_refiner: f64,
    pub warmup_steps: usize,
    pub tau: f64,
    pub ema_decay: f64,
    pub weights: LossWeights,
    pub strategy: Strategy,
    pub reversible: bool,
    /// How predicted intents are drawn during training.
    pub intent_sampling: SampleMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 64,
            lr_planner: 3e-3,
            lr_refiner: 1e-3,
            warmup_steps: 100,
            tau: 0.9,
            ema_decay: 0.99,
            weights: LossWeights::default(),
            strategy: Strategy::Dynamic,
            reversible: false,
            intent_sampling: SampleMode::Categorical,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(config_err("steps and batch_size must be positive"));
        }
        if !(self.lr_planner > 0.0 && self.lr_refiner > 0.0) {
            return Err(config_err("learning rates must be positive"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(config_err("tau must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(config_err("ema_decay must lie in [0, 1)"));
        }
        LossWeights::new(self.weights.lambda_diff, self.weights.lambda_plan)?;
        Ok(())
    }

    fn schedule(&self, peak: f64) -> LrSchedule {
        LrSchedule {
            warmup_steps: self.warmup_steps,
            min_ratio: 0.1,
            ..LrSchedule::new(peak, self.steps)
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub l_plan: f64,
    pub l_diff: f64,
    pub l_total: f64,
    pub acc_ema: f64,
    /// `None` for the baseline, which has no intent pathway.
    pub source: Option<IntentSource>,
}

pub const METRICS_HEADER: &str = "step,l_plan,l_diff,l_total,acc_ema,source";

pub fn write_metrics<W: Write>(mut w: W, rows: &[StepMetrics]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for m in rows {
        let source = m.source.map_or_else(|| "none".to_string(), |s| s.to_string());
        writeln!(
            w,
            "{},{},{},{},{},{}",
            m.step, m.l_plan, m.l_diff, m.l_total, m.acc_ema, source
        )?;
    }
    Ok(())
}

/// Parse a metrics log written by [`write_metrics`].
pub fn read_metrics(text: &str) -> Result<Vec<StepMetrics>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        _ => return Err(Error::Parse("metrics log lacks the expected header".into())),
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Parse(format!("bad metrics row `{line}`")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("{s}: {e}")));
            Ok(StepMetrics {
                step: f[0].parse().map_err(|e| Error::Parse(format!("{}: {e}", f[0])))?,
                l_plan: num(f[1])?,
                l_diff: num(f[2])?,
                l_total: num(f[3])?,
                acc_ema: num(f[4])?,
                source: match f[5] {
                    "gt" => Some(IntentSource::GroundTruth),
                    "pred" => Some(IntentSource::Predicted),
                    "none" => None,
                    other => return Err(Error::Parse(format!("unknown source `{other}`"))),
                },
            })
        })
        .collect()
}

/// Number of changes in the `source` column.
pub fn source_boundaries(rows: &[StepMetrics]) -> usize {
    rows.windows(2).filter(|w| w[0].source != w[1].source).count()
}

fn draw_batch(rng: &mut RngState, len: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.below(len)).collect()
}

fn gather(rows: &Array2<f64>, idx: &[usize], cols: usize) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), cols));
    for (o, &i) in idx.iter().enumerate() {
        out.row_mut(o).assign(&rows.slice(s![i, ..cols]));
    }
    out
}

/// Planner and refiner trained jointly.
pub struct JointTrainer {
    pub planner: PlannerModel,
    pub refiner: RefinerModel,
    pub cfg: TrainConfig,
    pub state: CurriculumState,
    pub step: usize,
    opt_plan: Adam,
    opt_ref: Adam,
    rng: RngState,
}

impl JointTrainer {
    pub fn new(planner: PlannerModel, refiner: RefinerModel, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if planner.cfg.n_bins != refiner.cfg.n_bins || planner.cfg.dims != refiner.cfg.dims {
            return Err(config_err("planner and refiner disagree on bins or dims"));
        }
        if planner.cfg.l_macro < refiner.cfg.h_chunk || !refiner.cfg.conditioned {
            return Err(config_err("refiner must be conditioned and h_chunk <= l_macro"));
        }
        let mut state = CurriculumState::new(cfg.ema_decay);
        state.reversible = cfg.reversible;
        Ok(Self {
            opt_plan: Adam::new(&planner.params, AdamConfig::default()),
            opt_ref: Adam::new(&refiner.params, AdamConfig::default()),
            planner,
            refiner,
            cfg,
            state,
            step: 0,
            rng: RngState::new(seed),
        })
    }

    fn source(&mut self) -> Result<IntentSource> {
        match self.cfg.strategy {
            Strategy::PureTf => Ok(IntentSource::GroundTruth),
            Strategy::NoTf => Ok(IntentSource::Predicted),
            Strategy::Dynamic => select_intent_source(&mut self.state, self.cfg.tau, self.step),
        }
    }

    fn predicted_intents(&mut self, logits: &Array3<f64>) -> Result<Vec<Vec<CoarseToken>>> {
        let (b, k, n) = logits.dim();
        let (dims, h) = (self.planner.cfg.dims, self.refiner.cfg.h_chunk);
        (0..b)
            .map(|i| {
                let data = logits.slice(s![i, .., ..]).iter().copied().collect();
                let pl = PlanLogits::new(k / dims, dims, n, data)?;
                Ok(sample_coarse(&pl, h, self.cfg.intent_sampling, &mut self.rng)?
                    .tokens()
                    .to_vec())
            })
            .collect()
    }

    /// One optimizer step on a random minibatch.
    pub fn train_step(&mut self, data: &SampleSet) -> Result<StepMetrics> {
        let pc = &self.planner.cfg;
        let (n_bins, l_macro, chunk) = (pc.n_bins, pc.l_macro, self.refiner.cfg.chunk_len());
        if data.horizon < l_macro || data.planner_obs.ncols() != pc.obs_dim {
            return Err(config_err("dataset does not cover the planner horizon or observation"));
        }
        let idx = draw_batch(&mut self.rng, data.len(), self.cfg.batch_size);
        let p_obs = gather(&data.planner_obs, &idx, data.planner_obs.ncols());
        let r_obs = gather(&data.refiner_obs, &idx, data.refiner_obs.ncols());
        let a0 = gather(&data.actions, &idx, chunk);
        let gt: Vec<Vec<CoarseToken>> = idx.iter().map(|&i| data.tokens(i, l_macro, n_bins)).collect();

        self.planner.params.zero_grads();
        self.refiner.params.zero_grads();

        let (logits, cache) = self.planner.forward(&p_obs)?;
        let (l_plan, acc, dlogits) = batch_plan_loss(&logits, &gt)?;
        if !l_plan.is_finite() {
            return Err(Error::Training(format!("non-finite planner loss at step {}", self.step)));
        }
        self.state.observe_accuracy(acc);
        let source = self.source()?;
        let intents = match source {
            IntentSource::GroundTruth => gt.iter().map(|g| g[..chunk].to_vec()).collect(),
            IntentSource::Predicted => self.predicted_intents(&logits)?,
        };
        self.planner.backward(&cache, &dlogits);
        let target = self.refiner.fine_targets(&a0, &intents)?;
        let l_diff = self
            .refiner
            .diffusion_loss(&target, &r_obs, Some(&intents), &mut self.rng)
            .map_err(|e| Error::Training(format!("step {}: {e}", self.step)))?;

        let w = self.cfg.weights;
        self.planner.params.scale_grads(w.lambda_plan);
        self.refiner.params.scale_grads(w.lambda_diff);
        self.opt_plan
            .step(&mut self.planner.params, self.cfg.schedule(self.cfg.lr_planner).lr_at(self.step))?;
        self.opt_ref
            .step(&mut self.refiner.params, self.cfg.schedule(self.cfg.lr_refiner).lr_at(self.step))?;

        let m = StepMetrics {
            step: self.step,
            l_plan,
            l_diff,
            l_total: total_loss(l_diff, l_plan, w),
            acc_ema: self.state.accuracy_ema,
            source: Some(source),
        };
        self.step += 1;
        Ok(m)
    }

    /// Run `steps` updates, reporting each row to `on_step`.
    pub fn run(&mut self, data: &SampleSet, steps: usize, mut on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        let mut log = Vec::with_capacity(steps);
        for _ in 0..steps {
            let m = self.train_step(data)?;
            on_step(&m);
            log.push(m);
        }
        Ok(log)
    }
}

/// Concatenate both observation channels row-wise.
pub fn joint_observation(data: &SampleSet) -> Array2<f64> {
    ndarray::concatenate(ndarray::Axis(1), &[data.planner_obs.view(), data.refiner_obs.view()])
        .expect("observation channels share row count")
}

/// Observation-only refiner regressing the full action chunk.
pub struct MonolithicTrainer {
    pub refiner: RefinerModel,
    pub cfg: TrainConfig,
    pub step: usize,
    obs: Array2<f64>,
    opt: Adam,
    rng: RngState,
}

impl MonolithicTrainer {
    pub fn new(refiner: RefinerModel, cfg: TrainConfig, data: &SampleSet, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if refiner.cfg.conditioned {
            return Err(config_err("the baseline refiner takes no intent input"));
        }
        let obs = joint_observation(data);
        if obs.ncols() != refiner.cfg.obs_dim() {
            return Err(config_err(format!(
                "baseline expects {}-dim observations, dataset gives {}",
                refiner.cfg.obs_dim(),
                obs.ncols()
            )));
        }
        Ok(Self {
            opt: Adam::new(&refiner.params, AdamConfig::default()),
            refiner,
            cfg,
            step: 0,
            obs,
            rng: RngState::new(seed),
        })
    }

    pub fn train_step(&mut self, data: &SampleSet) -> Result<StepMetrics> {
        let chunk = self.refiner.cfg.chunk_len();
        let idx = draw_batch(&mut self.rng, data.len(), self.cfg.batch_size);
        let obs = gather(&self.obs, &idx, self.obs.ncols());
        let a0 = gather(&data.actions, &idx, chunk);
        self.refiner.params.zero_grads();
        let l_diff = self
            .refiner
            .diffusion_loss(&a0, &obs, None, &mut self.rng)
            .map_err(|e| Error::Training(format!("step {}: {e}", self.step)))?;
        self.refiner.params.scale_grads(self.cfg.weights.lambda_diff);
        self.opt
            .step(&mut self.refiner.params, self.cfg.schedule(self.cfg.lr_refiner).lr_at(self.step))?;
        let m = StepMetrics {
            step: self.step,
            l_plan: 0.0,
            l_diff,
            l_total: self.cfg.weights.lambda_diff * l_diff,
            acc_ema: 0.0,
            source: None,
        };
        self.step += 1;
        Ok(m)
    }

    pub fn run(&mut self, data: &SampleSet, steps: usize, mut on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        let mut log = Vec::with_capacity(steps);
        for _ in 0..steps {
            let m = self.train_step(data)?;
            on_step(&m);
            log.push(m);
        }
        Ok(log)
    }
}

/// Locate the refiner-loss transient around the curriculum switch: the
/// mean `l_diff` over `pre_window` steps before the switch, the peak of a
/// trailing `window`-step mean within `rise_within` steps after it, and the
/// first step (relative to the switch) at which the trailing mean falls
/// back below the pre-switch level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchTransient {
    pub switch_step: usize,
    pub pre_mean: f64,
    pub peak_mean: f64,
    pub recovery_after: Option<usize>,
}

pub fn switch_transient(rows: &[StepMetrics], pre_window: usize, window: usize, rise_within: usize) -> Option<SwitchTransient> {
    let at = rows
        .windows(2)
        .position(|w| w[0].source == Some(IntentSource::GroundTruth) && w[1].source == Some(IntentSource::Predicted))?
        + 1;
    if at < pre_window || window == 0 {
        return None;
    }
    let mean = |r: &[StepMetrics]| r.iter().map(|m| m.l_diff).sum::<f64>() / r.len() as f64;
    let pre_mean = mean(&rows[at - pre_window..at]);
    let trailing = |end: usize| mean(&rows[end + 1 - window..=end]);
    let first = at + window - 1;
    let peak_end = (at + rise_within).min(rows.len() - 1);
    let peak_mean = (first..=peak_end).map(trailing).fold(f64::NEG_INFINITY, f64::max);
    let peak_at = (first..=peak_end).find(|&e| trailing(e) == peak_mean)?;
    let recovery_after = (peak_at..rows.len()).find(|&e| trailing(e) < pre_mean).map(|e| e - at);
    Some(SwitchTransient {
        switch_step: rows[at].step,
        pre_mean,
        peak_mean,
        recovery_after,
    })
}
