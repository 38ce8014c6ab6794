//! Coarse-intent planner: a shared encoder turns each target (with the agent
//! position and the task flag) into one context token, `K = L_macro * D`
//! learnable query tokens are placed before them, one
//! bidirectional attention pass runs over the concatenation, and the first
//! `K` outputs go through a position-wise feed-forward layer and a shared
//! linear head to `N` bin logits each.

use std::io::{Read, Write};

use ndarray::{s, Array2, Array3, Axis};

use crate::action::{CoarseChunk, CoarseToken};
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{
    softmax, softmax_ce, Activation, AttentionBlock, AttentionCache, CheckpointHeader, Linear, Mlp,
    MlpCache, ParamId, ParamStore,
};
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    pub n_bins: usize,
    pub l_macro: usize,
    pub dims: usize,
    pub num_targets: usize,
    pub obs_dim: usize,
    /// Token width `d`.
    pub width: usize,
    /// Hidden layers in the observation encoder.
    pub depth: usize,
    pub encoder_hidden: usize,
    pub ffn_hidden: usize,
    pub activation: Activation,
}

impl PlannerConfig {
    pub fn new(n_bins: usize, l_macro: usize, dims: usize, num_targets: usize) -> Self {
        Self {
            n_bins,
            l_macro,
            dims,
            num_targets,
            obs_dim: dims * (1 + num_targets) + num_targets,
            width: 32,
            depth: 2,
            encoder_hidden: 128,
            ffn_hidden: 64,
            activation: Activation::Gelu,
        }
    }

    /// Number of query tokens.
    pub fn queries(&self) -> usize {
        self.l_macro * self.dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins < 2 || self.l_macro == 0 || self.dims == 0 || self.num_targets == 0 {
            return Err(config_err("planner needs n_bins >= 2 and positive l_macro, dims, num_targets"));
        }
        if self.obs_dim != self.dims * (1 + self.num_targets) + self.num_targets {
            return Err(config_err("planner obs_dim must be D * (1 + G) + G"));
        }
        if self.width == 0 || self.depth == 0 {
            return Err(config_err("planner width and depth must be positive"));
        }
        Ok(())
    }
}

/// Bin logits for every (timestep, dimension) position of a macro chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanLogits {
    rows: usize,
    dims: usize,
    n_bins: usize,
    data: Vec<f64>,
}

impl PlanLogits {
    pub fn new(rows: usize, dims: usize, n_bins: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dims * n_bins {
            return Err(shape_err(format!(
                "logits expect {rows}x{dims}x{n_bins}, got {} values",
                data.len()
            )));
        }
        Ok(Self { rows, dims, n_bins, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.rows, self.dims, self.n_bins)
    }

    /// Logits of position `(t, i)`.
    pub fn at(&self, t: usize, i: usize) -> &[f64] {
        let k = t * self.dims + i;
        &self.data[k * self.n_bins..(k + 1) * self.n_bins]
    }

    pub fn positions(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n_bins)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Mean cross-entropy over all positions and its gradient w.r.t. the logits.
pub fn plan_loss(logits: &PlanLogits, gt: &CoarseChunk) -> Result<(f64, PlanLogits)> {
    if gt.rows() != logits.rows || gt.dims() != logits.dims {
        return Err(shape_err(format!(
            "ground truth {}x{} vs logits {}x{}",
            gt.rows(),
            gt.dims(),
            logits.rows,
            logits.dims
        )));
    }
    let positions = (logits.rows * logits.dims) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.data.len());
    for (row, tok) in logits.positions().zip(gt.tokens()) {
        let (l, g) = softmax_ce(row, tok.index())?;
        loss += l;
        grad.extend(g.into_iter().map(|v| v / positions));
    }
    Ok((
        loss / positions,
        PlanLogits {
            data: grad,
            ..logits.clone()
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleMode {
    /// Highest logit, lowest index on ties.
    #[default]
    Argmax,
    Categorical,
}

impl std::str::FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(SampleMode::Argmax),
            "categorical" => Ok(SampleMode::Categorical),
            other => Err(config_err(format!("unknown sample mode `{other}`"))),
        }
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn sample_row(row: &[f64], mode: SampleMode, rng: &mut RngState) -> usize {
    match mode {
        SampleMode::Argmax => argmax(row),
        SampleMode::Categorical => {
            let probs = softmax(row);
            let u = rng.uniform();
            let mut acc = 0.0;
            for (j, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return j;
                }
            }
            // rounding left u above the total mass
            probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
        }
    }
}

/// Select one bin per position of the first `rows` timesteps.
pub fn sample_coarse(logits: &PlanLogits, rows: usize, mode: SampleMode, rng: &mut RngState) -> Result<CoarseChunk> {
    if rows > logits.rows {
        return Err(config_err(format!(
            "requested {rows} rows from a {}-row plan",
            logits.rows
        )));
    }
    let tokens = logits
        .positions()
        .take(rows * logits.dims)
        .map(|row| CoarseToken(sample_row(row, mode, rng) as u32))
        .collect();
    CoarseChunk::new(rows, logits.dims, tokens)
}

/// Fraction of positions whose argmax equals the ground truth.
pub fn plan_accuracy(logits: &PlanLogits, gt: &CoarseChunk) -> f64 {
    let hits = logits
        .positions()
        .zip(gt.tokens())
        .filter(|(row, tok)| argmax(row) == tok.index())
        .count();
    hits as f64 / (logits.rows * logits.dims) as f64
}

#[derive(Debug, Clone)]
pub struct PlannerModel {
    pub cfg: PlannerConfig,
    pub params: ParamStore,
    encoder: Mlp,
    queries: ParamId,
    attn: AttentionBlock,
    ffn: Mlp,
    head: Linear,
}

pub struct PlannerCache {
    enc: MlpCache,
    attn: AttentionCache,
    ffn: MlpCache,
    f: Array2<f64>,
}

impl PlannerModel {
    pub fn new(cfg: PlannerConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let d = cfg.width;
        let mut widths = vec![3 * cfg.dims + 1];
        widths.extend(std::iter::repeat(cfg.encoder_hidden).take(cfg.depth));
        widths.push(d);
        let encoder = Mlp::new(&mut ps, "encoder", &widths, cfg.activation, rng);
        let queries = ps.add(
            "queries",
            Array2::from_shape_fn((cfg.queries(), d), |_| 0.5 * rng.normal()),
        );
        let attn = AttentionBlock::new(&mut ps, "attn", d, rng);
        let ffn = Mlp::new(&mut ps, "ffn", &[d, cfg.ffn_hidden, d], cfg.activation, rng);
        let head = Linear::new(&mut ps, "head", d, cfg.n_bins, rng);
        Ok(Self {
            cfg,
            params: ps,
            encoder,
            queries,
            attn,
            ffn,
            head,
        })
    }

    /// Attention invocations so far; one per forward call.
    pub fn attention_calls(&self) -> usize {
        self.attn.calls()
    }

    /// Rows `[agent, target_g, target_g - agent, flag_g]` for every target,
    /// batch-major.
    fn target_features(&self, obs: &Array2<f64>) -> Array2<f64> {
        let (dm, g) = (self.cfg.dims, self.cfg.num_targets);
        let mut out = Array2::zeros((obs.nrows() * g, 3 * dm + 1));
        for (i, row) in obs.outer_iter().enumerate() {
            let agent = row.slice(s![..dm]);
            for t in 0..g {
                let target = row.slice(s![dm * (1 + t)..dm * (2 + t)]);
                let mut f = out.row_mut(i * g + t);
                f.slice_mut(s![..dm]).assign(&agent);
                f.slice_mut(s![dm..2 * dm]).assign(&target);
                f.slice_mut(s![2 * dm..3 * dm]).assign(&(&target - &agent));
                f[3 * dm] = row[dm * (1 + g) + t];
            }
        }
        out
    }

    /// Batched forward: `obs` is `(B, obs_dim)`, logits are `(B, K, N)`.
    pub fn forward(&self, obs: &Array2<f64>) -> Result<(Array3<f64>, PlannerCache)> {
        let cfg = &self.cfg;
        if obs.ncols() != cfg.obs_dim {
            return Err(config_err(format!(
                "planner expects {}-dim observations, got {}",
                cfg.obs_dim,
                obs.ncols()
            )));
        }
        let (b, k, c, d) = (obs.nrows(), cfg.queries(), cfg.num_targets, cfg.width);
        let ps = &self.params;
        let (ctx, enc) = self.encoder.forward(ps, &self.target_features(obs))?;
        let ctx = ctx
            .into_shape_with_order((b, c, d))
            .map_err(|e| shape_err(e.to_string()))?;
        let mut x = Array3::zeros((b, k + c, d));
        let q = ps.value(self.queries);
        for i in 0..b {
            x.slice_mut(s![i, ..k, ..]).assign(q);
            x.slice_mut(s![i, k.., ..]).assign(&ctx.index_axis(Axis(0), i));
        }
        let (y, attn) = self.attn.forward(ps, &x)?;
        let z = y
            .slice(s![.., ..k, ..])
            .to_owned()
            .into_shape_with_order((b * k, d))
            .map_err(|e| shape_err(e.to_string()))?;
        let (h, ffn) = self.ffn.forward(ps, &z)?;
        let f = &z + &h;
        let logits = self
            .head
            .forward(ps, &f)?
            .into_shape_with_order((b, k, cfg.n_bins))
            .map_err(|e| shape_err(e.to_string()))?;
        Ok((logits, PlannerCache { enc, attn, ffn, f }))
    }

    /// Accumulate gradients for `dlogits` of shape `(B, K, N)`.
    pub fn backward(&mut self, cache: &PlannerCache, dlogits: &Array3<f64>) {
        let cfg = &self.cfg;
        let (b, k, c, d) = (dlogits.dim().0, cfg.queries(), cfg.num_targets, cfg.width);
        let ps = &mut self.params;
        let dl = dlogits
            .to_shape((b * k, cfg.n_bins))
            .expect("logit grad shape")
            .to_owned();
        let df = self.head.backward(ps, &cache.f, &dl);
        let dz = &df + &self.ffn.backward(ps, &cache.ffn, &df);
        let mut dy = Array3::zeros((b, k + c, d));
        dy.slice_mut(s![.., ..k, ..])
            .assign(&dz.into_shape_with_order((b, k, d)).expect("query grad shape"));
        let dx = self.attn.backward(ps, &cache.attn, &dy);
        *ps.grad_mut(self.queries) += &dx.slice(s![.., ..k, ..]).sum_axis(Axis(0));
        let dctx = dx
            .slice(s![.., k.., ..])
            .to_owned()
            .into_shape_with_order((b * c, d))
            .expect("context grad shape");
        self.encoder.backward(ps, &cache.enc, &dctx);
    }

    /// Single-observation forward pass producing the full logit grid.
    pub fn plan_forward(&self, obs: &[f64]) -> Result<PlanLogits> {
        let x = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).map_err(|e| shape_err(e.to_string()))?;
        let (logits, _) = self.forward(&x)?;
        PlanLogits::new(
            self.cfg.l_macro,
            self.cfg.dims,
            self.cfg.n_bins,
            logits.into_raw_vec_and_offset().0,
        )
    }

    pub fn save<W: Write>(&self, w: W, config_hash: &str) -> Result<()> {
        let c = &self.cfg;
        let meta = [
            ("n_bins", c.n_bins),
            ("l_macro", c.l_macro),
            ("dims", c.dims),
            ("num_targets", c.num_targets),
            ("width", c.width),
            ("depth", c.depth),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        self.params.save(
            w,
            &CheckpointHeader {
                kind: "planner".into(),
                config_hash: config_hash.into(),
                meta,
            },
        )
    }

    pub fn load<R: Read>(&mut self, r: R) -> Result<CheckpointHeader> {
        let h = self.params.load(r)?;
        if h.kind != "planner" {
            return Err(config_err(format!("expected planner checkpoint, got `{}`", h.kind)));
        }
        Ok(h)
    }
}

/// Batched mean cross-entropy, argmax accuracy and logit gradient.
pub fn batch_plan_loss(logits: &Array3<f64>, gt: &[Vec<CoarseToken>]) -> Result<(f64, f64, Array3<f64>)> {
    let (b, k, n) = logits.dim();
    if gt.len() != b || gt.iter().any(|g| g.len() != k) {
        return Err(shape_err("ground-truth tokens do not match the logit batch"));
    }
    let total = (b * k) as f64;
    let mut grad = Array3::zeros((b, k, n));
    let mut loss = 0.0;
    let mut hits = 0usize;
    for i in 0..b {
        for j in 0..k {
            let row = logits.slice(s![i, j, ..]);
            let row = row.as_slice().expect("contiguous logits");
            let target = gt[i][j].index();
            let (l, g) = softmax_ce(row, target)?;
            loss += l;
            if argmax(row) == target {
                hits += 1;
            }
            for (dst, v) in grad.slice_mut(s![i, j, ..]).iter_mut().zip(g) {
                *dst = v / total;
            }
        }
    }
    Ok((loss / total, hits as f64 / total, grad))
}
