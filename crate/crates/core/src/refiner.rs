//! Conditional denoising-diffusion refiner.
//!
//! The noise predictor is an MLP over `[x_k, time(k), F_geo, e_intent]`,
//! where `F_geo` comes from a separate encoder over the full-precision
//! geometry and `e_intent` is the concatenated codebook rows of the coarse
//! slice. With `conditioned = false` the intent input is dropped and a
//! context block of the observation drives the encoder's query instead;
//! that variant serves as the monolithic baseline.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{s, Array2, Array3, Axis};

use crate::action::{compose, residual_target, ActionVector, CoarseToken, ComposeMode, QuantizerConfig};
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{mse_matrix, Activation, AttentionBlock, AttentionCache, CheckpointHeader, Mlp, MlpCache, ParamId, ParamStore};
use crate::rng::RngState;

/// Noise levels of the forward process.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(config_err("diffusion needs at least one step"));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|k| beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(config_err("every beta must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k >= self.steps() {
            return Err(Error::OutOfRange(format!(
                "diffusion step {k} outside [0, {})",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `x_k = sqrt(abar_k) a0 + sqrt(1 - abar_k) eps`.
pub fn forward_noise(a0: &[f64], k: usize, eps: &[f64], sched: &DiffusionSchedule) -> Result<Vec<f64>> {
    sched.check_step(k)?;
    if a0.len() != eps.len() {
        return Err(shape_err(format!("a0 has {} values, eps {}", a0.len(), eps.len())));
    }
    let ab = sched.alpha_bar(k);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(a0.iter().zip(eps).map(|(a, e)| sa * a + sn * e).collect())
}

/// Fixed sinusoidal embedding of the diffusion step.
pub fn time_embedding(k: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let freq = (-(1000f64.ln()) * j as f64 / half.max(1) as f64).exp();
        out.push((k as f64 * freq).sin());
    }
    for j in 0..half {
        let freq = (-(1000f64.ln()) * j as f64 / half.max(1) as f64).exp();
        out.push((k as f64 * freq).cos());
    }
    out.resize(dim, 0.0);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinerConfig {
    pub h_chunk: usize,
    pub dims: usize,
    pub n_bins: usize,
    pub num_targets: usize,
    /// Extra observation features placed before the geometry block; they
    /// feed the query token. Zero for the intent-conditioned refiner.
    pub context_dim: usize,
    pub d_emb: usize,
    /// Hidden width of the noise predictor.
    pub width: usize,
    /// Hidden layers of the noise predictor.
    pub depth: usize,
    pub geo_dim: usize,
    pub geo_hidden: usize,
    pub time_dim: usize,
    pub k_diff: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Whether the coarse intent pathway exists.
    pub conditioned: bool,
    /// How generated values combine with the intent at execution.
    pub compose: ComposeMode,
    pub activation: Activation,
}

impl RefinerConfig {
    pub fn new(h_chunk: usize, dims: usize, n_bins: usize, num_targets: usize) -> Self {
        Self {
            h_chunk,
            dims,
            n_bins,
            num_targets,
            context_dim: 0,
            d_emb: 8,
            width: 128,
            depth: 2,
            geo_dim: 32,
            geo_hidden: 64,
            time_dim: 16,
            k_diff: 50,
            beta_start: 1e-4,
            beta_end: 0.2,
            conditioned: true,
            compose: ComposeMode::Direct,
            activation: Activation::Gelu,
        }
    }

    /// Flattened chunk length `H_chunk * D`.
    pub fn chunk_len(&self) -> usize {
        self.h_chunk * self.dims
    }

    pub fn intent_len(&self) -> usize {
        if self.conditioned {
            self.chunk_len() * self.d_emb
        } else {
            0
        }
    }

    /// Agent position followed by all target positions.
    pub fn geometry_dim(&self) -> usize {
        self.dims * (1 + self.num_targets)
    }

    pub fn obs_dim(&self) -> usize {
        self.context_dim + self.geometry_dim()
    }

    fn query_in(&self) -> usize {
        self.intent_len() + self.context_dim
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.k_diff, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h_chunk == 0 || self.dims == 0 || self.num_targets == 0 || self.k_diff == 0 {
            return Err(config_err("refiner needs positive h_chunk, dims, num_targets, k_diff"));
        }
        if self.conditioned && (self.n_bins < 2 || self.d_emb == 0) {
            return Err(config_err("conditioned refiner needs n_bins >= 2 and d_emb >= 1"));
        }
        if !self.conditioned && self.compose == ComposeMode::Residual {
            return Err(config_err("residual composition needs the intent pathway"));
        }
        if self.query_in() == 0 {
            return Err(config_err("refiner needs an intent or a context input"));
        }
        if self.width == 0 || self.depth == 0 || self.geo_dim == 0 || self.geo_hidden == 0 {
            return Err(config_err("refiner widths must be positive"));
        }
        Ok(())
    }
}

/// Noise predictor with a target-attention geometry encoder: every target
/// becomes a token built from its offset to the agent, a query token built
/// from the intent (or context) attends over them, and the query's output
/// is `F_geo`.
#[derive(Debug)]
pub struct RefinerModel {
    pub cfg: RefinerConfig,
    pub params: ParamStore,
    schedule: DiffusionSchedule,
    codebook: Option<ParamId>,
    target_enc: Mlp,
    query_enc: Mlp,
    geo_attn: AttentionBlock,
    eps_net: Mlp,
    eps_calls: AtomicUsize,
}

impl Clone for RefinerModel {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            schedule: self.schedule.clone(),
            codebook: self.codebook,
            target_enc: self.target_enc.clone(),
            query_enc: self.query_enc.clone(),
            geo_attn: self.geo_attn.clone(),
            eps_net: self.eps_net.clone(),
            eps_calls: AtomicUsize::new(self.eps_calls()),
        }
    }
}

struct CondCache {
    targets: MlpCache,
    query: MlpCache,
    attn: AttentionCache,
}

pub struct RefinerCache {
    cond: CondCache,
    net: MlpCache,
    tokens: Option<Vec<Vec<CoarseToken>>>,
}

/// Frozen diffusion-step and noise draws for one batch.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub steps: Vec<usize>,
    pub eps: Array2<f64>,
}

impl NoiseDraw {
    pub fn sample(batch: usize, chunk_len: usize, k_diff: usize, rng: &mut RngState) -> Self {
        let steps = (0..batch).map(|_| rng.below(k_diff)).collect();
        let eps = Array2::from_shape_fn((batch, chunk_len), |_| rng.normal());
        Self { steps, eps }
    }
}

impl RefinerModel {
    pub fn new(cfg: RefinerConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.schedule()?;
        let mut ps = ParamStore::new();
        let codebook = cfg.conditioned.then(|| {
            ps.add(
                "codebook",
                Array2::from_shape_fn((cfg.n_bins, cfg.d_emb), |_| rng.normal()),
            )
        });
        let act = cfg.activation;
        let target_enc = Mlp::new(
            &mut ps,
            "geo.target",
            &[2 * cfg.dims + 1, cfg.geo_hidden, cfg.geo_dim],
            act,
            rng,
        );
        let query_enc = Mlp::new(
            &mut ps,
            "geo.query",
            &[cfg.query_in(), cfg.geo_hidden, cfg.geo_dim],
            act,
            rng,
        );
        let geo_attn = AttentionBlock::new(&mut ps, "geo.attn", cfg.geo_dim, rng);
        let input = cfg.chunk_len() + cfg.time_dim + cfg.geo_dim + cfg.intent_len();
        let mut widths = vec![input];
        widths.extend(std::iter::repeat(cfg.width).take(cfg.depth));
        widths.push(cfg.chunk_len());
        let eps_net = Mlp::new(&mut ps, "eps", &widths, act, rng);
        Ok(Self {
            cfg,
            params: ps,
            schedule,
            codebook,
            target_enc,
            query_enc,
            geo_attn,
            eps_net,
            eps_calls: AtomicUsize::new(0),
        })
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    /// Calls to the noise predictor so far.
    pub fn eps_calls(&self) -> usize {
        self.eps_calls.load(Ordering::Relaxed)
    }

    pub fn codebook(&self) -> Option<&Array2<f64>> {
        self.codebook.map(|id| self.params.value(id))
    }

    pub fn codebook_mut(&mut self) -> Option<&mut Array2<f64>> {
        self.codebook.map(|id| self.params.value_mut(id))
    }

    /// Concatenated codebook rows of a `H_chunk x D` token slice, in
    /// timestep-major order.
    pub fn embed_intent(&self, tokens: &[CoarseToken]) -> Result<Vec<f64>> {
        let id = self
            .codebook
            .ok_or_else(|| config_err("unconditioned refiner has no codebook"))?;
        if tokens.len() != self.cfg.chunk_len() {
            return Err(shape_err(format!(
                "intent slice needs {} tokens, got {}",
                self.cfg.chunk_len(),
                tokens.len()
            )));
        }
        crate::action::check_tokens(tokens, self.cfg.n_bins)?;
        let book = self.params.value(id);
        Ok(tokens
            .iter()
            .flat_map(|t| book.row(t.index()).to_vec())
            .collect())
    }

    fn check_batch(&self, b: usize, obs: &Array2<f64>, tokens: Option<&[Vec<CoarseToken>]>) -> Result<()> {
        if obs.nrows() != b || obs.ncols() != self.cfg.obs_dim() {
            return Err(shape_err(format!(
                "refiner expects ({b}, {}) observations, got {:?}",
                self.cfg.obs_dim(),
                obs.dim()
            )));
        }
        match (self.cfg.conditioned, tokens) {
            (true, None) => Err(config_err("conditioned refiner needs intent tokens")),
            (false, Some(_)) => Err(config_err("unconditioned refiner takes no intent tokens")),
            (true, Some(t)) if t.len() != b => Err(shape_err("intent batch size mismatch")),
            _ => Ok(()),
        }
    }

    /// Rows `[target_g - agent, agent, |target_g - agent|_inf]`, batch-major.
    fn target_features(&self, obs: &Array2<f64>) -> Array2<f64> {
        let (dm, g, off) = (self.cfg.dims, self.cfg.num_targets, self.cfg.context_dim);
        let mut out = Array2::zeros((obs.nrows() * g, 2 * dm + 1));
        for (i, row) in obs.outer_iter().enumerate() {
            let agent = row.slice(s![off..off + dm]);
            for t in 0..g {
                let start = off + dm * (1 + t);
                let delta = &row.slice(s![start..start + dm]) - &agent;
                let mut f = out.row_mut(i * g + t);
                f[2 * dm] = delta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                f.slice_mut(s![..dm]).assign(&delta);
                f.slice_mut(s![dm..2 * dm]).assign(&agent);
            }
        }
        out
    }

    /// Conditioning features `[F_geo, e_intent]` per row.
    fn condition(&self, obs: &Array2<f64>, tokens: Option<&[Vec<CoarseToken>]>) -> Result<(Array2<f64>, CondCache)> {
        let c = &self.cfg;
        let (b, g, gd, il) = (obs.nrows(), c.num_targets, c.geo_dim, c.intent_len());
        let mut qin = Array2::zeros((b, c.query_in()));
        if let Some(tokens) = tokens {
            for (i, t) in tokens.iter().enumerate() {
                qin.slice_mut(s![i, ..il]).assign(&ndarray::aview1(&self.embed_intent(t)?));
            }
        }
        qin.slice_mut(s![.., il..]).assign(&obs.slice(s![.., ..c.context_dim]));
        let ps = &self.params;
        let (q, query) = self.query_enc.forward(ps, &qin)?;
        let (tk, targets) = self.target_enc.forward(ps, &self.target_features(obs))?;
        let mut x = Array3::zeros((b, 1 + g, gd));
        x.slice_mut(s![.., 0, ..]).assign(&q);
        x.slice_mut(s![.., 1.., ..]).assign(
            &tk.into_shape_with_order((b, g, gd))
                .map_err(|e| shape_err(e.to_string()))?,
        );
        let (y, attn) = self.geo_attn.forward(ps, &x)?;
        let mut cond = Array2::zeros((b, gd + il));
        cond.slice_mut(s![.., ..gd]).assign(&y.slice(s![.., 0, ..]));
        cond.slice_mut(s![.., gd..]).assign(&qin.slice(s![.., ..il]));
        Ok((cond, CondCache { targets, query, attn }))
    }

    fn net_input(&self, x: &Array2<f64>, steps: &[usize], cond: &Array2<f64>) -> Array2<f64> {
        let (b, n) = (x.nrows(), self.cfg.chunk_len());
        let td = self.cfg.time_dim;
        let mut input = Array2::zeros((b, n + td + cond.ncols()));
        input.slice_mut(s![.., ..n]).assign(x);
        for (i, &k) in steps.iter().enumerate() {
            input
                .slice_mut(s![i, n..n + td])
                .assign(&ndarray::aview1(&time_embedding(k, td)));
        }
        input.slice_mut(s![.., n + td..]).assign(cond);
        input
    }

    /// Predict the noise for a batch of noisy chunks.
    pub fn predict_noise(
        &self,
        x: &Array2<f64>,
        steps: &[usize],
        obs: &Array2<f64>,
        tokens: Option<&[Vec<CoarseToken>]>,
    ) -> Result<(Array2<f64>, RefinerCache)> {
        let b = x.nrows();
        if x.ncols() != self.cfg.chunk_len() || steps.len() != b {
            return Err(shape_err("noisy chunk batch does not match the refiner"));
        }
        self.check_batch(b, obs, tokens)?;
        for &k in steps {
            self.schedule.check_step(k)?;
        }
        let (cond, cc) = self.condition(obs, tokens)?;
        let input = self.net_input(x, steps, &cond);
        self.eps_calls.fetch_add(1, Ordering::Relaxed);
        let (eps, net) = self.eps_net.forward(&self.params, &input)?;
        Ok((
            eps,
            RefinerCache {
                cond: cc,
                net,
                tokens: tokens.map(<[_]>::to_vec),
            },
        ))
    }

    /// Accumulate parameter gradients for `d_eps`.
    pub fn backward(&mut self, cache: &RefinerCache, d_eps: &Array2<f64>) {
        let c = &self.cfg;
        let (g, gd, il) = (c.num_targets, c.geo_dim, c.intent_len());
        let ps = &mut self.params;
        let d_in = self.eps_net.backward(ps, &cache.net, d_eps);
        let b = d_in.nrows();
        let off = c.chunk_len() + c.time_dim;
        let mut dy = Array3::zeros((b, 1 + g, gd));
        dy.slice_mut(s![.., 0, ..]).assign(&d_in.slice(s![.., off..off + gd]));
        let dx = self.geo_attn.backward(ps, &cache.cond.attn, &dy);
        let dq = dx.slice(s![.., 0, ..]).to_owned();
        let dt = dx
            .slice(s![.., 1.., ..])
            .to_owned()
            .into_shape_with_order((b * g, gd))
            .expect("target grad shape");
        self.target_enc.backward(ps, &cache.cond.targets, &dt);
        let dqin = self.query_enc.backward(ps, &cache.cond.query, &dq);
        if let (Some(id), Some(tokens)) = (self.codebook, &cache.tokens) {
            let de = c.d_emb;
            let d_intent = &d_in.slice(s![.., off + gd..off + gd + il]) + &dqin.slice(s![.., ..il]);
            let grad = ps.grad_mut(id);
            for (i, row_tokens) in tokens.iter().enumerate() {
                for (p, t) in row_tokens.iter().enumerate() {
                    let g = d_intent.slice(s![i, p * de..(p + 1) * de]);
                    let mut dst = grad.row_mut(t.index());
                    dst += &g;
                }
            }
        }
    }

    /// Diffusion loss `mean ||eps - eps_theta(x_k, F_geo, e_intent)||^2` for
    /// frozen draws; gradients are accumulated into the parameter store.
    pub fn diffusion_loss_with(
        &mut self,
        a0: &Array2<f64>,
        obs: &Array2<f64>,
        tokens: Option<&[Vec<CoarseToken>]>,
        draw: &NoiseDraw,
    ) -> Result<f64> {
        let x = self.noised(a0, draw)?;
        let (pred, cache) = self.predict_noise(&x, &draw.steps, obs, tokens)?;
        let (loss, d_pred) = mse_matrix(&pred, &draw.eps)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite diffusion loss {loss}")));
        }
        self.backward(&cache, &d_pred);
        Ok(loss)
    }

    /// Sample `(k, eps)` and evaluate the diffusion loss with gradients.
    pub fn diffusion_loss(
        &mut self,
        a0: &Array2<f64>,
        obs: &Array2<f64>,
        tokens: Option<&[Vec<CoarseToken>]>,
        rng: &mut RngState,
    ) -> Result<f64> {
        let draw = NoiseDraw::sample(a0.nrows(), self.cfg.chunk_len(), self.cfg.k_diff, rng);
        self.diffusion_loss_with(a0, obs, tokens, &draw)
    }

    /// Loss only, without touching gradients.
    pub fn eval_loss(
        &self,
        a0: &Array2<f64>,
        obs: &Array2<f64>,
        tokens: Option<&[Vec<CoarseToken>]>,
        draw: &NoiseDraw,
    ) -> Result<f64> {
        let x = self.noised(a0, draw)?;
        let (pred, _) = self.predict_noise(&x, &draw.steps, obs, tokens)?;
        Ok(mse_matrix(&pred, &draw.eps)?.0)
    }

    fn noised(&self, a0: &Array2<f64>, draw: &NoiseDraw) -> Result<Array2<f64>> {
        if a0.dim() != draw.eps.dim() || a0.ncols() != self.cfg.chunk_len() {
            return Err(shape_err("clean chunk and noise shapes disagree"));
        }
        let mut x = Array2::zeros(a0.raw_dim());
        for (i, &k) in draw.steps.iter().enumerate() {
            let row = forward_noise(
                a0.row(i).as_slice().expect("contiguous"),
                k,
                draw.eps.row(i).as_slice().expect("contiguous"),
                &self.schedule,
            )?;
            x.row_mut(i).assign(&ndarray::aview1(&row));
        }
        Ok(x)
    }

    /// Ancestral sampling from pure noise down to step 0 for a batch of
    /// conditions. The clean-sample estimate is clipped to `[-1, 1]` at every
    /// step; the last step adds no noise.
    pub fn denoise_batch(
        &self,
        obs: &Array2<f64>,
        tokens: Option<&[Vec<CoarseToken>]>,
        rng: &mut RngState,
    ) -> Result<Array2<f64>> {
        let b = obs.nrows();
        self.check_batch(b, obs, tokens)?;
        let n = self.cfg.chunk_len();
        let (cond, _) = self.condition(obs, tokens)?;
        let sched = &self.schedule;
        let mut x = Array2::from_shape_fn((b, n), |_| rng.normal());
        for k in (0..sched.steps()).rev() {
            let input = self.net_input(&x, &vec![k; b], &cond);
            self.eps_calls.fetch_add(1, Ordering::Relaxed);
            let eps = self.eps_net.apply(&self.params, &input)?;
            let ab = sched.alpha_bar(k);
            let x0 = ((&x - &(&eps * (1.0 - ab).sqrt())) / ab.sqrt()).mapv(|v| v.clamp(-1.0, 1.0));
            if k == 0 {
                x = x0;
            } else {
                let ab_prev = sched.alpha_bar(k - 1);
                let beta = sched.beta(k);
                let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
                let ck = sched.alpha(k).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
                x = x0 * c0 + &x * ck;
                x.mapv_inplace(|v| v + sigma * rng.normal());
            }
        }
        Ok(x)
    }

    /// Single-condition sampling; returns `H_chunk * D` values in `[-1, 1]`.
    pub fn denoise_sample(&self, obs: &[f64], tokens: Option<&[CoarseToken]>, rng: &mut RngState) -> Result<Vec<f64>> {
        let obs = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).map_err(|e| shape_err(e.to_string()))?;
        let tokens = tokens.map(|t| vec![t.to_vec()]);
        let out = self.denoise_batch(&obs, tokens.as_deref(), rng)?;
        Ok(out.index_axis_move(Axis(0), 0).to_vec())
    }

    /// Map full-action chunks to the values this refiner generates.
    pub fn fine_targets(&self, a0: &Array2<f64>, tokens: &[Vec<CoarseToken>]) -> Result<Array2<f64>> {
        if self.cfg.compose == ComposeMode::Direct {
            return Ok(a0.clone());
        }
        let q = QuantizerConfig::new(self.cfg.n_bins, self.cfg.dims)?;
        let d = self.cfg.dims;
        let mut out = a0.clone();
        for (mut row, toks) in out.rows_mut().into_iter().zip(tokens) {
            let full: Vec<f64> = row.to_vec();
            for (t, a) in full.chunks(d).enumerate() {
                let r = residual_target(&toks[t * d..(t + 1) * d], a, &q)?;
                for (i, v) in r.into_iter().enumerate() {
                    row[t * d + i] = v;
                }
            }
        }
        Ok(out)
    }

    /// Executed actions for a generated chunk, timestep-major.
    pub fn compose_chunk(&self, tokens: &[CoarseToken], fine: &[f64]) -> Result<Vec<f64>> {
        let d = self.cfg.dims;
        if self.cfg.compose == ComposeMode::Direct {
            return Ok(fine.to_vec());
        }
        let q = QuantizerConfig::new(self.cfg.n_bins, d)?;
        let mut out = Vec::with_capacity(fine.len());
        for (t, f) in fine.chunks(d).enumerate() {
            let a = compose(&tokens[t * d..(t + 1) * d], &ActionVector::clipped(f.to_vec()), self.cfg.compose, &q)?;
            out.extend_from_slice(a.as_slice());
        }
        Ok(out)
    }

    pub fn save<W: Write>(&self, w: W, config_hash: &str) -> Result<()> {
        let c = &self.cfg;
        let meta = [
            ("h_chunk", c.h_chunk.to_string()),
            ("n_bins", c.n_bins.to_string()),
            ("k_diff", c.k_diff.to_string()),
            ("d_emb", c.d_emb.to_string()),
            ("width", c.width.to_string()),
            ("conditioned", c.conditioned.to_string()),
            ("compose", c.compose.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        self.params.save(
            w,
            &CheckpointHeader {
                kind: "refiner".into(),
                config_hash: config_hash.into(),
                meta,
            },
        )
    }

    pub fn load<R: Read>(&mut self, r: R) -> Result<CheckpointHeader> {
        let h = self.params.load(r)?;
        if h.kind != "refiner" {
            return Err(config_err(format!("expected refiner checkpoint, got `{}`", h.kind)));
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_param_grads;

    fn tiny_cfg() -> RefinerConfig {
        RefinerConfig {
            d_emb: 3,
            width: 8,
            geo_dim: 4,
            geo_hidden: 5,
            time_dim: 4,
            k_diff: 10,
            ..RefinerConfig::new(2, 2, 5, 2)
        }
    }

    fn tokens(rng: &mut RngState, b: usize, n: usize, bins: usize) -> Vec<Vec<CoarseToken>> {
        (0..b)
            .map(|_| (0..n).map(|_| CoarseToken(rng.below(bins) as u32)).collect())
            .collect()
    }

    #[test]
    fn residual_targets_invert_composition() {
        let mut rng = RngState::new(4);
        let cfg = RefinerConfig {
            compose: ComposeMode::Residual,
            ..tiny_cfg()
        };
        let m = RefinerModel::new(cfg, &mut rng).unwrap();
        let a0 = Array2::from_shape_vec((1, 4), vec![0.33, -0.9, 0.05, 0.7]).unwrap();
        let q = QuantizerConfig::new(5, 2).unwrap();
        let toks: Vec<CoarseToken> = a0.iter().map(|&a| crate::action::quantize_scalar(a, q.num_bins)).collect();
        let fine = m.fine_targets(&a0, &[toks.clone()]).unwrap();
        assert!(fine.iter().all(|v| v.abs() <= 1.0));
        let back = m.compose_chunk(&toks, fine.as_slice().unwrap()).unwrap();
        for (b, a) in back.iter().zip(a0.iter()) {
            assert!((b - a).abs() < 1e-12);
        }
        let direct = RefinerModel::new(tiny_cfg(), &mut rng).unwrap();
        assert_eq!(direct.fine_targets(&a0, &[toks]).unwrap(), a0);
    }

    #[test]
    fn schedule_invariants() {
        let s = DiffusionSchedule::linear(50, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(0) - (1.0 - 1e-4)).abs() < 1e-15);
        for k in 1..50 {
            assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
            assert!(s.beta(k) > s.beta(k - 1));
        }
        assert!(DiffusionSchedule::from_betas(vec![0.5, 1.0]).is_err());
        assert!(DiffusionSchedule::linear(0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn forward_noise_limits() {
        let clean = DiffusionSchedule::from_betas(vec![1e-12]).unwrap();
        let x = forward_noise(&[0.3, -0.7], 0, &[1.0, -1.0], &clean).unwrap();
        assert!((x[0] - 0.3).abs() < 1e-5 && (x[1] + 0.7).abs() < 1e-5);

        let noisy = DiffusionSchedule::from_betas(vec![0.999_999; 3]).unwrap();
        let x = forward_noise(&[0.3, -0.7], 2, &[1.0, -1.0], &noisy).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] + 1.0).abs() < 1e-6);

        assert!(forward_noise(&[0.0], 3, &[0.0], &noisy).is_err());
        assert!(forward_noise(&[0.0], 0, &[0.0, 1.0], &noisy).is_err());
    }

    #[test]
    fn forward_noise_is_linear() {
        let s = DiffusionSchedule::linear(50, 1e-4, 0.02).unwrap();
        let (a, e) = ([0.2, -0.4], [0.5, 1.5]);
        let (a2, e2) = ([0.1, 0.9], [-0.3, 0.2]);
        let x1 = forward_noise(&a, 17, &e, &s).unwrap();
        let x2 = forward_noise(&a2, 17, &e2, &s).unwrap();
        let sum_a: Vec<f64> = a.iter().zip(&a2).map(|(p, q)| 2.0 * p + q).collect();
        let sum_e: Vec<f64> = e.iter().zip(&e2).map(|(p, q)| 2.0 * p + q).collect();
        let x3 = forward_noise(&sum_a, 17, &sum_e, &s).unwrap();
        for i in 0..2 {
            assert!((x3[i] - (2.0 * x1[i] + x2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_intent_layout() {
        let m = RefinerModel::new(tiny_cfg(), &mut RngState::new(0)).unwrap();
        let same = m.embed_intent(&[CoarseToken(2); 4]).unwrap();
        assert_eq!(same.len(), 4 * 3);
        for seg in same.chunks(3) {
            assert_eq!(seg, &same[..3]);
        }
        assert!(m.embed_intent(&[CoarseToken(5); 4]).is_err());
        assert!(m.embed_intent(&[CoarseToken(0); 3]).is_err());
    }

    #[test]
    fn codebook_gradient_is_sparse() {
        let mut rng = RngState::new(1);
        let mut m = RefinerModel::new(tiny_cfg(), &mut rng).unwrap();
        let a0 = Array2::from_shape_fn((2, 4), |_| rng.uniform_range(-1.0, 1.0));
        let obs = Array2::from_shape_fn((2, 6), |_| rng.normal());
        let toks = vec![
            vec![CoarseToken(1), CoarseToken(1), CoarseToken(3), CoarseToken(1)],
            vec![CoarseToken(3); 4],
        ];
        m.params.zero_grads();
        m.diffusion_loss(&a0, &obs, Some(&toks), &mut rng).unwrap();
        let id = m.codebook.unwrap();
        let g = m.params.grad(id);
        for row in 0..5 {
            let nonzero = g.row(row).iter().any(|v| *v != 0.0);
            assert_eq!(nonzero, row == 1 || row == 3, "row {row}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for conditioned in [true, false] {
            let mut rng = RngState::new(2);
            let context_dim = if conditioned { 0 } else { 3 };
            let cfg = RefinerConfig { conditioned, context_dim, ..tiny_cfg() };
            let mut m = RefinerModel::new(cfg, &mut rng).unwrap();
            let a0 = Array2::from_shape_fn((3, 4), |_| rng.uniform_range(-1.0, 1.0));
            let obs = Array2::from_shape_fn((3, 6 + context_dim), |_| rng.normal());
            let toks = conditioned.then(|| tokens(&mut rng, 3, 4, 5));
            let draw = NoiseDraw::sample(3, 4, 10, &mut rng);
            m.params.zero_grads();
            m.diffusion_loss_with(&a0, &obs, toks.as_deref(), &draw).unwrap();
            let probe = m.clone();
            let err = check_param_grads(
                &mut m.params,
                |ps| {
                    let mut p = probe.clone();
                    p.params = ps.clone();
                    p.eval_loss(&a0, &obs, toks.as_deref(), &draw).unwrap()
                },
                1e-5,
            );
            assert!(err < 1e-3, "conditioned={conditioned}: {err}");
        }
    }

    fn zero_output(m: &mut RefinerModel) {
        let last = m.eps_net.layers.last().unwrap().clone();
        m.params.value_mut(last.w).fill(0.0);
        m.params.value_mut(last.b).fill(0.0);
    }

    #[test]
    fn zero_network_loss_is_unit_variance() {
        let mut rng = RngState::new(3);
        let mut m = RefinerModel::new(tiny_cfg(), &mut rng).unwrap();
        zero_output(&mut m);
        let b = 4000;
        let a0 = Array2::from_shape_fn((b, 4), |_| rng.uniform_range(-1.0, 1.0));
        let obs = Array2::from_shape_fn((b, 6), |_| rng.normal());
        let toks = tokens(&mut rng, b, 4, 5);
        let loss = m.diffusion_loss(&a0, &obs, Some(&toks), &mut rng).unwrap();
        // mean of 16000 squared standard normals: sd of the mean is sqrt(2/16000)
        assert!((loss - 1.0).abs() < 3.0 * (2.0f64 / 16000.0).sqrt(), "{loss}");
    }

    #[test]
    fn single_step_sampling_closed_form() {
        let cfg = RefinerConfig { k_diff: 1, beta_start: 0.1, beta_end: 0.1, ..tiny_cfg() };
        let mut m = RefinerModel::new(cfg, &mut RngState::new(4)).unwrap();
        zero_output(&mut m);
        let obs = [0.1, 0.2, 0.3, -0.4, 0.5, -0.6];
        let toks = [CoarseToken(0); 4];
        let mut rng = RngState::new(99);
        let out = m.denoise_sample(&obs, Some(&toks), &mut rng).unwrap();
        let mut replay = RngState::new(99);
        let x1 = replay.normals(4);
        for (o, x) in out.iter().zip(&x1) {
            assert!((o - (x / 0.9f64.sqrt()).clamp(-1.0, 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_deterministic_and_counts_calls() {
        let m = RefinerModel::new(tiny_cfg(), &mut RngState::new(5)).unwrap();
        let obs = [0.0, 0.5, -0.5, 0.25, 0.75, -0.1];
        let toks = [CoarseToken(4), CoarseToken(0), CoarseToken(2), CoarseToken(1)];
        let before = m.eps_calls();
        let a = m.denoise_sample(&obs, Some(&toks), &mut RngState::new(7)).unwrap();
        assert_eq!(m.eps_calls() - before, 10);
        let b = m.denoise_sample(&obs, Some(&toks), &mut RngState::new(7)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(m.denoise_sample(&obs, None, &mut RngState::new(7)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = RefinerModel::new(tiny_cfg(), &mut RngState::new(6)).unwrap();
        let mut buf = Vec::new();
        m.save(&mut buf, "abc").unwrap();
        let mut other = RefinerModel::new(tiny_cfg(), &mut RngState::new(7)).unwrap();
        other.load(buf.as_slice()).unwrap();
        assert_eq!(other.params.flat_values(), m.params.flat_values());
        let mut planner_like = RefinerModel::new(RefinerConfig { conditioned: false, context_dim: 2, ..tiny_cfg() }, &mut RngState::new(0)).unwrap();
        assert!(planner_like.load(buf.as_slice()).is_err());
    }
}
