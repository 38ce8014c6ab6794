//! Hybrid action space: normalization, uniform coarse quantization,
//! bin-center dequantization and coarse/fine composition.

use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, shape_err, Error, Result};

/// A normalized continuous action in `[-1, 1]^D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionVector(Vec<f64>);

impl ActionVector {
    /// Build from values, clipping every component into `[-1, 1]`.
    pub fn clipped(values: Vec<f64>) -> Self {
        ActionVector(values.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
    }

    /// Build from values that must already lie in `[-1, 1]`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(format!("action component {v} outside [-1, 1]")));
        }
        Ok(ActionVector(values))
    }

    pub fn zeros(dims: usize) -> Self {
        ActionVector(vec![0.0; dims])
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Per-dimension raw action bounds used for normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    low: Vec<f64>,
    high: Vec<f64>,
}

impl NormalizationStats {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.len() != high.len() || low.is_empty() {
            return Err(config_err("normalization bounds must be non-empty and equal length"));
        }
        if low.iter().zip(&high).any(|(l, h)| !(l < h)) {
            return Err(config_err("normalization requires low < high in every dimension"));
        }
        Ok(Self { low, high })
    }

    pub fn dims(&self) -> usize {
        self.low.len()
    }
}

/// Map a raw action into `[-1, 1]^D`.
pub fn normalize(raw: &[f64], stats: &NormalizationStats) -> Result<ActionVector> {
    if raw.len() != stats.dims() {
        return Err(config_err(format!(
            "raw action has {} dims, stats have {}",
            raw.len(),
            stats.dims()
        )));
    }
    let values = raw
        .iter()
        .zip(stats.low.iter().zip(&stats.high))
        .map(|(&x, (&lo, &hi))| 2.0 * (x - lo) / (hi - lo) - 1.0)
        .collect();
    Ok(ActionVector::clipped(values))
}

/// Number of bins `N` and action dimensionality `D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantizerConfig {
    pub num_bins: usize,
    pub dims: usize,
}

impl QuantizerConfig {
    pub fn new(num_bins: usize, dims: usize) -> Result<Self> {
        if num_bins < 2 {
            return Err(config_err(format!("num_bins must be >= 2, got {num_bins}")));
        }
        if dims == 0 {
            return Err(config_err("dims must be >= 1"));
        }
        Ok(Self { num_bins, dims })
    }

    /// Width of one bin in normalized action units.
    pub fn bin_width(&self) -> f64 {
        2.0 / self.num_bins as f64
    }
}

/// Index of one of the `N` uniform bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CoarseToken(pub u32);

impl CoarseToken {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for CoarseToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Bin index of a single normalized value.
pub fn quantize_scalar(a: f64, num_bins: usize) -> CoarseToken {
    let raw = ((a + 1.0) / 2.0 * num_bins as f64).floor();
    let idx = raw.clamp(0.0, (num_bins - 1) as f64);
    CoarseToken(idx as u32)
}

/// Bin center of a single token.
pub fn dequantize_scalar(tok: CoarseToken, num_bins: usize) -> f64 {
    2.0 * (tok.0 as f64 + 0.5) / num_bins as f64 - 1.0
}

pub fn quantize(a: &ActionVector, cfg: &QuantizerConfig) -> Vec<CoarseToken> {
    a.as_slice()
        .iter()
        .map(|&v| quantize_scalar(v, cfg.num_bins))
        .collect()
}

pub fn dequantize(tokens: &[CoarseToken], cfg: &QuantizerConfig) -> Result<ActionVector> {
    check_tokens(tokens, cfg.num_bins)?;
    Ok(ActionVector(
        tokens
            .iter()
            .map(|&t| dequantize_scalar(t, cfg.num_bins))
            .collect(),
    ))
}

pub(crate) fn check_tokens(tokens: &[CoarseToken], num_bins: usize) -> Result<()> {
    match tokens.iter().find(|t| t.index() >= num_bins) {
        Some(t) => Err(Error::OutOfRange(format!(
            "token {t} outside [0, {num_bins})"
        ))),
        None => Ok(()),
    }
}

/// How the coarse token and the fine action combine into the executed action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ComposeMode {
    /// The fine action is the full action.
    #[default]
    Direct,
    /// The fine action is a within-bin residual around the bin center.
    Residual,
}

impl FromStr for ComposeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(ComposeMode::Direct),
            "residual" => Ok(ComposeMode::Residual),
            other => Err(config_err(format!("unknown compose mode `{other}`"))),
        }
    }
}

impl fmt::Display for ComposeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ComposeMode::Direct => "direct",
            ComposeMode::Residual => "residual",
        })
    }
}

pub fn compose(
    coarse: &[CoarseToken],
    fine: &ActionVector,
    mode: ComposeMode,
    cfg: &QuantizerConfig,
) -> Result<ActionVector> {
    if coarse.len() != fine.dims() {
        return Err(shape_err(format!(
            "coarse has {} dims, fine has {}",
            coarse.len(),
            fine.dims()
        )));
    }
    match mode {
        ComposeMode::Direct => Ok(fine.clone()),
        ComposeMode::Residual => {
            let center = dequantize(coarse, cfg)?;
            let scale = 1.0 / cfg.num_bins as f64;
            Ok(ActionVector::clipped(
                center
                    .as_slice()
                    .iter()
                    .zip(fine.as_slice())
                    .map(|(c, f)| c + f * scale)
                    .collect(),
            ))
        }
    }
}

/// Inverse of residual composition: the fine value that recovers `action`
/// from the bin centers of `coarse`, clipped to `[-1, 1]`.
pub fn residual_target(coarse: &[CoarseToken], action: &[f64], cfg: &QuantizerConfig) -> Result<Vec<f64>> {
    if coarse.len() != action.len() {
        return Err(shape_err(format!(
            "coarse has {} dims, action has {}",
            coarse.len(),
            action.len()
        )));
    }
    let n = cfg.num_bins as f64;
    let center = dequantize(coarse, cfg)?;
    Ok(center
        .as_slice()
        .iter()
        .zip(action)
        .map(|(c, a)| ((a - c) * n).clamp(-1.0, 1.0))
        .collect())
}

/// An `L_macro x D` grid of bin indices, stored timestep-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoarseChunk {
    rows: usize,
    dims: usize,
    tokens: Vec<CoarseToken>,
}

impl CoarseChunk {
    pub fn new(rows: usize, dims: usize, tokens: Vec<CoarseToken>) -> Result<Self> {
        if tokens.len() != rows * dims {
            return Err(shape_err(format!(
                "chunk expects {}x{} tokens, got {}",
                rows,
                dims,
                tokens.len()
            )));
        }
        Ok(Self { rows, dims, tokens })
    }

    /// Quantize a sequence of actions row by row.
    pub fn from_actions(actions: &[ActionVector], cfg: &QuantizerConfig) -> Self {
        let tokens = actions.iter().flat_map(|a| quantize(a, cfg)).collect();
        Self {
            rows: actions.len(),
            dims: cfg.dims,
            tokens,
        }
    }

    pub fn from_rows(rows: &[Vec<CoarseToken>]) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dims) {
            return Err(shape_err("ragged coarse rows"));
        }
        Ok(Self {
            rows: rows.len(),
            dims,
            tokens: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn row(&self, t: usize) -> &[CoarseToken] {
        &self.tokens[t * self.dims..(t + 1) * self.dims]
    }

    pub fn tokens(&self) -> &[CoarseToken] {
        &self.tokens
    }

    pub fn row_vecs(&self) -> Vec<Vec<CoarseToken>> {
        (0..self.rows).map(|t| self.row(t).to_vec()).collect()
    }

    /// The first `rows` rows.
    pub fn truncated(&self, rows: usize) -> CoarseChunk {
        let rows = rows.min(self.rows);
        Self {
            rows,
            dims: self.dims,
            tokens: self.tokens[..rows * self.dims].to_vec(),
        }
    }

    pub fn validate(&self, num_bins: usize) -> Result<()> {
        check_tokens(&self.tokens, num_bins)
    }
}
