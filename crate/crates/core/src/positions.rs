//! Positional schemes: Abacus digit-significance ids, the FIRE relative
//! bias, rotary embeddings, and how they combine.
//!
//! The model consumes these through the tape; the plain-`f64` functions here
//! are direct evaluations used for assignment and as references.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::EncodedSample;
use crate::substrate::Tensor;

/// Hidden width of the FIRE MLP.
pub const FIRE_WIDTH: usize = 32;
pub const FIRE_INIT_C: f64 = 0.1;
pub const FIRE_INIT_L: f64 = 32.0;

#[derive(Debug, Error, PartialEq)]
pub enum PositionError {
    #[error("digit run of {run} at offset {beta} needs position {needed}, but the table holds ids up to {max}")]
    Capacity {
        run: usize,
        beta: usize,
        needed: usize,
        max: usize,
    },
    #[error("offset must be at least 1, got {0}")]
    Offset(usize),
    #[error("rotated span {0} must be even")]
    OddRotarySpan(usize),
    #[error("rotated span {rot} exceeds head dimension {head_dim}")]
    RotarySpan { rot: usize, head_dim: usize },
    #[error("query position {i} precedes key position {j}")]
    NonCausal { i: usize, j: usize },
    #[error("relative bias input not finite at ({i}, {j})")]
    NonFinite { i: usize, j: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, PositionError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbacusConfig {
    /// Training offsets are drawn from `1..=k`.
    pub k: usize,
    /// Rows in the learned table, including the reserved non-digit row 0.
    pub table_size: usize,
}

impl AbacusConfig {
    pub fn new(k: usize, longest_run: usize) -> Self {
        Self {
            k,
            table_size: k + longest_run + 1,
        }
    }

    /// Longest digit run representable at offset `beta`.
    pub fn capacity(&self, beta: usize) -> usize {
        self.table_size.saturating_sub(beta)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionAssignment {
    pub ids: Vec<usize>,
    pub beta: usize,
}

/// Ids `beta, beta + 1, ...` along each digit run; 0 elsewhere.
pub fn abacus_ids(
    len: usize,
    runs: &[(usize, usize)],
    beta: usize,
    table_size: usize,
) -> Result<PositionAssignment> {
    if beta == 0 {
        return Err(PositionError::Offset(beta));
    }
    let mut ids = vec![0; len];
    for &(start, end) in runs {
        let needed = beta + (end - start) - 1;
        if needed >= table_size {
            return Err(PositionError::Capacity {
                run: end - start,
                beta,
                needed,
                max: table_size - 1,
            });
        }
        for (o, id) in ids[start..end].iter_mut().enumerate() {
            *id = beta + o;
        }
    }
    Ok(PositionAssignment { ids, beta })
}

pub fn abacus_positions(sample: &EncodedSample, beta: usize, table_size: usize) -> Result<PositionAssignment> {
    abacus_ids(sample.tokens.len(), &sample.digit_runs, beta, table_size)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OffsetMode {
    Train,
    Eval,
}

/// One draw per batch in training; always 1 at evaluation.
pub fn sample_offset(cfg: &AbacusConfig, rng: &mut impl Rng, mode: OffsetMode) -> usize {
    match mode {
        OffsetMode::Train => rng.gen_range(1..=cfg.k.max(1)),
        OffsetMode::Eval => 1,
    }
}

/// `log(c (i - j) + 1) / log(c max(i, L) + 1)`.
pub fn fire_input_value(i: usize, j: usize, c: f64, l: f64) -> Result<f64> {
    if j > i {
        return Err(PositionError::NonCausal { i, j });
    }
    let u = (c * (i - j) as f64).ln_1p() / (c * (i as f64).max(l)).ln_1p();
    if u.is_finite() {
        Ok(u)
    } else {
        Err(PositionError::NonFinite { i, j })
    }
}

/// Plain evaluation of one layer's FIRE function: a shared two-hidden-layer
/// GELU MLP from the scalar input to one value per head.
#[derive(Clone, Debug)]
pub struct FireReference {
    pub heads: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub c: f64,
    pub l: f64,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

impl FireReference {
    pub fn mlp(&self, u: f64) -> Vec<f64> {
        let w = self.b1.len();
        let h1: Vec<f64> = (0..w).map(|a| gelu(u * self.w1[a] + self.b1[a])).collect();
        let h2: Vec<f64> = (0..w)
            .map(|b| gelu((0..w).map(|a| h1[a] * self.w2[a * w + b]).sum::<f64>() + self.b2[b]))
            .collect();
        (0..self.heads)
            .map(|h| (0..w).map(|b| h2[b] * self.w3[b * self.heads + h]).sum::<f64>())
            .collect()
    }

    /// Bias of every head for query `i` and key `j`.
    pub fn bias(&self, i: usize, j: usize) -> Result<Vec<f64>> {
        Ok(self.mlp(fire_input_value(i, j, self.c, self.l)?))
    }

    /// `[heads, seq, seq]`, zero above the diagonal.
    pub fn bias_matrix(&self, seq: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.heads * seq * seq];
        for i in 0..seq {
            for j in 0..=i {
                for (h, b) in self.bias(i, j)?.into_iter().enumerate() {
                    out[(h * seq + i) * seq + j] = b;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub base: f64,
    /// Rotated dimensions per head; `None` rotates the whole head.
    pub rotated_dims: Option<usize>,
}

impl Default for RopeConfig {
    fn default() -> Self {
        Self {
            base: 10_000.0,
            rotated_dims: None,
        }
    }
}

impl RopeConfig {
    pub fn span(&self, head_dim: usize) -> Result<usize> {
        let rot = self.rotated_dims.unwrap_or(head_dim);
        if rot % 2 != 0 {
            return Err(PositionError::OddRotarySpan(rot));
        }
        if rot > head_dim {
            return Err(PositionError::RotarySpan { rot, head_dim });
        }
        Ok(rot)
    }
}

fn rotate_rows(x: &Tensor<f64>, positions: &[usize], heads: usize, cfg: &RopeConfig) -> Result<Tensor<f64>> {
    let (rows, width) = x.rows_cols();
    if heads == 0 || width % heads != 0 || rows != positions.len() {
        return Err(PositionError::Shape(format!(
            "{:?} with {} positions and {heads} heads",
            x.shape(),
            positions.len()
        )));
    }
    let head_dim = width / heads;
    let rot = cfg.span(head_dim)?;
    let mut out = x.clone();
    let data = out.data_mut();
    for (r, &p) in positions.iter().enumerate() {
        for h in 0..heads {
            for i in 0..rot / 2 {
                let theta = p as f64 / cfg.base.powf(2.0 * i as f64 / rot as f64);
                let (s, c) = theta.sin_cos();
                let at = r * width + h * head_dim + 2 * i;
                let (a, b) = (data[at], data[at + 1]);
                data[at] = a * c - b * s;
                data[at + 1] = a * s + b * c;
            }
        }
    }
    Ok(out)
}

/// Rotates `q` and `k` (`[rows, heads * head_dim]`) by their row positions.
pub fn rope_apply(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    positions: &[usize],
    heads: usize,
    cfg: &RopeConfig,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    Ok((rotate_rows(q, positions, heads, cfg)?, rotate_rows(k, positions, heads, cfg)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelativeScheme {
    #[default]
    None,
    Fire,
    Rope,
}

impl std::str::FromStr for RelativeScheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "fire" => Ok(Self::Fire),
            "rope" => Ok(Self::Rope),
            other => Err(format!("unknown relative scheme {other:?}")),
        }
    }
}

/// Abacus acts on the input embedding; the relative scheme acts inside
/// attention. The two are independent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PositionScheme {
    pub abacus: bool,
    pub relative: RelativeScheme,
}

impl PositionScheme {
    pub fn is_nope(&self) -> bool {
        !self.abacus && self.relative == RelativeScheme::None
    }

    pub fn label(&self) -> String {
        match (self.abacus, self.relative) {
            (false, RelativeScheme::None) => "nope".into(),
            (true, RelativeScheme::None) => "abacus".into(),
            (false, r) => format!("{r:?}").to_lowercase(),
            (true, r) => format!("abacus+{}", format!("{r:?}").to_lowercase()),
        }
    }
}

pub fn combine_schemes(abacus: bool, relative: RelativeScheme) -> PositionScheme {
    PositionScheme { abacus, relative }
}
