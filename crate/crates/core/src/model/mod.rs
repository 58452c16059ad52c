//! Decoder-only transformer: post-norm layers with gated-GELU feed-forward,
//! deepnorm residual scaling, and three stacking variants (plain, with input
//! injection, and a weight-tied looped block).

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointKind, OptimizerState, CHECKPOINT_MAGIC};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{TokenId, Vocabulary};
use crate::positions::{
    abacus_ids, AbacusConfig, FireReference, PositionError, PositionScheme, RelativeScheme, RopeConfig,
    FIRE_INIT_C, FIRE_INIT_L, FIRE_WIDTH,
};
use crate::substrate::{softplus_inverse, Real, SubstrateError, Tape, Tensor, Var};
use crate::task_data::indexed_rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("recurrence override is only defined for looped models")]
    OverrideOnNonLooped,
    #[error("operation requires a looped model")]
    NotLooped,
    #[error("abacus ids are required when the abacus scheme is on")]
    MissingPositions,
    #[error("sequence length {seq} exceeds the configured maximum {max}")]
    SequenceTooLong { seq: usize, max: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error(transparent)]
    Position(#[from] PositionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_size: usize,
    /// Width of the gated projection before it is split into gate and value.
    pub intermediate_size: usize,
    pub embedding_size: usize,
    pub attention_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub position: PositionScheme,
    pub abacus: AbacusConfig,
    pub rope: RopeConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self::sized(256, 512, 4)
    }

    /// Full-size preset. The Abacus table spans the whole context window.
    pub fn paper() -> Self {
        Self {
            max_seq_len: 4096,
            abacus: AbacusConfig { k: 100, table_size: 4096 },
            ..Self::sized(1024, 2048, 16)
        }
    }

    pub fn sized(hidden: usize, intermediate: usize, heads: usize) -> Self {
        Self {
            hidden_size: hidden,
            intermediate_size: intermediate,
            embedding_size: hidden,
            attention_heads: heads,
            vocab_size: Vocabulary::standard().len(),
            max_seq_len: 1024,
            position: PositionScheme {
                abacus: true,
                relative: RelativeScheme::None,
            },
            abacus: AbacusConfig::new(100, 21),
            rope: RopeConfig::default(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.attention_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.hidden_size == 0 || self.attention_heads == 0 || self.vocab_size < 2 {
            return err("hidden_size, attention_heads and vocab_size must be positive".into());
        }
        if self.hidden_size % self.attention_heads != 0 {
            return err(format!(
                "hidden_size {} is not divisible by attention_heads {}",
                self.hidden_size, self.attention_heads
            ));
        }
        if self.intermediate_size == 0 || self.intermediate_size % 2 != 0 {
            return err(format!("intermediate_size {} must be positive and even", self.intermediate_size));
        }
        if self.embedding_size != self.hidden_size {
            return err(format!(
                "embedding_size {} must equal hidden_size {}",
                self.embedding_size, self.hidden_size
            ));
        }
        if self.position.abacus && self.abacus.table_size < 2 {
            return err("abacus.table_size must be at least 2".into());
        }
        if self.position.relative == RelativeScheme::Rope {
            self.rope.span(self.head_dim())?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Standard,
    StandardInputInjection,
    Looped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureVariant {
    pub kind: VariantKind,
    pub block_layers: usize,
    pub recurrences: usize,
    pub injection_inside_block: bool,
}

impl ArchitectureVariant {
    pub fn standard(layers: usize) -> Self {
        Self {
            kind: VariantKind::Standard,
            block_layers: layers,
            recurrences: 1,
            injection_inside_block: true,
        }
    }

    pub fn injected(layers: usize) -> Self {
        Self {
            kind: VariantKind::StandardInputInjection,
            ..Self::standard(layers)
        }
    }

    pub fn looped(block_layers: usize, recurrences: usize) -> Self {
        Self {
            kind: VariantKind::Looped,
            block_layers,
            recurrences,
            injection_inside_block: true,
        }
    }

    pub fn effective_depth(&self) -> usize {
        self.block_layers * self.recurrences
    }

    /// `layers x recurrences`, e.g. `16x1` or `1x16`.
    pub fn label(&self) -> String {
        format!("{}x{}", self.block_layers, self.recurrences)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_layers == 0 || self.recurrences == 0 {
            return Err(ModelError::Config("block_layers and recurrences must be positive".into()));
        }
        if self.kind != VariantKind::Looped && self.recurrences != 1 {
            return Err(ModelError::Config(format!(
                "{:?} models have one recurrence, got {}",
                self.kind, self.recurrences
            )));
        }
        Ok(())
    }
}

/// Residual scale `alpha = (2N)^(1/4)` for effective depth `N`.
pub fn deepnorm_alpha(depth: usize) -> f64 {
    (2.0 * depth as f64).powf(0.25)
}

/// Initialisation gain `beta = (8N)^(-1/4)` for value, output and
/// feed-forward weights.
pub fn deepnorm_beta(depth: usize) -> f64 {
    (8.0 * depth as f64).powf(-0.25)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Embedding,
    Xavier(f64),
    Ones,
    Zeros,
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Every learnable tensor, in storage order.
pub fn param_specs(cfg: &ModelConfig, variant: &ArchitectureVariant) -> Vec<ParamSpec> {
    let (h, i, heads) = (cfg.hidden_size, cfg.intermediate_size, cfg.attention_heads);
    let beta = deepnorm_beta(variant.effective_depth());
    let mut v = vec![ParamSpec::new("embed.token", vec![cfg.vocab_size, h], Init::Embedding)];
    if cfg.position.abacus {
        v.push(ParamSpec::new("embed.abacus", vec![cfg.abacus.table_size, h], Init::Embedding));
    }
    for l in 0..variant.block_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        v.push(ParamSpec::new(p("attn.wq"), vec![h, h], Init::Xavier(1.0)));
        v.push(ParamSpec::new(p("attn.wk"), vec![h, h], Init::Xavier(1.0)));
        v.push(ParamSpec::new(p("attn.wv"), vec![h, h], Init::Xavier(beta)));
        v.push(ParamSpec::new(p("attn.wo"), vec![h, h], Init::Xavier(beta)));
        v.push(ParamSpec::new(p("ln1.gain"), vec![h], Init::Ones));
        v.push(ParamSpec::new(p("ln1.bias"), vec![h], Init::Zeros));
        v.push(ParamSpec::new(p("mlp.w_in"), vec![h, i], Init::Xavier(beta)));
        v.push(ParamSpec::new(p("mlp.w_out"), vec![i / 2, h], Init::Xavier(beta)));
        v.push(ParamSpec::new(p("ln2.gain"), vec![h], Init::Ones));
        v.push(ParamSpec::new(p("ln2.bias"), vec![h], Init::Zeros));
        if cfg.position.relative == RelativeScheme::Fire {
            let w = FIRE_WIDTH;
            v.push(ParamSpec::new(p("fire.w1"), vec![1, w], Init::Xavier(1.0)));
            v.push(ParamSpec::new(p("fire.b1"), vec![w], Init::Zeros));
            v.push(ParamSpec::new(p("fire.w2"), vec![w, w], Init::Xavier(1.0)));
            v.push(ParamSpec::new(p("fire.b2"), vec![w], Init::Zeros));
            // No output bias: a per-head constant cancels in the softmax.
            v.push(ParamSpec::new(p("fire.w3"), vec![w, heads], Init::Xavier(1.0)));
            v.push(ParamSpec::new(p("fire.c_raw"), vec![1], Init::Const(softplus_inverse(FIRE_INIT_C))));
            v.push(ParamSpec::new(p("fire.l_raw"), vec![1], Init::Const(softplus_inverse(FIRE_INIT_L))));
        }
    }
    v.push(ParamSpec::new("head.weight", vec![h, cfg.vocab_size], Init::Xavier(1.0)));
    v
}

/// Exact number of learnable scalars.
pub fn param_count(cfg: &ModelConfig, variant: &ArchitectureVariant) -> usize {
    param_specs(cfg, variant).iter().map(ParamSpec::len).sum()
}

/// Parameter totals grouped by the first two name components.
pub fn param_breakdown(cfg: &ModelConfig, variant: &ArchitectureVariant) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for s in param_specs(cfg, variant) {
        let mut parts = s.name.split('.');
        let group = match (parts.next(), parts.next(), parts.next()) {
            (Some("layers"), Some(_), Some(g)) => format!("layers.*.{g}"),
            (Some(a), Some(b), _) => format!("{a}.{b}"),
            _ => s.name.clone(),
        };
        match out.iter_mut().find(|(g, _)| *g == group) {
            Some(e) => e.1 += s.len(),
            None => out.push((group, s.len())),
        }
    }
    out
}

fn name_stream(name: &str) -> u64 {
    // FNV-1a, so a tensor's initial values depend only on its name and the seed.
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn init_tensor(spec: &ParamSpec, hidden: usize, seed: u64) -> Tensor<f32> {
    let mut rng = indexed_rng(seed, name_stream(&spec.name));
    let bound = match spec.init {
        Init::Embedding => (3.0 / hidden as f64).sqrt(),
        Init::Xavier(gain) => {
            let (fan_in, fan_out) = (spec.shape[0], spec.shape[spec.shape.len() - 1]);
            gain * (6.0 / (fan_in + fan_out) as f64).sqrt()
        }
        Init::Ones => return Tensor::from_fn(spec.shape.clone(), |_| 1.0),
        Init::Zeros => return Tensor::zeros(spec.shape.clone()),
        Init::Const(c) => return Tensor::from_fn(spec.shape.clone(), |_| c as f32),
    };
    Tensor::from_fn(spec.shape.clone(), |_| rng.gen_range(-bound..bound) as f32)
}

/// Inputs to one forward pass. Rows of `tokens` are right-padded sequences
/// of length `seq`.
#[derive(Clone, Copy, Debug)]
pub struct ForwardInput<'a> {
    pub tokens: &'a [TokenId],
    pub batch: usize,
    pub seq: usize,
    /// Abacus ids per token, required when the abacus scheme is on.
    pub abacus_ids: Option<&'a [usize]>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Looped models only.
    pub recurrences: Option<usize>,
    /// Keep the in-block injection additions but add zeros, isolating their
    /// effect from the rest of the computation.
    pub zero_inner_injection: bool,
    /// Return logits after every recurrence instead of only the last.
    pub all_iterations: bool,
}

struct LayerIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln1: (usize, usize),
    w_in: usize,
    w_out: usize,
    ln2: (usize, usize),
    fire: Option<[usize; 7]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub variant: ArchitectureVariant,
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
}

impl Model {
    /// Deterministic initialisation per seed.
    pub fn new(config: ModelConfig, variant: ArchitectureVariant, seed: u64) -> Result<Self> {
        config.validate()?;
        variant.validate()?;
        let specs = param_specs(&config, &variant);
        let params = specs.iter().map(|s| init_tensor(s, config.hidden_size, seed)).collect();
        Ok(Self {
            names: specs.into_iter().map(|s| s.name).collect(),
            params,
            config,
            variant,
        })
    }

    /// Rebuilds a model from named tensors, checking them against the layout.
    pub fn from_parts(
        config: ModelConfig,
        variant: ArchitectureVariant,
        named: Vec<(String, Tensor<f32>)>,
    ) -> Result<Self> {
        config.validate()?;
        variant.validate()?;
        let specs = param_specs(&config, &variant);
        if specs.len() != named.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        for (s, (n, t)) in specs.iter().zip(&named) {
            if s.name != *n || s.shape != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {n} {:?} does not match expected {} {:?}",
                    t.shape(),
                    s.name,
                    s.shape
                )));
            }
        }
        let (names, params) = named.into_iter().unzip();
        Ok(Self {
            config,
            variant,
            names,
            params,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index(name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.index(name).map(|i| &mut self.params[i])
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Whether parameter `i` belongs to the (possibly recurrent) layer stack.
    pub fn is_block_param(&self, i: usize) -> bool {
        self.names[i].starts_with("layers.")
    }

    /// Parameters cast to `T`, in storage order.
    pub fn params_as<T: Real>(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.cast()).collect()
    }

    /// Grows the abacus table, initialising the new rows randomly.
    pub fn extend_abacus_table(&mut self, table_size: usize, seed: u64) -> Result<()> {
        let i = self
            .index("embed.abacus")
            .ok_or_else(|| ModelError::Config("model has no abacus table".into()))?;
        let h = self.config.hidden_size;
        let old = self.config.abacus.table_size;
        if table_size < old {
            return Err(ModelError::Config(format!("cannot shrink abacus table from {old} to {table_size}")));
        }
        let mut data = self.params[i].data().to_vec();
        let fresh = init_tensor(
            &ParamSpec::new("embed.abacus.extension", vec![table_size - old, h], Init::Embedding),
            h,
            seed,
        );
        data.extend_from_slice(fresh.data());
        self.params[i] = Tensor::new(vec![table_size, h], data)?;
        self.config.abacus.table_size = table_size;
        Ok(())
    }

    /// Plain reference for one layer's FIRE function.
    pub fn fire_reference(&self, layer: usize) -> Option<FireReference> {
        let get = |s: &str| self.param(&format!("layers.{layer}.fire.{s}")).map(|t| t.cast::<f64>().into_data());
        let sp = |x: f64| if x > 20.0 { x } else { x.exp().ln_1p() };
        Some(FireReference {
            heads: self.config.attention_heads,
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
            w3: get("w3")?,
            c: sp(get("c_raw")?[0]),
            l: sp(get("l_raw")?[0]),
        })
    }

    fn layer_indices(&self) -> Vec<LayerIdx> {
        let idx = |l: usize, s: &str| self.index(&format!("layers.{l}.{s}")).expect("layer parameter present");
        (0..self.variant.block_layers)
            .map(|l| LayerIdx {
                wq: idx(l, "attn.wq"),
                wk: idx(l, "attn.wk"),
                wv: idx(l, "attn.wv"),
                wo: idx(l, "attn.wo"),
                ln1: (idx(l, "ln1.gain"), idx(l, "ln1.bias")),
                w_in: idx(l, "mlp.w_in"),
                w_out: idx(l, "mlp.w_out"),
                ln2: (idx(l, "ln2.gain"), idx(l, "ln2.bias")),
                fire: (self.config.position.relative == RelativeScheme::Fire).then(|| {
                    ["w1", "b1", "w2", "b2", "w3", "c_raw", "l_raw"].map(|s| idx(l, &format!("fire.{s}")))
                }),
            })
            .collect()
    }

    fn check_input(&self, input: &ForwardInput) -> Result<()> {
        if input.tokens.len() != input.batch * input.seq {
            return Err(ModelError::Config(format!(
                "{} tokens do not form a {}x{} batch",
                input.tokens.len(),
                input.batch,
                input.seq
            )));
        }
        if input.seq > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                seq: input.seq,
                max: self.config.max_seq_len,
            });
        }
        if self.config.position.abacus {
            match input.abacus_ids {
                None => return Err(ModelError::MissingPositions),
                Some(ids) if ids.len() != input.tokens.len() => {
                    return Err(ModelError::Config("abacus ids do not match the tokens".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Records the forward pass on `tape` using `vars` (one per parameter, in
    /// storage order) and returns the logits `[batch * seq, vocab]`: one
    /// entry, or one per recurrence with `all_iterations`.
    pub fn graph<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        input: &ForwardInput,
        opts: &ForwardOptions,
    ) -> Result<Vec<Var>> {
        self.check_input(input)?;
        if vars.len() != self.params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter vars, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        let looped = self.variant.kind == VariantKind::Looped;
        if opts.recurrences.is_some() && !looped {
            return Err(ModelError::OverrideOnNonLooped);
        }
        let recurrences = opts.recurrences.unwrap_or(self.variant.recurrences);
        if recurrences == 0 {
            return Err(ModelError::Config("recurrences must be positive".into()));
        }
        let (batch, seq) = (input.batch, input.seq);
        let ids: Vec<usize> = input.tokens.iter().map(|&t| t as usize).collect();
        let mut x0 = tape.embedding(vars[0], &ids)?;
        if let Some(pos) = input.abacus_ids.filter(|_| self.config.position.abacus) {
            let a = tape.embedding(vars[1], pos)?;
            x0 = tape.add(x0, a)?;
        }
        let rope_pos: Vec<usize> = (0..batch * seq).map(|r| r % seq).collect();
        let layers = self.layer_indices();
        let biases = layers
            .iter()
            .map(|l| match l.fire {
                Some(f) => self.fire_graph(tape, vars, f, seq).map(Some),
                None => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        let alpha = deepnorm_alpha(self.variant.effective_depth());
        let inject = self.variant.kind != VariantKind::Standard;
        let head = vars[vars.len() - 1];

        let mut x = x0;
        let mut out = Vec::new();
        for t in 0..recurrences {
            for (l, idx) in layers.iter().enumerate() {
                if inject && (t, l) != (0, 0) {
                    if l == 0 || (self.variant.injection_inside_block && !opts.zero_inner_injection) {
                        x = tape.add(x, x0)?;
                    } else if self.variant.injection_inside_block {
                        let zero = tape.scale(x0, 0.0);
                        x = tape.add(x, zero)?;
                    }
                }
                x = self.layer_graph(tape, vars, idx, x, biases[l], &rope_pos, batch, seq, alpha)?;
            }
            if opts.all_iterations || t + 1 == recurrences {
                out.push(tape.matmul(x, head)?);
            }
        }
        Ok(out)
    }

    fn fire_graph<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], f: [usize; 7], seq: usize) -> Result<Var> {
        let c = tape.softplus(vars[f[5]]);
        let l = tape.softplus(vars[f[6]]);
        let u = tape.fire_input(c, l, seq)?;
        let h1 = tape.matmul(u, vars[f[0]])?;
        let h1 = tape.add_row(h1, vars[f[1]])?;
        let h1 = tape.gelu(h1);
        let h2 = tape.matmul(h1, vars[f[2]])?;
        let h2 = tape.add_row(h2, vars[f[3]])?;
        let h2 = tape.gelu(h2);
        let o = tape.matmul(h2, vars[f[4]])?;
        Ok(tape.fire_scatter(o, seq)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_graph<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        idx: &LayerIdx,
        x: Var,
        bias: Option<Var>,
        rope_pos: &[usize],
        batch: usize,
        seq: usize,
        alpha: f64,
    ) -> Result<Var> {
        let heads = self.config.attention_heads;
        let mut q = tape.matmul(x, vars[idx.wq])?;
        let mut k = tape.matmul(x, vars[idx.wk])?;
        let v = tape.matmul(x, vars[idx.wv])?;
        if self.config.position.relative == RelativeScheme::Rope {
            let rot = self.config.rope.span(self.config.head_dim())?;
            q = tape.rope(q, rope_pos, heads, rot, self.config.rope.base)?;
            k = tape.rope(k, rope_pos, heads, rot, self.config.rope.base)?;
        }
        let a = tape.causal_attention(q, k, v, bias, batch, seq, heads)?;
        let o = tape.matmul(a, vars[idx.wo])?;
        let r = tape.axpy(alpha, x, o)?;
        let x = tape.layer_norm(r, vars[idx.ln1.0], vars[idx.ln1.1])?;

        let half = self.config.intermediate_size / 2;
        let u = tape.matmul(x, vars[idx.w_in])?;
        let gate = tape.slice_cols(u, 0, half)?;
        let lin = tape.slice_cols(u, half, half)?;
        let gate = tape.gelu(gate);
        let m = tape.mul(gate, lin)?;
        let f = tape.matmul(m, vars[idx.w_out])?;
        let r = tape.axpy(alpha, x, f)?;
        Ok(tape.layer_norm(r, vars[idx.ln2.0], vars[idx.ln2.1])?)
    }

    fn run(&self, input: &ForwardInput, opts: &ForwardOptions) -> Result<Vec<Tensor<f32>>> {
        let mut tape = Tape::<f32>::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p)).collect();
        let outs = self.graph(&mut tape, &vars, input, opts)?;
        Ok(outs.into_iter().map(|v| tape.tensor(v)).collect())
    }

    /// Logits `[batch * seq, vocab]`.
    pub fn forward(&self, input: &ForwardInput, recurrence_override: Option<usize>) -> Result<Tensor<f32>> {
        let opts = ForwardOptions {
            recurrences: recurrence_override,
            ..Default::default()
        };
        Ok(self.run(input, &opts)?.pop().expect("one output"))
    }

    pub fn forward_with(&self, input: &ForwardInput, opts: &ForwardOptions) -> Result<Vec<Tensor<f32>>> {
        self.run(input, opts)
    }

    /// Logits after each recurrence of a looped model.
    pub fn forward_all_iterations(&self, input: &ForwardInput) -> Result<Vec<Tensor<f32>>> {
        if self.variant.kind != VariantKind::Looped {
            return Err(ModelError::NotLooped);
        }
        self.run(
            input,
            &ForwardOptions {
                all_iterations: true,
                ..Default::default()
            },
        )
    }
}

/// Abacus ids for a right-padded batch, recomputed from the tokens.
pub fn batch_abacus_ids(
    vocab: &Vocabulary,
    tokens: &[TokenId],
    seq: usize,
    beta: usize,
    table_size: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(tokens.len());
    for row in tokens.chunks(seq.max(1)) {
        let runs = vocab.digit_runs(row);
        out.extend(abacus_ids(row.len(), &runs, beta, table_size)?.ids);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
