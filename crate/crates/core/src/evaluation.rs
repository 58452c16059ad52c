//! Greedy decoding, exact-match grids over operand lengths, sorting
//! metrics, per-recurrence traces, and grid output as CSV and PNG.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{
    answer_surface, apply_index_hints, encode_prompt, EncodingError, HintMode, TokenId, Vocabulary, EOS, PAD,
};
use crate::model::{batch_abacus_ids, ForwardInput, ForwardOptions, Model, ModelError, VariantKind};
use crate::task_data::{grid_cell, indexed_rng, oracle_answer, ProblemInstance, Task, TaskError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("operation requires a looped model")]
    NotLooped,
    #[error("prompts in one decoding batch must share a length")]
    RaggedBatch,
    #[error("sorting metrics need sorting instances, got {0}")]
    NotSorting(Task),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Position(#[from] crate::positions::PositionError),
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Anything that scores the next token of a batch of equal-length sequences.
pub trait Decoder: Sync {
    fn vocab(&self) -> &Vocabulary;

    /// Next-token logits for each sequence.
    fn next_logits(&self, seqs: &[Vec<TokenId>]) -> Result<Vec<Vec<f32>>>;
}

/// A trained or freshly initialised model, optionally truncated to fewer
/// recurrences.
pub struct ModelDecoder<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocabulary,
    pub recurrences: Option<usize>,
}

impl<'a> ModelDecoder<'a> {
    pub fn new(model: &'a Model, vocab: &'a Vocabulary) -> Self {
        Self {
            model,
            vocab,
            recurrences: None,
        }
    }
}

impl Decoder for ModelDecoder<'_> {
    fn vocab(&self) -> &Vocabulary {
        self.vocab
    }

    fn next_logits(&self, seqs: &[Vec<TokenId>]) -> Result<Vec<Vec<f32>>> {
        let seq = seqs.first().map_or(0, Vec::len);
        if seqs.iter().any(|s| s.len() != seq) {
            return Err(EvalError::RaggedBatch);
        }
        let tokens: Vec<TokenId> = seqs.concat();
        let ids = if self.model.config.position.abacus {
            Some(batch_abacus_ids(self.vocab, &tokens, seq, 1, self.model.config.abacus.table_size)?)
        } else {
            None
        };
        let input = ForwardInput {
            tokens: &tokens,
            batch: seqs.len(),
            seq,
            abacus_ids: ids.as_deref(),
        };
        let opts = ForwardOptions {
            recurrences: self.recurrences,
            ..Default::default()
        };
        let logits = self.model.forward_with(&input, &opts)?.pop().expect("one output");
        let v = self.model.config.vocab_size;
        Ok((0..seqs.len())
            .map(|b| logits.data()[((b + 1) * seq - 1) * v..(b + 1) * seq * v].to_vec())
            .collect())
    }
}

fn one_hot(vocab_len: usize, id: TokenId) -> Vec<f32> {
    let mut v = vec![0.0; vocab_len];
    v[id as usize] = 1.0;
    v
}

/// Stub that answers every prompt exactly, then emits EOS.
pub struct OracleDecoder {
    pub vocab: Vocabulary,
}

impl OracleDecoder {
    fn continuation(&self, seq: &[TokenId]) -> Result<Vec<TokenId>> {
        let eq = self.vocab.equals_id();
        let split = seq.iter().position(|&t| t == eq).map_or(seq.len(), |p| p + 1);
        let question = self.vocab.decode_text(&seq[..split])?;
        let hinted = seq[..split].iter().any(|&t| self.vocab.is_hint(t)) && !question.contains(':');
        let plain: String = if hinted {
            question.chars().filter(|c| !c.is_alphabetic()).collect()
        } else {
            question
        };
        let answer = match parse_question(&plain) {
            Some((task, ops)) => answer_surface(task, &oracle_answer(task, &ops)?),
            None => String::new(),
        };
        let mut ids = self.vocab.encode_str(&answer)?;
        ids.push(EOS);
        Ok(ids.split_off((seq.len() - split).min(ids.len())))
    }
}

/// Recovers the task and canonical operands from a question's surface form.
pub fn parse_question(q: &str) -> Option<(Task, Vec<String>)> {
    let body = q.strip_suffix('=')?;
    let rev = |s: &str| s.chars().rev().collect::<String>();
    if body.contains(':') {
        let ops = body
            .split(',')
            .map(|e| e.split_once(':').map(|(l, d)| format!("{l}:{}", rev(d))))
            .collect::<Option<Vec<_>>>()?;
        return Some((Task::Sort, ops));
    }
    for (c, task) in [('+', Task::Add), ('-', Task::Sub), ('*', Task::Mul), ('|', Task::BitwiseOr)] {
        if let Some((a, b)) = body.split_once(c) {
            return Some(match task {
                Task::BitwiseOr => (task, vec![a.to_owned(), b.to_owned()]),
                _ => (task, vec![rev(a), rev(b)]),
            });
        }
    }
    None
}

impl Decoder for OracleDecoder {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_logits(&self, seqs: &[Vec<TokenId>]) -> Result<Vec<Vec<f32>>> {
        seqs.iter()
            .map(|s| {
                let next = self.continuation(s)?.first().copied().unwrap_or(EOS);
                Ok(one_hot(self.vocab.len(), next))
            })
            .collect()
    }
}

/// Stub that replays its prompt from the first token onwards.
pub struct CopyDecoder {
    pub vocab: Vocabulary,
    pub prompt_len: usize,
}

impl Decoder for CopyDecoder {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_logits(&self, seqs: &[Vec<TokenId>]) -> Result<Vec<Vec<f32>>> {
        Ok(seqs
            .iter()
            .map(|s| {
                let emitted = s.len() - self.prompt_len;
                let next = s.get(emitted).copied().filter(|_| emitted < self.prompt_len).unwrap_or(EOS);
                one_hot(self.vocab.len(), next)
            })
            .collect())
    }
}

/// Stub emitting pseudo-random tokens determined by the sequence content.
pub struct RandomDecoder {
    pub vocab: Vocabulary,
    pub seed: u64,
}

impl Decoder for RandomDecoder {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_logits(&self, seqs: &[Vec<TokenId>]) -> Result<Vec<Vec<f32>>> {
        Ok(seqs
            .iter()
            .map(|s| {
                let key = s.iter().fold(self.seed, |h, &t| h.wrapping_mul(31).wrapping_add(t as u64));
                let mut rng = indexed_rng(key, s.len() as u64);
                (0..self.vocab.len()).map(|_| rng.gen::<f32>()).collect()
            })
            .collect())
    }
}

/// Generated continuation of one prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// Emitted tokens, excluding EOS.
    pub tokens: Vec<TokenId>,
    /// False when the budget ran out before EOS.
    pub finished: bool,
}

fn argmax(v: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Greedy decoding of equal-length prompts, batched; each prompt stops at
/// EOS or after `max_new` tokens.
pub fn greedy_generate_batch(dec: &dyn Decoder, prompts: &[Vec<TokenId>], max_new: usize) -> Result<Vec<Generation>> {
    let mut seqs: Vec<Vec<TokenId>> = prompts.to_vec();
    let mut out: Vec<Generation> = prompts
        .iter()
        .map(|_| Generation {
            tokens: Vec::new(),
            finished: false,
        })
        .collect();
    let mut active: Vec<usize> = (0..prompts.len()).collect();
    for _ in 0..max_new {
        if active.is_empty() {
            break;
        }
        let batch: Vec<Vec<TokenId>> = active.iter().map(|&i| seqs[i].clone()).collect();
        let logits = dec.next_logits(&batch)?;
        let mut still = Vec::with_capacity(active.len());
        for (&i, l) in active.iter().zip(&logits) {
            let t = argmax(l);
            if t == EOS {
                out[i].finished = true;
            } else {
                out[i].tokens.push(t);
                seqs[i].push(t);
                still.push(i);
            }
        }
        active = still;
    }
    Ok(out)
}

/// Greedy answer for one prompt, as text.
pub fn greedy_generate(dec: &dyn Decoder, prompt: &[TokenId], max_new: usize) -> Result<(String, bool)> {
    let g = greedy_generate_batch(dec, &[prompt.to_vec()], max_new)?.remove(0);
    Ok((dec.vocab().decode_text(&g.tokens)?, g.finished))
}

pub fn exact_match(predicted: &str, gold: &str) -> bool {
    predicted == gold
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD")]
    Ood,
    #[serde(rename = "OOD_100plus")]
    Ood100Plus,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Id => "ID",
            Category::Ood => "OOD",
            Category::Ood100Plus => "OOD_100plus",
        }
    }
}

/// Category of cell `(i, j)`, or `None` for cells outside every category
/// (off-diagonal beyond 100 digits, or 160 digits and up).
pub fn categorize(i: usize, j: usize, train_max: usize) -> Option<Category> {
    if i == 0 || j == 0 {
        None
    } else if i <= train_max && j <= train_max {
        Some(Category::Id)
    } else if i <= 100 && j <= 100 {
        Some(Category::Ood)
    } else if i == j && i < 160 {
        Some(Category::Ood100Plus)
    } else {
        None
    }
}

/// Cells for a square box plus an optional strided diagonal beyond it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub max_i: usize,
    pub max_j: usize,
    /// `(first, last, stride)` for diagonal cells above 100 digits.
    pub diagonal: Option<(usize, usize, usize)>,
}

impl GridSpec {
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<(usize, usize)> = (1..=self.max_i).flat_map(|i| (1..=self.max_j).map(move |j| (i, j))).collect();
        if let Some((first, last, stride)) = self.diagonal {
            v.extend((first..=last).step_by(stride.max(1)).map(|d| (d, d)));
        }
        v.sort_unstable();
        v.dedup();
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub n_correct: usize,
    pub n_total: usize,
    pub category: Category,
}

impl CellResult {
    pub fn accuracy(&self) -> f64 {
        if self.n_total == 0 {
            0.0
        } else {
            self.n_correct as f64 / self.n_total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyGrid {
    pub task: Task,
    pub train_max: usize,
    pub cells: BTreeMap<(usize, usize), CellResult>,
}

/// One decoded example kept for the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeSample {
    pub cell: (usize, usize),
    pub prompt: String,
    pub predicted: String,
    pub gold: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub n_per_cell: usize,
    pub seed: u64,
    pub hints: HintMode,
    /// Decoded examples kept per cell.
    pub keep_samples: usize,
}

impl AccuracyGrid {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.cells.get(&(i, j)).map(CellResult::accuracy)
    }

    /// Mean of member cell accuracies per category.
    pub fn category_means(&self) -> BTreeMap<Category, f64> {
        let mut acc: BTreeMap<Category, (f64, usize)> = BTreeMap::new();
        for c in self.cells.values() {
            let e = acc.entry(c.category).or_default();
            e.0 += c.accuracy();
            e.1 += 1;
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    /// Mean accuracy over the cells selected by `keep`.
    pub fn mean_where(&self, keep: impl Fn(usize, usize) -> bool) -> Option<f64> {
        let v: Vec<f64> = self.cells.iter().filter(|((i, j), _)| keep(*i, *j)).map(|(_, c)| c.accuracy()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "i,j,category,n_correct,n_total,accuracy")?;
        for (&(i, j), c) in &self.cells {
            writeln!(w, "{i},{j},{},{},{},{:.6}", c.category.name(), c.n_correct, c.n_total, c.accuracy())?;
        }
        Ok(())
    }

    /// Heatmap of the square part of the grid: one block per cell, white to
    /// dark blue by accuracy, grey where unevaluated, and a red outline
    /// around the training box. Rows are the first operand length.
    pub fn render_png(&self, path: &Path, block: usize) -> Result<()> {
        let (w, h, pixels) = self.raster(block);
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut enc = png::Encoder::new(file, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| EvalError::Image(e.to_string()))?;
        writer.write_image_data(&pixels).map_err(|e| EvalError::Image(e.to_string()))?;
        Ok(())
    }

    /// `(width, height, rgb bytes)` of the heatmap.
    pub fn raster(&self, block: usize) -> (usize, usize, Vec<u8>) {
        let square: Vec<&(usize, usize)> = self.cells.keys().filter(|(i, j)| *i <= 100 && *j <= 100).collect();
        let rows = square.iter().map(|c| c.0).max().unwrap_or(1);
        let cols = square.iter().map(|c| c.1).max().unwrap_or(1);
        let (w, h) = (cols * block, rows * block);
        let mut px = vec![0u8; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                let (i, j) = (y / block + 1, x / block + 1);
                let rgb = match self.get(i, j) {
                    Some(a) => blue(a),
                    None => [160, 160, 160],
                };
                px[(y * w + x) * 3..][..3].copy_from_slice(&rgb);
            }
        }
        let edge = (self.train_max * block).min(w).min(h);
        if edge > 0 {
            for t in 0..edge {
                for (x, y) in [(t, 0), (t, edge - 1), (0, t), (edge - 1, t)] {
                    px[(y * w + x) * 3..][..3].copy_from_slice(&[220, 20, 20]);
                }
            }
        }
        (w, h, px)
    }
}

/// Linear map from white (0) to dark blue (1).
pub fn blue(a: f64) -> [u8; 3] {
    let a = a.clamp(0.0, 1.0);
    let mix = |lo: f64, hi: f64| (lo + (hi - lo) * a).round() as u8;
    [mix(255.0, 8.0), mix(255.0, 48.0), mix(255.0, 107.0)]
}

fn prompt_tokens(vocab: &Vocabulary, p: &ProblemInstance, hints: HintMode, rng: &mut impl Rng) -> Result<Vec<TokenId>> {
    let prompt = encode_prompt(vocab, p)?;
    Ok(match hints {
        HintMode::None => prompt.tokens,
        mode => {
            // Hint the full sample so the window covers the answer length too.
            let full = crate::encoding::encode(vocab, p)?;
            let hinted = apply_index_hints(vocab, &full, mode, rng)?;
            hinted.prompt().to_vec()
        }
    })
}

/// Decodes `problems` (all with equal-length prompts) and returns per-item
/// correctness with the predictions.
pub fn score_problems(
    dec: &dyn Decoder,
    problems: &[ProblemInstance],
    hints: HintMode,
    seed: u64,
) -> Result<Vec<(bool, String, String)>> {
    let vocab = dec.vocab();
    let mut rng = indexed_rng(seed, 0x4849_4e54);
    let prompts = problems
        .iter()
        .map(|p| prompt_tokens(vocab, p, hints, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let golds: Vec<String> = problems.iter().map(|p| answer_surface(p.task, &p.answer)).collect();
    let max_gold = golds.iter().map(|g| g.chars().count()).max().unwrap_or(0);
    let budget = if hints == HintMode::None { max_gold + 2 } else { 2 * max_gold + 2 };
    // Equal prompt lengths decode as one batch; otherwise group by length.
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in prompts.iter().enumerate() {
        by_len.entry(p.len()).or_default().push(i);
    }
    let mut out = vec![(false, String::new(), String::new()); problems.len()];
    for idx in by_len.values() {
        let group: Vec<Vec<TokenId>> = idx.iter().map(|&i| prompts[i].clone()).collect();
        let gens = greedy_generate_batch(dec, &group, budget)?;
        for (&i, g) in idx.iter().zip(gens) {
            let kept: Vec<TokenId> = g.tokens.iter().copied().filter(|&t| !vocab.is_hint(t) || problems[i].task == Task::Sort).collect();
            let predicted = vocab.decode_text(&kept)?;
            let gold_len = golds[i].chars().count();
            let within = g.tokens.len() <= if hints == HintMode::None { gold_len + 2 } else { 2 * gold_len + 2 };
            let ok = g.finished && within && exact_match(&predicted, &golds[i]);
            out[i] = (ok, predicted, golds[i].clone());
        }
    }
    Ok(out)
}

/// Exact-match accuracy on fresh samples for every cell of `spec`.
pub fn accuracy_grid(
    dec: &dyn Decoder,
    task: Task,
    spec: &GridSpec,
    train_max: usize,
    opts: &EvalOptions,
) -> Result<(AccuracyGrid, Vec<DecodeSample>)> {
    let cells: Vec<(usize, usize, Category)> = spec
        .cells()
        .into_iter()
        .filter_map(|(i, j)| categorize(i, j, train_max).map(|c| (i, j, c)))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(i, j, category)| {
            let problems = grid_cell(task, i, j, opts.n_per_cell, opts.seed);
            let scored = score_problems(dec, &problems, opts.hints, opts.seed ^ ((i as u64) << 32) ^ j as u64)?;
            let n_correct = scored.iter().filter(|s| s.0).count();
            let samples: Vec<DecodeSample> = problems
                .iter()
                .zip(&scored)
                .take(opts.keep_samples)
                .map(|(p, s)| DecodeSample {
                    cell: (i, j),
                    prompt: crate::encoding::question_surface(p),
                    predicted: s.1.clone(),
                    gold: s.2.clone(),
                })
                .collect();
            Ok((
                (i, j),
                CellResult {
                    n_correct,
                    n_total: problems.len(),
                    category,
                },
                samples,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grid = AccuracyGrid {
        task,
        train_max,
        cells: BTreeMap::new(),
    };
    let mut samples = Vec::new();
    for (cell, r, s) in results {
        grid.cells.insert(cell, r);
        samples.extend(s);
    }
    Ok((grid, samples))
}

/// Arithmetic mean of per-seed cell accuracies.
pub fn mean_over_seeds(grids: &[AccuracyGrid]) -> BTreeMap<(usize, usize), f64> {
    let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for g in grids {
        for (&cell, r) in &g.cells {
            let e = acc.entry(cell).or_default();
            e.0 += r.accuracy();
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// `(exact match rate, minimum-element rate)` over sorting instances.
pub fn sorting_metrics(dec: &dyn Decoder, dataset: &[ProblemInstance]) -> Result<(f64, f64)> {
    if let Some(p) = dataset.iter().find(|p| p.task != Task::Sort) {
        return Err(EvalError::NotSorting(p.task));
    }
    if dataset.is_empty() {
        return Ok((0.0, 0.0));
    }
    let scored = score_problems(dec, dataset, HintMode::None, 0)?;
    let mut exact = 0;
    let mut min_ok = 0;
    for (ok, predicted, gold) in &scored {
        exact += *ok as usize;
        let first = |s: &str| s.split(',').next().map(str::to_owned);
        if !predicted.is_empty() && first(predicted) == first(gold) {
            min_ok += 1;
        }
    }
    let n = dataset.len() as f64;
    Ok((exact as f64 / n, min_ok as f64 / n))
}

/// Greedy answer decoded from each recurrence count `1..=r` of a looped
/// model, free-running every iteration independently.
pub fn iteration_trace(model: &Model, vocab: &Vocabulary, prompt: &[TokenId], max_new: usize) -> Result<Vec<String>> {
    if model.variant.kind != VariantKind::Looped {
        return Err(EvalError::NotLooped);
    }
    (1..=model.variant.recurrences)
        .map(|r| {
            let dec = ModelDecoder {
                model,
                vocab,
                recurrences: Some(r),
            };
            Ok(greedy_generate(&dec, prompt, max_new)?.0)
        })
        .collect()
}

/// Exact-match rate per recurrence count over a set of problems.
pub fn iteration_accuracies(model: &Model, vocab: &Vocabulary, problems: &[ProblemInstance]) -> Result<Vec<f64>> {
    if model.variant.kind != VariantKind::Looped {
        return Err(EvalError::NotLooped);
    }
    (1..=model.variant.recurrences)
        .map(|r| {
            let dec = ModelDecoder {
                model,
                vocab,
                recurrences: Some(r),
            };
            let scored = score_problems(&dec, problems, HintMode::None, 0)?;
            Ok(scored.iter().filter(|s| s.0).count() as f64 / problems.len().max(1) as f64)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub train_max: usize,
    pub category_means: BTreeMap<String, f64>,
    pub grid: Vec<(usize, usize, CellResult)>,
    pub samples: Vec<DecodeSample>,
    pub iteration_accuracies: Option<Vec<f64>>,
}

impl EvalReport {
    pub fn new(grid: &AccuracyGrid, samples: Vec<DecodeSample>, iteration_accuracies: Option<Vec<f64>>) -> Self {
        Self {
            task: grid.task,
            train_max: grid.train_max,
            category_means: grid.category_means().into_iter().map(|(k, v)| (k.name().to_owned(), v)).collect(),
            grid: grid.cells.iter().map(|(&(i, j), &c)| (i, j, c)).collect(),
            samples,
            iteration_accuracies,
        }
    }
}

/// Strips trailing PAD ids, as left by right-padded batches.
pub fn trim_padding(tokens: &[TokenId]) -> &[TokenId] {
    let end = tokens.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1);
    &tokens[..end]
}
