//! Problem generation for addition, subtraction, multiplication, the
//! bitwise-OR alignment probe, and array sorting.
//!
//! Numbers are stored canonically, most significant digit first and without
//! leading zeros; reversal happens in [`crate::encoding`]. Every generator is
//! a pure function of `(spec, seed, index)`, so a stream can be sharded by
//! index range and reproduced exactly.

use std::cmp::Ordering;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("task {0} has no single-operation oracle")]
    Unsupported(Task),
    #[error("malformed operand {0:?}")]
    Malformed(String),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TaskError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Add,
    Sub,
    AddSubMix,
    Mul,
    BitwiseOr,
    Sort,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Add => "add",
            Task::Sub => "sub",
            Task::AddSubMix => "add_sub_mix",
            Task::Mul => "mul",
            Task::BitwiseOr => "bitwise_or",
            Task::Sort => "sort",
        }
    }

    /// Operator symbol placed between the two operands.
    pub fn operator(self) -> Option<char> {
        match self {
            Task::Add => Some('+'),
            Task::Sub => Some('-'),
            Task::Mul => Some('*'),
            Task::BitwiseOr => Some('|'),
            Task::AddSubMix | Task::Sort => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Task::Add,
            "sub" => Task::Sub,
            "add_sub_mix" | "mix" => Task::AddSubMix,
            "mul" => Task::Mul,
            "bitwise_or" | "or" => Task::BitwiseOr,
            "sort" => Task::Sort,
            other => return Err(TaskError::InvalidSpec(format!("unknown task {other:?}"))),
        })
    }
}

/// One sample. For sorting, each operand is `label:digits` and the answer is
/// the comma-separated label order; for bitwise OR, operands are bit vectors
/// written left-aligned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProblemInstance {
    pub task: Task,
    pub operands: Vec<String>,
    pub answer: String,
    pub lengths: Vec<usize>,
}

impl ProblemInstance {
    /// Builds an arithmetic or OR instance with its oracle answer.
    pub fn binary(task: Task, a: &str, b: &str) -> Result<Self> {
        let answer = oracle_answer(task, &[a.to_owned(), b.to_owned()])?;
        Ok(Self {
            task,
            operands: vec![a.to_owned(), b.to_owned()],
            answer,
            lengths: vec![a.len(), b.len()],
        })
    }

    /// Recomputes the answer from the operands.
    pub fn verify(&self) -> Result<bool> {
        Ok(oracle_answer(self.task, &self.operands)? == self.answer)
    }
}

/// Typed view of a sorting sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SortInstance {
    pub entries: Vec<(String, String)>,
    pub answer: Vec<String>,
}

impl SortInstance {
    pub fn new(entries: Vec<(String, String)>) -> Self {
        let answer = sort_labels(&entries);
        Self { entries, answer }
    }

    pub fn to_problem(&self) -> ProblemInstance {
        ProblemInstance {
            task: Task::Sort,
            operands: self.entries.iter().map(|(l, d)| format!("{l}:{d}")).collect(),
            answer: self.answer.join(","),
            lengths: vec![
                self.entries.len(),
                self.entries.iter().map(|(_, d)| d.len()).max().unwrap_or(0),
            ],
        }
    }

    pub fn from_problem(p: &ProblemInstance) -> Result<Self> {
        if p.task != Task::Sort {
            return Err(TaskError::Unsupported(p.task));
        }
        let entries = parse_sort_entries(&p.operands)?;
        Ok(Self {
            entries,
            answer: p.answer.split(',').map(str::to_owned).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Length pairs drawn uniformly with replacement, then operands uniform
    /// over numbers of those lengths.
    Stratified,
    /// Every instance of the task up to the size limit (bitwise OR only).
    Exhaustive,
    /// `samples` instances for every length pair in the box.
    Grid,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub task: Task,
    pub max_first: usize,
    pub max_second: usize,
    pub samples: usize,
    pub seed: u64,
    pub mode: SamplingMode,
}

impl DatasetSpec {
    /// Square training set of operands up to `size` digits.
    pub fn square(task: Task, size: usize, samples: usize, seed: u64) -> Self {
        Self {
            task,
            max_first: size,
            max_second: size,
            samples,
            seed,
            mode: SamplingMode::Stratified,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_first == 0 {
            return Err(TaskError::InvalidSpec("max_first must be at least 1".into()));
        }
        if self.max_second == 0 {
            return Err(TaskError::InvalidSpec("max_second must be at least 1".into()));
        }
        if self.samples == 0 && self.mode != SamplingMode::Exhaustive {
            return Err(TaskError::InvalidSpec("samples must be at least 1".into()));
        }
        if self.mode == SamplingMode::Exhaustive && self.task != Task::BitwiseOr {
            return Err(TaskError::InvalidSpec(format!(
                "exhaustive sampling is only defined for bitwise_or, not {}",
                self.task
            )));
        }
        Ok(())
    }

    /// Materialises the dataset described by this spec.
    pub fn generate(&self) -> Result<Vec<ProblemInstance>> {
        self.validate()?;
        match (self.task, self.mode) {
            (Task::BitwiseOr, SamplingMode::Exhaustive) => {
                Ok(gen_bitwise_or(self.max_first.max(self.max_second)))
            }
            (Task::Sort, _) => Ok(gen_sorting(self.max_first, self.max_second, self.samples, self.seed)
                .map(|s| s.to_problem())
                .collect()),
            _ => Ok(gen_arithmetic(self)?.collect()),
        }
    }
}

/// Independent random stream for element `index` of a seeded sequence.
pub fn indexed_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Uniform number with exactly `len` digits (`0..=9` when `len == 1`).
pub fn random_number(rng: &mut impl Rng, len: usize) -> String {
    let mut s = String::with_capacity(len);
    for pos in 0..len {
        let lo = if pos == 0 && len > 1 { 1 } else { 0 };
        s.push(char::from(b'0' + rng.gen_range(lo..10u8)));
    }
    s
}

fn random_bits(rng: &mut impl Rng, len: usize) -> String {
    (0..len).map(|_| if rng.gen_bool(0.5) { '1' } else { '0' }).collect()
}

/// Concrete operation for element `index` of a dataset of `task`.
fn concrete_task(task: Task, index: usize) -> Task {
    match task {
        Task::AddSubMix if index % 2 == 0 => Task::Add,
        Task::AddSubMix => Task::Sub,
        t => t,
    }
}

/// Instance with operands of exactly `(a, b)` digits.
pub fn instance_with_lengths(task: Task, a: usize, b: usize, rng: &mut impl Rng) -> Result<ProblemInstance> {
    if task == Task::BitwiseOr {
        let x = random_bits(rng, a);
        let y = random_bits(rng, b);
        return ProblemInstance::binary(task, &x, &y);
    }
    let x = random_number(rng, a);
    let y = random_number(rng, b);
    ProblemInstance::binary(task, &x, &y)
}

/// Arithmetic stream for add, sub, the add/sub mix, or mul.
pub fn gen_arithmetic(spec: &DatasetSpec) -> Result<impl Iterator<Item = ProblemInstance> + '_> {
    spec.validate()?;
    if !matches!(spec.task, Task::Add | Task::Sub | Task::AddSubMix | Task::Mul) {
        return Err(TaskError::Unsupported(spec.task));
    }
    let cells = spec.max_first * spec.max_second;
    let total = match spec.mode {
        SamplingMode::Grid => cells * spec.samples,
        _ => spec.samples,
    };
    Ok((0..total).map(move |index| {
        let mut rng = indexed_rng(spec.seed, index as u64);
        let (a, b) = match spec.mode {
            SamplingMode::Grid => {
                let cell = index / spec.samples;
                (cell / spec.max_second + 1, cell % spec.max_second + 1)
            }
            _ => (
                rng.gen_range(1..=spec.max_first),
                rng.gen_range(1..=spec.max_second),
            ),
        };
        let task = concrete_task(spec.task, index);
        instance_with_lengths(task, a, b, &mut rng).expect("generated operands are canonical")
    }))
}

/// `n` fresh samples for one `(i, j)` evaluation cell.
pub fn grid_cell(task: Task, i: usize, j: usize, n: usize, seed: u64) -> Vec<ProblemInstance> {
    // Cells get disjoint streams; the high bits keep them apart from the
    // per-index streams used for training sets.
    let cell_seed = seed ^ ((i as u64) << 40) ^ ((j as u64) << 20) ^ 0x5eed_0000_0000_0000;
    (0..n)
        .map(|index| {
            let mut rng = indexed_rng(cell_seed, index as u64);
            let t = concrete_task(task, index);
            if t == Task::Sort {
                random_sort_instance(&mut rng, i, j, true).to_problem()
            } else {
                instance_with_lengths(t, i, j, &mut rng).expect("generated operands are canonical")
            }
        })
        .collect()
}

/// Every OR pair up to `max_len`: the longer vector is all zeros, the shorter
/// holds a single one; equal lengths put the one in either vector.
pub fn gen_bitwise_or(max_len: usize) -> Vec<ProblemInstance> {
    let mut out = Vec::new();
    for short in 1..=max_len {
        for long in short..=max_len {
            for pos in 0..short {
                let mut one: Vec<u8> = vec![b'0'; short];
                one[pos] = b'1';
                let one = String::from_utf8(one).expect("ascii");
                let zeros = "0".repeat(long);
                out.push(ProblemInstance::binary(Task::BitwiseOr, &one, &zeros).expect("bit vectors"));
                if short == long {
                    out.push(ProblemInstance::binary(Task::BitwiseOr, &zeros, &one).expect("bit vectors"));
                }
            }
        }
    }
    out
}

/// Label for position `i` in the extended alphabet `a..z, aa, ab, ...`.
pub fn label(i: usize) -> String {
    if i < 26 {
        return char::from(b'a' + i as u8).to_string();
    }
    let j = i - 26;
    let first = char::from(b'a' + (j / 26 % 26) as u8);
    let second = char::from(b'a' + (j % 26) as u8);
    format!("{first}{second}")
}

fn random_sort_instance(rng: &mut impl Rng, count: usize, max_digits: usize, exact_digits: bool) -> SortInstance {
    let start = if count <= 26 { rng.gen_range(0..=26 - count) } else { 0 };
    let entries = (0..count)
        .map(|k| {
            let len = if exact_digits && k == 0 {
                max_digits
            } else {
                rng.gen_range(1..=max_digits)
            };
            (label(start + k), random_number(rng, len))
        })
        .collect();
    SortInstance::new(entries)
}

/// Sorting stream: grid square `(a, b)` yields `a` numbers of at most `b`
/// digits; squares of `[1, n] x [1, m]` are cycled until `count` is reached.
pub fn gen_sorting(
    max_array_len: usize,
    max_digits: usize,
    count: usize,
    seed: u64,
) -> impl Iterator<Item = SortInstance> {
    let squares = max_array_len * max_digits;
    (0..count).map(move |index| {
        let square = index % squares.max(1);
        let (a, b) = (square / max_digits + 1, square % max_digits + 1);
        let mut rng = indexed_rng(seed, index as u64);
        random_sort_instance(&mut rng, a, b, false)
    })
}

fn sort_labels(entries: &[(String, String)]) -> Vec<String> {
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&x, &y| compare_numbers(&entries[x].1, &entries[y].1));
    order.into_iter().map(|i| entries[i].0.clone()).collect()
}

fn parse_sort_entries(operands: &[String]) -> Result<Vec<(String, String)>> {
    operands
        .iter()
        .map(|op| {
            let (l, d) = op.split_once(':').ok_or_else(|| TaskError::Malformed(op.clone()))?;
            check_number(d)?;
            Ok((l.to_owned(), d.to_owned()))
        })
        .collect()
}

fn check_number(s: &str) -> Result<()> {
    let ok = !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) && (s == "0" || !s.starts_with('0'));
    if ok {
        Ok(())
    } else {
        Err(TaskError::Malformed(s.to_owned()))
    }
}

fn check_bits(s: &str) -> Result<()> {
    if !s.is_empty() && s.bytes().all(|b| b == b'0' || b == b'1') {
        Ok(())
    } else {
        Err(TaskError::Malformed(s.to_owned()))
    }
}

/// Exact answer for a single-operation task.
pub fn oracle_answer(task: Task, operands: &[String]) -> Result<String> {
    let pair = || -> Result<(&str, &str)> {
        match operands {
            [a, b] => Ok((a.as_str(), b.as_str())),
            _ => Err(TaskError::Malformed(operands.join(" "))),
        }
    };
    match task {
        Task::Add | Task::Sub | Task::Mul => {
            let (a, b) = pair()?;
            check_number(a)?;
            check_number(b)?;
            Ok(match task {
                Task::Add => add_digits(a, b),
                Task::Sub => sub_digits(a, b),
                _ => mul_digits(a, b),
            })
        }
        Task::BitwiseOr => {
            let (a, b) = pair()?;
            check_bits(a)?;
            check_bits(b)?;
            Ok(or_bits(a, b))
        }
        Task::Sort => Ok(sort_labels(&parse_sort_entries(operands)?).join(",")),
        Task::AddSubMix => Err(TaskError::Unsupported(task)),
    }
}

fn digits_lsb(s: &str) -> Vec<u8> {
    s.bytes().rev().map(|b| b - b'0').collect()
}

fn from_lsb(mut d: Vec<u8>) -> String {
    while d.len() > 1 && *d.last().unwrap() == 0 {
        d.pop();
    }
    d.iter().rev().map(|&x| char::from(b'0' + x)).collect()
}

pub fn compare_numbers(a: &str, b: &str) -> Ordering {
    a.len().cmp(&b.len()).then_with(|| a.cmp(b))
}

pub fn add_digits(a: &str, b: &str) -> String {
    let (x, y) = (digits_lsb(a), digits_lsb(b));
    let mut out = Vec::with_capacity(x.len().max(y.len()) + 1);
    let mut carry = 0;
    for i in 0..x.len().max(y.len()) {
        let s = x.get(i).copied().unwrap_or(0) + y.get(i).copied().unwrap_or(0) + carry;
        out.push(s % 10);
        carry = s / 10;
    }
    if carry > 0 {
        out.push(carry);
    }
    from_lsb(out)
}

/// `a - b`, prefixed with `-` when negative.
pub fn sub_digits(a: &str, b: &str) -> String {
    let (big, small, negative) = match compare_numbers(a, b) {
        Ordering::Less => (b, a, true),
        _ => (a, b, false),
    };
    let (x, y) = (digits_lsb(big), digits_lsb(small));
    let mut out = Vec::with_capacity(x.len());
    let mut borrow = 0i8;
    for i in 0..x.len() {
        let mut d = x[i] as i8 - y.get(i).copied().unwrap_or(0) as i8 - borrow;
        borrow = if d < 0 {
            d += 10;
            1
        } else {
            0
        };
        out.push(d as u8);
    }
    let mag = from_lsb(out);
    if negative {
        format!("-{mag}")
    } else {
        mag
    }
}

pub fn mul_digits(a: &str, b: &str) -> String {
    let (x, y) = (digits_lsb(a), digits_lsb(b));
    let mut acc = vec![0u32; x.len() + y.len()];
    for (i, &dx) in x.iter().enumerate() {
        for (j, &dy) in y.iter().enumerate() {
            acc[i + j] += dx as u32 * dy as u32;
        }
    }
    let mut carry = 0;
    let mut out = Vec::with_capacity(acc.len());
    for v in acc {
        let s = v + carry;
        out.push((s % 10) as u8);
        carry = s / 10;
    }
    while carry > 0 {
        out.push((carry % 10) as u8);
        carry /= 10;
    }
    from_lsb(out)
}

/// Left-aligned positional OR; the result has the longer operand's length.
pub fn or_bits(a: &str, b: &str) -> String {
    let (a, b) = (a.as_bytes(), b.as_bytes());
    (0..a.len().max(b.len()))
        .map(|i| {
            let bit = a.get(i) == Some(&b'1') || b.get(i) == Some(&b'1');
            if bit {
                '1'
            } else {
                '0'
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Record {
    task: Task,
    operands: Vec<String>,
    answer: String,
    meta: RecordMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordMeta {
    lengths: Vec<usize>,
}

/// Writes one JSON object per line.
pub fn write_jsonl(mut w: impl Write, instances: &[ProblemInstance]) -> Result<()> {
    for p in instances {
        let rec = Record {
            task: p.task,
            operands: p.operands.clone(),
            answer: p.answer.clone(),
            meta: RecordMeta {
                lengths: p.lengths.clone(),
            },
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| TaskError::Json { line: 0, source: e })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> Result<Vec<ProblemInstance>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| TaskError::Json { line: i + 1, source: e })?;
        out.push(ProblemInstance {
            task: rec.task,
            operands: rec.operands,
            answer: rec.answer,
            lengths: rec.meta.lengths,
        });
    }
    Ok(out)
}
