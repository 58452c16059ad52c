//! Character-level tokenization with reversed numbers and answer-only loss
//! masks, plus the index-hint and random-padding formatting variants.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task_data::{ProblemInstance, Task};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
const PAD_NAME: &str = "<pad>";
const EOS_NAME: &str = "<eos>";
const OPERATORS: [char; 7] = ['+', '-', '*', '|', '=', ',', ':'];
/// Number of distinct index-hint symbols.
pub const HINT_COUNT: usize = 102;

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error("symbol {0:?} is not in the vocabulary")]
    UnknownSymbol(String),
    #[error("token id {0} is not in the vocabulary")]
    UnknownToken(TokenId),
    #[error("index hints need a window of at least one symbol")]
    EmptyHintWindow,
    #[error("a number of {len} digits exceeds the {available} available index hints")]
    HintOverflow { len: usize, available: usize },
    #[error("padding rate {0} is outside [0, 1]")]
    Rate(f64),
    #[error("malformed vocabulary: {0}")]
    Vocabulary(String),
    #[error("cannot collate an empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EncodingError>;

/// The ordered hint alphabet: `a-z`, `A-Z`, then Cyrillic letters.
pub fn hint_alphabet() -> Vec<char> {
    let mut v: Vec<char> = ('a'..='z').chain('A'..='Z').collect();
    v.extend('\u{0430}'..='\u{044F}');
    v.extend('\u{0410}'..='\u{0421}');
    debug_assert_eq!(v.len(), HINT_COUNT);
    v
}

/// Bijective symbol/id table. Ids 0 and 1 are always PAD and EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<char, TokenId>,
    hints: Vec<TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    /// PAD, EOS, digits, operators, then the hint alphabet (which also
    /// supplies the sorting labels).
    pub fn standard() -> Self {
        let mut symbols = vec![PAD_NAME.to_owned(), EOS_NAME.to_owned()];
        symbols.extend(('0'..='9').map(String::from));
        symbols.extend(OPERATORS.iter().map(|c| c.to_string()));
        symbols.extend(hint_alphabet().into_iter().map(String::from));
        Self::from_symbols(symbols).expect("standard vocabulary is well formed")
    }

    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() < 2 || symbols[0] != PAD_NAME || symbols[1] != EOS_NAME {
            return Err(EncodingError::Vocabulary(format!(
                "first two symbols must be {PAD_NAME} and {EOS_NAME}"
            )));
        }
        let mut index = HashMap::new();
        for (id, s) in symbols.iter().enumerate().skip(2) {
            let mut chars = s.chars();
            let (Some(c), None) = (chars.next(), chars.next()) else {
                return Err(EncodingError::Vocabulary(format!("symbol {s:?} is not one character")));
            };
            if index.insert(c, id as TokenId).is_some() {
                return Err(EncodingError::Vocabulary(format!("duplicate symbol {s:?}")));
            }
        }
        let hints = hint_alphabet().iter().filter_map(|c| index.get(c).copied()).collect();
        Ok(Self { symbols, index, hints })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, c: char) -> Result<TokenId> {
        self.index.get(&c).copied().ok_or_else(|| EncodingError::UnknownSymbol(c.to_string()))
    }

    pub fn symbol(&self, id: TokenId) -> Result<&str> {
        self.symbols
            .get(id as usize)
            .map(String::as_str)
            .ok_or(EncodingError::UnknownToken(id))
    }

    pub fn is_digit(&self, id: TokenId) -> bool {
        (2..12).contains(&id) && self.symbols[id as usize].as_bytes()[0].is_ascii_digit()
    }

    pub fn equals_id(&self) -> TokenId {
        self.index[&'=']
    }

    /// Ids of the hint alphabet, in order.
    pub fn hint_ids(&self) -> &[TokenId] {
        &self.hints
    }

    pub fn is_hint(&self, id: TokenId) -> bool {
        self.hints.contains(&id)
    }

    /// One symbol per line.
    pub fn write(&self, mut w: impl Write) -> Result<()> {
        for s in &self.symbols {
            writeln!(w, "{s}")?;
        }
        Ok(())
    }

    pub fn read(r: impl BufRead) -> Result<Self> {
        let symbols = r.lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_symbols(symbols)
    }

    pub fn encode_str(&self, s: &str) -> Result<Vec<TokenId>> {
        s.chars().map(|c| self.id(c)).collect()
    }

    /// Renders ids; PAD and EOS appear as `<pad>` and `<eos>`.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        ids.iter().map(|&i| self.symbol(i)).collect()
    }

    /// Renders ids, dropping PAD and EOS.
    pub fn decode_text(&self, ids: &[TokenId]) -> Result<String> {
        ids.iter()
            .filter(|&&i| i != PAD && i != EOS)
            .map(|&i| self.symbol(i))
            .collect()
    }

    /// Maximal spans `[start, end)` of consecutive digit tokens.
    pub fn digit_runs(&self, ids: &[TokenId]) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let mut start = None;
        for (i, &id) in ids.iter().enumerate() {
            match (self.is_digit(id), start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    runs.push((s, i));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push((s, ids.len()));
        }
        runs
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HintMode {
    #[default]
    None,
    Cyclic,
    Noncyclic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FormatFlags {
    pub index_hints: HintMode,
    pub random_padding: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSample {
    pub tokens: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub digit_runs: Vec<(usize, usize)>,
    pub flags: FormatFlags,
    /// Index of the first token after `=`.
    pub answer_start: usize,
}

impl EncodedSample {
    /// Question tokens up to and including `=`.
    pub fn prompt(&self) -> &[TokenId] {
        &self.tokens[..self.answer_start]
    }

    /// Answer tokens without the trailing EOS.
    pub fn answer(&self) -> &[TokenId] {
        let end = if self.tokens.last() == Some(&EOS) {
            self.tokens.len() - 1
        } else {
            self.tokens.len()
        };
        &self.tokens[self.answer_start..end]
    }
}

impl fmt::Display for EncodedSample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.tokens)
    }
}

fn reversed(s: &str) -> String {
    s.chars().rev().collect()
}

/// Answer as written after `=`: reversed digits, a leading sign for negative
/// differences, bit vectors as-is, label lists comma-joined.
pub fn answer_surface(task: Task, answer: &str) -> String {
    match task {
        Task::BitwiseOr | Task::Sort => answer.to_owned(),
        _ => match answer.strip_prefix('-') {
            Some(mag) => format!("-{}", reversed(mag)),
            None => reversed(answer),
        },
    }
}

/// Inverse of [`answer_surface`] for numeric tasks.
pub fn canonical_answer(task: Task, surface: &str) -> String {
    answer_surface(task, surface)
}

/// Question text including the trailing `=`.
pub fn question_surface(p: &ProblemInstance) -> String {
    match p.task {
        Task::Sort => {
            let entries: Vec<String> = p
                .operands
                .iter()
                .map(|op| match op.split_once(':') {
                    Some((l, d)) => format!("{l}:{}", reversed(d)),
                    None => op.clone(),
                })
                .collect();
            format!("{}=", entries.join(","))
        }
        Task::BitwiseOr => format!("{}|{}=", p.operands[0], p.operands[1]),
        task => {
            let op = task.operator().unwrap_or('+');
            let parts: Vec<String> = p.operands.iter().map(|o| reversed(o)).collect();
            format!("{}=", parts.join(&op.to_string()))
        }
    }
}

/// Full training text without EOS.
pub fn surface(p: &ProblemInstance) -> String {
    format!("{}{}", question_surface(p), answer_surface(p.task, &p.answer))
}

fn build(vocab: &Vocabulary, tokens: Vec<TokenId>, answer_start: usize, flags: FormatFlags) -> EncodedSample {
    let loss_mask = (0..tokens.len()).map(|i| i >= answer_start).collect();
    let digit_runs = vocab.digit_runs(&tokens);
    EncodedSample {
        tokens,
        loss_mask,
        digit_runs,
        flags,
        answer_start,
    }
}

pub fn encode(vocab: &Vocabulary, p: &ProblemInstance) -> Result<EncodedSample> {
    let question = vocab.encode_str(&question_surface(p))?;
    let answer_start = question.len();
    let mut tokens = question;
    tokens.extend(vocab.encode_str(&answer_surface(p.task, &p.answer))?);
    tokens.push(EOS);
    Ok(build(vocab, tokens, answer_start, FormatFlags::default()))
}

/// Question-only sample for decoding.
pub fn encode_prompt(vocab: &Vocabulary, p: &ProblemInstance) -> Result<EncodedSample> {
    let tokens = vocab.encode_str(&question_surface(p))?;
    let n = tokens.len();
    Ok(build(vocab, tokens, n, FormatFlags::default()))
}

/// `len` consecutive hints starting at `start`; cyclic windows wrap.
pub fn hint_window(vocab: &Vocabulary, start: usize, len: usize, mode: HintMode) -> Result<Vec<TokenId>> {
    let hints = vocab.hint_ids();
    if len == 0 || mode == HintMode::None {
        return Err(EncodingError::EmptyHintWindow);
    }
    if mode == HintMode::Noncyclic && start + len > hints.len() {
        return Err(EncodingError::HintOverflow {
            len,
            available: hints.len().saturating_sub(start),
        });
    }
    Ok((0..len).map(|o| hints[(start + o) % hints.len()]).collect())
}

/// Prefixes every digit with the hint for its significance. All numbers in
/// the sample share one window.
pub fn apply_index_hints(
    vocab: &Vocabulary,
    sample: &EncodedSample,
    mode: HintMode,
    rng: &mut impl Rng,
) -> Result<EncodedSample> {
    let longest = sample.digit_runs.iter().map(|(s, e)| e - s).max().unwrap_or(0);
    let n = vocab.hint_ids().len();
    if mode == HintMode::Noncyclic && longest > n {
        return Err(EncodingError::HintOverflow { len: longest, available: n });
    }
    let start = match mode {
        HintMode::None => return Err(EncodingError::EmptyHintWindow),
        HintMode::Cyclic => rng.gen_range(0..n),
        HintMode::Noncyclic => rng.gen_range(0..=n - longest),
    };
    let window = hint_window(vocab, start, longest, mode)?;
    let mut tokens = Vec::with_capacity(sample.tokens.len() * 2);
    let mut answer_start = 0;
    let mut runs = sample.digit_runs.iter().peekable();
    for (i, &t) in sample.tokens.iter().enumerate() {
        if i == sample.answer_start {
            answer_start = tokens.len();
        }
        while runs.peek().is_some_and(|r| r.1 <= i) {
            runs.next();
        }
        if let Some(&&(s, _)) = runs.peek().filter(|r| r.0 <= i) {
            tokens.push(window[i - s]);
        }
        tokens.push(t);
    }
    if sample.answer_start == sample.tokens.len() {
        answer_start = tokens.len();
    }
    let flags = FormatFlags {
        index_hints: mode,
        ..sample.flags
    };
    Ok(build(vocab, tokens, answer_start, flags))
}

/// Inserts PAD before each question token independently with probability
/// `rate`.
pub fn apply_random_padding(
    vocab: &Vocabulary,
    sample: &EncodedSample,
    rate: f64,
    rng: &mut impl Rng,
) -> Result<EncodedSample> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(EncodingError::Rate(rate));
    }
    let question_len = sample.answer_start.saturating_sub(1);
    let mut tokens = Vec::with_capacity(sample.tokens.len() + question_len);
    for (i, &t) in sample.tokens.iter().enumerate() {
        if i < question_len && rng.gen_bool(rate) {
            tokens.push(PAD);
        }
        tokens.push(t);
    }
    let answer_start = sample.answer_start + tokens.len() - sample.tokens.len();
    let flags = FormatFlags {
        random_padding: true,
        ..sample.flags
    };
    Ok(build(vocab, tokens, answer_start, flags))
}

/// Next-token training batch, right-padded with PAD.
///
/// Row `b` holds `tokens[..n-1]` of sample `b` as input and `tokens[1..]` as
/// targets; `weights` is the shifted loss mask.
#[derive(Clone, Debug)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<TokenId>,
    pub targets: Vec<usize>,
    pub weights: Vec<bool>,
    /// Unpadded input length of each row.
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn collate(samples: &[EncodedSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(EncodingError::EmptyBatch);
        }
        let seq = samples.iter().map(|s| s.tokens.len().saturating_sub(1)).max().unwrap_or(0);
        let batch = samples.len();
        let mut inputs = vec![PAD; batch * seq];
        let mut targets = vec![PAD as usize; batch * seq];
        let mut weights = vec![false; batch * seq];
        let mut lengths = Vec::with_capacity(batch);
        for (b, s) in samples.iter().enumerate() {
            let n = s.tokens.len().saturating_sub(1);
            for t in 0..n {
                inputs[b * seq + t] = s.tokens[t];
                targets[b * seq + t] = s.tokens[t + 1] as usize;
                weights[b * seq + t] = s.loss_mask[t + 1];
            }
            lengths.push(n);
        }
        Ok(Self {
            batch,
            seq,
            inputs,
            targets,
            weights,
            lengths,
        })
    }

    /// Input tokens of row `b`, unpadded.
    pub fn row(&self, b: usize) -> &[TokenId] {
        &self.inputs[b * self.seq..b * self.seq + self.lengths[b]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn add(a: &str, b: &str) -> ProblemInstance {
        ProblemInstance::binary(Task::Add, a, b).unwrap()
    }

    #[test]
    fn vocabulary_layout() {
        let v = Vocabulary::standard();
        assert_eq!(v.len(), 2 + 10 + OPERATORS.len() + HINT_COUNT);
        assert_eq!(v.symbol(PAD).unwrap(), "<pad>");
        assert_eq!(v.symbol(EOS).unwrap(), "<eos>");
        assert_eq!(v.id('0').unwrap(), 2);
        assert_eq!(v.hint_ids().len(), HINT_COUNT);
        for (i, s) in v.symbols().iter().enumerate().skip(2) {
            assert_eq!(v.id(s.chars().next().unwrap()).unwrap() as usize, i);
        }
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        assert_eq!(Vocabulary::read(buf.as_slice()).unwrap(), v);
    }

    #[test]
    fn duplicate_symbols_rejected() {
        let syms = ["<pad>", "<eos>", "1", "1"].map(String::from).to_vec();
        assert!(Vocabulary::from_symbols(syms).is_err());
    }

    #[test]
    fn addition_example() {
        let v = Vocabulary::standard();
        let e = encode(&v, &add("28289", "2719583")).unwrap();
        assert_eq!(v.decode(&e.tokens).unwrap(), "98282+3859172=2787472<eos>");
        let masked: Vec<TokenId> = e.tokens.iter().zip(&e.loss_mask).filter(|(_, m)| **m).map(|(t, _)| *t).collect();
        assert_eq!(v.decode(&masked).unwrap(), "2787472<eos>");
        assert_eq!(e.digit_runs, vec![(0, 5), (6, 13), (14, 21)]);
    }

    #[test]
    fn zero_plus_zero() {
        let v = Vocabulary::standard();
        let e = encode(&v, &add("0", "0")).unwrap();
        assert_eq!(v.decode(&e.tokens).unwrap(), "0+0=0<eos>");
        assert_eq!(e.loss_mask, vec![false, false, false, false, true, true]);
    }

    #[test]
    fn other_tasks_render() {
        let v = Vocabulary::standard();
        let s = ProblemInstance::binary(Task::Sub, "5", "17").unwrap();
        assert_eq!(v.decode_text(&encode(&v, &s).unwrap().tokens).unwrap(), "5-71=-21");
        let o = ProblemInstance::binary(Task::BitwiseOr, "001", "00000").unwrap();
        assert_eq!(v.decode_text(&encode(&v, &o).unwrap().tokens).unwrap(), "001|00000=00100");
        let sort = crate::task_data::SortInstance::new(vec![("a".into(), "64957".into()), ("b".into(), "3".into())]);
        let e = encode(&v, &sort.to_problem()).unwrap();
        assert_eq!(v.decode_text(&e.tokens).unwrap(), "a:75946,b:3=b,a");
    }

    #[test]
    fn unknown_symbol_is_named() {
        let v = Vocabulary::standard();
        let mut p = add("1", "2");
        p.operands[0] = "1\u{263A}".into();
        let err = encode(&v, &p).unwrap_err();
        assert!(err.to_string().contains('\u{263A}'), "{err}");
    }

    #[test]
    fn hint_example() {
        let v = Vocabulary::standard();
        let e = encode(&v, &add("65", "16")).unwrap();
        // deterministic window start: a noncyclic window of 2 starting at 0
        let mut rng = FixedStart(0);
        let h = apply_index_hints(&v, &e, HintMode::Noncyclic, &mut rng).unwrap();
        assert_eq!(v.decode_text(&h.tokens).unwrap(), "a5b6+a6b1=a1b8");
        assert_eq!(h.flags.index_hints, HintMode::Noncyclic);
        let answer: String = v.decode_text(h.answer()).unwrap();
        assert_eq!(answer, "a1b8");
        assert!(h.loss_mask.iter().take(h.answer_start).all(|m| !m));
    }

    #[test]
    fn hint_window_errors() {
        let v = Vocabulary::standard();
        assert!(matches!(hint_window(&v, 0, 0, HintMode::Cyclic), Err(EncodingError::EmptyHintWindow)));
        assert!(hint_window(&v, 100, 5, HintMode::Noncyclic).is_err());
        let w = hint_window(&v, 100, 5, HintMode::Cyclic).unwrap();
        assert_eq!(w[2], v.hint_ids()[0]);
        let long = "9".repeat(103);
        let e = encode(&v, &add(&long, "1")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            apply_index_hints(&v, &e, HintMode::Noncyclic, &mut rng),
            Err(EncodingError::HintOverflow { len: 104, .. })
        ));
        assert!(apply_index_hints(&v, &e, HintMode::Cyclic, &mut rng).is_ok());
    }

    #[test]
    fn hints_double_the_digits() {
        let v = Vocabulary::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in crate::task_data::DatasetSpec::square(Task::Add, 12, 200, 4).generate().unwrap() {
            let e = encode(&v, &p).unwrap();
            let h = apply_index_hints(&v, &e, HintMode::Cyclic, &mut rng).unwrap();
            let digits = e.tokens.iter().filter(|&&t| v.is_digit(t)).count();
            assert_eq!(h.tokens.len(), e.tokens.len() + digits);
            // only '+', '=' and EOS go without a hint
            assert_eq!(h.tokens.len(), 2 * e.tokens.len() - 3);
        }
    }

    #[test]
    fn padding_rate_zero_is_identity() {
        let v = Vocabulary::standard();
        let e = encode(&v, &add("123", "45")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = apply_random_padding(&v, &e, 0.0, &mut rng).unwrap();
        assert_eq!(p.tokens, e.tokens);
        assert!(apply_random_padding(&v, &e, 1.5, &mut rng).is_err());
    }

    #[test]
    fn padding_statistics() {
        let v = Vocabulary::standard();
        // 10 question tokens before '='
        let e = encode(&v, &add("12345", "6789")).unwrap();
        assert_eq!(e.answer_start - 1, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut total = 0;
        let draws = 1000;
        for _ in 0..draws {
            let p = apply_random_padding(&v, &e, 0.5, &mut rng).unwrap();
            total += p.tokens.len() - e.tokens.len();
            assert_eq!(p.answer(), e.answer());
            assert_eq!(v.decode_text(&p.tokens).unwrap(), v.decode_text(&e.tokens).unwrap());
            let masked = |s: &EncodedSample| -> Vec<TokenId> {
                s.tokens.iter().zip(&s.loss_mask).filter(|(_, m)| **m).map(|(t, _)| *t).collect()
            };
            assert_eq!(masked(&p), masked(&e));
            assert_eq!(p.tokens[p.answer_start - 1], v.equals_id());
        }
        let mean = total as f64 / draws as f64;
        // binomial(10, 0.5) mean 5, sd of the mean sqrt(2.5 / 1000)
        assert!((mean - 5.0).abs() < 3.0 * (2.5f64 / draws as f64).sqrt() + 1e-9, "{mean}");
    }

    #[test]
    fn collate_pads_right() {
        let v = Vocabulary::standard();
        let a = encode(&v, &add("1", "2")).unwrap();
        let b = encode(&v, &add("123", "45")).unwrap();
        let batch = Batch::collate(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(batch.seq, b.tokens.len() - 1);
        assert_eq!(batch.row(0), &a.tokens[..a.tokens.len() - 1]);
        for t in batch.lengths[0]..batch.seq {
            assert_eq!(batch.inputs[t], PAD);
            assert!(!batch.weights[t]);
        }
        // targets under the weights are exactly the answer and EOS
        let got: Vec<usize> = (0..batch.seq).filter(|&t| batch.weights[batch.seq + t]).map(|t| batch.targets[batch.seq + t]).collect();
        let want: Vec<usize> = b.tokens[b.answer_start..].iter().map(|&t| t as usize).collect();
        assert_eq!(got, want);
        assert!(Batch::collate(&[]).is_err());
    }

    /// Rng stub whose `gen_range` lands on the low end of any range.
    struct FixedStart(u64);

    impl rand::RngCore for FixedStart {
        fn next_u32(&mut self) -> u32 {
            self.0 as u32
        }
        fn next_u64(&mut self) -> u64 {
            self.0
        }
        fn fill_bytes(&mut self, dest: &mut [u8]) {
            dest.fill(0);
        }
        fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
            dest.fill(0);
            Ok(())
        }
    }
}
