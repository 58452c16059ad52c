//! Property checks shared by the `invariants` and `acceptance` targets.
#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use abacus_core::encoding::{encode, Batch, Vocabulary};
use abacus_core::evaluation::{categorize, Category};
use abacus_core::model::{batch_abacus_ids, ArchitectureVariant, ForwardInput, ForwardOptions, Model, ModelConfig};
use abacus_core::positions::{abacus_positions, rope_apply, AbacusConfig, PositionScheme, RelativeScheme, RopeConfig};
use abacus_core::substrate::{softplus_inverse, Tape, Tensor, Var};
use abacus_core::task_data::{instance_with_lengths, indexed_rng, DatasetSpec, ProblemInstance, Task};
use abacus_core::training::{draw_step, masked_loss, progressive_loss, LossReduction, TrainingConfig};

pub type Check = fn(u32) -> Result<(), String>;

pub const ALL: &[(&str, Check)] = &[
    ("masked positions get zero gradient", masking_zero_gradient),
    ("abacus ids align equal significance", abacus_alignment),
    ("one abacus offset per training batch", offset_batch_uniform),
    ("fire diagonals constant below L", fire_diagonal_constancy),
    ("rope scores invariant to a shared shift", rope_shift_invariance),
    ("logits are causal", causality),
    ("grid categories partition the cells", category_partition),
    ("progressive loss lies between its terms", progressive_bound),
];

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn fail(e: impl std::fmt::Display) -> TestCaseError {
    TestCaseError::fail(e.to_string())
}

fn tiny(abacus: bool, relative: RelativeScheme, k: usize) -> ModelConfig {
    let mut c = ModelConfig::sized(8, 16, 2);
    c.position = PositionScheme { abacus, relative };
    c.abacus = AbacusConfig::new(k, 8);
    c
}

fn scheme() -> impl Strategy<Value = (bool, RelativeScheme)> {
    (any::<bool>(), prop_oneof![Just(RelativeScheme::None), Just(RelativeScheme::Fire), Just(RelativeScheme::Rope)])
}

fn add_batch(vocab: &Vocabulary, n: usize, len: usize, seed: u64) -> Batch {
    let samples: Vec<_> = DatasetSpec::square(Task::Add, len, n, seed)
        .generate()
        .unwrap()
        .iter()
        .map(|p| encode(vocab, p).unwrap())
        .collect();
    Batch::collate(&samples).unwrap()
}

fn digits(max: usize) -> impl Strategy<Value = String> {
    (1..=max, any::<u64>()).prop_map(|(len, seed)| abacus_core::task_data::random_number(&mut indexed_rng(seed, 0), len))
}

pub fn masking_zero_gradient(cases: u32) -> Result<(), String> {
    let vocab = Vocabulary::standard();
    run(cases, (any::<u64>(), 1..4usize, 1..5usize, scheme()), |(seed, n, len, (abacus, rel))| {
        let m = Model::new(tiny(abacus, rel, 3), ArchitectureVariant::injected(2), seed).map_err(fail)?;
        let batch = add_batch(&vocab, n, len, seed);
        let ids = batch_abacus_ids(&vocab, &batch.inputs, batch.seq, 1, m.config.abacus.table_size).map_err(fail)?;
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = m.params_as::<f64>().iter().map(|p| tape.param(p)).collect();
        let input = ForwardInput {
            tokens: &batch.inputs,
            batch: batch.batch,
            seq: batch.seq,
            abacus_ids: Some(&ids),
        };
        let logits = m.graph(&mut tape, &vars, &input, &ForwardOptions::default()).map_err(fail)?[0];
        let loss = masked_loss(&mut tape, logits, &batch, LossReduction::TokenMean).map_err(fail)?;
        tape.backward(loss).map_err(fail)?;
        let g = tape.grad(logits).ok_or_else(|| fail("logits have no gradient"))?;
        let v = m.config.vocab_size;
        for (pos, &w) in batch.weights.iter().enumerate() {
            let row = &g[pos * v..(pos + 1) * v];
            if w {
                prop_assert!(row.iter().any(|&x| x != 0.0), "answer position {pos} has no gradient");
            } else {
                prop_assert!(row.iter().all(|&x| x == 0.0), "masked position {pos} has gradient");
            }
        }
        Ok(())
    })
}

pub fn abacus_alignment(cases: u32) -> Result<(), String> {
    let vocab = Vocabulary::standard();
    run(cases, (digits(30), digits(30), 1..=20usize), |(a, b, beta)| {
        let p = ProblemInstance::binary(Task::Add, &a, &b).map_err(fail)?;
        let s = encode(&vocab, &p).map_err(fail)?;
        let longest = s.digit_runs.iter().map(|r| r.1 - r.0).max().unwrap();
        let table = beta + longest;
        let ids = abacus_positions(&s, beta, table).map_err(fail)?.ids;
        prop_assert_eq!(s.digit_runs.len(), 3);
        let (r1, r2, r3) = (s.digit_runs[0], s.digit_runs[1], s.digit_runs[2]);
        // Reversed digits: offset d is 10^d in every run.
        for d in 0..(r1.1 - r1.0).max(r2.1 - r2.0).max(r3.1 - r3.0) {
            for r in [r1, r2, r3] {
                if r.0 + d < r.1 {
                    prop_assert_eq!(ids[r.0 + d], beta + d);
                }
            }
        }
        for (t, &id) in ids.iter().enumerate() {
            let in_run = s.digit_runs.iter().any(|r| (r.0..r.1).contains(&t));
            prop_assert_eq!(in_run, id != 0);
        }
        prop_assert!(abacus_positions(&s, beta, table - 1).is_err());
        Ok(())
    })
}

pub fn offset_batch_uniform(cases: u32) -> Result<(), String> {
    let vocab = Vocabulary::standard();
    let data: Vec<_> = DatasetSpec::square(Task::Add, 6, 200, 5)
        .generate()
        .unwrap()
        .iter()
        .map(|p| encode(&vocab, p).unwrap())
        .collect();
    run(cases, (any::<u64>(), 1..=400u64, 1..=30usize), |(seed, step, k)| {
        let abacus = AbacusConfig::new(k, 7);
        let cfg = TrainingConfig {
            seed,
            steps: 400,
            batch_size: 16,
            ..Default::default()
        };
        let draw = draw_step(&abacus, &data, &cfg, step).map_err(fail)?;
        prop_assert!((1..=k).contains(&draw.beta));
        let ids = batch_abacus_ids(&vocab, &draw.batch.inputs, draw.batch.seq, draw.beta, abacus.table_size).map_err(fail)?;
        for b in 0..draw.batch.batch {
            let row = &draw.batch.inputs[b * draw.batch.seq..(b + 1) * draw.batch.seq];
            for (start, _) in vocab.digit_runs(row) {
                prop_assert_eq!(ids[b * draw.batch.seq + start], draw.beta);
            }
        }
        let again = draw_step(&abacus, &data, &cfg, step).map_err(fail)?;
        prop_assert_eq!(again.beta, draw.beta);
        prop_assert_eq!(again.batch.inputs, draw.batch.inputs);
        Ok(())
    })
}

pub fn fire_diagonal_constancy(cases: u32) -> Result<(), String> {
    run(cases, (any::<u64>(), 0.01..2.0f64, 2.0..24.0f64), |(seed, c, l)| {
        let mut m = Model::new(tiny(false, RelativeScheme::Fire, 3), ArchitectureVariant::standard(1), seed).map_err(fail)?;
        m.param_mut("layers.0.fire.c_raw").unwrap().data_mut()[0] = softplus_inverse(c) as f32;
        m.param_mut("layers.0.fire.l_raw").unwrap().data_mut()[0] = softplus_inverse(l) as f32;
        let fire = m.fire_reference(0).unwrap();
        let seq = 30;
        let bias = fire.bias_matrix(seq).map_err(fail)?;
        let at = |h: usize, i: usize, j: usize| bias[(h * seq + i) * seq + j];
        let last = (fire.l.floor() as usize).min(seq - 1);
        for h in 0..fire.heads {
            for d in 0..=last {
                for i in d..=last {
                    prop_assert!((at(h, i, i - d) - at(h, d, 0)).abs() < 1e-12, "head {h} offset {d} row {i}");
                }
            }
        }
        Ok(())
    })
}

pub fn rope_shift_invariance(cases: u32) -> Result<(), String> {
    let heads = 2;
    let dim = 8;
    run(
        cases,
        (
            proptest::collection::vec(-1.0..1.0f64, 2 * heads * dim),
            proptest::collection::vec(-1.0..1.0f64, 2 * heads * dim),
            0..200usize,
            0..200usize,
            0..500usize,
            prop_oneof![Just(None), Just(Some(4usize))],
        ),
        |(q, k, m, n, shift, rotated)| {
            let cfg = RopeConfig {
                rotated_dims: rotated,
                ..Default::default()
            };
            let q = Tensor::new(vec![2, heads * dim], q).map_err(fail)?;
            let k = Tensor::new(vec![2, heads * dim], k).map_err(fail)?;
            let scores = |pos: [usize; 2]| -> Result<Vec<f64>, TestCaseError> {
                let (rq, rk) = rope_apply(&q, &k, &pos, heads, &cfg).map_err(fail)?;
                let (rq, rk) = (rq.data(), rk.data());
                Ok((0..heads)
                    .map(|h| (0..dim).map(|e| rq[h * dim + e] * rk[heads * dim + h * dim + e]).sum())
                    .collect())
            };
            let base = scores([m, n])?;
            let moved = scores([m + shift, n + shift])?;
            for (a, b) in base.iter().zip(&moved) {
                prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
            Ok(())
        },
    )
}

pub fn causality(cases: u32) -> Result<(), String> {
    let vocab = Vocabulary::standard();
    let looped = prop_oneof![Just(ArchitectureVariant::injected(2)), Just(ArchitectureVariant::looped(1, 3))];
    run(cases, (any::<u64>(), scheme(), looped, 0..9usize, 2..12usize), |(seed, (abacus, rel), variant, t, sub)| {
        let m = Model::new(tiny(abacus, rel, 3), variant, seed).map_err(fail)?;
        let mut rng = indexed_rng(seed, 1);
        let p = instance_with_lengths(Task::Add, 3, 3, &mut rng).map_err(fail)?;
        let base = encode(&vocab, &p).map_err(fail)?.tokens;
        let t = t.min(base.len() - 1);
        let mut changed = base.clone();
        changed[t] = if changed[t] == sub as u32 { 2 } else { sub as u32 };
        let logits = |toks: &[u32]| -> Result<Vec<f64>, TestCaseError> {
            let ids = batch_abacus_ids(&vocab, toks, toks.len(), 1, m.config.abacus.table_size).map_err(fail)?;
            let mut tape = Tape::<f64>::new();
            let vars: Vec<Var> = m.params_as::<f64>().iter().map(|p| tape.constant(p)).collect();
            let input = ForwardInput {
                tokens: toks,
                batch: 1,
                seq: toks.len(),
                abacus_ids: Some(&ids),
            };
            let out = m.graph(&mut tape, &vars, &input, &ForwardOptions::default()).map_err(fail)?;
            Ok(tape.value(out[0]).to_vec())
        };
        let (a, b) = (logits(&base)?, logits(&changed)?);
        let v = m.config.vocab_size;
        prop_assert_eq!(&a[..t * v], &b[..t * v]);
        prop_assert_ne!(&a[t * v..(t + 1) * v], &b[t * v..(t + 1) * v]);
        Ok(())
    })
}

pub fn category_partition(cases: u32) -> Result<(), String> {
    run(cases, (1..=200usize, 1..=200usize, 1..=99usize), |(i, j, tm)| {
        let c = categorize(i, j, tm);
        if i.max(j) <= 100 {
            let id = i <= tm && j <= tm;
            prop_assert_eq!(c, Some(if id { Category::Id } else { Category::Ood }));
        } else {
            prop_assert_eq!(c == Some(Category::Ood100Plus), i == j && i < 160);
            prop_assert!(c.is_none() || c == Some(Category::Ood100Plus));
        }
        Ok(())
    })
}

pub fn progressive_bound(cases: u32) -> Result<(), String> {
    let vocab = Vocabulary::standard();
    run(cases, (any::<u64>(), 0.0..=1.0f64, 1..=4usize, scheme()), |(seed, alpha, r, (abacus, rel))| {
        let m = Model::new(tiny(abacus, rel, 3), ArchitectureVariant::looped(1, r), seed).map_err(fail)?;
        let batch = add_batch(&vocab, 3, 3, seed);
        let ids = batch_abacus_ids(&vocab, &batch.inputs, batch.seq, 1, m.config.abacus.table_size).map_err(fail)?;
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = m.params_as::<f64>().iter().map(|p| tape.param(p)).collect();
        let input = ForwardInput {
            tokens: &batch.inputs,
            batch: batch.batch,
            seq: batch.seq,
            abacus_ids: Some(&ids),
        };
        let mut rng = indexed_rng(seed, 2);
        let pl = progressive_loss(&mut tape, &m, &vars, &input, &batch, LossReduction::TokenMean, alpha, &mut rng)
            .map_err(fail)?;
        let total = tape.value(pl.loss)[0];
        let partial = pl.partial.unwrap_or(pl.full);
        let (lo, hi) = (pl.full.min(partial), pl.full.max(partial));
        prop_assert!(total >= lo - 1e-12 && total <= hi + 1e-12, "{total} outside [{lo}, {hi}]");
        prop_assert!((1..=r).contains(&pl.r_partial));
        let w = alpha / 2.0;
        prop_assert!((total - ((1.0 - w) * pl.full + w * partial)).abs() < 1e-12);
        Ok(())
    })
}
