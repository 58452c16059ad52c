use super::*;
use crate::encoding::{encode, Batch};
use crate::substrate::{grad_check_with, GradCheckOptions};
use crate::task_data::{DatasetSpec, Task};

fn tiny(abacus: bool, relative: RelativeScheme) -> ModelConfig {
    let mut c = ModelConfig::sized(8, 16, 2);
    c.position = PositionScheme { abacus, relative };
    c.abacus = AbacusConfig { k: 3, table_size: 12 };
    c
}

fn sample_batch(n: usize, seed: u64) -> (Batch, Vec<usize>) {
    let vocab = Vocabulary::standard();
    let samples: Vec<_> = DatasetSpec::square(Task::Add, 3, n, seed)
        .generate()
        .unwrap()
        .iter()
        .map(|p| encode(&vocab, p).unwrap())
        .collect();
    let batch = Batch::collate(&samples).unwrap();
    let ids = batch_abacus_ids(&vocab, &batch.inputs, batch.seq, 2, 12).unwrap();
    (batch, ids)
}

fn input<'a>(batch: &'a Batch, ids: &'a [usize]) -> ForwardInput<'a> {
    ForwardInput {
        tokens: &batch.inputs,
        batch: batch.batch,
        seq: batch.seq,
        abacus_ids: Some(ids),
    }
}

#[test]
fn deepnorm_constants_for_depth_sixteen() {
    // (2 * 16)^(1/4) and (8 * 16)^(-1/4)
    assert!((deepnorm_alpha(16) - 2.378_414_230_005_442).abs() < 1e-12);
    assert!((deepnorm_beta(16) - 0.297_301_778_750_680_3).abs() < 1e-12);
    assert_eq!(ArchitectureVariant::looped(8, 2).effective_depth(), 16);
    assert_eq!(deepnorm_alpha(ArchitectureVariant::looped(8, 2).effective_depth()), deepnorm_alpha(16));
}

#[test]
fn looped_one_by_one_matches_single_injected_layer() {
    let cfg = tiny(true, RelativeScheme::None);
    let a = Model::new(cfg.clone(), ArchitectureVariant::looped(1, 1), 5).unwrap();
    let b = Model::new(cfg, ArchitectureVariant::injected(1), 5).unwrap();
    assert_eq!(a.params(), b.params());
    let (batch, ids) = sample_batch(4, 1);
    let la = a.forward(&input(&batch, &ids), None).unwrap();
    let lb = b.forward(&input(&batch, &ids), None).unwrap();
    for (x, y) in la.data().iter().zip(lb.data()) {
        assert!((x - y).abs() <= 1e-6);
    }
}

#[test]
fn logits_have_expected_shape_and_are_finite() {
    for relative in [RelativeScheme::None, RelativeScheme::Fire, RelativeScheme::Rope] {
        let cfg = tiny(true, relative);
        let m = Model::new(cfg.clone(), ArchitectureVariant::looped(2, 3), 1).unwrap();
        let (batch, ids) = sample_batch(3, 2);
        let out = m.forward(&input(&batch, &ids), None).unwrap();
        assert_eq!(out.shape(), &[batch.batch * batch.seq, cfg.vocab_size]);
        assert!(out.data().iter().all(|x| x.is_finite()));
    }
}

#[test]
fn override_and_iterations() {
    let cfg = tiny(true, RelativeScheme::None);
    let (batch, ids) = sample_batch(3, 3);
    let std = Model::new(cfg.clone(), ArchitectureVariant::injected(2), 1).unwrap();
    assert!(matches!(
        std.forward(&input(&batch, &ids), Some(2)),
        Err(ModelError::OverrideOnNonLooped)
    ));
    assert!(matches!(std.forward_all_iterations(&input(&batch, &ids)), Err(ModelError::NotLooped)));

    let looped = Model::new(cfg.clone(), ArchitectureVariant::looped(1, 3), 1).unwrap();
    let all = looped.forward_all_iterations(&input(&batch, &ids)).unwrap();
    assert_eq!(all.len(), 3);
    let last = looped.forward(&input(&batch, &ids), None).unwrap();
    assert_eq!(all[2].data(), last.data());
    let two = looped.forward(&input(&batch, &ids), Some(2)).unwrap();
    assert_eq!(all[1].data(), two.data());

    let single = Model::new(cfg, ArchitectureVariant::looped(1, 1), 1).unwrap();
    let all = single.forward_all_iterations(&input(&batch, &ids)).unwrap();
    assert_eq!(all.len(), 1);
    assert_eq!(all[0], single.forward(&input(&batch, &ids), None).unwrap());
}

#[test]
fn missing_positions_and_bad_config() {
    let cfg = tiny(true, RelativeScheme::None);
    let m = Model::new(cfg.clone(), ArchitectureVariant::standard(1), 1).unwrap();
    let (batch, _) = sample_batch(2, 0);
    let inp = ForwardInput {
        tokens: &batch.inputs,
        batch: batch.batch,
        seq: batch.seq,
        abacus_ids: None,
    };
    assert!(matches!(m.forward(&inp, None), Err(ModelError::MissingPositions)));
    let mut bad = cfg.clone();
    bad.attention_heads = 3;
    assert!(Model::new(bad, ArchitectureVariant::standard(1), 1).is_err());
    let mut bad = cfg.clone();
    bad.embedding_size = 4;
    assert!(Model::new(bad, ArchitectureVariant::standard(1), 1).is_err());
    let v = ArchitectureVariant {
        recurrences: 2,
        ..ArchitectureVariant::standard(1)
    };
    assert!(Model::new(cfg, v, 1).is_err());
}

#[test]
fn param_count_matches_closed_form() {
    let cfg = ModelConfig::desk();
    let (h, i, vsz, t) = (256, 512, cfg.vocab_size, cfg.abacus.table_size);
    for (layers, recur) in [(2, 1), (1, 4), (4, 2)] {
        let per_layer = 4 * h * h + h * i + (i / 2) * h + 4 * h;
        let expected = vsz * h + t * h + layers * per_layer + h * vsz;
        let variant = ArchitectureVariant::looped(layers, recur);
        assert_eq!(param_count(&cfg, &variant), expected);
    }
    let mut fire = cfg.clone();
    fire.position = PositionScheme {
        abacus: false,
        relative: RelativeScheme::Fire,
    };
    let fire_params = 32 + 32 + 32 * 32 + 32 + 32 * 4 + 2;
    let per_layer = 4 * h * h + h * i + (i / 2) * h + 4 * h + fire_params;
    assert_eq!(param_count(&fire, &ArchitectureVariant::injected(2)), 2 * vsz * h + 2 * per_layer);
    let m = Model::new(cfg.clone(), ArchitectureVariant::injected(2), 0).unwrap();
    assert_eq!(m.num_params(), param_count(&cfg, &ArchitectureVariant::injected(2)));
    let total: usize = param_breakdown(&cfg, &ArchitectureVariant::injected(2)).iter().map(|g| g.1).sum();
    assert_eq!(total, m.num_params());
}

#[test]
fn tying_keeps_one_parameter_set() {
    let cfg = tiny(true, RelativeScheme::Fire);
    let one = param_count(&cfg, &ArchitectureVariant::looped(2, 1));
    assert_eq!(param_count(&cfg, &ArchitectureVariant::looped(2, 8)), one);
}

#[test]
fn init_is_deterministic() {
    let cfg = tiny(true, RelativeScheme::Fire);
    let v = ArchitectureVariant::injected(2);
    assert_eq!(Model::new(cfg.clone(), v, 3).unwrap(), Model::new(cfg.clone(), v, 3).unwrap());
    assert_ne!(Model::new(cfg.clone(), v, 3).unwrap(), Model::new(cfg, v, 4).unwrap());
}

#[test]
fn init_logits_in_sanity_band() {
    let mut cfg = ModelConfig::desk();
    cfg.abacus = AbacusConfig { k: 15, table_size: 22 };
    let m = Model::new(cfg.clone(), ArchitectureVariant::injected(2), 0).unwrap();
    let (b, t) = (2, 12);
    let tokens = vec![0; b * t];
    let ids = vec![0; b * t];
    let out = m
        .forward(
            &ForwardInput {
                tokens: &tokens,
                batch: b,
                seq: t,
                abacus_ids: Some(&ids),
            },
            None,
        )
        .unwrap();
    for row in out.data().chunks(cfg.vocab_size) {
        assert!(row.iter().all(|x| x.is_finite()));
        let mean = row.iter().sum::<f32>() / row.len() as f32;
        let sd = (row.iter().map(|x| (x - mean).powi(2)).sum::<f32>() / row.len() as f32).sqrt();
        assert!((0.1..=10.0).contains(&sd), "sd {sd}");
    }
}

#[test]
fn causality_is_exact() {
    let cfg = tiny(true, RelativeScheme::Fire);
    let m = Model::new(cfg, ArchitectureVariant::looped(2, 2), 9).unwrap();
    let vocab = Vocabulary::standard();
    let base = vocab.encode_str("123+45=86").unwrap();
    let run = |toks: &[TokenId]| {
        let ids = batch_abacus_ids(&vocab, toks, toks.len(), 1, 12).unwrap();
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = m.params_as::<f64>().iter().map(|p| tape.constant(p)).collect();
        let inp = ForwardInput {
            tokens: toks,
            batch: 1,
            seq: toks.len(),
            abacus_ids: Some(&ids),
        };
        let out = m.graph(&mut tape, &vars, &inp, &ForwardOptions::default()).unwrap();
        tape.value(out[0]).to_vec()
    };
    let reference = run(&base);
    let v = m.config.vocab_size;
    for t in 0..base.len() {
        let mut changed = base.clone();
        changed[t] = if changed[t] == 5 { 6 } else { 5 };
        let out = run(&changed);
        for pos in 0..base.len() {
            let same = out[pos * v..(pos + 1) * v] == reference[pos * v..(pos + 1) * v];
            if pos < t {
                assert!(same, "perturbing {t} changed position {pos}");
            } else if pos == t {
                assert!(!same);
            }
        }
    }
}

#[test]
fn fire_bias_matches_reference() {
    let mut cfg = tiny(false, RelativeScheme::Fire);
    cfg.hidden_size = 8;
    let m = Model::new(cfg, ArchitectureVariant::standard(2), 4).unwrap();
    let seq = 9;
    for layer in 0..2 {
        let idx = &m.layer_indices()[layer];
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = m.params_as::<f64>().iter().map(|p| tape.constant(p)).collect();
        let b = m.fire_graph(&mut tape, &vars, idx.fire.unwrap(), seq).unwrap();
        let reference = m.fire_reference(layer).unwrap().bias_matrix(seq).unwrap();
        for (x, y) in tape.value(b).iter().zip(&reference) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }
}

#[test]
fn zeroed_abacus_table_only_removes_input_vectors() {
    let with = tiny(true, RelativeScheme::Fire);
    let without = tiny(false, RelativeScheme::Fire);
    let v = ArchitectureVariant::injected(2);
    let mut a = Model::new(with, v, 11).unwrap();
    let b = Model::new(without, v, 11).unwrap();
    let (batch, ids) = sample_batch(3, 4);
    let la = a.forward(&input(&batch, &ids), None).unwrap();
    let lb = b.forward(&input(&batch, &ids), None).unwrap();
    assert_ne!(la, lb);
    a.param_mut("embed.abacus").unwrap().data_mut().fill(0.0);
    let la = a.forward(&input(&batch, &ids), None).unwrap();
    assert_eq!(la.data(), lb.data());
}

#[test]
fn removing_inner_injection_equals_adding_zero() {
    let cfg = tiny(true, RelativeScheme::None);
    let inside = Model::new(cfg.clone(), ArchitectureVariant::looped(3, 2), 6).unwrap();
    let mut outside_v = ArchitectureVariant::looped(3, 2);
    outside_v.injection_inside_block = false;
    let mut outside = inside.clone();
    outside.variant = outside_v;
    let (batch, ids) = sample_batch(3, 5);
    let zeroed = inside
        .forward_with(
            &input(&batch, &ids),
            &ForwardOptions {
                zero_inner_injection: true,
                ..Default::default()
            },
        )
        .unwrap();
    let removed = outside.forward(&input(&batch, &ids), None).unwrap();
    assert_eq!(zeroed[0].data(), removed.data());
    let full = inside.forward(&input(&batch, &ids), None).unwrap();
    assert_ne!(full.data(), removed.data());
}

#[test]
fn full_model_gradients() {
    let (batch, ids) = sample_batch(2, 8);
    let targets = batch.targets.clone();
    let weights: Vec<f64> = batch.weights.iter().map(|&w| w as u8 as f64).collect();
    for (abacus, relative) in [
        (true, RelativeScheme::None),
        (false, RelativeScheme::Fire),
        (false, RelativeScheme::Rope),
        (false, RelativeScheme::None),
    ] {
        let cfg = tiny(abacus, relative);
        let m = Model::new(cfg, ArchitectureVariant::looped(1, 2), 2).unwrap();
        let report = grad_check_with(
            |tape, vars| {
                let out = m.graph(tape, vars, &input(&batch, &ids), &ForwardOptions::default()).map_err(|e| {
                    crate::substrate::SubstrateError::Invalid(e.to_string())
                })?;
                tape.cross_entropy(out[0], &targets, &weights)
            },
            &m.params_as::<f64>(),
            &GradCheckOptions {
                step: 1e-5,
                max_elements: Some(12),
                seed: 1,
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{abacus} {relative:?}: {report:?}");
    }
}

#[test]
fn abacus_table_extension_keeps_trained_rows() {
    let cfg = tiny(true, RelativeScheme::None);
    let mut m = Model::new(cfg, ArchitectureVariant::standard(1), 0).unwrap();
    let before = m.param("embed.abacus").unwrap().clone();
    m.extend_abacus_table(20, 1).unwrap();
    let after = m.param("embed.abacus").unwrap();
    assert_eq!(after.shape(), &[20, 8]);
    assert_eq!(&after.data()[..before.len()], before.data());
    assert!(after.data()[before.len()..].iter().any(|&x| x != 0.0));
    assert!(m.extend_abacus_table(10, 1).is_err());
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let cfg = tiny(true, RelativeScheme::Fire);
    let m = Model::new(cfg, ArchitectureVariant::looped(2, 2), 0).unwrap();
    let mut ck = Checkpoint::of_model(m.clone(), 42);
    ck.meta.insert("task".into(), "add".into());
    ck.optimizer = Some(OptimizerState {
        t: 42,
        m: m.params().iter().map(|p| vec![0.5; p.len()]).collect(),
        v: m.params().iter().map(|p| vec![0.25; p.len()]).collect(),
    });
    let mut buf = Vec::new();
    ck.write(&mut buf).unwrap();
    let back = Checkpoint::read(buf.as_slice()).unwrap();
    assert_eq!(back, ck);
    let mut again = Vec::new();
    back.write(&mut again).unwrap();
    assert_eq!(buf, again);

    assert!(Checkpoint::read(&buf[..buf.len() - 1]).is_err());
    let mut extra = buf.clone();
    extra.push(0);
    assert!(Checkpoint::read(extra.as_slice()).is_err());
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(Checkpoint::read(bad.as_slice()).is_err());

    let mut oracle = Vec::new();
    Checkpoint::oracle().write(&mut oracle).unwrap();
    assert_eq!(Checkpoint::read(oracle.as_slice()).unwrap().kind, CheckpointKind::Oracle);
}
