mod common;

const CASES: u32 = 48;

#[test]
fn masked_positions_get_zero_gradient() {
    common::masking_zero_gradient(CASES).unwrap();
}

#[test]
fn abacus_ids_align_equal_significance() {
    common::abacus_alignment(CASES).unwrap();
}

#[test]
fn abacus_offset_is_shared_across_a_batch() {
    common::offset_batch_uniform(CASES).unwrap();
}

#[test]
fn fire_diagonals_are_constant_below_l() {
    common::fire_diagonal_constancy(CASES).unwrap();
}

#[test]
fn rope_scores_depend_on_relative_offset() {
    common::rope_shift_invariance(CASES).unwrap();
}

#[test]
fn logits_never_see_the_future() {
    common::causality(CASES).unwrap();
}

#[test]
fn grid_categories_partition_cells() {
    common::category_partition(256).unwrap();
}

#[test]
fn progressive_loss_is_a_convex_mix() {
    common::progressive_bound(CASES).unwrap();
}

mod arithmetic {
    use abacus_core::task_data::{add_digits, compare_numbers, mul_digits, oracle_answer, or_bits, sub_digits, Task};
    use num_bigint::BigInt;
    use proptest::prelude::*;

    fn number() -> impl Strategy<Value = String> {
        prop_oneof![Just("0".to_owned()), "[1-9][0-9]{0,60}"]
    }

    proptest! {
        #[test]
        fn digit_strings_agree_with_bigint(a in number(), b in number()) {
            let (x, y): (BigInt, BigInt) = (a.parse().unwrap(), b.parse().unwrap());
            prop_assert_eq!(add_digits(&a, &b), (&x + &y).to_string());
            prop_assert_eq!(sub_digits(&a, &b), (&x - &y).to_string());
            prop_assert_eq!(mul_digits(&a, &b), (&x * &y).to_string());
            prop_assert_eq!(compare_numbers(&a, &b), x.cmp(&y));
            prop_assert_eq!(oracle_answer(Task::Mul, &[a.clone(), b.clone()]).unwrap(), (&x * &y).to_string());
        }

        #[test]
        fn or_is_positional(a in "[01]{1,40}", b in "[01]{1,40}") {
            let out = or_bits(&a, &b);
            prop_assert_eq!(out.len(), a.len().max(b.len()));
            for (i, c) in out.bytes().enumerate() {
                let set = a.as_bytes().get(i) == Some(&b'1') || b.as_bytes().get(i) == Some(&b'1');
                prop_assert_eq!(c == b'1', set);
            }
        }
    }
}
