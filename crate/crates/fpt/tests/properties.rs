//! Randomized invariants over the data generators, serialization, and
//! numerics, driven by proptest.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fpt::checkpoint;
use fpt::models::{build_lstm, build_transformer, ModelSpec};
use fpt::policy::{orthogonalize, InitScheme};
use fpt::tasks::{instance_seed, sample, Split, TaskConfig, TaskTarget};
use fpt::tensor::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn listops_labels_agree_with_an_independent_interpreter(
        seed in any::<u64>(),
        index in 0u64..1000,
        max_depth in 1usize..4,
        max_args in 2usize..5,
    ) {
        let cfg = TaskConfig::ListOps { max_depth, max_args, max_len: 40 };
        let inst = sample(&cfg, seed, Split::Train, index).unwrap();
        let ids = common::token_ids(&inst.tokens);
        prop_assert!(ids.len() <= 40);
        let TaskTarget::Class(label) = inst.target else {
            return Err(TestCaseError::fail("listops must emit a class target"));
        };
        prop_assert_eq!(common::interpret_listops(&ids) as usize, label);
    }

    #[test]
    fn bit_xor_targets_match_the_operands(
        seed in any::<u64>(),
        index in 0u64..1000,
        bits in 1usize..12,
    ) {
        let cfg = TaskConfig::BitXor { bits };
        let inst = sample(&cfg, seed, Split::Train, index).unwrap();
        prop_assert_eq!(inst.tokens.shape(), &[2 * bits, 1]);
        let TaskTarget::Bits { bits: target, answer_positions } = &inst.target else {
            return Err(TestCaseError::fail("xor must emit bit targets"));
        };
        let expect_positions: Vec<usize> = (bits..2 * bits).collect();
        prop_assert_eq!(answer_positions, &expect_positions);
        for i in 0..bits {
            let a = inst.tokens.data()[i] > 0.0;
            let b = inst.tokens.data()[bits + i] > 0.0;
            prop_assert_eq!(target[i], f32::from(a != b));
        }
    }

    #[test]
    fn train_and_test_instance_seeds_never_collide(
        base in any::<u64>(),
        i in 0u64..100_000,
        j in 0u64..100_000,
    ) {
        prop_assert_ne!(
            instance_seed(base, Split::Train, i),
            instance_seed(base, Split::Test, j)
        );
    }

    #[test]
    fn checkpoints_round_trip_for_arbitrary_small_specs(
        n_layers in 1usize..3,
        heads in 1usize..3,
        d_in in 1usize..5,
        d_out in 1usize..5,
        lstm in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut spec = if lstm {
            ModelSpec::lstm(n_layers, 8)
        } else {
            ModelSpec::transformer(n_layers, 8 * heads, heads)
        };
        spec.max_len = 6;
        spec.d_in = d_in;
        spec.d_out = d_out;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = if lstm {
            build_lstm(&spec, &InitScheme::default(), &mut rng).unwrap()
        } else {
            build_transformer(&spec, &InitScheme::default(), &mut rng).unwrap()
        };

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fptc");
        checkpoint::save(&model, &path).unwrap();
        let loaded = checkpoint::load_model(&path).unwrap();

        prop_assert_eq!(loaded.spec(), model.spec());
        for p in model.registry().iter() {
            let a = p.borrow();
            let q = loaded.registry().get(&a.name).unwrap();
            let b = q.borrow();
            prop_assert_eq!(a.group, b.group);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn orthogonalized_matrices_have_orthonormal_vectors(
        m in 2usize..12,
        n in 2usize..12,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::randn(&[m, n], 0.0, 1.0, &mut rng);
        orthogonalize(&mut t).unwrap();

        // columns orthonormal when tall, rows orthonormal when wide
        let (outer, inner, stride) = if m >= n { (n, m, n) } else { (m, n, 1) };
        let fetch = |vec_idx: usize, k: usize| -> f32 {
            if m >= n {
                t.data()[k * stride + vec_idx]
            } else {
                t.data()[vec_idx * n + k]
            }
        };
        for a in 0..outer {
            for b in a..outer {
                let dot: f32 = (0..inner).map(|k| fetch(a, k) * fetch(b, k)).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                prop_assert!(
                    (dot - want).abs() < 1e-4,
                    "vectors {} and {}: dot {}", a, b, dot
                );
            }
        }
    }
}
