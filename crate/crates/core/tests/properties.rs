//! Algebraic invariants checked over generated inputs.

mod common;

use common::{gauss, mat, max_abs_diff, random_fmap, rng, rvec, strictly_increasing, tensor, Mat};
use gam_core::gam::{GamHead, GamModelConfig};
use gam_core::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

fn tensor_of(shape: Vec<usize>, seed: u64) -> Tensor {
    gam_core::rng::gaussian(&mut rng(seed), &shape, 1.0)
}

fn sorted_locations() -> impl Strategy<Value = Vec<u64>> {
    prop::collection::vec(1u64..50, 1..12).prop_map(|gaps| {
        gaps.iter()
            .scan(0u64, |loc, g| {
                *loc += g;
                Some(*loc)
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn contract_matches_nested_loops(i in 1usize..4, j in 1usize..4, k in 1usize..4, l in 1usize..4, seed: u64) {
        // a: i×j×k, b: k×l×j, contracting j and k
        let a = tensor_of(vec![i, j, k], seed);
        let b = tensor_of(vec![k, l, j], seed ^ 1);
        let got = contract(&a, &b, &[1, 2], &[2, 0]).unwrap();
        prop_assert_eq!(got.shape(), &[i, l][..]);
        for x in 0..i {
            for y in 0..l {
                let mut s = 0.0;
                for p in 0..j {
                    for q in 0..k {
                        s += a.data()[(x * j + p) * k + q] * b.data()[(q * l + y) * j + p];
                    }
                }
                prop_assert!((got.at(x, y) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_ignores_row_shifts(n in 1usize..7, seed: u64, shift in -100.0f64..100.0) {
        let scores = tensor_of(vec![n, n], seed).scale(3.0);
        let mask = Mask::from_valid(&vec![true; n], seed % 2 == 0);
        let base = masked_softmax_rows(&scores, &mask).unwrap();
        let moved = masked_softmax_rows(&scores.map(|v| v + shift), &mask).unwrap();
        prop_assert!(base.max_abs_diff(&moved) < 1e-12);
    }

    #[test]
    fn signed_pow_is_odd_for_non_integer_exponents(x in -5.0f64..5.0, n1 in 0.05f64..4.0) {
        prop_assume!(n1.fract() != 0.0);
        prop_assert_eq!(signed_pow(-x, n1).unwrap(), -signed_pow(x, n1).unwrap());
    }

    #[test]
    fn signed_pow_integer_exponents_are_repeated_products(x in -5.0f64..5.0, k in 1u32..9) {
        let mut expected = x;
        for _ in 1..k {
            expected *= x;
        }
        let got = signed_pow(x, k as f64).unwrap();
        prop_assert_eq!(got, expected);
        // so odd exponents are odd functions and even ones are even
        let mirrored = signed_pow(-x, k as f64).unwrap();
        if k % 2 == 1 {
            prop_assert_eq!(mirrored, -got);
        } else {
            prop_assert_eq!(mirrored, got);
        }
    }

    #[test]
    fn rvec_structure(locs in sorted_locations()) {
        let r = build_r(&locs).unwrap();
        let n = locs.len();
        for a in 0..n {
            prop_assert_eq!(r.get(a, a), 1);
            for b in 0..n {
                prop_assert_eq!(r.get(a, b), r.get(b, a));
                if a != b {
                    prop_assert!(r.get(a, b) >= 2);
                }
                // strictly increasing away from the diagonal
                if b > a + 1 {
                    prop_assert!(r.get(a, b) > r.get(a, b - 1));
                }
            }
        }
        prop_assert_eq!(r.to_rows(), rvec(&locs));
    }

    #[test]
    fn contiguous_rvec_is_toeplitz(start in 0u64..1000, n in 1usize..12) {
        let locs: Vec<u64> = (start..start + n as u64).collect();
        let r = build_r(&locs).unwrap();
        for a in 0..n {
            for b in 0..n {
                prop_assert_eq!(r.get(a, b), 1 + a.abs_diff(b) as u64);
            }
        }
    }

    #[test]
    fn rvec_rejects_unsorted(locs in prop::collection::vec(0u64..20, 2..8)) {
        let sorted = locs.windows(2).all(|w| w[0] < w[1]);
        prop_assert_eq!(build_r(&locs).is_ok(), sorted);
    }

    #[test]
    fn attention_rows_are_distributions(seed: u64, nb_pick in 0usize..3) {
        let nb = [1, 2, 4][nb_pick];
        let mut r = rng(seed);
        let (n, m) = (r.random_range(1..=7), r.random_range(1..=5));
        let fmap = random_fmap(&mut r);
        let y = gauss(&mut r, n, m, 0.7);
        let locs = strictly_increasing(&mut r, n, 4);
        let brains: Vec<Tensor> = (0..nb).map(|_| tensor(&gauss(&mut r, m, m, 0.5))).collect();
        let logits: Vec<f64> = (0..nb).map(|_| r.random_range(-5.0..5.0)).collect();
        let mixture = MixtureSpec::LearnedSimplex { logits };
        let w = realize_mixture(&mixture);
        prop_assert!((w.sum() - 1.0).abs() < 1e-12);
        prop_assert!(w.data().iter().all(|&v| v > 0.0));
        let uniform = realize_mixture(&MixtureSpec::FixedUniform { n_b: nb });
        prop_assert!((uniform.sum() - 1.0).abs() < 1e-12);

        let seq = InputSequence::new(tensor(&y)).unwrap();
        let head = GamHeadParams { brains: brains.clone(), w_v: Tensor::identity(m), mixture: mixture.clone(), fmap: fmap.clone() };
        let phi = gam_attention(&seq, &head).unwrap();
        let embed = tensor(&gauss(&mut r, n, m, 0.3));
        let p = embed_positions(&build_r(&locs).unwrap(), &embed, PositionTransform::Log1p).unwrap();
        let pos = PosBranchParams {
            embed,
            brains_p: brains,
            mixture_s: mixture,
            fmap,
            transform: PositionTransform::Log1p,
            combination: CombinationSpec::Geometric,
            w_v: None,
        };
        let theta = position_attention(&p, &Mask::full(n), &pos).unwrap();
        for mat in [&phi, &theta] {
            for a in 0..n {
                let row = mat.row(a);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn linear_combination_is_affine(seed: u64, c1 in 0.01f64..0.99) {
        let z = tensor_of(vec![3, 4], seed);
        let pi = tensor_of(vec![3, 4], seed ^ 7);
        let out = combine(&z, &pi, &CombinationSpec::Linear { c1 }).unwrap().output;
        let expected = pi.add(&z.sub(&pi).unwrap().scale(c1)).unwrap();
        prop_assert!(out.max_abs_diff(&expected) < 1e-12);
        let same = combine(&z, &z, &CombinationSpec::Linear { c1 }).unwrap().output;
        prop_assert!(same.max_abs_diff(&z) < 1e-12);
    }

    #[test]
    fn geometric_combination_counts_conflicts(seed: u64) {
        let z = tensor_of(vec![4, 3], seed);
        let pi = tensor_of(vec![4, 3], seed ^ 9);
        let out = combine(&z, &pi, &CombinationSpec::Geometric).unwrap();
        let mut conflicts = 0;
        for ((&a, &b), &o) in z.data().iter().zip(pi.data()).zip(out.output.data()) {
            if a * b < 0.0 {
                conflicts += 1;
                prop_assert_eq!(o, 0.0);
            } else {
                prop_assert!((o.abs() - (a * b).sqrt()).abs() < 1e-12);
                prop_assert!(o == 0.0 || o.signum() == a.signum());
            }
        }
        prop_assert_eq!(out.sign_conflicts, conflicts);
    }

    #[test]
    fn single_term_polynomial_is_the_power_law(seed: u64, l in 1usize..5) {
        let mut r = rng(seed);
        let (n, m) = (r.random_range(1..=6), r.random_range(1..=5));
        let seq = InputSequence::new(tensor(&gauss(&mut r, n, m, 1.0))).unwrap();
        let brain = tensor(&gauss(&mut r, m, m, 1.0));
        let mut coeffs = vec![0.0; l];
        coeffs[l - 1] = 1.0;
        let poly = brain_scores(&seq, &brain, &FeatureMap::Polynomial { coeffs }).unwrap();
        let power = brain_scores(&seq, &brain, &FeatureMap::PowerLaw { n1: l as f64 }).unwrap();
        prop_assert_eq!(poly, power);
    }

    #[test]
    fn unit_power_scores_are_bilinear(seed: u64, c in -3.0f64..3.0) {
        let mut r = rng(seed);
        let (n, m) = (r.random_range(1..=6), r.random_range(1..=5));
        let y = tensor(&gauss(&mut r, n, m, 1.0));
        let seq = InputSequence::new(y.clone()).unwrap();
        let b1 = tensor(&gauss(&mut r, m, m, 1.0));
        let b2 = tensor(&gauss(&mut r, m, m, 1.0));
        let id = FeatureMap::identity();
        let lhs = brain_scores(&seq, &b1.add(&b2.scale(c)).unwrap(), &id).unwrap();
        let rhs = brain_scores(&seq, &b1, &id).unwrap().add(&brain_scores(&seq, &b2, &id).unwrap().scale(c)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-11);
        let direct = y.matmul(&b1).unwrap().matmul(&y.transpose()).unwrap();
        prop_assert!(brain_scores(&seq, &b1, &id).unwrap().max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn mixture_is_shift_invariant_and_order_preserving(logits in prop::collection::vec(-10.0f64..10.0, 1..6), shift in -50.0f64..50.0) {
        let w = realize_mixture(&MixtureSpec::LearnedSimplex { logits: logits.clone() });
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let ws = realize_mixture(&MixtureSpec::LearnedSimplex { logits: shifted });
        prop_assert!(w.max_abs_diff(&ws) < 1e-12);
        let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b });
        prop_assert_eq!(argmax(w.data()), argmax(&logits));
    }

    #[test]
    fn layer_without_positions_is_permutation_equivariant(seed: u64) {
        let mut r = rng(seed);
        let (n, m, mv, h) = (r.random_range(1..=7), r.random_range(1..=5), r.random_range(1..=4), r.random_range(1..=3));
        let fmap = random_fmap(&mut r);
        let heads = (0..h)
            .map(|_| GamHead {
                content: GamHeadParams {
                    brains: vec![tensor(&gauss(&mut r, m, m, 0.5)), tensor(&gauss(&mut r, m, m, 0.5))],
                    w_v: tensor(&gauss(&mut r, m, mv, 0.5)),
                    mixture: MixtureSpec::LearnedSimplex { logits: vec![0.3, -0.2] },
                    fmap: fmap.clone(),
                },
                position: None,
            })
            .collect();
        let config = GamModelConfig { heads, output_proj: tensor(&gauss(&mut r, h * mv, m, 0.5)) };
        let y = gauss(&mut r, n, m, 0.7);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let permuted: Mat = perm.iter().map(|&i| y[i].clone()).collect();
        let out = mat(&gam_forward(&InputSequence::new(tensor(&y)).unwrap(), &config).unwrap());
        let out_p = mat(&gam_forward(&InputSequence::new(tensor(&permuted)).unwrap(), &config).unwrap());
        let expected: Mat = perm.iter().map(|&i| out[i].clone()).collect();
        prop_assert!(max_abs_diff(&out_p, &expected) < 1e-12);
    }
}
