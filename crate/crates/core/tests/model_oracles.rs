mod common;

use common::*;
use latree::linalg::max_abs_diff;
use latree::model::{
    exact_distances, exact_pair_moment, exact_triple_moment, random_latent_tree, random_latent_tree_with,
    sample_model, GeneratorOptions, GroundTruthModel, ModelFile, ObservationFamily, Topology,
};
use latree::moments::pairwise_moment;
use nalgebra::DMatrix;

fn topologies() -> [Topology; 3] {
    [Topology::Balanced, Topology::Caterpillar, Topology::RandomDegree { max_degree: 4 }]
}

#[test]
fn pair_moments_match_enumeration() {
    for seed in 0..12u64 {
        let k = 2 + (seed as usize % 2);
        let p = if k == 2 { 8 } else { 6 };
        let family = if seed % 4 == 3 { ObservationFamily::Gaussian { sigma: 0.7 } } else { ObservationFamily::Categorical };
        let opts = GeneratorOptions { family, ..Default::default() };
        let model = random_latent_tree_with(p, k, &[k + 1], topologies()[seed as usize % 3], seed, &opts).unwrap();
        for a in 0..p {
            for b in 0..p {
                let exact = exact_pair_moment(&model, a, b).unwrap();
                let brute = brute_pair_moment(&model, a, b);
                assert!(max_abs_diff(&exact, &brute) < 1e-13, "seed {seed} pair ({a},{b})");
            }
        }
        for h in model.tree.hidden_ids() {
            let pi = brute_marginal(&model, h);
            assert!((pi - model.tree.prior(h).unwrap()).amax() < 1e-13, "seed {seed} prior of {h}");
        }
    }
}

#[test]
fn triple_moments_match_enumeration() {
    for k in 2..=4 {
        for seed in 0..5u64 {
            let model = random_latent_tree(3, k, &[k, k + 1, 5], Topology::Balanced, seed).unwrap();
            let exact = exact_triple_moment(&model, 0, 1, 2).unwrap();
            assert!(exact.max_abs_diff(&brute_triple_moment(&model, 0, 1, 2)) < 1e-14);
        }
    }
    let model = random_latent_tree(7, 2, &[3], Topology::Caterpillar, 9).unwrap();
    for (a, b, c) in [(0, 3, 6), (1, 2, 5), (0, 1, 2), (4, 5, 6)] {
        let exact = exact_triple_moment(&model, a, b, c).unwrap();
        assert!(exact.max_abs_diff(&brute_triple_moment(&model, a, b, c)) < 1e-14);
    }
}

#[test]
fn cross_moment_over_two_hidden_nodes_is_a_path_product() {
    // Caterpillar with 5 leaves: a chain of three hidden nodes.
    let model = random_latent_tree(5, 2, &[3], Topology::Caterpillar, 2).unwrap();
    let t = &model.tree;
    for a in 0..5 {
        for b in 0..5 {
            let pa = t.neighbors(a).next().unwrap();
            let pb = t.neighbors(b).next().unwrap();
            if a == b || t.path(pa, pb).unwrap().len() != 2 {
                continue;
            }
            // M_ab = A_a diag(π_pa) E[pb | pa]ᵀ A_bᵀ, multiplied out by hand.
            let pi = model.tree.prior(pa).unwrap();
            let ea = model.tree.conditional(pa, a).unwrap();
            let eb = model.tree.conditional(pb, b).unwrap();
            let link = model.tree.conditional(pa, pb).unwrap();
            let mut naive = DMatrix::zeros(ea.nrows(), eb.nrows());
            for r in 0..2 {
                for s in 0..2 {
                    for i in 0..ea.nrows() {
                        for j in 0..eb.nrows() {
                            naive[(i, j)] += pi[r] * ea[(i, r)] * link[(s, r)] * eb[(j, s)];
                        }
                    }
                }
            }
            assert!(max_abs_diff(&naive, &exact_pair_moment(&model, a, b).unwrap()) < 1e-14);
        }
    }
}

#[test]
fn exact_distances_match_the_formula_and_are_additive() {
    for seed in 0..20u64 {
        let k = 2 + (seed as usize % 2);
        let model = random_latent_tree(9, k, &[k + 2], topologies()[seed as usize % 3], seed).unwrap();
        let d = exact_distances(&model).unwrap();
        let n = d.len();
        for a in 0..9 {
            for b in a + 1..9 {
                let m_ab = exact_pair_moment(&model, a, b).unwrap();
                let m_aa = exact_pair_moment(&model, a, a).unwrap();
                let m_bb = exact_pair_moment(&model, b, b).unwrap();
                assert!((d.get(a, b) - oracle_distance(&m_ab, &m_aa, &m_bb, k)).abs() < 1e-9);
            }
        }
        for a in 0..n {
            assert!(d.get(a, a).abs() < 1e-12);
            for c in 0..n {
                for b in model.tree.path(a, c).unwrap() {
                    assert!((d.get(a, c) - d.get(a, b) - d.get(b, c)).abs() < 1e-9, "seed {seed} ({a},{b},{c})");
                }
            }
        }
    }
}

#[test]
fn generator_output_is_always_a_valid_model() {
    for seed in 0..1000u64 {
        let k = 2 + (seed as usize % 2);
        let p = 3 + (seed as usize % 14);
        let dims: Vec<usize> = (0..p).map(|i| k + (i + seed as usize) % 3).collect();
        let model = random_latent_tree(p, k, &dims, topologies()[seed as usize % 3], seed).unwrap();
        model.tree.check_invariants().unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        model.check_complete().unwrap();
        assert_eq!(model.dims(), dims);
        for h in model.tree.hidden_ids() {
            assert!(model.tree.degree(h) >= 3);
        }
    }
}

#[test]
fn three_leaves_make_one_star_and_seeds_repeat() {
    let m = random_latent_tree(3, 2, &[2, 2, 2], Topology::Balanced, 7).unwrap();
    assert_eq!(m.tree.hidden_ids(), vec![3]);
    assert_eq!(m.tree.degree(3), 3);
    assert_eq!(m, random_latent_tree(3, 2, &[2, 2, 2], Topology::Balanced, 7).unwrap());
    assert!(random_latent_tree(3, 3, &[2, 4, 4], Topology::Balanced, 7).is_err());
    assert!(random_latent_tree(2, 2, &[2], Topology::Balanced, 7).is_err());
}

#[test]
fn moments_do_not_depend_on_the_sampling_root() {
    let model = random_latent_tree(10, 2, &[3], Topology::Balanced, 11).unwrap();
    for root in model.tree.hidden_ids() {
        let rerooted = GroundTruthModel { root, ..model.clone() };
        for (a, b) in [(0, 9), (3, 4), (2, 2)] {
            let m0 = exact_pair_moment(&model, a, b).unwrap();
            let m1 = exact_pair_moment(&rerooted, a, b).unwrap();
            assert!(max_abs_diff(&m0, &m1) < 1e-14);
        }
        let s = sample_model(&rerooted, 200_000, 3).unwrap();
        let emp = pairwise_moment(&s, 0, 9).unwrap().matrix;
        assert!(max_abs_diff(&emp, &exact_pair_moment(&model, 0, 9).unwrap()) < 5e-3);
    }
}

#[test]
fn large_sample_moments_are_close_to_exact() {
    for family in [ObservationFamily::Categorical, ObservationFamily::Gaussian { sigma: 0.5 }] {
        let opts = GeneratorOptions { family, ..Default::default() };
        let model = random_latent_tree_with(3, 2, &[3], Topology::Balanced, 5, &opts).unwrap();
        let s = sample_model(&model, 1_000_000, 8).unwrap();
        for (a, b) in [(0, 1), (0, 2), (1, 2), (1, 1)] {
            let emp = pairwise_moment(&s, a, b).unwrap().matrix;
            let err = max_abs_diff(&emp, &exact_pair_moment(&model, a, b).unwrap());
            assert!(err <= 5e-3, "{family:?} ({a},{b}): {err}");
        }
    }
}

#[test]
fn sample_moment_error_shrinks_with_n() {
    let model = random_latent_tree(6, 2, &[3], Topology::Balanced, 21).unwrap();
    let exact: Vec<DMatrix<f64>> = (0..6).flat_map(|a| (0..6).map(move |b| (a, b))).map(|(a, b)| exact_pair_moment(&model, a, b).unwrap()).collect();
    let mut medians = Vec::new();
    for n in [1_000, 10_000, 100_000] {
        let mut errs: Vec<f64> = (0..10u64)
            .map(|seed| {
                let s = sample_model(&model, n, seed).unwrap();
                (0..36)
                    .map(|i| max_abs_diff(&pairwise_moment(&s, i / 6, i % 6).unwrap().matrix, &exact[i]))
                    .fold(0.0, f64::max)
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        medians.push((errs[4] + errs[5]) / 2.0);
    }
    assert!(medians[0] > medians[1] && medians[1] > medians[2], "{medians:?}");
}

#[test]
fn model_json_round_trips_bit_for_bit() {
    let model = random_latent_tree(12, 3, &[4], Topology::RandomDegree { max_degree: 5 }, 17).unwrap();
    let text = serde_json::to_string(&model.to_json()).unwrap();
    let back = GroundTruthModel::from_json(&serde_json::from_str::<ModelFile>(&text).unwrap()).unwrap();
    assert_eq!(back, model);
    assert_eq!(serde_json::to_string(&back.to_json()).unwrap(), text);
}
