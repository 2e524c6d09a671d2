mod common;

use common::{random_graph, random_mlp};
use globcert::attack::{node_distances, sample_pairs, InputBox};
use globcert::bnb::{bound_domain, run, select_branch_neuron, BnBConfig, Constraint};
use globcert::propagate::{compute_relu_input_intervals, output_variation_bounds};
use globcert::relax::BranchSign;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-9;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn history_is_sound_and_monotone(seed in any::<u64>(), delta in 0.01f64..0.3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 3, 5, 1);
        let root = output_variation_bounds(&g, delta).unwrap();
        let res = run(&g, delta, &BnBConfig { max_splits: 6, ..Default::default() }).unwrap();
        prop_assert!(res.history[0].lo >= root.lo - TOL && res.history[0].hi <= root.hi + TOL);
        for w in res.history.windows(2) {
            prop_assert!(w[1].lo >= w[0].lo - TOL && w[1].hi <= w[0].hi + TOL);
        }
        let pairs = sample_pairs(g.input_shape().numel(), delta, 300, seed, InputBox::default());
        for (x, dx) in pairs {
            let v = node_distances(&g, &x, &dx).unwrap()[&g.output()][0];
            prop_assert!(res.best.contains(v, TOL), "{v} outside [{}, {}]", res.best.lo, res.best.hi);
        }
    }

    #[test]
    fn optimized_domain_is_sound_on_its_half(seed in any::<u64>(), delta in 0.05f64..0.3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_mlp(&mut rng, &[3, 6, 6, 1]);
        let intervals = compute_relu_input_intervals(&g, delta).unwrap();
        let Some((node, neuron)) = select_branch_neuron(&g, &intervals, &[]) else {
            return Ok(());
        };
        let config = BnBConfig { beta_steps: 30, ..Default::default() };
        for sign in [BranchSign::NonPositive, BranchSign::NonNegative] {
            let cs = [Constraint { node, neuron, sign }];
            let d = bound_domain(&g, &intervals, &cs, delta, &config).unwrap();
            prop_assert!(d.betas_lower.iter().chain(&d.betas_upper).all(|&b| b >= 0.0));
            let zero = bound_domain(&g, &intervals, &cs, delta, &BnBConfig { beta_steps: 0, ..config.clone() }).unwrap();
            prop_assert!(d.bounds.lo >= zero.bounds.lo - TOL && d.bounds.hi <= zero.bounds.hi + TOL);
            for (x, dx) in sample_pairs(3, delta, 400, seed, InputBox::default()) {
                let dist = node_distances(&g, &x, &dx).unwrap();
                if sign.admits(dist[&node][neuron]) {
                    prop_assert!(d.bounds.contains(dist[&g.output()][0], TOL));
                }
            }
        }
    }
}

#[test]
fn zero_splits_match_plain_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = random_mlp(&mut rng, &[4, 8, 8, 1]);
    let plain = output_variation_bounds(&g, 0.1).unwrap();
    let res = run(
        &g,
        0.1,
        &BnBConfig {
            max_splits: 0,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(res.history.len(), 1);
    assert_eq!(res.domains_explored, 1);
    assert!(res.best.lo >= plain.lo - TOL && res.best.hi <= plain.hi + TOL);
}

#[test]
fn runs_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = random_mlp(&mut rng, &[4, 8, 8, 1]);
    let config = BnBConfig {
        max_splits: 10,
        ..Default::default()
    };
    let a = run(&g, 0.1, &config).unwrap();
    let b = run(&g, 0.1, &config).unwrap();
    assert_eq!(a.best, b.best);
    let bounds = |r: &globcert::bnb::BnBResult| {
        r.history
            .iter()
            .map(|h| (h.splits, h.lo, h.hi))
            .collect::<Vec<_>>()
    };
    assert_eq!(bounds(&a), bounds(&b));
}

#[test]
fn selection_skips_constrained_neurons() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = random_mlp(&mut rng, &[3, 6, 1]);
    let intervals = compute_relu_input_intervals(&g, 0.3).unwrap();
    let mut constraints = Vec::new();
    while let Some((node, neuron)) = select_branch_neuron(&g, &intervals, &constraints) {
        assert!(constraints
            .iter()
            .all(|c: &Constraint| (c.node, c.neuron) != (node, neuron)));
        constraints.push(Constraint {
            node,
            neuron,
            sign: BranchSign::NonNegative,
        });
    }
    let unstable: usize = intervals
        .values()
        .map(|iv| {
            iv.lo
                .iter()
                .zip(&iv.hi)
                .filter(|(l, u)| **l < 0.0 && **u > 0.0)
                .count()
        })
        .sum();
    assert_eq!(constraints.len(), unstable);
}

#[test]
fn multi_output_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = random_mlp(&mut rng, &[3, 4, 2]);
    assert!(run(&g, 0.1, &BnBConfig::default()).is_err());
}
