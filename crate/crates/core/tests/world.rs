mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use conceptlab::harness::metrics::moments;
use conceptlab::ConceptDistribution;

// Fixture A written out by hand: y = (z, w, xi).
const Z_MEAN: [f64; 2] = [1.0, -1.0];
const W_MEAN: [f64; 3] = [-2.0, 0.0, 2.0];
const VAR: [f64; 3] = [0.25, 0.25, 1.0];

/// Log density and score of the noised mixture by direct enumeration.
fn brute_force(joint: &[f64], y: &[f64], ab: f64) -> (f64, Vec<f64>) {
    let mut logs = Vec::new();
    let mut grads = Vec::new();
    for s in 0..2 {
        for p in 0..3 {
            let w = joint[s * 3 + p];
            let mu = [Z_MEAN[s], W_MEAN[p], 0.0];
            let mut lp = w.ln();
            let mut g = [0.0; 3];
            for i in 0..3 {
                let var = ab * VAR[i] + 1.0 - ab;
                let d = y[i] - ab.sqrt() * mu[i];
                lp += -0.5 * (d * d / var + (2.0 * std::f64::consts::PI * var).ln());
                g[i] = -d / var;
            }
            logs.push(lp);
            grads.push(g);
        }
    }
    let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logs.iter().map(|l| (l - mx).exp()).sum();
    let mut score = vec![0.0; 3];
    for (l, g) in logs.iter().zip(&grads) {
        let r = (l - mx).exp() / total;
        for i in 0..3 {
            score[i] += r * g[i];
        }
    }
    (mx + total.ln(), score)
}

fn simplex(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().ln()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[test]
fn matches_brute_force_enumeration() {
    let world = common::world("fixture-a.json");
    let sched = common::schedule();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    for k in 0..200 {
        let joint = simplex(&mut rng, 6);
        let q = ConceptDistribution::from_joint(world.factors().to_vec(), joint.clone()).unwrap();
        let y: Vec<f64> = if k == 0 { vec![0.0; 3] } else { (0..3).map(|_| rng.random_range(-4.0..4.0)).collect() };
        let ab = sched.alpha_bar(rng.random_range(0..=1000));
        let (lp, s) = brute_force(&joint, &y, ab);
        assert!((world.log_density(&q, &y, ab).unwrap() - lp).abs() < 1e-10);
        let got = world.score(&q, &y, ab).unwrap();
        for i in 0..3 {
            assert!((got[i] - s[i]).abs() < 1e-10 * s[i].abs().max(1.0), "{got:?} vs {s:?}");
        }
    }
}

#[test]
fn symmetric_prompt_scores_zero_at_origin() {
    // Uniform over a symmetric layout: every pull cancels at y = 0.
    let world = common::world("fixture-a.json");
    let q = common::load("fixture-a.json").prompts.get("").unwrap().clone();
    for t in [0, 1, 250, 1000] {
        let s = world.score(&q, &[0.0; 3], common::schedule().alpha_bar(t)).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-12), "{s:?}");
    }
}

#[test]
fn fully_noised_world_is_standard_normal() {
    let world = common::world("fixture-a.json");
    let table = common::load("fixture-a.json").prompts;
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let ab = 1e-12;
    for name in ["a crowd", "a man", "a female nurse"] {
        let q = table.get(name).unwrap();
        let y: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
        let s = world.score(q, &y, ab).unwrap();
        for i in 0..3 {
            assert!((s[i] + y[i]).abs() < 1e-5, "{name}: {s:?}");
        }
    }
}

#[test]
fn mixture_components_follow_variance_preserving_noising() {
    let world = common::world("fixture-a.json");
    let q = common::load("fixture-a.json").prompts.get("a crowd").unwrap().clone();
    let sched = common::schedule();
    let clean = world.mixture_components(&q, 1.0).unwrap();
    for t in [1, 10, 500, 1000] {
        let ab = sched.alpha_bar(t);
        let noisy = world.mixture_components(&q, ab).unwrap();
        for (c0, ct) in clean.iter().zip(&noisy) {
            assert_eq!(c0.values, ct.values);
            assert_eq!(c0.weight, ct.weight);
            for i in 0..3 {
                assert!((ct.mean[i] - ab.sqrt() * c0.mean[i]).abs() < 1e-12);
                for j in 0..3 {
                    let want = ab * c0.cov[(i, j)] + if i == j { 1.0 - ab } else { 0.0 };
                    assert!((ct.cov[(i, j)] - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn ground_truth_sample_mean_within_clt_bounds() {
    let world = common::world("fixture-a.json");
    let q = common::load("fixture-a.json").prompts.get("a crowd").unwrap().clone();
    let joint = [0.3, 0.1, 0.1, 0.1, 0.25, 0.15];
    let n = 20_000;
    let samples = world.sample_ground_truth(&q, n, 3).unwrap();
    let mut mean = [0.0; 3];
    let mut second = [0.0; 3];
    for s in 0..2 {
        for p in 0..3 {
            let mu = [Z_MEAN[s], W_MEAN[p], 0.0];
            for i in 0..3 {
                mean[i] += joint[s * 3 + p] * mu[i];
                second[i] += joint[s * 3 + p] * (mu[i] * mu[i] + VAR[i]);
            }
        }
    }
    let got = moments(&samples).unwrap();
    for i in 0..3 {
        let sd = (second[i] - mean[i] * mean[i]).sqrt();
        assert!((got.mean[i] - mean[i]).abs() < 4.0 * sd / (n as f64).sqrt(), "coordinate {i}");
    }
}

#[test]
fn delta_prompt_covariance_is_the_emission_covariance() {
    let world = common::world("fixture-a.json");
    let q = common::load("fixture-a.json").prompts.get("a man mathematician").unwrap().clone();
    let samples = world.sample_ground_truth(&q, 20_000, 4).unwrap();
    let m = moments(&samples).unwrap();
    let mut frob = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { VAR[i] } else { 0.0 };
            frob += (m.covariance[i][j] - want).powi(2);
        }
    }
    assert!(frob.sqrt() <= 0.05, "{:?}", m.covariance);
    assert!((m.mean[0] - 1.0).abs() < 0.02 && (m.mean[1] + 2.0).abs() < 0.02);
}

#[test]
fn separable_world_w_scores_ignore_sex() {
    let world = common::world("fixture-a.json");
    let table = common::load("fixture-a.json").prompts;
    assert!(world.is_separable(&["sex"]).unwrap());
    let w = world.coordinates_of(&["profession"]).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    for _ in 0..100 {
        let y: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
        let ab = common::schedule().alpha_bar(rng.random_range(1..=1000));
        let a = world.score(table.get("a man").unwrap(), &y, ab).unwrap();
        let b = world.score(table.get("a woman").unwrap(), &y, ab).unwrap();
        for &i in &w {
            assert!((a[i] - b[i]).abs() <= 1e-10);
        }
    }
}

#[test]
fn interaction_world_couples_the_blocks() {
    let world = common::world("interaction-failure.json");
    assert!(!world.is_separable(&["sex"]).unwrap());
    let sex = world.factors()[0].clone();
    let prof = world.factors()[1].clone();
    let male = ConceptDistribution::delta(&sex, "male").unwrap();
    let base = ConceptDistribution::uniform(&sex);
    let qws: Vec<ConceptDistribution> = ["mathematician", "nurse", "person"]
        .iter()
        .map(|v| ConceptDistribution::delta(&prof, v).unwrap())
        .collect();
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let y: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
        let ab = common::schedule().alpha_bar(rng.random_range(0..=500));
        let centered: Vec<Vec<f64>> = qws
            .iter()
            .map(|w| {
                let a = world.score(&male.product(w).unwrap(), &y, ab).unwrap();
                let b = world.score(&base.product(w).unwrap(), &y, ab).unwrap();
                a.iter().zip(&b).map(|(x, v)| x - v).collect()
            })
            .collect();
        for c in &centered[1..] {
            for (a, b) in c.iter().zip(&centered[0]) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst >= 0.1, "max dependence {worst}");
}
