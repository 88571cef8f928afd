//! Closed-form and published-value oracles.

use std::time::Instant;

use mmpfn_core::encoders::synthetic_embedding_provider;
use mmpfn_core::imbalance::{monte_carlo_attention_mass, ImbalanceSpec};
use mmpfn_core::train::rank_aggregate;
use mmpfn_core::{Rng, Tensor};

#[test]
fn iid_scores_split_mass_by_token_count() {
    let start = Instant::now();
    for (seed, (n_i, n_t)) in [(1usize, 9usize), (8, 8), (20, 5)].into_iter().enumerate() {
        let spec = ImbalanceSpec::gaussian(n_i, n_t, 16, 1.0, 0.0, 10_000, seed as u64).unwrap();
        let r = monte_carlo_attention_mass(&spec).unwrap();
        // Exchangeable scores give every token the same expected share.
        let share = n_i as f64 / (n_i + n_t) as f64;
        assert!((r.predicted_mass - share).abs() < 1e-12);
        assert!((r.empirical_mass - share).abs() <= 0.03, "({n_i},{n_t}): {} vs {share}", r.empirical_mass);
        assert!((r.partition[0] + r.partition[1] - 1.0).abs() < 1e-12);
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn constant_scores_match_exactly() {
    for (n_i, n_t, a, b) in [(20, 5, 0.0, 0.0), (3, 7, 0.4, -1.2), (1, 1, 2.0, 0.5)] {
        let r = monte_carlo_attention_mass(&ImbalanceSpec::constant(n_i, n_t, a, b)).unwrap();
        let (wi, wt) = (n_i as f64 * b.exp(), n_t as f64 * a.exp());
        let exact = wi / (wi + wt);
        assert!((r.empirical_mass - exact).abs() <= 1e-12);
        assert!((r.predicted_mass - exact).abs() <= 1e-12);
    }
}

#[test]
fn first_order_gap_shrinks_with_score_variance() {
    let gap = |v: f64| {
        let spec = ImbalanceSpec::gaussian(20, 5, 16, v, 1.0, 10_000, 9).unwrap();
        let r = monte_carlo_attention_mass(&spec).unwrap();
        (r.empirical_mass - r.predicted_mass).abs()
    };
    let gaps = [gap(1.0), gap(0.1), gap(0.01)];
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    assert!(gaps[2] < 1e-3);
}

#[test]
fn lone_modality_takes_all_mass() {
    let spec = ImbalanceSpec::gaussian(6, 0, 16, 1.0, 0.0, 500, 2).unwrap();
    let r = monte_carlo_attention_mass(&spec).unwrap();
    assert_eq!(r.empirical_mass, 1.0);
    assert_eq!(r.predicted_mass, 1.0);
}

/// Plain logistic regression by full-batch gradient descent on standardized
/// inputs. Returns held-out accuracy.
fn probe_accuracy(x: &Tensor, y: &[f64], n_fit: usize) -> f64 {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for i in 0..n_fit {
        for (j, v) in x.row(i).iter().enumerate() {
            mean[j] += v / n_fit as f64;
        }
    }
    for i in 0..n_fit {
        for (j, v) in x.row(i).iter().enumerate() {
            sd[j] += (v - mean[j]).powi(2) / n_fit as f64;
        }
    }
    let z = |i: usize| -> Vec<f64> {
        x.row(i).iter().enumerate().map(|(j, v)| (v - mean[j]) / sd[j].sqrt().max(1e-12)).collect()
    };
    let rows: Vec<Vec<f64>> = (0..n).map(z).collect();
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..2000 {
        let (mut gw, mut gb) = (vec![0.0; d], 0.0);
        for i in 0..n_fit {
            let logit: f64 = b + rows[i].iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = 1.0 / (1.0 + (-logit).exp()) - y[i];
            gb += err;
            gw.iter_mut().zip(&rows[i]).for_each(|(g, a)| *g += err * a);
        }
        b -= 0.5 * gb / n_fit as f64;
        w.iter_mut().zip(&gw).for_each(|(c, g)| *c -= 0.5 * g / n_fit as f64);
    }
    let hits = (n_fit..n)
        .filter(|&i| {
            let logit: f64 = b + rows[i].iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            (logit > 0.0) == (y[i] > 0.5)
        })
        .count();
    hits as f64 / (n - n_fit) as f64
}

#[test]
fn provider_keeps_a_binary_latent_linearly_recoverable() {
    let n = 1000;
    let mut rng = Rng::new(5);
    let mut latent = Vec::with_capacity(n * 4);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let bit = if rng.bernoulli(0.5) { 1.0 } else { 0.0 };
        y.push(bit);
        latent.push(2.0 * bit - 1.0);
        latent.extend((0..3).map(|_| rng.normal()));
    }
    let latent = Tensor::new(vec![n, 4], latent).unwrap();
    for seed in 0..3 {
        let set = synthetic_embedding_provider("image", &latent, 16, 0.1, seed).unwrap();
        let acc = probe_accuracy(&set.vectors, &y, 500);
        assert!(acc >= 0.95, "seed {seed}: probe accuracy {acc}");
    }
}

#[test]
fn published_image_table_ranks() {
    // Methods in table order; columns PU20, Mass, Calc, Petfinder.
    let table = [
        [Some(82.17), Some(71.27), Some(73.31), Some(36.33)], // TabPFN
        [Some(80.43), Some(78.31), Some(72.09), Some(38.69)],
        [Some(81.09), Some(76.28), Some(71.04), Some(38.81)],
        [Some(76.61), Some(57.62), Some(60.12), Some(36.61)],
        [Some(78.75), Some(73.12), Some(67.96), Some(37.28)],
        [Some(74.65), Some(68.10), Some(71.83), Some(37.03)],
        [Some(80.35), None, Some(72.70), Some(39.25)],
        [Some(85.22), Some(74.53), Some(75.40), Some(40.74)], // MMPFN
    ];
    let table: Vec<Vec<Option<f64>>> = table.iter().map(|r| r.to_vec()).collect();
    let ranks = rank_aggregate(&table).unwrap();
    assert_eq!(ranks[7], 1.50);
    assert_eq!(ranks[0], 4.25);
    let published = [4.25, 3.25, 3.50, 7.25, 5.50, 6.25, 10.0 / 3.0, 1.50];
    for (r, p) in ranks.iter().zip(published) {
        assert!((r - p).abs() < 1e-12, "{ranks:?}");
    }
}
