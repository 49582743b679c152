//! Helpers shared by the integration suites. Written against first
//! principles so they can check the library rather than echo it.
#![allow(dead_code)]

use lcpo_core::synth::PreferencePair;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Plain minibatch DPO on a linear policy: minimise the batch mean of
/// `-log sigmoid(beta * ((theta - theta_ref) . (phi_w - phi_l)))` with fixed
/// learning rate, reshuffling every epoch from `seed`. Returns theta after
/// every batch.
pub fn plain_dpo_trajectory(
    data: &[PreferencePair],
    theta_ref: &[f64],
    beta: f64,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let d = theta_ref.len();
    let mut theta = theta_ref.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::new();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let mut grad = vec![0.0; d];
            for &i in chunk {
                let f = &data[i].features;
                let diff: Vec<f64> = f.phi_w.iter().zip(&f.phi_l).map(|(a, b)| a - b).collect();
                let h: f64 = diff.iter().zip(theta.iter().zip(theta_ref)).map(|(x, (t, r))| x * (t - r)).sum();
                let coef = -beta * sigmoid(-beta * h);
                for (g, x) in grad.iter_mut().zip(&diff) {
                    *g += coef * x;
                }
            }
            for (t, g) in theta.iter_mut().zip(&grad) {
                *t -= lr * g / chunk.len() as f64;
            }
            out.push(theta.clone());
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
