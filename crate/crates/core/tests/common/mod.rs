#![allow(dead_code)]

use densratio::simulation::sample_mvn;
use densratio::{Group, Observation, SampleSet};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn mvn(mu: &[f64], sigma: &[&[f64]], n: usize, rng: &mut ChaCha8Rng) -> Vec<Observation> {
    let d = mu.len();
    let s = DMatrix::from_row_slice(d, d, &sigma.concat());
    sample_mvn(mu, &s, n, rng).unwrap()
}

/// Case `N(0, S)` versus reference `N((1,1), S)` with `S = [[3,1],[1,2]]`;
/// the true tilt is `alpha = 0.3`, `beta = (-0.2, -0.4)`.
pub fn shifted_gaussians(n1: usize, n2: usize, seed: u64) -> SampleSet {
    let mut r = rng(seed);
    let s: &[&[f64]] = &[&[3.0, 1.0], &[1.0, 2.0]];
    let a = mvn(&[0.0, 0.0], s, n1, &mut r);
    let b = mvn(&[1.0, 1.0], s, n2, &mut r);
    SampleSet::new(vec![Group::new("case", a), Group::new("control", b)], 1).unwrap()
}

/// Profile log-likelihood written directly from its definition.
pub fn loglik_oracle(data: &SampleSet, alpha: &[f64], beta: &[Vec<f64>]) -> f64 {
    let groups = data.groups();
    let m = data.reference();
    let n_m = groups[m].len() as f64;
    let tilted: Vec<usize> = (0..groups.len()).filter(|&g| g != m).collect();
    let eta = |j: usize, t: &[f64]| alpha[j] + beta[j].iter().zip(t).map(|(b, x)| b * x).sum::<f64>();
    let n: usize = groups.iter().map(|g| g.len()).sum();
    let mut l = -(n as f64) * n_m.ln();
    for g in groups {
        for o in &g.observations {
            let t = o.values();
            let d: f64 = 1.0
                + tilted
                    .iter()
                    .enumerate()
                    .map(|(j, &gj)| groups[gj].len() as f64 / n_m * eta(j, t).exp())
                    .sum::<f64>();
            l -= d.ln();
        }
    }
    for (j, &gj) in tilted.iter().enumerate() {
        for o in &groups[gj].observations {
            l += eta(j, o.values());
        }
    }
    l
}
