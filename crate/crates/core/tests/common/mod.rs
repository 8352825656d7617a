#![allow(dead_code)]

use psweight::Dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Mixed binary/continuous covariates with a logistic assignment model of
/// modest strength and a linear outcome with effect 1.
pub fn synthetic(seed: u64, n: usize, k: usize) -> Dataset {
    let mut r = rng(seed);
    let binary: Vec<bool> = (0..k).map(|j| j % 3 == 2).collect();
    let beta: Vec<f64> = (0..k).map(|_| r.random_range(-0.6..0.6)).collect();
    let mut cols = vec![Vec::with_capacity(n); k];
    let mut z = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let mut eta = r.random_range(-0.5..0.5);
        let mut mu = 0.0;
        for j in 0..k {
            let v = if binary[j] {
                (r.random::<f64>() < 0.4) as u8 as f64
            } else {
                2.0 + 1.5 * normal(&mut r)
            };
            eta += beta[j] * (v - if binary[j] { 0.4 } else { 2.0 });
            mu += 0.3 * v;
            cols[j].push(v);
        }
        let t = r.random::<f64>() < logistic(eta);
        z.push(t);
        y.push(mu + if t { 1.0 } else { 0.0 } + normal(&mut r));
    }
    let columns = cols
        .into_iter()
        .enumerate()
        .map(|(j, c)| (format!("x{}", j + 1), c))
        .collect();
    Dataset::new(z, Some(y), columns, None).expect("synthetic data is valid")
}

/// Random dataset whose covariates take a few discrete values, so every
/// design point is shared by many units.
pub fn discrete_design(seed: u64, n: usize) -> Dataset {
    let mut r = rng(seed);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let va = r.random_range(0..3) as f64;
        let vb = r.random_range(0..2) as f64;
        let t = r.random::<f64>() < logistic(-0.5 + 0.5 * va - 0.7 * vb);
        a.push(va);
        b.push(vb);
        z.push(t);
        y.push(va * 2.0 - vb + if t { 1.5 + 0.5 * va } else { 0.0 } + normal(&mut r));
    }
    Dataset::new(z, Some(y), vec![("a".into(), a), ("b".into(), b)], None).unwrap()
}
