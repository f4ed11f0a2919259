#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use xite::store::{Dataset, EmbeddingRecord, Role};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn gaussian_f32(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    gaussian(rng, d).into_iter().map(|x| x as f32).collect()
}

/// Labeled source-language dataset with uniform random labels.
pub fn labeled(name: &str, prefix: &str, n: usize, d: usize, classes: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let records = (0..n)
        .map(|i| {
            EmbeddingRecord::new(
                format!("{prefix}{i:05}"),
                "en",
                Some(rng.random_range(0..classes as u32)),
                gaussian_f32(rng, d),
            )
        })
        .collect();
    Dataset::new(name, d, classes, Role::Source, records).unwrap()
}

pub fn unlabeled(name: &str, prefix: &str, n: usize, d: usize, lang: &str, rng: &mut ChaCha8Rng) -> Dataset {
    let records = (0..n)
        .map(|i| EmbeddingRecord::new(format!("{prefix}{i:05}"), lang, None, gaussian_f32(rng, d)))
        .collect();
    Dataset::new(name, d, 0, Role::Target, records).unwrap()
}

fn f64s(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Exhaustive top-m: every cosine computed directly, sorted by descending
/// cosine then ascending id.
pub fn brute_force_top_m(query: &[f32], source: &Dataset, m: usize) -> Vec<(String, f64)> {
    let q = f64s(query);
    let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut all: Vec<(String, f64)> = source
        .records
        .iter()
        .map(|r| {
            let s = f64s(&r.vec);
            let sn = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = q.iter().zip(&s).map(|(a, b)| a * b).sum();
            (r.id.clone(), dot / (qn * sn))
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all.truncate(m);
    all
}

/// Largest singular value of a dense matrix (rows given) by power
/// iteration on `AᵀA`.
pub fn spectral_norm(a: &[Vec<f64>]) -> f64 {
    let cols = a.first().map_or(0, |r| r.len());
    let mut v = vec![1.0; cols];
    let mut sigma = 0.0;
    for _ in 0..500 {
        let av: Vec<f64> = a.iter().map(|r| r.iter().zip(&v).map(|(x, y)| x * y).sum()).collect();
        let mut atav = vec![0.0; cols];
        for (r, s) in a.iter().zip(&av) {
            for (t, x) in atav.iter_mut().zip(r) {
                *t += x * s;
            }
        }
        let n = atav.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        v = atav.into_iter().map(|x| x / n).collect();
        sigma = n.sqrt();
    }
    sigma
}

/// Largest principal angle (degrees) between two equal-dimension
/// subspaces given by orthonormal vectors: `sin θ_max = ‖(I − VVᵀ)U‖₂`.
pub fn max_principal_angle_deg(u: &[Vec<f64>], v: &[Vec<f64>]) -> f64 {
    let residual: Vec<Vec<f64>> = u
        .iter()
        .map(|ui| {
            let mut r = ui.clone();
            for vj in v {
                let c: f64 = ui.iter().zip(vj).map(|(a, b)| a * b).sum();
                for (x, y) in r.iter_mut().zip(vj) {
                    *x -= c * y;
                }
            }
            r
        })
        .collect();
    spectral_norm(&residual).min(1.0).asin().to_degrees()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Random orthonormal `k`-frame in `d` dimensions, by Gram-Schmidt.
pub fn random_frame(seed: u64, d: usize, k: usize) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let mut frame: Vec<Vec<f64>> = Vec::new();
    while frame.len() < k {
        let mut v = gaussian(&mut r, d);
        for _ in 0..2 {
            for u in &frame {
                let c = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            frame.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    frame
}
