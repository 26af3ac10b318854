//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use confaug::backbone::BackboneConfig;
use confaug::dataset::LabeledImages;
use confaug::nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_backbone(classes: usize) -> BackboneConfig {
    BackboneConfig {
        image_size: 8,
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        blocks_per_level: 1,
        embedding_dim: 16,
        se_reduction: 4,
        attention_heads: 2,
        class_count: classes,
        dropout: 0.0,
        norm_groups: 4,
        linear_attention_levels: vec![0, 1],
    }
}

/// ᾱ by a running product, β by the textbook formulas.
pub fn linear_betas(t: usize, b0: f64, b1: f64) -> Vec<f64> {
    if t == 1 {
        return vec![b0];
    }
    (0..t).map(|i| b0 + (b1 - b0) * i as f64 / (t - 1) as f64).collect()
}

pub fn cosine_betas(t: usize) -> Vec<f64> {
    let f = |i: f64| (((i / t as f64) + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
    (0..t).map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).min(0.999)).collect()
}

pub fn cumprod(betas: &[f64]) -> Vec<f64> {
    let mut acc = 1.0;
    betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b[0].len();
    (0..n).map(|i| (0..m).map(|j| (0..b.len()).map(|k| a[i][k] * b[k][j]).sum()).collect()).collect()
}

/// Symmetric PSD square root through Jacobi eigenvectors.
pub fn sym_sqrt(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = if theta == 0.0 { 1.0 } else { theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt()) };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let d: Vec<f64> = (0..n).map(|i| m[i][i].max(0.0).sqrt()).collect();
    (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| v[i][k] * d[k] * v[j][k]).sum()).collect()).collect()
}

/// d² through Tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}).
pub fn frechet_oracle(m1: &[f64], c1: &[Vec<f64>], m2: &[f64], c2: &[Vec<f64>]) -> f64 {
    let r = sym_sqrt(c1);
    let inner = matmul(&matmul(&r, c2), &r);
    let sym: Vec<Vec<f64>> = (0..inner.len()).map(|i| (0..inner.len()).map(|j| 0.5 * (inner[i][j] + inner[j][i])).collect()).collect();
    let tr_sqrt: f64 = jacobi_eigenvalues(sym).iter().map(|l| l.max(0.0).sqrt()).sum();
    let mean: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b) * (a - b)).sum();
    let tr: f64 = (0..c1.len()).map(|i| c1[i][i] + c2[i][i]).sum();
    mean + tr - 2.0 * tr_sqrt
}

/// Random SPD matrix A·Aᵀ/D + εI.
pub fn random_spd(d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let a: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| (0..d).map(|k| a[i][k] * a[j][k]).sum::<f64>() / d as f64 + if i == j { 0.05 } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Central difference of `f` at coordinate `i` of `x`.
pub fn central_diff(f: &dyn Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, i: usize, h: f64) -> f64 {
    let mut p = x.clone();
    p.data_mut()[i] += h;
    let mut m = x.clone();
    m.data_mut()[i] -= h;
    (f(&p) - f(&m)) / (2.0 * h)
}

/// |a − n| ≤ rel·max(|a|, |n|), with an absolute floor for entries that
/// are numerically zero.
pub fn rel_close(a: f64, n: f64, rel: f64) -> bool {
    (a - n).abs() <= rel * a.abs().max(n.abs()) + 1e-9
}

/// Two linearly separable classes: bright left half versus bright right half.
pub fn halves_dataset(per_class: usize, size: usize, seed: u64, prefix: &str) -> LabeledImages<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut keys = Vec::new();
    for i in 0..2 * per_class {
        let c = i % 2;
        let data: Vec<f32> = (0..size * size)
            .map(|p| {
                let left = (p % size) < size / 2;
                let base = if left == (c == 0) { 0.8 } else { -0.8 };
                base + rng.random_range(-0.1..0.1)
            })
            .collect();
        images.push(Tensor::new(&[1, size, size], data).unwrap());
        labels.push(c);
        keys.push(format!("{prefix}{i:04}"));
    }
    LabeledImages { size, images, labels, keys }
}

/// Overwrites every parameter whose name starts with `prefix` with
/// uniform values in [-scale, scale].
pub fn randomize<T: confaug::nn::Scalar>(
    ps: &mut confaug::nn::ParamStore<T>,
    prefix: &str,
    scale: f64,
    rng: &mut impl Rng,
) -> usize {
    let ids: Vec<_> = ps.ids().filter(|&id| ps.name(id).starts_with(prefix)).collect();
    for &id in &ids {
        for v in ps.get_mut(id).data_mut() {
            *v = T::of(rng.random_range(-scale..=scale));
        }
    }
    ids.len()
}
