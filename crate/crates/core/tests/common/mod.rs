//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use lava_core::data::generate_synthetic;
use lava_core::losses::nce_with;
use lava_core::rng::Xorshift64Star;
use lava_core::{Config, Dataset, Graph, ModalityFeatures, ModelConfig, NceForm, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> Xorshift64Star {
    Xorshift64Star::new(seed)
}

pub fn gaussian(shape: &[usize], r: &mut Xorshift64Star) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(r)).collect()).unwrap()
}

/// `n × d` matrix with unit-norm rows.
pub fn unit_rows(n: usize, d: usize, r: &mut Xorshift64Star) -> Tensor {
    let mut data = gaussian(&[n, d], r).to_vec();
    for row in data.chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    Tensor::new(vec![n, d], data).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Batch-aggregate NCE written as the plain ratio of exponential sums.
pub fn oracle_nce(z: &Tensor, zp: &Tensor, tau: f64, mask: &[bool]) -> f64 {
    let d = z.shape()[1];
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let (mut pos, mut neg) = (0.0, 0.0);
    for &i in &rows {
        for &j in &rows {
            let s = (dot(&z.data()[i * d..(i + 1) * d], &zp.data()[j * d..(j + 1) * d]) / tau).exp();
            if i == j {
                pos += s;
            } else {
                neg += s;
            }
        }
    }
    -(pos / (pos + neg)).ln()
}

/// Row-wise NCE: mean over rows of `−log(s_ii / Σ_j s_ij)`.
pub fn oracle_nce_per_row(z: &Tensor, zp: &Tensor, tau: f64, mask: &[bool]) -> f64 {
    let d = z.shape()[1];
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let mut total = 0.0;
    for &i in &rows {
        let s = |j: usize| (dot(&z.data()[i * d..(i + 1) * d], &zp.data()[j * d..(j + 1) * d]) / tau).exp();
        let denom: f64 = rows.iter().map(|&j| s(j)).sum();
        total -= (s(i) / denom).ln();
    }
    total / rows.len() as f64
}

pub fn nce_value(form: NceForm, z: &Tensor, zp: &Tensor, tau: f64, mask: &[bool]) -> lava_core::Result<f64> {
    let mut g = Graph::inference();
    let a = g.constant(z.clone());
    let b = g.constant(zp.clone());
    let l = nce_with(&mut g, form, a, b, tau, mask)?;
    g.value(l).item()
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_v_raw: 3,
        d_a_raw: 2,
        vocab: 7,
        max_text_len: 4,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        ff_dim: 8,
        d_proj: 4,
        positional_encoding: true,
    }
}

/// Random batch items; audio and text present with the given probabilities.
pub fn random_items(cfg: &ModelConfig, n: usize, p_audio: f64, p_text: f64, r: &mut Xorshift64Star) -> Vec<ModalityFeatures> {
    (0..n)
        .map(|_| {
            let t = r.random_range(1..4);
            ModalityFeatures {
                video: gaussian(&[t, cfg.d_v_raw], r),
                audio: (r.random::<f64>() < p_audio).then(|| gaussian(&[r.random_range(1..4), cfg.d_a_raw], r)),
                text: (r.random::<f64>() < p_text).then(|| {
                    let len = r.random_range(1..=cfg.max_text_len);
                    (0..len).map(|_| r.random_range(0..cfg.vocab)).collect()
                }),
            }
        })
        .collect()
}

/// A small config whose data and model sections agree; one seed for everything.
pub fn small_config(n_samples: usize, seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.data.n_samples = n_samples;
    cfg.data.clips_per_video = 2;
    cfg.data.t_v = 4;
    cfg.data.t_a = 4;
    cfg.data.l_text = 4;
    cfg.data.d_v_raw = 6;
    cfg.data.d_a_raw = 5;
    cfg.data.vocab = 16;
    cfg.model = ModelConfig {
        d_v_raw: 6,
        d_a_raw: 5,
        vocab: 16,
        max_text_len: 4,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        ff_dim: 16,
        d_proj: 4,
        positional_encoding: true,
    };
    cfg.train.seed = Some(seed);
    cfg.train.batch_size = 8;
    cfg.train.epochs = 2;
    cfg.eval.epochs = 3;
    cfg
}

pub fn write_dataset(cfg: &Config, dir: &Path) -> Dataset {
    generate_synthetic(&cfg.data, dir, false).unwrap();
    Dataset::load(dir).unwrap()
}
