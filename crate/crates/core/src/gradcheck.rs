//! Central finite-difference verification of every backward rule, the
//! layers built from them and the full pre-training loss.
//!
//! Each case reduces its output to a scalar with a random weighting so that
//! every output element contributes a distinct amount. Primitive ops are
//! checked element by element; layers and losses are checked with one random
//! directional derivative per parameter tensor and per input.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, OpKind, Var};
use crate::encoders::{embed_batch, encode_audio, encode_text, encode_video, project, EncoderStack, ModalityFeatures, ModelConfig, Modality, Space};
use crate::error::{Error, Result};
use crate::losses::{compute_centroids, loss_avt, loss_total, nce_with, LossConfig, NceForm};
use crate::nn::{EmbeddingTable, Linear, Mlp, MultiHeadAttention, Parameterized, TransformerEncoder};
use crate::rng::{stream, Xorshift64Star};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;
/// Fresh directions tried before accepting a stencil that straddles a ReLU kink.
const KINK_RETRIES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub worst_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub ops: Vec<OpReport>,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&str> {
        self.ops.iter().filter(|o| !o.passed).map(|o| o.op.as_str()).collect()
    }
}

/// Loss along a perturbation `x + h·dir`, with the ReLU pattern it produced.
type Shifted<'a> = dyn Fn(&Tensor, f64) -> Result<(f64, Vec<bool>)> + 'a;

/// `|a − n| / max(1, |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn uniform(shape: &[usize], rng: &mut Xorshift64Star) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, so ReLU kinks sit outside the FD stencil.
fn away_from_zero(shape: &[usize], rng: &mut Xorshift64Star) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random unit-norm direction shaped like `t`.
fn direction_like(t: &Tensor, rng: &mut Xorshift64Star) -> Tensor {
    let data: Vec<f64> = (0..t.numel()).map(|_| StandardNormal.sample(rng)).collect();
    let norm = data.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    Tensor::new(t.shape().to_vec(), data.iter().map(|v| v / norm).collect()).unwrap()
}

fn reduce(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    if g.value(out).rank() == 0 {
        return Ok(out);
    }
    let wv = g.constant(w.clone());
    let p = g.mul(out, wv)?;
    g.sum(p)
}

type OpFn<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Elementwise check of the gradient with respect to every input.
fn check_op(f: &OpFn, inputs: &[Tensor], rng: &mut Xorshift64Star) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let w = uniform(g.value(out).shape(), rng);
    let loss = reduce(&mut g, out, &w)?;
    g.backward(loss)?;
    let grads: Vec<Option<Tensor>> = vars.iter().map(|&v| g.grad(v)).collect();

    let value = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let l = reduce(&mut g, out, &w)?;
        g.value(l).item()
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads[k].clone().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for j in 0..t.numel() {
            let x = t.data()[j];
            work[k].data_mut()[j] = x + STEP;
            let up = value(&work)?;
            work[k].data_mut()[j] = x - STEP;
            let down = value(&work)?;
            work[k].data_mut()[j] = x;
            worst = worst.max(rel_err(analytic.data()[j], (up - down) / (2.0 * STEP)));
        }
    }
    Ok(worst)
}

fn perturb<M: Parameterized>(m: &mut M, name: &str, dir: &Tensor, scale: f64) {
    m.visit_params_mut("", &mut |n, p| {
        if n == name {
            p.data_mut().iter_mut().zip(dir.data()).for_each(|(v, d)| *v += scale * d);
        }
    });
}

fn dot(a: &Option<Tensor>, d: &Tensor) -> f64 {
    a.as_ref().map_or(0.0, |a| a.data().iter().zip(d.data()).map(|(x, y)| x * y).sum())
}

type ModuleFn<'a, M> = dyn Fn(&mut Graph, &M, &[Var]) -> Result<Var> + 'a;

/// Directional-derivative check over every parameter tensor of `module` and
/// every input.
fn check_module<M: Parameterized + Clone>(module: &M, inputs: &[Tensor], f: &ModuleFn<M>, rng: &mut Xorshift64Star) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, module, &vars)?;
    let w = uniform(g.value(out).shape(), rng);
    let loss = reduce(&mut g, out, &w)?;
    g.backward(loss)?;

    let value = |m: &M, ins: &[Tensor]| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, m, &vars)?;
        let l = reduce(&mut g, out, &w)?;
        Ok((g.value(l).item()?, g.relu_pattern()))
    };
    // Central difference along `dir`, redrawing directions whose stencil
    // crosses a ReLU kink.
    let directional = |shifted: &Shifted, like: &Tensor, grad: Option<Tensor>, rng: &mut Xorshift64Star| -> Result<f64> {
        let mut err = 0.0;
        for _ in 0..KINK_RETRIES {
            let dir = direction_like(like, rng);
            let (up, pu) = shifted(&dir, STEP)?;
            let (down, pd) = shifted(&dir, -STEP)?;
            err = rel_err(dot(&grad, &dir), (up - down) / (2.0 * STEP));
            if pu == pd {
                break;
            }
        }
        Ok(err)
    };

    let mut params = Vec::new();
    module.visit_params("", &mut |n, p| params.push((n.to_string(), p.clone(), g.param_grad(p))));

    let mut worst = 0.0f64;
    for (name, p, grad) in params {
        let shifted = |dir: &Tensor, s: f64| {
            let mut m = module.clone();
            perturb(&mut m, &name, dir, s);
            value(&m, inputs)
        };
        worst = worst.max(directional(&shifted, &p, grad, rng)?);
    }
    for (k, t) in inputs.iter().enumerate() {
        let shifted = |dir: &Tensor, s: f64| {
            let mut ins = inputs.to_vec();
            ins[k].data_mut().iter_mut().zip(dir.data()).for_each(|(v, d)| *v += s * d);
            value(module, &ins)
        };
        worst = worst.max(directional(&shifted, t, g.grad(vars[k]), rng)?);
    }
    Ok(worst)
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_v_raw: 5,
        d_a_raw: 4,
        vocab: 13,
        max_text_len: 6,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        ff_dim: 12,
        d_proj: 4,
        positional_encoding: true,
    }
}

fn random_features(cfg: &ModelConfig, audio: bool, text: bool, rng: &mut Xorshift64Star) -> ModalityFeatures {
    let tv = rng.random_range(1..4);
    let ta = rng.random_range(1..4);
    let tl = rng.random_range(1..=cfg.max_text_len.min(4));
    ModalityFeatures {
        video: uniform(&[tv, cfg.d_v_raw], rng),
        audio: audio.then(|| uniform(&[ta, cfg.d_a_raw], rng)),
        text: text.then(|| (0..tl).map(|_| rng.random_range(0..cfg.vocab)).collect()),
    }
}

/// A batch where at least two samples carry every modality.
fn random_batch(cfg: &ModelConfig, n: usize, rng: &mut Xorshift64Star) -> Vec<ModalityFeatures> {
    (0..n)
        .map(|i| {
            let full = i < 2 || rng.random::<f64>() < 0.5;
            let text = full || rng.random::<bool>();
            random_features(cfg, full, text, rng)
        })
        .collect()
}

fn distinct_indices(n: usize, k: usize, rng: &mut Xorshift64Star) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        all.swap(i, j);
    }
    all.truncate(k);
    all
}

const TAUS: [f64; 3] = [0.07, 0.5, 1.0];
const FORMS: [NceForm; 2] = [NceForm::PerRow, NceForm::Aggregate];

/// One instance of the named case.
fn run_case(name: &str, rng: &mut Xorshift64Star, instance: usize) -> Result<f64> {
    let r = rng;
    let n = r.random_range(2..5);
    let m = r.random_range(2..5);
    let k = r.random_range(2..5);
    match name {
        "matmul" => {
            let ins = [uniform(&[n, k], r), uniform(&[k, m], r)];
            check_op(&|g, v| g.matmul(v[0], v[1]), &ins, r)
        }
        "matmul_transposed" => {
            let ins = [uniform(&[n, k], r), uniform(&[m, k], r)];
            check_op(&|g, v| g.matmul_ex(v[0], v[1], true), &ins, r)
        }
        "transpose" => check_op(&|g, v| g.transpose(v[0]), &[uniform(&[n, m], r)], r),
        "add" => check_op(&|g, v| g.add(v[0], v[1]), &[uniform(&[n, m], r), uniform(&[n, m], r)], r),
        "sub" => check_op(&|g, v| g.sub(v[0], v[1]), &[uniform(&[n, m], r), uniform(&[n, m], r)], r),
        "mul" => check_op(&|g, v| g.mul(v[0], v[1]), &[uniform(&[n, m], r), uniform(&[n, m], r)], r),
        "scale" => {
            let c = r.random_range(-2.0..2.0);
            check_op(&move |g, v| g.scale(v[0], c), &[uniform(&[n, m], r)], r)
        }
        "add_row_bias" => check_op(&|g, v| g.add_row_bias(v[0], v[1]), &[uniform(&[n, m], r), uniform(&[m], r)], r),
        "relu" => check_op(&|g, v| g.relu(v[0]), &[away_from_zero(&[n, m], r)], r),
        "softmax_rows" => {
            let x = uniform(&[n, m], r);
            let x = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| 3.0 * v).collect())?;
            check_op(&|g, v| g.softmax_rows(v[0]), &[x], r)
        }
        "l2_normalize_rows" => check_op(&|g, v| g.l2_normalize_rows(v[0]), &[away_from_zero(&[n, m], r)], r),
        "layer_norm" => {
            let d = m + 1;
            let ins = [uniform(&[n, d], r), uniform(&[d], r), uniform(&[d], r)];
            check_op(&|g, v| g.layer_norm(v[0], v[1], v[2]), &ins, r)
        }
        "mean_pool" => check_op(&|g, v| g.mean_rows(v[0]), &[uniform(&[n, m], r)], r),
        "stack_rows" => {
            let ins: Vec<Tensor> = (0..n).map(|_| uniform(&[m], r)).collect();
            check_op(&|g, v| g.stack_rows(v), &ins, r)
        }
        "concat_cols" => {
            let ins = [uniform(&[n, m], r), uniform(&[n, k], r)];
            check_op(&|g, v| g.concat_cols(v), &ins, r)
        }
        "slice_cols" => {
            let w = m + k;
            let start = r.random_range(0..w);
            let end = r.random_range(start + 1..=w);
            check_op(&move |g, v| g.slice_cols(v[0], start, end), &[uniform(&[n, w], r)], r)
        }
        "gather_rows" => {
            let idx: Vec<usize> = (0..k + 1).map(|_| r.random_range(0..n)).collect();
            check_op(&move |g, v| g.gather_rows(v[0], &idx), &[uniform(&[n, m], r)], r)
        }
        "scatter_rows" => {
            let total = n + k;
            let idx = distinct_indices(total, n, r);
            check_op(&move |g, v| g.scatter_rows(v[0], &idx, total), &[uniform(&[n, m], r)], r)
        }
        "scale_rows" => {
            let f: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
            check_op(&move |g, v| g.scale_rows(v[0], &f), &[uniform(&[n, m], r)], r)
        }
        "diag" => check_op(&|g, v| g.diag(v[0]), &[uniform(&[n, n], r)], r),
        "logsumexp" => check_op(&|g, v| g.logsumexp(v[0]), &[uniform(&[n, m], r)], r),
        "sum" => check_op(&|g, v| g.sum(v[0]), &[uniform(&[n, m], r)], r),
        "cross_entropy" => {
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..m)).collect();
            check_op(&move |g, v| g.cross_entropy(v[0], &labels), &[uniform(&[n, m], r)], r)
        }
        "linear" => {
            let lin = Linear::new(k, m, r);
            let lin = Linear::from_parts(lin.weight, uniform(&[m], r))?;
            check_module(&lin, &[uniform(&[n, k], r)], &|g, l, v| l.forward(g, v[0]), r)
        }
        "mlp" => {
            let mlp = Mlp::new(k, 6, m, r);
            check_module(&mlp, &[uniform(&[n, k], r)], &|g, l, v| l.forward(g, v[0]), r)
        }
        "multi_head_attention" => {
            let heads = [1, 2, 4][instance % 3];
            let mha = MultiHeadAttention::new(8, heads, r)?;
            check_module(&mha, &[uniform(&[n + 1, 8], r)], &|g, l, v| l.forward(g, v[0]), r)
        }
        "transformer_encoder" => {
            let mut enc = TransformerEncoder::new(8, 2, 2, 12, r)?;
            enc.positional_encoding = instance.is_multiple_of(2);
            check_module(&enc, &[uniform(&[n, 8], r)], &|g, l, v| l.forward(g, v[0]), r)
        }
        "embedding" => {
            let table = EmbeddingTable::new(7, m, r)?;
            let ids: Vec<usize> = (0..n + 1).map(|_| r.random_range(0..7)).collect();
            check_module(&table, &[], &move |g, l, _| l.forward(g, &ids), r)
        }
        "encode_video" | "encode_audio" | "encode_text" => {
            let cfg = tiny_model();
            let stack = EncoderStack::new(&cfg, r.random())?;
            let s = random_features(&cfg, true, true, r);
            let f: Box<ModuleFn<EncoderStack>> = match name {
                "encode_video" => Box::new(move |g, st, _| encode_video(g, st, &s.video)),
                "encode_audio" => Box::new(move |g, st, _| encode_audio(g, st, s.audio.as_ref())),
                _ => Box::new(move |g, st, _| encode_text(g, st, s.text.as_deref())),
            };
            check_module(&stack, &[], f.as_ref(), r)
        }
        "project" => {
            let cfg = tiny_model();
            let stack = EncoderStack::new(&cfg, r.random())?;
            let pairs = [
                (Space::AV, Modality::Audio),
                (Space::AV, Modality::Video),
                (Space::VT, Modality::Video),
                (Space::VT, Modality::Text),
                (Space::AVT, Modality::Audio),
                (Space::AVT, Modality::Video),
                (Space::AVT, Modality::Text),
            ];
            let (space, modality) = pairs[instance % pairs.len()];
            check_module(&stack, &[uniform(&[n, cfg.d_model], r)], &move |g, st, v| project(g, st, v[0], space, modality), r)
        }
        "nce" | "nce_per_row" => {
            let form = if name == "nce" { NceForm::Aggregate } else { NceForm::PerRow };
            let rows = r.random_range(1..7);
            let tau = TAUS[instance % 3];
            let mut mask: Vec<bool> = (0..rows).map(|_| r.random::<bool>()).collect();
            let first = r.random_range(0..rows);
            mask[first] = true;
            let ins = [away_from_zero(&[rows, m], r), away_from_zero(&[rows, m], r)];
            check_op(
                &move |g, v| {
                    let z = g.l2_normalize_rows(v[0])?;
                    let zp = g.l2_normalize_rows(v[1])?;
                    nce_with(g, form, z, zp, tau, &mask)
                },
                &ins,
                r,
            )
        }
        "loss_avt" => {
            let cfg = tiny_model();
            let stack = EncoderStack::new(&cfg, r.random())?;
            let batch = random_batch(&cfg, 4, r);
            let lc = LossConfig { tau: TAUS[instance % 3], form: FORMS[instance % 2], ..LossConfig::default() };
            check_module(
                &stack,
                &[],
                &move |g, st, _| {
                    let e = embed_batch(g, st, &batch)?;
                    let c = compute_centroids(g, &e)?;
                    loss_avt(g, &e, &c, &lc)?.ok_or_else(|| Error::Invalid("no valid centroid".into()))
                },
                r,
            )
        }
        "loss_total" => {
            let cfg = tiny_model();
            let stack = EncoderStack::new(&cfg, r.random())?;
            let batch = random_batch(&cfg, 4, r);
            let lc = LossConfig { tau: TAUS[instance % 3], form: FORMS[instance % 2], ..LossConfig::default() };
            check_module(
                &stack,
                &[],
                &move |g, st, _| {
                    let e = embed_batch(g, st, &batch)?;
                    Ok(loss_total(g, &e, &lc)?.0)
                },
                r,
            )
        }
        other => Err(Error::Invalid(format!("unknown gradcheck case {other:?}"))),
    }
}

/// Every case the harness knows, primitives first.
pub const CASES: &[&str] = &[
    "matmul",
    "matmul_transposed",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "add_row_bias",
    "relu",
    "softmax_rows",
    "l2_normalize_rows",
    "layer_norm",
    "mean_pool",
    "stack_rows",
    "concat_cols",
    "slice_cols",
    "gather_rows",
    "scatter_rows",
    "scale_rows",
    "diag",
    "logsumexp",
    "sum",
    "cross_entropy",
    "linear",
    "mlp",
    "multi_head_attention",
    "transformer_encoder",
    "embedding",
    "encode_video",
    "encode_audio",
    "encode_text",
    "project",
    "nce",
    "nce_per_row",
    "loss_avt",
    "loss_total",
];

/// Check `cases` (all of them when empty), `instances` seeded instances each.
pub fn run_cases(seed: u64, instances: usize, cases: &[&str]) -> Result<GradcheckReport> {
    let selected: Vec<&str> = if cases.is_empty() { CASES.to_vec() } else { cases.to_vec() };
    let mut ops = Vec::with_capacity(selected.len());
    for name in selected {
        // Seeds depend on the case's position in CASES, not in the selection.
        let ci = CASES.iter().position(|c| *c == name).unwrap_or(usize::MAX);
        let mut worst = 0.0f64;
        for i in 0..instances {
            let mut rng = Xorshift64Star::keyed(seed, &[stream::GRADCHECK, ci as u64, i as u64]);
            let e = run_case(name, &mut rng, i)?;
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
        ops.push(OpReport {
            op: name.to_string(),
            instances,
            worst_rel_err: worst,
            passed: worst < TOLERANCE,
        });
    }
    Ok(GradcheckReport {
        seed,
        step: STEP,
        tolerance: TOLERANCE,
        passed: ops.iter().all(|o| o.passed),
        ops,
    })
}

/// The full suite at the default instance count.
pub fn run(seed: u64) -> Result<GradcheckReport> {
    run_cases(seed, DEFAULT_INSTANCES, &[])
}

/// Primitive op kinds exercised by the named primitive case.
pub fn case_for(kind: OpKind) -> Option<&'static str> {
    let name = kind.name();
    CASES.iter().copied().find(|c| *c == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_kind_has_a_case() {
        for k in OpKind::ALL {
            if k == OpKind::Leaf {
                continue;
            }
            assert!(case_for(k).is_some(), "no gradcheck case for {}", k.name());
        }
    }

    #[test]
    fn rel_err_definition() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert_eq!(rel_err(0.5, 0.0), 0.5);
        assert_eq!(rel_err(110.0, 100.0), 0.1);
    }
}
