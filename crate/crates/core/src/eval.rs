//! Linear-probe evaluation on frozen encoders.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::Archive;
use crate::config::EvalConfig;
use crate::data::{Dataset, Split};
use crate::encoders::{encode_audio, encode_video, EncoderStack};
use crate::error::{Error, Result};
use crate::ltf::LtfValue;
use crate::nn::{Linear, Parameterized};
use crate::optim::{collect_grads, Adam, OptimConfig};
use crate::rng::{stream, Xorshift64Star};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProbeMode {
    #[serde(rename = "video")]
    Video,
    #[serde(rename = "audio+video")]
    AudioVideo,
}

impl fmt::Display for ProbeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeMode::Video => "video",
            ProbeMode::AudioVideo => "audio+video",
        })
    }
}

impl FromStr for ProbeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "video" => Ok(ProbeMode::Video),
            "audio+video" => Ok(ProbeMode::AudioVideo),
            other => Err(Error::Config(format!("unknown probe mode {other:?} (expected video or audio+video)"))),
        }
    }
}

/// `[z_v ; z_a]`, video first.
pub fn fuse_embeddings(z_v: &Tensor, z_a: Option<&Tensor>) -> Result<Tensor> {
    let z_a = z_a.ok_or_else(|| Error::Unavailable("audio+video fusion needs audio".into()))?;
    if z_v.rank() != 1 || z_a.rank() != 1 {
        return Err(Error::shape("fuse_embeddings", "inputs must be vectors"));
    }
    let mut data = z_v.to_vec();
    data.extend_from_slice(z_a.data());
    Tensor::vector(data)
}

/// Frozen embeddings of clips `0..clips` of sample `i`; `None` in fused mode
/// when the sample has no audio.
pub fn clip_features(stack: &EncoderStack, ds: &Dataset, i: usize, mode: ProbeMode, clips: usize) -> Result<Option<Vec<Tensor>>> {
    let s = &ds.samples[i];
    if clips == 0 || clips > s.n_clips() {
        return Err(Error::Config(format!(
            "clips_per_video {clips} outside 1..={} for sample {}",
            s.n_clips(),
            s.id
        )));
    }
    if mode == ProbeMode::AudioVideo && s.audio.is_none() {
        return Ok(None);
    }
    let mut out = Vec::with_capacity(clips);
    for c in 0..clips {
        let mut g = Graph::inference();
        let zv = encode_video(&mut g, stack, &s.video[c])?;
        let f = match mode {
            ProbeMode::Video => g.value(zv).clone(),
            ProbeMode::AudioVideo => {
                let a = s.audio.as_ref().map(|a| &a[c]);
                let za = encode_audio(&mut g, stack, a)?;
                fuse_embeddings(g.value(zv), Some(g.value(za)))?
            }
        };
        out.push(f);
    }
    Ok(Some(out))
}

#[derive(Clone, Debug)]
pub struct ProbeHead {
    pub mode: ProbeMode,
    pub linear: Linear,
}

impl ProbeHead {
    pub fn n_classes(&self) -> usize {
        self.linear.d_out()
    }

    pub fn logits(&self, features: &Tensor) -> Result<Vec<f64>> {
        let x = features.reshape(vec![1, features.numel()])?;
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let y = self.linear.forward(&mut g, xv)?;
        Ok(g.value(y).to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new();
        let mode = self.mode.to_string().into_bytes();
        a.push("probe.mode", LtfValue::U8 { shape: vec![mode.len()], bytes: mode })?;
        a.push_tensor("probe.W", &self.linear.weight)?;
        a.push_tensor("probe.b", &self.linear.bias)?;
        a.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::read(path)?;
        let get = |n: &str| a.get(n).cloned().ok_or_else(|| Error::format(path, format!("missing entry {n:?}")));
        let mode = String::from_utf8(get("probe.mode")?.into_bytes(path)?)
            .map_err(|_| Error::format(path, "probe mode is not UTF-8"))?;
        let mode = mode.parse().map_err(|_| Error::format(path, format!("unknown probe mode {mode:?}")))?;
        let linear = Linear::from_parts(get("probe.W")?.into_f64(path)?, get("probe.b")?.into_f64(path)?)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Self { mode, linear })
    }
}

/// Order-sensitive fingerprint of every parameter bit.
pub fn param_fingerprint<P: Parameterized>(p: &P) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    p.visit_params("", &mut |name, t| {
        for b in name.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100000001b3);
        }
        for v in t.data() {
            h = (h ^ v.to_bits()).wrapping_mul(0x100000001b3);
        }
    });
    h
}

/// Train a zero-initialised linear head with Adam on fixed features.
pub fn fit_linear_probe(features: &[Tensor], labels: &[usize], n_classes: usize, cfg: &EvalConfig, mode: ProbeMode) -> Result<ProbeHead> {
    cfg.validate()?;
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Invalid("probe needs one label per feature vector and at least one sample".into()));
    }
    let d = features[0].numel();
    if features.iter().any(|f| f.numel() != d) {
        return Err(Error::shape("probe", "feature vectors differ in width"));
    }
    let mut head = ProbeHead {
        mode,
        linear: Linear::from_parts(Tensor::zeros(&[d, n_classes]), Tensor::zeros(&[n_classes]))?,
    };
    let mut adam = Adam::new(&OptimConfig::default());
    let mut order: Vec<usize> = (0..features.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut Xorshift64Star::keyed(cfg.seed, &[stream::PROBE, epoch]));
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| features[i].data()).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_rows(&rows)?);
            let logits = head.linear.forward(&mut g, x)?;
            let loss = g.cross_entropy(logits, &y)?;
            g.backward(loss)?;
            let grads = collect_grads(&g, &head.linear);
            adam.step(&mut head.linear, &grads, cfg.lr)?;
        }
    }
    Ok(head)
}

/// Train a probe on clip 0 of every training sample, with the encoders frozen.
/// In fused mode samples without audio are left out.
pub fn train_probe(stack: &EncoderStack, ds: &Dataset, mode: ProbeMode, cfg: &EvalConfig) -> Result<ProbeHead> {
    let before = param_fingerprint(stack);
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for i in ds.split_indices(Split::Train) {
        if let Some(mut f) = clip_features(stack, ds, i, mode, 1)? {
            feats.push(f.swap_remove(0));
            labels.push(ds.samples[i].label);
        }
    }
    if feats.is_empty() {
        return Err(Error::Config(match mode {
            ProbeMode::AudioVideo => "audio+video probe: no training sample has audio".to_string(),
            ProbeMode::Video => "probe: training split is empty".to_string(),
        }));
    }
    let head = fit_linear_probe(&feats, &labels, ds.n_classes, cfg, mode)?;
    if param_fingerprint(stack) != before {
        return Err(Error::Graph("encoder parameters changed during probe training".into()));
    }
    Ok(head)
}

/// Mean of per-clip logit vectors.
pub fn average_logits(per_clip: &[Vec<f64>]) -> Vec<f64> {
    let n = per_clip.len() as f64;
    let mut out = vec![0.0; per_clip.first().map_or(0, Vec::len)];
    for l in per_clip {
        out.iter_mut().zip(l).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub top1: f64,
    pub correct: usize,
    pub evaluated: usize,
    /// Samples left out because the mode needs audio they lack.
    pub excluded_no_audio: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: ProbeMode,
    pub clips_per_video: usize,
    pub splits: BTreeMap<Split, SplitResult>,
    /// Arithmetic mean of the per-split top-1 values.
    pub mean_top1: f64,
    /// Top-1 per class label, pooled over the evaluated splits.
    pub per_class: BTreeMap<usize, f64>,
    pub excluded_no_audio: usize,
}

struct Tally {
    result: SplitResult,
    per_class: BTreeMap<usize, (usize, usize)>,
}

fn evaluate_split_tally(stack: &EncoderStack, head: &ProbeHead, ds: &Dataset, split: Split, clips: usize) -> Result<Tally> {
    let idx = ds.split_indices(split);
    if idx.is_empty() {
        return Err(Error::Invalid(format!("split {split} is empty or missing")));
    }
    let mut result = SplitResult {
        top1: 0.0,
        correct: 0,
        evaluated: 0,
        excluded_no_audio: 0,
    };
    let mut per_class = BTreeMap::new();
    for i in idx {
        let Some(feats) = clip_features(stack, ds, i, head.mode, clips)? else {
            result.excluded_no_audio += 1;
            continue;
        };
        let logits = feats.iter().map(|f| head.logits(f)).collect::<Result<Vec<_>>>()?;
        let label = ds.samples[i].label;
        let hit = argmax(&average_logits(&logits)) == label;
        let e = per_class.entry(label).or_insert((0, 0));
        e.0 += hit as usize;
        e.1 += 1;
        result.correct += hit as usize;
        result.evaluated += 1;
    }
    if result.evaluated == 0 {
        return Err(Error::Config(format!("split {split} has no sample with audio for audio+video evaluation")));
    }
    result.top1 = result.correct as f64 / result.evaluated as f64;
    Ok(Tally { result, per_class })
}

/// Top-1 on one split with logits averaged over `clips` clips per video.
pub fn evaluate(stack: &EncoderStack, head: &ProbeHead, ds: &Dataset, split: Split, clips: usize) -> Result<SplitResult> {
    Ok(evaluate_split_tally(stack, head, ds, split, clips)?.result)
}

pub fn evaluate_all_splits(stack: &EncoderStack, head: &ProbeHead, ds: &Dataset, splits: &[Split], clips: usize) -> Result<EvalReport> {
    if splits.is_empty() {
        return Err(Error::Invalid("no splits requested".into()));
    }
    let mut report = EvalReport {
        mode: head.mode,
        clips_per_video: clips,
        splits: BTreeMap::new(),
        mean_top1: 0.0,
        per_class: BTreeMap::new(),
        excluded_no_audio: 0,
    };
    let mut pooled: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for &s in splits {
        let t = evaluate_split_tally(stack, head, ds, s, clips)?;
        for (k, (c, n)) in t.per_class {
            let e = pooled.entry(k).or_insert((0, 0));
            e.0 += c;
            e.1 += n;
        }
        report.excluded_no_audio += t.result.excluded_no_audio;
        report.splits.insert(s, t.result);
    }
    report.mean_top1 = report.splits.values().map(|r| r.top1).sum::<f64>() / report.splits.len() as f64;
    report.per_class = pooled.into_iter().map(|(k, (c, n))| (k, c as f64 / n as f64)).collect();
    Ok(report)
}
