//! Synthetic tri-modal dataset, manifest loading, batching and audio noise.
//!
//! On disk a dataset is a directory holding `manifest.jsonl` plus one LTF
//! file per modality per sample. Video and audio files are rank 3
//! `[clips × tokens × width]`; text files are rank 1 token ids stored as f64.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::ModalityFeatures;
use crate::error::{Error, Result};
use crate::ltf;
use crate::rng::{derive_seed, stream, Xorshift64Star};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test1,
    Test2,
    Test3,
}

impl Split {
    pub const TESTS: [Split; 3] = [Split::Test1, Split::Test2, Split::Test3];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test1 => "test1",
            Split::Test2 => "test2",
            Split::Test3 => "test3",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSigma {
    pub video: f64,
    pub audio: f64,
}

impl Default for NoiseSigma {
    fn default() -> Self {
        Self {
            video: 1.5,
            audio: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub clips_per_video: usize,
    pub t_v: usize,
    pub d_v_raw: usize,
    pub t_a: usize,
    pub d_a_raw: usize,
    pub l_text: usize,
    pub vocab: usize,
    /// Probability that a sample has audio and text.
    pub p_av: f64,
    /// Draw audio and text presence with separate coins.
    pub independent_availability: bool,
    /// Per-token Gaussian noise.
    pub noise_sigma: NoiseSigma,
    /// Scale of the token-mean part of each class template. The rest of the
    /// template is zero-mean over tokens, so it vanishes under mean pooling
    /// and only an encoder that mixes positions can read it.
    pub pooled_signal: f64,
    /// Probability that a text token comes from the class sub-vocabulary.
    pub text_informativeness: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_samples: 480,
            n_classes: 8,
            seed: 42,
            clips_per_video: 4,
            t_v: 8,
            d_v_raw: 32,
            t_a: 8,
            d_a_raw: 16,
            l_text: 8,
            vocab: 64,
            p_av: 0.625,
            independent_availability: false,
            noise_sigma: NoiseSigma::default(),
            pooled_signal: 0.05,
            text_informativeness: 0.8,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("data.{m}")));
        for (name, v) in [
            ("n_samples", self.n_samples),
            ("n_classes", self.n_classes),
            ("clips_per_video", self.clips_per_video),
            ("t_v", self.t_v),
            ("d_v_raw", self.d_v_raw),
            ("t_a", self.t_a),
            ("d_a_raw", self.d_a_raw),
            ("l_text", self.l_text),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.p_av) {
            return err(format!("p_av must lie in [0, 1], got {}", self.p_av));
        }
        if !(0.0..=1.0).contains(&self.text_informativeness) {
            return err("text_informativeness must lie in [0, 1]".into());
        }
        if self.vocab < self.n_classes {
            return err(format!("vocab {} is smaller than n_classes {}", self.vocab, self.n_classes));
        }
        let sigmas = [self.noise_sigma.video, self.noise_sigma.audio, self.pooled_signal];
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return err("noise scales must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// One line of `manifest.jsonl`. Paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub video_path: String,
    pub audio_path: Option<String>,
    pub text_path: Option<String>,
}

/// Summary printed after generation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerationSummary {
    pub manifest: PathBuf,
    pub n_samples: usize,
    pub with_audio: usize,
    pub with_text: usize,
    pub per_class: BTreeMap<usize, usize>,
    pub per_split: BTreeMap<String, usize>,
}

fn normal(rng: &mut Xorshift64Star) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Xorshift64Star) -> Vec<f64> {
    (0..rows * cols).map(|_| normal(rng)).collect()
}

struct Generator<'a> {
    cfg: &'a SyntheticConfig,
    video_templates: Vec<Vec<f64>>,
    audio_templates: Vec<Vec<f64>>,
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a SyntheticConfig) -> Self {
        let mut rng = Xorshift64Star::keyed(cfg.seed, &[stream::SYNTH, 0]);
        let k = cfg.n_classes;
        let template = |t: usize, d: usize, rng: &mut Xorshift64Star| -> Vec<f64> {
            let mut m = gaussian_matrix(t, d, rng);
            let mean = gaussian_matrix(1, d, rng);
            for j in 0..d {
                let mu = (0..t).map(|i| m[i * d + j]).sum::<f64>() / t as f64;
                for i in 0..t {
                    m[i * d + j] += cfg.pooled_signal * mean[j] - mu;
                }
            }
            m
        };
        let video_templates = (0..k).map(|_| template(cfg.t_v, cfg.d_v_raw, &mut rng)).collect();
        let audio_templates = (0..k).map(|_| template(cfg.t_a, cfg.d_a_raw, &mut rng)).collect();
        Self {
            cfg,
            video_templates,
            audio_templates,
        }
    }

    /// `clips × t × d` draws around `template`.
    fn clips(&self, template: &[f64], t: usize, d: usize, sigma: f64, rng: &mut Xorshift64Star) -> Tensor {
        let c = self.cfg.clips_per_video;
        let data = (0..c * t * d).map(|k| template[k % (t * d)] + sigma * normal(rng)).collect();
        Tensor::from_parts(vec![c, t, d], data)
    }

    fn text(&self, label: usize, rng: &mut Xorshift64Star) -> Vec<usize> {
        let cfg = self.cfg;
        let per_class = cfg.vocab / cfg.n_classes;
        (0..cfg.l_text)
            .map(|_| {
                if rng.random::<f64>() < cfg.text_informativeness {
                    label * per_class + rng.random_range(0..per_class)
                } else {
                    rng.random_range(0..cfg.vocab)
                }
            })
            .collect()
    }
}

fn split_for(position: usize, n: usize) -> Split {
    let n_test = n / 10;
    let n_train = n - 3 * n_test;
    match position {
        p if p < n_train => Split::Train,
        p if p < n_train + n_test => Split::Test1,
        p if p < n_train + 2 * n_test => Split::Test2,
        _ => Split::Test3,
    }
}

fn ensure_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let mut entries = fs::read_dir(out).map_err(|e| Error::io(out, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
    }
    for sub in ["video", "audio", "text"] {
        let p = out.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Write a synthetic dataset under `out`. Refuses a non-empty `out` unless `force`.
pub fn generate_synthetic(cfg: &SyntheticConfig, out: &Path, force: bool) -> Result<GenerationSummary> {
    cfg.validate()?;
    ensure_out_dir(out, force)?;
    let gen = Generator::new(cfg);
    let n = cfg.n_samples;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut Xorshift64Star::keyed(cfg.seed, &[stream::SYNTH, 1]));
    let mut split_of = vec![Split::Train; n];
    for (pos, &i) in order.iter().enumerate() {
        split_of[i] = split_for(pos, n);
    }

    let mut summary = GenerationSummary {
        manifest: out.join(MANIFEST),
        n_samples: n,
        with_audio: 0,
        with_text: 0,
        per_class: BTreeMap::new(),
        per_split: BTreeMap::new(),
    };
    let mut lines = String::new();
    for (i, &split) in split_of.iter().enumerate() {
        let mut rng = Xorshift64Star::keyed(cfg.seed, &[stream::SYNTH, 2, i as u64]);
        let label = rng.random_range(0..cfg.n_classes);
        let has_audio = rng.random::<f64>() < cfg.p_av;
        let has_text = if cfg.independent_availability {
            rng.random::<f64>() < cfg.p_av
        } else {
            has_audio
        };
        let id = format!("s{i:05}");

        let video = gen.clips(&gen.video_templates[label], cfg.t_v, cfg.d_v_raw, cfg.noise_sigma.video, &mut rng);
        let video_path = format!("video/{id}.ltf");
        ltf::write_tensor(&out.join(&video_path), &video)?;

        let audio_path = if has_audio {
            let audio = gen.clips(&gen.audio_templates[label], cfg.t_a, cfg.d_a_raw, cfg.noise_sigma.audio, &mut rng);
            let p = format!("audio/{id}.ltf");
            ltf::write_tensor(&out.join(&p), &audio)?;
            summary.with_audio += 1;
            Some(p)
        } else {
            None
        };
        let text_path = if has_text {
            let ids: Vec<f64> = gen.text(label, &mut rng).into_iter().map(|t| t as f64).collect();
            let p = format!("text/{id}.ltf");
            ltf::write_tensor(&out.join(&p), &Tensor::vector(ids)?)?;
            summary.with_text += 1;
            Some(p)
        } else {
            None
        };

        let rec = ManifestRecord {
            id,
            label,
            split,
            video_path,
            audio_path,
            text_path,
        };
        *summary.per_class.entry(label).or_default() += 1;
        *summary.per_split.entry(rec.split.to_string()).or_default() += 1;
        lines.push_str(&serde_json::to_string(&rec).expect("manifest record serializes"));
        lines.push('\n');
    }
    let mpath = &summary.manifest;
    fs::File::create(mpath)
        .and_then(|mut f| f.write_all(lines.as_bytes()))
        .map_err(|e| Error::io(mpath, e))?;
    Ok(summary)
}

/// A loaded sample with its clips split out.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub video: Vec<Tensor>,
    pub audio: Option<Vec<Tensor>>,
    pub text: Option<Vec<usize>>,
}

impl Sample {
    pub fn n_clips(&self) -> usize {
        self.video.len()
    }

    /// Features of clip `c`.
    pub fn clip(&self, c: usize) -> ModalityFeatures {
        ModalityFeatures {
            video: self.video[c].clone(),
            audio: self.audio.as_ref().map(|a| a[c].clone()),
            text: self.text.clone(),
        }
    }
}

fn split_clips(t: Tensor, path: &Path) -> Result<Vec<Tensor>> {
    let &[c, tok, d] = t.shape() else {
        return Err(Error::format(path, format!("expected rank-3 clips tensor, got shape {:?}", t.shape())));
    };
    if c == 0 || tok == 0 {
        return Err(Error::format(path, "clips tensor has no clips or no tokens"));
    }
    Ok(t.data()
        .chunks_exact(tok * d)
        .map(|chunk| Tensor::from_parts(vec![tok, d], chunk.to_vec()))
        .collect())
}

fn read_ids(path: &Path) -> Result<Vec<usize>> {
    let t = ltf::read_tensor(path)?;
    if t.rank() != 1 || t.numel() == 0 {
        return Err(Error::format(path, "text must be a non-empty rank-1 tensor of token ids"));
    }
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::format(path, format!("token id {v} is not a non-negative integer")))
            }
        })
        .collect()
}

/// A fully loaded dataset. Every referenced file is read and validated up front.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
    pub n_classes: usize,
    pub d_v_raw: usize,
    pub d_a_raw: Option<usize>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let records = load_manifest(&root.join(MANIFEST))?;
        Self::from_records(root, records)
    }

    pub fn from_records(root: &Path, records: Vec<ManifestRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::format(root.join(MANIFEST), "manifest has no records"));
        }
        let mut samples = Vec::with_capacity(records.len());
        let mut d_v = None;
        let mut d_a = None;
        for r in records {
            let vp = root.join(&r.video_path);
            let video = split_clips(ltf::read_tensor(&vp)?, &vp)?;
            check_width(&mut d_v, &video, &vp)?;
            let audio = match &r.audio_path {
                Some(p) => {
                    let ap = root.join(p);
                    let a = split_clips(ltf::read_tensor(&ap)?, &ap)?;
                    if a.len() != video.len() {
                        return Err(Error::format(&ap, format!("{} audio clips but {} video clips", a.len(), video.len())));
                    }
                    check_width(&mut d_a, &a, &ap)?;
                    Some(a)
                }
                None => None,
            };
            let text = match &r.text_path {
                Some(p) => Some(read_ids(&root.join(p))?),
                None => None,
            };
            samples.push(Sample {
                id: r.id,
                label: r.label,
                split: r.split,
                video,
                audio,
                text,
            });
        }
        let n_classes = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
        Ok(Self {
            root: root.to_path_buf(),
            samples,
            n_classes,
            d_v_raw: d_v.unwrap_or(0),
            d_a_raw: d_a,
        })
    }

    /// Indices of the samples in `split`, in manifest order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn has_audio(&self) -> bool {
        self.samples.iter().any(|s| s.audio.is_some())
    }
}

fn check_width(seen: &mut Option<usize>, clips: &[Tensor], path: &Path) -> Result<()> {
    let d = clips[0].shape()[1];
    match *seen {
        Some(w) if w != d => Err(Error::format(path, format!("feature width {d}, earlier files have {w}"))),
        _ => {
            *seen = Some(d);
            Ok(())
        }
    }
}

/// Parse `manifest.jsonl`, checking that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        for p in [Some(&rec.video_path), rec.audio_path.as_ref(), rec.text_path.as_ref()].into_iter().flatten() {
            let full = root.join(p);
            if !full.is_file() {
                return Err(Error::Io {
                    path: full,
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, format!("referenced by {} line {}", path.display(), i + 1)),
                });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

/// One batch of samples, one clip each.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Dataset indices.
    pub indices: Vec<usize>,
    pub items: Vec<ModalityFeatures>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn avail_audio(&self) -> Vec<bool> {
        self.items.iter().map(|i| i.audio.is_some()).collect()
    }

    pub fn avail_text(&self) -> Vec<bool> {
        self.items.iter().map(|i| i.text.is_some()).collect()
    }
}

/// Shuffle `split` with a PRNG keyed on `(seed, epoch)` and chunk it.
///
/// Training batches take one clip per sample, drawn from the same keyed
/// PRNG, so a sample contributes a different clip from epoch to epoch;
/// otherwise clip 0 is used. Contrastive training needs negatives, so
/// `training` requires `batch_size ≥ 2`.
pub fn make_batches(ds: &Dataset, split: Split, batch_size: usize, seed: u64, epoch: u64, training: bool) -> Result<Vec<Batch>> {
    if batch_size == 0 || (training && batch_size < 2) {
        return Err(Error::Config(format!(
            "batch_size {batch_size} is too small{}",
            if training { " for contrastive training (need at least 2)" } else { "" }
        )));
    }
    let mut idx = ds.split_indices(split);
    if idx.is_empty() {
        return Err(Error::Invalid(format!("split {split} is empty")));
    }
    let mut rng = Xorshift64Star::keyed(seed, &[stream::SHUFFLE, epoch]);
    idx.shuffle(&mut rng);
    let clips: Vec<usize> = idx
        .iter()
        .map(|&i| if training { rng.random_range(0..ds.samples[i].n_clips()) } else { 0 })
        .collect();
    Ok(idx
        .chunks(batch_size)
        .zip(clips.chunks(batch_size))
        .map(|(chunk, cs)| Batch {
            indices: chunk.to_vec(),
            items: chunk.iter().zip(cs).map(|(&i, &c)| ds.samples[i].clip(c)).collect(),
            labels: chunk.iter().map(|&i| ds.samples[i].label).collect(),
        })
        .collect())
}

/// `spec + N(0, σ²)` elementwise, drawn from a PRNG seeded with `seed`.
pub fn augment_audio(spec: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Invalid(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(spec.clone());
    }
    let dist = Normal::new(0.0, sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut rng = Xorshift64Star::keyed(seed, &[stream::AUGMENT]);
    let data = spec.data().iter().map(|v| v + dist.sample(&mut rng)).collect();
    Tensor::new(spec.shape().to_vec(), data)
}

/// Seed for the audio noise of one sample in one batch.
pub fn augmentation_seed(seed: u64, epoch: u64, batch: u64, position: u64) -> u64 {
    derive_seed(seed, &[stream::AUGMENT, epoch, batch, position])
}
