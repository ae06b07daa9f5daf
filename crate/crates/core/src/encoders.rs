//! Modality front-ends, the three transformer encoders and the projection
//! heads into the audio-video, video-text and tri-modal latent spaces.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{join, mean_pool, EmbeddingTable, Linear, Mlp, Parameterized, TransformerEncoder};
use crate::rng::{stream, Xorshift64Star};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Video, Modality::Text];
}

/// Latent space a projection head maps into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Space {
    AV,
    VT,
    AVT,
}

impl Space {
    pub fn admits(self, m: Modality) -> bool {
        matches!(
            (self, m),
            (Space::AV, Modality::Audio | Modality::Video)
                | (Space::VT, Modality::Video | Modality::Text)
                | (Space::AVT, _)
        )
    }
}

/// Model dimensions. Defaults are the desk-scale configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of one pre-extracted video feature token.
    pub d_v_raw: usize,
    /// Mel bins per audio frame.
    pub d_a_raw: usize,
    pub vocab: usize,
    pub max_text_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ff_dim: usize,
    /// Width of every latent space.
    pub d_proj: usize,
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_v_raw: 32,
            d_a_raw: 16,
            vocab: 64,
            max_text_len: 16,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            ff_dim: 128,
            d_proj: 32,
            positional_encoding: true,
        }
    }
}

impl ModelConfig {
    /// Full-size encoders: 4 layers of width 1024, 80 mel bins, 48k vocabulary,
    /// 128-token titles. Video tokens are 512-wide ResNet-18 patch features.
    pub fn full_scale() -> Self {
        Self {
            d_v_raw: 512,
            d_a_raw: 80,
            vocab: 48_000,
            max_text_len: 128,
            d_model: 1024,
            n_heads: 16,
            n_layers: 4,
            ff_dim: 2048,
            d_proj: 256,
            positional_encoding: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_v_raw", self.d_v_raw),
            ("d_a_raw", self.d_a_raw),
            ("vocab", self.vocab),
            ("max_text_len", self.max_text_len),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ff_dim", self.ff_dim),
            ("d_proj", self.d_proj),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.d_model {} is not divisible by model.n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Inputs for one sample. Video is always present.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityFeatures {
    /// `T_v × d_v_raw` feature tokens.
    pub video: Tensor,
    /// `T_a × d_a_raw` log-mel frames.
    pub audio: Option<Tensor>,
    pub text: Option<Vec<usize>>,
}

/// All trainable parameters of the pre-training model.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub config: ModelConfig,
    pub audio_mlp: Mlp,
    pub video_in: Linear,
    pub text_embed: EmbeddingTable,
    pub f_a: TransformerEncoder,
    pub f_v: TransformerEncoder,
    pub f_t: TransformerEncoder,
    pub g_av: Linear,
    pub g_vt: Linear,
    pub g_avt: Linear,
}

impl EncoderStack {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = Xorshift64Star::keyed(seed, &[stream::INIT]);
        let enc = |rng: &mut Xorshift64Star| -> Result<TransformerEncoder> {
            let mut e = TransformerEncoder::new(c.d_model, c.n_heads, c.n_layers, c.ff_dim, rng)?;
            e.positional_encoding = c.positional_encoding;
            Ok(e)
        };
        Ok(Self {
            config: c.clone(),
            audio_mlp: Mlp::new(c.d_a_raw, c.d_model, c.d_model, &mut rng),
            video_in: Linear::new(c.d_v_raw, c.d_model, &mut rng),
            text_embed: EmbeddingTable::new(c.vocab, c.d_model, &mut rng)?,
            f_a: enc(&mut rng)?,
            f_v: enc(&mut rng)?,
            f_t: enc(&mut rng)?,
            g_av: Linear::new(c.d_model, c.d_proj, &mut rng),
            g_vt: Linear::new(c.d_model, c.d_proj, &mut rng),
            g_avt: Linear::new(c.d_model, c.d_proj, &mut rng),
        })
    }

    fn head(&self, space: Space) -> &Linear {
        match space {
            Space::AV => &self.g_av,
            Space::VT => &self.g_vt,
            Space::AVT => &self.g_avt,
        }
    }

    /// Named parameter values, in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }
}

impl Parameterized for EncoderStack {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.audio_mlp.visit_params(&join(prefix, "audio_mlp"), f);
        self.video_in.visit_params(&join(prefix, "video_in"), f);
        self.text_embed.visit_params(&join(prefix, "text_embed"), f);
        self.f_a.visit_params(&join(prefix, "f_a"), f);
        self.f_v.visit_params(&join(prefix, "f_v"), f);
        self.f_t.visit_params(&join(prefix, "f_t"), f);
        self.g_av.visit_params(&join(prefix, "g_av"), f);
        self.g_vt.visit_params(&join(prefix, "g_vt"), f);
        self.g_avt.visit_params(&join(prefix, "g_avt"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.audio_mlp.visit_params_mut(&join(prefix, "audio_mlp"), f);
        self.video_in.visit_params_mut(&join(prefix, "video_in"), f);
        self.text_embed.visit_params_mut(&join(prefix, "text_embed"), f);
        self.f_a.visit_params_mut(&join(prefix, "f_a"), f);
        self.f_v.visit_params_mut(&join(prefix, "f_v"), f);
        self.f_t.visit_params_mut(&join(prefix, "f_t"), f);
        self.g_av.visit_params_mut(&join(prefix, "g_av"), f);
        self.g_vt.visit_params_mut(&join(prefix, "g_vt"), f);
        self.g_avt.visit_params_mut(&join(prefix, "g_avt"), f);
    }
}

fn check_tokens(op: &'static str, t: &Tensor, width: usize) -> Result<()> {
    let (rows, cols) = t.dims2()?;
    if rows == 0 {
        return Err(Error::Invalid(format!("{op}: empty sequence")));
    }
    if cols != width {
        return Err(Error::shape(op, format!("token width {cols}, expected {width}")));
    }
    Ok(())
}

/// Video features → linear front-end → `f_v` → mean pool. Returns `[d_model]`.
pub fn encode_video(g: &mut Graph, stack: &EncoderStack, video: &Tensor) -> Result<Var> {
    check_tokens("encode_video", video, stack.config.d_v_raw)?;
    let x = g.constant(video.clone());
    let h = stack.video_in.forward(g, x)?;
    let h = stack.f_v.forward(g, h)?;
    mean_pool(g, h)
}

/// Log-mel frames → per-frame MLP → `f_a` → mean pool.
pub fn encode_audio(g: &mut Graph, stack: &EncoderStack, audio: Option<&Tensor>) -> Result<Var> {
    let audio = audio.ok_or_else(|| Error::Unavailable("audio is absent for this sample".into()))?;
    check_tokens("encode_audio", audio, stack.config.d_a_raw)?;
    let x = g.constant(audio.clone());
    let h = stack.audio_mlp.forward(g, x)?;
    let h = stack.f_a.forward(g, h)?;
    mean_pool(g, h)
}

/// Token ids → embedding lookup → `f_t` → mean pool.
pub fn encode_text(g: &mut Graph, stack: &EncoderStack, ids: Option<&[usize]>) -> Result<Var> {
    let ids = ids.ok_or_else(|| Error::Unavailable("text is absent for this sample".into()))?;
    let max = stack.config.max_text_len;
    if ids.is_empty() || ids.len() > max {
        return Err(Error::Invalid(format!(
            "text length {} outside 1..={max}",
            ids.len()
        )));
    }
    let h = stack.text_embed.forward(g, ids)?;
    let h = stack.f_t.forward(g, h)?;
    mean_pool(g, h)
}

/// Project `N×d_model` embeddings of `modality` into `space`; rows come out unit-norm.
pub fn project(g: &mut Graph, stack: &EncoderStack, z: Var, space: Space, modality: Modality) -> Result<Var> {
    if !space.admits(modality) {
        return Err(Error::Invalid(format!(
            "modality {modality:?} has no projection into space {space:?}"
        )));
    }
    let h = stack.head(space).forward(g, z)?;
    g.l2_normalize_rows(h)
}

/// Encoder outputs and their projections for one batch.
///
/// Rows of unavailable modalities are zero in every matrix and flagged
/// false in `avail_a` / `avail_t`; losses never read them.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    pub n: usize,
    pub z_a: Var,
    pub z_v: Var,
    pub z_t: Var,
    pub proj_av_a: Var,
    pub proj_av_v: Var,
    pub proj_vt_v: Var,
    pub proj_vt_t: Var,
    pub proj_avt_a: Var,
    pub proj_avt_v: Var,
    pub proj_avt_t: Var,
    pub avail_a: Vec<bool>,
    pub avail_t: Vec<bool>,
}

impl EmbeddingSet {
    pub fn proj(&self, space: Space, m: Modality) -> Option<Var> {
        match (space, m) {
            (Space::AV, Modality::Audio) => Some(self.proj_av_a),
            (Space::AV, Modality::Video) => Some(self.proj_av_v),
            (Space::VT, Modality::Video) => Some(self.proj_vt_v),
            (Space::VT, Modality::Text) => Some(self.proj_vt_t),
            (Space::AVT, Modality::Audio) => Some(self.proj_avt_a),
            (Space::AVT, Modality::Video) => Some(self.proj_avt_v),
            (Space::AVT, Modality::Text) => Some(self.proj_avt_t),
            _ => None,
        }
    }

    pub fn avail(&self, m: Modality) -> Vec<bool> {
        match m {
            Modality::Audio => self.avail_a.clone(),
            Modality::Video => vec![true; self.n],
            Modality::Text => self.avail_t.clone(),
        }
    }
}

pub(crate) fn mask_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

/// Project only the available rows, leaving zero rows elsewhere.
fn project_masked(
    g: &mut Graph,
    stack: &EncoderStack,
    z: Var,
    mask: &[bool],
    space: Space,
    m: Modality,
) -> Result<Var> {
    let idx = mask_indices(mask);
    let rows = g.gather_rows(z, &idx)?;
    let p = project(g, stack, rows, space, m)?;
    g.scatter_rows(p, &idx, mask.len())
}

/// Run every encoder and projection head over a batch.
pub fn embed_batch(g: &mut Graph, stack: &EncoderStack, items: &[ModalityFeatures]) -> Result<EmbeddingSet> {
    if items.is_empty() {
        return Err(Error::Invalid("embed_batch on an empty batch".into()));
    }
    let n = items.len();
    let d = stack.config.d_model;
    let zero = g.constant(Tensor::zeros(&[d]));

    let mut zv = Vec::with_capacity(n);
    let mut za = Vec::with_capacity(n);
    let mut zt = Vec::with_capacity(n);
    for it in items {
        zv.push(encode_video(g, stack, &it.video)?);
        za.push(match &it.audio {
            Some(a) => encode_audio(g, stack, Some(a))?,
            None => zero,
        });
        zt.push(match &it.text {
            Some(t) => encode_text(g, stack, Some(t))?,
            None => zero,
        });
    }
    let avail_a: Vec<bool> = items.iter().map(|it| it.audio.is_some()).collect();
    let avail_t: Vec<bool> = items.iter().map(|it| it.text.is_some()).collect();
    let all = vec![true; n];

    let z_v = g.stack_rows(&zv)?;
    let z_a = g.stack_rows(&za)?;
    let z_t = g.stack_rows(&zt)?;

    Ok(EmbeddingSet {
        n,
        proj_av_a: project_masked(g, stack, z_a, &avail_a, Space::AV, Modality::Audio)?,
        proj_av_v: project_masked(g, stack, z_v, &all, Space::AV, Modality::Video)?,
        proj_vt_v: project_masked(g, stack, z_v, &all, Space::VT, Modality::Video)?,
        proj_vt_t: project_masked(g, stack, z_t, &avail_t, Space::VT, Modality::Text)?,
        proj_avt_a: project_masked(g, stack, z_a, &avail_a, Space::AVT, Modality::Audio)?,
        proj_avt_v: project_masked(g, stack, z_v, &all, Space::AVT, Modality::Video)?,
        proj_avt_t: project_masked(g, stack, z_t, &avail_t, Space::AVT, Modality::Text)?,
        z_a,
        z_v,
        z_t,
        avail_a,
        avail_t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_v_raw: 5,
            d_a_raw: 3,
            vocab: 11,
            max_text_len: 6,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            ff_dim: 16,
            d_proj: 4,
            positional_encoding: true,
        }
    }

    fn random(rows: usize, cols: usize, rng: &mut Xorshift64Star) -> Tensor {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn sample(rng: &mut Xorshift64Star, audio: bool, text: bool) -> ModalityFeatures {
        ModalityFeatures {
            video: random(4, 5, rng),
            audio: audio.then(|| random(3, 3, rng)),
            text: text.then(|| vec![1, 5, 10]),
        }
    }

    #[test]
    fn encoders_are_deterministic_and_shaped() {
        let stack = EncoderStack::new(&tiny(), 1).unwrap();
        let mut rng = Xorshift64Star::new(3);
        let s = sample(&mut rng, true, true);
        let mut g = Graph::new();
        let a = encode_video(&mut g, &stack, &s.video).unwrap();
        let b = encode_video(&mut g, &stack, &s.video).unwrap();
        assert!(g.value(a).bitwise_eq(g.value(b)));
        assert_eq!(g.value(a).shape(), &[8]);
        let long = random(9, 5, &mut rng);
        let c = encode_video(&mut g, &stack, &long).unwrap();
        assert_eq!(g.value(c).shape(), &[8]);
        let za = encode_audio(&mut g, &stack, s.audio.as_ref()).unwrap();
        assert_eq!(g.value(za).shape(), &[8]);
        let zt = encode_text(&mut g, &stack, Some(&[3])).unwrap();
        assert_eq!(g.value(zt).shape(), &[8]);
    }

    #[test]
    fn encoder_errors() {
        let stack = EncoderStack::new(&tiny(), 1).unwrap();
        let mut g = Graph::new();
        assert!(matches!(encode_audio(&mut g, &stack, None), Err(Error::Unavailable(_))));
        assert!(matches!(
            encode_text(&mut g, &stack, Some(&[0; 7])),
            Err(Error::Invalid(_))
        ));
        assert!(encode_text(&mut g, &stack, Some(&[])).is_err());
        assert!(encode_text(&mut g, &stack, Some(&[11])).is_err());
        assert!(encode_video(&mut g, &stack, &Tensor::zeros(&[0, 5])).is_err());
    }

    #[test]
    fn projection_contract() {
        let stack = EncoderStack::new(&tiny(), 2).unwrap();
        let mut rng = Xorshift64Star::new(4);
        let mut g = Graph::new();
        let z = g.constant(random(5, 8, &mut rng));
        let p = project(&mut g, &stack, z, Space::AVT, Modality::Text).unwrap();
        for row in g.value(p).data().chunks(4) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            project(&mut g, &stack, z, Space::AV, Modality::Text),
            Err(Error::Invalid(_))
        ));
        assert!(project(&mut g, &stack, z, Space::VT, Modality::Audio).is_err());
    }

    #[test]
    fn embed_batch_masks_missing_audio() {
        let stack = EncoderStack::new(&tiny(), 3).unwrap();
        let mut rng = Xorshift64Star::new(5);
        let items = vec![sample(&mut rng, true, true), sample(&mut rng, false, false)];
        let mut g = Graph::new();
        let e = embed_batch(&mut g, &stack, &items).unwrap();
        assert_eq!(e.avail_a, vec![true, false]);
        assert_eq!(e.avail_t, vec![true, false]);
        for v in [e.proj_av_a, e.proj_av_v, e.proj_vt_v, e.proj_vt_t, e.proj_avt_a, e.proj_avt_v, e.proj_avt_t] {
            assert_eq!(g.value(v).shape(), &[2, 4]);
        }
        assert!(g.value(e.proj_av_a).row(1).iter().all(|&x| x == 0.0));
        assert!(g.value(e.z_a).row(1).iter().all(|&x| x == 0.0));
        assert!(embed_batch(&mut g, &stack, &[]).is_err());
    }

    #[test]
    fn full_scale_config_is_valid() {
        let c = ModelConfig::full_scale();
        c.validate().unwrap();
        assert_eq!((c.n_layers, c.d_model, c.vocab, c.max_text_len, c.d_a_raw), (4, 1024, 48_000, 128, 80));
    }
}
