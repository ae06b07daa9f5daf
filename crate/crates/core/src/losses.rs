//! Contrastive objectives: batch NCE, the audio-video and video-text
//! cross-modal terms, centroid alignment and the weighted total.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::{mask_indices, EmbeddingSet, Modality, Space};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance on the unit-norm precondition of [`nce`].
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    AV,
    VT,
    AVT,
}

impl Term {
    pub const ALL: [Term; 3] = [Term::AV, Term::VT, Term::AVT];

    pub fn label(self) -> &'static str {
        match self {
            Term::AV => "L_AV",
            Term::VT => "L_VT",
            Term::AVT => "L_AVT",
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Term::AV => "av",
            Term::VT => "vt",
            Term::AVT => "avt",
        })
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "av" => Ok(Term::AV),
            "vt" => Ok(Term::VT),
            "avt" => Ok(Term::AVT),
            other => Err(Error::Config(format!("unknown loss term {other:?} (expected av, vt or avt)"))),
        }
    }
}

/// Parse a comma separated term list such as `av,vt`.
pub fn parse_terms(s: &str) -> Result<Vec<Term>> {
    let mut terms: Vec<Term> = s.split(',').map(str::parse).collect::<Result<_>>()?;
    terms.sort();
    terms.dedup();
    Ok(terms)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TermWeights {
    pub av: f64,
    pub vt: f64,
    pub avt: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self {
            av: 1.0,
            vt: 1.0,
            avt: 1.0,
        }
    }
}

impl TermWeights {
    pub fn get(&self, t: Term) -> f64 {
        match t {
            Term::AV => self.av,
            Term::VT => self.vt,
            Term::AVT => self.avt,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub form: NceForm,
    pub terms: Vec<Term>,
    pub weights: TermWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            form: NceForm::default(),
            terms: Term::ALL.to_vec(),
            weights: TermWeights::default(),
        }
    }
}

impl LossConfig {
    pub fn with_terms(terms: &[Term]) -> Self {
        Self {
            terms: terms.to_vec(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("loss.tau must be positive, got {}", self.tau)));
        }
        if self.terms.is_empty() {
            return Err(Error::Config("loss.terms must not be empty".into()));
        }
        for t in Term::ALL {
            if !self.weights.get(t).is_finite() {
                return Err(Error::Config(format!("loss.weights.{t} is not finite")));
            }
        }
        Ok(())
    }

    pub fn enabled(&self, t: Term) -> bool {
        self.terms.contains(&t)
    }
}

/// `exp(xᵀy / τ)`.
pub fn similarity(x: &[f64], y: &[f64], tau: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("similarity", format!("{} vs {}", x.len(), y.len())));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok((dot / tau).exp())
}

fn check_unit_rows(t: &Tensor, idx: &[usize]) -> Result<()> {
    for &i in idx {
        let n = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Invalid(format!("nce: row {i} has norm {n}, expected unit length")));
        }
    }
    Ok(())
}

/// How the loss terms reduce a batch similarity matrix to a scalar.
///
/// Training defaults to [`NceForm::PerRow`]. The aggregate ratio is
/// minimized as soon as one positive pair dominates the batch, and on the
/// synthetic data it learns far weaker class structure.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NceForm {
    /// One log-ratio over the whole batch; see [`nce`].
    Aggregate,
    /// Mean over rows of `lse_j S_ij − S_ii`; see [`nce_per_row`].
    #[default]
    PerRow,
}

/// Batch-aggregate NCE over the rows selected by `mask`:
/// `−log(Σᵢ s(zᵢ,z′ᵢ) / Σᵢⱼ s(zᵢ,z′ⱼ))`, evaluated as
/// `lse(S) − lse(diag S)` with `S = Z Z′ᵀ / τ`.
pub fn nce(g: &mut Graph, z: Var, zp: Var, tau: f64, mask: &[bool]) -> Result<Var> {
    let s = masked_similarity(g, z, zp, tau, mask)?;
    let all = g.logsumexp(s)?;
    let diag = g.diag(s)?;
    let pos = g.logsumexp(diag)?;
    g.sub(all, pos)
}

/// Row-wise NCE: each masked-in row of `Z` is classified against every
/// masked-in row of `Z′`, and the losses are averaged. Agrees with [`nce`]
/// whenever all rows are interchangeable, but every positive pair gets its
/// own gradient instead of sharing one softmax over the diagonal.
pub fn nce_per_row(g: &mut Graph, z: Var, zp: Var, tau: f64, mask: &[bool]) -> Result<Var> {
    let s = masked_similarity(g, z, zp, tau, mask)?;
    let n = g.value(s).dims2()?.0;
    g.cross_entropy(s, &(0..n).collect::<Vec<_>>())
}

pub fn nce_with(g: &mut Graph, form: NceForm, z: Var, zp: Var, tau: f64, mask: &[bool]) -> Result<Var> {
    match form {
        NceForm::Aggregate => nce(g, z, zp, tau, mask),
        NceForm::PerRow => nce_per_row(g, z, zp, tau, mask),
    }
}

/// `Z Z′ᵀ / τ` restricted to the masked-in rows, after the shared checks.
fn masked_similarity(g: &mut Graph, z: Var, zp: Var, tau: f64, mask: &[bool]) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let (n, d) = g.value(z).dims2()?;
    let (n2, d2) = g.value(zp).dims2()?;
    if (n, d) != (n2, d2) || mask.len() != n {
        return Err(Error::shape(
            "nce",
            format!("Z [{n}x{d}], Z' [{n2}x{d2}], mask {}", mask.len()),
        ));
    }
    let idx = mask_indices(mask);
    if idx.is_empty() {
        return Err(Error::Invalid("nce: mask selects no rows".into()));
    }
    check_unit_rows(g.value(z), &idx)?;
    check_unit_rows(g.value(zp), &idx)?;
    let zs = g.gather_rows(z, &idx)?;
    let zps = g.gather_rows(zp, &idx)?;
    let dots = g.matmul_ex(zs, zps, true)?;
    g.scale(dots, 1.0 / tau)
}

/// Cross-modal term between `space`'s projections of `m` and video, masked
/// by `m`'s availability. `None` when no sample has `m`.
fn cross_modal(g: &mut Graph, e: &EmbeddingSet, space: Space, m: Modality, cfg: &LossConfig) -> Result<Option<Var>> {
    let mask = e.avail(m);
    if !mask.iter().any(|&b| b) {
        return Ok(None);
    }
    let x = e.proj(space, m).expect("modality admitted by space");
    let v = e.proj(space, Modality::Video).expect("video is in every space");
    let (z, zp) = match m {
        Modality::Audio => (x, v),
        _ => (v, x),
    };
    nce_with(g, cfg.form, z, zp, cfg.tau, &mask).map(Some)
}

/// `NCE(g_av(z_a), g_av(z_v))` over samples with audio.
pub fn loss_av(g: &mut Graph, e: &EmbeddingSet, cfg: &LossConfig) -> Result<Option<Var>> {
    cross_modal(g, e, Space::AV, Modality::Audio, cfg)
}

/// `NCE(g_vt(z_v), g_vt(z_t))` over samples with text.
pub fn loss_vt(g: &mut Graph, e: &EmbeddingSet, cfg: &LossConfig) -> Result<Option<Var>> {
    cross_modal(g, e, Space::VT, Modality::Text, cfg)
}

#[derive(Clone, Debug)]
pub struct CentroidSet {
    /// `N × d_proj`; valid rows are unit-norm, invalid rows are zero.
    pub c: Var,
    pub valid: Vec<bool>,
}

/// Per-sample mean of the available tri-modal projections, renormalised.
/// A centroid is valid when at least two modalities contribute.
pub fn compute_centroids(g: &mut Graph, e: &EmbeddingSet) -> Result<CentroidSet> {
    let counts: Vec<usize> = (0..e.n)
        .map(|i| 1 + e.avail_a[i] as usize + e.avail_t[i] as usize)
        .collect();
    // Unavailable projection rows are exact zeros, so a plain sum is the masked sum.
    let s = g.add(e.proj_avt_a, e.proj_avt_v)?;
    let s = g.add(s, e.proj_avt_t)?;
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c as f64).collect();
    let mean = g.scale_rows(s, &inv)?;
    let valid: Vec<bool> = counts.iter().map(|&c| c >= 2).collect();
    let idx = mask_indices(&valid);
    let c = if idx.is_empty() {
        let shape = g.value(mean).shape().to_vec();
        g.constant(Tensor::zeros(&shape))
    } else {
        let rows = g.gather_rows(mean, &idx)?;
        let unit = g.l2_normalize_rows(rows)?;
        g.scatter_rows(unit, &idx, e.n)?
    };
    Ok(CentroidSet { c, valid })
}

/// `Σ_m NCE(g_avt(z_m), c)` with each modality masked by its availability
/// and centroid validity. `None` when no centroid is valid.
pub fn loss_avt(g: &mut Graph, e: &EmbeddingSet, c: &CentroidSet, cfg: &LossConfig) -> Result<Option<Var>> {
    if !c.valid.iter().any(|&b| b) {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for m in Modality::ALL {
        let mask: Vec<bool> = e.avail(m).iter().zip(&c.valid).map(|(&a, &v)| a && v).collect();
        if !mask.iter().any(|&b| b) {
            continue;
        }
        let p = e.proj(Space::AVT, m).expect("every modality projects into AVT");
        let l = nce_with(g, cfg.form, p, c.c, cfg.tau, &mask)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(total)
}

/// Per-term values of one loss evaluation. Disabled or skipped terms read 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_AV")]
    pub l_av: f64,
    #[serde(rename = "L_VT")]
    pub l_vt: f64,
    #[serde(rename = "L_AVT")]
    pub l_avt: f64,
    pub total: f64,
    pub skipped_terms: Vec<Term>,
}

impl LossBreakdown {
    pub fn get(&self, t: Term) -> f64 {
        match t {
            Term::AV => self.l_av,
            Term::VT => self.l_vt,
            Term::AVT => self.l_avt,
        }
    }
}

/// Weighted sum of the enabled terms. The returned variable is a constant
/// zero when every enabled term was skipped.
pub fn loss_total(g: &mut Graph, e: &EmbeddingSet, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let mut out = LossBreakdown::default();
    let mut total: Option<Var> = None;
    for t in Term::ALL {
        if !cfg.enabled(t) {
            continue;
        }
        let term = match t {
            Term::AV => loss_av(g, e, cfg)?,
            Term::VT => loss_vt(g, e, cfg)?,
            Term::AVT => {
                let c = compute_centroids(g, e)?;
                loss_avt(g, e, &c, cfg)?
            }
        };
        let Some(v) = term else {
            out.skipped_terms.push(t);
            continue;
        };
        let value = g.value(v).item()?;
        match t {
            Term::AV => out.l_av = value,
            Term::VT => out.l_vt = value,
            Term::AVT => out.l_avt = value,
        }
        let w = cfg.weights.get(t);
        let weighted = if w == 1.0 { v } else { g.scale(v, w)? };
        total = Some(match total {
            Some(acc) => g.add(acc, weighted)?,
            None => weighted,
        });
    }
    let total = match total {
        Some(v) => v,
        None => g.constant(Tensor::zeros(&[])),
    };
    out.total = g.value(total).item()?;
    Ok((total, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(g: &mut Graph, rows: &[&[f64]]) -> Var {
        g.constant(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn similarity_values() {
        let e1 = [1.0, 0.0];
        let e2 = [0.0, 1.0];
        assert!((similarity(&e1, &e1, 1.0).unwrap() - std::f64::consts::E).abs() < 1e-12);
        assert_eq!(similarity(&e1, &e2, 0.07).unwrap(), 1.0);
        let s = similarity(&e1, &e1, 0.07).unwrap();
        assert!((s - (1.0f64 / 0.07).exp()).abs() < 1e-6);
        assert!((s / 1.6003e6 - 1.0).abs() < 1e-4, "{s}");
        assert!(similarity(&e1, &e1, 0.0).is_err());
    }

    #[test]
    fn nce_reference_values() {
        let mut g = Graph::new();
        let z = mat(&mut g, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = nce(&mut g, z, z, 1.0, &[true, true]).unwrap();
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((g.value(l).item().unwrap() - want).abs() < 1e-12);

        let r = [0.6, 0.8];
        let same = mat(&mut g, &[&r, &r, &r, &r]);
        for tau in [0.07, 1.0] {
            let l = nce(&mut g, same, same, tau, &[true; 4]).unwrap();
            assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);
        }

        let l = nce(&mut g, same, same, 0.07, &[false, true, false, false]).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn nce_rejects_bad_input() {
        let mut g = Graph::new();
        let z = mat(&mut g, &[&[1.0, 0.0], &[0.0, 2.0]]);
        assert!(nce(&mut g, z, z, 1.0, &[false, false]).is_err());
        assert!(matches!(nce(&mut g, z, z, 1.0, &[true, true]), Err(Error::Invalid(_))));
        // the non-unit row is masked out, so this is fine
        assert!(nce(&mut g, z, z, 1.0, &[true, false]).is_ok());
    }

    #[test]
    fn term_parsing() {
        assert_eq!(parse_terms("vt, av,av").unwrap(), vec![Term::AV, Term::VT]);
        assert!(matches!(parse_terms("av,xx"), Err(Error::Config(_))));
        assert!(LossConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig::with_terms(&[]).validate().is_err());
    }
}
