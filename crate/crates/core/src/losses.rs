//! Closed-form losses and their input gradients.
//!
//! Each loss has a value function and a `*_grad` twin returning the value
//! together with the gradient w.r.t. every input; the model module chains
//! those into parameter gradients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::GaussianLatent;
use crate::error::{Error, Result};
use crate::tensor::{dot, norm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the distribution-level triplet hinge.
    pub beta: f64,
    /// Margin of the distribution-level triplet hinge.
    pub lambda: f64,
    /// Margin of the instance triplet hinge.
    pub mu: f64,
    pub t_pos: f64,
    pub t_neg: f64,
    pub enable_global_adversarial: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 1e-4,
            lambda: 0.1,
            mu: 0.1,
            t_pos: 1.0,
            t_neg: 0.0,
            enable_global_adversarial: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("lambda", self.lambda), ("mu", self.mu)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.t_pos.is_finite() && self.t_neg.is_finite()) {
            return Err(Error::InvalidArgument("cosine thresholds must be finite".into()));
        }
        Ok(())
    }
}

/// Gradient w.r.t. the moments of a diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentGrad {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl MomentGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            log_var: vec![0.0; n],
        }
    }

    fn scaled(mut self, s: f64) -> Self {
        self.mean.iter_mut().for_each(|v| *v *= s);
        self.log_var.iter_mut().for_each(|v| *v *= s);
        self
    }

    fn add(&mut self, other: &MomentGrad) {
        for (a, b) in self.mean.iter_mut().zip(&other.mean) {
            *a += b;
        }
        for (a, b) in self.log_var.iter_mut().zip(&other.log_var) {
            *a += b;
        }
    }
}

fn same_dim(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("dimension {a} vs {b}")));
    }
    Ok(())
}

/// `KL(P || Q)` for diagonal Gaussians, summed over dimensions.
pub fn gaussian_kl(p: &GaussianLatent, q: &GaussianLatent) -> Result<f64> {
    Ok(gaussian_kl_grad(p, q)?.0)
}

pub fn gaussian_kl_grad(
    p: &GaussianLatent,
    q: &GaussianLatent,
) -> Result<(f64, MomentGrad, MomentGrad)> {
    same_dim(p.dim(), q.dim())?;
    let n = p.dim();
    let mut value = 0.0;
    let mut gp = MomentGrad::zeros(n);
    let mut gq = MomentGrad::zeros(n);
    for d in 0..n {
        let var_p = p.log_var[d].exp();
        let inv_var_q = (-q.log_var[d]).exp();
        let diff = p.mean[d] - q.mean[d];
        let ratio = (var_p + diff * diff) * inv_var_q;
        value += 0.5 * (q.log_var[d] - p.log_var[d] + ratio - 1.0);
        gp.mean[d] = diff * inv_var_q;
        gq.mean[d] = -diff * inv_var_q;
        gp.log_var[d] = 0.5 * (var_p * inv_var_q - 1.0);
        gq.log_var[d] = 0.5 * (1.0 - ratio);
    }
    Ok((value, gp, gq))
}

/// `(KL(P||Q) + KL(Q||P)) / 2`. The two directions are summed in a fixed
/// per-dimension form so that swapping the arguments is bitwise exact.
pub fn symmetric_kl(p: &GaussianLatent, q: &GaussianLatent) -> Result<f64> {
    Ok(symmetric_kl_grad(p, q)?.0)
}

pub fn symmetric_kl_grad(
    p: &GaussianLatent,
    q: &GaussianLatent,
) -> Result<(f64, MomentGrad, MomentGrad)> {
    same_dim(p.dim(), q.dim())?;
    let n = p.dim();
    let mut value = 0.0;
    let mut gp = MomentGrad::zeros(n);
    let mut gq = MomentGrad::zeros(n);
    for d in 0..n {
        let (vp, vq) = (p.log_var[d].exp(), q.log_var[d].exp());
        let diff2 = (p.mean[d] - q.mean[d]) * (p.mean[d] - q.mean[d]);
        // log terms cancel; what is left is symmetric in (P, Q) term by term
        let a = (vp + diff2) / vq;
        let b = (vq + diff2) / vp;
        value += 0.25 * (a + b) - 0.5;
        let diff = p.mean[d] - q.mean[d];
        let dm = 0.5 * diff * (1.0 / vq + 1.0 / vp);
        gp.mean[d] = dm;
        gq.mean[d] = -dm;
        gp.log_var[d] = 0.25 * (vp / vq - b);
        gq.log_var[d] = 0.25 * (vq / vp - a);
    }
    Ok((value, gp, gq))
}

/// Distribution-level triplet hinge `beta * max(0, SKL(a,p) - SKL(a,n) + lambda)`.
pub fn tskl_triplet(
    pa: &GaussianLatent,
    pp: &GaussianLatent,
    pn: &GaussianLatent,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(tskl_triplet_grad(pa, pp, pn, cfg)?.0)
}

pub fn tskl_triplet_grad(
    pa: &GaussianLatent,
    pp: &GaussianLatent,
    pn: &GaussianLatent,
    cfg: &LossConfig,
) -> Result<(f64, [MomentGrad; 3])> {
    let n = pa.dim();
    let (sp, ga_p, gp) = symmetric_kl_grad(pa, pp)?;
    let (sn, ga_n, gn) = symmetric_kl_grad(pa, pn)?;
    let margin = sp - sn + cfg.lambda;
    if margin <= 0.0 {
        return Ok((0.0, [MomentGrad::zeros(n), MomentGrad::zeros(n), MomentGrad::zeros(n)]));
    }
    let mut ga = ga_p.scaled(cfg.beta);
    ga.add(&ga_n.scaled(-cfg.beta));
    Ok((cfg.beta * margin, [ga, gp.scaled(cfg.beta), gn.scaled(-cfg.beta)]))
}

/// Instance triplet hinge `max(0, mu + |a - p| - |a - n|)` on Euclidean distances.
pub fn instance_triplet(za: &[f64], zp: &[f64], zn: &[f64], mu: f64) -> Result<f64> {
    Ok(instance_triplet_grad(za, zp, zn, mu)?.0)
}

pub fn instance_triplet_grad(
    za: &[f64],
    zp: &[f64],
    zn: &[f64],
    mu: f64,
) -> Result<(f64, [Vec<f64>; 3])> {
    same_dim(za.len(), zp.len())?;
    same_dim(za.len(), zn.len())?;
    let n = za.len();
    let dap: Vec<f64> = za.iter().zip(zp).map(|(a, b)| a - b).collect();
    let dan: Vec<f64> = za.iter().zip(zn).map(|(a, b)| a - b).collect();
    let (np, nn) = (norm(&dap), norm(&dan));
    let value = mu + np - nn;
    if value <= 0.0 {
        return Ok((0.0, [vec![0.0; n], vec![0.0; n], vec![0.0; n]]));
    }
    let up: Vec<f64> = dap.iter().map(|v| if np > 0.0 { v / np } else { 0.0 }).collect();
    let un: Vec<f64> = dan.iter().map(|v| if nn > 0.0 { v / nn } else { 0.0 }).collect();
    let ga = up.iter().zip(&un).map(|(a, b)| a - b).collect();
    let gp = up.iter().map(|v| -v).collect();
    Ok((value, [ga, gp, un]))
}

/// Softmax cross-entropy with log-sum-exp stabilization.
pub fn classification_ce(logits: &[f64], label: usize) -> Result<f64> {
    Ok(classification_ce_grad(logits, label)?.0)
}

pub fn classification_ce_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    let mut grad: Vec<f64> = logits.iter().map(|v| (v - lse).exp()).collect();
    grad[label] -= 1.0;
    Ok((lse - logits[label], grad))
}

/// Local adversarial objective `0.5 log(1 - l_sketch) + 0.5 log(l_image)`.
/// The discriminator ascends it, the feature networks descend it.
pub fn local_adversarial(l_sketch: f64, l_image: f64) -> f64 {
    local_adversarial_grad(l_sketch, l_image).0
}

pub fn local_adversarial_grad(l_sketch: f64, l_image: f64) -> (f64, f64, f64) {
    (
        0.5 * (1.0 - l_sketch).ln() + 0.5 * l_image.ln(),
        -0.5 / (1.0 - l_sketch),
        0.5 / l_image,
    )
}

/// Global adversarial objective on latent samples with hard domain labels:
/// `log(1 - f(sketch)) + log f(positive) + log f(negative)`.
pub fn global_adversarial_grad(f_sketch: f64, f_pos: f64, f_neg: f64) -> (f64, [f64; 3]) {
    (
        (1.0 - f_sketch).ln() + f_pos.ln() + f_neg.ln(),
        [-1.0 / (1.0 - f_sketch), 1.0 / f_pos, 1.0 / f_neg],
    )
}

/// `KL(q || N(0, I))`.
pub fn unit_gaussian_kl(enc: &GaussianLatent) -> f64 {
    unit_gaussian_kl_grad(enc).0
}

pub fn unit_gaussian_kl_grad(enc: &GaussianLatent) -> (f64, MomentGrad) {
    let n = enc.dim();
    let mut g = MomentGrad::zeros(n);
    let mut value = 0.0;
    for d in 0..n {
        let var = enc.log_var[d].exp();
        value += 0.5 * (var + enc.mean[d] * enc.mean[d] - 1.0 - enc.log_var[d]);
        g.mean[d] = enc.mean[d];
        g.log_var[d] = 0.5 * (var - 1.0);
    }
    (value, g)
}

/// One direction of the cross-modal reconstruction loss.
#[derive(Debug, Clone, Copy)]
pub struct ReconTerm<'a> {
    pub reconstruction: &'a [f64],
    pub target: &'a [f64],
    pub encoding: &'a GaussianLatent,
}

#[derive(Debug, Clone)]
pub struct ReconGrad {
    pub reconstruction: Vec<f64>,
    pub target: Vec<f64>,
    pub encoding: MomentGrad,
}

/// `|recon - target|^2 + KL(enc || N(0, I))`.
pub fn reconstruction_grad(term: ReconTerm<'_>) -> Result<(f64, ReconGrad)> {
    same_dim(term.reconstruction.len(), term.target.len())?;
    let diff: Vec<f64> = term
        .reconstruction
        .iter()
        .zip(term.target)
        .map(|(a, b)| a - b)
        .collect();
    let (kl, gk) = unit_gaussian_kl_grad(term.encoding);
    Ok((
        dot(&diff, &diff) + kl,
        ReconGrad {
            reconstruction: diff.iter().map(|v| 2.0 * v).collect(),
            target: diff.iter().map(|v| -2.0 * v).collect(),
            encoding: gk,
        },
    ))
}

/// Sum of both reconstruction directions.
pub fn crossmodal_recon(
    recon_p: &[f64],
    target_sketch_latent: &[f64],
    enc_p: &GaussianLatent,
    recon_a: &[f64],
    target_image_latent: &[f64],
    enc_a: &GaussianLatent,
) -> Result<f64> {
    let (a, _) = reconstruction_grad(ReconTerm {
        reconstruction: recon_p,
        target: target_sketch_latent,
        encoding: enc_p,
    })?;
    let (b, _) = reconstruction_grad(ReconTerm {
        reconstruction: recon_a,
        target: target_image_latent,
        encoding: enc_a,
    })?;
    Ok(a + b)
}

/// `S(x, y, t) = (t - cos(x, y)) / 2`.
pub fn cosine_margin(x: &[f64], y: &[f64], t: f64) -> Result<f64> {
    Ok(cosine_margin_grad(x, y, t)?.0)
}

pub fn cosine_margin_grad(x: &[f64], y: &[f64], t: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    same_dim(x.len(), y.len())?;
    let (nx, ny) = (norm(x), norm(y));
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::InvalidArgument("cosine of a zero-norm vector".into()));
    }
    let cos = dot(x, y) / (nx * ny);
    // dS/dx = -(y / (|x||y|) - cos x / |x|^2) / 2
    let gx = x
        .iter()
        .zip(y)
        .map(|(a, b)| -0.5 * (b / (nx * ny) - cos * a / (nx * nx)))
        .collect();
    let gy = x
        .iter()
        .zip(y)
        .map(|(a, b)| -0.5 * (a / (nx * ny) - cos * b / (ny * ny)))
        .collect();
    Ok((0.5 * (t - cos), gx, gy))
}

/// Graph-regularized semantic loss of one triplet against its projected
/// class embedding.
pub fn semantic_loss(
    z_sketch: &[f64],
    z_pos: &[f64],
    z_neg: &[f64],
    class_embedding: &[f64],
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(semantic_loss_grad(z_sketch, z_pos, z_neg, class_embedding, cfg)?.0)
}

/// Returns the value, the gradients for (sketch, positive, negative) and the
/// gradient for the class embedding.
pub fn semantic_loss_grad(
    z_sketch: &[f64],
    z_pos: &[f64],
    z_neg: &[f64],
    class_embedding: &[f64],
    cfg: &LossConfig,
) -> Result<(f64, [Vec<f64>; 3], Vec<f64>)> {
    let (va, ga, ge_a) = cosine_margin_grad(z_sketch, class_embedding, cfg.t_pos)?;
    let (vp, gp, ge_p) = cosine_margin_grad(z_pos, class_embedding, cfg.t_pos)?;
    let (vn, gn, ge_n) = cosine_margin_grad(z_neg, class_embedding, cfg.t_neg)?;
    let ge = ge_a
        .iter()
        .zip(&ge_p)
        .zip(&ge_n)
        .map(|((a, b), c)| a + b + c)
        .collect();
    Ok((va + vp + vn, [ga, gp, gn], ge))
}

/// Named loss terms. L1 is `TSkl + Triplet + Class`, L2 is `LocalAdv`,
/// L3 is `Recon`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Term {
    TSkl,
    Triplet,
    Class,
    LocalAdv,
    Recon,
    Semantic,
    GlobalAdv,
}

impl Term {
    pub const ALL: [Term; 7] = [
        Term::TSkl,
        Term::Triplet,
        Term::Class,
        Term::LocalAdv,
        Term::Recon,
        Term::Semantic,
        Term::GlobalAdv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::TSkl => "t_skl",
            Term::Triplet => "triplet",
            Term::Class => "class",
            Term::LocalAdv => "local_adv",
            Term::Recon => "recon",
            Term::Semantic => "semantic",
            Term::GlobalAdv => "global_adv",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Terms whose discriminator is updated by ascent.
    pub fn is_adversarial(self) -> bool {
        matches!(self, Term::LocalAdv | Term::GlobalAdv)
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Term::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss term `{s}`")))
    }
}

/// Set of enabled loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TermFlags(u8);

impl TermFlags {
    pub const NONE: TermFlags = TermFlags(0);

    /// Every term of the full objective except the optional global
    /// adversarial one.
    pub fn full() -> Self {
        Self::of(&[
            Term::TSkl,
            Term::Triplet,
            Term::Class,
            Term::LocalAdv,
            Term::Recon,
            Term::Semantic,
        ])
    }

    pub fn all() -> Self {
        Self::of(&Term::ALL)
    }

    pub fn of(terms: &[Term]) -> Self {
        Self(terms.iter().fold(0, |acc, t| acc | (1 << t.index())))
    }

    pub fn contains(self, t: Term) -> bool {
        self.0 & (1 << t.index()) != 0
    }

    pub fn with(self, t: Term) -> Self {
        Self(self.0 | (1 << t.index()))
    }

    pub fn without(self, t: Term) -> Self {
        Self(self.0 & !(1 << t.index()))
    }

    pub fn intersect(self, other: Self) -> Self {
        Self(self.0 & other.0)
    }

    pub fn union(self, other: Self) -> Self {
        Self(self.0 | other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn from_bits(bits: u8) -> Self {
        Self(bits & 0x7f)
    }

    pub fn terms(self) -> impl Iterator<Item = Term> {
        Term::ALL.into_iter().filter(move |t| self.contains(*t))
    }

    /// Flags actually in effect under `cfg`: the global adversarial term
    /// also needs its config switch.
    pub fn effective(self, cfg: &LossConfig) -> Self {
        if cfg.enable_global_adversarial {
            self
        } else {
            self.without(Term::GlobalAdv)
        }
    }
}

impl fmt::Display for TermFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.terms().map(Term::name).collect();
        f.write_str(&names.join("+"))
    }
}

/// Per-term loss values; disabled terms stay at zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub values: [f64; 7],
}

impl LossBreakdown {
    pub fn get(&self, t: Term) -> f64 {
        self.values[t.index()]
    }

    pub fn set(&mut self, t: Term, v: f64) {
        self.values[t.index()] = v;
    }

    pub fn add(&mut self, t: Term, v: f64) {
        self.values[t.index()] += v;
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    /// Total over `flags`, summed in term order.
    pub fn total(&self, flags: TermFlags) -> f64 {
        flags.terms().map(|t| self.get(t)).sum()
    }

    pub fn first_non_finite(&self) -> Option<Term> {
        Term::ALL.into_iter().find(|t| !self.get(*t).is_finite())
    }
}

/// Sums the enabled components. `L_total = L1 + L2 + L3 + L_semantic`
/// (+ the optional global adversarial term).
pub fn total_loss(components: &LossBreakdown, flags: TermFlags) -> (f64, LossBreakdown) {
    let mut kept = LossBreakdown::default();
    for t in flags.terms() {
        kept.set(t, components.get(t));
    }
    (kept.total(flags), kept)
}
