//! The batch objective: forward passes of one triplet batch through both
//! branches, the codecs and the semantic projection, the enabled loss terms
//! averaged over the batch, and their gradients w.r.t. every parameter.

use crate::data::{DatasetBundle, Modality, Triplet};
use crate::encoders::{
    branch_backward, branch_forward, classify, classify_backward, codec_backward, codec_trace,
    global_disc_backward, global_disc_with_slope, local_disc_backward, local_disc_with_slope,
    standard_normal_noise, BranchGrad, BranchTrace, Codec, DimensionSpec, LatentGrad, ModelParams,
};
use crate::error::{Error, Result};
use crate::graph::{semantic_project_backward, semantic_project_trace, SemanticGraph};
use crate::losses::{
    classification_ce_grad, global_adversarial_grad, instance_triplet_grad, local_adversarial_grad,
    reconstruction_grad, semantic_loss_grad, tskl_triplet_grad, LossBreakdown, LossConfig,
    MomentGrad, ReconTerm, Term, TermFlags,
};
use crate::rng::derive_seed;
use crate::tensor::Matrix;

/// Parameter groups owned by the discriminators.
pub const DISCRIMINATOR_PREFIXES: [&str; 2] = ["local_disc.", "global_disc."];

pub fn is_discriminator_param(name: &str) -> bool {
    DISCRIMINATOR_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Gradient of every enabled term w.r.t. every parameter.
    Full,
    /// Only the adversarial terms, only into discriminator parameters.
    Discriminator,
}

/// Everything fixed across batches of one training run.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub bundle: &'a DatasetBundle,
    pub graph: &'a SemanticGraph,
    pub dims: &'a DimensionSpec,
    pub loss: &'a LossConfig,
    flags: TermFlags,
    pub use_gcn: bool,
}

impl<'a> Objective<'a> {
    pub fn new(
        bundle: &'a DatasetBundle,
        graph: &'a SemanticGraph,
        dims: &'a DimensionSpec,
        loss: &'a LossConfig,
        flags: TermFlags,
        use_gcn: bool,
    ) -> Result<Self> {
        dims.validate()?;
        loss.validate()?;
        let seen = bundle.split.seen_classes.len();
        if graph.prototypes.rows != seen || dims.num_seen != seen {
            return Err(Error::Shape(format!(
                "{} graph rows, {} classifier outputs, {} seen classes",
                graph.prototypes.rows, dims.num_seen, seen
            )));
        }
        if graph.prototypes.cols != dims.semantic {
            return Err(Error::Shape(format!(
                "prototype dim {} vs semantic dim {}",
                graph.prototypes.cols, dims.semantic
            )));
        }
        Ok(Self {
            bundle,
            graph,
            dims,
            loss,
            flags: flags.effective(loss),
            use_gcn,
        })
    }

    /// Flags in effect (global adversarial dropped unless switched on).
    pub fn flags(&self) -> TermFlags {
        self.flags
    }

    pub fn evaluate(&self, params: &ModelParams, triplets: &[Triplet], noise_seed: u64) -> Result<LossBreakdown> {
        self.run(params, triplets, noise_seed, None)
    }

    /// Batch-mean loss breakdown; accumulates the gradient of the enabled
    /// total into `grads`.
    pub fn evaluate_with_grad(
        &self,
        params: &ModelParams,
        triplets: &[Triplet],
        noise_seed: u64,
        mode: GradMode,
        grads: &mut ModelParams,
    ) -> Result<LossBreakdown> {
        self.run(params, triplets, noise_seed, Some((mode, grads)))
    }

    fn label(&self, class_id: usize) -> Result<usize> {
        self.bundle
            .split
            .seen_index(class_id)
            .ok_or_else(|| Error::InvalidArgument(format!("class {class_id} is not a seen class")))
    }

    fn run(
        &self,
        params: &ModelParams,
        triplets: &[Triplet],
        noise_seed: u64,
        mut grad: Option<(GradMode, &mut ModelParams)>,
    ) -> Result<LossBreakdown> {
        if triplets.is_empty() {
            return Err(Error::Empty("triplet batch"));
        }
        let dims = self.dims;
        let flags = self.flags;
        let mode = grad.as_ref().map(|(m, _)| *m);
        let full_grad = mode == Some(GradMode::Full);
        let scale = 1.0 / triplets.len() as f64;
        let (lat, cod) = (dims.latent, dims.codec);

        let projection = if flags.contains(Term::Semantic) {
            Some(semantic_project_trace(self.graph, params, self.use_gcn)?)
        } else {
            None
        };
        let mut d_projection = projection
            .as_ref()
            .map(|p| Matrix::zeros(p.output.rows, p.output.cols));

        let mut out = LossBreakdown::default();
        for (i, t) in triplets.iter().enumerate() {
            let sk = self
                .bundle
                .sketches
                .get(t.anchor)
                .ok_or_else(|| Error::InvalidArgument(format!("anchor {} out of range", t.anchor)))?;
            let pos = self
                .bundle
                .images
                .get(t.positive)
                .ok_or_else(|| Error::InvalidArgument(format!("positive {} out of range", t.positive)))?;
            let neg = self
                .bundle
                .images
                .get(t.negative)
                .ok_or_else(|| Error::InvalidArgument(format!("negative {} out of range", t.negative)))?;
            let noise = standard_normal_noise(derive_seed(noise_seed, &[i as u64]), 3 * lat + 2 * cod);
            let ta = branch_forward(params, dims, Modality::Sketch, &sk.feature_map, &noise[..lat]);
            let tp = branch_forward(params, dims, Modality::Image, &pos.feature_map, &noise[lat..2 * lat]);
            let tn = branch_forward(params, dims, Modality::Image, &neg.feature_map, &noise[2 * lat..3 * lat]);

            let mut ga = BranchGrad::zeros(dims);
            let mut gp = BranchGrad::zeros(dims);
            let mut gn = BranchGrad::zeros(dims);

            if flags.contains(Term::LocalAdv) {
                let (ls, slope_s) = local_disc_with_slope(params, &ta.pooled);
                let (li, slope_i) = local_disc_with_slope(params, &tp.pooled);
                let (v, dls, dli) = local_adversarial_grad(ls, li);
                out.add(Term::LocalAdv, v * scale);
                if let Some((_, g)) = grad.as_mut() {
                    local_disc_backward(params, &ta.pooled, dls * scale, slope_s, g, &mut ga.pooled);
                    local_disc_backward(params, &tp.pooled, dli * scale, slope_i, g, &mut gp.pooled);
                }
            }
            if flags.contains(Term::GlobalAdv) {
                let (fa, sa) = global_disc_with_slope(params, &ta.latent().sample);
                let (fp, sp) = global_disc_with_slope(params, &tp.latent().sample);
                let (fn_, sn) = global_disc_with_slope(params, &tn.latent().sample);
                let (v, d) = global_adversarial_grad(fa, fp, fn_);
                out.add(Term::GlobalAdv, v * scale);
                if let Some((_, g)) = grad.as_mut() {
                    global_disc_backward(params, &ta.latent().sample, d[0] * scale, sa, g, &mut ga.latent.sample);
                    global_disc_backward(params, &tp.latent().sample, d[1] * scale, sp, g, &mut gp.latent.sample);
                    global_disc_backward(params, &tn.latent().sample, d[2] * scale, sn, g, &mut gn.latent.sample);
                }
            }
            if mode == Some(GradMode::Discriminator) {
                continue;
            }

            let (za, zp, zn) = (&ta.latent().sample, &tp.latent().sample, &tn.latent().sample);
            if flags.contains(Term::TSkl) {
                let (v, [ma, mp, mn]) = tskl_triplet_grad(ta.latent(), tp.latent(), tn.latent(), self.loss)?;
                out.add(Term::TSkl, v * scale);
                if full_grad {
                    add_moments(&mut ga.latent, &ma, scale);
                    add_moments(&mut gp.latent, &mp, scale);
                    add_moments(&mut gn.latent, &mn, scale);
                }
            }
            if flags.contains(Term::Triplet) {
                let (v, [da, dp, dn]) = instance_triplet_grad(za, zp, zn, self.loss.mu)?;
                out.add(Term::Triplet, v * scale);
                if full_grad {
                    axpy(&mut ga.latent.sample, &da, scale);
                    axpy(&mut gp.latent.sample, &dp, scale);
                    axpy(&mut gn.latent.sample, &dn, scale);
                }
            }
            if flags.contains(Term::Class) {
                let labels = [self.label(sk.class_id)?, self.label(pos.class_id)?, self.label(neg.class_id)?];
                for ((z, g), label) in [za, zp, zn]
                    .into_iter()
                    .zip([&mut ga, &mut gp, &mut gn])
                    .zip(labels)
                {
                    let logits = classify(params, z);
                    let (v, d_logits) = classification_ce_grad(&logits, label)?;
                    out.add(Term::Class, v * scale);
                    if let Some((GradMode::Full, grads)) = grad.as_mut() {
                        let d: Vec<f64> = d_logits.iter().map(|v| v * scale).collect();
                        classify_backward(params, z, &d, grads, &mut g.latent.sample);
                    }
                }
            }
            if flags.contains(Term::Recon) {
                let noise_p = &noise[3 * lat..3 * lat + cod];
                let noise_a = &noise[3 * lat + cod..];
                let cp = codec_trace(params, Codec::VP, &tp.attended, noise_p);
                let ca = codec_trace(params, Codec::VAlpha, &ta.attended, noise_a);
                let (v1, r1) = reconstruction_grad(ReconTerm {
                    reconstruction: &cp.reconstruction,
                    target: za,
                    encoding: cp.encoding(),
                })?;
                let (v2, r2) = reconstruction_grad(ReconTerm {
                    reconstruction: &ca.reconstruction,
                    target: zp,
                    encoding: ca.encoding(),
                })?;
                out.add(Term::Recon, (v1 + v2) * scale);
                if let Some((GradMode::Full, grads)) = grad.as_mut() {
                    codec_step(params, Codec::VP, &tp, &cp, &r1, scale, grads, &mut gp, &mut ga);
                    codec_step(params, Codec::VAlpha, &ta, &ca, &r2, scale, grads, &mut ga, &mut gp);
                }
            }
            if let Some(proj) = projection.as_ref() {
                let row = self.label(pos.class_id)?;
                let (v, [da, dp, dn], de) = semantic_loss_grad(za, zp, zn, proj.output.row(row), self.loss)?;
                out.add(Term::Semantic, v * scale);
                if full_grad {
                    axpy(&mut ga.latent.sample, &da, scale);
                    axpy(&mut gp.latent.sample, &dp, scale);
                    axpy(&mut gn.latent.sample, &dn, scale);
                    let dproj = d_projection.as_mut().expect("allocated with projection");
                    axpy(dproj.row_mut(row), &de, scale);
                }
            }

            if let Some((GradMode::Full, grads)) = grad.as_mut() {
                branch_backward(params, dims, &sk.feature_map, &ta, &ga, grads);
                branch_backward(params, dims, &pos.feature_map, &tp, &gp, grads);
                branch_backward(params, dims, &neg.feature_map, &tn, &gn, grads);
            }
        }

        if let (Some((GradMode::Full, grads)), Some(proj), Some(dproj)) =
            (grad.as_mut(), projection.as_ref(), d_projection.as_ref())
        {
            semantic_project_backward(self.graph, params, proj, dproj, grads);
        }
        Ok(out)
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn add_moments(g: &mut LatentGrad, m: &MomentGrad, scale: f64) {
    axpy(&mut g.mean, &m.mean, scale);
    axpy(&mut g.log_var, &m.log_var, scale);
}

/// Backward through one codec direction: into the codec, the source
/// branch's attended map and the target branch's latent sample.
#[allow(clippy::too_many_arguments)]
fn codec_step(
    params: &ModelParams,
    which: Codec,
    source: &BranchTrace,
    trace: &crate::encoders::CodecTrace,
    r: &crate::losses::ReconGrad,
    scale: f64,
    grads: &mut ModelParams,
    source_grad: &mut BranchGrad,
    target_grad: &mut BranchGrad,
) {
    let d_recon: Vec<f64> = r.reconstruction.iter().map(|v| v * scale).collect();
    let n = r.encoding.mean.len();
    let mut d_enc = LatentGrad::zeros(n);
    add_moments(&mut d_enc, &r.encoding, scale);
    codec_backward(
        params,
        which,
        &source.attended,
        trace,
        &d_recon,
        &d_enc,
        grads,
        &mut source_grad.attended,
    );
    axpy(&mut target_grad.latent.sample, &r.target, scale);
}
