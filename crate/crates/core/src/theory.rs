//! Proxy-A-distance estimates of latent domain divergence and the ordering
//! report between same-class and different-class image clouds.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, SampleRecord};
use crate::encoders::{branch_forward, standard_normal_noise, DimensionSpec, ModelParams};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, TAG_PROBE, TAG_THEORY};
use crate::tensor::Matrix;

pub const MIN_SAMPLES: usize = 20;
pub const TRAIN_FRACTION: f64 = 0.7;
const RIDGE: f64 = 1e-2;
const NEWTON_STEPS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub d_alpha_p: f64,
    pub d_alpha_n: f64,
    pub d_p_unit: f64,
    pub d_n_unit: f64,
    pub ordering_holds: bool,
    pub rhs_eq10: f64,
}

fn split_side(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, &[TAG_PROBE, n as u64]));
    let n_train = ((n as f64) * TRAIN_FRACTION).round() as usize;
    let test = idx.split_off(n_train);
    (idx, test)
}

/// Ridge-regularized logistic regression fitted by Newton's method on
/// standardized features; returns the weights with the bias last.
fn fit_logistic(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let (n, d) = x.shape();
    let mut w = DVector::zeros(d);
    for _ in 0..NEWTON_STEPS {
        let z = x * &w;
        let p = z.map(crate::tensor::sigmoid);
        let mut grad = x.transpose() * (&p - y);
        let mut h = DMatrix::zeros(d, d);
        for i in 0..n {
            let s = p[i] * (1.0 - p[i]);
            let row = x.row(i);
            h += s * row.transpose() * row;
        }
        for j in 0..d - 1 {
            grad[j] += RIDGE * w[j];
            h[(j, j)] += RIDGE;
        }
        h[(d - 1, d - 1)] += 1e-9;
        let Some(step) = h.cholesky().map(|c| c.solve(&grad)) else {
            break;
        };
        w -= &step;
        if step.amax() < 1e-10 {
            break;
        }
    }
    w
}

/// `max(0, 2 (1 - 2 err))` of a linear probe trained on 70% of each side and
/// tested on the rest.
pub fn estimate_divergence(a: &Matrix, b: &Matrix, seed: u64) -> Result<f64> {
    for m in [a, b] {
        if m.rows < MIN_SAMPLES {
            return Err(Error::TooFewSamples {
                needed: MIN_SAMPLES,
                got: m.rows,
            });
        }
    }
    if a.cols != b.cols {
        return Err(Error::Shape(format!("{} vs {} columns", a.cols, b.cols)));
    }
    let d = a.cols;
    let (a_train, a_test) = split_side(a.rows, seed);
    let (b_train, b_test) = split_side(b.rows, seed);

    let train_rows: Vec<(&[f64], f64)> = a_train
        .iter()
        .map(|&i| (a.row(i), 0.0))
        .chain(b_train.iter().map(|&i| (b.row(i), 1.0)))
        .collect();
    let n = train_rows.len() as f64;
    let mut mean = vec![0.0; d];
    for (r, _) in &train_rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for (r, _) in &train_rows {
        for ((s, v), m) in sd.iter_mut().zip(r.iter()).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| if *v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    let features = |r: &[f64]| -> Vec<f64> {
        let mut f: Vec<f64> = r.iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect();
        f.push(1.0);
        f
    };

    let x = DMatrix::from_row_iterator(
        train_rows.len(),
        d + 1,
        train_rows.iter().flat_map(|(r, _)| features(r)),
    );
    let y = DVector::from_iterator(train_rows.len(), train_rows.iter().map(|(_, l)| *l));
    let w = fit_logistic(&x, &y);

    let score = |r: &[f64]| -> f64 { features(r).iter().zip(w.iter()).map(|(f, w)| f * w).sum() };
    let mut errors = 0usize;
    for &i in &a_test {
        if score(a.row(i)) > 0.0 {
            errors += 1;
        }
    }
    for &i in &b_test {
        if score(b.row(i)) < 0.0 {
            errors += 1;
        }
    }
    let tested = a_test.len() + b_test.len();
    if tested == 0 {
        return Err(Error::TooFewSamples {
            needed: MIN_SAMPLES,
            got: 0,
        });
    }
    let err = errors as f64 / tested as f64;
    Ok((2.0 * (1.0 - 2.0 * err)).clamp(0.0, 2.0))
}

fn gather(m: &Matrix, rows: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), m.cols);
    for (k, &i) in rows.iter().enumerate() {
        out.row_mut(k).copy_from_slice(m.row(i));
    }
    out
}

fn unit_gaussian(n: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = stream(seed, &[]);
    Matrix {
        rows: n,
        cols: d,
        data: (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect(),
    }
}

/// Averages over `classes` of the four divergence estimates, from
/// precomputed sketch and image embeddings.
pub fn bound_from_embeddings(
    sketches: &Matrix,
    sketch_classes: &[usize],
    images: &Matrix,
    image_classes: &[usize],
    classes: &[usize],
    seed: u64,
) -> Result<BoundReport> {
    if classes.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    let mut sums = [0.0f64; 4];
    for &c in classes {
        let sk: Vec<usize> = (0..sketches.rows).filter(|&i| sketch_classes[i] == c).collect();
        let pos: Vec<usize> = (0..images.rows).filter(|&i| image_classes[i] == c).collect();
        let mut neg: Vec<usize> = (0..images.rows)
            .filter(|&i| image_classes[i] != c && classes.contains(&image_classes[i]))
            .collect();
        neg.shuffle(&mut stream(seed, &[TAG_THEORY, 1, c as u64]));
        neg.truncate(pos.len());
        let (sk, pos, neg) = (gather(sketches, &sk), gather(images, &pos), gather(images, &neg));
        let unit = unit_gaussian(pos.rows, images.cols, derive_seed(seed, &[TAG_THEORY, 2, c as u64]));
        let probe = |k: u64| derive_seed(seed, &[TAG_THEORY, 3, c as u64, k]);
        sums[0] += estimate_divergence(&sk, &pos, probe(0))?;
        sums[1] += estimate_divergence(&sk, &neg, probe(1))?;
        sums[2] += estimate_divergence(&pos, &unit, probe(2))?;
        sums[3] += estimate_divergence(&neg, &unit, probe(3))?;
    }
    let k = classes.len() as f64;
    let [d_alpha_p, d_alpha_n, d_p_unit, d_n_unit] = sums.map(|s| s / k);
    Ok(BoundReport {
        d_alpha_p,
        d_alpha_n,
        d_p_unit,
        d_n_unit,
        ordering_holds: d_alpha_p <= d_alpha_n,
        rhs_eq10: d_p_unit - d_n_unit,
    })
}

/// One reparameterized latent draw per sample.
pub fn posterior_draws(params: &ModelParams, dims: &DimensionSpec, samples: &[SampleRecord], seed: u64) -> Matrix {
    let mut out = Matrix::zeros(samples.len(), dims.latent);
    for (i, s) in samples.iter().enumerate() {
        let noise = standard_normal_noise(derive_seed(seed, &[i as u64]), dims.latent);
        let t = branch_forward(params, dims, s.modality, &s.feature_map, &noise);
        out.row_mut(i).copy_from_slice(&t.latent().sample);
    }
    out
}

/// Divergence report on posterior draws of the seen-class samples.
pub fn bound_report(
    params: &ModelParams,
    dims: &DimensionSpec,
    bundle: &DatasetBundle,
    seed: u64,
) -> Result<BoundReport> {
    let split = &bundle.split;
    let sk: Vec<_> = bundle.sketches.iter().filter(|s| split.is_seen(s.class_id)).cloned().collect();
    let im: Vec<_> = bundle.images.iter().filter(|s| split.is_seen(s.class_id)).cloned().collect();
    let sk_classes: Vec<usize> = sk.iter().map(|s| s.class_id).collect();
    let im_classes: Vec<usize> = im.iter().map(|s| s.class_id).collect();
    bound_from_embeddings(
        &posterior_draws(params, dims, &sk, derive_seed(seed, &[TAG_THEORY, 4, 0])),
        &sk_classes,
        &posterior_draws(params, dims, &im, derive_seed(seed, &[TAG_THEORY, 4, 1])),
        &im_classes,
        &split.seen_classes,
        seed,
    )
}
