//! Semantic projection network. Class prototypes go through an MLP branch
//! (`g1`) and a single graph-convolution branch (`g2`) over the weighted
//! semantic adjacency; the two are concatenated and mapped into the latent
//! space by a second MLP (`g3`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::{cosine, dense_backward, dense_forward, leaky_relu, leaky_relu_grad, norm, Matrix};

/// How the dissimilarity matrix is turned into edge weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GammaMode {
    /// Edge weight is the cosine dissimilarity itself.
    #[default]
    Dissimilarity,
    /// Edge weight is `1 - dissimilarity / 2`.
    Similarity,
}

impl fmt::Display for GammaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GammaMode::Dissimilarity => "dissimilarity",
            GammaMode::Similarity => "similarity",
        })
    }
}

impl FromStr for GammaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dissimilarity" => Ok(GammaMode::Dissimilarity),
            "similarity" => Ok(GammaMode::Similarity),
            _ => Err(Error::InvalidArgument(format!("unknown gamma mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGraph {
    pub prototypes: Matrix,
    /// Pairwise cosine dissimilarity, zero diagonal.
    pub gamma: Matrix,
    /// `D^-1/2 (A + I) D^-1/2` where `A` is the mode-dependent edge weight.
    pub propagation: Matrix,
    pub mode: GammaMode,
}

pub fn build_adjacency(prototypes: &Matrix, mode: GammaMode) -> Result<SemanticGraph> {
    let n = prototypes.rows;
    for i in 0..n {
        if norm(prototypes.row(i)) == 0.0 {
            return Err(Error::InvalidArgument(format!("prototype {i} has zero norm")));
        }
    }
    let mut gamma = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let d = (1.0 - cosine(prototypes.row(i), prototypes.row(j))).clamp(0.0, 2.0);
            gamma.set(i, j, d);
            gamma.set(j, i, d);
        }
    }
    let mut adj = Matrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let w = match mode {
                    GammaMode::Dissimilarity => gamma.get(i, j),
                    GammaMode::Similarity => 1.0 - gamma.get(i, j) / 2.0,
                };
                adj.set(i, j, w);
            }
        }
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| 1.0 / adj.row(i).iter().sum::<f64>().sqrt())
        .collect();
    let mut propagation = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = inv_sqrt_deg[i] * adj.get(i, j) * inv_sqrt_deg[j];
            propagation.set(i, j, v);
            propagation.set(j, i, v);
        }
    }
    Ok(SemanticGraph {
        prototypes: prototypes.clone(),
        gamma,
        propagation,
        mode,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    LeakyRelu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::LeakyRelu => leaky_relu(x),
        }
    }

    fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::LeakyRelu => leaky_relu_grad(x),
        }
    }
}

/// `act(P X W)`.
pub fn gcn_layer(
    propagation: &Matrix,
    features: &Matrix,
    weights: &Matrix,
    activation: Activation,
) -> Result<Matrix> {
    if propagation.cols != features.rows || propagation.rows != propagation.cols {
        return Err(Error::Shape(format!(
            "propagation {}x{} with {} feature rows",
            propagation.rows, propagation.cols, features.rows
        )));
    }
    let mut out = propagation.matmul(features)?.matmul(weights)?;
    out.data.iter_mut().for_each(|v| *v = activation.apply(*v));
    Ok(out)
}

/// Intermediate values of one projection pass.
#[derive(Debug, Clone)]
pub struct ProjectionTrace {
    /// Pre-activations of the three `g1` layers, per class row.
    g1_pre: Vec<Matrix>,
    g1_out: Vec<Matrix>,
    propagated: Matrix,
    g2_pre: Matrix,
    g3_in: Matrix,
    g3_pre: Vec<Matrix>,
    g3_out: Vec<Matrix>,
    pub output: Matrix,
    use_gcn: bool,
}

fn mlp_forward(
    params: &ModelParams,
    prefix: &str,
    input: &Matrix,
    layers: usize,
    last_linear: bool,
) -> (Vec<Matrix>, Vec<Matrix>) {
    let mut pres = Vec::with_capacity(layers);
    let mut outs = Vec::with_capacity(layers);
    let mut x = input.clone();
    for l in 0..layers {
        let w = params.get(&format!("{prefix}.{l}.w"));
        let b = params.get(&format!("{prefix}.{l}.b"));
        let mut pre = Matrix::zeros(x.rows, b.len());
        for r in 0..x.rows {
            dense_forward(x.row(r), w, b, pre.row_mut(r));
        }
        let act = if last_linear && l + 1 == layers {
            Activation::Linear
        } else {
            Activation::LeakyRelu
        };
        let mut out = pre.clone();
        out.data.iter_mut().for_each(|v| *v = act.apply(*v));
        pres.push(pre);
        outs.push(out.clone());
        x = out;
    }
    (pres, outs)
}

#[allow(clippy::too_many_arguments)]
fn mlp_backward(
    params: &ModelParams,
    prefix: &str,
    input: &Matrix,
    pres: &[Matrix],
    outs: &[Matrix],
    last_linear: bool,
    d_out: &Matrix,
    grads: &mut ModelParams,
) -> Matrix {
    let layers = pres.len();
    let mut d = d_out.clone();
    for l in (0..layers).rev() {
        let act = if last_linear && l + 1 == layers {
            Activation::Linear
        } else {
            Activation::LeakyRelu
        };
        for (dv, pv) in d.data.iter_mut().zip(&pres[l].data) {
            *dv *= act.grad(*pv);
        }
        let x = if l == 0 { input } else { &outs[l - 1] };
        let w = params.get(&format!("{prefix}.{l}.w"));
        let mut dx = Matrix::zeros(x.rows, x.cols);
        let (dw, db) = grads.dense_mut(&format!("{prefix}.{l}"));
        for r in 0..x.rows {
            dense_backward(x.row(r), w, d.row(r), dw, db, Some(dx.row_mut(r)));
        }
        d = dx;
    }
    d
}

pub fn semantic_project_trace(
    graph: &SemanticGraph,
    params: &ModelParams,
    use_gcn: bool,
) -> Result<ProjectionTrace> {
    let x = &graph.prototypes;
    let gw = params.get("sem.g2.w");
    let gcn_hidden = gw.len() / x.cols.max(1);
    if gw.len() != x.cols * gcn_hidden {
        return Err(Error::Shape(format!(
            "g2 weight has {} values for semantic dim {}",
            gw.len(),
            x.cols
        )));
    }
    let (g1_pre, g1_out) = mlp_forward(params, "sem.g1", x, 3, false);
    let propagated = graph.propagation.matmul(x)?;
    let g2_w = Matrix {
        rows: x.cols,
        cols: gcn_hidden,
        data: gw.to_vec(),
    };
    let g2_pre = propagated.matmul(&g2_w)?;
    let pooled_width = gcn_hidden / 2;
    let g1_last = g1_out.last().expect("three layers");
    let mut g3_in = Matrix::zeros(x.rows, g1_last.cols + pooled_width);
    for r in 0..x.rows {
        let row = g3_in.row_mut(r);
        row[..g1_last.cols].copy_from_slice(g1_last.row(r));
        if use_gcn {
            let pre = g2_pre.row(r);
            for k in 0..pooled_width {
                row[g1_last.cols + k] = 0.5 * (leaky_relu(pre[2 * k]) + leaky_relu(pre[2 * k + 1]));
            }
        }
    }
    let (g3_pre, g3_out) = mlp_forward(params, "sem.g3", &g3_in, 3, true);
    let output = g3_out.last().expect("three layers").clone();
    Ok(ProjectionTrace {
        g1_pre,
        g1_out,
        propagated,
        g2_pre,
        g3_in,
        g3_pre,
        g3_out,
        output,
        use_gcn,
    })
}

/// `g(W, Gamma) = g3([g1(W), pool(g2(Gamma, W))])`, one latent row per class.
/// With `use_gcn = false` the graph branch contributes zeros.
pub fn semantic_project(graph: &SemanticGraph, params: &ModelParams, use_gcn: bool) -> Result<Matrix> {
    Ok(semantic_project_trace(graph, params, use_gcn)?.output)
}

pub fn semantic_project_backward(
    graph: &SemanticGraph,
    params: &ModelParams,
    trace: &ProjectionTrace,
    d_output: &Matrix,
    grads: &mut ModelParams,
) {
    let d_g3_in = mlp_backward(
        params,
        "sem.g3",
        &trace.g3_in,
        &trace.g3_pre,
        &trace.g3_out,
        true,
        d_output,
        grads,
    );
    let g1_width = trace.g1_out.last().expect("three layers").cols;
    let mut d_g1 = Matrix::zeros(d_g3_in.rows, g1_width);
    for r in 0..d_g3_in.rows {
        d_g1.row_mut(r).copy_from_slice(&d_g3_in.row(r)[..g1_width]);
    }
    mlp_backward(
        params,
        "sem.g1",
        &graph.prototypes,
        &trace.g1_pre,
        &trace.g1_out,
        false,
        &d_g1,
        grads,
    );
    if trace.use_gcn {
        let gcn_hidden = trace.g2_pre.cols;
        let mut d_pre = Matrix::zeros(trace.g2_pre.rows, gcn_hidden);
        for r in 0..d_pre.rows {
            let d_pool = &d_g3_in.row(r)[g1_width..];
            let pre = trace.g2_pre.row(r);
            let row = d_pre.row_mut(r);
            for k in 0..gcn_hidden / 2 {
                row[2 * k] = 0.5 * d_pool[k] * leaky_relu_grad(pre[2 * k]);
                row[2 * k + 1] = 0.5 * d_pool[k] * leaky_relu_grad(pre[2 * k + 1]);
            }
        }
        // dW = (P X)^T dPre
        let dw = trace.propagated.transpose().matmul(&d_pre).expect("shapes agree");
        for (g, v) in grads.get_mut("sem.g2.w").iter_mut().zip(&dw.data) {
            *g += v;
        }
    }
}

/// Pairwise cosine similarities of the rows of `m`.
pub fn similarity_matrix(m: &Matrix) -> Matrix {
    let n = m.rows;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, cosine(m.row(i), m.row(j)));
        }
    }
    out
}

/// Pearson correlation between the strictly upper triangles of the cosine
/// similarity matrices of `original` and `projected`.
pub fn topology_preservation_score(original: &Matrix, projected: &Matrix) -> Result<f64> {
    if original.rows != projected.rows {
        return Err(Error::Shape(format!(
            "{} original rows vs {} projected rows",
            original.rows, projected.rows
        )));
    }
    if original.rows < 3 {
        return Err(Error::InvalidArgument("need at least 3 rows".into()));
    }
    let upper = |m: &Matrix| -> Vec<f64> {
        let s = similarity_matrix(m);
        let mut v = Vec::new();
        for i in 0..s.rows {
            for j in i + 1..s.cols {
                v.push(s.get(i, j));
            }
        }
        v
    };
    let (a, b) = (upper(original), upper(projected));
    if a.iter().chain(&b).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedScore("zero-norm row".into()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(&b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedScore("similarity upper triangle has zero variance".into()));
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, GeneratorSpec};
    use crate::encoders::{standard_normal_noise, DimensionSpec};
    use approx::assert_abs_diff_eq;

    fn seen_graph() -> (SemanticGraph, ModelParams) {
        let b = generate_synthetic_dataset(&GeneratorSpec::default()).unwrap();
        let protos = b.prototypes.select(&b.split.seen_classes);
        let dims = DimensionSpec::default();
        (
            build_adjacency(&protos, GammaMode::Dissimilarity).unwrap(),
            ModelParams::init(&dims, 5).unwrap(),
        )
    }

    #[test]
    fn adjacency_special_cases() {
        let same = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![0.5, 1.0]]).unwrap();
        let g = build_adjacency(&same, GammaMode::Dissimilarity).unwrap();
        assert!(g.gamma.data.iter().all(|v| v.abs() < 1e-15));
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(g.propagation.get(i, j), expect, epsilon = 1e-15);
            }
        }
        let ortho = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        assert_abs_diff_eq!(build_adjacency(&ortho, GammaMode::Dissimilarity).unwrap().gamma.get(0, 1), 1.0);
        let anti = Matrix::from_rows(&[vec![1.0, 1.0], vec![-2.0, -2.0]]).unwrap();
        assert_abs_diff_eq!(build_adjacency(&anti, GammaMode::Dissimilarity).unwrap().gamma.get(0, 1), 2.0);
        let zero = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(build_adjacency(&zero, GammaMode::Dissimilarity).is_err());
    }

    #[test]
    fn gamma_is_symmetric_with_zero_diagonal() {
        for mode in [GammaMode::Dissimilarity, GammaMode::Similarity] {
            let (g, _) = seen_graph();
            let g = build_adjacency(&g.prototypes, mode).unwrap();
            for i in 0..g.gamma.rows {
                assert_eq!(g.gamma.get(i, i), 0.0);
                for j in 0..g.gamma.cols {
                    assert_eq!(g.gamma.get(i, j), g.gamma.get(j, i));
                    assert_eq!(g.propagation.get(i, j), g.propagation.get(j, i));
                    assert!((0.0..=2.0).contains(&g.gamma.get(i, j)));
                }
            }
        }
    }

    #[test]
    fn gcn_identity_and_zero() {
        let x = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![-1.0, 0.0]]).unwrap();
        let id3 = Matrix::identity(3);
        let id2 = Matrix::identity(2);
        assert_eq!(gcn_layer(&id3, &x, &id2, Activation::Linear).unwrap(), x);
        let zero = Matrix::zeros(2, 4);
        let out = gcn_layer(&id3, &x, &zero, Activation::LeakyRelu).unwrap();
        assert!(out.data.iter().all(|v| *v == 0.0));
        assert!(gcn_layer(&Matrix::identity(2), &x, &id2, Activation::Linear).is_err());
    }

    #[test]
    fn gcn_two_node_hand_computation() {
        // orthogonal prototypes: gamma = 1, A + I = [[1,1],[1,1]], degree 2,
        // propagation = [[.5,.5],[.5,.5]]
        let protos = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let g = build_adjacency(&protos, GammaMode::Dissimilarity).unwrap();
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 1.0]]).unwrap();
        let out = gcn_layer(&g.propagation, &protos, &w, Activation::LeakyRelu).unwrap();
        // P X = [[.5,.5],[.5,.5]]; (P X) W = [[-1, 1.5], [-1, 1.5]]; leaky: -0.2
        for r in 0..2 {
            assert_abs_diff_eq!(out.get(r, 0), -0.2, epsilon = 1e-15);
            assert_abs_diff_eq!(out.get(r, 1), 1.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn projection_shape_determinism_and_gcn_switch() {
        let (g, mut params) = seen_graph();
        let out = semantic_project(&g, &params, true).unwrap();
        assert_eq!((out.rows, out.cols), (6, 32));
        assert_eq!(out, semantic_project(&g, &params, true).unwrap());
        // zeroed graph weights equal the switched-off branch exactly
        params.get_mut("sem.g2.w").iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(
            semantic_project(&g, &params, true).unwrap(),
            semantic_project(&g, &params, false).unwrap()
        );
    }

    #[test]
    fn projection_gradients_match_finite_differences() {
        let (g, params) = seen_graph();
        let w = standard_normal_noise(77, 6 * 32);
        let probe = |p: &ModelParams| -> f64 {
            let o = semantic_project(&g, p, true).unwrap();
            o.data.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let trace = semantic_project_trace(&g, &params, true).unwrap();
        let d_out = Matrix {
            rows: 6,
            cols: 32,
            data: w.clone(),
        };
        let mut grads = params.zeros_like();
        semantic_project_backward(&g, &params, &trace, &d_out, &mut grads);
        let h = 1e-5;
        for name in ["sem.g1.0.w", "sem.g1.2.b", "sem.g2.w", "sem.g3.0.w", "sem.g3.1.b", "sem.g3.2.w"] {
            let n = params.get(name).len();
            for idx in (0..n).step_by((n / 9).max(1)) {
                let mut plus = params.clone();
                plus.get_mut(name)[idx] += h;
                let mut minus = params.clone();
                minus.get_mut(name)[idx] -= h;
                let num = (probe(&plus) - probe(&minus)) / (2.0 * h);
                let ana = grads.get(name)[idx];
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{idx}] {ana} vs {num}");
            }
        }
    }

    #[test]
    fn topology_score_basics() {
        let (g, _) = seen_graph();
        let x = &g.prototypes;
        assert_abs_diff_eq!(topology_preservation_score(x, x).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(topology_preservation_score(x, &x.scale(3.0)).unwrap(), 1.0, epsilon = 1e-12);
        let two = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(topology_preservation_score(&two, &two).is_err());
        let flat = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]]).unwrap();
        assert!(matches!(
            topology_preservation_score(&flat, x),
            Err(Error::Shape(_))
        ));
        let x3 = Matrix::from_rows(&[vec![1.0, 0.2], vec![0.1, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(
            topology_preservation_score(&x3, &flat),
            Err(Error::UndefinedScore(_))
        ));
    }

    #[test]
    fn gamma_mode_parses() {
        assert_eq!("similarity".parse::<GammaMode>().unwrap(), GammaMode::Similarity);
        assert_eq!(GammaMode::Dissimilarity.to_string(), "dissimilarity");
        assert!("cosine".parse::<GammaMode>().is_err());
    }
}
