//! Central finite-difference comparison of tape gradients.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ChamferKind, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// `(input, element)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
    /// Analytic and numeric derivative at `worst`.
    pub worst_pair: (f64, f64),
}

/// Compares the gradient of the scalar built by `f` against central
/// differences with step `eps`, for every element of every input.
pub fn check<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar(&g, out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut work = inputs.to_vec();
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
        worst_pair: (0.0, 0.0),
    };
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + eps;
            let hi = eval(&work)?;
            work[i].data_mut()[j] = x - eps;
            let lo = eval(&work)?;
            work[i].data_mut()[j] = x;
            let numeric = (hi - lo) / (2.0 * eps);
            let err = relative_error(analytic[i][j], numeric);
            if err > report.max_rel_error || report.checked == 0 {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.worst_pair = (analytic[i][j], numeric);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::raw(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Reduces any output to a scalar through a fixed random weighting, so
/// every output element contributes a distinct coefficient.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = random(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type OpCase = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

/// Finite-difference check of every graph operator on random inputs.
pub fn operator_suite(seed: u64, eps: f64) -> Result<Vec<(&'static str, GradReport)>> {
    let idx = Arc::new(vec![2, 0, 2, 1]);
    let cases: Vec<OpCase> = vec![
        ("linear", vec![vec![5, 4], vec![4, 3], vec![3]], Box::new(|g, v| g.linear(v[0], v[1], Some(v[2])))),
        ("add", vec![vec![4, 3], vec![4, 3]], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![vec![4, 3], vec![4, 3]], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![vec![4, 3], vec![4, 3]], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("add_row", vec![vec![4, 3], vec![1, 3]], Box::new(|g, v| g.add_row(v[0], v[1]))),
        ("scale", vec![vec![3, 2]], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        ("relu", vec![vec![4, 5]], Box::new(|g, v| Ok(g.relu(v[0])))),
        ("softmax", vec![vec![3, 5]], Box::new(|g, v| Ok(g.softmax(v[0])))),
        ("group_softmax", vec![vec![6, 3]], Box::new(|g, v| g.group_softmax(v[0], 3))),
        ("group_sum", vec![vec![6, 3]], Box::new(|g, v| g.group_sum(v[0], 2))),
        ("group_max", vec![vec![6, 3]], Box::new(|g, v| g.group_max(v[0], 3))),
        ("max_pool", vec![vec![5, 4]], Box::new(|g, v| g.max_pool(v[0]))),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], Box::new(|g, v| g.concat_cols(&[v[0], v[1]]))),
        ("concat_rows", vec![vec![2, 3], vec![4, 3]], Box::new(|g, v| g.concat_rows(&[v[0], v[1]]))),
        ("reshape", vec![vec![4, 3]], Box::new(|g, v| g.reshape(v[0], &[2, 6]))),
        ("gather_rows", vec![vec![3, 4]], Box::new(move |g, v| g.gather_rows(v[0], idx.clone()))),
        ("repeat_rows", vec![vec![3, 2]], Box::new(|g, v| g.repeat_rows(v[0], 3))),
        ("broadcast_rows", vec![vec![1, 4]], Box::new(|g, v| g.broadcast_rows(v[0], 3))),
        ("point_affine", vec![vec![4, 3], vec![4, 9]], Box::new(|g, v| g.point_affine(v[0], v[1]))),
        ("attention", vec![vec![5, 4], vec![6, 4], vec![6, 4]], Box::new(|g, v| g.attention(v[0], v[1], v[2], 2))),
        ("sum", vec![vec![3, 3]], Box::new(|g, v| Ok(g.sum(v[0])))),
        ("mean", vec![vec![3, 3]], Box::new(|g, v| Ok(g.mean(v[0])))),
        ("square", vec![vec![3, 3]], Box::new(|g, v| Ok(g.square(v[0])))),
        ("chamfer_l1", vec![vec![7, 3], vec![5, 3]], Box::new(|g, v| g.chamfer(v[0], v[1], ChamferKind::L1))),
        ("chamfer_l2", vec![vec![7, 3], vec![5, 3]], Box::new(|g, v| g.chamfer(v[0], v[1], ChamferKind::L2))),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases.len());
    for (name, shapes, f) in cases {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        let report = check(&inputs, eps, |g, v| {
            let y = f(g, v)?;
            weighted_sum(g, y, seed)
        })?;
        out.push((name, report));
    }
    Ok(out)
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::shape("gradcheck (output must be scalar)", t.shape(), &[1]));
    }
    Ok(t.item())
}
