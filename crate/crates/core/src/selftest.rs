//! Built-in consistency suite: accelerated kernels against quadratic scans,
//! metric identities, finite-difference gradients and the reflection special
//! case of the symmetry transform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::gradcheck::operator_suite;
use crate::error::Result;
use crate::geometry::oracle::{chamfer_l1_scan, chamfer_l2_scan, fidelity_scan, knn_scan};
use crate::geometry::{
    chamfer_l1, chamfer_l2, f1_score, fidelity_distance, householder, knn, mmd, reflect_about_plane, PointCloud,
    F1_THRESHOLD,
};
use crate::lstnet::{cloud_of, transform_points};
use crate::model::SymmCompletion;
use crate::training::ModelConfig;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let pts = (0..n)
        .map(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])
        .collect();
    PointCloud::new(pts).expect("finite points")
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn knn_oracle(rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut mismatches = 0;
    for _ in 0..30 {
        let (nq, nr) = (rng.random_range(1..=512), rng.random_range(1..=512));
        let q = random_cloud(rng, nq);
        let r = random_cloud(rng, nr);
        let k = rng.random_range(1..=16usize).min(r.len());
        if knn(&q, &r, k)? != knn_scan(q.points(), r.points(), k) {
            mismatches += 1;
        }
    }
    Ok(check("knn matches full scan", mismatches == 0, format!("{mismatches} of 30 pairs differ")))
}

fn metric_oracle(rng: &mut ChaCha8Rng) -> Check {
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let (np, nq) = (rng.random_range(1..=512), rng.random_range(1..=512));
        let p = random_cloud(rng, np);
        let q = random_cloud(rng, nq);
        worst = worst
            .max(rel(chamfer_l1(&p, &q), chamfer_l1_scan(p.points(), q.points())))
            .max(rel(chamfer_l2(&p, &q), chamfer_l2_scan(p.points(), q.points())))
            .max(rel(fidelity_distance(&p, &q), fidelity_scan(p.points(), q.points())));
    }
    check("chamfer and FD match full scan", worst <= 1e-9, format!("max relative error {worst:.3e}"))
}

fn metric_identities(rng: &mut ChaCha8Rng) -> Result<Check> {
    let q = random_cloud(rng, 300);
    let input = random_cloud(rng, 50);
    let embedded = q.concat(&input);
    let gallery = vec![random_cloud(rng, 300), q.clone(), random_cloud(rng, 100)];
    let f1 = f1_score(&q, &q, F1_THRESHOLD)?;
    let (c1, c2) = (chamfer_l1(&q, &q), chamfer_l2(&q, &q));
    let fd = fidelity_distance(&input, &embedded);
    let m = mmd(&q, &gallery)?;
    let ok = f1 == 1.0 && c1 == 0.0 && c2 == 0.0 && fd == 0.0 && m == 0.0;
    Ok(check(
        "metric identities",
        ok,
        format!("f1 {f1}, cd_l1 {c1}, cd_l2 {c2}, fd {fd}, mmd {m}"),
    ))
}

fn operator_gradients() -> Result<Check> {
    let reports = operator_suite(11, GRAD_EPS)?;
    let (name, worst) = reports
        .iter()
        .map(|(n, r)| (*n, r.max_rel_error))
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    Ok(check(
        "operator gradients",
        worst < GRAD_TOLERANCE,
        format!("{} operators, max relative error {worst:.3e} ({name})", reports.len()),
    ))
}

/// The configuration used for end-to-end gradient checks.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        n_k: 4,
        c: 8,
        enc_channels: 4,
        heads: 2,
        knn_k: 4,
        ratios: [2, 2],
        ..ModelConfig::toy()
    }
}

fn end_to_end_gradient(rng: &mut ChaCha8Rng, stride: usize) -> Result<Check> {
    let mut model = SymmCompletion::new(&gradcheck_config())?;
    model.perturb(0.05, 3);
    let partial = random_cloud(rng, 16);
    let gt = random_cloud(rng, 32);
    let r = model.gradcheck(&partial, &gt, GRAD_EPS, stride)?;
    Ok(check(
        "end-to-end loss gradient",
        r.max_rel_error < GRAD_TOLERANCE,
        format!("{} parameters, max relative error {:.3e}", r.checked, r.max_rel_error),
    ))
}

fn householder_expressivity(rng: &mut ChaCha8Rng) -> Result<Check> {
    let cfg = ModelConfig {
        n_k: 16,
        ..gradcheck_config()
    };
    let mut model = SymmCompletion::new(&cfg)?;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let n = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let a = householder(n)?;
        model.lstnet.set_fixed_transform(&mut model.store, &a, &[0.0; 3]);
        let partial = random_cloud(rng, 40);
        let mut g = model.graph(false);
        let key = model.lstnet.downsample(&mut g, &partial)?;
        let st = model.lstnet.predict_transform(&mut g, &key)?;
        let (p_m, _) = transform_points(&mut g, key.p_k, &st)?;
        let got = cloud_of(&g, p_m)?;
        let want = reflect_about_plane(&cloud_of(&g, key.p_k)?, n)?;
        for (x, y) in got.points().iter().zip(want.points()) {
            for i in 0..3 {
                worst = worst.max((x[i] - y[i]).abs());
            }
        }
    }
    Ok(check(
        "reflection through the affine head",
        worst <= 1e-12,
        format!("max coordinate error {worst:.3e} over 10 planes"),
    ))
}

/// Runs every check. `quick` thins the end-to-end gradient check to every
/// seventh parameter.
pub fn run(quick: bool) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    Ok(vec![
        knn_oracle(&mut rng)?,
        metric_oracle(&mut rng),
        metric_identities(&mut rng)?,
        operator_gradients()?,
        end_to_end_gradient(&mut rng, if quick { 7 } else { 1 })?,
        householder_expressivity(&mut rng)?,
    ])
}

#[cfg(test)]
mod tests {
    #[test]
    fn quick_suite_passes() {
        for c in super::run(true).unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
