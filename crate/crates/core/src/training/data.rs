//! Synthetic partial/complete pairs and their on-disk layout.
//!
//! Shapes are unions of boxes, ellipsoids and y-axis cylinders placed
//! symmetrically about the plane `x = 0`. Symmetric shapes are sampled in
//! mirrored pairs; asymmetric variants add a sphere bump on the `+x` side.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::io::{read_cloud, write_cloud};
use crate::geometry::{chamfer_l1, dot3, reflect_about_plane, Point3, PointCloud};

/// Mirror plane every generated shape is built around.
pub const NOMINAL_PLANE: Point3 = [1.0, 0.0, 0.0];
pub const DEFAULT_PARTIAL_SIZE: usize = 512;
pub const DEFAULT_RESOLUTION: usize = 2048;
/// Fraction of samples carrying a one-sided bump.
pub const ASYMMETRIC_FRACTION: f64 = 0.2;

const JITTER: f64 = 1e-3;
/// Smallest accepted reflection Chamfer distance of an asymmetric variant.
const MIN_ASYMMETRY: f64 = 0.06;
const MANIFEST: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "shape_id,kind,asymmetric,nx,ny,nz";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Box,
    Ellipsoid,
    CylinderBox,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Box => "box",
            ShapeKind::Ellipsoid => "ellipsoid",
            ShapeKind::CylinderBox => "cylbox",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(ShapeKind::Box),
            "ellipsoid" => Ok(ShapeKind::Ellipsoid),
            "cylbox" => Ok(ShapeKind::CylinderBox),
            other => Err(Error::Format(format!("unknown shape kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub partial: PointCloud,
    pub gt: PointCloud,
    pub shape_id: String,
    /// Unit normal of an exact mirror plane through the origin, when the
    /// shape has one.
    pub symmetry_plane: Option<Point3>,
    pub kind: ShapeKind,
    pub asymmetric: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct SynthOptions {
    pub resolution: usize,
    pub partial_size: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            partial_size: DEFAULT_PARTIAL_SIZE,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Primitive {
    Box { c: Point3, h: Point3 },
    Ellipsoid { c: Point3, r: Point3 },
    /// Axis along y.
    Cylinder { c: Point3, radius: f64, half: f64 },
}

impl Primitive {
    fn area(&self) -> f64 {
        match *self {
            Primitive::Box { h, .. } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
            Primitive::Ellipsoid { r, .. } => {
                // Thomsen's approximation
                let p = 1.6075;
                let s = ((r[0] * r[1]).powf(p) + (r[0] * r[2]).powf(p) + (r[1] * r[2]).powf(p)) / 3.0;
                4.0 * PI * s.powf(1.0 / p)
            }
            Primitive::Cylinder { radius, half, .. } => 2.0 * PI * radius * (2.0 * half) + 2.0 * PI * radius * radius,
        }
    }

    fn contains(&self, p: &Point3) -> bool {
        const MARGIN: f64 = 1e-9;
        match *self {
            Primitive::Box { c, h } => (0..3).all(|i| (p[i] - c[i]).abs() < h[i] - MARGIN),
            Primitive::Ellipsoid { c, r } => {
                let s: f64 = (0..3).map(|i| ((p[i] - c[i]) / r[i]).powi(2)).sum();
                s < 1.0 - MARGIN
            }
            Primitive::Cylinder { c, radius, half } => {
                let dx = p[0] - c[0];
                let dz = p[2] - c[2];
                (p[1] - c[1]).abs() < half - MARGIN && dx * dx + dz * dz < (radius - MARGIN).powi(2)
            }
        }
    }

    /// Uniform surface sample with its outward normal.
    fn sample(&self, rng: &mut ChaCha8Rng) -> (Point3, Point3) {
        match *self {
            Primitive::Box { c, h } => {
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let axis = pick(rng, &areas);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut p = [0.0; 3];
                let mut n = [0.0; 3];
                for i in 0..3 {
                    p[i] = if i == axis {
                        c[i] + sign * h[i]
                    } else {
                        c[i] + rng.random_range(-h[i]..h[i])
                    };
                }
                n[axis] = sign;
                (p, n)
            }
            Primitive::Ellipsoid { c, r } => {
                let gmax = (r[1] * r[2]).max(r[0] * r[2]).max(r[0] * r[1]);
                loop {
                    let u = unit_vector(rng);
                    let m = [r[1] * r[2] * u[0], r[0] * r[2] * u[1], r[0] * r[1] * u[2]];
                    let gval = dot3(&m, &m).sqrt();
                    if rng.random::<f64>() * gmax <= gval {
                        let p = [c[0] + r[0] * u[0], c[1] + r[1] * u[1], c[2] + r[2] * u[2]];
                        let n = normalize([u[0] / r[0], u[1] / r[1], u[2] / r[2]]);
                        return (p, n);
                    }
                }
            }
            Primitive::Cylinder { c, radius, half } => {
                if pick(rng, &[2.0 * half, radius]) == 0 {
                    let a = rng.random_range(0.0..2.0 * PI);
                    let y = rng.random_range(-half..half);
                    let (s, co) = a.sin_cos();
                    ([c[0] + radius * co, c[1] + y, c[2] + radius * s], [co, 0.0, s])
                } else {
                    let a = rng.random_range(0.0..2.0 * PI);
                    let rad = radius * rng.random::<f64>().sqrt();
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    let (s, co) = a.sin_cos();
                    ([c[0] + rad * co, c[1] + sign * half, c[2] + rad * s], [0.0, sign, 0.0])
                }
            }
        }
    }
}

fn pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

fn normalize(v: Point3) -> Point3 {
    let n = dot3(&v, &v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Point3 {
    let z: f64 = rng.random_range(-1.0..1.0);
    let a = rng.random_range(0.0..2.0 * PI);
    let s = (1.0 - z * z).sqrt();
    [s * a.cos(), s * a.sin(), z]
}

/// Surface sample of a union: draws from parts by area and drops points
/// buried inside another part.
fn sample_union(parts: &[Primitive], rng: &mut ChaCha8Rng) -> (Point3, Point3) {
    let areas: Vec<f64> = parts.iter().map(Primitive::area).collect();
    loop {
        let i = pick(rng, &areas);
        let (p, n) = parts[i].sample(rng);
        if !parts.iter().enumerate().any(|(j, q)| j != i && q.contains(&p)) {
            return (p, n);
        }
    }
}

fn mirror(p: Point3) -> Point3 {
    [-p[0], p[1], p[2]]
}

fn base_shape(kind: ShapeKind, rng: &mut ChaCha8Rng) -> Vec<Primitive> {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    match kind {
        ShapeKind::Box => vec![Primitive::Box {
            c: [0.0; 3],
            h: [u(0.3, 1.0), u(0.3, 1.0), u(0.3, 1.0)],
        }],
        ShapeKind::Ellipsoid => vec![Primitive::Ellipsoid {
            c: [0.0; 3],
            r: [u(0.3, 1.0), u(0.3, 1.0), u(0.3, 1.0)],
        }],
        ShapeKind::CylinderBox => {
            let h = [u(0.4, 1.0), u(0.15, 0.4), u(0.4, 1.0)];
            let radius = u(0.25, 1.0) * h[0].min(h[2]);
            let half = u(0.3, 0.8);
            vec![
                Primitive::Box { c: [0.0, -h[1], 0.0], h },
                Primitive::Cylinder {
                    c: [0.0, half, 0.0],
                    radius,
                    half,
                },
            ]
        }
    }
}

fn x_extent(parts: &[Primitive]) -> f64 {
    parts
        .iter()
        .map(|p| match *p {
            Primitive::Box { c, h } => c[0].abs() + h[0],
            Primitive::Ellipsoid { c, r } => c[0].abs() + r[0],
            Primitive::Cylinder { c, radius, .. } => c[0].abs() + radius,
        })
        .fold(0.0, f64::max)
}

fn max_extent(parts: &[Primitive]) -> f64 {
    parts
        .iter()
        .map(|p| match *p {
            Primitive::Box { h, .. } => h[0].max(h[1]).max(h[2]),
            Primitive::Ellipsoid { r, .. } => r[0].max(r[1]).max(r[2]),
            Primitive::Cylinder { radius, half, .. } => radius.max(half),
        })
        .fold(0.0, f64::max)
}

/// Complete surface sample with normals, centred and scaled into
/// `[-0.5, 0.5]^3`.
fn sample_shape(kind: ShapeKind, asymmetric: bool, n: usize, rng: &mut ChaCha8Rng) -> (Vec<Point3>, Vec<Point3>) {
    let base = base_shape(kind, rng);
    let mut pts = Vec::with_capacity(n);
    let mut nrm = Vec::with_capacity(n);
    if asymmetric {
        let rho = rng.random_range(0.8..1.0) * max_extent(&base);
        let cx = x_extent(&base) + rng.random_range(0.2..0.5) * rho;
        let cy = rng.random_range(-0.3..0.3) * max_extent(&base);
        let mut parts = base.clone();
        parts.push(Primitive::Ellipsoid {
            c: [cx, cy, 0.0],
            r: [rho; 3],
        });
        while pts.len() < n {
            let (p, q) = sample_union(&parts, rng);
            pts.push(p);
            nrm.push(q);
        }
    } else {
        while pts.len() < n {
            let (p, q) = sample_union(&base, rng);
            pts.push(p);
            nrm.push(q);
            if pts.len() < n {
                pts.push(mirror(p));
                nrm.push(mirror(q));
            }
        }
    }
    for p in pts.iter_mut() {
        for c in p.iter_mut() {
            *c += rng.random_range(-JITTER..JITTER);
        }
    }
    // x stays centred on the mirror plane; y and z are centred on the box.
    let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
    for p in &pts {
        for i in 0..3 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    let shift = [0.0, 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
    let mut m: f64 = 0.0;
    for p in pts.iter_mut() {
        for i in 0..3 {
            p[i] -= shift[i];
            m = m.max(p[i].abs());
        }
    }
    let s = 0.5 / m;
    for p in pts.iter_mut() {
        for c in p.iter_mut() {
            *c *= s;
        }
    }
    (pts, nrm)
}

/// Indices of points facing a random viewpoint, cut by a random half-space.
fn visible_subset(pts: &[Point3], nrm: &[Point3], rng: &mut ChaCha8Rng) -> Vec<usize> {
    for _ in 0..32 {
        let view = unit_vector(rng);
        let facing: Vec<usize> = (0..pts.len()).filter(|&i| dot3(&nrm[i], &view) > 0.0).collect();
        if facing.len() < 16 {
            continue;
        }
        let cut = unit_vector(rng);
        let mut order: Vec<(f64, usize)> = facing.iter().map(|&i| (dot3(&pts[i], &cut), i)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let keep = ((order.len() as f64) * rng.random_range(0.6..0.9)).ceil() as usize;
        let mut kept: Vec<usize> = order[..keep].iter().map(|&(_, i)| i).collect();
        kept.sort_unstable();
        return kept;
    }
    (0..pts.len()).collect()
}

/// Exactly `size` indices from `pool`: a random subset when the pool is
/// large enough, otherwise the whole pool cycled.
fn resample(pool: &[usize], size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pool = pool.to_vec();
    if pool.len() >= size {
        for i in 0..size {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(size);
        pool
    } else {
        (0..size).map(|i| pool[i % pool.len()]).collect()
    }
}

fn reflection_cd(pts: &[Point3]) -> Result<f64> {
    let cloud = PointCloud::new(pts.to_vec())?;
    Ok(chamfer_l1(&cloud, &reflect_about_plane(&cloud, NOMINAL_PLANE)?))
}

fn generate_one(seed: u64, index: usize, opts: &SynthOptions) -> Result<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let kind = [ShapeKind::Box, ShapeKind::Ellipsoid, ShapeKind::CylinderBox][rng.random_range(0..3)];
    let asymmetric = rng.random::<f64>() < ASYMMETRIC_FRACTION;
    let (mut pts, mut nrm) = sample_shape(kind, asymmetric, opts.resolution, &mut rng);
    // A bump mostly hidden inside the base is redrawn.
    for _ in 0..16 {
        if !asymmetric || reflection_cd(&pts)? > MIN_ASYMMETRY {
            break;
        }
        (pts, nrm) = sample_shape(kind, asymmetric, opts.resolution, &mut rng);
    }
    let visible = visible_subset(&pts, &nrm, &mut rng);
    let chosen = resample(&visible, opts.partial_size, &mut rng);
    let partial = PointCloud::new(chosen.iter().map(|&i| pts[i]).collect())?;
    let suffix = if asymmetric { "_asym" } else { "" };
    Ok(SampleRecord {
        partial,
        gt: PointCloud::new(pts)?,
        shape_id: format!("{}{}_{:05}", kind.name(), suffix, index),
        symmetry_plane: (!asymmetric).then_some(NOMINAL_PLANE),
        kind,
        asymmetric,
    })
}

/// `count` samples with `resolution`-point ground truth and
/// [`DEFAULT_PARTIAL_SIZE`]-point partials.
pub fn gen_synthetic(seed: u64, count: usize, resolution: usize) -> Result<Vec<SampleRecord>> {
    gen_synthetic_with(
        seed,
        count,
        &SynthOptions {
            resolution,
            ..SynthOptions::default()
        },
    )
}

/// Sample `i` depends only on `(seed, i)`, so generation runs in parallel
/// without affecting the result.
pub fn gen_synthetic_with(seed: u64, count: usize, opts: &SynthOptions) -> Result<Vec<SampleRecord>> {
    if count == 0 {
        return Err(Error::Size("sample count must be at least 1".into()));
    }
    if opts.resolution < 2 || opts.partial_size == 0 {
        return Err(Error::Size(format!(
            "resolution must be at least 2 and partial size positive (got {} and {})",
            opts.resolution, opts.partial_size
        )));
    }
    (0..count).into_par_iter().map(|i| generate_one(seed, i, opts)).collect()
}

/// FNV-1a, used for the train/validation split.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn is_validation(shape_id: &str) -> bool {
    fnv1a(shape_id) % 5 == 0
}

/// 80/20 split by shape id hash: `(train, val)`.
pub fn split(samples: &[SampleRecord]) -> (Vec<SampleRecord>, Vec<SampleRecord>) {
    samples.iter().cloned().partition(|s| !is_validation(&s.shape_id))
}

/// Writes `manifest.csv` plus `<id>.partial.pcf` and `<id>.gt.pcf` per sample.
pub fn save_dataset(dir: &Path, samples: &[SampleRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for s in samples {
        let n = s.symmetry_plane.unwrap_or(NOMINAL_PLANE);
        let _ = writeln!(
            manifest,
            "{},{},{},{:?},{:?},{:?}",
            s.shape_id,
            s.kind.name(),
            s.asymmetric,
            n[0],
            n[1],
            n[2]
        );
        write_cloud(&dir.join(format!("{}.partial.pcf", s.shape_id)), &s.partial)?;
        write_cloud(&dir.join(format!("{}.gt.pcf", s.shape_id)), &s.gt)?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SampleRecord>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(Error::Format(format!("{}: missing header '{MANIFEST_HEADER}'", path.display())));
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("{}:{}: {what}", path.display(), ln + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let kind = ShapeKind::parse(f[1])?;
        let asymmetric: bool = f[2].parse().map_err(|_| bad("bad asymmetric flag"))?;
        let mut n = [0.0; 3];
        for i in 0..3 {
            n[i] = f[3 + i].parse().map_err(|_| bad("bad plane normal"))?;
        }
        let id = f[0].to_string();
        out.push(SampleRecord {
            partial: read_cloud(&dir.join(format!("{id}.partial.pcf")))?,
            gt: read_cloud(&dir.join(format!("{id}.gt.pcf")))?,
            shape_id: id,
            symmetry_plane: (!asymmetric).then_some(n),
            kind,
            asymmetric,
        });
    }
    if out.is_empty() {
        return Err(Error::Format(format!("{}: no samples listed", path.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_and_asymmetric_reflection_gap() {
        let samples = gen_synthetic(3, 60, 2048).unwrap();
        let mut seen = [false; 2];
        for s in &samples {
            let cd = reflection_cd(s.gt.points()).unwrap();
            if s.asymmetric {
                assert!(cd > 0.05, "{} reflection cd {cd}", s.shape_id);
            } else {
                assert!(cd < 0.02, "{} reflection cd {cd}", s.shape_id);
            }
            seen[s.asymmetric as usize] = true;
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn sizes_and_normalisation() {
        for s in gen_synthetic(1, 12, 1000).unwrap() {
            assert_eq!(s.gt.len(), 1000);
            assert_eq!(s.partial.len(), DEFAULT_PARTIAL_SIZE);
            let m = s.gt.points().iter().flatten().fold(0.0f64, |a, c| a.max(c.abs()));
            assert!((m - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn partial_points_come_from_gt() {
        for s in gen_synthetic(5, 6, 2048).unwrap() {
            for p in s.partial.points() {
                assert!(s.gt.points().contains(p));
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(gen_synthetic(9, 5, 256).unwrap(), gen_synthetic(9, 5, 256).unwrap());
        assert_ne!(gen_synthetic(9, 5, 256).unwrap(), gen_synthetic(10, 5, 256).unwrap());
    }

    #[test]
    fn split_is_roughly_one_fifth() {
        let ids: Vec<String> = (0..1000).map(|i| format!("box_{i:05}")).collect();
        let val = ids.iter().filter(|s| is_validation(s)).count();
        assert!((150..250).contains(&val), "{val}");
    }
}
