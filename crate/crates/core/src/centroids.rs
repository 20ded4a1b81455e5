//! Predefined evenly-distributed class centroids.
//!
//! Each class `i` gets a fixed unit vector `a_i` in the PEDCC feature space.
//! When `class_count <= feature_dim + 1` the vertices of a regular simplex
//! are the optimal layout and are built in closed form. Otherwise the
//! points are spread by inverse-square repulsion on the sphere.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::linalg;
use crate::registry::Registry;

const MAGIC: &[u8; 4] = b"PDCC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    Simplex = 0,
    Iterative = 1,
}

/// `class_count` unit vectors of length `feature_dim`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    class_count: usize,
    feature_dim: usize,
    vectors: Vec<f64>,
    generator: GeneratorKind,
}

impl CentroidSet {
    /// Builds a set from explicit rows. Rows are checked for unit norm.
    pub fn from_rows(rows: &[Vec<f64>], generator: GeneratorKind) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::InvalidParameter("need at least 2 centroids".into()));
        }
        let n = rows[0].len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch("centroid rows must share a nonzero length".into()));
        }
        let set = CentroidSet {
            class_count: rows.len(),
            feature_dim: n,
            vectors: rows.concat(),
            generator,
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        if self.class_count < 2 || self.feature_dim < 1 {
            return Err(Error::InvalidParameter(format!(
                "centroid set needs c >= 2 and n >= 1, got c={} n={}",
                self.class_count, self.feature_dim
            )));
        }
        if self.vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("centroid entries".into()));
        }
        for i in 0..self.class_count {
            let norm = linalg::norm(self.row(i));
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "centroid {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn generator(&self) -> GeneratorKind {
        self.generator
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.vectors.chunks_exact(self.feature_dim)
    }

    /// Row-major `c x n` matrix of the centroid vectors.
    pub fn as_slice(&self) -> &[f64] {
        &self.vectors
    }

    pub fn gram(&self) -> Vec<f64> {
        let c = self.class_count;
        let mut g = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                g[i * c + j] = linalg::dot(self.row(i), self.row(j));
            }
        }
        g
    }

    /// Smallest angle between any two centroids, in radians.
    pub fn min_pairwise_angle(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.class_count {
            for j in i + 1..self.class_count {
                let cos = linalg::dot(self.row(i), self.row(j)).clamp(-1.0, 1.0);
                best = best.min(cos.acos());
            }
        }
        best
    }
}

/// Knobs for the generators. The simplex construction ignores all of them.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorOptions {
    pub seed: u64,
    pub steps: usize,
    pub step_size: f64,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        GeneratorOptions {
            seed: 0,
            steps: 10_000,
            step_size: 0.05,
        }
    }
}

pub trait CentroidGenerator: Send + Sync {
    fn name(&self) -> &'static str;
    fn generate(
        &self,
        class_count: usize,
        feature_dim: usize,
        options: &GeneratorOptions,
    ) -> Result<CentroidSet>;
}

pub struct SimplexGenerator;

impl CentroidGenerator for SimplexGenerator {
    fn name(&self) -> &'static str {
        "simplex"
    }

    fn generate(&self, class_count: usize, feature_dim: usize, _: &GeneratorOptions) -> Result<CentroidSet> {
        generate_simplex(class_count, feature_dim)
    }
}

pub struct RepulsionGenerator;

impl CentroidGenerator for RepulsionGenerator {
    fn name(&self) -> &'static str {
        "iterative"
    }

    fn generate(
        &self,
        class_count: usize,
        feature_dim: usize,
        options: &GeneratorOptions,
    ) -> Result<CentroidSet> {
        generate_iterative_with(class_count, feature_dim, options)
    }
}

pub fn generator_registry() -> Registry<dyn CentroidGenerator> {
    Registry::<dyn CentroidGenerator>::new("centroid generator")
        .register("simplex", Arc::new(SimplexGenerator))
        .register("iterative", Arc::new(RepulsionGenerator))
}

/// Vertices of a regular simplex centred at the origin, embedded in the
/// first `class_count - 1` coordinates of `feature_dim`-space.
///
/// Row `i` is `e_i - 1/c` expressed in the Helmert basis of the hyperplane
/// orthogonal to the all-ones vector, then scaled to unit length.
pub fn generate_simplex(class_count: usize, feature_dim: usize) -> Result<CentroidSet> {
    if class_count < 2 {
        return Err(Error::InvalidParameter(format!(
            "class_count must be >= 2, got {class_count}"
        )));
    }
    if feature_dim == 0 || class_count > feature_dim + 1 {
        return Err(Error::DimensionTooSmall {
            class_count,
            feature_dim,
            needed: class_count - 1,
        });
    }
    let c = class_count;
    let scale = ((c - 1) as f64 / c as f64).sqrt();
    let mut vectors = vec![0.0; c * feature_dim];
    for k in 1..c {
        // Helmert vector h_k: k ones, then -k, then zeros; norm sqrt(k(k+1)).
        let denom = ((k * (k + 1)) as f64).sqrt();
        for i in 0..c {
            let h = match i.cmp(&k) {
                std::cmp::Ordering::Less => 1.0,
                std::cmp::Ordering::Equal => -(k as f64),
                std::cmp::Ordering::Greater => 0.0,
            };
            vectors[i * feature_dim + (k - 1)] = h / denom / scale;
        }
    }
    // Clean up rounding so every row is unit length to machine precision.
    for row in vectors.chunks_exact_mut(feature_dim) {
        let norm = linalg::norm(row);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    let set = CentroidSet {
        class_count: c,
        feature_dim,
        vectors,
        generator: GeneratorKind::Simplex,
    };
    set.validate()?;
    Ok(set)
}

pub fn generate_iterative(
    class_count: usize,
    feature_dim: usize,
    seed: u64,
    steps: usize,
) -> Result<CentroidSet> {
    generate_iterative_with(
        class_count,
        feature_dim,
        &GeneratorOptions {
            seed,
            steps,
            ..GeneratorOptions::default()
        },
    )
}

/// Spreads points on the unit sphere by descending the mean inverse-square
/// energy `sum_{i<j} |a_i - a_j|^-2 / (c - 1)`. Each step moves every point
/// along its tangential force and renormalises it.
pub fn generate_iterative_with(
    class_count: usize,
    feature_dim: usize,
    options: &GeneratorOptions,
) -> Result<CentroidSet> {
    Ok(generate_iterative_traced(class_count, feature_dim, options)?.0)
}

/// As [`generate_iterative_with`], also returning the minimum pairwise angle
/// after every step.
pub fn generate_iterative_traced(
    class_count: usize,
    feature_dim: usize,
    options: &GeneratorOptions,
) -> Result<(CentroidSet, Vec<f64>)> {
    if class_count < 2 || feature_dim < 2 {
        return Err(Error::InvalidParameter(format!(
            "iterative generator needs c >= 2 and n >= 2, got c={class_count} n={feature_dim}"
        )));
    }
    if !(options.step_size > 0.0 && options.step_size.is_finite()) {
        return Err(Error::InvalidParameter("step_size must be positive".into()));
    }
    let (c, n) = (class_count, feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut pts: Vec<f64> = (0..c * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    for row in pts.chunks_exact_mut(n) {
        let norm = linalg::norm(row);
        row.iter_mut().for_each(|v| *v /= norm);
    }

    let weight = 1.0 / (c - 1) as f64;
    let mut force = vec![0.0; c * n];
    let mut trial = pts.clone();
    // Over the last 10% of steps a move that would shrink the minimum
    // pairwise angle is rejected and the step size halved.
    let settle_from = options.steps - options.steps / 10;
    let mut step_size = options.step_size;
    let mut min_angle = min_angle_of(&pts, c, n);
    let mut trace = Vec::with_capacity(options.steps);
    for step in 0..options.steps {
        repulsion_forces(&pts, c, n, weight, &mut force);
        trial.copy_from_slice(&pts);
        for i in 0..c {
            let p = &mut trial[i * n..(i + 1) * n];
            let f = &mut force[i * n..(i + 1) * n];
            let radial = linalg::dot(p, f);
            for k in 0..n {
                f[k] -= radial * p[k];
            }
            // Cap the displacement so near-coincident starts cannot fling a
            // point across the sphere.
            let fnorm = linalg::norm(f);
            let h = if step_size * fnorm > 0.5 { 0.5 / fnorm } else { step_size };
            for k in 0..n {
                p[k] += h * f[k];
            }
            let norm = linalg::norm(p);
            p.iter_mut().for_each(|v| *v /= norm);
        }
        let angle = min_angle_of(&trial, c, n);
        if step >= settle_from && angle < min_angle {
            step_size /= 2.0;
        } else {
            min_angle = angle;
            std::mem::swap(&mut pts, &mut trial);
        }
        trace.push(min_angle);
    }

    let set = CentroidSet {
        class_count: c,
        feature_dim: n,
        vectors: pts,
        generator: GeneratorKind::Iterative,
    };
    set.validate()?;
    if c <= n + 1 {
        let target = -1.0 / (c - 1) as f64;
        let spread = set
            .gram()
            .iter()
            .enumerate()
            .filter(|(idx, _)| idx / c != idx % c)
            .map(|(_, g)| (g - target).abs())
            .fold(0.0, f64::max);
        if spread > 1e-2 {
            log::warn!(
                "iterative centroids did not converge: max pairwise cosine deviation {spread:.3e} (c={c}, n={n}, steps={})",
                options.steps
            );
        }
    }
    Ok((set, trace))
}

fn repulsion_forces(pts: &[f64], c: usize, n: usize, weight: f64, force: &mut [f64]) {
    force.iter_mut().for_each(|f| *f = 0.0);
    let mut diff = vec![0.0; n];
    for i in 0..c {
        for j in i + 1..c {
            let mut d2 = 0.0;
            for k in 0..n {
                diff[k] = pts[i * n + k] - pts[j * n + k];
                d2 += diff[k] * diff[k];
            }
            let d2 = d2.max(1e-12);
            // -grad_i of |a_i - a_j|^-2 = 2 (a_i - a_j) / |a_i - a_j|^4
            let s = 2.0 * weight / (d2 * d2);
            for k in 0..n {
                force[i * n + k] += s * diff[k];
                force[j * n + k] -= s * diff[k];
            }
        }
    }
}

fn min_angle_of(pts: &[f64], c: usize, n: usize) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for i in 0..c {
        for j in i + 1..c {
            best = best.max(linalg::dot(&pts[i * n..(i + 1) * n], &pts[j * n..(j + 1) * n]));
        }
    }
    best.clamp(-1.0, 1.0).acos()
}

pub fn save_centroids(set: &CentroidSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.u32(set.class_count as u32);
    w.u32(set.feature_dim as u32);
    w.u8(set.generator as u8);
    w.f64s(&set.vectors);
    w.finish(path.as_ref())
}

pub fn load_centroids(path: impl AsRef<Path>) -> Result<CentroidSet> {
    let mut r = Reader::open(path.as_ref(), MAGIC, VERSION)?;
    let c = r.u32()? as usize;
    let n = r.u32()? as usize;
    let generator = match r.u8()? {
        0 => GeneratorKind::Simplex,
        1 => GeneratorKind::Iterative,
        other => return Err(r.malformed(format!("unknown generator flag {other}"))),
    };
    if c < 2 || n < 1 {
        return Err(r.malformed(format!("bad dimensions c={c} n={n}")));
    }
    let vectors = r.f64s(c * n)?;
    r.expect_end()?;
    let set = CentroidSet {
        class_count: c,
        feature_dim: n,
        vectors,
        generator,
    };
    set.validate().map_err(|e| r.malformed(e.to_string()))?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_simplex_gram(set: &CentroidSet, tol: f64) {
        let c = set.class_count();
        let off = -1.0 / (c - 1) as f64;
        let g = set.gram();
        for i in 0..c {
            for j in 0..c {
                let expect = if i == j { 1.0 } else { off };
                assert!((g[i * c + j] - expect).abs() < tol, "G[{i},{j}] = {}", g[i * c + j]);
            }
        }
    }

    #[test]
    fn antipodal_pair() {
        let set = generate_simplex(2, 1).unwrap();
        let rows: Vec<f64> = set.rows().map(|r| r[0]).collect();
        assert!((rows[0].abs() - 1.0).abs() < 1e-12);
        assert!((rows[0] + rows[1]).abs() < 1e-12);
    }

    #[test]
    fn simplex_gram_small_cases() {
        for (c, n) in [(3, 2), (4, 3), (5, 10), (10, 16), (17, 16)] {
            let set = generate_simplex(c, n).unwrap();
            assert_eq!(set.feature_dim(), n);
            for row in set.rows() {
                assert!((linalg::norm(row) - 1.0).abs() < 1e-9);
            }
            assert_simplex_gram(&set, 1e-6);
        }
    }

    #[test]
    fn simplex_dimension_too_small() {
        assert!(matches!(
            generate_simplex(5, 3),
            Err(Error::DimensionTooSmall { .. })
        ));
        assert!(generate_simplex(1, 3).is_err());
    }

    #[test]
    fn iterative_triangle_matches_simplex() {
        for seed in [0, 1, 7] {
            let set = generate_iterative(3, 2, seed, 10_000).unwrap();
            assert_simplex_gram(&set, 1e-3);
        }
    }

    #[test]
    fn iterative_two_points_antipodal() {
        let set = generate_iterative(2, 5, 3, 10_000).unwrap();
        let cos = linalg::dot(set.row(0), set.row(1));
        assert!((cos + 1.0).abs() < 1e-6, "cos = {cos}");
    }

    #[test]
    fn iterative_hexagon() {
        let set = generate_iterative(6, 2, 11, 10_000).unwrap();
        let mut angles: Vec<f64> = set.rows().map(|r| r[1].atan2(r[0])).collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let step = std::f64::consts::PI / 3.0;
        for k in 0..6 {
            let next = if k == 5 { angles[0] + 2.0 * std::f64::consts::PI } else { angles[k + 1] };
            assert!((next - angles[k] - step).abs() < 1e-2);
        }
    }

    #[test]
    fn iterative_is_reproducible() {
        let a = generate_iterative(5, 3, 42, 2_000).unwrap();
        let b = generate_iterative(5, 3, 42, 2_000).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        let c = generate_iterative(5, 3, 43, 2_000).unwrap();
        assert_ne!(a.as_slice(), c.as_slice());
    }

    #[test]
    fn min_angle_settles_in_final_steps() {
        for (c, n) in [(7, 3), (12, 3), (5, 4), (10, 2)] {
            let opts = GeneratorOptions {
                seed: 5,
                steps: 4_000,
                ..GeneratorOptions::default()
            };
            let (set, trace) = generate_iterative_traced(c, n, &opts).unwrap();
            let tail = &trace[opts.steps - opts.steps / 10..];
            for w in tail.windows(2) {
                assert!(w[1] >= w[0], "c={c} n={n}: {} -> {}", w[0], w[1]);
            }
            assert!((set.min_pairwise_angle() - trace[opts.steps - 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let set = generate_simplex(3, 2).unwrap();
        save_centroids(&set, &path).unwrap();
        let back = load_centroids(&path).unwrap();
        assert_eq!(set, back);
        let it = generate_iterative(4, 3, 1, 500).unwrap();
        save_centroids(&it, &path).unwrap();
        assert_eq!(load_centroids(&path).unwrap(), it);
    }

    #[test]
    fn truncated_file_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_centroids(&generate_simplex(3, 2).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_centroids(&path), Err(Error::MalformedFile { .. })));
    }

    #[test]
    fn wrong_magic_is_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_centroids(&generate_simplex(3, 2).unwrap(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_centroids(&path), Err(Error::VersionMismatch { .. })));
    }

    #[test]
    fn registry_names() {
        let reg = generator_registry();
        assert_eq!(reg.names(), vec!["iterative", "simplex"]);
        let set = reg.get("simplex").unwrap().generate(4, 3, &GeneratorOptions::default()).unwrap();
        assert_eq!(set.generator(), GeneratorKind::Simplex);
    }
}
