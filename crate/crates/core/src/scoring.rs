//! Per-sample OOD metrics.
//!
//! * `cos_gamma`: how much of `f_m` survives projection onto the column
//!   span of the FC1 weights.
//! * `cos_alpha`, `cos_beta`: decomposition of the centroid cosines of
//!   `f_n` into the angle to the centroid subspace and the angle, inside
//!   that subspace, to each centroid (`cos_theta_i = cos_alpha cos_beta_i`).
//! * `norm_fn`: Euclidean norm of `f_n`.
//! * `baseline_msp`: maximum softmax probability over `s cos_theta`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::centroids::CentroidSet;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::metrics::fmt_float;
use crate::model::layers::Batch;
use crate::model::{argmax, NetworkModel};
use crate::registry::Registry;

/// Residual norm below which a spanning vector counts as dependent.
pub const RANK_TOL: f64 = 1e-10;
const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    /// Span the projection subspace by the weight columns alone.
    #[default]
    Exclude,
    /// Work in `R^{m+1}`: every weight column gets its bias as an extra
    /// coordinate and `f_m` is extended with a constant 1.
    IncludeAsVector,
}

/// Orthogonal projector `P = Q Q^T` onto a subspace given by an
/// orthonormal basis `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionOperator {
    source_dim: usize,
    basis: Vec<Vec<f64>>,
    bias_mode: BiasMode,
}

impl ProjectionOperator {
    /// Projector onto the span of `vectors` (all of length `dim`).
    pub fn from_vectors(vectors: &[Vec<f64>], dim: usize) -> Result<Self> {
        let basis = linalg::orthonormal_basis(vectors, dim, RANK_TOL);
        if basis.is_empty() {
            return Err(Error::ZeroMatrix);
        }
        Ok(ProjectionOperator {
            source_dim: dim,
            basis,
            bias_mode: BiasMode::Exclude,
        })
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    /// Dimension of the vectors the operator accepts (`m`, before any bias
    /// augmentation).
    pub fn source_dim(&self) -> usize {
        match self.bias_mode {
            BiasMode::Exclude => self.source_dim,
            BiasMode::IncludeAsVector => self.source_dim - 1,
        }
    }

    pub fn bias_mode(&self) -> BiasMode {
        self.bias_mode
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    fn lift<'a>(&self, x: &'a [f64]) -> std::borrow::Cow<'a, [f64]> {
        match self.bias_mode {
            BiasMode::Exclude => x.into(),
            BiasMode::IncludeAsVector => {
                let mut v = x.to_vec();
                v.push(1.0);
                v.into()
            }
        }
    }

    /// `P x` in the operator's working space.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let x = self.lift(x);
        let mut out = vec![0.0; self.source_dim];
        for q in &self.basis {
            linalg::axpy(linalg::dot(q, &x), q, &mut out);
        }
        out
    }

    /// Explicit `P` as a row-major square matrix.
    pub fn matrix(&self) -> Vec<f64> {
        let d = self.source_dim;
        let mut p = vec![0.0; d * d];
        for q in &self.basis {
            for i in 0..d {
                for j in 0..d {
                    p[i * d + j] += q[i] * q[j];
                }
            }
        }
        p
    }
}

/// Builds the primary-subspace projector from FC1 weights (`m x n`,
/// row-major, column `j` = `w_j`).
pub fn projector_from_weights(
    weight: &[f64],
    m: usize,
    n: usize,
    bias: Option<&[f64]>,
    bias_mode: BiasMode,
) -> Result<ProjectionOperator> {
    if weight.len() != m * n {
        return Err(Error::ShapeMismatch(format!("weight has {} entries, expected {m} x {n}", weight.len())));
    }
    let augmented = bias_mode == BiasMode::IncludeAsVector;
    if augmented && bias.is_none() {
        return Err(Error::InvalidParameter("bias mode include_as_vector needs an FC1 bias".into()));
    }
    let dim = if augmented { m + 1 } else { m };
    let columns: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut col: Vec<f64> = (0..m).map(|i| weight[i * n + j]).collect();
            if augmented {
                col.push(bias.unwrap()[j]);
            }
            col
        })
        .collect();
    let mut op = ProjectionOperator::from_vectors(&columns, dim)?;
    op.bias_mode = bias_mode;
    Ok(op)
}

/// `|P f_m| / |f_m|`; `(0, true)` for a zero feature vector.
pub fn cos_gamma(f_m: &[f64], proj: &ProjectionOperator) -> (f64, bool) {
    let x = proj.lift(f_m);
    let norm = linalg::norm(&x);
    if norm < DEGENERATE_NORM {
        return (0.0, true);
    }
    let projected: f64 = proj.basis.iter().map(|q| linalg::dot(q, &x).powi(2)).sum::<f64>().sqrt();
    ((projected / norm).clamp(0.0, 1.0), false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PedccAngles {
    pub cos_alpha: f64,
    pub cos_beta: Vec<f64>,
    pub cos_theta: Vec<f64>,
    pub degenerate: bool,
}

impl PedccAngles {
    pub fn max_cos_beta(&self) -> f64 {
        self.cos_beta.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// The centroid subspace, precomputed for repeated angle evaluations.
#[derive(Debug, Clone)]
pub struct PedccFrame {
    projector: ProjectionOperator,
    centroids: CentroidSet,
}

impl PedccFrame {
    pub fn new(centroids: &CentroidSet) -> Result<Self> {
        let rows: Vec<Vec<f64>> = centroids.rows().map(<[f64]>::to_vec).collect();
        Ok(PedccFrame {
            projector: ProjectionOperator::from_vectors(&rows, centroids.feature_dim())?,
            centroids: centroids.clone(),
        })
    }

    pub fn angles(&self, f_n: &[f64]) -> PedccAngles {
        let c = self.centroids.class_count();
        let zero = |degenerate| PedccAngles {
            cos_alpha: 0.0,
            cos_beta: vec![0.0; c],
            cos_theta: vec![0.0; c],
            degenerate,
        };
        let norm = linalg::norm(f_n);
        if norm < DEGENERATE_NORM {
            return zero(true);
        }
        let cos_theta: Vec<f64> = self
            .centroids
            .rows()
            .map(|a| (linalg::dot(f_n, a) / norm).clamp(-1.0, 1.0))
            .collect();
        let p = self.projector.apply(f_n);
        let pnorm = linalg::norm(&p);
        if pnorm < DEGENERATE_NORM {
            return PedccAngles {
                cos_theta,
                ..zero(true)
            };
        }
        PedccAngles {
            cos_alpha: (pnorm / norm).clamp(0.0, 1.0),
            cos_beta: self
                .centroids
                .rows()
                .map(|a| (linalg::dot(&p, a) / pnorm).clamp(-1.0, 1.0))
                .collect(),
            cos_theta,
            degenerate: false,
        }
    }
}

pub fn pedcc_angles(f_n: &[f64], centroids: &CentroidSet) -> Result<PedccAngles> {
    Ok(PedccFrame::new(centroids)?.angles(f_n))
}

pub fn s_norm(f_n: &[f64]) -> f64 {
    linalg::norm(f_n)
}

/// Maximum softmax probability over logits `scale * cos_theta`.
pub fn baseline_msp(cos_theta: &[f64], scale: f64) -> f64 {
    let max = cos_theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = cos_theta.iter().map(|c| (scale * (c - max)).exp()).sum();
    1.0 / sum
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleLabel {
    Id,
    Ood,
    Unlabeled,
}

impl SampleLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            SampleLabel::Id => "ID",
            SampleLabel::Ood => "OOD",
            SampleLabel::Unlabeled => "unlabeled",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ID" => Ok(SampleLabel::Id),
            "OOD" => Ok(SampleLabel::Ood),
            "unlabeled" => Ok(SampleLabel::Unlabeled),
            other => Err(Error::InvalidParameter(format!("unknown sample label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub sample_id: usize,
    pub cos_alpha: f64,
    pub max_cos_beta: f64,
    pub cos_gamma: f64,
    pub norm_fn: f64,
    pub baseline_msp: f64,
    /// Empty when the record was read back from CSV.
    pub cos_theta: Vec<f64>,
    pub label: SampleLabel,
    pub predicted_class: usize,
    pub degenerate: bool,
}

/// Fusion inputs, in fixed order.
pub const FEATURE_NAMES: [&str; 4] = ["cos_alpha", "max_cos_beta", "cos_gamma", "norm_fn"];

impl ScoreRecord {
    pub fn features(&self) -> [f64; 4] {
        [self.cos_alpha, self.max_cos_beta, self.cos_gamma, self.norm_fn]
    }
}

/// Scores every sample of `dataset` with a frozen model.
pub fn score_dataset(
    model: &NetworkModel,
    proj: &ProjectionOperator,
    dataset: &Dataset,
    label: SampleLabel,
    scale: f64,
) -> Result<Vec<ScoreRecord>> {
    if proj.source_dim() != model.feature_dim() {
        return Err(Error::ArchitectureMismatch(format!(
            "projector works on {} dimensions, model features have {}",
            proj.source_dim(),
            model.feature_dim()
        )));
    }
    if dataset.is_empty() {
        return Ok(Vec::new());
    }
    if dataset.shape != model.input_shape() {
        return Err(Error::ShapeMismatch(format!(
            "dataset {} has shape {:?}, model expects {:?}",
            dataset.name,
            dataset.shape,
            model.input_shape()
        )));
    }
    let frame = PedccFrame::new(model.centroids())?;
    let (m, n) = (model.feature_dim(), model.pedcc_dim());
    let mut out = Vec::with_capacity(dataset.len());
    const CHUNK: usize = 256;
    let size = dataset.shape.size();
    for start in (0..dataset.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(dataset.len());
        let x = Batch::new(end - start, dataset.shape, dataset.inputs[start * size..end * size].to_vec())?;
        let fwd = model.forward(&x)?;
        for s in 0..fwd.n {
            let f_m = &fwd.f_m[s * m..(s + 1) * m];
            let f_n = &fwd.f_n[s * n..(s + 1) * n];
            let (gamma, gamma_degenerate) = cos_gamma(f_m, proj);
            let angles = frame.angles(f_n);
            out.push(ScoreRecord {
                sample_id: start + s,
                cos_alpha: angles.cos_alpha,
                max_cos_beta: if angles.degenerate { 0.0 } else { angles.max_cos_beta() },
                cos_gamma: gamma,
                norm_fn: s_norm(f_n),
                baseline_msp: baseline_msp(&angles.cos_theta, scale),
                predicted_class: argmax(&angles.cos_theta),
                cos_theta: angles.cos_theta,
                label,
                degenerate: gamma_degenerate || angles.degenerate,
            });
        }
    }
    Ok(out)
}

pub const SCORE_CSV_HEADER: &str = "sample_id,cos_alpha,max_cos_beta,cos_gamma,norm_fn,baseline_msp,predicted_class,label";

pub fn scores_to_csv(records: &[ScoreRecord]) -> String {
    let mut s = String::from(SCORE_CSV_HEADER);
    s.push('\n');
    for r in records {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.sample_id,
            fmt_float(r.cos_alpha),
            fmt_float(r.max_cos_beta),
            fmt_float(r.cos_gamma),
            fmt_float(r.norm_fn),
            fmt_float(r.baseline_msp),
            r.predicted_class,
            r.label.as_str()
        )
        .unwrap();
    }
    s
}

pub fn write_scores_csv(records: &[ScoreRecord], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path.as_ref(), scores_to_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::MalformedFile {
        path: path.display().to_string(),
        reason,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == SCORE_CSV_HEADER => {}
        Some(h) => return Err(malformed(format!("unexpected header `{h}`"))),
        None => return Err(malformed("empty score file".into())),
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(malformed(format!("line {}: expected 8 columns, found {}", lineno + 2, cols.len())));
        }
        let float = |i: usize| -> Result<f64> {
            cols[i]
                .parse::<f64>()
                .map_err(|_| malformed(format!("line {}: bad number `{}`", lineno + 2, cols[i])))
        };
        let int = |i: usize| -> Result<usize> {
            cols[i]
                .parse::<usize>()
                .map_err(|_| malformed(format!("line {}: bad integer `{}`", lineno + 2, cols[i])))
        };
        out.push(ScoreRecord {
            sample_id: int(0)?,
            cos_alpha: float(1)?,
            max_cos_beta: float(2)?,
            cos_gamma: float(3)?,
            norm_fn: float(4)?,
            baseline_msp: float(5)?,
            predicted_class: int(6)?,
            label: SampleLabel::parse(cols[7]).map_err(|e| malformed(e.to_string()))?,
            cos_theta: Vec::new(),
            degenerate: false,
        });
    }
    Ok(out)
}

/// A scalar score read off a [`ScoreRecord`]; higher means more ID.
pub trait ScoreFunction: Send + Sync {
    fn name(&self) -> &'static str;
    fn score(&self, record: &ScoreRecord) -> f64;
}

macro_rules! field_score {
    ($ty:ident, $name:literal, $field:ident) => {
        pub struct $ty;
        impl ScoreFunction for $ty {
            fn name(&self) -> &'static str {
                $name
            }
            fn score(&self, r: &ScoreRecord) -> f64 {
                r.$field
            }
        }
    };
}

field_score!(GammaScore, "S_gamma", cos_gamma);
field_score!(NormScore, "S_norm", norm_fn);
field_score!(AlphaScore, "S_alpha", cos_alpha);
field_score!(BetaScore, "S_beta", max_cos_beta);
field_score!(MspScore, "baseline", baseline_msp);

/// Single-metric scores, looked up by report name.
pub fn score_registry() -> Registry<dyn ScoreFunction> {
    Registry::<dyn ScoreFunction>::new("score function")
        .register("S_gamma", Arc::new(GammaScore))
        .register("S_norm", Arc::new(NormScore))
        .register("S_alpha", Arc::new(AlphaScore))
        .register("S_beta", Arc::new(BetaScore))
        .register("baseline", Arc::new(MspScore))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centroids::{generate_simplex, GeneratorKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const S3: f64 = 1.7320508075688772;

    fn plane() -> ProjectionOperator {
        projector_from_weights(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0], 3, 2, None, BiasMode::Exclude).unwrap()
    }

    #[test]
    fn coordinate_plane_projector() {
        let p = plane().matrix();
        assert_eq!(p, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn duplicate_columns_collapse() {
        let op = projector_from_weights(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0], 3, 2, None, BiasMode::Exclude).unwrap();
        assert_eq!(op.rank(), 1);
        assert_eq!(op.matrix(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            projector_from_weights(&[0.0; 6], 3, 2, None, BiasMode::Exclude),
            Err(Error::ZeroMatrix)
        ));
    }

    #[test]
    fn cos_gamma_examples() {
        let op = plane();
        let (g, d) = cos_gamma(&[1.0, 1.0, 1.0], &op);
        assert!((g - 2f64.sqrt() / S3).abs() < 1e-12);
        assert!((g - 0.81650).abs() < 1e-5);
        assert!(!d);
        assert_eq!(cos_gamma(&[0.3, -2.0, 0.0], &op).0, 1.0);
        assert_eq!(cos_gamma(&[0.0, 0.0, 4.0], &op).0, 0.0);
        assert_eq!(cos_gamma(&[0.0; 3], &op), (0.0, true));
    }

    #[test]
    fn bias_augmented_projection() {
        let op = projector_from_weights(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0], 3, 2, Some(&[0.0, 0.0]), BiasMode::IncludeAsVector).unwrap();
        assert_eq!(op.source_dim(), 3);
        // f = (1, 1, 0) lifts to (1, 1, 0, 1); the constant coordinate is
        // outside the span of the weights when the bias is zero.
        let (g, _) = cos_gamma(&[1.0, 1.0, 0.0], &op);
        assert!((g - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let op = projector_from_weights(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 3, 2, Some(&[0.0, 1.0]), BiasMode::IncludeAsVector).unwrap();
        assert_eq!(cos_gamma(&[2.0, 0.0, 0.0], &op).0, 1.0);
        assert!(projector_from_weights(&[1.0; 6], 3, 2, None, BiasMode::IncludeAsVector).is_err());
    }

    #[test]
    fn pedcc_angle_examples() {
        // Centroids spanning the e1-e2 plane of R^3.
        let cs = CentroidSet::from_rows(
            &[vec![1.0, 0.0, 0.0], vec![-0.5, S3 / 2.0, 0.0], vec![-0.5, -S3 / 2.0, 0.0]],
            GeneratorKind::Simplex,
        )
        .unwrap();
        let a = pedcc_angles(&[1.0, 1.0, 1.0], &cs).unwrap();
        assert!((a.cos_alpha - 0.81650).abs() < 1e-5);
        assert!((a.cos_beta[0] - 0.70711).abs() < 1e-5);
        assert!((a.cos_theta[0] - 0.57735).abs() < 1e-5);
        for i in 0..3 {
            assert!((a.cos_theta[i] - a.cos_alpha * a.cos_beta[i]).abs() < 1e-12);
        }

        let inside = pedcc_angles(&[0.3, -0.7, 0.0], &cs).unwrap();
        assert!((inside.cos_alpha - 1.0).abs() < 1e-12);
        for i in 0..3 {
            assert!((inside.cos_beta[i] - inside.cos_theta[i]).abs() < 1e-12);
        }

        let at = pedcc_angles(cs.row(0), &cs).unwrap();
        assert!((at.max_cos_beta() - 1.0).abs() < 1e-12);
        assert_eq!(crate::model::argmax(&at.cos_beta), 0);

        let zero = pedcc_angles(&[0.0; 3], &cs).unwrap();
        assert!(zero.degenerate);
        assert_eq!(zero.cos_alpha, 0.0);
        let orth = pedcc_angles(&[0.0, 0.0, 2.0], &cs).unwrap();
        assert!(orth.degenerate);
    }

    #[test]
    fn norm_and_msp() {
        assert_eq!(s_norm(&[3.0, 4.0]), 5.0);
        assert_eq!(s_norm(&[0.0, 0.0]), 0.0);
        let e = std::f64::consts::E;
        assert!((baseline_msp(&[1.0, -1.0], 1.0) - e / (e + 1.0 / e)).abs() < 1e-12);
        assert!((baseline_msp(&[1.0, -1.0], 1.0) - 0.88080).abs() < 1e-5);
        assert!((baseline_msp(&[0.2; 5], 5.5) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let rec = ScoreRecord {
            sample_id: 3,
            cos_alpha: 0.123456789123,
            max_cos_beta: -0.5,
            cos_gamma: 1.0,
            norm_fn: 12.5,
            baseline_msp: 0.25,
            cos_theta: vec![],
            label: SampleLabel::Ood,
            predicted_class: 2,
            degenerate: false,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_scores_csv(&[rec.clone()], &p).unwrap();
        let back = read_scores_csv(&p).unwrap();
        assert_eq!(back.len(), 1);
        assert!((back[0].cos_alpha - rec.cos_alpha).abs() < 1e-9);
        assert_eq!(back[0].label, SampleLabel::Ood);
        assert_eq!(back[0].predicted_class, 2);
        fs::write(&p, "bad header\n").unwrap();
        assert!(read_scores_csv(&p).is_err());
    }

    #[test]
    fn registry_reads_fields() {
        let reg = score_registry();
        assert_eq!(reg.names(), vec!["S_alpha", "S_beta", "S_gamma", "S_norm", "baseline"]);
        let rec = ScoreRecord {
            sample_id: 0,
            cos_alpha: 0.1,
            max_cos_beta: 0.2,
            cos_gamma: 0.3,
            norm_fn: 0.4,
            baseline_msp: 0.5,
            cos_theta: vec![],
            label: SampleLabel::Id,
            predicted_class: 0,
            degenerate: false,
        };
        assert_eq!(reg.get("S_gamma").unwrap().score(&rec), 0.3);
        assert_eq!(reg.get("baseline").unwrap().score(&rec), 0.5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec_of(len: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-3.0f64..3.0, len)
        }

        proptest! {
            #[test]
            fn scale_invariance(f in vec_of(6), t in 0.01f64..100.0) {
                let w: Vec<f64> = (0..12).map(|k| ((k * 7 % 5) as f64 - 2.0) * 0.3 + if k % 3 == 0 { 1.0 } else { 0.0 }).collect();
                let op = projector_from_weights(&w, 6, 2, None, BiasMode::Exclude).unwrap();
                let scaled: Vec<f64> = f.iter().map(|v| v * t).collect();
                prop_assume!(linalg::norm(&f) > 1e-6);
                prop_assert!((cos_gamma(&f, &op).0 - cos_gamma(&scaled, &op).0).abs() < 1e-12);
                prop_assert!((s_norm(&scaled) - t * s_norm(&f)).abs() < 1e-9 * (1.0 + t * s_norm(&f)));
                let cs = generate_simplex(4, 6).unwrap();
                let a = pedcc_angles(&f, &cs).unwrap();
                let b = pedcc_angles(&scaled, &cs).unwrap();
                prop_assert!((a.cos_alpha - b.cos_alpha).abs() < 1e-12);
            }

            #[test]
            fn decomposition_identity(f in vec_of(5)) {
                let cs = generate_simplex(4, 5).unwrap();
                let a = pedcc_angles(&f, &cs).unwrap();
                prop_assume!(!a.degenerate);
                for i in 0..4 {
                    prop_assert!((a.cos_theta[i] - a.cos_alpha * a.cos_beta[i]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn projector_is_idempotent_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m, n) = (20, 5);
        let w: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let op = projector_from_weights(&w, m, n, None, BiasMode::Exclude).unwrap();
        assert_eq!(op.rank(), 5);
        let p = op.matrix();
        for i in 0..m {
            for j in 0..m {
                let p2: f64 = (0..m).map(|k| p[i * m + k] * p[k * m + j]).sum();
                assert!((p2 - p[i * m + j]).abs() < 1e-10);
                assert!((p[i * m + j] - p[j * m + i]).abs() < 1e-10);
            }
        }
    }
}
