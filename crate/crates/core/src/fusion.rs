//! Secondary classifier over the four per-sample metrics.
//!
//! ID is the positive class, so every fused score grows with "more ID".
//! SVMs are solved by SMO with second-order working-set selection and
//! calibrated with Platt scaling on a stratified holdout; logistic
//! regression returns its own sigmoid.

use std::cmp::Ordering;
use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::scoring::ScoreRecord;

pub const FEATURES: usize = 4;
pub type Features = [f64; FEATURES];

const MAGIC: &[u8; 4] = b"PFUS";
const VERSION: u32 = 1;
/// Gap between the most violating pair at which SMO stops.
/// Relative spread below which a feature is treated as constant.
pub const CONSTANT_TOL: f64 = 1e-9;
pub const KKT_TOL: f64 = 1e-3;
const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    RbfSvm = 0,
    LinearSvm = 1,
    Logreg = 2,
}

impl FusionKind {
    pub fn name(&self) -> &'static str {
        match self {
            FusionKind::RbfSvm => "rbf_svm",
            FusionKind::LinearSvm => "linear_svm",
            FusionKind::Logreg => "logreg",
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(FusionKind::RbfSvm),
            1 => Some(FusionKind::LinearSvm),
            2 => Some(FusionKind::Logreg),
            _ => None,
        }
    }
}

/// Hyperparameters for every fusion kind; each kind reads what it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionParams {
    pub kind: FusionKind,
    /// SVM penalty.
    pub c: f64,
    /// RBF coefficient in `exp(-width * |x - y|^2)`; derived from the data
    /// when absent.
    pub rbf_width: Option<f64>,
    /// Share of each class held out for Platt calibration.
    pub calibration_fraction: f64,
    pub logreg_penalty: f64,
    pub logreg_learning_rate: f64,
    pub logreg_iterations: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            kind: FusionKind::RbfSvm,
            c: 5.0,
            rbf_width: None,
            calibration_fraction: 0.2,
            logreg_penalty: 0.5,
            logreg_learning_rate: 1.0,
            logreg_iterations: 2000,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.c > 0.0 && self.c.is_finite()) {
            return bad(format!("fusion c must be positive, got {}", self.c));
        }
        if let Some(w) = self.rbf_width {
            if !(w > 0.0 && w.is_finite()) {
                return bad(format!("rbf_width must be positive, got {w}"));
            }
        }
        if !(0.0..0.9).contains(&self.calibration_fraction) {
            return bad(format!("calibration_fraction must lie in [0, 0.9), got {}", self.calibration_fraction));
        }
        if !(self.logreg_penalty >= 0.0 && self.logreg_learning_rate > 0.0) {
            return bad("logreg penalty must be >= 0 and learning rate > 0".into());
        }
        Ok(())
    }
}

/// Per-feature min-max scaling fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub min: Features,
    pub max: Features,
}

impl Standardizer {
    pub fn fit(rows: &[Features]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("no records to standardize".into()));
        }
        let mut min = [f64::INFINITY; FEATURES];
        let mut max = [f64::NEG_INFINITY; FEATURES];
        for r in rows {
            for k in 0..FEATURES {
                if !r[k].is_finite() {
                    return Err(Error::NonFinite(format!("feature {k} is {}", r[k])));
                }
                min[k] = min[k].min(r[k]);
                max[k] = max[k].max(r[k]);
            }
        }
        let s = Standardizer { min, max };
        for (k, constant) in s.constant_features().iter().enumerate() {
            if *constant {
                log::warn!("fusion feature {k} is constant; using unit width");
            }
        }
        Ok(s)
    }

    /// A spread at rounding level (e.g. cos_alpha when the centroids span
    /// the whole feature space) counts as constant.
    pub fn constant_features(&self) -> [bool; FEATURES] {
        std::array::from_fn(|k| {
            let scale = 1f64.max(self.min[k].abs()).max(self.max[k].abs());
            self.max[k] - self.min[k] <= CONSTANT_TOL * scale
        })
    }

    fn width(&self, k: usize) -> f64 {
        if self.constant_features()[k] {
            1.0
        } else {
            self.max[k] - self.min[k]
        }
    }

    /// Affine map; values outside the training range are not clipped.
    pub fn apply(&self, x: &Features) -> Features {
        std::array::from_fn(|k| (x[k] - self.min[k]) / self.width(k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    Linear,
    Rbf { width: f64 },
}

impl Kernel {
    pub fn eval(&self, a: &Features, b: &Features) -> f64 {
        match *self {
            Kernel::Linear => (0..FEATURES).map(|k| a[k] * b[k]).sum(),
            Kernel::Rbf { width } => {
                let d2: f64 = (0..FEATURES).map(|k| (a[k] - b[k]).powi(2)).sum();
                (-width * d2).exp()
            }
        }
    }
}

/// Binary SVM decision function `sum_i coef_i K(sv_i, x) + intercept`
/// with `coef_i = alpha_i y_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Svm {
    pub kernel: Kernel,
    pub c: f64,
    pub support: Vec<Features>,
    pub coef: Vec<f64>,
    pub intercept: f64,
}

impl Svm {
    pub fn decision(&self, x: &Features) -> f64 {
        self.support
            .iter()
            .zip(&self.coef)
            .map(|(sv, a)| a * self.kernel.eval(sv, x))
            .sum::<f64>()
            + self.intercept
    }
}

/// Solver output: the model plus the full dual vector over the training set.
#[derive(Debug, Clone)]
pub struct SvmSolution {
    pub svm: Svm,
    pub alpha: Vec<f64>,
    pub iterations: usize,
}

/// Worst-case KKT residuals of a solved SVM on its own training set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    /// Largest `1 - y f(x)` over points with `alpha = 0`.
    pub bound_violation: f64,
    /// Largest `|y f(x) - 1|` over points with `0 < alpha < C`.
    pub free_violation: f64,
    /// Largest `y f(x) - 1` over points with `alpha = C`.
    pub upper_violation: f64,
    pub dual_sum: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub c: f64,
}

impl KktReport {
    pub fn satisfied(&self, tol: f64) -> bool {
        self.bound_violation < tol
            && self.free_violation < tol
            && self.upper_violation < tol
            && self.dual_sum.abs() < 1e-6
            && self.alpha_min >= 0.0
            && self.alpha_max <= self.c
    }
}

impl SvmSolution {
    pub fn kkt(&self, features: &[Features], labels: &[f64]) -> KktReport {
        let c = self.svm.c;
        let mut r = KktReport {
            bound_violation: f64::NEG_INFINITY,
            free_violation: 0.0,
            upper_violation: f64::NEG_INFINITY,
            dual_sum: 0.0,
            alpha_min: f64::INFINITY,
            alpha_max: f64::NEG_INFINITY,
            c,
        };
        for ((x, &y), &a) in features.iter().zip(labels).zip(&self.alpha) {
            let margin = y * self.svm.decision(x);
            r.dual_sum += a * y;
            r.alpha_min = r.alpha_min.min(a);
            r.alpha_max = r.alpha_max.max(a);
            if a == 0.0 {
                r.bound_violation = r.bound_violation.max(1.0 - margin);
            } else if a == c {
                r.upper_violation = r.upper_violation.max(margin - 1.0);
            } else {
                r.free_violation = r.free_violation.max((margin - 1.0).abs());
            }
        }
        r
    }
}

struct KernelCache<'a> {
    x: &'a [Features],
    kernel: Kernel,
    rows: HashMap<usize, Arc<Vec<f64>>>,
    order: VecDeque<usize>,
    capacity: usize,
}

impl<'a> KernelCache<'a> {
    fn new(x: &'a [Features], kernel: Kernel) -> Self {
        // Roughly 256 MB of rows at most.
        let capacity = ((32usize << 20) / x.len().max(1)).clamp(2, x.len().max(2));
        KernelCache {
            x,
            kernel,
            rows: HashMap::new(),
            order: VecDeque::new(),
            capacity,
        }
    }

    fn row(&mut self, i: usize) -> Arc<Vec<f64>> {
        if let Some(r) = self.rows.get(&i) {
            return r.clone();
        }
        let r = Arc::new(self.x.iter().map(|xj| self.kernel.eval(&self.x[i], xj)).collect::<Vec<_>>());
        if self.order.len() == self.capacity {
            let old = self.order.pop_front().unwrap();
            self.rows.remove(&old);
        }
        self.order.push_back(i);
        self.rows.insert(i, r.clone());
        r
    }
}

/// Solves the C-SVM dual by SMO. Labels are +1 (ID) or -1.
///
/// Ties in working-set selection go to the lowest index, so the result is a
/// pure function of the input order; [`fit_fusion`] sorts records
/// canonically before calling this.
pub fn svm_train(features: &[Features], labels: &[f64], kernel: Kernel, c: f64) -> Result<SvmSolution> {
    let n = features.len();
    if labels.len() != n {
        return Err(Error::CountMismatch(format!("{n} feature rows but {} labels", labels.len())));
    }
    if n < 4 {
        return Err(Error::EmptyInput(format!("SVM needs at least 4 samples, got {n}")));
    }
    if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
        return Err(Error::InvalidParameter("SVM labels must be +1 or -1".into()));
    }
    let pos = labels.iter().filter(|&&y| y > 0.0).count();
    if pos == 0 || pos == n {
        return Err(Error::SingleClass(format!("all {n} SVM samples share one label")));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("SVM features contain non-finite values".into()));
    }

    let y = labels;
    let diag: Vec<f64> = features.iter().map(|x| kernel.eval(x, x)).collect();
    let mut cache = KernelCache::new(features, kernel);
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let max_iter = (100 * n).max(100_000);
    let mut iter = 0;

    let up = |a: f64, y: f64| (y > 0.0 && a < c) || (y < 0.0 && a > 0.0);
    let low = |a: f64, y: f64| (y > 0.0 && a > 0.0) || (y < 0.0 && a < c);

    loop {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if up(alpha[t], y[t]) && -y[t] * grad[t] > gmax {
                gmax = -y[t] * grad[t];
                i = t;
            }
        }
        let mut gmin = f64::INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        if i != usize::MAX {
            let qi = cache.row(i);
            for t in 0..n {
                if !low(alpha[t], y[t]) {
                    continue;
                }
                let v = -y[t] * grad[t];
                gmin = gmin.min(v);
                let b = gmax - v;
                if b > 0.0 {
                    let mut a = diag[i] + diag[t] - 2.0 * qi[t];
                    if a <= 0.0 {
                        a = TAU;
                    }
                    let obj = -b * b / a;
                    if obj < best {
                        best = obj;
                        j = t;
                    }
                }
            }
        }
        if i == usize::MAX || j == usize::MAX || gmax - gmin < KKT_TOL {
            break;
        }
        if iter >= max_iter {
            return Err(Error::NonConvergence(format!(
                "SMO stopped after {iter} iterations with KKT gap {:.3e} (tolerance {KKT_TOL:e})",
                gmax - gmin
            )));
        }
        iter += 1;

        let ki = cache.row(i);
        let kj = cache.row(j);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let mut quad = diag[i] + diag[j] - 2.0 * ki[j];
        if quad <= 0.0 {
            quad = TAU;
        }
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * ki[t] * di + y[j] * kj[t] * dj);
        }
    }

    // Offset from the free multipliers, or the midpoint of the feasible
    // interval when none are free.
    let (mut ub, mut lb, mut sum, mut free) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum += yg;
        }
    }
    let rho = if free > 0 { sum / free as f64 } else { (ub + lb) / 2.0 };

    let (support, coef) = (0..n)
        .filter(|&t| alpha[t] > 0.0)
        .map(|t| (features[t], alpha[t] * y[t]))
        .unzip();
    Ok(SvmSolution {
        svm: Svm {
            kernel,
            c,
            support,
            coef,
            intercept: -rho,
        },
        alpha,
        iterations: iter,
    })
}

fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `1 / (1 + exp(z))` without overflow.
fn sigmoid_neg(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// Fits `P(ID | f) = 1 / (1 + exp(A f + B))` by Newton's method with
/// backtracking on regularized targets.
pub fn platt_fit(decisions: &[f64], labels: &[f64]) -> Result<(f64, f64)> {
    if decisions.len() != labels.len() {
        return Err(Error::CountMismatch("decision values and labels differ in length".into()));
    }
    let prior1 = labels.iter().filter(|&&y| y > 0.0).count() as f64;
    let prior0 = labels.len() as f64 - prior1;
    if prior1 == 0.0 || prior0 == 0.0 {
        return Err(Error::DegenerateCalibration(format!(
            "calibration set has {prior1} ID and {prior0} OOD samples"
        )));
    }
    let hi = (prior1 + 1.0) / (prior1 + 2.0);
    let lo = 1.0 / (prior0 + 2.0);
    let t: Vec<f64> = labels.iter().map(|&y| if y > 0.0 { hi } else { lo }).collect();
    let objective = |a: f64, b: f64| -> f64 {
        decisions
            .iter()
            .zip(&t)
            .map(|(&f, &ti)| {
                let z = f * a + b;
                ti * z + log1p_exp(-z)
            })
            .sum()
    };
    let (mut a, mut b) = (0.0, ((prior0 + 1.0) / (prior1 + 1.0)).ln());
    let mut fval = objective(a, b);
    for _ in 0..100 {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (1e-12, 1e-12, 0.0, 0.0, 0.0);
        for (&f, &ti) in decisions.iter().zip(&t) {
            let p = sigmoid_neg(f * a + b);
            let d2 = p * (1.0 - p);
            h11 += f * f * d2;
            h22 += d2;
            h21 += f * d2;
            let d1 = ti - p;
            g1 += f * d1;
            g2 += d1;
        }
        if g1.abs() < 1e-5 && g2.abs() < 1e-5 {
            break;
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        while step >= 1e-10 {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = objective(na, nb);
            if nf < fval + 1e-4 * step * gd {
                a = na;
                b = nb;
                fval = nf;
                break;
            }
            step /= 2.0;
        }
        if step < 1e-10 {
            log::warn!("Platt line search failed; keeping current parameters");
            break;
        }
    }
    if !(a < 0.0) {
        return Err(Error::DegenerateCalibration(format!(
            "fitted slope A = {a:.4e} is not negative; decision values do not rank ID above OOD"
        )));
    }
    Ok((a, b))
}

/// Mean logistic loss plus `(penalty / 2) |w|^2` and its gradient.
pub fn logreg_objective(w: &Features, b: f64, x: &[Features], y: &[f64], penalty: f64) -> (f64, Features, f64) {
    let n = x.len() as f64;
    let mut loss = 0.0;
    let mut gw = [0.0; FEATURES];
    let mut gb = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let z: f64 = (0..FEATURES).map(|k| w[k] * xi[k]).sum::<f64>() + b;
        loss += log1p_exp(z) - yi * z;
        let r = sigmoid_neg(-z) - yi;
        for k in 0..FEATURES {
            gw[k] += r * xi[k];
        }
        gb += r;
    }
    let reg: f64 = w.iter().map(|v| v * v).sum::<f64>();
    loss = loss / n + 0.5 * penalty * reg;
    for k in 0..FEATURES {
        gw[k] = gw[k] / n + penalty * w[k];
    }
    (loss, gw, gb / n)
}

/// L2-regularized logistic regression by full-batch gradient descent from
/// zero. Labels are 1 (ID) or 0.
pub fn logreg_train(
    features: &[Features],
    labels: &[f64],
    penalty: f64,
    learning_rate: f64,
    iterations: usize,
) -> Result<(Features, f64)> {
    if features.len() != labels.len() {
        return Err(Error::CountMismatch("features and labels differ in length".into()));
    }
    let pos = labels.iter().filter(|&&y| y > 0.5).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::SingleClass(format!("all {} samples share one label", labels.len())));
    }
    let mut w = [0.0; FEATURES];
    let mut b = 0.0;
    for it in 0..iterations {
        let (loss, gw, gb) = logreg_objective(&w, b, features, labels, penalty);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch: it,
                reason: format!("logistic loss became {loss}"),
            });
        }
        for k in 0..FEATURES {
            w[k] -= learning_rate * gw[k];
        }
        b -= learning_rate * gb;
    }
    if w.iter().any(|v| !v.is_finite()) || !b.is_finite() {
        return Err(Error::Divergence {
            epoch: iterations,
            reason: "logistic weights became non-finite".into(),
        });
    }
    Ok((w, b))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Svm { svm: Svm, platt_a: f64, platt_b: f64 },
    Logreg { weights: Features, intercept: f64, penalty: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub kind: FusionKind,
    pub standardizer: Standardizer,
    pub classifier: Classifier,
}

impl FusionModel {
    /// Raw classifier output on unstandardized features.
    pub fn decision(&self, x: &Features) -> f64 {
        let z = self.standardizer.apply(x);
        match &self.classifier {
            Classifier::Svm { svm, .. } => svm.decision(&z),
            Classifier::Logreg { weights, intercept, .. } => {
                (0..FEATURES).map(|k| weights[k] * z[k]).sum::<f64>() + intercept
            }
        }
    }

    /// Probability of ID, the fused score.
    pub fn score_features(&self, x: &Features) -> f64 {
        let d = self.decision(x);
        match &self.classifier {
            Classifier::Svm { platt_a, platt_b, .. } => sigmoid_neg(platt_a * d + platt_b),
            Classifier::Logreg { .. } => sigmoid_neg(-d),
        }
    }

    pub fn score(&self, record: &ScoreRecord) -> f64 {
        self.score_features(&record.features())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.u8(self.kind as u8);
        w.f64s(&self.standardizer.min);
        w.f64s(&self.standardizer.max);
        match &self.classifier {
            Classifier::Svm { svm, platt_a, platt_b } => {
                let width = match svm.kernel {
                    Kernel::Rbf { width } => width,
                    Kernel::Linear => 0.0,
                };
                w.f64s(&[svm.c, width, svm.intercept, *platt_a, *platt_b]);
                w.u32(svm.support.len() as u32);
                w.f64s(&svm.coef);
                for sv in &svm.support {
                    w.f64s(sv);
                }
            }
            Classifier::Logreg {
                weights,
                intercept,
                penalty,
            } => {
                w.f64s(&[*penalty, *intercept]);
                w.f64s(weights);
            }
        }
        w.finish(path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = Reader::open(path.as_ref(), MAGIC, VERSION)?;
        let byte = r.u8()?;
        let kind = FusionKind::from_byte(byte).ok_or_else(|| r.malformed(format!("unknown fusion kind {byte}")))?;
        let four = |v: Vec<f64>| -> Features { [v[0], v[1], v[2], v[3]] };
        let standardizer = Standardizer {
            min: four(r.f64s(FEATURES)?),
            max: four(r.f64s(FEATURES)?),
        };
        let classifier = match kind {
            FusionKind::RbfSvm | FusionKind::LinearSvm => {
                let h = r.f64s(5)?;
                let count = r.u32()? as usize;
                let coef = r.f64s(count)?;
                let mut support = Vec::with_capacity(count);
                for _ in 0..count {
                    support.push(four(r.f64s(FEATURES)?));
                }
                let kernel = if kind == FusionKind::RbfSvm {
                    Kernel::Rbf { width: h[1] }
                } else {
                    Kernel::Linear
                };
                Classifier::Svm {
                    svm: Svm {
                        kernel,
                        c: h[0],
                        support,
                        coef,
                        intercept: h[2],
                    },
                    platt_a: h[3],
                    platt_b: h[4],
                }
            }
            FusionKind::Logreg => {
                let h = r.f64s(2)?;
                Classifier::Logreg {
                    penalty: h[0],
                    intercept: h[1],
                    weights: four(r.f64s(FEATURES)?),
                }
            }
        };
        r.expect_end()?;
        Ok(FusionModel {
            kind,
            standardizer,
            classifier,
        })
    }
}

/// A fitted model plus solver diagnostics.
#[derive(Debug, Clone)]
pub struct FusionFit {
    pub model: FusionModel,
    /// KKT residuals on the SVM training portion; `None` for logreg.
    pub kkt: Option<KktReport>,
    pub iterations: usize,
}

/// A fusion classifier family, selected by name.
pub trait FusionClassifier: Send + Sync {
    fn kind(&self) -> FusionKind;
    /// `labels[i]` is true for ID. Rows must already be in canonical order.
    fn fit(&self, rows: &[Features], labels: &[bool], params: &FusionParams, seed: u64) -> Result<FusionFit>;
}

pub struct RbfSvmFusion;
pub struct LinearSvmFusion;
pub struct LogregFusion;

/// Default RBF coefficient: 1 / (4 * mean per-feature variance).
pub fn default_rbf_width(rows: &[Features]) -> f64 {
    let n = rows.len() as f64;
    let mut total = 0.0;
    for k in 0..FEATURES {
        let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n;
        total += rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n;
    }
    let mean_var = total / FEATURES as f64;
    if mean_var > 0.0 {
        1.0 / (4.0 * mean_var)
    } else {
        1.0
    }
}

/// Stratified holdout: returns (train, calibration) index lists.
fn calibration_split(labels: &[bool], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    if fraction <= 0.0 {
        return ((0..labels.len()).collect(), Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut calib) = (Vec::new(), Vec::new());
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let take = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len().saturating_sub(2).max(1));
        calib.extend_from_slice(&idx[..take]);
        train.extend_from_slice(&idx[take..]);
    }
    train.sort_unstable();
    calib.sort_unstable();
    (train, calib)
}

fn fit_svm(kind: FusionKind, rows: &[Features], labels: &[bool], params: &FusionParams, seed: u64) -> Result<FusionFit> {
    let standardizer = Standardizer::fit(rows)?;
    let z: Vec<Features> = rows.iter().map(|r| standardizer.apply(r)).collect();
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let (train, calib) = calibration_split(labels, params.calibration_fraction, seed);
    let tz: Vec<Features> = train.iter().map(|&i| z[i]).collect();
    let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
    let kernel = match kind {
        FusionKind::LinearSvm => Kernel::Linear,
        _ => Kernel::Rbf {
            width: params.rbf_width.unwrap_or_else(|| default_rbf_width(&tz)),
        },
    };
    let solution = svm_train(&tz, &ty, kernel, params.c)?;
    let kkt = solution.kkt(&tz, &ty);
    let calib = if calib.is_empty() { train } else { calib };
    let dec: Vec<f64> = calib.iter().map(|&i| solution.svm.decision(&z[i])).collect();
    let cy: Vec<f64> = calib.iter().map(|&i| y[i]).collect();
    let (platt_a, platt_b) = platt_fit(&dec, &cy)?;
    Ok(FusionFit {
        model: FusionModel {
            kind,
            standardizer,
            classifier: Classifier::Svm {
                svm: solution.svm,
                platt_a,
                platt_b,
            },
        },
        kkt: Some(kkt),
        iterations: solution.iterations,
    })
}

impl FusionClassifier for RbfSvmFusion {
    fn kind(&self) -> FusionKind {
        FusionKind::RbfSvm
    }
    fn fit(&self, rows: &[Features], labels: &[bool], params: &FusionParams, seed: u64) -> Result<FusionFit> {
        fit_svm(FusionKind::RbfSvm, rows, labels, params, seed)
    }
}

impl FusionClassifier for LinearSvmFusion {
    fn kind(&self) -> FusionKind {
        FusionKind::LinearSvm
    }
    fn fit(&self, rows: &[Features], labels: &[bool], params: &FusionParams, seed: u64) -> Result<FusionFit> {
        fit_svm(FusionKind::LinearSvm, rows, labels, params, seed)
    }
}

impl FusionClassifier for LogregFusion {
    fn kind(&self) -> FusionKind {
        FusionKind::Logreg
    }
    fn fit(&self, rows: &[Features], labels: &[bool], params: &FusionParams, _seed: u64) -> Result<FusionFit> {
        let standardizer = Standardizer::fit(rows)?;
        let z: Vec<Features> = rows.iter().map(|r| standardizer.apply(r)).collect();
        let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        let (weights, intercept) = logreg_train(
            &z,
            &y,
            params.logreg_penalty,
            params.logreg_learning_rate,
            params.logreg_iterations,
        )?;
        Ok(FusionFit {
            model: FusionModel {
                kind: FusionKind::Logreg,
                standardizer,
                classifier: Classifier::Logreg {
                    weights,
                    intercept,
                    penalty: params.logreg_penalty,
                },
            },
            kkt: None,
            iterations: params.logreg_iterations,
        })
    }
}

pub fn fusion_registry() -> Registry<dyn FusionClassifier> {
    Registry::<dyn FusionClassifier>::new("fusion classifier")
        .register("rbf_svm", Arc::new(RbfSvmFusion))
        .register("linear_svm", Arc::new(LinearSvmFusion))
        .register("logreg", Arc::new(LogregFusion))
}

fn canonical_cmp(a: &(Features, bool), b: &(Features, bool)) -> Ordering {
    for k in 0..FEATURES {
        match a.0[k].total_cmp(&b.0[k]) {
            Ordering::Equal => {}
            o => return o,
        }
    }
    a.1.cmp(&b.1)
}

/// Fits the configured classifier on ID-training records against one
/// reference OOD source. The result does not depend on record order.
pub fn fit_fusion(id: &[ScoreRecord], ood: &[ScoreRecord], params: &FusionParams, seed: u64) -> Result<FusionFit> {
    params.validate()?;
    if id.is_empty() || ood.is_empty() {
        return Err(Error::EmptyInput(format!(
            "fusion needs ID and OOD records, got {} and {}",
            id.len(),
            ood.len()
        )));
    }
    let mut rows: Vec<(Features, bool)> = id
        .iter()
        .map(|r| (r.features(), true))
        .chain(ood.iter().map(|r| (r.features(), false)))
        .collect();
    rows.sort_by(canonical_cmp);
    let (x, y): (Vec<Features>, Vec<bool>) = rows.into_iter().unzip();
    let classifier = fusion_registry().get(params.kind.name())?;
    classifier.fit(&x, &y, params, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::SampleLabel;
    use rand::Rng;

    fn pad(v: &[f64]) -> Features {
        let mut f = [0.0; FEATURES];
        f[..v.len()].copy_from_slice(v);
        f
    }

    #[test]
    fn standardizer_examples() {
        let s = Standardizer::fit(&[pad(&[0.0]), pad(&[5.0]), pad(&[10.0])]).unwrap();
        assert_eq!(s.apply(&pad(&[5.0]))[0], 0.5);
        assert_eq!(s.apply(&pad(&[0.0]))[0], 0.0);
        assert!((s.apply(&pad(&[12.0]))[0] - 1.2).abs() < 1e-15);
        // The zero-padded columns are constant.
        assert_eq!(s.constant_features(), [false, true, true, true]);
        assert_eq!(s.apply(&pad(&[0.0, 3.0]))[1], 3.0);
        assert!(matches!(Standardizer::fit(&[]), Err(Error::EmptyInput(_))));
        let s = Standardizer::fit(&[pad(&[1.0, 2.0]), pad(&[1.0 - 1e-16, 4.0])]).unwrap();
        assert_eq!(s.constant_features(), [true, false, true, true]);
        assert!(s.apply(&pad(&[1.0 - 1e-16]))[0].abs() < 1e-15);
    }

    #[test]
    fn xor_with_rbf() {
        let x = [pad(&[0.0, 0.0]), pad(&[1.0, 1.0]), pad(&[0.0, 1.0]), pad(&[1.0, 0.0])];
        let y = [1.0, 1.0, -1.0, -1.0];
        let sol = svm_train(&x, &y, Kernel::Rbf { width: 1.0 }, 5.0).unwrap();
        for (xi, yi) in x.iter().zip(y) {
            assert!(sol.svm.decision(xi) * yi > 0.0);
        }
        let kkt = sol.kkt(&x, &y);
        assert!(kkt.satisfied(1e-2), "{kkt:?}");
        // By symmetry all four multipliers are equal; with K(x,x)=1,
        // K at distance 1 = e^-1 and at distance sqrt2 = e^-2, the margin
        // condition gives alpha = 1 / (1 - 2e^-1 + e^-2).
        let e = (-1.0f64).exp();
        let expected = 1.0 / (1.0 - 2.0 * e + e * e);
        for a in &sol.alpha {
            assert!((a - expected).abs() < 1e-2, "{a} vs {expected}");
        }
        assert!(sol.svm.intercept.abs() < 1e-3);
    }

    #[test]
    fn linear_boundary_at_zero() {
        let x = [pad(&[-1.0]), pad(&[1.0]), pad(&[-1.0, 0.0, 0.0, 0.0]), pad(&[1.0])];
        let y = [-1.0, 1.0, -1.0, 1.0];
        let sol = svm_train(&x, &y, Kernel::Linear, 5.0).unwrap();
        // Max-margin solution: w = 1, b = 0.
        assert!(sol.svm.decision(&pad(&[0.0])).abs() < 1e-3);
        assert!((sol.svm.decision(&pad(&[1.0])) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn single_class_rejected() {
        let x = [pad(&[0.0]), pad(&[1.0]), pad(&[2.0]), pad(&[3.0])];
        assert!(matches!(
            svm_train(&x, &[1.0; 4], Kernel::Linear, 1.0),
            Err(Error::SingleClass(_))
        ));
    }

    #[test]
    fn kkt_on_noisy_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..300 {
            let label = if i % 2 == 0 { 1.0 } else { -1.0 };
            x.push(pad(&[
                label * 0.5 + rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..1.0),
            ]));
            y.push(label);
        }
        for kernel in [Kernel::Linear, Kernel::Rbf { width: 2.0 }] {
            let sol = svm_train(&x, &y, kernel, 5.0).unwrap();
            let k = sol.kkt(&x, &y);
            assert!(k.satisfied(1e-2), "{kernel:?}: {k:?}");
            assert!(sol.alpha.iter().any(|&a| a == 5.0));
        }
    }

    #[test]
    fn platt_symmetric() {
        let d = [-1.0, -1.0, -1.0, 1.0, 1.0, 1.0];
        let y = [-1.0, -1.0, -1.0, 1.0, 1.0, 1.0];
        let (a, b) = platt_fit(&d, &y).unwrap();
        assert!(a < 0.0);
        assert!((sigmoid_neg(b) - 0.5).abs() < 0.05);
        assert!(matches!(platt_fit(&d, &[1.0; 6]), Err(Error::DegenerateCalibration(_))));
    }

    #[test]
    fn logreg_zero_iterations_and_separable() {
        let x: Vec<Features> = (0..20).map(|i| pad(&[i as f64 / 19.0])).collect();
        let y: Vec<f64> = (0..20).map(|i| if i >= 10 { 1.0 } else { 0.0 }).collect();
        let (w, b) = logreg_train(&x, &y, 0.5, 1.0, 0).unwrap();
        assert_eq!((w, b), ([0.0; FEATURES], 0.0));
        assert_eq!(sigmoid_neg(-(b + w[0] * 0.3)), 0.5);
        let (w, b) = logreg_train(&x, &y, 0.0, 5.0, 5000).unwrap();
        for (xi, &yi) in x.iter().zip(&y) {
            let p = sigmoid_neg(-(w[0] * xi[0] + b));
            assert_eq!(p > 0.5, yi > 0.5);
        }
    }

    #[test]
    fn logreg_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<Features> = (0..30).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let y: Vec<f64> = (0..30).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let w: Features = [0.3, -0.7, 0.1, 1.2];
        let b = -0.2;
        let (_, gw, gb) = logreg_objective(&w, b, &x, &y, 0.5);
        let h = 1e-6;
        for k in 0..FEATURES {
            let (mut wp, mut wm) = (w, w);
            wp[k] += h;
            wm[k] -= h;
            let fd = (logreg_objective(&wp, b, &x, &y, 0.5).0 - logreg_objective(&wm, b, &x, &y, 0.5).0) / (2.0 * h);
            assert!((fd - gw[k]).abs() / fd.abs().max(1e-8) < 1e-6, "{k}: {fd} vs {}", gw[k]);
        }
        let fd = (logreg_objective(&w, b + h, &x, &y, 0.5).0 - logreg_objective(&w, b - h, &x, &y, 0.5).0) / (2.0 * h);
        assert!((fd - gb).abs() / fd.abs() < 1e-6);
    }

    fn record(f: Features, label: SampleLabel) -> ScoreRecord {
        ScoreRecord {
            sample_id: 0,
            cos_alpha: f[0],
            max_cos_beta: f[1],
            cos_gamma: f[2],
            norm_fn: f[3],
            baseline_msp: 0.0,
            cos_theta: vec![],
            label,
            predicted_class: 0,
            degenerate: false,
        }
    }

    fn blobs(seed: u64) -> (Vec<ScoreRecord>, Vec<ScoreRecord>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let id = (0..80)
            .map(|_| record(std::array::from_fn(|_| rng.random_range(0.5..1.0)), SampleLabel::Id))
            .collect();
        let ood = (0..60)
            .map(|_| record(std::array::from_fn(|_| rng.random_range(0.0..0.6)), SampleLabel::Ood))
            .collect();
        (id, ood)
    }

    #[test]
    fn fusion_is_order_invariant_and_round_trips() {
        let (id, ood) = blobs(1);
        let dir = tempfile::tempdir().unwrap();
        for kind in [FusionKind::RbfSvm, FusionKind::LinearSvm, FusionKind::Logreg] {
            let params = FusionParams {
                kind,
                ..FusionParams::default()
            };
            let a = fit_fusion(&id, &ood, &params, 7).unwrap();
            let mut rid = id.clone();
            let mut rood = ood.clone();
            rid.reverse();
            rood.swap(0, 5);
            let b = fit_fusion(&rid, &rood, &params, 7).unwrap();
            assert_eq!(a.model, b.model);
            if let Some(k) = a.kkt {
                assert!(k.satisfied(1e-2), "{k:?}");
            }
            let mean = |rs: &[ScoreRecord]| rs.iter().map(|r| a.model.score(r)).sum::<f64>() / rs.len() as f64;
            assert!(mean(&id) > mean(&ood));
            for r in id.iter().chain(&ood) {
                let s = a.model.score(r);
                assert!(s > 0.0 && s < 1.0);
            }
            let p = dir.path().join(format!("{}.bin", kind.name()));
            a.model.save(&p).unwrap();
            assert_eq!(FusionModel::load(&p).unwrap(), a.model);
        }
    }

    #[test]
    fn score_ranking_follows_decision() {
        let (id, ood) = blobs(2);
        let fit = fit_fusion(&id, &ood, &FusionParams::default(), 0).unwrap();
        let mut pairs: Vec<(f64, f64)> = id
            .iter()
            .chain(&ood)
            .map(|r| (fit.model.decision(&r.features()), fit.model.score(r)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pairs.windows(2) {
            assert!(w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn load_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        std::fs::write(&p, b"PDCC\x01\x00\x00\x00").unwrap();
        assert!(FusionModel::load(&p).is_err());
    }
}
