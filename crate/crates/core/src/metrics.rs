//! Threshold classification and ID/OOD separation statistics.
//!
//! Scores follow the "higher means more in-distribution" convention: a
//! sample is accepted as ID when `score >= tau`.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub fn classify(score: f64, tau: f64) -> bool {
    score >= tau
}

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyInput(format!("{name} score list is empty")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("{name} scores")));
    }
    Ok(())
}

/// Area under the ROC curve, computed as the Mann-Whitney statistic with
/// mid-ranks for ties: `(#{id > ood} + 0.5 #{id == ood}) / (N_id N_ood)`.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores("ID", id_scores)?;
    check_scores("OOD", ood_scores)?;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Ranks are kept doubled so mid-ranks of tie groups stay integral.
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < all.len() {
        let mut end = start + 1;
        while end < all.len() && all[end].0 == all[start].0 {
            end += 1;
        }
        // 1-based ranks start+1 ..= end, their mean doubled is start + end + 1.
        let twice_mid = (start + end + 1) as u128;
        let ids = all[start..end].iter().filter(|(_, is_id)| *is_id).count() as u128;
        twice_rank_sum += twice_mid * ids;
        start = end;
    }
    let n_id = id_scores.len() as u128;
    let n_ood = ood_scores.len() as u128;
    // 2U = 2R - n_id (n_id + 1); U counts ties as one half.
    let twice_u = twice_rank_sum - n_id * (n_id + 1);
    Ok(twice_u as f64 / 2.0 / (n_id * n_ood) as f64)
}

/// True negative rate at the threshold keeping at least `level` of the ID
/// scores accepted. Returns `(tnr, tau)`; `tau` is an observed ID score.
pub fn tnr_at_tpr(id_scores: &[f64], ood_scores: &[f64], level: f64) -> Result<(f64, f64)> {
    check_scores("ID", id_scores)?;
    check_scores("OOD", ood_scores)?;
    if !(level > 0.0 && level <= 1.0) {
        return Err(Error::InvalidParameter(format!("TPR level {level} outside (0, 1]")));
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let needed = ((level * sorted.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let tau = sorted[needed.min(sorted.len()) - 1];
    let rejected = ood_scores.iter().filter(|&&s| !classify(s, tau)).count();
    Ok((rejected as f64 / ood_scores.len() as f64, tau))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn histogram(scores: &[f64], bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = range;
    if bins == 0 {
        return Err(Error::InvalidParameter("histogram needs at least one bin".into()));
    }
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::InvalidParameter(format!("invalid histogram range [{lo}, {hi}]")));
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut counts = vec![0usize; bins];
    for &s in scores {
        if !(s >= lo && s <= hi) {
            continue;
        }
        let mut b = (((s - lo) / width) as usize).min(bins - 1);
        // Floating division can land one bin off near an edge.
        while b > 0 && s < edges[b] {
            b -= 1;
        }
        while b + 1 < bins && s >= edges[b + 1] {
            b += 1;
        }
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Separation statistics of one score on one (ID, OOD) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub id_dataset: String,
    pub ood_dataset: String,
    pub score_name: String,
    pub auroc: f64,
    pub tnr_at_tpr95: f64,
    pub tnr_at_tpr98: f64,
    pub tau95: f64,
    pub tau98: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub id_histogram: Histogram,
    pub ood_histogram: Histogram,
}

pub const DEFAULT_BINS: usize = 50;

impl EvalReport {
    pub fn compute(
        id_dataset: &str,
        ood_dataset: &str,
        score_name: &str,
        id_scores: &[f64],
        ood_scores: &[f64],
        bins: usize,
    ) -> Result<Self> {
        let auroc = auroc(id_scores, ood_scores)?;
        let (tnr95, tau95) = tnr_at_tpr(id_scores, ood_scores, 0.95)?;
        let (tnr98, tau98) = tnr_at_tpr(id_scores, ood_scores, 0.98)?;
        debug_assert!(tau98 <= tau95 && tnr98 <= tnr95);
        let lo = id_scores.iter().chain(ood_scores).copied().fold(f64::INFINITY, f64::min);
        let mut hi = id_scores.iter().chain(ood_scores).copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            hi = lo + 1.0;
        }
        Ok(EvalReport {
            id_dataset: id_dataset.to_string(),
            ood_dataset: ood_dataset.to_string(),
            score_name: score_name.to_string(),
            auroc,
            tnr_at_tpr95: tnr95,
            tnr_at_tpr98: tnr98,
            tau95,
            tau98,
            n_id: id_scores.len(),
            n_ood: ood_scores.len(),
            id_histogram: histogram(id_scores, bins, (lo, hi))?,
            ood_histogram: histogram(ood_scores, bins, (lo, hi))?,
        })
    }

    /// `key: value` text form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "id_dataset: {}", self.id_dataset).unwrap();
        writeln!(s, "ood_dataset: {}", self.ood_dataset).unwrap();
        writeln!(s, "score_name: {}", self.score_name).unwrap();
        writeln!(s, "auroc: {}", fmt_float(self.auroc)).unwrap();
        writeln!(s, "tnr_at_tpr95: {}", fmt_float(self.tnr_at_tpr95)).unwrap();
        writeln!(s, "tnr_at_tpr98: {}", fmt_float(self.tnr_at_tpr98)).unwrap();
        writeln!(s, "tau95: {}", fmt_float(self.tau95)).unwrap();
        writeln!(s, "tau98: {}", fmt_float(self.tau98)).unwrap();
        writeln!(s, "n_id: {}", self.n_id).unwrap();
        writeln!(s, "n_ood: {}", self.n_ood).unwrap();
        writeln!(s, "histogram_bins: {}", self.id_histogram.counts.len()).unwrap();
        s
    }

    /// Rows of `metric,id_dataset,ood_dataset,score_name,value` (no header).
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for (metric, value) in [
            ("auroc", self.auroc),
            ("tnr_at_tpr95", self.tnr_at_tpr95),
            ("tnr_at_tpr98", self.tnr_at_tpr98),
        ] {
            writeln!(
                s,
                "{metric},{},{},{},{}",
                self.id_dataset,
                self.ood_dataset,
                self.score_name,
                fmt_float(value)
            )
            .unwrap();
        }
        s
    }

    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,id_count,ood_count\n");
        let edges = &self.id_histogram.edges;
        for b in 0..self.id_histogram.counts.len() {
            writeln!(
                s,
                "{},{},{},{}",
                fmt_float(edges[b]),
                fmt_float(edges[b + 1]),
                self.id_histogram.counts[b],
                self.ood_histogram.counts[b]
            )
            .unwrap();
        }
        s
    }
}

pub const REPORT_CSV_HEADER: &str = "metric,id_dataset,ood_dataset,score_name,value";

/// Nine significant digits in scientific notation.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.8e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
        let mut twice = 0u64;
        for &a in id {
            for &b in ood {
                if a > b {
                    twice += 2;
                } else if a == b {
                    twice += 1;
                }
            }
        }
        twice as f64 / 2.0 / (id.len() * ood.len()) as f64
    }

    #[test]
    fn classify_boundary_is_id() {
        assert!(classify(0.7, 0.5));
        assert!(classify(0.5, 0.5));
        assert!(!classify(0.3, 0.5));
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.3], &[0.5, 0.1]).unwrap(), 0.75);
        assert_eq!(brute_auroc(&[0.9, 0.3], &[0.5, 0.1]), 0.75);
        assert_eq!(auroc(&[0.5], &[0.5]).unwrap(), 0.5);
        assert!(matches!(auroc(&[], &[0.1]), Err(Error::EmptyInput(_))));
        assert!(matches!(auroc(&[0.1], &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn tnr_examples() {
        let id: Vec<f64> = (1..=20).map(f64::from).collect();
        let (tnr, tau) = tnr_at_tpr(&id, &[0.0, 1.5, 3.0], 0.95).unwrap();
        assert_eq!(tau, 2.0);
        assert!((tnr - 2.0 / 3.0).abs() < 1e-15);

        // Exhaustive sweep over every observed threshold.
        let best = id
            .iter()
            .copied()
            .filter(|&t| id.iter().filter(|&&s| s >= t).count() as f64 / 20.0 >= 0.95)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best, tau);

        let (tnr, _) = tnr_at_tpr(&[0.9, 0.95], &[0.1, 0.2], 0.95).unwrap();
        assert_eq!(tnr, 1.0);
        let (tnr, _) = tnr_at_tpr(&[0.9, 0.95], &[0.1, 0.2], 0.98).unwrap();
        assert_eq!(tnr, 1.0);
        let (tnr, _) = tnr_at_tpr(&[0.1, 0.2], &[0.9, 0.95], 0.95).unwrap();
        assert_eq!(tnr, 0.0);
    }

    #[test]
    fn histogram_examples() {
        let h = histogram(&[0.1, 0.9], 2, (0.0, 1.0)).unwrap();
        assert_eq!(h.counts, vec![1, 1]);
        assert_eq!(h.edges, vec![0.0, 0.5, 1.0]);
        assert_eq!(histogram(&[], 3, (0.0, 1.0)).unwrap().counts, vec![0, 0, 0]);
        assert!(histogram(&[0.1], 0, (0.0, 1.0)).is_err());
        assert!(histogram(&[0.1], 2, (1.0, 0.0)).is_err());
        // Right edge is inclusive, out-of-range values are skipped.
        assert_eq!(histogram(&[1.0, 1.5, -0.1], 2, (0.0, 1.0)).unwrap().counts, vec![0, 1]);
    }

    #[test]
    fn histogram_matches_brute_force_binning() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<f64> = (0..1000).map(|_| rng.random_range(-0.2..1.2)).collect();
        let bins = 17;
        let h = histogram(&xs, bins, (0.0, 1.0)).unwrap();
        let mut expect = vec![0usize; bins];
        for &x in &xs {
            for b in 0..bins {
                let last = b == bins - 1;
                if x >= h.edges[b] && (x < h.edges[b + 1] || (last && x <= h.edges[b + 1])) {
                    expect[b] += 1;
                }
            }
        }
        assert_eq!(h.counts, expect);
        let in_range = xs.iter().filter(|&&x| (0.0..=1.0).contains(&x)).count();
        assert_eq!(h.counts.iter().sum::<usize>(), in_range);
    }

    #[test]
    fn report_serialisation() {
        let r = EvalReport::compute("id", "ood", "S_gamma", &[0.9, 0.8, 0.7], &[0.1, 0.75], 4).unwrap();
        let text = r.to_text();
        assert!(text.contains("auroc: "));
        assert_eq!(r.csv_rows().lines().count(), 3);
        assert!(r.csv_rows().starts_with("auroc,id,ood,S_gamma,"));
        assert_eq!(r.histogram_csv().lines().count(), 5);
        assert!(r.tau98 <= r.tau95);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tied_scores() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec((0u8..12).prop_map(|v| v as f64 / 4.0), 1..80)
        }

        proptest! {
            #[test]
            fn rank_auroc_equals_pair_count(id in tied_scores(), ood in tied_scores()) {
                prop_assert_eq!(auroc(&id, &ood).unwrap(), brute_auroc(&id, &ood));
            }

            #[test]
            fn auroc_swap_sums_to_one(id in tied_scores(), ood in tied_scores()) {
                let s = auroc(&id, &ood).unwrap() + auroc(&ood, &id).unwrap();
                prop_assert!((s - 1.0).abs() < 1e-15);
            }

            #[test]
            fn auroc_monotone_invariant(id in tied_scores(), ood in tied_scores()) {
                let f = |v: &Vec<f64>| v.iter().map(|x| (3.0 * x).exp() - 2.0).collect::<Vec<_>>();
                prop_assert_eq!(auroc(&id, &ood).unwrap(), auroc(&f(&id), &f(&ood)).unwrap());
            }

            #[test]
            fn stricter_level_never_raises_tnr(id in tied_scores(), ood in tied_scores()) {
                let (t95, tau95) = tnr_at_tpr(&id, &ood, 0.95).unwrap();
                let (t98, tau98) = tnr_at_tpr(&id, &ood, 0.98).unwrap();
                prop_assert!(tau98 <= tau95);
                prop_assert!(t98 <= t95);
            }
        }
    }
}
