//! Accuracy and fairness metrics plus per-run reports.
//!
//! All metrics read predictions in original demand units. `E_T[yhat]` is the
//! plain mean over the evaluation horizon.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FairError, Result};
use crate::grid::{DemographicMap, Group, GroupLabels, PredictionSeries};

/// Mean absolute error over every (cell, step).
pub fn mae(preds: &PredictionSeries) -> Result<f64> {
    let truth = preds.truth().ok_or(FairError::MissingGroundTruth)?;
    let yhat = preds.yhat();
    Ok(yhat.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / yhat.len() as f64)
}

fn check_cells(preds: &PredictionSeries, dem: &DemographicMap) -> Result<()> {
    if !preds.grid().same_layout(dem.grid()) {
        return Err(FairError::GridMismatch {
            left: "predictions".into(),
            right: "demographics".into(),
            detail: format!(
                "{}x{} vs {}x{}",
                preds.grid().height,
                preds.grid().width,
                dem.grid().height,
                dem.grid().width
            ),
        });
    }
    Ok(())
}

/// Region-based fairness gap: per-capita mean demand of the advantaged group
/// minus that of the disadvantaged group.
pub fn rfg(preds: &PredictionSeries, dem: &DemographicMap, labels: &GroupLabels) -> Result<f64> {
    check_cells(preds, dem)?;
    if labels.0.len() != dem.p().len() {
        return Err(FairError::Shape {
            expected: format!("{} group labels", dem.p().len()),
            got: labels.0.len().to_string(),
        });
    }
    rfg_from_means(preds.mean_yhat(), dem.p(), labels)
}

/// [`rfg`] on precomputed per-cell means.
pub fn rfg_from_means(mean: &[f64], p: &[f64], labels: &GroupLabels) -> Result<f64> {
    let per_capita = |g: Group, name: &'static str| -> Result<f64> {
        let (mut demand, mut mass, mut count) = (0.0, 0.0, 0usize);
        for ((&e, &pi), &l) in mean.iter().zip(p).zip(&labels.0) {
            if l == g {
                demand += e;
                mass += pi;
                count += 1;
            }
        }
        if count == 0 {
            return Err(FairError::EmptyGroup(name));
        }
        if mass <= 0.0 {
            return Err(FairError::ZeroMass(name));
        }
        Ok(demand / mass)
    };
    Ok(per_capita(Group::Advantaged, "advantaged")? - per_capita(Group::Disadvantaged, "disadvantaged")?)
}

/// Individual-based fairness gap using per-cell group fractions.
pub fn ifg(preds: &PredictionSeries, dem: &DemographicMap) -> Result<f64> {
    check_cells(preds, dem)?;
    ifg_from_means(preds.mean_yhat(), dem.p(), dem.w_plus())
}

pub fn ifg_from_means(mean: &[f64], p: &[f64], w_plus: &[f64]) -> Result<f64> {
    let (mut num_plus, mut den_plus, mut num_minus, mut den_minus) = (0.0, 0.0, 0.0, 0.0);
    for ((&e, &pi), &wp) in mean.iter().zip(p).zip(w_plus) {
        let wm = 1.0 - wp;
        num_plus += e * wp;
        den_plus += pi * wp;
        num_minus += e * wm;
        den_minus += pi * wm;
    }
    if den_plus <= 0.0 {
        return Err(FairError::ZeroDenominator("sum of p * w_plus"));
    }
    if den_minus <= 0.0 {
        return Err(FairError::ZeroDenominator("sum of p * w_minus"));
    }
    Ok(num_plus / den_plus - num_minus / den_minus)
}

/// Spearman correlation with its degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    /// Set when either series is constant; `rho` is then 0.
    pub degenerate: bool,
}

/// Spearman rank correlation between per-cell mean predictions and the
/// disadvantaged fraction `w_minus`.
pub fn spearman_sr(preds: &PredictionSeries, dem: &DemographicMap) -> Result<Spearman> {
    check_cells(preds, dem)?;
    spearman(preds.mean_yhat(), dem.w_minus())
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<Spearman> {
    if a.len() != b.len() {
        return Err(FairError::Shape {
            expected: a.len().to_string(),
            got: b.len().to_string(),
        });
    }
    if a.len() < 2 {
        return Err(FairError::invalid("spearman input", "needs at least two cells"));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(Spearman {
            rho: 0.0,
            degenerate: true,
        });
    }
    Ok(Spearman {
        rho: (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// 1-based ranks; ties share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

/// Raw metric values before metadata is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub mae: Option<f64>,
    pub rfg: Option<f64>,
    pub ifg: Option<f64>,
    pub sr: Spearman,
    pub n_advantaged: usize,
    pub n_disadvantaged: usize,
}

/// Computes every metric that the inputs allow. MAE is absent without ground
/// truth; RFG is absent when a group is empty and IFG when a denominator is 0.
pub fn compute_metrics(preds: &PredictionSeries, dem: &DemographicMap, labels: &GroupLabels) -> Result<Metrics> {
    let mae = match mae(preds) {
        Ok(v) => Some(v),
        Err(FairError::MissingGroundTruth) => None,
        Err(e) => return Err(e),
    };
    let rfg = match rfg(preds, dem, labels) {
        Ok(v) => Some(v),
        Err(FairError::EmptyGroup(_) | FairError::ZeroMass(_)) => None,
        Err(e) => return Err(e),
    };
    let ifg = match ifg(preds, dem) {
        Ok(v) => Some(v),
        Err(FairError::ZeroDenominator(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Metrics {
        mae,
        rfg,
        ifg,
        sr: spearman_sr(preds, dem)?,
        n_advantaged: labels.count(Group::Advantaged),
        n_disadvantaged: labels.count(Group::Disadvantaged),
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportMeta {
    pub lambda: f64,
    pub run_id: String,
    /// Prediction source, e.g. `model` or `ha`.
    pub method: String,
    pub dataset_id: String,
    pub horizon: usize,
    pub started_at: String,
    pub finished_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub run_id: String,
    pub method: String,
    pub dataset_id: String,
    pub lambda: f64,
    pub horizon: usize,
    pub mae: Option<f64>,
    pub rfg: Option<f64>,
    pub ifg: Option<f64>,
    pub sr: f64,
    pub sr_degenerate: bool,
    pub n_advantaged: usize,
    pub n_disadvantaged: usize,
    pub started_at: String,
    pub finished_at: String,
}

impl FairnessReport {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.sr) {
            return Err(FairError::invalid("sr", format!("{} is outside [-1, 1]", self.sr)));
        }
        if self.rfg.is_some() && (self.n_advantaged == 0 || self.n_disadvantaged == 0) {
            return Err(FairError::invalid("rfg", "present although a group is empty"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|source| FairError::Json {
            context: "fairness report".into(),
            source,
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s).map_err(|source| FairError::Json {
            context: "fairness report".into(),
            source,
        })?;
        r.validate()?;
        Ok(r)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| FairError::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| FairError::io(path, e))?)
    }

    /// Writes reports as CSV rows with a header line.
    pub fn write_csv(reports: &[FairnessReport], path: &Path) -> Result<()> {
        let csv_err = |source| FairError::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for r in reports {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush().map_err(|e| FairError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<FairnessReport>> {
        let csv_err = |source| FairError::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        r.deserialize::<FairnessReport>()
            .map(|row| {
                let row = row.map_err(csv_err)?;
                row.validate()?;
                Ok(row)
            })
            .collect()
    }
}

pub fn build_report(metrics: &Metrics, meta: &ReportMeta) -> Result<FairnessReport> {
    let report = FairnessReport {
        run_id: meta.run_id.clone(),
        method: meta.method.clone(),
        dataset_id: meta.dataset_id.clone(),
        lambda: meta.lambda,
        horizon: meta.horizon,
        mae: metrics.mae,
        rfg: metrics.rfg,
        ifg: metrics.ifg,
        sr: metrics.sr.rho,
        sr_degenerate: metrics.sr.degenerate,
        n_advantaged: metrics.n_advantaged,
        n_disadvantaged: metrics.n_disadvantaged,
        started_at: meta.started_at.clone(),
        finished_at: meta.finished_at.clone(),
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{label_groups, GridSpec};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn series(h: usize, w: usize, mean: &[f64]) -> PredictionSeries {
        PredictionSeries::new(GridSpec::new(h, w).unwrap(), 1, mean.to_vec(), None).unwrap()
    }

    #[test]
    fn mae_examples() {
        let p = PredictionSeries::new(GridSpec::new(1, 1).unwrap(), 2, vec![1.0, 3.0], Some(vec![2.0, 2.0])).unwrap();
        assert_eq!(mae(&p).unwrap(), 1.0);
        let exact = PredictionSeries::new(GridSpec::new(1, 1).unwrap(), 2, vec![1.0, 3.0], Some(vec![1.0, 3.0])).unwrap();
        assert_eq!(mae(&exact).unwrap(), 0.0);
        let none = series(1, 1, &[1.0]);
        assert!(matches!(mae(&none), Err(FairError::MissingGroundTruth)));
    }

    #[test]
    fn rfg_hand_example() {
        let grid = GridSpec::new(1, 2).unwrap();
        let dem = DemographicMap::new(grid, vec![0.6, 0.4], vec![0.9, 0.1]).unwrap();
        let labels = label_groups(&dem);
        let v = rfg(&series(1, 2, &[12.0, 4.0]), &dem, &labels).unwrap();
        assert_relative_eq!(v, 10.0, epsilon = 1e-12);
        let all_plus = GroupLabels(vec![Group::Advantaged; 2]);
        assert!(matches!(
            rfg(&series(1, 2, &[12.0, 4.0]), &dem, &all_plus),
            Err(FairError::EmptyGroup(_))
        ));
    }

    #[test]
    fn rfg_zero_for_proportional_allocation() {
        let grid = GridSpec::new(1, 4).unwrap();
        let p = vec![0.1, 0.2, 0.3, 0.4];
        let dem = DemographicMap::new(grid, p.clone(), vec![0.9, 0.2, 0.7, 0.1]).unwrap();
        let mean: Vec<f64> = p.iter().map(|x| 3.0 * x).collect();
        let v = rfg(&series(1, 4, &mean), &dem, &label_groups(&dem)).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn ifg_examples() {
        let grid = GridSpec::new(1, 2).unwrap();
        let dem = DemographicMap::new(grid.clone(), vec![0.5, 0.5], vec![0.8, 0.2]).unwrap();
        assert_relative_eq!(ifg(&series(1, 2, &[8.0, 2.0]), &dem).unwrap(), 7.2, epsilon = 1e-12);
        let half = DemographicMap::new(grid.clone(), vec![0.3, 0.7], vec![0.5, 0.5]).unwrap();
        assert!(ifg(&series(1, 2, &[8.0, 2.0]), &half).unwrap().abs() < 1e-12);
        let ones = DemographicMap::new(grid, vec![0.5, 0.5], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            ifg(&series(1, 2, &[8.0, 2.0]), &ones),
            Err(FairError::ZeroDenominator(_))
        ));
    }

    #[test]
    fn spearman_examples() {
        let s = spearman(&[5.0, 3.0, 1.0], &[0.2, 0.5, 0.9]).unwrap();
        assert_eq!(s.rho, -1.0);
        assert!(!s.degenerate);
        assert_eq!(spearman(&[0.2, 0.5, 0.9], &[0.2, 0.5, 0.9]).unwrap().rho, 1.0);
        let flat = spearman(&[2.0, 2.0, 2.0], &[0.2, 0.5, 0.9]).unwrap();
        assert_eq!(flat, Spearman { rho: 0.0, degenerate: true });
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    fn sample_metrics(mae: Option<f64>) -> Metrics {
        Metrics {
            mae,
            rfg: Some(0.1 + 0.2),
            ifg: Some(-1.0 / 3.0),
            sr: Spearman {
                rho: -0.123456789012345,
                degenerate: false,
            },
            n_advantaged: 7,
            n_disadvantaged: 9,
        }
    }

    fn sample_meta() -> ReportMeta {
        ReportMeta {
            lambda: 0.6,
            run_id: "run-1".into(),
            method: "model".into(),
            dataset_id: "synth".into(),
            horizon: 64,
            started_at: "2026-01-01T00:00:00Z".into(),
            finished_at: "2026-01-01T00:01:00Z".into(),
        }
    }

    #[test]
    fn report_round_trips_through_csv_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let reports = vec![
            build_report(&sample_metrics(Some(1.0 / 7.0)), &sample_meta()).unwrap(),
            build_report(&sample_metrics(None), &sample_meta()).unwrap(),
        ];
        assert_eq!(reports[1].mae, None);
        assert!(reports[1].rfg.is_some());
        let path = dir.path().join("r.csv");
        FairnessReport::write_csv(&reports, &path).unwrap();
        assert_eq!(FairnessReport::read_csv(&path).unwrap(), reports);
        let back = FairnessReport::from_json(&reports[0].to_json().unwrap()).unwrap();
        assert_eq!(back, reports[0]);
    }

    #[test]
    fn out_of_range_sr_is_rejected() {
        let mut m = sample_metrics(None);
        m.sr.rho = 1.5;
        assert!(build_report(&m, &sample_meta()).is_err());
    }

    /// Direct summation with explicit index loops, no shared helpers.
    fn brute_rfg(e: &[f64], p: &[f64], w: &[f64]) -> f64 {
        let mut sums = [[0.0f64; 2]; 2];
        for i in 0..e.len() {
            let g = usize::from(w[i] < 0.5);
            sums[g][0] += e[i];
            sums[g][1] += p[i];
        }
        sums[0][0] / sums[0][1] - sums[1][0] / sums[1][1]
    }

    fn brute_ifg(e: &[f64], p: &[f64], w: &[f64]) -> f64 {
        let a: f64 = (0..e.len()).map(|i| e[i] * w[i]).sum();
        let b: f64 = (0..e.len()).map(|i| p[i] * w[i]).sum();
        let c: f64 = (0..e.len()).map(|i| e[i] * (1.0 - w[i])).sum();
        let d: f64 = (0..e.len()).map(|i| p[i] * (1.0 - w[i])).sum();
        a / b - c / d
    }

    /// Ranks by counting, then the textbook Pearson formula.
    fn brute_spearman(a: &[f64], b: &[f64]) -> f64 {
        let rank = |x: &[f64]| -> Vec<f64> {
            x.iter()
                .map(|&v| {
                    let less = x.iter().filter(|&&u| u < v).count() as f64;
                    let eq = x.iter().filter(|&&u| u == v).count() as f64;
                    less + (eq + 1.0) / 2.0
                })
                .collect()
        };
        let (ra, rb) = (rank(a), rank(b));
        let n = a.len() as f64;
        let (sa, sb): (f64, f64) = (ra.iter().sum(), rb.iter().sum());
        let sab: f64 = ra.iter().zip(&rb).map(|(x, y)| x * y).sum();
        let saa: f64 = ra.iter().map(|x| x * x).sum();
        let sbb: f64 = rb.iter().map(|x| x * x).sum();
        (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
    }

    fn instance() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..=6, 2usize..=6).prop_flat_map(|(h, w)| {
            let n = h * w;
            (
                Just(h),
                Just(w),
                prop::collection::vec(0.0f64..100.0, n),
                prop::collection::vec(0.01f64..1.0, n),
                prop::collection::vec(0.0f64..=1.0, n),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn matches_brute_force((h, w, e, counts, wp) in instance()) {
            let grid = GridSpec::new(h, w).unwrap();
            let dem = DemographicMap::from_counts(grid, &counts, wp.clone()).unwrap();
            let preds = series(h, w, &e);
            let labels = label_groups(&dem);
            let both = labels.count(Group::Advantaged) > 0 && labels.count(Group::Disadvantaged) > 0;
            if both {
                let got = rfg(&preds, &dem, &labels).unwrap();
                let want = brute_rfg(&e, dem.p(), dem.w_plus());
                prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
            }
            if let Ok(got) = ifg(&preds, &dem) {
                let want = brute_ifg(&e, dem.p(), dem.w_plus());
                prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
            }
            let s = spearman_sr(&preds, &dem).unwrap();
            if !s.degenerate {
                let want = brute_spearman(&e, dem.w_minus());
                prop_assert!((s.rho - want).abs() <= 1e-12, "{} vs {}", s.rho, want);
            }
        }

        #[test]
        fn homogeneous_of_degree_one((h, w, e, counts, wp) in instance(), k in 0.1f64..10.0) {
            let grid = GridSpec::new(h, w).unwrap();
            let dem = DemographicMap::from_counts(grid, &counts, wp).unwrap();
            let labels = label_groups(&dem);
            let scaled: Vec<f64> = e.iter().map(|x| x * k).collect();
            if let (Ok(a), Ok(b)) = (rfg(&series(h, w, &e), &dem, &labels), rfg(&series(h, w, &scaled), &dem, &labels)) {
                prop_assert!((b - k * a).abs() <= 1e-9 * (k * a).abs().max(1e-9));
            }
            if let (Ok(a), Ok(b)) = (ifg(&series(h, w, &e), &dem), ifg(&series(h, w, &scaled), &dem)) {
                prop_assert!((b - k * a).abs() <= 1e-9 * (k * a).abs().max(1e-9));
            }
        }

        #[test]
        fn spearman_rank_invariant(a in prop::collection::vec(-50.0f64..50.0, 2..30), seed in any::<u64>()) {
            let b: Vec<f64> = (0..a.len()).map(|i| ((i as u64).wrapping_mul(seed | 1) % 97) as f64).collect();
            let base = spearman(&a, &b).unwrap();
            let mono: Vec<f64> = a.iter().map(|x| (x / 10.0).exp() * 3.0 + 1.0).collect();
            let t = spearman(&mono, &b).unwrap();
            prop_assert_eq!(base.degenerate, t.degenerate);
            prop_assert!((base.rho - t.rho).abs() < 1e-12);
        }
    }
}
