//! Confusion-matrix metrics, rank-based AUC, and the unequal-variance
//! two-sample t-test used to compare prediction distributions.

use std::fmt::Write as _;

use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Marker for table cells omitted as duplicates.
pub const OMITTED: &str = "⊘";

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no predictions to evaluate")]
    Empty,
    #[error("non-finite score for commit {0}")]
    NonFinite(String),
    #[error("t-test needs at least two values per sample (got {0} and {1})")]
    SampleTooSmall(usize, usize),
    #[error("score vectors differ in length: {name_a} has {len_a}, {name_b} has {len_b}")]
    LengthMismatch {
        name_a: String,
        len_a: usize,
        name_b: String,
        len_b: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub commit_id: String,
    pub score: f64,
    pub label: Label,
}

impl PredictionResult {
    pub fn new(commit_id: impl Into<String>, score: f64, label: Label) -> Self {
        PredictionResult {
            commit_id: commit_id.into(),
            score,
            label,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

/// A metric value; `undefined` marks a zero denominator (the value is then 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub undefined: bool,
}

impl MetricValue {
    fn defined(value: f64) -> Self {
        MetricValue {
            value,
            undefined: false,
        }
    }

    fn undefined() -> Self {
        MetricValue {
            value: 0.0,
            undefined: true,
        }
    }

    fn ratio(num: u64, den: u64) -> Self {
        if den == 0 {
            MetricValue::undefined()
        } else {
            MetricValue::defined(num as f64 / den as f64)
        }
    }

    /// Two decimals, or `n/a` when undefined.
    pub fn display(&self) -> String {
        if self.undefined {
            "n/a".to_string()
        } else {
            format!("{:.2}", self.value)
        }
    }
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> MetricValue {
        MetricValue::ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> MetricValue {
        MetricValue::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> MetricValue {
        MetricValue::ratio(self.tp, self.tp + self.fn_)
    }

    /// Exact precision as `(numerator, denominator)`.
    pub fn precision_ratio(&self) -> (u64, u64) {
        (self.tp, self.tp + self.fp)
    }

    pub fn f1(&self) -> MetricValue {
        let p = self.precision();
        let r = self.recall();
        if p.undefined || r.undefined {
            return MetricValue::undefined();
        }
        f1_from(p.value, r.value)
    }
}

/// Harmonic mean of precision and recall; undefined when both are zero.
pub fn f1_from(precision: f64, recall: f64) -> MetricValue {
    let den = precision + recall;
    if den == 0.0 {
        MetricValue::undefined()
    } else {
        MetricValue::defined(2.0 * precision * recall / den)
    }
}

/// Counts with `score > threshold` as the positive prediction.
pub fn confusion(preds: &[PredictionResult], threshold: f64) -> Result<ConfusionCounts, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut c = ConfusionCounts::default();
    for p in preds {
        if !p.score.is_finite() {
            return Err(MetricsError::NonFinite(p.commit_id.clone()));
        }
        match (p.score > threshold, p.label.is_defective()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Probability that a random positive outranks a random negative, ties
/// counted one half, via mid-ranks. `None` when either class is absent.
pub fn auc_from_scores<S: ToPrimitive + Copy>(scores: &[S], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len(), "one label per score");
    let mut order: Vec<(f64, bool)> = scores
        .iter()
        .zip(positive)
        .map(|(s, &p)| (s.to_f64().unwrap_or(f64::NAN), p))
        .collect();
    let n_pos = order.iter().filter(|(_, p)| *p).count();
    let n_neg = order.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    // sum of positive mid-ranks (1-based)
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && order[j].0 == order[i].0 {
            j += 1;
        }
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        let positives = order[i..j].iter().filter(|(_, p)| *p).count();
        rank_sum += mid_rank * positives as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// AUC of a prediction set; undefined (reported as 0.5) for single-class input.
pub fn auc(preds: &[PredictionResult]) -> MetricValue {
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let labels: Vec<bool> = preds.iter().map(|p| p.label.is_defective()).collect();
    match auc_from_scores(&scores, &labels) {
        Some(v) => MetricValue::defined(v),
        None => MetricValue {
            value: 0.5,
            undefined: true,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: MetricValue,
    pub accuracy: MetricValue,
    pub precision: MetricValue,
    pub recall: MetricValue,
    pub f1: MetricValue,
    pub counts: ConfusionCounts,
    pub threshold: f64,
}

impl MetricsReport {
    pub fn any_undefined(&self) -> bool {
        [self.auc, self.accuracy, self.precision, self.recall, self.f1]
            .iter()
            .any(|m| m.undefined)
    }
}

pub fn evaluate(preds: &[PredictionResult], threshold: f64) -> Result<MetricsReport, MetricsError> {
    let counts = confusion(preds, threshold)?;
    Ok(MetricsReport {
        auc: auc(preds),
        accuracy: counts.accuracy(),
        precision: counts.precision(),
        recall: counts.recall(),
        f1: counts.f1(),
        counts,
        threshold,
    })
}

/// Column order of the metrics table.
pub const METRICS_COLUMNS: [&str; 6] = ["model", "auc", "accuracy", "precision", "recall", "f1"];

/// Tab-separated metrics table, one row per run, full precision. Undefined
/// values are written as `nan`.
pub fn metrics_table_tsv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a MetricsReport)>) -> String {
    let mut out = METRICS_COLUMNS.join("\t");
    out.push('\n');
    let cell = |m: MetricValue| {
        if m.undefined {
            "nan".to_string()
        } else {
            m.value.to_string()
        }
    };
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{name}\t{}\t{}\t{}\t{}\t{}",
            cell(r.auc),
            cell(r.accuracy),
            cell(r.precision),
            cell(r.recall),
            cell(r.f1)
        );
    }
    out
}

// ---------------------------------------------------------------------------
// t-test

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, ss / (n - 1.0))
}

/// Two-sided unequal-variance (Welch) two-sample t-test.
pub fn t_test<S: ToPrimitive + Copy>(a: &[S], b: &[S]) -> Result<TTest, MetricsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(MetricsError::SampleTooSmall(a.len(), b.len()));
    }
    let to_f64 = |xs: &[S]| -> Vec<f64> { xs.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect() };
    let (a, b) = (to_f64(a), to_f64(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, va) = mean_var(&a);
    let (mb, vb) = mean_var(&b);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(if ma == mb {
            TTest { t: 0.0, p: 1.0, df: na + nb - 2.0 }
        } else {
            TTest {
                t: if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY },
                p: 0.0,
                df: na + nb - 2.0,
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(TTest {
        t,
        p: student_t_two_sided(t, df),
        df,
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let series = COEF[1..]
        .iter()
        .enumerate()
        .fold(COEF[0], |acc, (i, c)| acc + c / (x + i as f64 + 1.0));
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + series.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 10_000;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// Maps scores to 0/1 predictions for comparing thresholded outputs.
pub fn thresholded(scores: &[f64], threshold: f64) -> Vec<f64> {
    scores
        .iter()
        .map(|&s| if s > threshold { 1.0 } else { 0.0 })
        .collect()
}

/// Pairwise t-tests laid out as an upper-triangular matrix: cell `(i, j)`
/// holds `t_test(runs[i], runs[j])` for `i < j`, everything else is omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestMatrix {
    pub names: Vec<String>,
    pub cells: Vec<Vec<Option<TTest>>>,
}

impl TTestMatrix {
    pub fn populated(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_some()).count()
    }

    pub fn omitted(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_none()).count()
    }

    /// Display table: `t/ p` to two decimals, `⊘` for omitted cells.
    pub fn render(&self) -> String {
        let mut out = String::from("Model");
        for name in &self.names {
            let _ = write!(out, "\t{name}");
        }
        out.push('\n');
        for (name, row) in self.names.iter().zip(&self.cells) {
            out.push_str(name);
            for cell in row {
                match cell {
                    Some(c) => {
                        let _ = write!(out, "\t{}/ {}", round2(c.t), round2(c.p));
                    }
                    None => {
                        let _ = write!(out, "\t{OMITTED}");
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// Machine-readable form: one line per populated cell at full precision.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("row\tcolumn\tt\tp\tdf\n");
        for (i, row) in self.cells.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                if let Some(c) = cell {
                    let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", self.names[i], self.names[j], c.t, c.p, c.df);
                }
            }
        }
        out
    }
}

fn round2(v: f64) -> String {
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let r = (v * 100.0).round() / 100.0;
    // drop the sign of a rounded zero
    let r = if r == 0.0 { 0.0 } else { r };
    let s = format!("{r:.2}");
    let trimmed = s.trim_end_matches('0');
    if trimmed.ends_with('.') {
        format!("{trimmed}0")
    } else {
        trimmed.to_string()
    }
}

pub fn t_test_matrix(runs: &[(String, Vec<f64>)]) -> Result<TTestMatrix, MetricsError> {
    let n = runs.len();
    let mut cells = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            cells[i][j] = Some(t_test(&runs[i].1, &runs[j].1)?);
        }
    }
    Ok(TTestMatrix {
        names: runs.iter().map(|(n, _)| n.clone()).collect(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn preds(scores: &[f64], labels: &[u8]) -> Vec<PredictionResult> {
        scores
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&s, &l))| {
                PredictionResult::new(format!("c{i}"), s, Label::try_from(i64::from(l)).unwrap())
            })
            .collect()
    }

    #[test]
    fn confusion_cases() {
        let c = confusion(&preds(&[0.9, 0.2], &[1, 0]), 0.5).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 0, tn: 1, fn_: 0 });
        let c = confusion(&preds(&[0.9, 0.2], &[0, 1]), 0.5).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 0, fp: 1, tn: 0, fn_: 1 });
        assert_eq!(confusion(&[], 0.5), Err(MetricsError::Empty));
        // strictly greater than the threshold is positive
        let c = confusion(&preds(&[0.5], &[1]), 0.5).unwrap();
        assert_eq!(c.fn_, 1);
    }

    #[test]
    fn symmetric_counts() {
        let c = ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 };
        for m in [c.accuracy(), c.precision(), c.recall(), c.f1()] {
            assert_eq!(m, MetricValue::defined(0.5));
        }
    }

    #[test]
    fn zero_division_is_flagged() {
        let c = ConfusionCounts { tp: 0, fp: 0, tn: 5, fn_: 3 };
        assert!(c.precision().undefined && c.precision().value == 0.0);
        assert!(c.f1().undefined);
        assert!(!c.recall().undefined);
        assert_eq!(c.recall().value, 0.0);
    }

    #[test]
    fn f1_from_table_rows() {
        assert_abs_diff_eq!(f1_from(0.17, 0.70).value, 0.2736, epsilon = 1e-4);
        assert_abs_diff_eq!(f1_from(0.11, 0.98).value, 0.1978, epsilon = 1e-4);
        assert!(f1_from(0.0, 0.0).undefined);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&preds(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0])).value, 1.0);
        assert_eq!(auc(&preds(&[0.4; 5], &[1, 0, 1, 0, 0])).value, 0.5);
        assert_eq!(auc(&preds(&[0.9, 0.8, 0.3], &[1, 0, 1])).value, 0.5);
        assert!(auc(&preds(&[0.1, 0.7], &[1, 1])).undefined);
    }

    #[test]
    fn t_test_identical_samples() {
        let a = [0.1, 0.4, 0.35, 0.8];
        let r = t_test(&a, &a).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        let c = [0.3, 0.3, 0.3];
        let r = t_test(&c, &c).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        assert!(t_test(&[1.0], &a).is_err());
    }

    #[test]
    fn t_test_separated_means() {
        let a: Vec<f64> = (0..30).map(|i| 1e-4 * i as f64).collect();
        let b: Vec<f64> = a.iter().map(|x| 1.0 - x).collect();
        let r = t_test(&a, &b).unwrap();
        assert!(r.t < -100.0);
        assert!(r.p < 1e-12);
        let s = t_test(&b, &a).unwrap();
        assert_eq!(s.t, -r.t);
    }

    #[test]
    fn incomplete_beta_known_values() {
        // I_x(1, 1) = x ; I_x(a, 1) = x^a ; I_0.5(a, a) = 0.5
        assert_abs_diff_eq!(regularized_incomplete_beta(1.0, 1.0, 0.3), 0.3, epsilon = 1e-14);
        assert_abs_diff_eq!(regularized_incomplete_beta(2.5, 1.0, 0.4), 0.4f64.powf(2.5), epsilon = 1e-13);
        assert_abs_diff_eq!(regularized_incomplete_beta(7.0, 7.0, 0.5), 0.5, epsilon = 1e-13);
        // t with 1 df is Cauchy: P(|T| > 1) = 0.5
        assert_abs_diff_eq!(student_t_two_sided(1.0, 1.0), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn ln_gamma_matches_factorials() {
        for n in 1..20u32 {
            let fact: f64 = (1..n).map(f64::from).product();
            assert_abs_diff_eq!(ln_gamma(f64::from(n)), fact.ln(), epsilon = 1e-10);
        }
        assert_abs_diff_eq!(ln_gamma(0.5), std::f64::consts::PI.sqrt().ln(), epsilon = 1e-12);
    }

    #[test]
    fn matrix_layout() {
        let runs: Vec<(String, Vec<f64>)> = (0..6)
            .map(|i| (format!("m{i}"), (0..10).map(|j| ((i * 7 + j * 3) % 11) as f64 / 11.0).collect()))
            .collect();
        let m = t_test_matrix(&runs).unwrap();
        assert_eq!((m.populated(), m.omitted()), (15, 21));
        assert_eq!(m.names, ["m0", "m1", "m2", "m3", "m4", "m5"]);
        let table = m.render();
        let rows: Vec<&str> = table.lines().collect();
        assert_eq!(rows.len(), 7);
        assert!(rows[6].split('\t').skip(1).all(|c| c == OMITTED));
        assert_eq!(m.to_tsv().lines().count(), 16);
        let two = t_test_matrix(&runs[..2]).unwrap();
        assert_eq!(two.populated(), 1);
    }

    #[test]
    fn rounding_for_display() {
        assert_eq!(round2(18.4149), "18.41");
        assert_eq!(round2(-3.3), "-3.3");
        assert_eq!(round2(1e-20), "0.0");
        assert_eq!(round2(0.0012), "0.0");
        assert_eq!(round2(-0.001), "0.0");
    }

    #[test]
    fn metrics_table_columns() {
        let r = evaluate(&preds(&[0.9, 0.1, 0.6], &[1, 0, 0]), 0.5).unwrap();
        let t = metrics_table_tsv([("toy", &r)]);
        assert!(t.starts_with("model\tauc\taccuracy\tprecision\trecall\tf1\n"));
        assert!(t.lines().nth(1).unwrap().starts_with("toy\t1\t"));
    }
}
