//! Ranking metrics over per-segment class scores: recall@K and its
//! class-averaged variant, precision@K, and macro-averaged precision.
//!
//! Ranking is total and deterministic: ties break toward the lower class
//! index within a segment, and toward the earlier segment when ranking
//! segments for a class.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{DllError, Result};

/// One evaluated segment: the classifier's score per class.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedPrediction {
    pub id: String,
    pub scores: Vec<f64>,
}

/// Ground truth per segment id.
pub type TruthMap = BTreeMap<String, BTreeSet<usize>>;

/// Indices of the `k` highest scores, ties toward the lower index. `k` larger
/// than the class count returns every index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores validated finite")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

fn validate(preds: &[RankedPrediction], truths: &TruthMap, n_p: usize) -> Result<()> {
    if preds.is_empty() {
        return Err(DllError::DegenerateMetricInput("no predictions".into()));
    }
    let mut ids = BTreeSet::new();
    for p in preds {
        if p.scores.len() != n_p {
            return Err(DllError::ShapeMismatch {
                op: "metrics".into(),
                detail: format!(
                    "segment '{}' has {} scores, expected {n_p}",
                    p.id,
                    p.scores.len()
                ),
            });
        }
        if p.scores.iter().any(|v| !v.is_finite()) {
            return Err(DllError::DegenerateMetricInput(format!(
                "segment '{}' has a non-finite score",
                p.id
            )));
        }
        if !ids.insert(p.id.as_str()) {
            return Err(DllError::DegenerateMetricInput(format!(
                "duplicate segment id '{}'",
                p.id
            )));
        }
        match truths.get(&p.id) {
            None => {
                return Err(DllError::DegenerateMetricInput(format!(
                    "segment '{}' has no ground truth",
                    p.id
                )))
            }
            Some(t) => {
                if t.is_empty() {
                    return Err(DllError::DegenerateMetricInput(format!(
                        "segment '{}' has an empty truth set",
                        p.id
                    )));
                }
                if let Some(&c) = t.iter().find(|&&c| c >= n_p) {
                    return Err(DllError::DegenerateMetricInput(format!(
                        "segment '{}' truth class {c} out of range for {n_p}",
                        p.id
                    )));
                }
            }
        }
    }
    if let Some(extra) = truths.keys().find(|id| !ids.contains(id.as_str())) {
        return Err(DllError::DegenerateMetricInput(format!(
            "truth for unknown segment '{extra}'"
        )));
    }
    Ok(())
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(DllError::InvalidArgument {
            op: "metrics".into(),
            detail: "k must be at least 1".into(),
        });
    }
    Ok(())
}

/// Fraction of (segment, true class) pairs whose class ranks in the top `k`.
pub fn recall_at_k(preds: &[RankedPrediction], truths: &TruthMap, k: usize) -> Result<f64> {
    check_k(k)?;
    let n_p = preds.first().map_or(0, |p| p.scores.len());
    validate(preds, truths, n_p)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for p in preds {
        let top: BTreeSet<usize> = top_k_indices(&p.scores, k).into_iter().collect();
        let t = &truths[&p.id];
        total += t.len();
        hits += t.iter().filter(|c| top.contains(c)).count();
    }
    Ok(hits as f64 / total as f64)
}

/// Per-class hit and truth-pair counts at `k`, indexed by class.
fn class_hits(
    preds: &[RankedPrediction],
    truths: &TruthMap,
    n_p: usize,
    k: usize,
) -> (Vec<usize>, Vec<usize>) {
    let mut hits = vec![0usize; n_p];
    let mut totals = vec![0usize; n_p];
    for p in preds {
        let top: BTreeSet<usize> = top_k_indices(&p.scores, k).into_iter().collect();
        for &c in &truths[&p.id] {
            totals[c] += 1;
            if top.contains(&c) {
                hits[c] += 1;
            }
        }
    }
    (hits, totals)
}

/// Recall@k computed per class and averaged over the classes that appear in
/// the ground truth at least once.
pub fn mean_recall_at_k(preds: &[RankedPrediction], truths: &TruthMap, k: usize) -> Result<f64> {
    check_k(k)?;
    let n_p = preds.first().map_or(0, |p| p.scores.len());
    validate(preds, truths, n_p)?;
    let (hits, totals) = class_hits(preds, truths, n_p, k);
    let mut sum = 0.0;
    let mut classes = 0usize;
    for c in 0..n_p {
        if totals[c] > 0 {
            sum += hits[c] as f64 / totals[c] as f64;
            classes += 1;
        }
    }
    if classes == 0 {
        return Err(DllError::DegenerateMetricInput(
            "no class appears in the ground truth".into(),
        ));
    }
    Ok(sum / classes as f64)
}

/// Mean over segments of the fraction of the top `k` that is correct.
pub fn precision_at_k(preds: &[RankedPrediction], truths: &TruthMap, k: usize) -> Result<f64> {
    check_k(k)?;
    let n_p = preds.first().map_or(0, |p| p.scores.len());
    validate(preds, truths, n_p)?;
    let mut sum = 0.0;
    for p in preds {
        let top = top_k_indices(&p.scores, k);
        let t = &truths[&p.id];
        let correct = top.iter().filter(|c| t.contains(c)).count();
        sum += correct as f64 / k as f64;
    }
    Ok(sum / preds.len() as f64)
}

/// Average precision of one class over all segments: precision at each
/// positive's rank, averaged over positives. Segments are ranked by score,
/// ties toward the earlier segment. `None` if the class has no positives.
fn average_precision(preds: &[RankedPrediction], truths: &TruthMap, c: usize) -> Option<f64> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b].scores[c]
            .partial_cmp(&preds[a].scores[c])
            .expect("scores validated finite")
            .then(a.cmp(&b))
    });
    let mut positives_seen = 0usize;
    let mut sum = 0.0;
    for (rank0, &i) in order.iter().enumerate() {
        if truths[&preds[i].id].contains(&c) {
            positives_seen += 1;
            sum += positives_seen as f64 / (rank0 + 1) as f64;
        }
    }
    (positives_seen > 0).then(|| sum / positives_seen as f64)
}

/// Mean of per-class average precision over the classes with positives.
pub fn macro_average_precision(preds: &[RankedPrediction], truths: &TruthMap) -> Result<f64> {
    let n_p = preds.first().map_or(0, |p| p.scores.len());
    validate(preds, truths, n_p)?;
    let mut sum = 0.0;
    let mut classes = 0usize;
    for c in 0..n_p {
        if let Some(ap) = average_precision(preds, truths, c) {
            sum += ap;
            classes += 1;
        }
    }
    if classes == 0 {
        return Err(DllError::DegenerateMetricInput(
            "no class appears in the ground truth".into(),
        ));
    }
    Ok(sum / classes as f64)
}

/// Per-class slice of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub index: usize,
    /// Number of (segment, truth) pairs naming this class.
    pub truth_count: usize,
    /// Recall at each configured k, `NaN`-free; classes with no truths get an
    /// empty vector.
    pub recall: Vec<f64>,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Ascending, deduplicated.
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub mean_recall: Vec<f64>,
    pub precision: Vec<f64>,
    /// Mean of recall and mean-recall at the two largest ks.
    pub mean: f64,
    pub macro_ap: f64,
    pub per_class: Vec<ClassReport>,
}

/// The summary column: the arithmetic mean of recall and mean-recall values
/// taken at the two largest configured ks.
pub fn mean_metric(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Compute every metric at every `k`. `ks` must be non-empty.
pub fn compute_report(
    preds: &[RankedPrediction],
    truths: &TruthMap,
    ks: &[usize],
) -> Result<MetricsReport> {
    if ks.is_empty() {
        return Err(DllError::InvalidArgument {
            op: "metrics".into(),
            detail: "no ks configured".into(),
        });
    }
    let mut ks: Vec<usize> = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    check_k(ks[0])?;
    let n_p = preds.first().map_or(0, |p| p.scores.len());
    validate(preds, truths, n_p)?;

    let mut recall = Vec::with_capacity(ks.len());
    let mut mean_recall = Vec::with_capacity(ks.len());
    let mut precision = Vec::with_capacity(ks.len());
    let mut per_class: Vec<ClassReport> = (0..n_p)
        .map(|c| ClassReport {
            index: c,
            truth_count: 0,
            recall: Vec::new(),
            ap: average_precision(preds, truths, c),
        })
        .collect();
    for (ki, &k) in ks.iter().enumerate() {
        recall.push(recall_at_k(preds, truths, k)?);
        mean_recall.push(mean_recall_at_k(preds, truths, k)?);
        precision.push(precision_at_k(preds, truths, k)?);
        let (hits, totals) = class_hits(preds, truths, n_p, k);
        for c in 0..n_p {
            if ki == 0 {
                per_class[c].truth_count = totals[c];
            }
            if totals[c] > 0 {
                per_class[c].recall.push(hits[c] as f64 / totals[c] as f64);
            }
        }
    }

    let top2 = &ks[ks.len().saturating_sub(2)..];
    let mut summary = Vec::with_capacity(2 * top2.len());
    for &k in top2 {
        let i = ks.iter().position(|&x| x == k).expect("k from ks");
        summary.push(recall[i]);
        summary.push(mean_recall[i]);
    }
    let mean = mean_metric(&summary);

    let macro_ap = macro_average_precision(preds, truths)?;
    Ok(MetricsReport {
        ks,
        recall,
        mean_recall,
        precision,
        mean,
        macro_ap,
        per_class,
    })
}

/// Mean per-k recall over a subset of classes (those with truths), for
/// head/tail breakdowns.
pub fn subset_mean_recall(report: &MetricsReport, classes: &[usize]) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; report.ks.len()];
    let mut counted = 0usize;
    for &c in classes {
        let Some(cls) = report.per_class.get(c) else {
            return Err(DllError::InvalidArgument {
                op: "subset_mean_recall".into(),
                detail: format!("class {c} out of range"),
            });
        };
        if cls.truth_count > 0 {
            counted += 1;
            for (i, &r) in cls.recall.iter().enumerate() {
                sums[i] += r;
            }
        }
    }
    if counted == 0 {
        return Err(DllError::DegenerateMetricInput(
            "no class in the subset appears in the ground truth".into(),
        ));
    }
    Ok(sums.into_iter().map(|s| s / counted as f64).collect())
}

/// Header for the long-format metrics CSV.
pub const METRICS_CSV_HEADER: &str = "run,mode,metric,k,value";

/// Append one report's rows to a long-format CSV body. The mean and macro-AP
/// rows leave the k column empty.
pub fn append_metrics_rows(out: &mut String, run: &str, mode: &str, report: &MetricsReport) {
    for (i, &k) in report.ks.iter().enumerate() {
        let _ = writeln!(out, "{run},{mode},recall,{k},{}", report.recall[i]);
        let _ = writeln!(out, "{run},{mode},mean_recall,{k},{}", report.mean_recall[i]);
        let _ = writeln!(out, "{run},{mode},precision,{k},{}", report.precision[i]);
    }
    let _ = writeln!(out, "{run},{mode},mean,,{}", report.mean);
    let _ = writeln!(out, "{run},{mode},macro_ap,,{}", report.macro_ap);
}

/// Long-format CSV with a single report.
pub fn metrics_csv(run: &str, mode: &str, report: &MetricsReport) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    append_metrics_rows(&mut out, run, mode, report);
    out
}

/// Wide per-class CSV: one row per class, one recall column per k.
pub fn per_class_csv(
    run: &str,
    mode: &str,
    report: &MetricsReport,
    class_names: &[String],
    train_frequencies: &[u64],
) -> Result<String> {
    if class_names.len() != report.per_class.len()
        || train_frequencies.len() != report.per_class.len()
    {
        return Err(DllError::ShapeMismatch {
            op: "per_class_csv".into(),
            detail: format!(
                "{} classes, {} names, {} frequencies",
                report.per_class.len(),
                class_names.len(),
                train_frequencies.len()
            ),
        });
    }
    let mut out = String::from("run,mode,class_index,class_name,train_frequency,truth_count,ap");
    for &k in &report.ks {
        let _ = write!(out, ",recall_at_{k}");
    }
    out.push('\n');
    for (c, cls) in report.per_class.iter().enumerate() {
        let _ = write!(
            out,
            "{run},{mode},{c},{},{},{}",
            class_names[c], train_frequencies[c], cls.truth_count
        );
        match cls.ap {
            Some(ap) => {
                let _ = write!(out, ",{ap}");
            }
            None => out.push(','),
        }
        for i in 0..report.ks.len() {
            match cls.recall.get(i) {
                Some(r) => {
                    let _ = write!(out, ",{r}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn pred(id: &str, scores: &[f64]) -> RankedPrediction {
        RankedPrediction {
            id: id.into(),
            scores: scores.to_vec(),
        }
    }

    fn truth(entries: &[(&str, &[usize])]) -> TruthMap {
        entries
            .iter()
            .map(|(id, cs)| (id.to_string(), cs.iter().copied().collect()))
            .collect()
    }

    /// Two segments, four classes, worked by hand.
    fn example() -> (Vec<RankedPrediction>, TruthMap) {
        let preds = vec![
            pred("a", &[0.9, 0.8, 0.1, 0.3]),
            pred("b", &[0.2, 0.9, 0.4, 0.4]),
        ];
        let truths = truth(&[("a", &[0, 3]), ("b", &[2])]);
        (preds, truths)
    }

    #[test]
    fn top_k_breaks_ties_toward_lower_index() {
        assert_eq!(top_k_indices(&[0.5, 0.5, 0.5], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.2, 0.9, 0.4, 0.4], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.1, 0.2], 10), vec![1, 0]);
    }

    #[test]
    fn hand_worked_example() {
        let (preds, truths) = example();
        assert!((recall_at_k(&preds, &truths, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((recall_at_k(&preds, &truths, 2).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((mean_recall_at_k(&preds, &truths, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((mean_recall_at_k(&preds, &truths, 2).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((precision_at_k(&preds, &truths, 2).unwrap() - 0.5).abs() < 1e-12);
        assert!((macro_average_precision(&preds, &truths).unwrap() - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn report_mean_uses_two_largest_ks() {
        let (preds, truths) = example();
        let report = compute_report(&preds, &truths, &[2, 1]).unwrap();
        assert_eq!(report.ks, vec![1, 2]);
        assert!((report.mean - 0.5).abs() < 1e-12);
        // Class 1 never appears in truth: excluded from AP, empty recall.
        assert_eq!(report.per_class[1].truth_count, 0);
        assert!(report.per_class[1].ap.is_none());
        assert!(report.per_class[1].recall.is_empty());
    }

    #[test]
    fn single_k_mean_degenerates_to_that_k() {
        let (preds, truths) = example();
        let report = compute_report(&preds, &truths, &[2]).unwrap();
        let want = (report.recall[0] + report.mean_recall[0]) / 2.0;
        assert!((report.mean - want).abs() < 1e-12);
    }

    #[test]
    fn subset_mean_recall_splits_head_and_tail() {
        let (preds, truths) = example();
        let report = compute_report(&preds, &truths, &[1, 2]).unwrap();
        // Classes 0 and 2 are always recovered at k=2; class 3 never is.
        let head = subset_mean_recall(&report, &[0, 2]).unwrap();
        assert_eq!(head[1], 1.0);
        let tail = subset_mean_recall(&report, &[3]).unwrap();
        assert_eq!(tail[1], 0.0);
        // Subset with no truths at all is an error, not a zero.
        assert!(subset_mean_recall(&report, &[1]).is_err());
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let (preds, truths) = example();
        assert!(recall_at_k(&[], &truths, 1).is_err());
        assert!(recall_at_k(&preds, &truths, 0).is_err());

        let missing = truth(&[("a", &[0])]);
        assert!(recall_at_k(&preds, &missing, 1).is_err());

        let extra = truth(&[("a", &[0]), ("b", &[1]), ("c", &[2])]);
        assert!(recall_at_k(&preds, &extra, 1).is_err());

        let empty_set = truth(&[("a", &[0]), ("b", &[])]);
        assert!(recall_at_k(&preds, &empty_set, 1).is_err());

        let bad = vec![pred("a", &[f64::NAN, 0.0, 0.0, 0.0])];
        let t = truth(&[("a", &[0])]);
        assert!(recall_at_k(&bad, &t, 1).is_err());

        let dup = vec![pred("a", &[0.1; 4]), pred("a", &[0.1; 4])];
        let t = truth(&[("a", &[0])]);
        assert!(recall_at_k(&dup, &t, 1).is_err());
    }

    #[test]
    fn csv_round_trips_values_exactly() {
        let (preds, truths) = example();
        let report = compute_report(&preds, &truths, &[1, 2]).unwrap();
        let csv = metrics_csv("run0", "dll", &report);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "run,mode,metric,k,value");
        let recall1 = lines.next().unwrap();
        assert!(recall1.starts_with("run0,dll,recall,1,"));
        let v: f64 = recall1.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(v, report.recall[0]);
        assert!(csv.contains("run0,dll,mean,,"));
        assert!(csv.contains("run0,dll,macro_ap,,"));
    }

    #[test]
    fn per_class_csv_has_one_row_per_class() {
        let (preds, truths) = example();
        let report = compute_report(&preds, &truths, &[1, 2]).unwrap();
        let names: Vec<String> = (0..4).map(|c| format!("p{c:02}")).collect();
        let csv = per_class_csv("run0", "dll", &report, &names, &[40, 30, 20, 10]).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().next().unwrap().ends_with("recall_at_1,recall_at_2"));
        // The truth-less class keeps its cells empty rather than faking zeros.
        let class1 = csv.lines().nth(2).unwrap();
        assert!(class1.starts_with("run0,dll,1,p01,30,0,"));
        assert!(class1.ends_with(",,"));
    }

    /// Rank by counting rather than sorting: rank of class `c` is the number
    /// of classes scoring strictly higher plus earlier-indexed ties.
    fn counting_rank(scores: &[f64], c: usize) -> usize {
        let mut r = 0;
        for (j, &s) in scores.iter().enumerate() {
            if s > scores[c] || (s == scores[c] && j < c) {
                r += 1;
            }
        }
        r
    }

    #[test]
    fn recall_matches_counting_rank_oracle() {
        let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..200 {
            let n_p = rng.random_range(2..=6);
            let n_seg = rng.random_range(1..=4);
            let mut preds = Vec::new();
            let mut truths = TruthMap::new();
            for i in 0..n_seg {
                let scores: Vec<f64> = (0..n_p).map(|_| grid[rng.random_range(0..5)]).collect();
                let mut t = BTreeSet::new();
                t.insert(rng.random_range(0..n_p));
                for c in 0..n_p {
                    if rng.random_range(0.0..1.0) < 0.3 {
                        t.insert(c);
                    }
                }
                let id = format!("s{i}");
                truths.insert(id.clone(), t);
                preds.push(RankedPrediction { id, scores });
            }
            for k in 1..=n_p {
                let got = recall_at_k(&preds, &truths, k).unwrap();
                let mut hits = 0;
                let mut total = 0;
                for p in &preds {
                    for &c in &truths[&p.id] {
                        total += 1;
                        if counting_rank(&p.scores, c) < k {
                            hits += 1;
                        }
                    }
                }
                let want = hits as f64 / total as f64;
                assert!((got - want).abs() < 1e-12, "k={k}: {got} vs {want}");

                let gotp = precision_at_k(&preds, &truths, k).unwrap();
                let mut psum = 0.0;
                for p in &preds {
                    let correct = truths[&p.id]
                        .iter()
                        .filter(|&&c| counting_rank(&p.scores, c) < k)
                        .count();
                    psum += correct as f64 / k as f64;
                }
                let wantp = psum / preds.len() as f64;
                assert!((gotp - wantp).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn macro_ap_matches_counting_rank_oracle() {
        let grid = [0.0, 0.5, 1.0];
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n_p = rng.random_range(2..=5);
            let n_seg = rng.random_range(1..=4);
            let mut preds = Vec::new();
            let mut truths = TruthMap::new();
            for i in 0..n_seg {
                let scores: Vec<f64> = (0..n_p).map(|_| grid[rng.random_range(0..3)]).collect();
                let mut t = BTreeSet::new();
                t.insert(rng.random_range(0..n_p));
                let id = format!("s{i}");
                truths.insert(id.clone(), t);
                preds.push(RankedPrediction { id, scores });
            }
            let got = macro_average_precision(&preds, &truths).unwrap();

            // Oracle: per class, rank segments by (score desc, input order).
            let mut ap_sum = 0.0;
            let mut ap_classes = 0;
            for c in 0..n_p {
                let rank_of = |i: usize| -> usize {
                    let mut r = 0;
                    for j in 0..preds.len() {
                        let (si, sj) = (preds[i].scores[c], preds[j].scores[c]);
                        if sj > si || (sj == si && j < i) {
                            r += 1;
                        }
                    }
                    r
                };
                let positives: Vec<usize> = (0..preds.len())
                    .filter(|&i| truths[&preds[i].id].contains(&c))
                    .collect();
                if positives.is_empty() {
                    continue;
                }
                let mut ap = 0.0;
                for &i in &positives {
                    let ri = rank_of(i);
                    let ahead = positives.iter().filter(|&&p| rank_of(p) <= ri).count();
                    ap += ahead as f64 / (ri + 1) as f64;
                }
                ap_sum += ap / positives.len() as f64;
                ap_classes += 1;
            }
            let want = ap_sum / ap_classes as f64;
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}
