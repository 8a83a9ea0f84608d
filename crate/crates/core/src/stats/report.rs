//! Aggregation of evaluation records into a report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    maxstat_threshold, spearman_rho, summarize, wilcoxon_rank_sum, wilcoxon_signed_rank,
    Correlation, StatsError, SummaryStats, TestResult, ThresholdResult,
};
use crate::prompt_sim::{EvalRecord, Grade, PolicyKind, MAX_POINTS};
use crate::volume::Orientation;

/// One experimental arm: records sharing orientation, policy and crop mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Variant {
    pub orientation: Orientation,
    pub policy: PolicyKind,
    pub cropped: bool,
}

impl Variant {
    fn of(r: &EvalRecord) -> Self {
        Variant {
            orientation: r.orientation,
            policy: r.policy,
            cropped: r.cropped,
        }
    }

    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}",
            self.orientation,
            self.policy,
            if self.cropped { "cropped" } else { "full" }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub variant: Variant,
    /// `None` means all grades.
    pub grade: Option<Grade>,
    pub best_iou: SummaryStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCurve {
    pub variant: Variant,
    /// Mean selected IoU after 1..=9 prompts. Sessions that stopped early
    /// contribute their last value to later steps.
    pub mean_iou: Vec<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaAnalysis {
    pub variant: Variant,
    pub correlation: Option<Correlation>,
    pub threshold: Option<ThresholdResult>,
    pub below_threshold: Option<SummaryStats>,
    pub above_threshold: Option<SummaryStats>,
    /// Why a part of the analysis is missing, if it is.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub a: Variant,
    pub b: Variant,
    pub n_pairs: usize,
    pub mean_difference: f64,
    /// `None` when every pair is tied.
    pub test: Option<TestResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeComparison {
    pub variant: Variant,
    pub hgg: SummaryStats,
    pub lgg: SummaryStats,
    pub test: TestResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub variant: Variant,
    pub case_id: String,
    pub slice_index: usize,
    pub gt_area_mm2: f64,
    pub best_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub n_records: usize,
    pub n_failed: usize,
    pub groups: Vec<GroupSummary>,
    pub step_curves: Vec<StepCurve>,
    pub area: Vec<AreaAnalysis>,
    pub paired: Vec<PairedComparison>,
    pub grades: Vec<GradeComparison>,
    pub scatter: Vec<ScatterPoint>,
}

/// Builds the report. Failed records are counted but excluded from every
/// statistic.
pub fn aggregate_report(records: &[EvalRecord]) -> Result<Report, StatsError> {
    if records.is_empty() {
        return Err(StatsError::Empty);
    }
    let ok: Vec<&EvalRecord> = records
        .iter()
        .filter(|r| !r.failed && r.best_iou.is_some())
        .collect();
    let mut by_variant: BTreeMap<Variant, Vec<&EvalRecord>> = BTreeMap::new();
    for r in &ok {
        by_variant.entry(Variant::of(r)).or_default().push(r);
    }
    let best = |r: &EvalRecord| r.best_iou.expect("filtered");

    let mut groups = Vec::new();
    let mut step_curves = Vec::new();
    let mut area = Vec::new();
    let mut grades = Vec::new();
    let mut scatter = Vec::new();

    for (&variant, recs) in &by_variant {
        let all: Vec<f64> = recs.iter().map(|r| best(r)).collect();
        groups.push(GroupSummary {
            variant,
            grade: None,
            best_iou: summarize(&all)?,
        });
        let of_grade = |g: Grade| -> Vec<f64> {
            recs.iter()
                .filter(|r| r.grade == g)
                .map(|r| best(r))
                .collect()
        };
        let (hgg, lgg) = (of_grade(Grade::Hgg), of_grade(Grade::Lgg));
        for (g, v) in [(Grade::Hgg, &hgg), (Grade::Lgg, &lgg)] {
            if !v.is_empty() {
                groups.push(GroupSummary {
                    variant,
                    grade: Some(g),
                    best_iou: summarize(v)?,
                });
            }
        }
        if !hgg.is_empty() && !lgg.is_empty() {
            grades.push(GradeComparison {
                variant,
                hgg: summarize(&hgg)?,
                lgg: summarize(&lgg)?,
                test: wilcoxon_rank_sum(&hgg, &lgg)?,
            });
        }

        step_curves.push(step_curve(variant, recs));

        let areas: Vec<f64> = recs.iter().map(|r| r.gt_area_mm2).collect();
        area.push(area_analysis(variant, &areas, &all));
        scatter.extend(recs.iter().map(|r| ScatterPoint {
            variant,
            case_id: r.case_id.clone(),
            slice_index: r.slice_index,
            gt_area_mm2: r.gt_area_mm2,
            best_iou: best(r),
        }));
    }

    let mut paired = Vec::new();
    let variants: Vec<Variant> = by_variant.keys().copied().collect();
    for (i, a) in variants.iter().enumerate() {
        for b in &variants[i + 1..] {
            if a.orientation != b.orientation {
                continue;
            }
            let index: BTreeMap<(&str, usize), f64> = by_variant[b]
                .iter()
                .map(|r| ((r.case_id.as_str(), r.slice_index), best(r)))
                .collect();
            let diffs: Vec<f64> = by_variant[a]
                .iter()
                .filter_map(|r| {
                    index
                        .get(&(r.case_id.as_str(), r.slice_index))
                        .map(|vb| best(r) - vb)
                })
                .collect();
            if diffs.is_empty() {
                continue;
            }
            let test = match wilcoxon_signed_rank(&diffs) {
                Ok(t) => Some(t),
                Err(StatsError::NoNonzeroPairs) => None,
                Err(e) => return Err(e),
            };
            paired.push(PairedComparison {
                a: *a,
                b: *b,
                n_pairs: diffs.len(),
                mean_difference: diffs.iter().sum::<f64>() / diffs.len() as f64,
                test,
            });
        }
    }

    Ok(Report {
        n_records: records.len(),
        n_failed: records.len() - ok.len(),
        groups,
        step_curves,
        area,
        paired,
        grades,
        scatter,
    })
}

fn step_curve(variant: Variant, recs: &[&EvalRecord]) -> StepCurve {
    let mut sums = [0.0; MAX_POINTS];
    let mut n = 0;
    for r in recs {
        let Some(&last) = r.step_ious.last() else {
            continue;
        };
        n += 1;
        for (s, sum) in sums.iter_mut().enumerate() {
            *sum += r.step_ious.get(s).copied().unwrap_or(last);
        }
    }
    StepCurve {
        variant,
        mean_iou: sums
            .iter()
            .map(|s| if n == 0 { 0.0 } else { s / n as f64 })
            .collect(),
        n,
    }
}

fn area_analysis(variant: Variant, areas: &[f64], ious: &[f64]) -> AreaAnalysis {
    let mut out = AreaAnalysis {
        variant,
        correlation: None,
        threshold: None,
        below_threshold: None,
        above_threshold: None,
        notes: Vec::new(),
    };
    match spearman_rho(areas, ious) {
        Ok(c) => out.correlation = Some(c),
        Err(e) => out.notes.push(format!("spearman: {e}")),
    }
    match maxstat_threshold(areas, ious) {
        Ok(t) => {
            let pick = |above: bool| -> Vec<f64> {
                areas
                    .iter()
                    .zip(ious)
                    .filter(|(a, _)| (**a >= t.threshold) == above)
                    .map(|(_, v)| *v)
                    .collect()
            };
            out.below_threshold = summarize(&pick(false)).ok();
            out.above_threshold = summarize(&pick(true)).ok();
            out.threshold = Some(t);
        }
        Err(e) => out.notes.push(format!("threshold: {e}")),
    }
    out
}

fn fmt_p(p: f64) -> String {
    if p < 0.001 {
        "< 0.001".into()
    } else {
        format!("{p:.3}")
    }
}

fn grade_label(g: Option<Grade>) -> &'static str {
    g.map_or("ALL", Grade::as_str)
}

impl Report {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Evaluation report\n");
        let _ = writeln!(s, "{} records, {} failed.\n", self.n_records, self.n_failed);
        let _ = writeln!(s, "## Best IoU per slice\n");
        let _ = writeln!(s, "| variant | grade | n | mean | median | IQR |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for g in &self.groups {
            let b = &g.best_iou;
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.3} | {:.3} | {:.3} - {:.3} |",
                g.variant.label(),
                grade_label(g.grade),
                b.n,
                b.mean,
                b.median,
                b.q1,
                b.q3
            );
        }

        let _ = writeln!(s, "\n## Mean IoU by number of prompts\n");
        let header: Vec<String> = (1..=MAX_POINTS).map(|i| i.to_string()).collect();
        let _ = writeln!(s, "| variant | {} |", header.join(" | "));
        let _ = writeln!(s, "|---|{}", "---|".repeat(MAX_POINTS));
        for c in &self.step_curves {
            let vals: Vec<String> = c.mean_iou.iter().map(|v| format!("{v:.3}")).collect();
            let _ = writeln!(s, "| {} | {} |", c.variant.label(), vals.join(" | "));
        }

        let _ = writeln!(s, "\n## Tumor area\n");
        for a in &self.area {
            let _ = writeln!(s, "### {}\n", a.variant.label());
            if let Some(c) = &a.correlation {
                let _ = writeln!(
                    s,
                    "- Spearman rho = {:.3} (p {}, n = {})",
                    c.rho,
                    fmt_p(c.p_value),
                    c.n
                );
            }
            if let Some(t) = &a.threshold {
                let _ = writeln!(
                    s,
                    "- area threshold {:.1} mm2, max |Z| = {:.2}, permutation p {}{}",
                    t.threshold,
                    t.max_abs_z,
                    fmt_p(t.p_adjusted),
                    if t.significant {
                        ""
                    } else {
                        " (not significant)"
                    }
                );
            }
            for (name, st) in [
                ("below", &a.below_threshold),
                ("at or above", &a.above_threshold),
            ] {
                if let Some(st) = st {
                    let _ = writeln!(
                        s,
                        "- {name} threshold: mean {:.3}, IQR {:.3} - {:.3}, n = {}",
                        st.mean, st.q1, st.q3, st.n
                    );
                }
            }
            for note in &a.notes {
                let _ = writeln!(s, "- skipped {note}");
            }
            let _ = writeln!(s);
        }

        if !self.paired.is_empty() {
            let _ = writeln!(s, "## Paired comparisons (signed-rank)\n");
            let _ = writeln!(s, "| a | b | pairs | mean diff | p |");
            let _ = writeln!(s, "|---|---|---|---|---|");
            for p in &self.paired {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {:.3} | {} |",
                    p.a.label(),
                    p.b.label(),
                    p.n_pairs,
                    p.mean_difference,
                    p.test.map_or("n/a".into(), |t| fmt_p(t.p_value))
                );
            }
            let _ = writeln!(s);
        }
        if !self.grades.is_empty() {
            let _ = writeln!(s, "## HGG vs LGG (rank-sum)\n");
            let _ = writeln!(s, "| variant | HGG mean | LGG mean | p |");
            let _ = writeln!(s, "|---|---|---|---|");
            for g in &self.grades {
                let _ = writeln!(
                    s,
                    "| {} | {:.3} | {:.3} | {} |",
                    g.variant.label(),
                    g.hgg.mean,
                    g.lgg.mean,
                    fmt_p(g.test.p_value)
                );
            }
        }
        s
    }

    /// Rows for a step-curve CSV, header first.
    pub fn curve_rows(&self) -> Vec<Vec<String>> {
        let mut rows = vec![vec![
            "orientation".to_string(),
            "policy".into(),
            "cropped".into(),
            "step".into(),
            "mean_iou".into(),
            "n".into(),
        ]];
        for c in &self.step_curves {
            for (i, v) in c.mean_iou.iter().enumerate() {
                rows.push(vec![
                    c.variant.orientation.to_string(),
                    c.variant.policy.to_string(),
                    c.variant.cropped.to_string(),
                    (i + 1).to_string(),
                    v.to_string(),
                    c.n.to_string(),
                ]);
            }
        }
        rows
    }

    /// Rows for an area-vs-IoU CSV, header first.
    pub fn scatter_rows(&self) -> Vec<Vec<String>> {
        let mut rows = vec![vec![
            "orientation".to_string(),
            "policy".into(),
            "cropped".into(),
            "case_id".into(),
            "slice_index".into(),
            "gt_area_mm2".into(),
            "best_iou".into(),
        ]];
        for p in &self.scatter {
            rows.push(vec![
                p.variant.orientation.to_string(),
                p.variant.policy.to_string(),
                p.variant.cropped.to_string(),
                p.case_id.clone(),
                p.slice_index.to_string(),
                p.gt_area_mm2.to_string(),
                p.best_iou.to_string(),
            ]);
        }
        rows
    }

    /// Distinct variants present in the report.
    pub fn variants(&self) -> BTreeSet<Variant> {
        self.groups.iter().map(|g| g.variant).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(case: &str, grade: Grade, k: usize, policy: PolicyKind, ious: &[f64]) -> EvalRecord {
        let best = ious.iter().copied().fold(f64::MIN, f64::max);
        EvalRecord {
            case_id: case.into(),
            grade,
            orientation: Orientation::Transversal,
            slice_index: k,
            policy,
            cropped: false,
            gt_area_mm2: 100.0 * (k + 1) as f64,
            best_iou: Some(best),
            best_step: Some(1),
            n_steps: ious.len(),
            step_ious: ious.to_vec(),
            failed: false,
            error: None,
            oracle_seeded: false,
            roi: None,
            final_mask: None,
        }
    }

    #[test]
    fn four_record_fixture() {
        let records = vec![
            rec("a", Grade::Hgg, 0, PolicyKind::Oracle, &[0.5, 0.9]),
            rec("a", Grade::Hgg, 1, PolicyKind::Oracle, &[0.7]),
            rec("b", Grade::Lgg, 0, PolicyKind::Oracle, &[0.2, 0.4, 0.6]),
            rec("b", Grade::Lgg, 1, PolicyKind::Oracle, &[1.0]),
        ];
        let r = aggregate_report(&records).unwrap();
        assert_eq!(r.n_records, 4);
        let all = r.groups.iter().find(|g| g.grade.is_none()).unwrap();
        assert!((all.best_iou.mean - (0.9 + 0.7 + 0.6 + 1.0) / 4.0).abs() < 1e-12);
        let hgg = r
            .groups
            .iter()
            .find(|g| g.grade == Some(Grade::Hgg))
            .unwrap();
        assert!((hgg.best_iou.mean - 0.8).abs() < 1e-12);
        let lgg = r
            .groups
            .iter()
            .find(|g| g.grade == Some(Grade::Lgg))
            .unwrap();
        assert!((lgg.best_iou.mean - 0.8).abs() < 1e-12);
        // carry-forward: step 3 = (0.9 + 0.7 + 0.6 + 1.0) / 4
        let c = &r.step_curves[0];
        assert!((c.mean_iou[0] - (0.5 + 0.7 + 0.2 + 1.0) / 4.0).abs() < 1e-12);
        assert!((c.mean_iou[2] - 0.8).abs() < 1e-12);
        assert!((c.mean_iou[8] - 0.8).abs() < 1e-12);
        assert!(r.paired.is_empty());
        assert_eq!(r.grades.len(), 1);
        assert_eq!(r.area[0].notes.len(), 1, "threshold needs 20 points");
        assert!(r
            .to_markdown()
            .contains("| transversal/oracle/full | ALL | 4 |"));
    }

    #[test]
    fn paired_comparison_matches_slices() {
        let mut records = Vec::new();
        for k in 0..8 {
            records.push(rec("a", Grade::Hgg, k, PolicyKind::Oracle, &[0.9]));
            records.push(rec("a", Grade::Hgg, k, PolicyKind::Suggested, &[0.5]));
        }
        records.push(rec("a", Grade::Hgg, 99, PolicyKind::Suggested, &[0.1]));
        let r = aggregate_report(&records).unwrap();
        assert_eq!(r.paired.len(), 1);
        let p = &r.paired[0];
        assert_eq!(p.n_pairs, 8);
        assert!((p.mean_difference - 0.4).abs() < 1e-12);
        assert!((p.test.unwrap().p_value - 2.0 / 256.0).abs() < 1e-12);
    }

    #[test]
    fn failed_records_are_excluded() {
        let mut f = rec("a", Grade::Hgg, 0, PolicyKind::Oracle, &[]);
        f.failed = true;
        f.best_iou = None;
        let r = aggregate_report(&[
            f.clone(),
            rec("a", Grade::Hgg, 1, PolicyKind::Oracle, &[0.3]),
        ])
        .unwrap();
        assert_eq!((r.n_records, r.n_failed), (2, 1));
        assert_eq!(r.groups[0].best_iou.n, 1);
        assert_eq!(aggregate_report(&[]), Err(StatsError::Empty));
    }
}
