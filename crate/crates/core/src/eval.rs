//! Detection metrics over scored pairs: ROC curves, AUC, EER, and the
//! overall / per-consonant / sweep report.
//!
//! Decision rule: a pair is predicted positive iff its score ≥ threshold.
//! The ROC places one operating point per distinct score (ties move FPR
//! and TPR together) plus the all-negative point (0, 0). EER is located
//! by linear interpolation on (FPR − FNR) between adjacent operating
//! points; AUC is the trapezoidal area under TPR vs FPR.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::manifest::SegmentKind;
use crate::scoring::ScoredPair;

/// One ROC operating point for the rule `positive iff score ≥ threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    pub fnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Eval(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Eval(format!("non-finite score {bad}")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Eval(format!(
            "need both classes, have {positives} positive and {negatives} negative"
        )));
    }
    Ok((positives, negatives))
}

/// ROC curve from raw scores. Errors when either class is missing.
pub fn roc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let (positives, negatives) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
        fnr: 1.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // absorb the whole tie group before emitting a point
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // fnr from the integer miss count, not 1−tpr: the former makes
        // mirror symmetry (negate scores, swap labels) exact at vertices
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
            fnr: (positives - tp) as f64 / positives as f64,
        });
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under the ROC.
pub fn auc(curve: &RocCurve) -> f64 {
    let mut area = 0.0;
    for pair in curve.points.windows(2) {
        area += (pair[1].fpr - pair[0].fpr) * (pair[1].tpr + pair[0].tpr) / 2.0;
    }
    area
}

/// AUC straight from scores.
pub fn auc_of(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(auc(&roc(scores, labels)?))
}

/// Equal error rate: the common value of FPR and FNR where they cross,
/// linearly interpolated between adjacent operating points.
pub fn eer(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let curve = roc(scores, labels)?;
    let diff = |p: &RocPoint| p.fpr - p.fnr;
    // FPR−FNR runs from −1 at (0,0) to +1 at (1,1), non-decreasing.
    for pair in curve.points.windows(2) {
        let (d0, d1) = (diff(&pair[0]), diff(&pair[1]));
        if d0 == 0.0 {
            return Ok(pair[0].fpr);
        }
        if d0 < 0.0 && d1 >= 0.0 {
            let alpha = -d0 / (d1 - d0);
            return Ok(pair[0].fpr + alpha * (pair[1].fpr - pair[0].fpr));
        }
    }
    let last = curve.points.last().expect("curve has endpoints");
    Ok(last.fpr)
}

/// EER and AUC of one score column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub eer: f64,
    pub auc: f64,
}

fn metrics(scores: &[f64], labels: &[bool]) -> Result<Metrics> {
    Ok(Metrics {
        eer: eer(scores, labels)?,
        auc: auc_of(scores, labels)?,
    })
}

/// Metrics for the three score columns of the same pair list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KindMetrics {
    pub c: Metrics,
    pub cv: Metrics,
    pub fused: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsonantRow {
    pub consonant: String,
    /// Distinct typical test tokens contributing pairs.
    pub td_tokens: usize,
    /// Distinct substituted test tokens contributing pairs.
    pub atypical_tokens: usize,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    /// Absent when the subset lacks one of the two labels.
    pub metrics: Option<KindMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub weight: f64,
    pub eer: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    /// Which blend weight the table varies: `w`, `lambda_C`, or `lambda_CV`.
    pub parameter: String,
    pub rows: Vec<SweepRow>,
    /// Index of the first row attaining the minimum EER.
    pub best: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub overall: KindMetrics,
    pub td_tokens: usize,
    pub atypical_tokens: usize,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    pub consonants: Vec<ConsonantRow>,
    pub sweeps: Vec<SweepTable>,
}

/// The two rows a token pair contributes, flattened back together.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPairScores {
    pub test_c: String,
    pub test_cv: String,
    pub reference: String,
    pub consonant: String,
    pub cos_c: f64,
    pub bin_c: f64,
    pub comb_c: f64,
    pub cos_cv: f64,
    pub bin_cv: f64,
    pub comb_cv: f64,
    pub fused: f64,
    pub positive: bool,
}

/// Reassemble token pairs from the C/CV row layout `build_eval_pairs`
/// emits (consecutive rows per token pair, C first).
pub fn token_pairs(rows: &[ScoredPair]) -> Result<Vec<TokenPairScores>> {
    if rows.is_empty() {
        return Err(Error::Eval("no scored pairs".into()));
    }
    if rows.len() % 2 != 0 {
        return Err(Error::Eval(format!(
            "{} rows cannot form C/CV token pairs",
            rows.len()
        )));
    }
    let mut out = Vec::with_capacity(rows.len() / 2);
    for chunk in rows.chunks(2) {
        let (c, cv) = (&chunk[0], &chunk[1]);
        let layout = |message: String| {
            Err(Error::Eval(format!(
                "rows for test {} / {}: {message}",
                c.test_id, cv.test_id
            )))
        };
        if c.kind != SegmentKind::C || cv.kind != SegmentKind::Cv {
            return layout("expected a C row followed by a CV row".into());
        }
        if c.reference != cv.reference {
            return layout("references disagree".into());
        }
        if c.positive != cv.positive {
            return layout("labels disagree".into());
        }
        if c.consonant != cv.consonant {
            return layout("consonants disagree".into());
        }
        if c.fused != cv.fused {
            return layout("fused scores disagree".into());
        }
        out.push(TokenPairScores {
            test_c: c.test_id.clone(),
            test_cv: cv.test_id.clone(),
            reference: c.reference.clone(),
            consonant: c.consonant.clone(),
            cos_c: c.cos,
            bin_c: c.binary,
            comb_c: c.combined,
            cos_cv: cv.cos,
            bin_cv: cv.binary,
            comb_cv: cv.combined,
            fused: c.fused,
            positive: c.positive,
        });
    }
    Ok(out)
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Eval("empty sweep grid".into()));
    }
    for &g in grid {
        if !g.is_finite() || !(0.0..=1.0).contains(&g) {
            return Err(Error::Eval(format!("grid weight {g} outside [0, 1]")));
        }
    }
    Ok(())
}

fn sweep(
    parameter: &str,
    pairs: &[TokenPairScores],
    grid: &[f64],
    score_at: impl Fn(&TokenPairScores, f64) -> f64,
) -> Result<SweepTable> {
    let labels: Vec<bool> = pairs.iter().map(|p| p.positive).collect();
    let mut rows = Vec::with_capacity(grid.len());
    for &weight in grid {
        let scores: Vec<f64> = pairs.iter().map(|p| score_at(p, weight)).collect();
        let m = metrics(&scores, &labels)?;
        rows.push(SweepRow {
            weight,
            eer: m.eer,
            auc: m.auc,
        });
    }
    let best = rows
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.eer.total_cmp(&b.eer))
        .map(|(i, _)| i)
        .expect("non-empty grid");
    Ok(SweepTable {
        parameter: parameter.to_string(),
        rows,
        best,
    })
}

/// Fused-score sweep over `w` on already-combined per-kind scores.
pub fn sweep_fusion(pairs: &[TokenPairScores], grid: &[f64]) -> Result<SweepTable> {
    check_grid(grid)?;
    sweep("w", pairs, grid, |p, w| {
        w * p.comb_c + (1.0 - w) * p.comb_cv
    })
}

/// λ sweep for one segment kind, re-blending its cosine and binary
/// columns.
pub fn sweep_lambda(
    pairs: &[TokenPairScores],
    kind: SegmentKind,
    grid: &[f64],
) -> Result<SweepTable> {
    check_grid(grid)?;
    match kind {
        SegmentKind::C => sweep("lambda_C", pairs, grid, |p, l| {
            l * p.cos_c + (1.0 - l) * p.bin_c
        }),
        SegmentKind::Cv => sweep("lambda_CV", pairs, grid, |p, l| {
            l * p.cos_cv + (1.0 - l) * p.bin_cv
        }),
    }
}

fn kind_metrics(pairs: &[&TokenPairScores]) -> Result<KindMetrics> {
    let labels: Vec<bool> = pairs.iter().map(|p| p.positive).collect();
    let col = |f: &dyn Fn(&TokenPairScores) -> f64| -> Vec<f64> {
        pairs.iter().map(|p| f(p)).collect()
    };
    Ok(KindMetrics {
        c: metrics(&col(&|p| p.comb_c), &labels)?,
        cv: metrics(&col(&|p| p.comb_cv), &labels)?,
        fused: metrics(&col(&|p| p.fused), &labels)?,
    })
}

fn token_counts(pairs: &[&TokenPairScores]) -> (usize, usize) {
    let mut td = std::collections::BTreeSet::new();
    let mut atypical = std::collections::BTreeSet::new();
    for p in pairs {
        if p.positive {
            td.insert(p.test_c.as_str());
        } else {
            atypical.insert(p.test_c.as_str());
        }
    }
    (td.len(), atypical.len())
}

/// Full evaluation: overall metrics, per-consonant breakdown, and sweep
/// tables for w, λ_C, and λ_CV over `grid`.
pub fn report(rows: &[ScoredPair], grid: &[f64]) -> Result<EvalReport> {
    check_grid(grid)?;
    let pairs = token_pairs(rows)?;
    let all: Vec<&TokenPairScores> = pairs.iter().collect();
    let overall = kind_metrics(&all)?;
    let (td_tokens, atypical_tokens) = token_counts(&all);
    let positive_pairs = all.iter().filter(|p| p.positive).count();
    let negative_pairs = all.len() - positive_pairs;

    let mut by_consonant: BTreeMap<&str, Vec<&TokenPairScores>> = BTreeMap::new();
    for p in &pairs {
        by_consonant.entry(&p.consonant).or_default().push(p);
    }
    let mut consonants = Vec::with_capacity(by_consonant.len());
    for (consonant, subset) in by_consonant {
        let pos = subset.iter().filter(|p| p.positive).count();
        let neg = subset.len() - pos;
        let (td, atypical) = token_counts(&subset);
        let metrics = if pos > 0 && neg > 0 {
            Some(kind_metrics(&subset)?)
        } else {
            None
        };
        consonants.push(ConsonantRow {
            consonant: consonant.to_string(),
            td_tokens: td,
            atypical_tokens: atypical,
            positive_pairs: pos,
            negative_pairs: neg,
            metrics,
        });
    }

    let sweeps = vec![
        sweep_fusion(&pairs, grid)?,
        sweep_lambda(&pairs, SegmentKind::C, grid)?,
        sweep_lambda(&pairs, SegmentKind::Cv, grid)?,
    ];
    Ok(EvalReport {
        overall,
        td_tokens,
        atypical_tokens,
        positive_pairs,
        negative_pairs,
        consonants,
        sweeps,
    })
}

impl EvalReport {
    /// Aligned plain-text rendering: per-consonant table, overall row,
    /// then the sweep tables (`*` marks the argmin-EER weight).
    pub fn text_table(&self) -> String {
        let fmt = |m: Option<Metrics>, pick: &dyn Fn(Metrics) -> f64| match m {
            Some(m) => format!("{:.4}", pick(m)),
            None => "n/a".to_string(),
        };
        let mut rows: Vec<[String; 9]> = Vec::new();
        for c in &self.consonants {
            let m = c.metrics;
            rows.push([
                c.consonant.clone(),
                c.td_tokens.to_string(),
                c.atypical_tokens.to_string(),
                fmt(m.map(|m| m.c), &|m| m.eer),
                fmt(m.map(|m| m.cv), &|m| m.eer),
                fmt(m.map(|m| m.fused), &|m| m.eer),
                fmt(m.map(|m| m.c), &|m| m.auc),
                fmt(m.map(|m| m.cv), &|m| m.auc),
                fmt(m.map(|m| m.fused), &|m| m.auc),
            ]);
        }
        rows.push([
            "ALL".to_string(),
            self.td_tokens.to_string(),
            self.atypical_tokens.to_string(),
            fmt(Some(self.overall.c), &|m| m.eer),
            fmt(Some(self.overall.cv), &|m| m.eer),
            fmt(Some(self.overall.fused), &|m| m.eer),
            fmt(Some(self.overall.c), &|m| m.auc),
            fmt(Some(self.overall.cv), &|m| m.auc),
            fmt(Some(self.overall.fused), &|m| m.auc),
        ]);

        let header = [
            "Consonant",
            "TD",
            "Atypical",
            "EER C",
            "EER CV",
            "EER C+CV",
            "AUC C",
            "AUC CV",
            "AUC C+CV",
        ];
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row.iter()) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let fmt_row = |cells: &[String]| -> String {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let header_cells: Vec<String> = header.iter().map(|s| s.to_string()).collect();
        out.push_str(&fmt_row(&header_cells));
        out.push('\n');
        for row in &rows {
            out.push_str(&fmt_row(row));
            out.push('\n');
        }
        out.push_str(&format!(
            "pairs: {} positive, {} negative\n",
            self.positive_pairs, self.negative_pairs
        ));

        for table in &self.sweeps {
            out.push('\n');
            out.push_str(&format!("sweep over {}\n", table.parameter));
            out.push_str(&format!(
                "{:>6}  {:>8}  {:>8}\n",
                table.parameter, "EER", "AUC"
            ));
            for (i, row) in table.rows.iter().enumerate() {
                let flag = if i == table.best { " *" } else { "" };
                out.push_str(&format!(
                    "{:>6.2}  {:>8.4}  {:>8.4}{flag}\n",
                    row.weight, row.eer, row.auc
                ));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}
