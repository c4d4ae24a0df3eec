//! Localization and prediction metrics: mask IoU with per-class/per-method
//! aggregation, plus AUROC and AUPRC.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::SegmentationMask;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouValue {
    pub iou: f64,
    /// Both masks were empty; `iou` is reported as 0.
    pub degenerate: bool,
}

/// Intersection over union. Two empty masks give 0 with the degenerate flag.
pub fn iou(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<IouValue> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(
            "iou mask pair",
            &[gt.height(), gt.width()],
            &[pred.height(), pred.width()],
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 {
        IouValue {
            iou: 0.0,
            degenerate: true,
        }
    } else {
        IouValue {
            iou: inter as f64 / union as f64,
            degenerate: false,
        }
    })
}

fn check_binary_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("classifier score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Area under the ROC curve via the Mann-Whitney statistic; tied scores
/// share their mid-rank.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        let only = if pos == 0 { "negative" } else { "positive" };
        return Err(Error::InvalidArgument(format!(
            "AUROC needs both classes; all {} labels are {only}",
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Area under the precision-recall curve as the step sum of
/// `precision * Δrecall` over a descending score sweep (ties form one step).
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_binary_inputs(scores, labels)?;
    if pos == 0 {
        return Err(Error::InvalidArgument(format!(
            "AUPRC needs a positive label; all {} labels are negative",
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += precision * (recall - prev_recall);
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

/// One predicted-vs-expert mask comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouRecord {
    pub instance_id: String,
    pub class_id: usize,
    pub method: String,
    pub tau: f64,
    pub iou: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Records in the group, degenerate ones included.
    pub count: usize,
    pub degenerate: usize,
    /// Statistics over the non-degenerate records; `None` when there are none.
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl Summary {
    fn of(records: &[&IouRecord]) -> Self {
        let mut v: Vec<f64> = records
            .iter()
            .filter(|r| !r.degenerate)
            .map(|r| r.iou)
            .collect();
        v.sort_by(f64::total_cmp);
        let stat = |f: &dyn Fn(&[f64]) -> f64| (!v.is_empty()).then(|| f(&v));
        Summary {
            count: records.len(),
            degenerate: records.iter().filter(|r| r.degenerate).count(),
            mean: stat(&|s| s.iter().sum::<f64>() / s.len() as f64),
            median: stat(&|s| quantile(s, 0.5)),
            q1: stat(&|s| quantile(s, 0.25)),
            q3: stat(&|s| quantile(s, 0.75)),
            min: stat(&|s| s[0]),
            max: stat(&|s| s[s.len() - 1]),
        }
    }
}

/// Linear-interpolation quantile of sorted data (position `q * (n - 1)`).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub method: String,
    pub class_id: usize,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrediction {
    pub class_id: usize,
    pub positives: usize,
    pub negatives: usize,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    /// Why the class was left out of the weighted averages.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub excluded: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMetrics {
    pub weighting: String,
    pub per_class: Vec<ClassPrediction>,
    pub weighted_auroc: Option<f64>,
    pub weighted_auprc: Option<f64>,
}

/// Per-class AUROC/AUPRC of `scores[instance][class]`; weighted averages
/// weight each class by its positive count. Classes with a single label
/// value are reported but excluded.
pub fn prediction_metrics(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<PredictionMetrics> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} score rows for {} label rows",
            scores.len(),
            labels.len()
        )));
    }
    let k = scores[0].len();
    if scores
        .iter()
        .chain(labels.iter().map(|_| &scores[0]))
        .any(|r| r.len() != k)
        || labels.iter().any(|r| r.len() != k)
    {
        return Err(Error::InvalidArgument("ragged score or label rows".into()));
    }
    let mut per_class = Vec::with_capacity(k);
    let (mut wr, mut wp, mut wsum) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
        let positives = l.iter().filter(|&&b| b).count();
        let negatives = l.len() - positives;
        let (auroc_v, auprc_v, excluded) = match (auroc(&s, &l), auprc(&s, &l)) {
            (Ok(r), Ok(p)) => (Some(r), Some(p), None),
            (Err(e), p) => (None, p.ok(), Some(format!("class {c}: {e}"))),
            (Ok(r), Err(e)) => (Some(r), None, Some(format!("class {c}: {e}"))),
        };
        if excluded.is_none() {
            let w = positives as f64;
            wr += w * auroc_v.expect("both metrics present");
            wp += w * auprc_v.expect("both metrics present");
            wsum += w;
        }
        per_class.push(ClassPrediction {
            class_id: c,
            positives,
            negatives,
            auroc: auroc_v,
            auprc: auprc_v,
            excluded,
        });
    }
    Ok(PredictionMetrics {
        weighting: "positive-instance count per class".into(),
        per_class,
        weighted_auroc: (wsum > 0.0).then(|| wr / wsum),
        weighted_auprc: (wsum > 0.0).then(|| wp / wsum),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: usize,
    pub overall: Summary,
    pub per_method: Vec<MethodSummary>,
    pub per_class: Vec<GroupSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prediction: Option<PredictionMetrics>,
}

/// Sorts records by (instance, class, method, tau) so reports are stable.
pub fn sort_records(records: &mut [IouRecord]) {
    records.sort_by(|a, b| {
        (&a.instance_id, a.class_id, &a.method)
            .cmp(&(&b.instance_id, b.class_id, &b.method))
            .then(a.tau.total_cmp(&b.tau))
    });
}

/// Per-(method, class) and per-method IoU statistics. Degenerate records are
/// counted but kept out of the statistics.
pub fn aggregate(records: &[IouRecord]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no IoU records to aggregate".into()));
    }
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut groups: BTreeMap<(String, usize), Vec<&IouRecord>> = BTreeMap::new();
    let mut methods: BTreeMap<String, Vec<&IouRecord>> = BTreeMap::new();
    for r in &sorted {
        groups
            .entry((r.method.clone(), r.class_id))
            .or_default()
            .push(r);
        methods.entry(r.method.clone()).or_default().push(r);
    }
    let all: Vec<&IouRecord> = sorted.iter().collect();
    Ok(EvalReport {
        records: sorted.len(),
        overall: Summary::of(&all),
        per_method: methods
            .into_iter()
            .map(|(method, rs)| MethodSummary {
                method,
                summary: Summary::of(&rs),
            })
            .collect(),
        per_class: groups
            .into_iter()
            .map(|((method, class_id), rs)| GroupSummary {
                method,
                class_id,
                summary: Summary::of(&rs),
            })
            .collect(),
        prediction: None,
    })
}

/// `%.9g`-style formatting: nine significant digits, `.` decimal point,
/// trailing zeros trimmed.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let out = if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    };
    trim_zeros(&out).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub const RECORDS_HEADER: &str = "instance_id,class_id,method,tau,iou,degenerate";

pub fn write_records_csv<W: Write>(records: &[IouRecord], mut w: W) -> Result<()> {
    writeln!(w, "{RECORDS_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.instance_id,
            r.class_id,
            r.method,
            format_sig9(r.tau),
            format_sig9(r.iou),
            r.degenerate as u8
        )?;
    }
    w.flush()?;
    Ok(())
}
