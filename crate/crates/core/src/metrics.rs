//! Agreement and accuracy statistics over annotation snapshots.
//!
//! Every function here is pure; the store and report layers assemble the
//! snapshots.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label {label:?} is not in the class set {classes:?}")]
    UnknownLabel { label: String, classes: Vec<String> },
}

/// Region counts for one annotator.
///
/// `tm` is the number of decided model proposals, `nt` those the annotator
/// rejected, and `tp` every region the annotator considers tumor (accepted
/// proposals plus manual tumor regions).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegionTally {
    pub tm: u64,
    pub nt: u64,
    pub tp: u64,
}

impl RegionTally {
    pub fn is_consistent(&self) -> bool {
        self.nt <= self.tm && self.tp >= self.tm - self.nt
    }
}

impl std::ops::AddAssign for RegionTally {
    fn add_assign(&mut self, rhs: Self) {
        self.tm += rhs.tm;
        self.nt += rhs.nt;
        self.tp += rhs.tp;
    }
}

/// Share of model regions the annotator confirmed: (TM − NT) / TM.
pub fn recall_t(t: &RegionTally) -> Result<f64, MetricError> {
    if t.tm == 0 {
        return Err(MetricError::Undefined("Recall_T needs TM > 0".into()));
    }
    Ok(t.tm.saturating_sub(t.nt) as f64 / t.tm as f64)
}

/// Share of annotator tumor regions that the model proposed: (TM − NT) / TP.
pub fn recall_nt(t: &RegionTally) -> Result<f64, MetricError> {
    if t.tp == 0 {
        return Err(MetricError::Undefined("Recall_NT needs TP > 0".into()));
    }
    Ok(t.tm.saturating_sub(t.nt) as f64 / t.tp as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub f1: f64,
    /// `None` when no scores were given or ground truth has one class.
    pub auc: Option<f64>,
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::Undefined("accuracy of an empty set".into()));
    }
    Ok(pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64)
}

fn f1_for_class(pred: &[usize], truth: &[usize], class: usize) -> f64 {
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == class, t == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// F1 of `positive` (binary case).
pub fn binary_f1(pred: &[usize], truth: &[usize], positive: usize) -> Result<f64, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    Ok(f1_for_class(pred, truth, positive))
}

/// Unweighted mean of per-class F1 over classes present in either list.
pub fn macro_f1(pred: &[usize], truth: &[usize]) -> Result<f64, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    let classes: BTreeSet<usize> = pred.iter().chain(truth).copied().collect();
    if classes.is_empty() {
        return Err(MetricError::Undefined("F1 of an empty set".into()));
    }
    Ok(classes.iter().map(|&c| f1_for_class(pred, truth, c)).sum::<f64>() / classes.len() as f64)
}

/// ROC AUC through the Mann–Whitney U statistic with mid-ranks, so tied
/// scores count one half.
pub fn auc(scores: &[f64], truth: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != truth.len() {
        return Err(MetricError::LengthMismatch(scores.len(), truth.len()));
    }
    let n_pos = truth.iter().filter(|t| **t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Undefined("AUC needs both classes in the ground truth".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if truth[k] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// ACC, F1 and AUC. With `class_count == 2` F1 is taken on class 1 and
/// `scores` (class-1 scores) yield the AUC; otherwise F1 is macro-averaged
/// and AUC is not computed.
pub fn classification_metrics(
    pred: &[usize],
    truth: &[usize],
    scores: Option<&[f64]>,
    class_count: usize,
) -> Result<ClassificationReport, MetricError> {
    let accuracy = accuracy(pred, truth)?;
    let f1 = if class_count == 2 {
        binary_f1(pred, truth, 1)?
    } else {
        macro_f1(pred, truth)?
    };
    let auc = match scores {
        Some(s) if class_count == 2 => {
            let positives: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
            match auc(s, &positives) {
                Ok(v) => Some(v),
                Err(MetricError::Undefined(msg)) => {
                    log::warn!("{msg}");
                    None
                }
                Err(e) => return Err(e),
            }
        }
        _ => None,
    };
    Ok(ClassificationReport { accuracy, f1, auc })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    /// Row = expert label, column = annotator label.
    pub counts: Vec<Vec<u64>>,
    pub normalized: Vec<Vec<f64>>,
}

fn class_index(classes: &[String], label: &str) -> Result<usize, MetricError> {
    classes
        .iter()
        .position(|c| c == label)
        .ok_or_else(|| MetricError::UnknownLabel {
            label: label.to_string(),
            classes: classes.to_vec(),
        })
}

pub fn confusion<S: AsRef<str>>(
    expert: &[S],
    annotator: &[S],
    classes: &[String],
) -> Result<ConfusionMatrix, MetricError> {
    if expert.len() != annotator.len() {
        return Err(MetricError::LengthMismatch(expert.len(), annotator.len()));
    }
    let c = classes.len();
    let mut counts = vec![vec![0u64; c]; c];
    for (e, a) in expert.iter().zip(annotator) {
        let i = class_index(classes, e.as_ref())?;
        let j = class_index(classes, a.as_ref())?;
        counts[i][j] += 1;
    }
    let normalized = counts
        .iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            row.iter()
                .map(|&v| if total == 0 { 0.0 } else { v as f64 / total as f64 })
                .collect()
        })
        .collect();
    Ok(ConfusionMatrix {
        classes: classes.to_vec(),
        counts,
        normalized,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapCount {
    pub class: String,
    pub expert_count: u64,
    /// Mean over annotators.
    pub annotator_count: f64,
    /// Mean over annotators of slides where annotator and expert both chose `class`.
    pub intersection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub counts: Vec<OverlapCount>,
    /// Slides in the dense set (labeled by the expert and every annotator).
    pub dense_slides: Vec<String>,
    /// Slides dropped because at least one label was missing.
    pub excluded_slides: Vec<String>,
}

/// Per-class WSI identification overlap on the dense set.
///
/// `expert` and each entry of `annotators` map slide → class.
pub fn overlap_report(
    expert: &BTreeMap<String, String>,
    annotators: &[BTreeMap<String, String>],
    classes: &[String],
) -> Result<OverlapReport, MetricError> {
    let mut all_slides: BTreeSet<&String> = expert.keys().collect();
    for a in annotators {
        all_slides.extend(a.keys());
    }
    let (mut dense, mut excluded) = (Vec::new(), Vec::new());
    for slide in all_slides {
        if expert.contains_key(slide) && annotators.iter().all(|a| a.contains_key(slide)) {
            dense.push(slide.clone());
        } else {
            excluded.push(slide.clone());
        }
    }
    if !excluded.is_empty() {
        log::warn!("{} slides lack a label from every annotator and were excluded", excluded.len());
    }
    for slide in &dense {
        class_index(classes, &expert[slide])?;
        for a in annotators {
            class_index(classes, &a[slide])?;
        }
    }
    let n = annotators.len().max(1) as f64;
    let counts = classes
        .iter()
        .map(|class| {
            let expert_count = dense.iter().filter(|s| &expert[*s] == class).count() as u64;
            let (mut ann, mut inter) = (0u64, 0u64);
            for a in annotators {
                for s in &dense {
                    if &a[s] == class {
                        ann += 1;
                        if &expert[s] == class {
                            inter += 1;
                        }
                    }
                }
            }
            OverlapCount {
                class: class.clone(),
                expert_count,
                annotator_count: ann as f64 / n,
                intersection: inter as f64 / n,
            }
        })
        .collect();
    Ok(OverlapReport {
        counts,
        dense_slides: dense,
        excluded_slides: excluded,
    })
}

/// WSI-level labels for one batch: annotator → slide → class.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchLabels {
    pub batch: String,
    pub slides: Vec<String>,
    pub labels: BTreeMap<String, BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchScore {
    pub batch: String,
    /// `None` when the annotator labeled no expert-labeled slide in the batch.
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub slides: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorComparison {
    pub annotator: String,
    pub batches: Vec<BatchScore>,
}

/// ACC and macro-F1 of each annotator's WSI labels against the expert, per batch.
pub fn batch_comparison(
    expert: &BTreeMap<String, String>,
    batches: &[BatchLabels],
    annotators: &[String],
    classes: &[String],
) -> Result<Vec<AnnotatorComparison>, MetricError> {
    annotators
        .iter()
        .map(|annotator| {
            let scores = batches
                .iter()
                .map(|b| {
                    let mut pred = Vec::new();
                    let mut truth = Vec::new();
                    if let Some(labels) = b.labels.get(annotator) {
                        for slide in &b.slides {
                            if let (Some(a), Some(e)) = (labels.get(slide), expert.get(slide)) {
                                pred.push(class_index(classes, a)?);
                                truth.push(class_index(classes, e)?);
                            }
                        }
                    }
                    if pred.is_empty() {
                        return Ok(BatchScore {
                            batch: b.batch.clone(),
                            accuracy: None,
                            f1: None,
                            slides: 0,
                        });
                    }
                    Ok(BatchScore {
                        batch: b.batch.clone(),
                        accuracy: Some(accuracy(&pred, &truth)?),
                        f1: Some(macro_f1(&pred, &truth)?),
                        slides: pred.len(),
                    })
                })
                .collect::<Result<Vec<_>, MetricError>>()?;
            Ok(AnnotatorComparison {
                annotator: annotator.clone(),
                batches: scores,
            })
        })
        .collect()
}

/// One closed viewing interval, in milliseconds since the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub user: String,
    pub slide: String,
    pub batch: String,
    pub opened_at: i64,
    pub closed_at: i64,
}

impl SessionRecord {
    pub fn capped_ms(&self, cap_ms: i64) -> i64 {
        (self.closed_at - self.opened_at).clamp(0, cap_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimingGroup {
    Class,
    Annotator,
    Slide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub group: String,
    /// Mean minutes per (annotator, slide) pair in the group.
    pub mean_minutes: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub group_by: TimingGroup,
    pub rows: Vec<TimingRow>,
    /// Mean over every (annotator, slide) pair; 0 with no sessions.
    pub overall_minutes: f64,
}

/// Mean minutes per WSI. Each session is capped at `cap_ms`, summed per
/// (annotator, slide), then averaged within each group. Class grouping uses
/// the expert's slide label; slides without one are left out of that view.
pub fn timing_report(
    sessions: &[SessionRecord],
    expert: &BTreeMap<String, String>,
    group_by: TimingGroup,
    cap_ms: i64,
) -> TimingReport {
    let mut per_pair: BTreeMap<(String, String), i64> = BTreeMap::new();
    for s in sessions {
        *per_pair.entry((s.user.clone(), s.slide.clone())).or_default() += s.capped_ms(cap_ms);
    }
    let mut groups: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for ((user, slide), ms) in &per_pair {
        let key = match group_by {
            TimingGroup::Annotator => Some(user.clone()),
            TimingGroup::Slide => Some(slide.clone()),
            TimingGroup::Class => expert.get(slide).cloned(),
        };
        if let Some(key) = key {
            let e = groups.entry(key).or_default();
            e.0 += *ms as f64 / 60_000.0;
            e.1 += 1;
        }
    }
    let overall_minutes = if per_pair.is_empty() {
        0.0
    } else {
        per_pair.values().map(|ms| *ms as f64 / 60_000.0).sum::<f64>() / per_pair.len() as f64
    };
    TimingReport {
        group_by,
        rows: groups
            .into_iter()
            .map(|(group, (total, pairs))| TimingRow {
                group,
                mean_minutes: total / pairs as f64,
                pairs,
            })
            .collect(),
        overall_minutes,
    }
}

/// Snapshot row used for region tallies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub user: String,
    pub slide: String,
    pub from_model: bool,
    /// `Some(true)` accepted, `Some(false)` rejected, `None` pending or manual.
    pub accepted: Option<bool>,
    pub label: String,
}

pub const TUMOR_LABEL: &str = "tumor";

/// Tallies one annotator's regions. Pending proposals are not counted.
pub fn tally_regions<'a>(records: impl IntoIterator<Item = &'a RegionRecord>) -> RegionTally {
    let mut t = RegionTally::default();
    for r in records {
        match (r.from_model, r.accepted) {
            (true, Some(true)) => {
                t.tm += 1;
                t.tp += 1;
            }
            (true, Some(false)) => {
                t.tm += 1;
                t.nt += 1;
            }
            (true, None) => {}
            (false, _) => {
                if r.label == TUMOR_LABEL {
                    t.tp += 1;
                }
            }
        }
    }
    t
}

/// Per-annotator tallies, keyed by user name.
pub fn tallies_by_user(records: &[RegionRecord]) -> BTreeMap<String, RegionTally> {
    let mut grouped: HashMap<&str, Vec<&RegionRecord>> = HashMap::new();
    for r in records {
        grouped.entry(&r.user).or_default().push(r);
    }
    grouped
        .into_iter()
        .map(|(user, rs)| (user.to_string(), tally_regions(rs)))
        .collect()
}
