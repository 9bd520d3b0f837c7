//! Report documents assembled from a store snapshot.

use std::collections::BTreeMap;

use gigaslide_core::metrics::{
    batch_comparison, confusion, overlap_report, recall_nt, recall_t, tallies_by_user, timing_report,
    AnnotatorComparison, ConfusionMatrix, MetricError, OverlapReport, RegionTally, TimingGroup, TimingReport,
};
use gigaslide_store::{Role, Store, StoreError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REPORT_KINDS: [&str; 5] = ["agreement", "confusion", "timing", "batch_comparison", "overlap"];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("unknown report kind {0:?}; expected one of agreement, confusion, timing, batch_comparison, overlap")]
    UnknownKind(String),
    #[error("invalid filter: {0}")]
    Filter(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct ReportFilters {
    /// Restricts agreement and confusion to one batch.
    pub batch: Option<String>,
    /// Restricts confusion to one annotator.
    pub annotator: Option<String>,
    /// Timing grouping: class, annotator (default) or slide.
    pub group_by: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub user: String,
    pub tally: RegionTally,
    /// `None` when no proposal has been decided.
    pub recall_t: Option<f64>,
    /// `None` when no tumor region has been confirmed.
    pub recall_nt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub batch: Option<String>,
    pub rows: Vec<AgreementRow>,
    pub total: AgreementRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    pub batch: Option<String>,
    pub annotators: Vec<String>,
    /// Slides counted (expert and annotator labels both present).
    pub pairs: usize,
    pub matrix: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Report {
    Agreement(AgreementReport),
    Confusion(ConfusionReport),
    Timing(TimingReport),
    BatchComparison { annotators: Vec<AnnotatorComparison> },
    Overlap(OverlapReport),
}

fn agreement_row(user: String, tally: RegionTally) -> AgreementRow {
    AgreementRow {
        user,
        recall_t: recall_t(&tally).ok(),
        recall_nt: recall_nt(&tally).ok(),
        tally,
    }
}

fn annotator_names(store: &Store) -> Result<Vec<String>, StoreError> {
    Ok(store
        .users()?
        .into_iter()
        .filter(|u| u.role == Role::Annotator)
        .map(|u| u.name)
        .collect())
}

pub fn agreement(store: &Store, batch: Option<&str>) -> Result<AgreementReport, ReportError> {
    if let Some(b) = batch {
        store.batch(b)?;
    }
    let records = store.region_records(batch)?;
    let by_user = tallies_by_user(&records);
    let mut total = RegionTally::default();
    for t in by_user.values() {
        total += *t;
    }
    Ok(AgreementReport {
        batch: batch.map(str::to_string),
        rows: by_user.into_iter().map(|(u, t)| agreement_row(u, t)).collect(),
        total: agreement_row("all".into(), total),
    })
}

/// Expert label (row) against annotator label (column), pooled over the
/// selected annotators.
pub fn confusion_report(store: &Store, batch: Option<&str>, annotator: Option<&str>) -> Result<ConfusionReport, ReportError> {
    let expert = store.expert_labels()?;
    let annotators = match annotator {
        Some(a) => {
            store.user(a)?;
            vec![a.to_string()]
        }
        None => annotator_names(store)?,
    };
    let slides: Option<Vec<String>> = batch.map(|b| store.batch(b).map(|b| b.slide_names)).transpose()?;
    let mut e_labels = Vec::new();
    let mut a_labels = Vec::new();
    for l in store.wsi_labels()? {
        if !annotators.contains(&l.user_name) {
            continue;
        }
        if slides.as_ref().is_some_and(|s| !s.contains(&l.slide_name)) {
            continue;
        }
        if let Some(e) = expert.get(&l.slide_name) {
            e_labels.push(e.clone());
            a_labels.push(l.class_label);
        }
    }
    let matrix = confusion(&e_labels, &a_labels, store.classes())?;
    Ok(ConfusionReport {
        batch: batch.map(str::to_string),
        annotators,
        pairs: e_labels.len(),
        matrix,
    })
}

pub fn timing(store: &Store, group_by: Option<&str>, cap_ms: i64) -> Result<TimingReport, ReportError> {
    let group = match group_by.unwrap_or("annotator") {
        "annotator" => TimingGroup::Annotator,
        "class" => TimingGroup::Class,
        "slide" => TimingGroup::Slide,
        other => {
            return Err(ReportError::Filter(format!(
                "group_by {other:?}; expected class, annotator or slide"
            )))
        }
    };
    Ok(timing_report(&store.sessions()?, &store.expert_labels()?, group, cap_ms))
}

pub fn batch_comparison_report(store: &Store) -> Result<Vec<AnnotatorComparison>, ReportError> {
    let expert = store.expert_labels()?;
    let batches = store
        .batches()?
        .iter()
        .map(|b| store.batch_labels(&b.name))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(batch_comparison(&expert, &batches, &annotator_names(store)?, store.classes())?)
}

/// Per-class overlap over the dense set. Annotators are those assigned to a
/// dense batch; without dense batches every annotator counts.
pub fn overlap(store: &Store) -> Result<OverlapReport, ReportError> {
    let batches = store.batches()?;
    let dense: Vec<_> = batches.iter().filter(|b| b.dense).collect();
    let (slides, annotators): (Option<Vec<String>>, Vec<String>) = if dense.is_empty() {
        (None, annotator_names(store)?)
    } else {
        let all = annotator_names(store)?;
        let mut users: Vec<String> = dense.iter().flat_map(|b| b.assigned_users.iter().cloned()).collect();
        users.sort();
        users.dedup();
        users.retain(|u| all.contains(u));
        (Some(dense.iter().flat_map(|b| b.slide_names.iter().cloned()).collect()), users)
    };
    let mut expert = store.expert_labels()?;
    if let Some(s) = &slides {
        expert.retain(|k, _| s.contains(k));
    }
    let mut maps: BTreeMap<String, BTreeMap<String, String>> = annotators.iter().map(|a| (a.clone(), BTreeMap::new())).collect();
    for l in store.wsi_labels()? {
        if slides.as_ref().is_some_and(|s| !s.contains(&l.slide_name)) {
            continue;
        }
        if let Some(m) = maps.get_mut(&l.user_name) {
            m.insert(l.slide_name, l.class_label);
        }
    }
    let maps: Vec<_> = maps.into_values().collect();
    Ok(overlap_report(&expert, &maps, store.classes())?)
}

pub fn build_report(store: &Store, kind: &str, filters: &ReportFilters, cap_ms: i64) -> Result<Report, ReportError> {
    Ok(match kind {
        "agreement" => Report::Agreement(agreement(store, filters.batch.as_deref())?),
        "confusion" => Report::Confusion(confusion_report(
            store,
            filters.batch.as_deref(),
            filters.annotator.as_deref(),
        )?),
        "timing" => Report::Timing(timing(store, filters.group_by.as_deref(), cap_ms)?),
        "batch_comparison" => Report::BatchComparison {
            annotators: batch_comparison_report(store)?,
        },
        "overlap" => Report::Overlap(overlap(store)?),
        other => return Err(ReportError::UnknownKind(other.to_string())),
    })
}
