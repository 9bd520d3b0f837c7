//! Training manifests and the teacher → student run.

use std::path::Path;

use anyhow::{bail, Context, Result};
use gigaslide_core::semisup::{
    accuracy, pseudo_label, train_student, train_teacher, ColorStatsFeatures, FeatureExtractor, Hyper,
    IdentityFeatures, LabeledSet, ModelFile, UnlabeledSet,
};
use image::RgbImage;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub model: ModelFile,
    pub teacher_accuracy: f64,
    pub student_accuracy: f64,
    pub labeled: usize,
    pub unlabeled: usize,
    pub evaluated_on: usize,
}

enum Rows {
    Features(Vec<(Vec<f64>, Option<usize>)>),
    Images(Vec<(RgbImage, Option<usize>)>),
}

fn read_rows(path: &Path, labeled: bool) -> Result<Rows> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let base = path.parent().unwrap_or(Path::new("."));
    let image_layout: &[&str] = if labeled { &["path", "label"] } else { &["path"] };
    let parse_label = |s: &str, line: usize| -> Result<usize> {
        s.parse().with_context(|| format!("{} line {line}: label {s:?} is not a class index", path.display()))
    };

    if headers == image_layout {
        let mut out = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let p = base.join(&rec[0]);
            let img = image::open(&p).with_context(|| format!("reading {}", p.display()))?.to_rgb8();
            let label = if labeled { Some(parse_label(&rec[1], line)?) } else { None };
            out.push((img, label));
        }
        return Ok(Rows::Images(out));
    }

    let features_from = if labeled {
        if headers.first().map(String::as_str) != Some("label") || headers.len() < 2 {
            bail!(
                "{}: expected a `path,label` or `label,f0,f1,...` header",
                path.display()
            );
        }
        1
    } else {
        if headers.is_empty() {
            bail!("{}: empty header", path.display());
        }
        0
    };
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let label = if labeled { Some(parse_label(&rec[0], line)?) } else { None };
        let x = rec
            .iter()
            .skip(features_from)
            .map(|v| v.parse::<f64>().with_context(|| format!("{} line {line}: {v:?} is not a number", path.display())))
            .collect::<Result<Vec<_>>>()?;
        out.push((x, label));
    }
    Ok(Rows::Features(out))
}

fn labeled_set<T>(rows: Vec<(T, Option<usize>)>, class_count: usize) -> LabeledSet<T> {
    LabeledSet {
        samples: rows.into_iter().map(|(x, y)| (x, y.expect("labeled row"))).collect(),
        class_count,
    }
}

fn class_count<T>(sets: &[&[(T, Option<usize>)]]) -> usize {
    sets.iter()
        .flat_map(|s| s.iter().filter_map(|(_, y)| *y))
        .max()
        .map_or(2, |m| (m + 1).max(2))
}

fn run<F: FeatureExtractor>(
    f: &F,
    labeled: Vec<(F::Input, Option<usize>)>,
    unlabeled: Vec<(F::Input, Option<usize>)>,
    test: Option<Vec<(F::Input, Option<usize>)>>,
    hyper: &Hyper,
) -> Result<TrainSummary>
where
    F::Input: Clone,
{
    let classes = class_count(&[&labeled, test.as_deref().unwrap_or(&[])]);
    let labeled = labeled_set(labeled, classes);
    let unlabeled = UnlabeledSet {
        samples: unlabeled.into_iter().map(|(x, _)| x).collect(),
    };
    let (teacher, _) = train_teacher(&labeled, f, hyper)?;
    let pseudo = pseudo_label(&teacher, f, &unlabeled)?;
    let (student, _) = train_student(&labeled, &pseudo, f, hyper)?;
    let eval = match test {
        Some(rows) => labeled_set(rows, classes),
        None => labeled.clone(),
    };
    Ok(TrainSummary {
        model: ModelFile::new(&student, f.id(), hyper),
        teacher_accuracy: accuracy(&teacher, f, &eval),
        student_accuracy: accuracy(&student, f, &eval),
        labeled: labeled.samples.len(),
        unlabeled: unlabeled.samples.len(),
        evaluated_on: eval.samples.len(),
    })
}

pub fn train_from_manifests(labeled: &Path, unlabeled: &Path, test: Option<&Path>, hyper: &Hyper) -> Result<TrainSummary> {
    let l = read_rows(labeled, true)?;
    let u = read_rows(unlabeled, false)?;
    let t = test.map(|p| read_rows(p, true)).transpose()?;
    match (l, u, t) {
        (Rows::Features(l), Rows::Features(u), t) => {
            let dim = l.first().map(|r| r.0.len()).context("labeled manifest is empty")?;
            let t = match t {
                None => None,
                Some(Rows::Features(t)) => Some(t),
                Some(Rows::Images(_)) => bail!("test manifest lists images but training uses feature vectors"),
            };
            run(&IdentityFeatures { dim }, l, u, t, hyper)
        }
        (Rows::Images(l), Rows::Images(u), t) => {
            let t = match t {
                None => None,
                Some(Rows::Images(t)) => Some(t),
                Some(Rows::Features(_)) => bail!("test manifest lists feature vectors but training uses images"),
            };
            run(&ColorStatsFeatures, l, u, t, hyper)
        }
        _ => bail!("labeled and unlabeled manifests must both list images or both list feature vectors"),
    }
}
