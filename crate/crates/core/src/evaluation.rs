//! Confusion-matrix metrics: per-class IoU and pixel accuracy, their means,
//! per-sample distributions and the slice-distance profile.
//!
//! Dataset-level scores come from the confusion matrix summed over samples;
//! the per-sample mIoU values are kept alongside for distribution plots.
//! Classes that never occur in either prediction or label are left out of the
//! IoU mean, and classes absent from the label are left out of the PA mean.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, SampleSource};
use crate::error::{Error, Result};
use crate::model::Segmenter;

/// Entry `(i, j)` counts valid pixels with label `i` predicted as `j`.
pub fn confusion_counts(
    prediction: ArrayView2<'_, usize>,
    label: ArrayView2<'_, usize>,
    class_count: usize,
    valid_mask: Option<ArrayView2<'_, bool>>,
) -> Result<Array2<u64>> {
    if prediction.dim() != label.dim() {
        return Err(Error::shape("prediction", label.shape(), prediction.shape()));
    }
    if let Some(m) = &valid_mask {
        if m.dim() != label.dim() {
            return Err(Error::shape("valid mask", label.shape(), m.shape()));
        }
    }
    let mut counts = Array2::zeros((class_count, class_count));
    for ((idx, &l), &p) in label.indexed_iter().zip(prediction.iter()) {
        if valid_mask.as_ref().is_some_and(|m| !m[idx]) {
            continue;
        }
        if l >= class_count || p >= class_count {
            return Err(Error::Invalid(format!(
                "class index {} at {idx:?} is outside [0, {class_count})",
                l.max(p)
            )));
        }
        counts[[l, p]] += 1;
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    /// `None` where the class is absent from both prediction and label.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    /// `None` where the class is absent from the label.
    pub per_class_pa: Vec<Option<f64>>,
    pub mpa: f64,
}

pub fn compute_miou_mpa(counts: &Array2<u64>) -> Result<ClassScores> {
    let c = counts.nrows();
    let mut iou = Vec::with_capacity(c);
    let mut pa = Vec::with_capacity(c);
    for k in 0..c {
        let diag = counts[[k, k]] as f64;
        let row = counts.row(k).sum() as f64;
        let col = counts.column(k).sum() as f64;
        let union = row + col - diag;
        iou.push((union > 0.0).then(|| diag / union));
        pa.push((row > 0.0).then(|| diag / row));
    }
    let mean = |v: &[Option<f64>]| {
        let present: Vec<f64> = v.iter().flatten().copied().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    };
    let miou = mean(&iou).ok_or(Error::NoEvaluableClasses)?;
    let mpa = mean(&pa).ok_or(Error::NoEvaluableClasses)?;
    Ok(ClassScores {
        per_class_iou: iou,
        miou,
        per_class_pa: pa,
        mpa,
    })
}

/// Outcome for one evaluated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleResult {
    pub sample_id: String,
    pub slice_index: Option<usize>,
    pub counts: Array2<u64>,
}

impl SampleResult {
    pub fn miou(&self) -> Result<f64> {
        compute_miou_mpa(&self.counts).map(|s| s.miou)
    }
}

/// `(slice_index, mIoU)` ordered by slice index.
pub fn miou_distance_profile(results: &[SampleResult]) -> Result<Vec<(usize, f64)>> {
    let mut profile = results
        .iter()
        .map(|r| {
            let i = r
                .slice_index
                .ok_or_else(|| Error::Invalid(format!("sample `{}` has no slice index", r.sample_id)))?;
            Ok((i, r.miou()?))
        })
        .collect::<Result<Vec<_>>>()?;
    profile.sort_by_key(|&(i, _)| i);
    Ok(profile)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub per_class_pa: Vec<Option<f64>>,
    pub mpa: f64,
    pub per_sample_miou: Vec<(String, f64)>,
    pub distance_profile: Option<Vec<(usize, f64)>>,
}

impl MetricsReport {
    /// Aggregate sample results: summed counts for the dataset scores, and a
    /// distance profile when every sample carries a slice index.
    pub fn from_results(results: &[SampleResult]) -> Result<Self> {
        let Some(first) = results.first() else {
            return Err(Error::Invalid("nothing to evaluate".into()));
        };
        let mut total = Array2::zeros(first.counts.raw_dim());
        for r in results {
            total += &r.counts;
        }
        let scores = compute_miou_mpa(&total)?;
        let per_sample_miou = results
            .iter()
            .map(|r| Ok((r.sample_id.clone(), r.miou()?)))
            .collect::<Result<Vec<_>>>()?;
        let distance_profile = if results.iter().all(|r| r.slice_index.is_some()) {
            Some(miou_distance_profile(results)?)
        } else {
            None
        };
        Ok(Self {
            per_class_iou: scores.per_class_iou,
            miou: scores.miou,
            per_class_pa: scores.per_class_pa,
            mpa: scores.mpa,
            per_sample_miou,
            distance_profile,
        })
    }

    /// `metrics.json`, `per_sample_miou.tsv` and, when present,
    /// `distance_profile.tsv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("metrics.json");
        std::fs::write(&json, serde_json::to_string_pretty(self).expect("report serializes"))
            .map_err(|e| Error::io(&json, e))?;
        let mut rows = vec!["sample_id\tmiou".to_string()];
        rows.extend(self.per_sample_miou.iter().map(|(id, m)| format!("{id}\t{m:.6}")));
        write_lines(&dir.join("per_sample_miou.tsv"), &rows)?;
        if let Some(profile) = &self.distance_profile {
            let mut rows = vec!["slice_index\tmiou".to_string()];
            rows.extend(profile.iter().map(|(i, m)| format!("{i}\t{m:.6}")));
            write_lines(&dir.join("distance_profile.tsv"), &rows)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("metrics.json");
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
            _ => Error::io(&path, e),
        })?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
    }
}

fn write_lines(path: &Path, rows: &[String]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(f, "{r}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Run `model` over every sample of `source` in batches of `batch_size`.
pub fn evaluate_samples(model: &Segmenter, source: &dyn SampleSource, batch_size: usize) -> Result<Vec<SampleResult>> {
    if source.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty split".into()));
    }
    let c = model.class_count();
    let indices: Vec<usize> = (0..source.len()).collect();
    let mut results = Vec::with_capacity(source.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let samples = chunk.iter().map(|&i| source.sample(i)).collect::<Result<Vec<_>>>()?;
        let batch = Batch::from_samples(&samples)?;
        let maps = model.predict(&batch.images)?;
        for ((&i, map), s) in chunk.iter().zip(&maps).zip(&samples) {
            results.push(SampleResult {
                sample_id: source.sample_id(i),
                slice_index: source.slice_index(i),
                counts: confusion_counts(map.prediction.view(), s.label.view(), c, Some(s.valid_mask.view()))?,
            });
        }
    }
    Ok(results)
}

pub fn evaluate_dataset(model: &Segmenter, source: &dyn SampleSource, batch_size: usize) -> Result<MetricsReport> {
    MetricsReport::from_results(&evaluate_samples(model, source, batch_size)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_case() {
        let p = array![[0, 1], [1, 1]];
        let l = array![[0, 0], [1, 1]];
        let c = confusion_counts(p.view(), l.view(), 2, None).unwrap();
        assert_eq!(c, array![[1, 1], [0, 2]]);
        let s = compute_miou_mpa(&c).unwrap();
        assert_eq!(s.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((s.miou - 7.0 / 12.0).abs() <= f64::EPSILON);
        assert_eq!(s.mpa, 0.75);
    }

    #[test]
    fn masked_pixels_are_ignored() {
        let p = array![[0, 1], [1, 1]];
        let l = array![[0, 0], [1, 1]];
        let m = array![[true, false], [true, true]];
        let c = confusion_counts(p.view(), l.view(), 2, Some(m.view())).unwrap();
        assert_eq!(c, array![[1, 0], [0, 2]]);
    }

    #[test]
    fn errors() {
        let p = array![[0, 1]];
        let l = array![[0], [1]];
        assert!(confusion_counts(p.view(), l.view(), 2, None).is_err());
        assert!(matches!(compute_miou_mpa(&Array2::zeros((2, 2))), Err(Error::NoEvaluableClasses)));
        assert!(MetricsReport::from_results(&[]).is_err());
    }

    #[test]
    fn micro_differs_from_macro() {
        let mk = |p: Array2<usize>, l: Array2<usize>, id: &str| SampleResult {
            sample_id: id.into(),
            slice_index: None,
            counts: confusion_counts(p.view(), l.view(), 2, None).unwrap(),
        };
        let results = vec![
            mk(array![[0, 0], [0, 0]], array![[0, 0], [0, 0]], "a"),
            mk(array![[1, 1], [1, 1]], array![[0, 1], [1, 1]], "b"),
            mk(array![[0, 1], [0, 1]], array![[1, 1], [0, 0]], "c"),
        ];
        let report = MetricsReport::from_results(&results).unwrap();
        let macro_mean: f64 = report.per_sample_miou.iter().map(|(_, m)| m).sum::<f64>() / 3.0;
        let mut total = Array2::zeros((2, 2));
        for r in &results {
            total += &r.counts;
        }
        assert_eq!(report.miou, compute_miou_mpa(&total).unwrap().miou);
        assert!((report.miou - macro_mean).abs() > 1e-3);
        assert!(report.distance_profile.is_none());
    }

    #[test]
    fn profile_sorted_by_slice() {
        let p = array![[0, 1], [1, 1]];
        let l = array![[0, 0], [1, 1]];
        let counts = confusion_counts(p.view(), l.view(), 2, None).unwrap();
        let results: Vec<SampleResult> = [505, 501, 503]
            .iter()
            .map(|&i| SampleResult {
                sample_id: format!("slice_{i}"),
                slice_index: Some(i),
                counts: counts.clone(),
            })
            .collect();
        let profile = miou_distance_profile(&results).unwrap();
        assert_eq!(profile.iter().map(|p| p.0).collect::<Vec<_>>(), vec![501, 503, 505]);
        assert!(profile.iter().all(|p| (p.1 - 7.0 / 12.0).abs() <= f64::EPSILON));
        let mut missing = results.clone();
        missing[1].slice_index = None;
        assert!(miou_distance_profile(&missing).is_err());
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let counts = array![[3u64, 0], [0, 1]];
        let r = MetricsReport::from_results(&[SampleResult {
            sample_id: "s".into(),
            slice_index: Some(2),
            counts,
        }])
        .unwrap();
        r.write(dir.path()).unwrap();
        assert_eq!(MetricsReport::read(dir.path()).unwrap(), r);
        assert!(dir.path().join("distance_profile.tsv").exists());
    }
}
