//! Dataset ingestion: manifests, normalization, padding to the patch lattice,
//! resizing, flip augmentation and the facies volume split.
//!
//! On disk every task lives under `<root>/<task>/{train,test}/{images,labels}/`
//! with one single-tensor archive per file. Seismic facies is the exception: it
//! ships as `<root>/facies/seismic.safetensors` and `<root>/facies/labels.safetensors`
//! holding the full 3-D volume, cut into 2-D slices along its last axis.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{mpsc, Mutex};

use ndarray::{s, Array2, Array3, ArrayD, ArrayView2, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::resample;

pub const PATCH_SIZE: usize = 14;
/// Per-channel constants of the encoder's pretraining distribution.
pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];
/// Samples are mirrored when the coin falls below this value.
pub const FLIP_PROBABILITY: f64 = 0.5;

pub const FACIES_DEPTH: usize = 590;
pub const FACIES_TRAIN_BLOCK: usize = 500;
pub const FACIES_STRIDE: usize = 2;
pub const FACIES_VOLUME_FILE: &str = "seismic.safetensors";
pub const FACIES_LABEL_FILE: &str = "labels.safetensors";
pub const ARCHIVE_EXTENSION: &str = "safetensors";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    Facies,
    Geobody,
    Crater,
    DasEvent,
    Fault,
}

impl TaskName {
    pub const ALL: [TaskName; 5] = [
        TaskName::Facies,
        TaskName::Geobody,
        TaskName::Crater,
        TaskName::DasEvent,
        TaskName::Fault,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::Facies => "facies",
            TaskName::Geobody => "geobody",
            TaskName::Crater => "crater",
            TaskName::DasEvent => "das_event",
            TaskName::Fault => "fault",
        }
    }

    /// Published (train, test) sample counts.
    pub fn reference_split_counts(self) -> (usize, usize) {
        match self {
            TaskName::Facies => (250, 45),
            TaskName::Geobody => (3000, 1000),
            TaskName::Crater => (1000, 199),
            TaskName::DasEvent => (115, 28),
            TaskName::Fault => (1081, 269),
        }
    }

    /// Size of the raw 2-D samples as distributed.
    pub fn reference_native_size(self) -> (usize, usize) {
        match self {
            TaskName::Facies => (1006, 782),
            TaskName::Geobody => (101, 101),
            TaskName::Crater => (1022, 1022),
            TaskName::DasEvent => (512, 512),
            TaskName::Fault => (896, 896),
        }
    }

    pub fn reference_class_count(self) -> usize {
        match self {
            TaskName::Facies => 6,
            _ => 2,
        }
    }

    /// Tasks whose samples are resampled to a fixed size instead of padded.
    pub fn resize_target(self) -> Option<(usize, usize)> {
        match self {
            TaskName::Geobody => Some((224, 224)),
            _ => None,
        }
    }

    pub fn default_batch_size(self) -> usize {
        match self {
            TaskName::Facies | TaskName::Crater => 3,
            TaskName::Geobody => 32,
            TaskName::DasEvent | TaskName::Fault => 6,
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One manifest record. This is also the line format of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub image_path: PathBuf,
    pub label_path: PathBuf,
    pub split: Split,
    pub slice_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task_name: TaskName,
    pub class_count: usize,
    pub sample_entries: Vec<SampleEntry>,
    pub native_size: (usize, usize),
    pub target_size: (usize, usize),
}

/// Manifest-level fields stored next to `manifest.jsonl`.
#[derive(Serialize, Deserialize)]
struct ManifestSummary {
    task_name: TaskName,
    class_count: usize,
    native_size: (usize, usize),
    target_size: (usize, usize),
}

impl DatasetManifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &SampleEntry> {
        self.sample_entries.iter().filter(move |e| e.split == split)
    }

    pub fn split_counts(&self) -> (usize, usize) {
        (
            self.entries(Split::Train).count(),
            self.entries(Split::Test).count(),
        )
    }

    /// Fails unless the split sizes equal the published counts for the task.
    pub fn check_reference_counts(&self) -> Result<()> {
        let expected = self.task_name.reference_split_counts();
        let found = self.split_counts();
        if expected != found {
            return Err(Error::Invalid(format!(
                "{} split counts {found:?} differ from the reference {expected:?}",
                self.task_name
            )));
        }
        Ok(())
    }

    /// Line-delimited JSON, one [`SampleEntry`] per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.sample_entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    /// Write `manifest.jsonl` and `manifest.json` (summary fields) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lines = dir.join("manifest.jsonl");
        fs::write(&lines, self.to_jsonl()).map_err(|e| Error::io(&lines, e))?;
        let summary = ManifestSummary {
            task_name: self.task_name,
            class_count: self.class_count,
            native_size: self.native_size,
            target_size: self.target_size,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let summary: ManifestSummary =
            serde_json::from_str(&text).map_err(|source| Error::Json { path, source })?;
        let lines = dir.join("manifest.jsonl");
        let text = fs::read_to_string(&lines).map_err(|e| Error::io(&lines, e))?;
        let sample_entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|source| Error::Json {
                    path: lines.clone(),
                    source,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            task_name: summary.task_name,
            class_count: summary.class_count,
            sample_entries,
            native_size: summary.native_size,
            target_size: summary.target_size,
        })
    }
}

/// Preprocessed sample aligned to the patch lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// `3 × H × W`, standardized per channel.
    pub image: Array3<f64>,
    pub label: Array2<usize>,
    /// `false` on padded pixels.
    pub valid_mask: Array2<bool>,
}

impl ModelInput {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Size of the unpadded region (padding is only added at the bottom/right).
    pub fn valid_size(&self) -> (usize, usize) {
        let rows = self.valid_mask.column(0).iter().filter(|&&v| v).count();
        let cols = self.valid_mask.row(0).iter().filter(|&&v| v).count();
        (rows, cols)
    }

    /// Undo the per-channel standardization, giving the `[0, 1]` grids.
    pub fn unstandardized(&self) -> Array3<f64> {
        let mut out = self.image.clone();
        for (c, mut plane) in out.outer_iter_mut().enumerate() {
            plane.mapv_inplace(|v| v * CHANNEL_STD[c] + CHANNEL_MEAN[c]);
        }
        out
    }
}

/// Round up to the next multiple of the patch size.
pub fn lattice_size(n: usize) -> usize {
    n.div_ceil(PATCH_SIZE) * PATCH_SIZE
}

/// Bilinear resize for the image, nearest-neighbor for the label.
pub fn resize_pair(
    image: ArrayView2<'_, f64>,
    label: ArrayView2<'_, usize>,
    target: (usize, usize),
) -> Result<(Array2<f64>, Array2<usize>)> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::Invalid(format!("resize target {target:?} has a zero dimension")));
    }
    if image.dim() != label.dim() {
        return Err(Error::shape(
            "image/label pair",
            &[image.nrows(), image.ncols()],
            &[label.nrows(), label.ncols()],
        ));
    }
    if image.dim() == target {
        return Ok((image.to_owned(), label.to_owned()));
    }
    Ok((
        resample::resize_bilinear(image, target.0, target.1),
        resample::resize_nearest(label, target.0, target.1),
    ))
}

/// Index into `[0, n)` mirrored about the edges without repeating them.
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

fn reflect_pad<T: Clone>(grid: ArrayView2<'_, T>, target: (usize, usize)) -> Array2<T> {
    let (h, w) = grid.dim();
    Array2::from_shape_fn(target, |(i, j)| {
        grid[[reflect_index(i, h), reflect_index(j, w)]].clone()
    })
}

/// Min–max normalize to `[0, 1]`; a constant grid maps to 0.5.
pub fn min_max_normalize(grid: ArrayView2<'_, f64>) -> Array2<f64> {
    let (lo, hi) = grid
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return Array2::from_elem(grid.dim(), 0.5);
    }
    grid.mapv(|v| (v - lo) / (hi - lo))
}

/// Turn a raw single-channel sample and its label into a [`ModelInput`].
///
/// The image is min–max normalized, copied into three channels, each channel
/// standardized with [`CHANNEL_MEAN`]/[`CHANNEL_STD`], and reflection-padded
/// at the bottom/right up to `manifest.target_size`. Tasks with a fixed
/// resize target are resampled first.
pub fn preprocess_sample(
    raw_image: ArrayView2<'_, f64>,
    raw_label: ArrayView2<'_, usize>,
    manifest: &DatasetManifest,
) -> Result<ModelInput> {
    if let Some(bad) = raw_image.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("raw image (value {bad})")));
    }
    if raw_image.dim() != raw_label.dim() {
        return Err(Error::shape(
            "image/label pair",
            &[raw_image.nrows(), raw_image.ncols()],
            &[raw_label.nrows(), raw_label.ncols()],
        ));
    }
    if let Some(&bad) = raw_label.iter().find(|&&v| v >= manifest.class_count) {
        return Err(Error::Invalid(format!(
            "label value {bad} is not below the class count {}",
            manifest.class_count
        )));
    }
    let (image, label) = match manifest.task_name.resize_target() {
        Some(t) if raw_image.dim() != t => resize_pair(raw_image, raw_label, t)?,
        _ => (raw_image.to_owned(), raw_label.to_owned()),
    };
    let (h, w) = image.dim();
    let (th, tw) = manifest.target_size;
    if th % PATCH_SIZE != 0 || tw % PATCH_SIZE != 0 || th < h || tw < w {
        return Err(Error::Invalid(format!(
            "target size {:?} cannot hold a {h}×{w} sample on the {PATCH_SIZE}-pixel lattice",
            manifest.target_size
        )));
    }
    let unit = min_max_normalize(image.view());
    let padded = reflect_pad(unit.view(), (th, tw));
    let mut out = Array3::zeros((3, th, tw));
    for c in 0..3 {
        out.index_axis_mut(Axis(0), c)
            .assign(&padded.mapv(|v| (v - CHANNEL_MEAN[c]) / CHANNEL_STD[c]));
    }
    let mut valid_mask = Array2::from_elem((th, tw), false);
    valid_mask.slice_mut(s![..h, ..w]).fill(true);
    Ok(ModelInput {
        image: out,
        label: reflect_pad(label.view(), (th, tw)),
        valid_mask,
    })
}

/// Mirror image, label and mask about the vertical axis when `coin < 0.5`.
pub fn augment_flip(sample: ModelInput, coin: f64) -> ModelInput {
    if coin >= FLIP_PROBABILITY {
        return sample;
    }
    ModelInput {
        image: sample.image.slice(s![.., .., ..;-1]).to_owned(),
        label: sample.label.slice(s![.., ..;-1]).to_owned(),
        valid_mask: sample.valid_mask.slice(s![.., ..;-1]).to_owned(),
    }
}

/// Slice indices of the facies train and validation blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FaciesSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Partition the last axis into `[0, 500)` and `[500, 590)` and take every
/// second slice of each block.
pub fn split_facies_volume(volume_shape: &[usize], label_shape: &[usize]) -> Result<FaciesSplit> {
    if volume_shape != label_shape {
        return Err(Error::shape("facies label volume", volume_shape, label_shape));
    }
    match volume_shape {
        [_, _, depth] if *depth == FACIES_DEPTH => {}
        _ => {
            let mut expected = volume_shape.to_vec();
            expected.resize(3, 0);
            expected[2] = FACIES_DEPTH;
            return Err(Error::shape("facies volume", &expected, volume_shape));
        }
    }
    Ok(FaciesSplit {
        train: (0..FACIES_TRAIN_BLOCK).step_by(FACIES_STRIDE).collect(),
        validation: (FACIES_TRAIN_BLOCK..FACIES_DEPTH).step_by(FACIES_STRIDE).collect(),
    })
}

/// Read only the header of an archive and report its tensor shapes.
fn peek_shape(path: &Path) -> Result<Vec<usize>> {
    use std::io::Read;
    let mut f = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut len = [0u8; 8];
    f.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
    let n = u64::from_le_bytes(len) as usize;
    let mut header = vec![0u8; n.min(1 << 26)];
    f.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(&header).map_err(|e| Error::Archive {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    let shapes: Vec<Vec<usize>> = v
        .iter()
        .filter(|(k, _)| k.as_str() != "__metadata__")
        .filter_map(|(_, e)| serde_json::from_value(e["shape"].clone()).ok())
        .collect();
    match shapes.as_slice() {
        [one] => Ok(one.clone()),
        _ => Ok(archive::read_single(path)?.shape().to_vec()),
    }
}

fn grid_2d(t: Tensor, path: &Path) -> Result<Array2<f64>> {
    let shape = t.shape().to_vec();
    let t = match shape.as_slice() {
        [_, _] => t,
        [1, _, _] => t.index_axis_move(Axis(0), 0),
        _ => {
            return Err(Error::Archive {
                path: path.to_path_buf(),
                msg: format!("expected a 2-D grid, found shape {shape:?}"),
            })
        }
    };
    Ok(t.into_dimensionality().expect("checked rank"))
}

/// Convert a floating grid of class ids to integers, rejecting non-integral
/// or negative entries.
pub fn label_grid(t: ArrayView2<'_, f64>, origin: &str) -> Result<Array2<usize>> {
    if let Some(bad) = t.iter().find(|v| !(v.is_finite() && **v >= 0.0 && v.fract() == 0.0)) {
        return Err(Error::Invalid(format!("label value {bad} in {origin} is not a class id")));
    }
    Ok(t.mapv(|v| v as usize))
}

fn list_archives(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ARCHIVE_EXTENSION) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn max_label(path: &Path) -> Result<usize> {
    let t = archive::read_single(path)?;
    let g = label_grid(
        t.view().into_shape_with_order(t.len()).unwrap().insert_axis(Axis(0)),
        &path.display().to_string(),
    )?;
    Ok(g.iter().copied().max().unwrap_or(0))
}

/// Scan `<root>/<task>` and build the manifest for `task`.
pub fn load_manifest(root: &Path, task: TaskName) -> Result<DatasetManifest> {
    let task_dir = root.join(task.as_str());
    if task == TaskName::Facies {
        return load_facies_manifest(&task_dir);
    }
    let mut entries = Vec::new();
    let mut native: Option<(usize, usize)> = None;
    let mut max_class = 0usize;
    for split in [Split::Train, Split::Test] {
        let split_dir = task_dir.join(split.as_str());
        for image_path in list_archives(&split_dir.join("images"))? {
            let label_path = split_dir.join("labels").join(image_path.file_name().unwrap());
            if !label_path.exists() {
                return Err(Error::MissingFile(label_path));
            }
            let image_shape = peek_shape(&image_path)?;
            let label_shape = peek_shape(&label_path)?;
            if image_shape != label_shape {
                return Err(Error::shape(
                    format!("label {} vs image {}", label_path.display(), image_path.display()),
                    &image_shape,
                    &label_shape,
                ));
            }
            let size = match image_shape.as_slice() {
                [h, w] | [1, h, w] => (*h, *w),
                _ => {
                    return Err(Error::Archive {
                        path: image_path,
                        msg: format!("expected a 2-D grid, found shape {image_shape:?}"),
                    })
                }
            };
            match native {
                None => native = Some(size),
                Some(n) if n != size => {
                    return Err(Error::shape(
                        format!("sample size of {}", image_path.display()),
                        &[n.0, n.1],
                        &[size.0, size.1],
                    ))
                }
                Some(_) => {}
            }
            max_class = max_class.max(max_label(&label_path)?);
            entries.push(SampleEntry {
                image_path,
                label_path,
                split,
                slice_index: None,
            });
        }
    }
    let Some(native_size) = native else {
        return Err(Error::NoSamples(task_dir));
    };
    entries.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    let base = task.resize_target().unwrap_or(native_size);
    Ok(DatasetManifest {
        task_name: task,
        class_count: (max_class + 1).max(2),
        sample_entries: entries,
        native_size,
        target_size: (lattice_size(base.0), lattice_size(base.1)),
    })
}

fn load_facies_manifest(task_dir: &Path) -> Result<DatasetManifest> {
    let volume_path = task_dir.join(FACIES_VOLUME_FILE);
    let label_path = task_dir.join(FACIES_LABEL_FILE);
    if !volume_path.exists() && !label_path.exists() {
        return Err(Error::NoSamples(task_dir.to_path_buf()));
    }
    for p in [&volume_path, &label_path] {
        if !p.exists() {
            return Err(Error::MissingFile(p.clone()));
        }
    }
    let vshape = peek_shape(&volume_path)?;
    let lshape = peek_shape(&label_path)?;
    let split = split_facies_volume(&vshape, &lshape)?;
    let max_class = max_label(&label_path)?;
    let entry = |split, i| SampleEntry {
        image_path: volume_path.clone(),
        label_path: label_path.clone(),
        split,
        slice_index: Some(i),
    };
    let mut entries: Vec<_> = split.train.iter().map(|&i| entry(Split::Train, i)).collect();
    entries.extend(split.validation.iter().map(|&i| entry(Split::Test, i)));
    let native_size = (vshape[0], vshape[1]);
    Ok(DatasetManifest {
        task_name: TaskName::Facies,
        class_count: (max_class + 1).max(2),
        sample_entries: entries,
        native_size,
        target_size: (lattice_size(native_size.0), lattice_size(native_size.1)),
    })
}

/// Random access to preprocessed samples.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sample(&self, index: usize) -> Result<ModelInput>;

    fn class_count(&self) -> usize;

    /// Slice position for volume-derived samples.
    fn slice_index(&self, _index: usize) -> Option<usize> {
        None
    }

    fn sample_id(&self, index: usize) -> String {
        format!("{index:05}")
    }
}

/// Samples held in memory, mainly for synthetic experiments.
#[derive(Clone, Debug)]
pub struct InMemorySource {
    pub samples: Vec<ModelInput>,
    pub class_count: usize,
    pub slice_indices: Option<Vec<usize>>,
}

impl SampleSource for InMemorySource {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn sample(&self, index: usize) -> Result<ModelInput> {
        Ok(self.samples[index].clone())
    }

    fn class_count(&self) -> usize {
        self.class_count
    }

    fn slice_index(&self, index: usize) -> Option<usize> {
        self.slice_indices.as_ref().map(|s| s[index])
    }
}

/// One split of a manifest, read and preprocessed on demand.
pub struct ManifestSource {
    manifest: DatasetManifest,
    entries: Vec<SampleEntry>,
    volumes: Mutex<BTreeMap<PathBuf, std::sync::Arc<Tensor>>>,
}

impl ManifestSource {
    pub fn new(manifest: DatasetManifest, split: Split) -> Self {
        let entries = manifest.entries(split).cloned().collect();
        Self {
            manifest,
            entries,
            volumes: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn volume(&self, path: &Path) -> Result<std::sync::Arc<Tensor>> {
        let mut cache = self.volumes.lock().expect("volume cache poisoned");
        if let Some(v) = cache.get(path) {
            return Ok(v.clone());
        }
        let v = std::sync::Arc::new(archive::read_single(path)?);
        cache.insert(path.to_path_buf(), v.clone());
        Ok(v)
    }

    fn raw_pair(&self, entry: &SampleEntry) -> Result<(Array2<f64>, Array2<f64>)> {
        match entry.slice_index {
            Some(i) => {
                let slice = |t: &Tensor| -> Array2<f64> {
                    t.index_axis(Axis(2), i).to_owned().into_dimensionality().expect("3-D volume")
                };
                let image = slice(self.volume(&entry.image_path)?.as_ref());
                let label = slice(self.volume(&entry.label_path)?.as_ref());
                Ok((image, label))
            }
            None => Ok((
                grid_2d(archive::read_single(&entry.image_path)?, &entry.image_path)?,
                grid_2d(archive::read_single(&entry.label_path)?, &entry.label_path)?,
            )),
        }
    }
}

impl SampleSource for ManifestSource {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn sample(&self, index: usize) -> Result<ModelInput> {
        let entry = &self.entries[index];
        let (image, label) = self.raw_pair(entry)?;
        let label = label_grid(label.view(), &entry.label_path.display().to_string())?;
        preprocess_sample(image.view(), label.view(), &self.manifest)
    }

    fn class_count(&self) -> usize {
        self.manifest.class_count
    }

    fn slice_index(&self, index: usize) -> Option<usize> {
        self.entries[index].slice_index
    }

    fn sample_id(&self, index: usize) -> String {
        let e = &self.entries[index];
        match e.slice_index {
            Some(i) => format!("slice_{i:04}"),
            None => e
                .image_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("{index:05}")),
        }
    }
}

/// Load `indices` on a background thread through a queue of at most `depth`
/// ready samples, handing them to `consume` in the order given.
pub fn prefetch<S, F>(source: &S, indices: &[usize], depth: usize, mut consume: F) -> Result<()>
where
    S: SampleSource + ?Sized,
    F: FnMut(usize, ModelInput) -> Result<()>,
{
    let (tx, rx) = mpsc::sync_channel::<(usize, Result<ModelInput>)>(depth.max(1));
    std::thread::scope(|scope| {
        scope.spawn(move || {
            for &i in indices {
                if tx.send((i, source.sample(i))).is_err() {
                    break;
                }
            }
        });
        for (i, sample) in rx {
            consume(i, sample?)?;
        }
        Ok(())
    })
}

/// A stacked minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `N × 3 × H × W`.
    pub images: Tensor,
    pub labels: Vec<Array2<usize>>,
    pub masks: Vec<Array2<bool>>,
}

impl Batch {
    pub fn from_samples(samples: &[ModelInput]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Invalid("empty batch".into()));
        };
        let (h, w) = (first.height(), first.width());
        let mut images = ArrayD::zeros(IxDyn(&[samples.len(), 3, h, w]));
        for (i, s) in samples.iter().enumerate() {
            if (s.height(), s.width()) != (h, w) {
                return Err(Error::shape("batch member", &[3, h, w], s.image.shape()));
            }
            images.index_axis_mut(Axis(0), i).assign(&s.image);
        }
        Ok(Self {
            images,
            labels: samples.iter().map(|s| s.label.clone()).collect(),
            masks: samples.iter().map(|s| s.valid_mask.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
