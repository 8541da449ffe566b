//! Datasets: FER2013 CSV ingestion, a generic manifest format, prediction
//! files and seeded synthetic generators.

use std::f64::consts::PI;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FER2013_HEADER: &str = "emotion,pixels,Usage";
pub const FER2013_CLASSES: usize = 7;
pub const FER2013_SIDE: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Categorical,
    Dimensional,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "categorical" => Ok(Task::Categorical),
            "dimensional" => Ok(Task::Dimensional),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected categorical or dimensional)"
            ))),
        }
    }
}

/// Per-sample supervision.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Categorical { labels: Vec<usize>, classes: usize },
    /// `[valence, arousal]`, each in `[−1, 1]`.
    Dimensional(Vec<[f64; 2]>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Categorical { labels, .. } => labels.len(),
            Targets::Dimensional(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            Targets::Categorical { .. } => Task::Categorical,
            Targets::Dimensional(_) => Task::Dimensional,
        }
    }
}

/// Images sharing one `[c, h, w]` shape, stored contiguously, plus targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    image_shape: [usize; 3],
    pixels: Vec<f64>,
    targets: Targets,
}

impl Dataset {
    pub fn new(split: Split, image_shape: [usize; 3], pixels: Vec<f64>, targets: Targets) -> Result<Self> {
        let per: usize = image_shape.iter().product();
        if per == 0 || pixels.len() != per * targets.len() {
            return Err(Error::shape(
                "dataset",
                format!(
                    "{} values for {} images of shape {image_shape:?}",
                    pixels.len(),
                    targets.len()
                ),
            ));
        }
        match &targets {
            Targets::Categorical { labels, classes } => {
                if let Some(bad) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(Error::contract(
                        "dataset",
                        format!("label {bad} outside [0, {classes})"),
                    ));
                }
            }
            Targets::Dimensional(values) => {
                if let Some(bad) = values.iter().flatten().find(|v| !(-1.0..=1.0).contains(*v)) {
                    return Err(Error::contract(
                        "dataset",
                        format!("dimensional label {bad} outside [-1, 1]"),
                    ));
                }
            }
        }
        Ok(Self {
            split,
            image_shape,
            pixels,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn task(&self) -> Task {
        self.targets.task()
    }

    pub fn classes(&self) -> Option<usize> {
        match self.targets {
            Targets::Categorical { classes, .. } => Some(classes),
            Targets::Dimensional(_) => None,
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Categorical { labels, .. } => Some(labels),
            Targets::Dimensional(_) => None,
        }
    }

    pub fn dimensional(&self) -> Option<&[[f64; 2]]> {
        match &self.targets {
            Targets::Dimensional(v) => Some(v),
            Targets::Categorical { .. } => None,
        }
    }

    fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, index: usize) -> Tensor {
        let n = self.image_len();
        Tensor::new(&self.image_shape, self.pixels[index * n..(index + 1) * n].to_vec())
            .expect("stored images match their shape")
    }

    /// Stacks the selected images into an `[n, c, h, w]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let n = self.image_len();
        let mut data = Vec::with_capacity(n * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.pixels[i * n..(i + 1) * n]);
        }
        let [c, h, w] = self.image_shape;
        Tensor::new(&[indices.len(), c, h, w], data).expect("batch shape is consistent")
    }

    /// Copy restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let targets = match &self.targets {
            Targets::Categorical { labels, classes } => Targets::Categorical {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
            Targets::Dimensional(v) => Targets::Dimensional(indices.iter().map(|&i| v[i]).collect()),
        };
        Dataset {
            split: self.split,
            image_shape: self.image_shape,
            pixels: self.batch(indices).into_data(),
            targets,
        }
    }

    /// Rescales every pixel by dataset-wide mean and standard deviation of
    /// each channel.
    pub fn standardize(&mut self) {
        let [c, h, w] = self.image_shape;
        let plane = h * w;
        for ch in 0..c {
            let idx = || (0..self.len()).flat_map(move |i| (i * c + ch) * plane..(i * c + ch + 1) * plane);
            let count = (self.len() * plane) as f64;
            let mean = idx().map(|i| self.pixels[i]).sum::<f64>() / count;
            let var = idx().map(|i| (self.pixels[i] - mean).powi(2)).sum::<f64>() / count;
            let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
            for i in idx().collect::<Vec<_>>() {
                self.pixels[i] = (self.pixels[i] - mean) * scale;
            }
        }
    }
}

/// Per-class sample counts of a categorical dataset. Classes with no samples
/// are reported as zero.
pub fn class_frequencies(data: &Dataset) -> Result<Vec<usize>> {
    match &data.targets {
        Targets::Categorical { labels, classes } => {
            let mut counts = vec![0; *classes];
            for &l in labels {
                counts[l] += 1;
            }
            Ok(counts)
        }
        Targets::Dimensional(_) => Err(Error::contract(
            "class_frequencies",
            "dimensional datasets have no classes",
        )),
    }
}

/// The three official FER2013 partitions.
#[derive(Debug, Clone)]
pub struct Fer2013 {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Fer2013 {
    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Loads the FER2013 CSV (`emotion,pixels,Usage`). Pixels are scaled to
/// `[0, 1]`; `Training`, `PublicTest` and `PrivateTest` map to the train,
/// val and test splits.
pub fn load_fer2013_csv(path: &Path) -> Result<Fer2013> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    if header.trim() != FER2013_HEADER {
        return Err(parse_err(
            path,
            1,
            format!("expected header {FER2013_HEADER:?}, got {:?}", header.trim()),
        ));
    }
    const PIXELS: usize = FER2013_SIDE * FER2013_SIDE;
    let mut parts: [(Vec<f64>, Vec<usize>); 3] = Default::default();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let (Some(emotion), Some(pixels), Some(usage), None) =
            (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(parse_err(path, line_no, "expected 3 comma-separated fields"));
        };
        let label: usize = emotion
            .trim()
            .parse()
            .ok()
            .filter(|&l| l < FER2013_CLASSES)
            .ok_or_else(|| parse_err(path, line_no, format!("emotion {emotion:?} is not in 0..=6")))?;
        let slot = match usage.trim() {
            "Training" => 0,
            "PublicTest" => 1,
            "PrivateTest" => 2,
            other => return Err(parse_err(path, line_no, format!("unknown Usage tag {other:?}"))),
        };
        let (buf, labels) = &mut parts[slot];
        let start = buf.len();
        for tok in pixels.split_ascii_whitespace() {
            let v: u8 = tok
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("bad pixel value {tok:?}")))?;
            buf.push(f64::from(v) / 255.0);
        }
        let count = buf.len() - start;
        if count != PIXELS {
            return Err(parse_err(
                path,
                line_no,
                format!("expected {PIXELS} pixels, found {count}"),
            ));
        }
        labels.push(label);
    }
    let [train, val, test] = parts;
    let make = |split, (pixels, labels): (Vec<f64>, Vec<usize>)| {
        Dataset::new(
            split,
            [1, FER2013_SIDE, FER2013_SIDE],
            pixels,
            Targets::Categorical {
                labels,
                classes: FER2013_CLASSES,
            },
        )
    };
    Ok(Fer2013 {
        train: make(Split::Train, train)?,
        val: make(Split::Val, val)?,
        test: make(Split::Test, test)?,
    })
}

/// Loads every split listed in a manifest CSV.
///
/// Header `path,channels,height,width,split,label` (categorical, `classes`
/// inferred as `max(label) + 1` unless given) or
/// `path,channels,height,width,split,valence,arousal` (dimensional). Each
/// `path`, relative to the manifest's directory, names a file of raw
/// little-endian `f64` values in `[c, h, w]` order.
pub fn load_manifest(path: &Path, classes: Option<usize>) -> Result<Vec<Dataset>> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .map(|(_, h)| h.trim())
        .ok_or_else(|| parse_err(path, 1, "empty manifest"))?;
    let task = match header {
        "path,channels,height,width,split,label" => Task::Categorical,
        "path,channels,height,width,split,valence,arousal" => Task::Dimensional,
        other => return Err(parse_err(path, 1, format!("unrecognized manifest header {other:?}"))),
    };
    let mut shape: Option<[usize; 3]> = None;
    let mut rows: Vec<(Split, Vec<f64>, Vec<f64>)> = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let expected = if task == Task::Categorical { 6 } else { 7 };
        if fields.len() != expected {
            return Err(parse_err(path, line_no, format!("expected {expected} fields")));
        }
        let dims: Vec<usize> = fields[1..4]
            .iter()
            .map(|f| f.parse().map_err(|_| parse_err(path, line_no, format!("bad extent {f:?}"))))
            .collect::<Result<_>>()?;
        let dims = [dims[0], dims[1], dims[2]];
        match shape {
            None => shape = Some(dims),
            Some(s) if s != dims => {
                return Err(parse_err(path, line_no, format!("shape {dims:?} differs from {s:?}")))
            }
            _ => {}
        }
        let split: Split = fields[4]
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("unknown split {:?}", fields[4])))?;
        let target: Vec<f64> = fields[5..]
            .iter()
            .map(|f| f.parse().map_err(|_| parse_err(path, line_no, format!("bad label {f:?}"))))
            .collect::<Result<_>>()?;
        let file = base.join(fields[0]);
        let raw = fs::read(&file)?;
        let count: usize = dims.iter().product();
        if raw.len() != count * 8 {
            return Err(parse_err(
                path,
                line_no,
                format!("{} holds {} bytes, expected {}", file.display(), raw.len(), count * 8),
            ));
        }
        let pixels = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        rows.push((split, pixels, target));
    }
    let shape = shape.ok_or_else(|| parse_err(path, 1, "manifest lists no samples"))?;
    let classes = match task {
        Task::Categorical => Some(classes.unwrap_or_else(|| {
            rows.iter().map(|r| r.2[0] as usize + 1).max().unwrap_or(0)
        })),
        Task::Dimensional => None,
    };
    let mut out = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let selected: Vec<_> = rows.iter().filter(|r| r.0 == split).collect();
        if selected.is_empty() {
            continue;
        }
        let pixels = selected.iter().flat_map(|r| r.1.iter().copied()).collect();
        let targets = match classes {
            Some(classes) => Targets::Categorical {
                labels: selected
                    .iter()
                    .map(|r| {
                        let l = r.2[0];
                        if l < 0.0 || l.fract() != 0.0 {
                            Err(Error::Config(format!("label {l} is not a class index")))
                        } else {
                            Ok(l as usize)
                        }
                    })
                    .collect::<Result<_>>()?,
                classes,
            },
            None => Targets::Dimensional(selected.iter().map(|r| [r.2[0], r.2[1]]).collect()),
        };
        out.push(Dataset::new(split, shape, pixels, targets)?);
    }
    Ok(out)
}

/// Writes `data` as a manifest plus one raw tensor file per sample under
/// `dir`, returning the manifest path.
pub fn write_manifest(datasets: &[&Dataset], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = dir.join("manifest.csv");
    let mut out = BufWriter::new(File::create(&manifest)?);
    let task = datasets
        .first()
        .map(|d| d.task())
        .ok_or_else(|| Error::contract("write_manifest", "no datasets"))?;
    match task {
        Task::Categorical => writeln!(out, "path,channels,height,width,split,label")?,
        Task::Dimensional => writeln!(out, "path,channels,height,width,split,valence,arousal")?,
    }
    for data in datasets {
        if data.task() != task {
            return Err(Error::contract("write_manifest", "mixed tasks"));
        }
        let [c, h, w] = data.image_shape();
        for i in 0..data.len() {
            let name = format!("{}_{i:06}.f64", data.split);
            let bytes: Vec<u8> = data.image(i).data().iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(dir.join(&name), bytes)?;
            match &data.targets {
                Targets::Categorical { labels, .. } => {
                    writeln!(out, "{name},{c},{h},{w},{},{}", data.split, labels[i])?
                }
                Targets::Dimensional(v) => {
                    writeln!(out, "{name},{c},{h},{w},{},{},{}", data.split, v[i][0], v[i][1])?
                }
            }
        }
    }
    out.flush()?;
    Ok(manifest)
}

/// Synthetic image families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// One Gaussian blob per image; class `k` sits at angle `2πk/K` on a
    /// circle around the centre.
    Blobs,
    /// One ring per image; class `k` has radius proportional to `k + 1`.
    Rings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: SynthKind,
    /// Samples per class (categorical) or in total (dimensional).
    pub per_class: usize,
    /// Optional per-class overrides of `per_class`, for imbalanced sets.
    #[serde(default)]
    pub class_counts: Option<Vec<usize>>,
    pub size: usize,
    #[serde(default)]
    pub noise: f64,
    pub task: Task,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_classes() -> usize {
    2
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 4 {
            return Err(Error::Config(format!("image size {} is below 4", self.size)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be finite and >= 0", self.noise)));
        }
        if self.task == Task::Categorical {
            if self.classes < 2 {
                return Err(Error::Config("synthetic categorical data needs >= 2 classes".into()));
            }
            if let Some(counts) = &self.class_counts {
                if counts.len() != self.classes || counts.contains(&0) {
                    return Err(Error::Config(format!(
                        "class_counts must list {} positive counts",
                        self.classes
                    )));
                }
                return Ok(());
            }
        }
        if self.per_class == 0 {
            return Err(Error::Config("per_class must be >= 1".into()));
        }
        Ok(())
    }

    fn counts(&self) -> Vec<usize> {
        self.class_counts
            .clone()
            .unwrap_or_else(|| vec![self.per_class; self.classes])
    }
}

/// Column position encoding valence `v` and row position encoding arousal
/// `a` on a `size`-pixel grid. Positive arousal is up.
pub fn dimensional_edges(size: usize, valence: f64, arousal: f64) -> (f64, f64) {
    let half = (size as f64 - 1.0) / 2.0;
    let reach = 0.4 * size as f64;
    (half + valence * reach, half - arousal * reach)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Generates a seeded synthetic dataset.
///
/// Categorical images draw the class pattern with up to one pixel of random
/// jitter, plus `N(0, noise²)` pixel noise. Dimensional images place a soft
/// vertical edge at the column given by valence (bright to its left) and a
/// soft horizontal edge at the row given by arousal (striped texture above
/// it), so both coordinates survive global pooling.
pub fn synth_generate(spec: &SynthSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.size;
    let s = size as f64;
    let centre = (s - 1.0) / 2.0;
    let noise = Normal::new(0.0, spec.noise).expect("noise validated");
    let mut pixels = Vec::new();
    let add_noise = |img: &mut [f64], rng: &mut ChaCha8Rng| {
        if spec.noise > 0.0 {
            img.iter_mut().for_each(|p| *p += noise.sample(rng));
        }
    };

    let targets = match spec.task {
        Task::Categorical => {
            let k = spec.classes;
            let mut labels = Vec::new();
            for (class, &count) in spec.counts().iter().enumerate() {
                for _ in 0..count {
                    let jx = rng.random_range(-1.0..=1.0);
                    let jy = rng.random_range(-1.0..=1.0);
                    let mut img = vec![0.0; size * size];
                    match spec.kind {
                        SynthKind::Blobs => {
                            let angle = 2.0 * PI * class as f64 / k as f64;
                            let cx = centre + 0.28 * s * angle.cos() + jx;
                            let cy = centre + 0.28 * s * angle.sin() + jy;
                            let width = s / 8.0;
                            for r in 0..size {
                                for c in 0..size {
                                    let d2 = (c as f64 - cx).powi(2) + (r as f64 - cy).powi(2);
                                    img[r * size + c] = (-d2 / (2.0 * width * width)).exp();
                                }
                            }
                        }
                        SynthKind::Rings => {
                            let radius = 0.4 * s * (class + 1) as f64 / k as f64;
                            let (cx, cy) = (centre + jx, centre + jy);
                            for r in 0..size {
                                for c in 0..size {
                                    let d = ((c as f64 - cx).powi(2) + (r as f64 - cy).powi(2)).sqrt();
                                    img[r * size + c] = (-(d - radius).powi(2) / 2.0).exp();
                                }
                            }
                        }
                    }
                    add_noise(&mut img, &mut rng);
                    pixels.extend(img);
                    labels.push(class);
                }
            }
            Targets::Categorical { labels, classes: k }
        }
        Task::Dimensional => {
            let mut values = Vec::with_capacity(spec.per_class);
            for _ in 0..spec.per_class {
                let v: f64 = rng.random_range(-1.0..=1.0);
                let a: f64 = rng.random_range(-1.0..=1.0);
                let (col_edge, row_edge) = dimensional_edges(size, v, a);
                let mut img = vec![0.0; size * size];
                for r in 0..size {
                    let above = sigmoid((row_edge - r as f64) * 2.0);
                    let stripe = if r % 2 == 0 { 0.5 } else { 0.0 };
                    for c in 0..size {
                        let left = sigmoid((col_edge - c as f64) * 2.0);
                        img[r * size + c] = left + stripe * above;
                    }
                }
                add_noise(&mut img, &mut rng);
                pixels.extend(img);
                values.push([v, a]);
            }
            Targets::Dimensional(values)
        }
    };
    Dataset::new(split, [1, size, size], pixels, targets)
}

/// Prediction series read from a prediction CSV.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Categorical { pred: Vec<usize>, gt: Vec<usize> },
    Dimensional { pred: Vec<[f64; 2]>, gt: Vec<[f64; 2]> },
}

pub const CATEGORICAL_PRED_HEADER: &str = "pred,gt";
pub const DIMENSIONAL_PRED_HEADER: &str = "pred_valence,pred_arousal,gt_valence,gt_arousal";

/// Reads a prediction CSV: `pred,gt` (class indices) or
/// `pred_valence,pred_arousal,gt_valence,gt_arousal` (values in `[−1, 1]`).
pub fn load_predictions(path: &Path, task: Task) -> Result<Predictions> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l.trim()).unwrap_or("");
    let expected = match task {
        Task::Categorical => CATEGORICAL_PRED_HEADER,
        Task::Dimensional => DIMENSIONAL_PRED_HEADER,
    };
    if header != expected {
        return Err(parse_err(path, 1, format!("expected header {expected:?}, got {header:?}")));
    }
    let mut cat = (Vec::new(), Vec::new());
    let mut dim = (Vec::new(), Vec::new());
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        match task {
            Task::Categorical => {
                let [p, g] = fields[..] else {
                    return Err(parse_err(path, line_no, "expected 2 fields"));
                };
                let parse = |f: &str| {
                    f.parse::<usize>()
                        .map_err(|_| parse_err(path, line_no, format!("bad class index {f:?}")))
                };
                cat.0.push(parse(p)?);
                cat.1.push(parse(g)?);
            }
            Task::Dimensional => {
                if fields.len() != 4 {
                    return Err(parse_err(path, line_no, "expected 4 fields"));
                }
                let mut v = [0.0; 4];
                for (slot, f) in v.iter_mut().zip(&fields) {
                    *slot = f
                        .parse()
                        .map_err(|_| parse_err(path, line_no, format!("bad value {f:?}")))?;
                    if !(-1.0..=1.0).contains(slot) {
                        return Err(parse_err(
                            path,
                            line_no,
                            format!("value {slot} outside [-1, 1]"),
                        ));
                    }
                }
                dim.0.push([v[0], v[1]]);
                dim.1.push([v[2], v[3]]);
            }
        }
    }
    Ok(match task {
        Task::Categorical => Predictions::Categorical {
            pred: cat.0,
            gt: cat.1,
        },
        Task::Dimensional => Predictions::Dimensional {
            pred: dim.0,
            gt: dim.1,
        },
    })
}

/// Writes predictions in the format read by [`load_predictions`]. Values
/// use Rust's shortest round-trip float formatting.
pub fn write_predictions(path: &Path, predictions: &Predictions) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    match predictions {
        Predictions::Categorical { pred, gt } => {
            writeln!(out, "{CATEGORICAL_PRED_HEADER}")?;
            for (p, g) in pred.iter().zip(gt) {
                writeln!(out, "{p},{g}")?;
            }
        }
        Predictions::Dimensional { pred, gt } => {
            writeln!(out, "{DIMENSIONAL_PRED_HEADER}")?;
            for (p, g) in pred.iter().zip(gt) {
                writeln!(out, "{},{},{},{}", p[0], p[1], g[0], g[1])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}
