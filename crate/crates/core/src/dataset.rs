//! Class-per-directory image datasets: manifest, seeded split, augmentation
//! and the batch stream consumed by training.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::sin_cos_deg;
use crate::image::{self, quantize, sample_bilinear, Image, ImageError};
use crate::nn::Tensor;

pub const DEFAULT_VAL_FRAC: f64 = 0.30;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const FILL_GRAY: [u8; 3] = [128; 3];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no class directories with images under {0}")]
    NoClasses(PathBuf),
    #[error("class directory {0} contains no PNG images")]
    EmptyClass(PathBuf),
    #[error("the {0:?} split is empty")]
    EmptyPart(Part),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DatasetError {
    DatasetError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
}

/// Classes, files and split assignments of one dataset run. Split keys
/// are `"<class>/<file>"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub images: BTreeMap<String, Vec<String>>,
    pub split: BTreeMap<String, Part>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn image_count(&self) -> usize {
        self.images.values().map(Vec::len).sum()
    }

    fn key(class: &str, file: &str) -> String {
        format!("{class}/{file}")
    }

    pub fn part_of(&self, class: &str, file: &str) -> Option<Part> {
        self.split.get(&Self::key(class, file)).copied()
    }

    /// `(path, label)` of every image in `part`, class order then file order.
    pub fn entries(&self, part: Part) -> Vec<(PathBuf, usize)> {
        let mut out = Vec::new();
        for (label, class) in self.classes.iter().enumerate() {
            for file in &self.images[class] {
                if self.part_of(class, file) == Some(part) {
                    out.push((self.root.join(class).join(file), label));
                }
            }
        }
        out
    }

    pub fn count(&self, class: &str, part: Part) -> usize {
        self.images[class]
            .iter()
            .filter(|f| self.part_of(class, f) == Some(part))
            .count()
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| DatasetError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        fs::write(path, json).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| DatasetError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// One class per subdirectory of `root`, lexicographic. `class_limit`
/// keeps the first K classes. Every image starts in the train split.
pub fn build_manifest(root: &Path, class_limit: Option<usize>) -> Result<DatasetManifest, DatasetError> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| io_err(root, e))? {
        let entry = entry.map_err(|e| io_err(root, e))?;
        if entry.path().is_dir() {
            if let Some(name) = entry.file_name().to_str() {
                dirs.push(name.to_string());
            }
        }
    }
    dirs.sort();
    if let Some(k) = class_limit {
        dirs.truncate(k);
    }
    if dirs.is_empty() {
        return Err(DatasetError::NoClasses(root.to_path_buf()));
    }
    let mut images = BTreeMap::new();
    let mut split = BTreeMap::new();
    for class in &dirs {
        let dir = root.join(class);
        let mut files = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| io_err(&dir, e))? {
            let path = entry.map_err(|e| io_err(&dir, e))?.path();
            if path.is_file() && is_png(&path) {
                if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                    files.push(name.to_string());
                }
            }
        }
        if files.is_empty() {
            return Err(DatasetError::EmptyClass(dir));
        }
        files.sort();
        for f in &files {
            split.insert(DatasetManifest::key(class, f), Part::Train);
        }
        images.insert(class.clone(), files);
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        classes: dirs,
        images,
        split,
        seed: 0,
    })
}

/// `round(val_frac · n)`, halves rounded up. The epsilon absorbs binary
/// representation error in products such as 0.3 · 5.
pub fn val_count(n: usize, val_frac: f64) -> usize {
    ((val_frac * n as f64 + 0.5 + 1e-9).floor() as usize).min(n)
}

/// Per class, a seeded shuffle of the sorted file list sends the first
/// `val_count(n)` files to validation.
pub fn split(manifest: &DatasetManifest, val_frac: f64, seed: u64) -> DatasetManifest {
    assert!((0.0..1.0).contains(&val_frac), "val_frac must lie in [0, 1)");
    let mut out = manifest.clone();
    out.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in &manifest.classes {
        let files = &manifest.images[class];
        let mut order: Vec<usize> = (0..files.len()).collect();
        order.shuffle(&mut rng);
        let n_val = val_count(files.len(), val_frac);
        for (rank, &i) in order.iter().enumerate() {
            let part = if rank < n_val { Part::Val } else { Part::Train };
            out.split.insert(DatasetManifest::key(class, &files[i]), part);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub hflip_prob: f64,
    /// Degrees.
    pub rotation_range: f64,
    /// Fraction of the image side.
    pub shift_range: f64,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            rotation_range: 15.0,
            shift_range: 0.1,
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    pub fn none() -> Self {
        Self {
            hflip_prob: 0.0,
            rotation_range: 0.0,
            shift_range: 0.0,
            seed: 0,
        }
    }

    pub fn draw(&self, rng: &mut impl Rng) -> AugmentDraw {
        AugmentDraw {
            flip: rng.gen(),
            rotation: rng.gen_range(-1.0..=1.0),
            shift: [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)],
        }
    }
}

/// Raw uniforms behind one augmentation: `flip` in [0, 1), the others in
/// [-1, 1] and scaled by the policy ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip: f64,
    pub rotation: f64,
    pub shift: [f64; 2],
}

/// Flip, then rotate about the center (positive is counter-clockwise on
/// screen), then translate. One inverse warp with bilinear sampling;
/// pixels that come from outside the frame are gray.
pub fn augment(img: &Image, policy: &AugmentationPolicy, draw: &AugmentDraw) -> Image {
    let flip = draw.flip < policy.hflip_prob;
    let angle = draw.rotation * policy.rotation_range;
    let tx = draw.shift[0] * policy.shift_range * img.width as f64;
    let ty = draw.shift[1] * policy.shift_range * img.height as f64;
    let (s, c) = sin_cos_deg(angle);
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let mut out = Image::filled(img.width, img.height, FILL_GRAY);
    for y in 0..img.height {
        for x in 0..img.width {
            // Undo translation, then rotation (image y points down), then flip.
            let dx = x as f64 - tx - cx;
            let dy = y as f64 - ty - cy;
            let rx = c * dx - s * dy;
            let ry = s * dx + c * dy;
            let mut sx = cx + rx;
            let sy = cy + ry;
            if flip {
                sx = 2.0 * cx - sx;
            }
            if sx < -0.5 || sy < -0.5 || sx > img.width as f64 - 0.5 || sy > img.height as f64 - 0.5 {
                continue;
            }
            let rgb = [0, 1, 2].map(|ch| quantize(sample_bilinear(img, sx, sy, ch)));
            out.set(x, y, rgb);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tensor: Vec<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `N × 3 × side × side`.
    pub tensors: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamConfig {
    pub batch_size: usize,
    /// Network input side; images are center-cropped and resized to it.
    pub side: usize,
    pub shuffle: bool,
    pub policy: AugmentationPolicy,
}

impl StreamConfig {
    pub fn new(side: usize) -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            side,
            shuffle: true,
            policy: AugmentationPolicy::default(),
        }
    }
}

/// Decode, fit to `side`, optionally augment, scale to [0, 1].
pub fn load_sample(
    path: &Path,
    label: usize,
    side: usize,
    aug: Option<(&AugmentationPolicy, &AugmentDraw)>,
) -> Result<Sample, DatasetError> {
    let img = image::fit_square(&Image::load(path)?, side);
    let img = match aug {
        Some((policy, draw)) => augment(&img, policy, draw),
        None => img,
    };
    Ok(Sample {
        tensor: image::to_chw(&img),
        label,
    })
}

/// Lazily loaded batches for one epoch. The train stream is shuffled (when
/// `shuffle` is set) and augmented from a generator seeded by the policy
/// seed and the epoch; the validation stream is in manifest order and never
/// augmented.
pub struct BatchStream {
    items: Vec<(PathBuf, usize, Option<AugmentDraw>)>,
    config: StreamConfig,
    pos: usize,
}

impl BatchStream {
    pub fn batch_count(&self) -> usize {
        self.items.len().div_ceil(self.config.batch_size)
    }

    pub fn sample_count(&self) -> usize {
        self.items.len()
    }
}

impl Iterator for BatchStream {
    type Item = Result<Batch, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.items.len() {
            return None;
        }
        let end = (self.pos + self.config.batch_size).min(self.items.len());
        let chunk = &self.items[self.pos..end];
        self.pos = end;
        let side = self.config.side;
        let policy = self.config.policy;
        let samples: Result<Vec<Sample>, DatasetError> = chunk
            .par_iter()
            .map(|(path, label, draw)| load_sample(path, *label, side, draw.as_ref().map(|d| (&policy, d))))
            .collect();
        Some(samples.map(|samples| {
            let n = samples.len();
            let mut data = Vec::with_capacity(n * 3 * side * side);
            let mut labels = Vec::with_capacity(n);
            for s in samples {
                data.extend_from_slice(&s.tensor);
                labels.push(s.label);
            }
            Batch {
                tensors: Tensor::from_vec(&[n, 3, side, side], data).expect("sample tensors have the batch shape"),
                labels,
            }
        }))
    }
}

pub fn batches(
    manifest: &DatasetManifest,
    part: Part,
    config: &StreamConfig,
    epoch: u64,
) -> Result<BatchStream, DatasetError> {
    assert!(config.batch_size > 0, "batch size must be positive");
    let entries = manifest.entries(part);
    if entries.is_empty() {
        return Err(DatasetError::EmptyPart(part));
    }
    let items = match part {
        Part::Val => entries.into_iter().map(|(p, l)| (p, l, None)).collect(),
        Part::Train => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.policy.seed);
            rng.set_stream(epoch);
            let mut entries = entries;
            if config.shuffle {
                entries.shuffle(&mut rng);
            }
            entries
                .into_iter()
                .map(|(p, l)| {
                    let draw = config.policy.draw(&mut rng);
                    (p, l, Some(draw))
                })
                .collect()
        }
    };
    Ok(BatchStream {
        items,
        config: *config,
        pos: 0,
    })
}
