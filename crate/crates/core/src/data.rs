use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::GrayImage;
use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONSTRUCTION_FILE: &str = "construction.json";
pub const MANIFEST_VERSION: &str = "1";

/// Smallest outer semi-axis of a generated shape, in pixels.
pub const MIN_SEMI_AXIS: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Training pool, divided into labeled and unlabeled at load time.
    Train,
    Labeled,
    Unlabeled,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        [Split::Train, Split::Labeled, Split::Unlabeled, Split::Val, Split::Test]
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| CoreError::Config(format!("unknown split '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_path: Option<String>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub num_classes: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| json_err(&path, e))?;
        m.validate(dir)?;
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| json_err(&path, e))?;
        fs::write(&path, text).map_err(|e| io_err(&path, e))
    }

    /// Ids unique, referenced files present, labels present where required.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(CoreError::Validation(format!("num_classes {} outside 2..=256", self.num_classes)));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(CoreError::Validation(format!("duplicate sample id '{}'", e.id)));
            }
            let needs_label = !matches!(e.split, Split::Unlabeled);
            if needs_label && e.label_path.is_none() {
                return Err(CoreError::Validation(format!("sample '{}' in split {:?} has no label", e.id, e.split)));
            }
            for p in std::iter::once(&e.image_path).chain(e.label_path.as_ref()) {
                if !dir.join(p).is_file() {
                    return Err(CoreError::Validation(format!("sample '{}': missing file {p}", e.id)));
                }
            }
        }
        Ok(())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CoreError {
    CoreError::Io { path: path.display().to_string(), source }
}

fn json_err(path: &Path, source: serde_json::Error) -> CoreError {
    CoreError::Json { path: path.display().to_string(), source }
}

fn image_err(path: &Path, source: image::ImageError) -> CoreError {
    CoreError::Image { path: path.display().to_string(), source }
}

/// Writes a `1×H×W` image in `[0, 1]` as an 8-bit grayscale PNG.
pub fn write_image_png(path: &Path, x: &Array3<f32>) -> Result<()> {
    let (c, h, w) = x.dim();
    if c != 1 {
        return Err(CoreError::Shape(format!("only single-channel images can be written, got {c} channels")));
    }
    let bytes: Vec<u8> = x.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dimensions");
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn read_image_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Ok(Array3::from_shape_vec((1, h as usize, w as usize), data).expect("buffer matches dimensions"))
}

/// Writes class ids as the pixel values of an 8-bit grayscale PNG.
pub fn write_label_png(path: &Path, y: &Array2<u8>) -> Result<()> {
    let (h, w) = y.dim();
    let img = GrayImage::from_raw(w as u32, h as u32, y.iter().copied().collect()).expect("buffer matches dimensions");
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn read_label_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).expect("buffer matches dimensions"))
}

/// One nested-ellipse structure: outer ring, middle ring and core share a
/// centre and orientation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipseTriplet {
    /// `(row, col)` in continuous pixel coordinates.
    pub center: (f64, f64),
    /// Outer semi-axes `(a, b)` in pixels.
    pub semi_axes: (f64, f64),
    /// Rotation in radians.
    pub angle: f64,
    /// Middle ellipse size relative to the outer one.
    pub mid_scale: f64,
    /// Core ellipse size relative to the outer one.
    pub core_scale: f64,
    /// Intensities of outer ring, middle ring and core.
    pub intensities: [f64; 3],
}

impl EllipseTriplet {
    fn bounding_radius(&self) -> f64 {
        self.semi_axes.0.max(self.semi_axes.1)
    }

    /// Normalised radius of pixel centre `(r, c)`: 1 on the outer ellipse.
    fn rho(&self, r: usize, c: usize) -> f64 {
        let (dy, dx) = (r as f64 + 0.5 - self.center.0, c as f64 + 0.5 - self.center.1);
        let (s, co) = self.angle.sin_cos();
        let u = dx * co + dy * s;
        let v = -dx * s + dy * co;
        ((u / self.semi_axes.0).powi(2) + (v / self.semi_axes.1).powi(2)).sqrt()
    }

    /// Structure level at a pixel: 0 outside, 1 outer ring, 2 middle ring, 3 core.
    fn level(&self, r: usize, c: usize) -> u8 {
        let rho = self.rho(r, c);
        if rho <= self.core_scale {
            3
        } else if rho <= self.mid_scale {
            2
        } else if rho <= 1.0 {
            1
        } else {
            0
        }
    }
}

/// How one synthetic image was built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructionRecord {
    pub id: String,
    pub background: f64,
    pub noise_sigma: f64,
    pub triplets: Vec<EllipseTriplet>,
    /// Class ids the construction places in the label, ascending.
    pub classes_present: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub size: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n_train: 200, n_val: 20, n_test: 40, size: 64, num_classes: 4, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.num_classes) {
            return Err(CoreError::Config(format!("synthetic data supports 2..=4 classes, got {}", self.num_classes)));
        }
        if self.size < 24 {
            return Err(CoreError::Config(format!("image size {} is below the minimum of 24", self.size)));
        }
        Ok(())
    }
}

fn sample_triplet<R: Rng + ?Sized>(rng: &mut R, size: f64) -> EllipseTriplet {
    let max_axis = (0.25 * size).max(MIN_SEMI_AXIS);
    let a = rng.random_range(MIN_SEMI_AXIS..=max_axis);
    let b = rng.random_range(MIN_SEMI_AXIS..=max_axis);
    let radius = a.max(b);
    let lo = radius + 1.0;
    let hi = size - radius - 1.0;
    let center = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
    let core_scale: f64 = rng.random_range(0.25..=0.45);
    let mid_scale = rng.random_range((core_scale + 0.2).max(0.55)..=0.75);
    EllipseTriplet {
        center,
        semi_axes: (a, b),
        angle: rng.random_range(0.0..PI),
        mid_scale,
        core_scale,
        intensities: [rng.random_range(0.55..=0.75), rng.random_range(0.3..=0.45), rng.random_range(0.8..=1.0)],
    }
}

fn disjoint(a: &EllipseTriplet, b: &EllipseTriplet) -> bool {
    let d = ((a.center.0 - b.center.0).powi(2) + (a.center.1 - b.center.1).powi(2)).sqrt();
    d >= a.bounding_radius() + b.bounding_radius() + 2.0
}

/// Generates one image, its label and the record of how it was built.
pub fn synth_sample<R: Rng + ?Sized>(
    rng: &mut R,
    id: &str,
    size: usize,
    num_classes: usize,
) -> (Array3<f32>, Array2<u8>, ConstructionRecord) {
    let fsize = size as f64;
    let background = rng.random_range(0.05..=0.2);
    let noise_sigma = rng.random_range(0.02..=0.08);
    let want_two = rng.random_bool(0.5);
    let mut triplets = vec![sample_triplet(rng, fsize)];
    if want_two {
        for _ in 0..100 {
            let t = sample_triplet(rng, fsize);
            if disjoint(&triplets[0], &t) {
                triplets.push(t);
                break;
            }
        }
    }
    let top = (num_classes - 1) as u8;
    let mut label = Array2::<u8>::zeros((size, size));
    let mut clean = Array2::<f64>::from_elem((size, size), background);
    for t in &triplets {
        for ((r, c), y) in label.indexed_iter_mut() {
            let level = t.level(r, c);
            if level > 0 {
                *y = level.min(top);
                clean[[r, c]] = t.intensities[level as usize - 1];
            }
        }
    }
    let noise = Normal::new(0.0, noise_sigma).expect("positive sigma");
    let image = Array3::from_shape_fn((1, size, size), |(_, r, c)| {
        (clean[[r, c]] + noise.sample(rng)).clamp(0.0, 1.0) as f32
    });
    let classes_present: Vec<u8> = (0..=top).collect();
    let record = ConstructionRecord { id: id.to_string(), background, noise_sigma, triplets, classes_present };
    (image, label, record)
}

/// Generates a corpus in memory: `(split, id, image, label, record)` per sample.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Vec<(Split, String, Array3<f32>, Array2<u8>, ConstructionRecord)>> {
    cfg.validate()?;
    let splits = [(Split::Train, "train", cfg.n_train), (Split::Val, "val", cfg.n_val), (Split::Test, "test", cfg.n_test)];
    let mut out = Vec::with_capacity(cfg.n_train + cfg.n_val + cfg.n_test);
    let mut index = 0u64;
    for (split, prefix, n) in splits {
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(index);
            index += 1;
            let id = format!("{prefix}_{i:04}");
            let (x, y, rec) = synth_sample(&mut rng, &id, cfg.size, cfg.num_classes);
            out.push((split, id, x, y, rec));
        }
    }
    Ok(out)
}

/// Writes a synthetic corpus (PNGs, manifest, construction records) to `dir`.
pub fn synth_generate(cfg: &SynthConfig, dir: &Path) -> Result<Manifest> {
    let samples = synth_corpus(cfg)?;
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    let mut records = Vec::with_capacity(samples.len());
    for (split, id, x, y, rec) in samples {
        let image_path = format!("images/{id}.png");
        let label_path = format!("labels/{id}.png");
        write_image_png(&dir.join(&image_path), &x)?;
        write_label_png(&dir.join(&label_path), &y)?;
        entries.push(ManifestEntry { id, image_path, label_path: Some(label_path), split });
        records.push(rec);
    }
    let manifest = Manifest { version: MANIFEST_VERSION.into(), num_classes: cfg.num_classes, entries };
    manifest.write(dir)?;
    let path = dir.join(CONSTRUCTION_FILE);
    let text = serde_json::to_string_pretty(&records).map_err(|e| json_err(&path, e))?;
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

/// A loaded sample; `label` is `None` for unlabeled samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Array3<f32>,
    pub label: Option<Array2<u8>>,
    pub split: Split,
}

/// Labeled sample as seen by the training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub image: Array3<f32>,
    pub label: Array2<u8>,
}

/// Unlabeled sample; there is no label to reach.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSample {
    pub id: String,
    pub image: Array3<f32>,
}

/// Deterministic labeled/unlabeled partition: the first `⌈ratio·n⌉` items of
/// a seeded shuffle are labeled.
pub fn split_labeled<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(CoreError::Config(format!("labeled_ratio {ratio} must lie in (0, 1]")));
    }
    let n = items.len();
    // Guard against products such as 0.07 * 100 = 7.000000000000001.
    let n_labeled = ((ratio * n as f64) - 1e-9).ceil().clamp(0.0, n as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let labeled = order[..n_labeled].iter().map(|&i| items[i].clone()).collect();
    let unlabeled = order[n_labeled..].iter().map(|&i| items[i].clone()).collect();
    Ok((labeled, unlabeled))
}

/// Everything the training loop and evaluation read from a corpus.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub num_classes: usize,
    pub labeled: Vec<LabeledSample>,
    pub unlabeled: Vec<UnlabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl Corpus {
    /// Loads `dir/manifest.json`. Entries in the `train` split are divided by
    /// `labeled_ratio`; labels of unlabeled entries are never read.
    pub fn load(dir: &Path, labeled_ratio: f64, seed: u64) -> Result<Self> {
        let manifest = Manifest::read(dir)?;
        let train: Vec<&ManifestEntry> = manifest.entries.iter().filter(|e| e.split == Split::Train).collect();
        let (lab_train, unlab_train) = split_labeled(&train, labeled_ratio, seed)?;
        let load_labeled = |e: &ManifestEntry| -> Result<LabeledSample> {
            let s = load_sample(dir, e, true)?;
            Ok(LabeledSample { id: s.id, image: s.image, label: s.label.expect("label requested") })
        };
        let load_unlabeled = |e: &ManifestEntry| -> Result<UnlabeledSample> {
            let s = load_sample(dir, e, false)?;
            Ok(UnlabeledSample { id: s.id, image: s.image })
        };
        let of = |split: Split| manifest.entries.iter().filter(move |e| e.split == split);
        let mut labeled: Vec<LabeledSample> = lab_train.iter().map(|e| load_labeled(e)).collect::<Result<_>>()?;
        labeled.extend(of(Split::Labeled).map(load_labeled).collect::<Result<Vec<_>>>()?);
        let mut unlabeled: Vec<UnlabeledSample> =
            unlab_train.iter().map(|e| load_unlabeled(e)).collect::<Result<_>>()?;
        unlabeled.extend(of(Split::Unlabeled).map(load_unlabeled).collect::<Result<Vec<_>>>()?);
        let val = of(Split::Val).map(load_labeled).collect::<Result<_>>()?;
        let test = of(Split::Test).map(load_labeled).collect::<Result<_>>()?;
        let corpus = Self { num_classes: manifest.num_classes, labeled, unlabeled, val, test };
        corpus.check_labels()?;
        Ok(corpus)
    }

    fn check_labels(&self) -> Result<()> {
        for s in self.labeled.iter().chain(&self.val).chain(&self.test) {
            if let Some(&bad) = s.label.iter().find(|&&v| v as usize >= self.num_classes) {
                return Err(CoreError::Validation(format!("sample '{}' has class id {bad}", s.id)));
            }
            if s.label.dim() != (s.image.dim().1, s.image.dim().2) {
                return Err(CoreError::Validation(format!("sample '{}': label and image sizes differ", s.id)));
            }
        }
        Ok(())
    }

    /// Mean intensity over all training images, labeled and unlabeled.
    pub fn train_mean(&self) -> f32 {
        let (mut sum, mut n) = (0.0f64, 0usize);
        let images = self.labeled.iter().map(|s| &s.image).chain(self.unlabeled.iter().map(|s| &s.image));
        for x in images {
            sum += x.iter().map(|&v| v as f64).sum::<f64>();
            n += x.len();
        }
        if n == 0 {
            0.0
        } else {
            (sum / n as f64) as f32
        }
    }

    pub fn split(&self, split: Split) -> Result<&[LabeledSample]> {
        match split {
            Split::Val => Ok(&self.val),
            Split::Test => Ok(&self.test),
            Split::Labeled | Split::Train => Ok(&self.labeled),
            Split::Unlabeled => Err(CoreError::Config("the unlabeled split has no labels to evaluate".into())),
        }
    }
}

/// Reads one manifest entry; labels are only read when `with_label` is set.
pub fn load_sample(dir: &Path, entry: &ManifestEntry, with_label: bool) -> Result<Sample> {
    let image = read_image_png(&dir.join(&entry.image_path))?;
    let label = match (&entry.label_path, with_label) {
        (Some(p), true) => Some(read_label_png(&dir.join(p))?),
        (None, true) => {
            return Err(CoreError::Validation(format!("sample '{}' has no label", entry.id)));
        }
        (_, false) => None,
    };
    Ok(Sample { id: entry.id.clone(), image, label, split: entry.split })
}

/// Cyclic index stream reshuffled at the start of every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stream {
    len: usize,
    seed: u64,
    stream_id: u64,
    epoch: u64,
    pos: usize,
    order: Vec<usize>,
}

impl Stream {
    pub fn new(len: usize, seed: u64, stream_id: u64) -> Result<Self> {
        if len == 0 {
            return Err(CoreError::Config(format!("data stream {stream_id} is empty")));
        }
        let mut s = Self { len, seed, stream_id, epoch: 0, pos: 0, order: Vec::new() };
        s.order = s.permutation(0);
        Ok(s)
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((self.stream_id << 40) | epoch);
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_indices(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.len {
                self.epoch += 1;
                self.pos = 0;
                self.order = self.permutation(self.epoch);
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Paired labeled/unlabeled sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Loader {
    pub labeled: Stream,
    pub unlabeled: Stream,
    pub b_l: usize,
    pub b_u: usize,
}

impl Loader {
    pub fn new(n_labeled: usize, n_unlabeled: usize, b_l: usize, b_u: usize, seed: u64) -> Result<Self> {
        if b_l == 0 || b_u == 0 {
            return Err(CoreError::Config("batch sizes must be positive".into()));
        }
        Ok(Self { labeled: Stream::new(n_labeled, seed, 0)?, unlabeled: Stream::new(n_unlabeled, seed, 1)?, b_l, b_u })
    }

    /// Indices into the labeled and unlabeled sample lists.
    pub fn next_batch(&mut self) -> (Vec<usize>, Vec<usize>) {
        (self.labeled.next_indices(self.b_l), self.unlabeled.next_indices(self.b_u))
    }
}

/// Stacks `C×H×W` images into a `B×C×H×W` batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Array3<f32>>) -> Result<Array4<f32>> {
    let views: Vec<_> = images.into_iter().map(|x| x.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| CoreError::Shape(e.to_string()))
}

/// Stacks `H×W` label maps into a `B×H×W` batch.
pub fn stack_labels<'a>(labels: impl IntoIterator<Item = &'a Array2<u8>>) -> Result<Array3<u8>> {
    let views: Vec<_> = labels.into_iter().map(|y| y.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| CoreError::Shape(e.to_string()))
}
