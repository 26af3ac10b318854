//! Labeled image manifests, preprocessing into the [-1, 1] working format,
//! stratified splitting and fusion with synthetic samples.
//!
//! Manifest text format:
//!
//! ```text
//! classes=<K>;image_size=<S>;seed=<n>[;train=<a>;val=<b>;test=<c>][;names=<n0>|<n1>|...]
//! <path>,<label>,<split>,<origin>
//! ...
//! ```
//!
//! Paths are relative to the manifest's directory (absolute paths are kept
//! as is). Optional split counts in the header are checked against the
//! records.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use confaug_nn::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::sampler::SyntheticSampleRecord;

pub const DEFAULT_IMAGE_SIZE: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}:{line}: {msg}")]
    ParseError { path: PathBuf, line: usize, msg: String },
    #[error("label {label} out of range for {classes} classes ({path})")]
    LabelOutOfRange { path: PathBuf, label: usize, classes: usize },
    #[error("duplicate path {0}")]
    DuplicatePath(PathBuf),
    #[error("header declares {declared} {split} records but manifest has {actual}")]
    CountMismatch { split: Split, declared: usize, actual: usize },
    #[error("invalid record {path}: {msg}")]
    InvalidRecord { path: PathBuf, msg: String },
    #[error("cannot decode image {path}: {msg}")]
    UndecodableImage { path: PathBuf, msg: String },
    #[error("class {class} has {count} records, at least 3 are needed for a three-way split")]
    ClassTooSmall { class: usize, count: usize },
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions((f64, f64, f64)),
    #[error("synthetic sample intended for class {class} but the manifest has {classes} classes")]
    ClassMismatch { class: usize, classes: usize },
    #[error("synthetic sample {0} has no image file on disk")]
    MissingImagePath(usize),
    #[error("empty {0} split")]
    EmptySplit(Split),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
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
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Synthetic,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Real => "real",
            Origin::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Origin {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "real" => Ok(Origin::Real),
            "synthetic" => Ok(Origin::Synthetic),
            other => Err(format!("unknown origin `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
    pub origin: Origin,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub class_count: usize,
    pub class_names: Vec<String>,
    pub records: Vec<ImageRecord>,
    pub image_size: usize,
    pub seed: u64,
    /// Directory that relative record paths are resolved against.
    pub root: PathBuf,
}

/// A single-channel image with values in [-1, 1], shape `[1, S, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelTensor<T = f32> {
    values: Tensor<T>,
}

impl<T: Scalar> PixelTensor<T> {
    /// Wraps a `[1, S, S]` tensor, clamping values into [-1, 1].
    pub fn new(values: Tensor<T>) -> Result<Self, String> {
        let s = values.shape();
        if s.len() != 3 || s[0] != 1 || s[1] != s[2] {
            return Err(format!("pixel tensor must be [1, S, S], got {s:?}"));
        }
        Ok(Self { values: values.clamp(-T::one(), T::one()) })
    }

    pub fn size(&self) -> usize {
        self.values.dim(1)
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.values
    }

    pub fn cast<U: Scalar>(&self) -> PixelTensor<U> {
        PixelTensor { values: self.values.cast() }
    }

    /// 8-bit grayscale, mapping [-1, 1] to [0, 255] with ties rounded to even.
    pub fn to_u8(&self) -> Vec<u8> {
        self.values.data().iter().map(|&v| to_byte(v.as_f64())).collect()
    }

    pub fn to_gray_image(&self) -> image::GrayImage {
        let s = self.size() as u32;
        image::GrayImage::from_raw(s, s, self.to_u8()).expect("buffer matches dimensions")
    }
}

pub fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round_ties_even() as u8
}

/// Decoded raster with intensities in [0, 255], channel-interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl RawImage {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        Self { width, height, channels: 1, data: data.into_iter().map(f64::from).collect() }
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Self {
        use image::DynamicImage as D;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, data): (usize, Vec<f64>) = match img {
            D::ImageLuma8(b) => (1, b.as_raw().iter().map(|&v| f64::from(v)).collect()),
            D::ImageLumaA8(b) => (2, b.as_raw().iter().map(|&v| f64::from(v)).collect()),
            D::ImageRgb8(b) => (3, b.as_raw().iter().map(|&v| f64::from(v)).collect()),
            D::ImageRgba8(b) => (4, b.as_raw().iter().map(|&v| f64::from(v)).collect()),
            D::ImageLuma16(b) => (1, b.as_raw().iter().map(|&v| f64::from(v) / 257.0).collect()),
            D::ImageLumaA16(b) => (2, b.as_raw().iter().map(|&v| f64::from(v) / 257.0).collect()),
            D::ImageRgb16(b) => (3, b.as_raw().iter().map(|&v| f64::from(v) / 257.0).collect()),
            D::ImageRgba16(b) => (4, b.as_raw().iter().map(|&v| f64::from(v) / 257.0).collect()),
            other => (4, other.to_rgba8().as_raw().iter().map(|&v| f64::from(v)).collect()),
        };
        Self { width: w, height: h, channels, data }
    }

    /// One intensity per pixel. Colour is reduced with Rec. 601 luma
    /// weights; alpha is ignored.
    fn luminance(&self) -> Vec<f64> {
        let c = self.channels;
        self.data
            .chunks(c)
            .map(|px| match c {
                1 | 2 => px[0],
                _ => 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2],
            })
            .collect()
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
fn resize_bilinear(src: &[f64], w: usize, h: usize, size: usize) -> Vec<f64> {
    let sx = w as f64 / size as f64;
    let sy = h as f64 / size as f64;
    let coord = |d: usize, scale: f64, n: usize| {
        let c = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f64)
    };
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let (y0, y1, fy) = coord(y, sy, h);
        for x in 0..size {
            let (x0, x1, fx) = coord(x, sx, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Grayscale, resize to `size`×`size`, map [0, 255] to [-1, 1].
pub fn preprocess_image<T: Scalar>(raw: &RawImage, size: usize) -> Result<PixelTensor<T>, String> {
    if raw.width == 0 || raw.height == 0 || raw.channels == 0 || size == 0 {
        return Err(format!("degenerate image {}x{}x{}", raw.width, raw.height, raw.channels));
    }
    if raw.data.len() != raw.width * raw.height * raw.channels {
        return Err("pixel buffer does not match dimensions".into());
    }
    let lum = raw.luminance();
    let resized = if raw.width == size && raw.height == size {
        lum
    } else {
        resize_bilinear(&lum, raw.width, raw.height, size)
    };
    let vals: Vec<T> = resized.iter().map(|&v| T::of((v / 127.5 - 1.0).clamp(-1.0, 1.0))).collect();
    PixelTensor::new(Tensor::new(&[1, size, size], vals).expect("size matches"))
}

pub fn load_image<T: Scalar>(path: &Path, size: usize) -> Result<PixelTensor<T>> {
    if !path.exists() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let undecodable = |msg: String| DatasetError::UndecodableImage { path: path.to_path_buf(), msg };
    let img = image::open(path).map_err(|e| undecodable(e.to_string()))?;
    preprocess_image(&RawImage::from_dynamic(&img), size).map_err(undecodable)
}

impl DatasetManifest {
    pub fn new(class_count: usize, image_size: usize, seed: u64, root: PathBuf) -> Self {
        Self {
            class_count,
            class_names: default_names(class_count),
            records: Vec::new(),
            image_size,
            seed,
            root,
        }
    }

    pub fn resolve(&self, rec: &ImageRecord) -> PathBuf {
        self.root.join(&rec.path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Records per class for one split.
    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut c = vec![0; self.class_count];
        for r in self.split(split) {
            c[r.label] += 1;
        }
        c
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.label >= self.class_count {
                return Err(DatasetError::LabelOutOfRange {
                    path: r.path.clone(),
                    label: r.label,
                    classes: self.class_count,
                });
            }
            if r.origin == Origin::Synthetic && r.split == Split::Test {
                return Err(DatasetError::InvalidRecord {
                    path: r.path.clone(),
                    msg: "synthetic records cannot be in the test split".into(),
                });
            }
            if !seen.insert(&r.path) {
                return Err(DatasetError::DuplicatePath(r.path.clone()));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "classes={};image_size={};seed={};train={};val={};test={}",
            self.class_count,
            self.image_size,
            self.seed,
            self.count(Split::Train),
            self.count(Split::Val),
            self.count(Split::Test)
        );
        if self.class_names != default_names(self.class_count) {
            s.push_str(";names=");
            s.push_str(&self.class_names.join("|"));
        }
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!("{},{},{},{}\n", r.path.display(), r.label, r.split, r.origin));
        }
        s
    }

    /// Writes the manifest. Record paths under the new manifest's directory
    /// are stored relative to it, anything else absolute.
    pub fn write(&self, path: &Path) -> Result<DatasetManifest> {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let dir_abs = absolute(&dir);
        let mut out = self.clone();
        for r in &mut out.records {
            let full = absolute(&self.root.join(&r.path));
            r.path = match full.strip_prefix(&dir_abs) {
                Ok(rel) => rel.to_path_buf(),
                Err(_) => full,
            };
        }
        out.root = dir;
        out.validate()?;
        std::fs::write(path, out.to_text())?;
        Ok(out)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| DatasetError::ParseError { path: path.to_path_buf(), line, msg };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| perr(1, "empty manifest".into()))?;
        let mut kv = BTreeMap::new();
        for part in header.trim().split(';') {
            let (k, v) = part.split_once('=').ok_or_else(|| perr(1, format!("bad header field `{part}`")))?;
            if kv.insert(k.trim(), v.trim()).is_some() {
                return Err(perr(1, format!("repeated header field `{k}`")));
            }
        }
        for k in kv.keys() {
            if !["classes", "image_size", "seed", "train", "val", "test", "names"].contains(k) {
                return Err(perr(1, format!("unknown header field `{k}`")));
            }
        }
        let num = |k: &str| -> Result<Option<u64>> {
            kv.get(k).map(|v| v.parse::<u64>().map_err(|_| perr(1, format!("bad value for `{k}`")))).transpose()
        };
        let class_count = num("classes")?.ok_or_else(|| perr(1, "missing `classes`".into()))? as usize;
        if class_count < 2 {
            return Err(perr(1, "class count must be at least 2".into()));
        }
        let image_size = num("image_size")?.unwrap_or(DEFAULT_IMAGE_SIZE as u64) as usize;
        let seed = num("seed")?.ok_or_else(|| perr(1, "missing `seed`".into()))?;
        let class_names = match kv.get("names") {
            Some(n) => {
                let names: Vec<String> = n.split('|').map(str::to_string).collect();
                if names.len() != class_count {
                    return Err(perr(1, format!("{} names for {class_count} classes", names.len())));
                }
                names
            }
            None => default_names(class_count),
        };
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(perr(i + 1, format!("expected 4 comma-separated fields, got {}", f.len())));
            }
            let label = f[1].trim().parse().map_err(|_| perr(i + 1, format!("bad label `{}`", f[1])))?;
            let split = f[2].trim().parse().map_err(|e| perr(i + 1, e))?;
            let origin = f[3].trim().parse().map_err(|e| perr(i + 1, e))?;
            records.push(ImageRecord { path: PathBuf::from(f[0].trim()), label, split, origin });
        }
        let m = Self {
            class_count,
            class_names,
            records,
            image_size,
            seed,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        m.validate()?;
        for split in Split::ALL {
            if let Some(declared) = num(&split.to_string())? {
                let actual = m.count(split);
                if declared as usize != actual {
                    return Err(DatasetError::CountMismatch { split, declared: declared as usize, actual });
                }
            }
        }
        Ok(m)
    }

    /// Decodes and preprocesses every image of a split, in manifest order.
    pub fn load_split<T: Scalar>(&self, split: Split) -> Result<LabeledImages<T>> {
        let recs: Vec<&ImageRecord> = self.split(split).collect();
        let images = recs
            .par_iter()
            .map(|r| load_image::<T>(&self.resolve(r), self.image_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledImages {
            size: self.image_size,
            images: images.into_iter().map(PixelTensor::into_tensor).collect(),
            labels: recs.iter().map(|r| r.label).collect(),
            keys: recs.iter().map(|r| r.path.display().to_string()).collect(),
        })
    }

    /// Keeps at most `per_class` training records per class (chosen with
    /// `seed`); other splits are untouched.
    pub fn subsample_train(&self, per_class: usize, seed: u64) -> DatasetManifest {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = HashSet::new();
        for c in 0..self.class_count {
            let mut idx: Vec<usize> = (0..self.records.len())
                .filter(|&i| self.records[i].split == Split::Train && self.records[i].label == c)
                .collect();
            idx.shuffle(&mut rng);
            keep.extend(idx.into_iter().take(per_class));
        }
        let mut out = self.clone();
        out.records = self
            .records
            .iter()
            .enumerate()
            .filter(|(i, r)| r.split != Split::Train || keep.contains(i))
            .map(|(_, r)| r.clone())
            .collect();
        out
    }
}

fn default_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class_{i}")).collect()
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    DatasetManifest::parse(&std::fs::read_to_string(path)?, path)
}

/// Stacked images with labels and stable per-example keys.
#[derive(Clone, Debug)]
pub struct LabeledImages<T> {
    pub size: usize,
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub keys: Vec<String>,
}

impl<T: Scalar> LabeledImages<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `[n, 1, S, S]` batch of the given indices.
    pub fn batch(&self, idx: &[usize]) -> Tensor<T> {
        let refs: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.images[i]).collect();
        Tensor::stack(&refs).expect("images share a shape")
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Per-class counts from largest-remainder apportionment of `n` items.
pub fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = (q + 1e-9).floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>().min(n);
    let mut order: Vec<usize> = (0..3).collect();
    // stable sort keeps train < val < test among equal remainders
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Assigns every record a split, class by class, with exact
/// largest-remainder counts. Membership depends only on the record paths and
/// `seed`, not on input order.
pub fn stratified_split(
    records: &[ImageRecord],
    class_count: usize,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetManifest> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadFractions(fractions));
    }
    let mut by_class: Vec<Vec<&ImageRecord>> = vec![Vec::new(); class_count];
    for r in records {
        if r.label >= class_count {
            return Err(DatasetError::LabelOutOfRange { path: r.path.clone(), label: r.label, classes: class_count });
        }
        if r.origin == Origin::Synthetic {
            return Err(DatasetError::InvalidRecord {
                path: r.path.clone(),
                msg: "only real records can be split".into(),
            });
        }
        by_class[r.label].push(r);
    }
    if let Some((class, v)) = by_class.iter().enumerate().find(|(_, v)| v.len() < 3) {
        return Err(DatasetError::ClassTooSmall { class, count: v.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(records.len());
    for members in &mut by_class {
        members.sort_by(|a, b| a.path.cmp(&b.path));
        members.shuffle(&mut rng);
        let counts = apportion(members.len(), fr);
        let mut it = members.iter();
        for (split, n) in Split::ALL.into_iter().zip(counts) {
            for r in it.by_ref().take(n) {
                out.push(ImageRecord { split, ..(*r).clone() });
            }
        }
    }
    let mut m = DatasetManifest::new(class_count, DEFAULT_IMAGE_SIZE, seed, PathBuf::new());
    m.records = out;
    m.validate()?;
    Ok(m)
}

/// Real manifest plus synthetic samples appended to the train split.
pub fn fuse_datasets<T>(real: &DatasetManifest, synthetic: &[SyntheticSampleRecord<T>]) -> Result<DatasetManifest> {
    let mut out = real.clone();
    for (i, s) in synthetic.iter().enumerate() {
        if s.intended_class >= real.class_count {
            return Err(DatasetError::ClassMismatch { class: s.intended_class, classes: real.class_count });
        }
        let path = s.path.clone().ok_or(DatasetError::MissingImagePath(i))?;
        out.records.push(ImageRecord {
            path,
            label: s.intended_class,
            split: Split::Train,
            origin: Origin::Synthetic,
        });
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(path: &str, label: usize) -> ImageRecord {
        ImageRecord { path: path.into(), label, split: Split::Train, origin: Origin::Real }
    }

    #[test]
    fn parses_small_manifest() {
        let text = "classes=2;image_size=32;seed=3\na.png,0,train,real\nb.png,1,val,real\nc.png,1,test,real\n";
        let m = DatasetManifest::parse(text, Path::new("/data/m.txt")).unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.class_count, 2);
        assert_eq!(m.resolve(&m.records[0]), PathBuf::from("/data/a.png"));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "classes=2;seed=1\na.png,0,train,real\nb.png,zero,train,real\n";
        match DatasetManifest::parse(text, Path::new("m.txt")) {
            Err(DatasetError::ParseError { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_and_duplicate_checks() {
        let bad = "classes=2;seed=1\na.png,5,train,real\n";
        assert!(matches!(DatasetManifest::parse(bad, Path::new("m")), Err(DatasetError::LabelOutOfRange { .. })));
        let dup = "classes=2;seed=1\na.png,0,train,real\na.png,1,val,real\n";
        assert!(matches!(DatasetManifest::parse(dup, Path::new("m")), Err(DatasetError::DuplicatePath(_))));
        let syn = "classes=2;seed=1\na.png,0,test,synthetic\n";
        assert!(matches!(DatasetManifest::parse(syn, Path::new("m")), Err(DatasetError::InvalidRecord { .. })));
        let unknown = "classes=2;seed=1;colour=yes\n";
        assert!(matches!(DatasetManifest::parse(unknown, Path::new("m")), Err(DatasetError::ParseError { .. })));
    }

    #[test]
    fn header_counts_are_checked() {
        let text = "classes=2;seed=1;train=2;val=0;test=0\na.png,0,train,real\n";
        assert!(matches!(DatasetManifest::parse(text, Path::new("m")), Err(DatasetError::CountMismatch { .. })));
    }

    #[test]
    fn text_round_trip() {
        let mut m = DatasetManifest::new(3, 32, 9, PathBuf::from("/x"));
        m.class_names = vec!["ka".into(), "kha".into(), "ga".into()];
        m.records = vec![rec("a.png", 0), rec("b.png", 2)];
        let back = DatasetManifest::parse(&m.to_text(), Path::new("/x/m.txt")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn apportionment_is_exact() {
        assert_eq!(apportion(10, [0.8, 0.1, 0.1]), [8, 1, 1]);
        assert_eq!(apportion(3, [0.8, 0.1, 0.1]), [3, 0, 0]);
        assert_eq!(apportion(7, [0.5, 0.25, 0.25]), [3, 2, 2]);
        assert_eq!(apportion(0, [0.8, 0.1, 0.1]), [0, 0, 0]);
    }

    #[test]
    fn too_small_class_is_named() {
        let recs: Vec<_> = (0..5).map(|i| rec(&format!("{i}.png"), (i >= 3) as usize)).collect();
        match stratified_split(&recs, 2, (0.8, 0.1, 0.1), 1) {
            Err(DatasetError::ClassTooSmall { class: 1, count: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_ignores_input_order() {
        let recs: Vec<_> = (0..30).map(|i| rec(&format!("{i}.png"), i % 2)).collect();
        let mut rev = recs.clone();
        rev.reverse();
        let a = stratified_split(&recs, 2, (0.6, 0.2, 0.2), 5).unwrap();
        let b = stratified_split(&rev, 2, (0.6, 0.2, 0.2), 5).unwrap();
        let key = |m: &DatasetManifest| {
            let mut v: Vec<_> = m.records.iter().map(|r| (r.path.clone(), r.split)).collect();
            v.sort();
            v
        };
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn round_half_even_bytes() {
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        // 0.0 maps to 127.5, which rounds to the even neighbour
        assert_eq!(to_byte(0.0), 128);
    }

    #[test]
    fn rgb_uses_luma_weights() {
        let raw = RawImage { width: 1, height: 1, channels: 3, data: vec![255.0, 0.0, 0.0] };
        let p = preprocess_image::<f64>(&raw, 1).unwrap();
        assert!((p.values().data()[0] - (0.299 * 255.0 / 127.5 - 1.0)).abs() < 1e-12);
    }
}
