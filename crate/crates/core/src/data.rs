//! Image datasets: IDX archives (MNIST layout), folders of image files, and
//! the small bundled subsets used by tests and the default configuration.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ImageShape;
use crate::nn::Tensor;
use crate::rng::seeded;

/// Environment variable naming the dataset cache directory.
pub const DATA_DIR_ENV: &str = "SEMCOM_DATA_DIR";

const IDX_FILES: [&str; 4] = [
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
];

const MNIST_BUNDLED: [&[u8]; 4] = [
    include_bytes!("../fixtures/mnist/train-images-idx3-ubyte.gz"),
    include_bytes!("../fixtures/mnist/train-labels-idx1-ubyte.gz"),
    include_bytes!("../fixtures/mnist/t10k-images-idx3-ubyte.gz"),
    include_bytes!("../fixtures/mnist/t10k-labels-idx1-ubyte.gz"),
];

const FMNIST_BUNDLED: [&[u8]; 4] = [
    include_bytes!("../fixtures/fmnist/train-images-idx3-ubyte.gz"),
    include_bytes!("../fixtures/fmnist/train-labels-idx1-ubyte.gz"),
    include_bytes!("../fixtures/fmnist/t10k-images-idx3-ubyte.gz"),
    include_bytes!("../fixtures/fmnist/t10k-labels-idx1-ubyte.gz"),
];

/// Images stored contiguously as `[n, c, h, w]` floats in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub shape: ImageShape,
    pub pixels: Vec<f32>,
    pub labels: Option<Vec<u8>>,
}

impl ImageSet {
    pub fn new(shape: ImageShape, pixels: Vec<f32>, labels: Option<Vec<u8>>) -> Result<Self> {
        if shape.numel() == 0 || pixels.len() % shape.numel() != 0 {
            return Err(Error::shape(format!("multiple of {}", shape.numel()), pixels.len()));
        }
        if let Some(l) = &labels {
            if l.len() != pixels.len() / shape.numel() {
                return Err(Error::shape(pixels.len() / shape.numel(), l.len()));
            }
        }
        Ok(ImageSet { shape, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.shape.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.shape.numel();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Stacks the given images into a `[B, C, H, W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.shape.numel());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let s = self.shape;
        Tensor::new(&[indices.len(), s.c, s.h, s.w], data)
    }

    pub fn subset(&self, indices: &[usize]) -> ImageSet {
        let mut pixels = Vec::with_capacity(indices.len() * self.shape.numel());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        ImageSet { shape: self.shape, pixels, labels }
    }

    pub fn take(&self, n: usize) -> ImageSet {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// Bilinear resize of every image (half-pixel centers, edge clamped).
    pub fn resized(&self, h: usize, w: usize) -> ImageSet {
        if (h, w) == (self.shape.h, self.shape.w) {
            return self.clone();
        }
        let s = self.shape;
        let mut pixels = Vec::with_capacity(self.len() * s.c * h * w);
        for plane in self.pixels.chunks(s.h * s.w) {
            pixels.extend(resize_plane(plane, s.h, s.w, h, w));
        }
        ImageSet { shape: ImageShape::new(s.c, h, w), pixels, labels: self.labels.clone() }
    }

    /// Deterministic permutation of the image order.
    pub fn shuffled(&self, seed: u64) -> ImageSet {
        self.subset(&shuffled_indices(self.len(), seed))
    }
}

pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed));
    idx
}

fn resize_plane(p: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(oh * ow);
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    for y in 0..oh {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ay = fy - y0 as f32;
        for x in 0..ow {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let ax = fx - x0 as f32;
            let top = p[y0 * w + x0] * (1.0 - ax) + p[y0 * w + x1] * ax;
            let bot = p[y1 * w + x0] * (1.0 - ax) + p[y1 * w + x1] * ax;
            out.push(top * (1.0 - ay) + bot * ay);
        }
    }
    out
}

fn gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes).read_to_end(&mut out)?;
    Ok(out)
}

fn be_u32(b: &[u8], at: usize) -> Result<usize> {
    b.get(at..at + 4)
        .map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]) as usize)
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an uncompressed IDX3 image file into `[0, 1]` floats.
pub fn parse_idx_images(b: &[u8]) -> Result<ImageSet> {
    if be_u32(b, 0)? != 0x0803 {
        return Err(Error::Format("not an IDX3 ubyte image file".into()));
    }
    let (n, h, w) = (be_u32(b, 4)?, be_u32(b, 8)?, be_u32(b, 12)?);
    let body = b.get(16..16 + n * h * w).ok_or_else(|| Error::Format("truncated IDX image data".into()))?;
    ImageSet::new(ImageShape::new(1, h, w), body.iter().map(|&v| v as f32 / 255.0).collect(), None)
}

pub fn parse_idx_labels(b: &[u8]) -> Result<Vec<u8>> {
    if be_u32(b, 0)? != 0x0801 {
        return Err(Error::Format("not an IDX1 ubyte label file".into()));
    }
    let n = be_u32(b, 4)?;
    Ok(b.get(8..8 + n).ok_or_else(|| Error::Format("truncated IDX labels".into()))?.to_vec())
}

/// Encodes images and labels as gzip-free IDX buffers (used to build fixtures and tests).
pub fn encode_idx(set: &ImageSet) -> (Vec<u8>, Vec<u8>) {
    let s = set.shape;
    let mut img = Vec::with_capacity(16 + set.pixels.len());
    for v in [0x0803u32, set.len() as u32, s.h as u32, s.w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(set.pixels.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::new();
    for v in [0x0801u32, set.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(set.labels.clone().unwrap_or_else(|| vec![0; set.len()]));
    (img, lab)
}

fn load_idx_pair(images: &[u8], labels: &[u8]) -> Result<ImageSet> {
    let mut set = parse_idx_images(&gunzip(images)?)?;
    let l = parse_idx_labels(&gunzip(labels)?)?;
    if l.len() != set.len() {
        return Err(Error::Format(format!("{} images but {} labels", set.len(), l.len())));
    }
    set.labels = Some(l);
    Ok(set)
}

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetSource {
    Mnist,
    Fmnist,
    Folder { path: PathBuf },
}

impl DatasetSource {
    fn cache_name(&self) -> Option<&'static str> {
        match self {
            DatasetSource::Mnist => Some("mnist"),
            DatasetSource::Fmnist => Some("fmnist"),
            DatasetSource::Folder { .. } => None,
        }
    }
}

/// Declarative dataset selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub source: DatasetSource,
    #[serde(default = "default_side")]
    pub resize: usize,
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    /// Folder datasets: fraction held out for testing.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_side() -> usize {
    32
}

fn default_test_fraction() -> f64 {
    0.2
}

impl DatasetSpec {
    pub fn new(source: DatasetSource) -> Self {
        DatasetSpec { source, resize: 32, train_limit: None, test_limit: None, test_fraction: 0.2, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: ImageSet,
    pub test: ImageSet,
    /// Where the images were read from.
    pub origin: String,
}

/// Directory holding full IDX archives for `name`, if the cache has them.
fn cached_idx_dir(name: &str, cache: Option<&Path>) -> Option<PathBuf> {
    let dir = cache?.join(name);
    IDX_FILES.iter().all(|f| dir.join(f).is_file()).then_some(dir)
}

/// Loads a dataset. IDX datasets are read from `$SEMCOM_DATA_DIR/<name>/` when
/// present there, otherwise from the bundled subset.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Split> {
    let cache = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
    load_dataset_from(spec, cache.as_deref())
}

pub fn load_dataset_from(spec: &DatasetSpec, cache: Option<&Path>) -> Result<Split> {
    let (train, test, origin) = match &spec.source {
        DatasetSource::Folder { path } => {
            let all = load_folder(path)?;
            if all.is_empty() {
                return Err(Error::Config(format!("no images found in {}", path.display())));
            }
            let idx = shuffled_indices(all.len(), spec.seed);
            let n_test = ((all.len() as f64) * spec.test_fraction).round() as usize;
            let n_test = n_test.min(all.len().saturating_sub(1));
            let (te, tr) = idx.split_at(n_test);
            (all.subset(tr), all.subset(te), path.display().to_string())
        }
        src => {
            let name = src.cache_name().expect("idx source");
            let raw: Vec<Vec<u8>> = match cached_idx_dir(name, cache) {
                Some(dir) => IDX_FILES.iter().map(|f| std::fs::read(dir.join(f))).collect::<std::io::Result<_>>()?,
                None => {
                    let b = if name == "mnist" { MNIST_BUNDLED } else { FMNIST_BUNDLED };
                    b.iter().map(|s| s.to_vec()).collect()
                }
            };
            let origin = match cached_idx_dir(name, cache) {
                Some(d) => d.display().to_string(),
                None => format!("bundled:{name}"),
            };
            (load_idx_pair(&raw[0], &raw[1])?, load_idx_pair(&raw[2], &raw[3])?, origin)
        }
    };
    let limit = |s: ImageSet, l: Option<usize>| match l {
        Some(n) => s.take(n),
        None => s,
    };
    Ok(Split {
        train: limit(train, spec.train_limit).resized(spec.resize, spec.resize),
        test: limit(test, spec.test_limit).resized(spec.resize, spec.resize),
        origin,
    })
}

/// Reads every decodable image in `dir` (sorted by file name) as grayscale
/// when all inputs are grayscale, RGB otherwise; sizes must agree.
#[cfg(feature = "image-io")]
pub fn load_folder(dir: &Path) -> Result<ImageSet> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
            matches!(ext.as_str(), "png" | "jpg" | "jpeg")
        })
        .collect();
    files.sort();
    let imgs: Vec<image::DynamicImage> = files
        .iter()
        .map(|f| image::open(f).map_err(|e| Error::Format(format!("{}: {e}", f.display()))))
        .collect::<Result<_>>()?;
    let gray = imgs.iter().all(|i| i.color().channel_count() <= 2);
    let c = if gray { 1 } else { 3 };
    let (w, h) = imgs.first().map(|i| (i.width() as usize, i.height() as usize)).unwrap_or((1, 1));
    let mut pixels = Vec::new();
    for (img, f) in imgs.iter().zip(&files) {
        if (img.width() as usize, img.height() as usize) != (w, h) {
            return Err(Error::Format(format!("{} is not {w}x{h}", f.display())));
        }
        if gray {
            pixels.extend(img.to_luma8().as_raw().iter().map(|&v| v as f32 / 255.0));
        } else {
            let rgb = img.to_rgb8();
            for ch in 0..3 {
                pixels.extend(rgb.as_raw().iter().skip(ch).step_by(3).map(|&v| v as f32 / 255.0));
            }
        }
    }
    ImageSet::new(ImageShape::new(c, h, w), pixels, None)
}

#[cfg(not(feature = "image-io"))]
pub fn load_folder(dir: &Path) -> Result<ImageSet> {
    Err(Error::Config(format!("{}: folder datasets need the image-io feature", dir.display())))
}

/// Writes one image as PNG (grayscale or RGB).
#[cfg(feature = "image-io")]
pub fn save_png(path: &Path, pixels: &[f32], shape: ImageShape) -> Result<()> {
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (w, h) = (shape.w as u32, shape.h as u32);
    let res = if shape.c == 1 {
        image::GrayImage::from_raw(w, h, pixels.iter().map(|&v| to_u8(v)).collect()).map(|i| i.save(path))
    } else {
        let plane = shape.h * shape.w;
        let raw = (0..plane).flat_map(|i| (0..3).map(move |c| to_u8(pixels[c * plane + i]))).collect();
        image::RgbImage::from_raw(w, h, raw).map(|i| i.save(path))
    };
    match res {
        Some(Ok(())) => Ok(()),
        Some(Err(e)) => Err(Error::Format(e.to_string())),
        None => Err(Error::shape(shape.numel(), pixels.len())),
    }
}

/// Reads a single image file resized to `side` x `side`.
#[cfg(feature = "image-io")]
pub fn load_image(path: &Path, channels: usize, side: usize) -> Result<ImageSet> {
    let img = image::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f32> = if channels == 1 {
        img.to_luma8().as_raw().iter().map(|&v| v as f32 / 255.0).collect()
    } else {
        let rgb = img.to_rgb8();
        (0..3).flat_map(|c| rgb.as_raw().iter().skip(c).step_by(3).map(|&v| v as f32 / 255.0).collect::<Vec<_>>()).collect()
    };
    Ok(ImageSet::new(ImageShape::new(channels, h, w), pixels, None)?.resized(side, side))
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use std::io::Write;

    fn gz(b: &[u8]) -> Vec<u8> {
        let mut e = GzEncoder::new(Vec::new(), flate2::Compression::fast());
        e.write_all(b).unwrap();
        e.finish().unwrap()
    }

    #[test]
    fn bundled_subsets_load() {
        let m = load_dataset_from(&DatasetSpec::new(DatasetSource::Mnist), None).unwrap();
        assert_eq!((m.train.len(), m.test.len()), (4000, 1000));
        assert_eq!(m.train.shape, ImageShape::new(1, 32, 32));
        assert!(m.train.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        let f = load_dataset_from(&DatasetSpec::new(DatasetSource::Fmnist), None).unwrap();
        assert_eq!((f.train.len(), f.test.len()), (400, 200));
    }

    #[test]
    fn full_size_archives_in_cache_are_used() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("mnist");
        std::fs::create_dir(&d).unwrap();
        for (name, n) in [("train", 60_000usize), ("t10k", 10_000)] {
            let set = ImageSet::new(ImageShape::new(1, 28, 28), vec![0.5; n * 784], Some(vec![3; n])).unwrap();
            let (img, lab) = encode_idx(&set);
            std::fs::write(d.join(format!("{name}-images-idx3-ubyte.gz")), gz(&img)).unwrap();
            std::fs::write(d.join(format!("{name}-labels-idx1-ubyte.gz")), gz(&lab)).unwrap();
        }
        let s = load_dataset_from(&DatasetSpec::new(DatasetSource::Mnist), Some(dir.path())).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (60_000, 10_000));
        assert!(s.origin.ends_with("mnist"));
    }

    #[test]
    fn shuffle_is_deterministic() {
        assert_eq!(shuffled_indices(100, 4), shuffled_indices(100, 4));
        assert_ne!(shuffled_indices(100, 4), shuffled_indices(100, 5));
    }

    #[test]
    fn resize_preserves_constants_and_range() {
        let set = ImageSet::new(ImageShape::new(1, 28, 28), vec![0.25; 784], None).unwrap();
        let r = set.resized(32, 32);
        assert_eq!(r.pixels.len(), 1024);
        assert!(r.pixels.iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn rejects_malformed_idx() {
        assert!(parse_idx_images(&[0, 0, 8, 1, 0, 0, 0, 1]).is_err());
        assert!(parse_idx_images(&[0, 0, 8, 3, 0, 0, 0, 9, 0, 0, 0, 2, 0, 0, 0, 2, 1]).is_err());
    }

    #[cfg(feature = "image-io")]
    #[test]
    fn folder_of_three_images() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            let px: Vec<f32> = (0..64).map(|p| ((p + i * 7) % 11) as f32 / 10.0).collect();
            save_png(&dir.path().join(format!("{i}.png")), &px, ImageShape::new(1, 8, 8)).unwrap();
        }
        let set = load_folder(dir.path()).unwrap();
        assert_eq!(set.len(), 3);
        let mut spec = DatasetSpec::new(DatasetSource::Folder { path: dir.path().into() });
        spec.resize = 8;
        spec.test_fraction = 0.0;
        let s = load_dataset_from(&spec, None).unwrap();
        assert_eq!(s.train.len() + s.test.len(), 3);
    }
}
