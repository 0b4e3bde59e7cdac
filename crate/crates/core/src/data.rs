//! Dataset parsing (MNIST IDX, CIFAR binary), input adaptation, additive
//! pixel noise and minibatch iteration.

use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Real, Tensor};

pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR10_RECORD: usize = 3073;
pub const CIFAR100_RECORD: usize = 3074;
const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Images `[N, C, H, W]` (pixels in `[0, 1]` at parse time) with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images of shape {:?} for {} labels",
                images.shape().first().copied().unwrap_or(0),
                images.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Consistency(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-image shape `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// The first `n` examples (all of them if `n` is 0 or exceeds the size).
    pub fn head(&self, n: usize) -> Dataset {
        let n = if n == 0 { self.len() } else { n.min(self.len()) };
        Dataset {
            images: self.images.slice_outer(0, n),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            name: self.name.clone(),
        }
    }
}

/// Datasets understood by the loaders and the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Cifar100,
}

impl DatasetKind {
    pub fn num_classes(self) -> usize {
        match self {
            DatasetKind::Mnist | DatasetKind::Cifar10 => 10,
            DatasetKind::Cifar100 => 100,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            "cifar100" => Ok(DatasetKind::Cifar100),
            other => Err(Error::Contract(format!(
                "unknown dataset {other:?} (expected mnist, cifar10 or cifar100)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Reads a file, transparently inflating gzip content.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(format!("decompressing {}", path.display()), e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Length {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], want: u32, path: &Path) -> Result<()> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != want {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("magic 0x{magic:08x}, expected 0x{want:08x}"),
        });
    }
    Ok(())
}

/// Parses an IDX image/label pair into an `N×1×28×28` dataset.
pub fn parse_mnist(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    parse_mnist_limited(images_path, labels_path, None)
}

/// As [`parse_mnist`], keeping at most `limit` examples.
pub fn parse_mnist_limited(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    limit: Option<usize>,
) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img = read_maybe_gz(ip)?;
    let lab = read_maybe_gz(lp)?;
    check_magic(&img, MNIST_IMAGE_MAGIC, ip)?;
    check_magic(&lab, MNIST_LABEL_MAGIC, lp)?;

    let n_img = be_u32(&img, 4, ip)? as usize;
    let rows = be_u32(&img, 8, ip)? as usize;
    let cols = be_u32(&img, 12, ip)? as usize;
    let n_lab = be_u32(&lab, 4, lp)? as usize;
    if (rows, cols) != (28, 28) {
        return Err(Error::Format {
            path: ip.to_path_buf(),
            detail: format!("image size {rows}x{cols}, expected 28x28"),
        });
    }
    let px = rows * cols;
    if img.len() < 16 + n_img * px {
        return Err(Error::Length {
            path: ip.to_path_buf(),
            expected: 16 + n_img * px,
            found: img.len(),
        });
    }
    if lab.len() < 8 + n_lab {
        return Err(Error::Length {
            path: lp.to_path_buf(),
            expected: 8 + n_lab,
            found: lab.len(),
        });
    }
    if n_img != n_lab {
        return Err(Error::Consistency(format!(
            "{} holds {n_img} images but {} holds {n_lab} labels",
            ip.display(),
            lp.display()
        )));
    }
    let n = limit.map_or(n_img, |l| l.min(n_img));
    let data = img[16..16 + n * px].iter().map(|&b| b as Real / 255.0).collect();
    let labels = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    Dataset::new(Tensor::new(&[n, 1, rows, cols], data)?, labels, 10, "mnist")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => CIFAR10_RECORD,
            CifarVariant::Cifar100 => CIFAR100_RECORD,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Parses CIFAR binary batch files (records concatenated in file order).
pub fn parse_cifar<P: AsRef<Path>>(paths: &[P], variant: CifarVariant) -> Result<Dataset> {
    parse_cifar_limited(paths, variant, None)
}

/// As [`parse_cifar`], keeping at most `limit` examples.
pub fn parse_cifar_limited<P: AsRef<Path>>(
    paths: &[P],
    variant: CifarVariant,
    limit: Option<usize>,
) -> Result<Dataset> {
    let rec = variant.record_len();
    let classes = variant.num_classes();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        if limit.is_some_and(|l| labels.len() >= l) {
            break;
        }
        let path = path.as_ref();
        let bytes = read_maybe_gz(path)?;
        if bytes.len() % rec != 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("length {} is not a multiple of the {rec}-byte record", bytes.len()),
            });
        }
        for record in bytes.chunks_exact(rec) {
            if limit.is_some_and(|l| labels.len() >= l) {
                break;
            }
            // cifar100 records carry (coarse, fine); the fine label is used
            let label = record[rec - CIFAR_PIXELS - 1] as usize;
            if label >= classes {
                return Err(Error::Consistency(format!(
                    "{}: label {label} >= {classes} classes",
                    path.display()
                )));
            }
            labels.push(label);
            data.extend(record[rec - CIFAR_PIXELS..].iter().map(|&b| b as Real / 255.0));
        }
    }
    let name = match variant {
        CifarVariant::Cifar10 => "cifar10",
        CifarVariant::Cifar100 => "cifar100",
    };
    let n = labels.len();
    Dataset::new(Tensor::new(&[n, 3, 32, 32], data)?, labels, classes, name)
}

fn first_existing(candidates: &[PathBuf]) -> Option<PathBuf> {
    candidates.iter().find(|p| p.exists()).cloned()
}

fn locate(dir: &Path, names: &[&str]) -> Result<PathBuf> {
    let mut candidates = Vec::new();
    for n in names {
        candidates.push(dir.join(n));
        candidates.push(dir.join(format!("{n}.gz")));
    }
    first_existing(&candidates).ok_or_else(|| Error::Io {
        context: format!("locating {} in {}", names[0], dir.display()),
        source: std::io::Error::from(std::io::ErrorKind::NotFound),
    })
}

/// Loads a split from the conventional layout under `data_dir`:
/// `mnist/*-ubyte`, `cifar10/{data_batch_1..5,test_batch}.bin`,
/// `cifar100/{train,test}.bin`.
pub fn load_split(data_dir: &Path, kind: DatasetKind, split: Split, limit: Option<usize>) -> Result<Dataset> {
    match kind {
        DatasetKind::Mnist => {
            let dir = data_dir.join("mnist");
            let prefix = match split {
                Split::Train => "train",
                Split::Test => "t10k",
            };
            let images = locate(
                &dir,
                &[&format!("{prefix}-images-idx3-ubyte"), &format!("{prefix}-images.idx3-ubyte")],
            )?;
            let labels = locate(
                &dir,
                &[&format!("{prefix}-labels-idx1-ubyte"), &format!("{prefix}-labels.idx1-ubyte")],
            )?;
            parse_mnist_limited(images, labels, limit)
        }
        DatasetKind::Cifar10 => {
            let dir = data_dir.join("cifar10");
            let files: Vec<PathBuf> = match split {
                Split::Train => (1..=5)
                    .map(|i| locate(&dir, &[&format!("data_batch_{i}.bin")]))
                    .collect::<Result<_>>()?,
                Split::Test => vec![locate(&dir, &["test_batch.bin"])?],
            };
            parse_cifar_limited(&files, CifarVariant::Cifar10, limit)
        }
        DatasetKind::Cifar100 => {
            let dir = data_dir.join("cifar100");
            let file = match split {
                Split::Train => locate(&dir, &["train.bin"])?,
                Split::Test => locate(&dir, &["test.bin"])?,
            };
            parse_cifar_limited(&[file], CifarVariant::Cifar100, limit)
        }
    }
}

/// Brings a dataset to an architecture's `[C, 32, 32]` input: 28×28 images
/// are zero-padded by 2 pixels per side and single-channel images are
/// replicated when three channels are required.
pub fn adapt_input(ds: &Dataset, target: [usize; 3]) -> Result<Dataset> {
    let [tc, th, tw] = target;
    if !(th == 32 && tw == 32 && (tc == 1 || tc == 3)) {
        return Err(Error::Contract(format!(
            "unsupported architecture input {target:?} (expected 1x32x32 or 3x32x32)"
        )));
    }
    let [c, h, w] = ds.image_shape();
    if h > th || w > tw || (th - h) % 2 != 0 || (tw - w) % 2 != 0 {
        return Err(Error::Contract(format!("cannot pad {h}x{w} images to {th}x{tw}")));
    }
    if c != tc && c != 1 {
        return Err(Error::Contract(format!("cannot map {c} channels onto {tc}")));
    }
    if [c, h, w] == target {
        return Ok(ds.clone());
    }
    let (dy, dx) = ((th - h) / 2, (tw - w) / 2);
    let n = ds.len();
    let src = ds.images.data();
    let mut out = vec![0.0; n * tc * th * tw];
    for i in 0..n {
        for oc in 0..tc {
            let ic = if c == 1 { 0 } else { oc };
            let plane = &src[((i * c) + ic) * h * w..((i * c) + ic + 1) * h * w];
            let dst = &mut out[((i * tc) + oc) * th * tw..((i * tc) + oc + 1) * th * tw];
            for y in 0..h {
                dst[(y + dy) * tw + dx..(y + dy) * tw + dx + w].copy_from_slice(&plane[y * w..(y + 1) * w]);
            }
        }
    }
    Dataset::new(
        Tensor::new(&[n, tc, th, tw], out)?,
        ds.labels.clone(),
        ds.num_classes,
        ds.name.clone(),
    )
}

/// Additive Gaussian pixel noise of level `gamma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub gamma: Real,
    pub seed: u64,
}

/// Adds `gamma * z`, `z ~ N(0, 1)` from the seeded stream, to every pixel.
/// Values are not clipped.
pub fn add_noise(ds: &Dataset, spec: NoiseSpec) -> Result<Dataset> {
    if !(spec.gamma >= 0.0) {
        return Err(Error::Contract(format!("noise level must be >= 0, got {}", spec.gamma)));
    }
    let mut out = ds.clone();
    if spec.gamma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for p in out.images.data_mut() {
        let z: Real = rng.sample(StandardNormal);
        *p += spec.gamma * z;
    }
    Ok(out)
}

/// Minibatch layout of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

impl BatchPlan {
    pub fn new(batch_size: usize, shuffle_seed: u64) -> Self {
        BatchPlan {
            batch_size,
            shuffle_seed,
        }
    }

    /// Number of minibatches per epoch, `ceil(n / batch_size)`.
    pub fn num_batches(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    /// Example order for `epoch`, shuffled with seed `shuffle_seed + epoch`.
    pub fn order(&self, n: usize, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.shuffle_seed.wrapping_add(epoch));
        idx.shuffle(&mut rng);
        idx
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// 1-based position within the epoch.
    pub index: usize,
}

/// Shuffled minibatches of `ds` for `epoch`; the last batch may be short.
pub fn batches<'a>(ds: &'a Dataset, plan: &BatchPlan, epoch: u64) -> Result<impl Iterator<Item = Batch> + 'a> {
    if plan.batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let order = plan.order(ds.len(), epoch);
    let bs = plan.batch_size;
    let m = plan.num_batches(ds.len());
    Ok((0..m).map(move |b| {
        let idx = &order[b * bs..((b + 1) * bs).min(order.len())];
        Batch {
            images: ds.images.gather_outer(idx),
            labels: idx.iter().map(|&i| ds.labels[i]).collect(),
            index: b + 1,
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let images = Tensor::new(&[n, 1, 2, 2], (0..n * 4).map(|v| v as Real / 100.0).collect()).unwrap();
        Dataset::new(images, (0..n).map(|i| i % 3).collect(), 3, "toy").unwrap()
    }

    #[test]
    fn batch_sizes_and_count() {
        let ds = toy(10);
        let plan = BatchPlan::new(4, 0);
        assert_eq!(plan.num_batches(10), 3);
        let sizes: Vec<(usize, usize)> = batches(&ds, &plan, 1).unwrap().map(|b| (b.index, b.labels.len())).collect();
        assert_eq!(sizes, vec![(1, 4), (2, 4), (3, 2)]);
        assert_eq!(BatchPlan::new(128, 0).num_batches(60000), 469);
    }

    #[test]
    fn batches_are_deterministic_per_seed_and_epoch() {
        let ds = toy(50);
        let plan = BatchPlan::new(7, 42);
        let a: Vec<Vec<usize>> = batches(&ds, &plan, 3).unwrap().map(|b| b.labels).collect();
        let b: Vec<Vec<usize>> = batches(&ds, &plan, 3).unwrap().map(|b| b.labels).collect();
        assert_eq!(a, b);
        assert_ne!(plan.order(50, 3), plan.order(50, 4));
        // every example appears exactly once
        let mut all = plan.order(50, 3);
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn empty_dataset_yields_no_batches() {
        let ds = Dataset::new(Tensor::zeros(&[0, 1, 2, 2]), vec![], 3, "empty").unwrap();
        assert_eq!(batches(&ds, &BatchPlan::new(4, 0), 1).unwrap().count(), 0);
        assert!(batches(&ds, &BatchPlan::new(0, 0), 1).is_err());
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        let images = Tensor::zeros(&[2, 1, 2, 2]);
        assert!(Dataset::new(images.clone(), vec![0, 3], 3, "x").is_err());
        assert!(Dataset::new(images, vec![0], 3, "x").is_err());
    }

    #[test]
    fn adapt_pads_and_replicates() {
        let images = Tensor::new(&[1, 1, 28, 28], vec![0.5; 784]).unwrap();
        let ds = Dataset::new(images, vec![1], 10, "m").unwrap();
        let one = adapt_input(&ds, [1, 32, 32]).unwrap();
        assert_eq!(one.images.shape(), &[1, 1, 32, 32]);
        let d = one.images.data();
        for y in 0..32 {
            for x in 0..32 {
                let inside = (2..30).contains(&y) && (2..30).contains(&x);
                assert_eq!(d[y * 32 + x], if inside { 0.5 } else { 0.0 }, "({y},{x})");
            }
        }
        let three = adapt_input(&ds, [3, 32, 32]).unwrap();
        let d = three.images.data();
        assert_eq!(&d[..1024], &d[1024..2048]);
        assert_eq!(&d[..1024], &d[2048..]);
        assert_eq!(&d[..1024], one.images.data());
        assert!(adapt_input(&ds, [1, 28, 28]).is_err());
    }

    #[test]
    fn adapt_passes_cifar_through() {
        let images = Tensor::new(&[2, 3, 32, 32], (0..6144).map(|v| v as Real).collect()).unwrap();
        let ds = Dataset::new(images, vec![0, 1], 10, "c").unwrap();
        assert_eq!(adapt_input(&ds, [3, 32, 32]).unwrap(), ds);
        assert!(adapt_input(&ds, [1, 32, 32]).is_err());
    }

    #[test]
    fn zero_noise_is_identity_and_seeds_differ() {
        let ds = toy(20);
        assert_eq!(add_noise(&ds, NoiseSpec { gamma: 0.0, seed: 9 }).unwrap(), ds);
        let a = add_noise(&ds, NoiseSpec { gamma: 0.1, seed: 1 }).unwrap();
        let b = add_noise(&ds, NoiseSpec { gamma: 0.1, seed: 2 }).unwrap();
        assert_ne!(a.images, b.images);
        assert_eq!(a, add_noise(&ds, NoiseSpec { gamma: 0.1, seed: 1 }).unwrap());
        assert!(add_noise(&ds, NoiseSpec { gamma: -0.1, seed: 1 }).is_err());
    }

    #[test]
    fn noise_moments_match_level() {
        let n = 1_000_000 / 4;
        let images = Tensor::new(&[n, 1, 2, 2], vec![0.25; n * 4]).unwrap();
        let ds = Dataset::new(images, vec![0; n], 1, "flat").unwrap();
        let noisy = add_noise(&ds, NoiseSpec { gamma: 0.1, seed: 77 }).unwrap();
        let diffs: Vec<Real> = noisy.images.data().iter().map(|v| v - 0.25).collect();
        let m = diffs.len() as Real;
        let mean = diffs.iter().sum::<Real>() / m;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<Real>() / (m - 1.0)).sqrt();
        assert!(mean.abs() <= 3.0 * 0.1 / 1e3, "mean {mean}");
        assert!((sd - 0.1).abs() <= 0.001, "std {sd}");
    }

    #[test]
    fn dataset_kind_round_trips_names() {
        for k in [DatasetKind::Mnist, DatasetKind::Cifar10, DatasetKind::Cifar100] {
            assert_eq!(k.as_str().parse::<DatasetKind>().unwrap(), k);
        }
        assert!("svhn".parse::<DatasetKind>().is_err());
    }
}
