//! Image datasets: the CIFAR binary layout, seeded synthetic data, batching
//! and augmentation.
//!
//! Images are stored as raw bytes in CHW order and normalized per channel
//! when a batch is assembled: `x = (byte / 255 − mean_c) / std_c`.
//!
//! | dataset   | mean                     | std                      |
//! |-----------|--------------------------|--------------------------|
//! | CIFAR-10  | 0.4914, 0.4822, 0.4465   | 0.2470, 0.2435, 0.2616   |
//! | CIFAR-100 | 0.5071, 0.4865, 0.4409   | 0.2673, 0.2564, 0.2762   |
//! | synthetic | 0.5, 0.5, 0.5            | 0.25, 0.25, 0.25         |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CIFAR_HW: usize = 32;
pub const CIFAR_IMAGE_BYTES: usize = 3 * CIFAR_HW * CIFAR_HW;

pub const CIFAR10_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];
pub const CIFAR100_MEAN: [f64; 3] = [0.5071, 0.4865, 0.4409];
pub const CIFAR100_STD: [f64; 3] = [0.2673, 0.2564, 0.2762];
pub const SYNTHETIC_MEAN: [f64; 3] = [0.5, 0.5, 0.5];
pub const SYNTHETIC_STD: [f64; 3] = [0.25, 0.25, 0.25];

/// Records in the public CIFAR-10 training split.
pub const CIFAR10_TRAIN_RECORDS: usize = 50_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_bytes(self) -> usize {
        self.label_bytes() + CIFAR_IMAGE_BYTES
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    fn stats(self) -> ([f64; 3], [f64; 3]) {
        match self {
            CifarVariant::Cifar10 => (CIFAR10_MEAN, CIFAR10_STD),
            CifarVariant::Cifar100 => (CIFAR100_MEAN, CIFAR100_STD),
        }
    }
}

/// An in-memory labelled image set.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub source: String,
    pub resolution: usize,
    pub num_classes: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// N × 3 × H × W bytes.
    images: Vec<u8>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(source: impl Into<String>, resolution: usize, num_classes: usize, stats: ([f64; 3], [f64; 3]), images: Vec<u8>, labels: Vec<usize>) -> Result<Self> {
        let per = 3 * resolution * resolution;
        if labels.is_empty() {
            return Err(Error::InvalidArgument("dataset has no records".into()));
        }
        if images.len() != per * labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} image bytes for {} records of {per} bytes",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            source: source.into(),
            resolution,
            num_classes,
            mean: stats.0,
            std: stats.1,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_bytes(&self) -> usize {
        3 * self.resolution * self.resolution
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.image_bytes();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Records `range` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let end = end.min(self.len());
        if start >= end {
            return Err(Error::InvalidArgument(format!("empty slice {start}..{end} of {} records", self.len())));
        }
        let per = self.image_bytes();
        Dataset::new(
            self.source.clone(),
            self.resolution,
            self.num_classes,
            (self.mean, self.std),
            self.images[start * per..end * per].to_vec(),
            self.labels[start..end].to_vec(),
        )
    }

    /// Normalized batch of the given records, optionally augmented with a
    /// random horizontal flip and a random crop from the image zero-padded
    /// by 4 pixels (padding is applied after normalization).
    pub fn batch(&self, indices: &[usize], mut augment: Option<&mut Rng>) -> (Tensor, Vec<usize>) {
        let r = self.resolution;
        let mut out = Tensor::zeros([indices.len(), 3, r, r]);
        let plane = r * r;
        let data = out.data_mut();
        for (n, &i) in indices.iter().enumerate() {
            let (flip, dy, dx) = match augment.as_deref_mut() {
                Some(rng) => (rng.bernoulli(0.5), rng.below(9) as isize - 4, rng.below(9) as isize - 4),
                None => (false, 0, 0),
            };
            let img = self.image(i);
            for c in 0..3 {
                let dst = &mut data[(n * 3 + c) * plane..(n * 3 + c + 1) * plane];
                let src = &img[c * plane..(c + 1) * plane];
                for y in 0..r {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= r as isize {
                        continue;
                    }
                    for x in 0..r {
                        let sx = x as isize + dx;
                        if sx < 0 || sx >= r as isize {
                            continue;
                        }
                        let sx = if flip { r - 1 - sx as usize } else { sx as usize };
                        let v = src[sy as usize * r + sx] as f64 / 255.0;
                        dst[y * r + x] = (v - self.mean[c]) / self.std[c];
                    }
                }
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (out, labels)
    }

    /// Record order for one epoch.
    pub fn epoch_order(&self, rng: &mut Rng) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut order);
        order
    }

    /// Split an epoch order into training batches. A trailing batch with fewer
    /// than two records is dropped (batch norm needs two).
    pub fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
        order.chunks(batch_size.max(1)).filter(|b| b.len() >= 2).collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Parse a CIFAR binary file (`data_batch_*.bin`, `train.bin`, …).
pub fn load_cifar(path: &Path, variant: CifarVariant) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar(&bytes, variant, &path.display().to_string())
}

/// Parse and concatenate several CIFAR binary files.
pub fn load_cifar_files(paths: &[&Path], variant: CifarVariant) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        let b = fs::read(p).map_err(|e| Error::io(*p, e))?;
        if b.len() % variant.record_bytes() != 0 {
            return parse_cifar(&b, variant, &p.display().to_string());
        }
        bytes.extend_from_slice(&b);
    }
    parse_cifar(&bytes, variant, &format!("{} files", paths.len()))
}

pub fn parse_cifar(bytes: &[u8], variant: CifarVariant, source: &str) -> Result<Dataset> {
    let rec = variant.record_bytes();
    if bytes.is_empty() {
        return Err(Error::Parse {
            offset: 0,
            reason: format!("empty file, expected a multiple of {rec} bytes"),
        });
    }
    if bytes.len() % rec != 0 {
        let whole = bytes.len() / rec;
        return Err(Error::Parse {
            offset: (whole * rec) as u64,
            reason: format!(
                "file length {} is not a multiple of the {rec}-byte record; expected {} or {} bytes",
                bytes.len(),
                whole * rec,
                (whole + 1) * rec
            ),
        });
    }
    let n = bytes.len() / rec;
    let mut images = Vec::with_capacity(n * CIFAR_IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[variant.label_bytes() - 1] as usize;
        if label >= variant.num_classes() {
            return Err(Error::Parse {
                offset: (i * rec) as u64,
                reason: format!("label {label} out of range"),
            });
        }
        labels.push(label);
        images.extend_from_slice(&r[variant.label_bytes()..]);
    }
    Dataset::new(source, CIFAR_HW, variant.num_classes(), variant.stats(), images, labels)
}

/// Serialize a 32×32 dataset in the CIFAR binary layout. CIFAR-100 records
/// carry the label in both the coarse and the fine byte.
pub fn write_cifar(path: &Path, data: &Dataset, variant: CifarVariant) -> Result<()> {
    if data.resolution != CIFAR_HW {
        return Err(Error::InvalidArgument(format!("CIFAR records are 32×32, dataset is {0}×{0}", data.resolution)));
    }
    if data.num_classes > variant.num_classes() || data.num_classes > 256 {
        return Err(Error::InvalidArgument("too many classes for the CIFAR layout".into()));
    }
    let mut out = Vec::with_capacity(data.len() * variant.record_bytes());
    for i in 0..data.len() {
        for _ in 0..variant.label_bytes() {
            out.push(data.label(i) as u8);
        }
        out.extend_from_slice(data.image(i));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parameters of the blob image generator.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobStyle {
    /// Blobs in each class prototype.
    pub blobs: usize,
    /// Per-sample jitter of blob centers, as a fraction of the image size.
    pub jitter: f64,
    /// Per-pixel Gaussian noise (in [0, 1] intensity units).
    pub noise: f64,
    /// Blobs copied from other classes' prototypes into each sample.
    pub distractors: usize,
    /// Random per-sample background intensity range.
    pub background: f64,
}

impl BlobStyle {
    /// Well-separated classes.
    pub fn easy() -> Self {
        BlobStyle {
            blobs: 3,
            jitter: 0.05,
            noise: 0.05,
            distractors: 0,
            background: 0.0,
        }
    }

    /// Cluttered, noisy classes sharing parts; desk models stay well below
    /// perfect accuracy.
    pub fn hard() -> Self {
        BlobStyle {
            blobs: 4,
            jitter: 0.18,
            noise: 0.22,
            distractors: 3,
            background: 0.3,
        }
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    color: [f64; 3],
}

fn draw_blob(rng: &mut Rng) -> Blob {
    Blob {
        cy: rng.uniform_range(0.15, 0.85),
        cx: rng.uniform_range(0.15, 0.85),
        radius: rng.uniform_range(0.08, 0.22),
        color: [rng.uniform(), rng.uniform(), rng.uniform()],
    }
}

/// Seeded class-structured Gaussian-blob images.
pub fn gen_synthetic(n: usize, resolution: usize, classes: usize, seed: u64) -> Result<Dataset> {
    gen_synthetic_with(n, resolution, classes, seed, &BlobStyle::easy())
}

/// 32×32 ten-class stand-in for CIFAR-10 built from [`BlobStyle::hard`] and
/// normalized with the CIFAR-10 constants.
pub fn gen_cifar_substitute(n: usize, seed: u64) -> Result<Dataset> {
    let mut d = gen_synthetic_with(n, CIFAR_HW, 10, seed, &BlobStyle::hard())?;
    d.source = "cifar10-substitute".into();
    d.mean = CIFAR10_MEAN;
    d.std = CIFAR10_STD;
    Ok(d)
}

/// Class prototypes depend on `seed` only; samples are drawn from a
/// separate stream, so `(seed, n)` fixes every byte and growing `n` only
/// appends records.
pub fn gen_synthetic_with(n: usize, resolution: usize, classes: usize, seed: u64, style: &BlobStyle) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic dataset needs at least one record".into()));
    }
    if resolution == 0 || classes == 0 {
        return Err(Error::InvalidArgument("resolution and class count must be positive".into()));
    }
    let mut proto_rng = Rng::stream(seed, 0xB10B);
    let protos: Vec<Vec<Blob>> = (0..classes).map(|_| (0..style.blobs).map(|_| draw_blob(&mut proto_rng)).collect()).collect();
    let mut rng = Rng::stream(seed, 0xDA7A);
    let r = resolution;
    let plane = r * r;
    let mut images = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    let mut canvas = vec![0.0f64; 3 * plane];
    for _ in 0..n {
        let label = rng.below(classes);
        let bg = rng.uniform() * style.background;
        canvas.iter_mut().for_each(|v| *v = bg);
        let mut blobs: Vec<(&Blob, f64)> = protos[label].iter().map(|b| (b, 1.0)).collect();
        for _ in 0..style.distractors {
            let other = rng.below(classes);
            let b = &protos[other][rng.below(style.blobs.max(1)).min(protos[other].len() - 1)];
            blobs.push((b, rng.uniform_range(0.4, 1.0)));
        }
        for (b, strength) in blobs {
            let cy = (b.cy + rng.normal(0.0, style.jitter)) * r as f64;
            let cx = (b.cx + rng.normal(0.0, style.jitter)) * r as f64;
            let rad = b.radius * r as f64 * rng.uniform_range(0.8, 1.2);
            let inv = 1.0 / (2.0 * rad * rad);
            for y in 0..r {
                for x in 0..r {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    let w = strength * (-d2 * inv).exp();
                    if w < 1e-4 {
                        continue;
                    }
                    for c in 0..3 {
                        let p = &mut canvas[c * plane + y * r + x];
                        *p = *p * (1.0 - w) + b.color[c] * w;
                    }
                }
            }
        }
        for v in &canvas {
            let noisy = v + rng.normal(0.0, style.noise);
            images.push((noisy.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        labels.push(label);
    }
    Dataset::new(format!("synthetic-{classes}c-{r}px-seed{seed}"), r, classes, (SYNTHETIC_MEAN, SYNTHETIC_STD), images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<u8> {
        let mut bytes = Vec::new();
        for (label, fill) in [(3u8, 0u8), (7u8, 200u8)] {
            bytes.push(label);
            for i in 0..CIFAR_IMAGE_BYTES {
                bytes.push(fill.wrapping_add((i % 251) as u8));
            }
        }
        bytes
    }

    #[test]
    fn parses_two_records_exactly() {
        let d = parse_cifar(&fixture(), CifarVariant::Cifar10, "fixture").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels(), &[3, 7]);
        // record 1, green plane, row 2, column 5
        let idx = 1024 + 2 * 32 + 5;
        assert_eq!(d.image(1)[idx], 200u8.wrapping_add((idx % 251) as u8));
        assert_eq!(d.image(0)[0], 0);
        assert_eq!(d.image(0)[3071], (3071 % 251) as u8);
    }

    #[test]
    fn truncated_file_reports_offset_and_lengths() {
        let mut bytes = fixture();
        bytes.truncate(3073 + 100);
        match parse_cifar(&bytes, CifarVariant::Cifar10, "t").unwrap_err() {
            Error::Parse { offset, reason } => {
                assert_eq!(offset, 3073);
                assert!(reason.contains("3173"), "{reason}");
                assert!(reason.contains("6146"), "{reason}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let mut bytes = vec![1u8, 42u8];
        bytes.extend(std::iter::repeat(9u8).take(CIFAR_IMAGE_BYTES));
        let d = parse_cifar(&bytes, CifarVariant::Cifar100, "c100").unwrap();
        assert_eq!(d.labels(), &[42]);
        assert_eq!(d.num_classes, 100);
        assert_eq!(d.mean, CIFAR100_MEAN);
    }

    #[test]
    fn write_then_load_round_trips() {
        let d = gen_synthetic(5, 32, 10, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_cifar(&p, &d, CifarVariant::Cifar10).unwrap();
        let back = load_cifar(&p, CifarVariant::Cifar10).unwrap();
        assert_eq!(back.labels(), d.labels());
        for i in 0..5 {
            assert_eq!(back.image(i), d.image(i));
        }
    }

    #[test]
    fn synthetic_is_seeded_and_nonempty() {
        let a = gen_synthetic(20, 16, 4, 9).unwrap();
        let b = gen_synthetic(20, 16, 4, 9).unwrap();
        let c = gen_synthetic(20, 16, 4, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.image(0), c.image(0));
        assert!(gen_synthetic(0, 16, 4, 9).is_err());
    }

    #[test]
    fn synthetic_prefix_is_stable() {
        let a = gen_synthetic(10, 8, 3, 2).unwrap();
        let b = gen_synthetic(30, 8, 3, 2).unwrap();
        assert_eq!(a, b.slice(0, 10).map(|mut d| {
            d.source = a.source.clone();
            d
        }).unwrap());
    }

    #[test]
    fn batch_normalizes_with_channel_stats() {
        let images = vec![255u8; 3 * 4];
        let d = Dataset::new("ones", 2, 2, (SYNTHETIC_MEAN, SYNTHETIC_STD), images, vec![1]).unwrap();
        let (x, y) = d.batch(&[0], None);
        assert_eq!(y, vec![1]);
        assert!(x.data().iter().all(|&v| (v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn augmentation_is_seeded() {
        let d = gen_synthetic(8, 16, 2, 3).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let a = d.batch(&idx, Some(&mut Rng::new(5))).0;
        let b = d.batch(&idx, Some(&mut Rng::new(5))).0;
        let plain = d.batch(&idx, None).0;
        assert_eq!(a, b);
        assert_ne!(a, plain);
    }

    #[test]
    fn batches_drop_singletons() {
        let order: Vec<usize> = (0..9).collect();
        let b = Dataset::batches(&order, 4);
        assert_eq!(b.len(), 2);
        let b = Dataset::batches(&order, 3);
        assert_eq!(b.len(), 3);
    }
}
