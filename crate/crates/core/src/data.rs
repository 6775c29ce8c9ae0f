//! Datasets: Gaussian blobs, concentric rings, and IDX (MNIST-style) files.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::noise::{inject_noise, NoiseSpec};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Training and test split with ground-truth noise bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub clean_labels: Vec<usize>,
    pub noisy_labels: Vec<usize>,
    /// Indices selected by [`Dataset::with_noise`]; `None` until noise is injected.
    pub flip_mask: Option<Vec<bool>>,
    pub test_x: Tensor,
    pub test_labels: Vec<usize>,
    pub num_classes: usize,
}

/// Ground truth kept out of the training path. Trainers only use it to score
/// partitions against the labels they were given.
#[derive(Clone, Debug)]
pub struct NoiseAudit {
    clean: Vec<usize>,
}

impl NoiseAudit {
    /// `true` where `labels` disagree with the clean labels.
    pub fn corrupted(&self, labels: &[usize]) -> Vec<bool> {
        self.clean.iter().zip(labels).map(|(c, l)| c != l).collect()
    }
}

/// What a trainer is allowed to see: inputs, the labels it trains on, the
/// test split, and an optional audit handle for reporting.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub test_x: Tensor,
    pub test_labels: Vec<usize>,
    pub num_classes: usize,
    pub audit: Option<NoiseAudit>,
}

impl TrainData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Same data with different training labels (label correction).
    pub fn with_labels(&self, labels: Vec<usize>) -> Self {
        Self { labels, ..self.clone() }
    }
}

impl Dataset {
    fn from_splits(x: Tensor, labels: Vec<usize>, test_x: Tensor, test_labels: Vec<usize>, num_classes: usize) -> Self {
        Self {
            x,
            noisy_labels: labels.clone(),
            clean_labels: labels,
            flip_mask: None,
            test_x,
            test_labels,
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.clean_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean_labels.is_empty()
    }

    /// Replaces the training labels with a corrupted copy of the clean ones.
    pub fn with_noise(mut self, spec: &NoiseSpec) -> Result<Self> {
        let (noisy, mask) = inject_noise(&self.clean_labels, self.num_classes, spec)?;
        self.noisy_labels = noisy;
        self.flip_mask = Some(mask);
        Ok(self)
    }

    /// Fraction of training labels that differ from the clean ones.
    pub fn noise_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let diff = self.clean_labels.iter().zip(&self.noisy_labels).filter(|(a, b)| a != b).count();
        diff as f64 / self.len() as f64
    }

    /// Trainer view with an audit handle for partition metrics.
    pub fn train_data(&self) -> TrainData {
        TrainData {
            audit: Some(NoiseAudit {
                clean: self.clean_labels.clone(),
            }),
            ..self.train_data_blind()
        }
    }

    /// Trainer view without any ground truth.
    pub fn train_data_blind(&self) -> TrainData {
        TrainData {
            x: self.x.clone(),
            labels: self.noisy_labels.clone(),
            test_x: self.test_x.clone(),
            test_labels: self.test_labels.clone(),
            num_classes: self.num_classes,
            audit: None,
        }
    }

    /// One row per sample: `split,index,clean_label,noisy_label,flip,x0,…`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let d = self.x.cols();
        let mut header = vec!["split".to_string(), "index".into(), "clean_label".into(), "noisy_label".into(), "flip".into()];
        header.extend((0..d).map(|j| format!("x{j}")));
        out.write_record(&header)?;
        for i in 0..self.len() {
            let flip = self.flip_mask.as_ref().map_or(0, |m| m[i] as u8);
            let mut rec = vec![
                "train".to_string(),
                i.to_string(),
                self.clean_labels[i].to_string(),
                self.noisy_labels[i].to_string(),
                flip.to_string(),
            ];
            rec.extend(self.x.row(i).iter().map(|v| format!("{v}")));
            out.write_record(&rec)?;
        }
        for i in 0..self.test_labels.len() {
            let l = self.test_labels[i].to_string();
            let mut rec = vec!["test".to_string(), i.to_string(), l.clone(), l, "0".into()];
            rec.extend(self.test_x.row(i).iter().map(|v| format!("{v}")));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Splits per-class sample lists 2:1 into train and test and shuffles each
/// split.
fn stratified_split(per_class: Vec<Vec<Vec<f64>>>, dim: usize, rng: &mut Rng) -> Result<(Tensor, Vec<usize>, Tensor, Vec<usize>)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, samples) in per_class.into_iter().enumerate() {
        let n_train = samples.len() * 2 / 3;
        for (i, s) in samples.into_iter().enumerate() {
            if i < n_train {
                train.push((s, c));
            } else {
                test.push((s, c));
            }
        }
    }
    let mut pack = |items: Vec<(Vec<f64>, usize)>| -> Result<(Tensor, Vec<usize>)> {
        let order = rng::permutation(rng, items.len());
        let mut data = Vec::with_capacity(items.len() * dim);
        let mut labels = Vec::with_capacity(items.len());
        for &i in &order {
            data.extend_from_slice(&items[i].0);
            labels.push(items[i].1);
        }
        Ok((Tensor::matrix(items.len(), dim, data)?, labels))
    };
    let (x, y) = pack(train)?;
    let (tx, ty) = pack(test)?;
    Ok((x, y, tx, ty))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Distance between the means of adjacent classes.
    pub class_separation: f64,
    pub intra_std: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    /// Four classes in the plane, 750 samples each (2000 train / 1000 test).
    fn default() -> Self {
        Self {
            num_classes: 4,
            dim: 2,
            samples_per_class: 750,
            class_separation: 3.0,
            intra_std: 1.0,
            seed: 0,
        }
    }
}

impl BlobSpec {
    /// Class means on a circle in the first two coordinates, spaced so that
    /// adjacent classes (`c`, `c+1 mod C`) sit `class_separation` apart. For
    /// `dim == 1` the means lie on a line with that spacing.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let mut mu = vec![0.0; self.dim];
                if self.dim == 1 {
                    mu[0] = k as f64 * self.class_separation;
                } else {
                    let radius = self.class_separation / (2.0 * (PI / c as f64).sin());
                    let angle = 2.0 * PI * k as f64 / c as f64;
                    mu[0] = radius * angle.cos();
                    mu[1] = radius * angle.sin();
                }
                mu
            })
            .collect()
    }
}

/// Isotropic Gaussian clouds around [`BlobSpec::class_means`].
pub fn gen_blobs(spec: &BlobSpec) -> Result<Dataset> {
    if spec.num_classes < 2 || spec.dim == 0 || spec.samples_per_class < 3 {
        return Err(Error::Parameter(format!("invalid blob spec {spec:?}")));
    }
    if !(spec.class_separation > 0.0) || !(spec.intra_std > 0.0) {
        return Err(Error::Parameter("separation and intra_std must be positive".into()));
    }
    let mut r = rng::seeded(spec.seed);
    let means = spec.class_means();
    let per_class = means
        .iter()
        .map(|mu| {
            (0..spec.samples_per_class)
                .map(|_| mu.iter().map(|m| m + spec.intra_std * rng::normal(&mut r)).collect())
                .collect()
        })
        .collect();
    let (x, y, tx, ty) = stratified_split(per_class, spec.dim, &mut r)?;
    Ok(Dataset::from_splits(x, y, tx, ty, spec.num_classes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RingSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Class `c` has mean radius `(c + 1) · radius_step`.
    pub radius_step: f64,
    /// Standard deviation of the radial noise.
    pub width: f64,
    pub seed: u64,
}

impl Default for RingSpec {
    fn default() -> Self {
        Self {
            num_classes: 2,
            samples_per_class: 750,
            radius_step: 1.0,
            width: 0.1,
            seed: 0,
        }
    }
}

/// Concentric annuli in the plane.
pub fn gen_rings(spec: &RingSpec) -> Result<Dataset> {
    if spec.num_classes < 2 || spec.samples_per_class < 3 || !(spec.radius_step > 0.0) || !(spec.width > 0.0) {
        return Err(Error::Parameter(format!("invalid ring spec {spec:?}")));
    }
    let mut r = rng::seeded(spec.seed);
    let per_class = (0..spec.num_classes)
        .map(|c| {
            let radius = (c + 1) as f64 * spec.radius_step;
            (0..spec.samples_per_class)
                .map(|_| {
                    let theta = rng::uniform(&mut r, 0.0, 2.0 * PI);
                    let rho = radius + spec.width * rng::normal(&mut r);
                    vec![rho * theta.cos(), rho * theta.sin()]
                })
                .collect()
        })
        .collect();
    let (x, y, tx, ty) = stratified_split(per_class, 2, &mut r)?;
    Ok(Dataset::from_splits(x, y, tx, ty, spec.num_classes))
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Decoded IDX image file.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// One entry per image, row-major, raw bytes.
    pub pixels: Vec<Vec<u8>>,
}

fn be_u32(buf: &[u8], offset: usize, what: &str) -> Result<u32> {
    buf.get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Parse {
            offset: offset as u64,
            message: format!("truncated IDX header while reading {what}"),
        })
}

fn check_magic(buf: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(buf, 0, "magic")?;
    if magic != expected {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad IDX magic {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

pub fn parse_idx_images(buf: &[u8]) -> Result<IdxImages> {
    check_magic(buf, IDX_IMAGES_MAGIC)?;
    let n = be_u32(buf, 4, "item count")? as usize;
    let rows = be_u32(buf, 8, "row count")? as usize;
    let cols = be_u32(buf, 12, "column count")? as usize;
    let size = rows * cols;
    let body = &buf[16..];
    let need = n.checked_mul(size).ok_or_else(|| Error::Parse {
        offset: 4,
        message: format!("IDX image header overflows: {n} x {rows} x {cols}"),
    })?;
    if body.len() < need {
        return Err(Error::Parse {
            offset: (16 + body.len()) as u64,
            message: format!("truncated IDX images: need {need} pixel bytes, found {}", body.len()),
        });
    }
    let pixels = (0..n).map(|i| body[i * size..(i + 1) * size].to_vec()).collect();
    Ok(IdxImages { rows, cols, pixels })
}

pub fn parse_idx_labels(buf: &[u8]) -> Result<Vec<u8>> {
    check_magic(buf, IDX_LABELS_MAGIC)?;
    let n = be_u32(buf, 4, "item count")? as usize;
    let body = &buf[8..];
    if body.len() < n {
        return Err(Error::Parse {
            offset: (8 + body.len()) as u64,
            message: format!("truncated IDX labels: need {n} bytes, found {}", body.len()),
        });
    }
    Ok(body[..n].to_vec())
}

/// Serialises images in the IDX layout read by [`parse_idx_images`].
pub fn write_idx_images(images: &IdxImages) -> Result<Vec<u8>> {
    let size = images.rows * images.cols;
    if let Some(i) = images.pixels.iter().position(|p| p.len() != size) {
        return Err(Error::dim("write_idx_images", format!("image {i} is not {}x{}", images.rows, images.cols)));
    }
    let mut out = Vec::with_capacity(16 + images.pixels.len() * size);
    for v in [IDX_IMAGES_MAGIC, images.pixels.len() as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    images.pixels.iter().for_each(|p| out.extend_from_slice(p));
    Ok(out)
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Scales bytes to `[0, 1]` and optionally average-pools to `k × k`.
pub fn image_features(img: &[u8], rows: usize, cols: usize, downsample_to: Option<usize>) -> Result<Vec<f64>> {
    let scaled: Vec<f64> = img.iter().map(|&b| b as f64 / 255.0).collect();
    let Some(k) = downsample_to else {
        return Ok(scaled);
    };
    if k == 0 || rows % k != 0 || cols % k != 0 {
        return Err(Error::Parameter(format!("cannot pool {rows}x{cols} down to {k}x{k}")));
    }
    let (br, bc) = (rows / k, cols / k);
    let mut out = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let mut s = 0.0;
            for r in i * br..(i + 1) * br {
                for c in j * bc..(j + 1) * bc {
                    s += scaled[r * cols + c];
                }
            }
            out.push(s / (br * bc) as f64);
        }
    }
    Ok(out)
}

/// Loads an IDX image/label pair. The first two thirds of the (truncated)
/// file become the training split, the rest the test split.
pub fn load_idx(images_path: &Path, labels_path: &Path, max_samples: Option<usize>, downsample_to: Option<usize>) -> Result<Dataset> {
    let images = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    idx_dataset(&images, &labels, max_samples, downsample_to)
}

pub fn idx_dataset(images: &IdxImages, labels: &[u8], max_samples: Option<usize>, downsample_to: Option<usize>) -> Result<Dataset> {
    if images.pixels.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} images but {} labels",
            images.pixels.len(),
            labels.len()
        )));
    }
    let n = max_samples.map_or(labels.len(), |m| m.min(labels.len()));
    let dim = downsample_to.map_or(images.rows * images.cols, |k| k * k);
    let mut data = Vec::with_capacity(n * dim);
    for img in &images.pixels[..n] {
        data.extend(image_features(img, images.rows, images.cols, downsample_to)?);
    }
    let ys: Vec<usize> = labels[..n].iter().map(|&l| l as usize).collect();
    let num_classes = ys.iter().max().map_or(0, |&m| m + 1);
    let n_train = n * 2 / 3;
    let x = Tensor::matrix(n_train, dim, data[..n_train * dim].to_vec())?;
    let tx = Tensor::matrix(n - n_train, dim, data[n_train * dim..].to_vec())?;
    Ok(Dataset::from_splits(x, ys[..n_train].to_vec(), tx, ys[n_train..].to_vec(), num_classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseKind;

    fn small_blobs(seed: u64) -> BlobSpec {
        BlobSpec {
            samples_per_class: 30,
            seed,
            ..BlobSpec::default()
        }
    }

    #[test]
    fn blob_counts_and_determinism() {
        let d = gen_blobs(&small_blobs(1)).unwrap();
        assert_eq!(d.len(), 80);
        assert_eq!(d.test_labels.len(), 40);
        for c in 0..4 {
            let total = d.clean_labels.iter().chain(&d.test_labels).filter(|&&l| l == c).count();
            assert_eq!(total, 30);
        }
        assert_eq!(d, gen_blobs(&small_blobs(1)).unwrap());
        assert_ne!(d, gen_blobs(&small_blobs(2)).unwrap());
        assert!(d.flip_mask.is_none());
    }

    #[test]
    fn adjacent_means_are_separated_as_specified() {
        let spec = BlobSpec {
            class_separation: 2.5,
            ..BlobSpec::default()
        };
        let m = spec.class_means();
        let dist = ((m[0][0] - m[1][0]).powi(2) + (m[0][1] - m[1][1]).powi(2)).sqrt();
        assert!((dist - 2.5).abs() < 1e-12);
    }

    #[test]
    fn rings_radius_ordering() {
        let d = gen_rings(&RingSpec::default()).unwrap();
        let mean_radius = |c: usize| {
            let rs: Vec<f64> = (0..d.len())
                .filter(|&i| d.clean_labels[i] == c)
                .map(|i| d.x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            rs.iter().sum::<f64>() / rs.len() as f64
        };
        assert!(mean_radius(0) < mean_radius(1));
        assert_eq!(d, gen_rings(&RingSpec::default()).unwrap());
    }

    #[test]
    fn noise_sets_flip_mask() {
        let d = gen_blobs(&small_blobs(3))
            .unwrap()
            .with_noise(&NoiseSpec {
                kind: NoiseKind::Symmetric { strict: true },
                ratio: 0.5,
                seed: 1,
            })
            .unwrap();
        let mask = d.flip_mask.as_ref().unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 40);
        assert!((d.noise_rate() - 0.5).abs() < 1e-12);
        let td = d.train_data();
        let corrupted = td.audit.as_ref().unwrap().corrupted(&td.labels);
        assert_eq!(&corrupted, mask);
        assert!(d.train_data_blind().audit.is_none());
    }

    fn idx_header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend(d.to_be_bytes());
        }
        v
    }

    #[test]
    fn idx_empty_and_corrupt() {
        let imgs = parse_idx_images(&idx_header(IDX_IMAGES_MAGIC, &[0, 28, 28])).unwrap();
        let labels = parse_idx_labels(&idx_header(IDX_LABELS_MAGIC, &[0])).unwrap();
        let d = idx_dataset(&imgs, &labels, None, None).unwrap();
        assert!(d.is_empty() && d.test_labels.is_empty());
        assert_eq!(d.x.shape(), &[0, 784]);

        let err = parse_idx_images(&idx_header(0x0000_0802, &[0, 28, 28])).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }));
        let err = parse_idx_images(&idx_header(IDX_IMAGES_MAGIC, &[2, 2])).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 12, .. }));
        let mut short = idx_header(IDX_IMAGES_MAGIC, &[1, 2, 2]);
        short.extend([1, 2, 3]);
        assert!(matches!(parse_idx_images(&short), Err(Error::Parse { offset: 19, .. })));
    }

    #[test]
    fn pooling_averages_blocks() {
        let img = [0u8, 255, 255, 255, 0, 0, 0, 0, 255, 255, 255, 255, 0, 0, 0, 0];
        let f = image_features(&img, 4, 4, Some(2)).unwrap();
        assert_eq!(f, vec![0.25, 0.5, 0.5, 0.5]);
        assert!(image_features(&img, 4, 4, Some(3)).is_err());
    }
}
