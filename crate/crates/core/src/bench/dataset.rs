//! Image datasets: the CIFAR binary format, synthetic class-conditional
//! generators, augmentation and evaluation.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Classifier, Normalizer};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Images `[C, H, W]` with pixels in `[0, 1]`.
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::shape("Dataset", "labels", images.len(), labels.len()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid("Dataset", format!("label {y} outside [0, {classes})")));
        }
        if let Some(first) = images.first() {
            if first.shape().len() != 3 {
                return Err(Error::shape("Dataset", "image rank", 3, first.shape().len()));
            }
            for img in &images {
                if img.shape() != first.shape() {
                    return Err(Error::shape("Dataset", "image size", first.len(), img.len()));
                }
                if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::invalid("Dataset", "pixels must lie in [0, 1]"));
                }
            }
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.images.first().map(|t| [t.shape()[0], t.shape()[1], t.shape()[2]])
    }

    /// The first `n` examples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// Per-channel pixel mean and standard deviation over the whole set.
    pub fn normalizer(&self) -> Normalizer {
        let Some([c, h, w]) = self.image_shape() else {
            return Normalizer::identity(1);
        };
        let per = h * w;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for img in &self.images {
            for (ch, chunk) in img.data().chunks(per).enumerate() {
                sum[ch] += chunk.iter().sum::<f64>();
                sq[ch] += chunk.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let n = (self.len() * per) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Normalizer { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    /// 1 label byte per record.
    Cifar10,
    /// Coarse and fine label bytes; the fine label is used.
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(&self) -> usize {
        match self {
            Self::Cifar10 => 3073,
            Self::Cifar100 => 3074,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Self::Cifar10 => 10,
            Self::Cifar100 => 100,
        }
    }
}

pub fn load_cifar_binary(path: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_binary(&bytes, variant, split)
}

/// Parses fixed-size records: label byte(s), then 3072 pixel bytes as R, G
/// and B planes of 32x32 row-major values.
pub fn parse_cifar_binary(bytes: &[u8], variant: CifarVariant, split: Split) -> Result<Dataset> {
    let rec = variant.record_len();
    let label_bytes = rec - 3072;
    let whole = bytes.len() / rec * rec;
    if whole != bytes.len() {
        return Err(Error::Parse {
            offset: whole as u64,
            msg: format!("trailing {} bytes do not form a {rec}-byte record", bytes.len() - whole),
        });
    }
    let mut images = Vec::with_capacity(bytes.len() / rec);
    let mut labels = Vec::with_capacity(bytes.len() / rec);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[label_bytes - 1] as usize;
        if label >= variant.classes() {
            return Err(Error::Parse {
                offset: (i * rec + label_bytes - 1) as u64,
                msg: format!("label {label} out of range for {} classes", variant.classes()),
            });
        }
        let px = r[label_bytes..].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Tensor::new(vec![3, 32, 32], px)?);
        labels.push(label);
    }
    Dataset::new(images, labels, variant.classes(), split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// A Gaussian bump whose centre sits on a ring at a class-specific angle.
    Blobs,
    /// A sinusoidal grating with class-specific orientation and random phase.
    Stripes,
}

impl SynthKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "stripes" => Ok(Self::Stripes),
            _ => Err(Error::invalid("SynthKind", format!("unknown synthetic dataset {s:?}"))),
        }
    }
}

/// Generator settings. `noise` is the std of additive pixel noise and
/// `jitter` the maximal centre displacement in pixels; both zero gives one
/// fixed image per class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub image_shape: [usize; 3],
    pub classes: usize,
    pub noise: f64,
    pub jitter: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn blobs(image_shape: [usize; 3], classes: usize, seed: u64) -> Self {
        Self {
            kind: SynthKind::Blobs,
            image_shape,
            classes,
            noise: 0.1,
            jitter: 1.0,
            seed,
        }
    }
}

/// `n` examples with labels `i % classes`.
pub fn synth_dataset(cfg: &SynthConfig, n: usize, split: Split) -> Result<Dataset> {
    if n == 0 || cfg.classes == 0 {
        return Err(Error::invalid("synth_dataset", "need n > 0 and classes > 0"));
    }
    let [c, h, w] = cfg.image_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let radius = h.min(w) as f64 / 4.0;
    let sigma = h.min(w) as f64 / 6.0;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % cfg.classes;
        let angle = 2.0 * PI * y as f64 / cfg.classes as f64;
        let jy = cfg.jitter * rng.random_range(-1.0..=1.0);
        let jx = cfg.jitter * rng.random_range(-1.0..=1.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        let mut img = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            let gain = 1.0 - 0.2 * ch as f64 / c as f64;
            for r in 0..h {
                for q in 0..w {
                    let clean = match cfg.kind {
                        SynthKind::Blobs => {
                            let (by, bx) = (cy + radius * angle.sin() + jy, cx + radius * angle.cos() + jx);
                            let d2 = (r as f64 - by).powi(2) + (q as f64 - bx).powi(2);
                            0.2 + 0.7 * gain * (-d2 / (2.0 * sigma * sigma)).exp()
                        }
                        SynthKind::Stripes => {
                            let theta = PI * y as f64 / cfg.classes as f64;
                            let u = r as f64 * theta.cos() + q as f64 * theta.sin();
                            0.5 + 0.35 * gain * (2.0 * PI * u / 4.0 + phase).sin()
                        }
                    };
                    let e: f64 = StandardNormal.sample(&mut rng);
                    img.data_mut()[(ch * h + r) * w + q] = (clean + cfg.noise * e).clamp(0.0, 1.0);
                }
            }
        }
        images.push(img);
        labels.push(y);
    }
    Dataset::new(images, labels, cfg.classes, split)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Augment {
    pub hflip: bool,
    /// Zero-pad by this many pixels, then crop back at a random offset.
    pub crop_pad: Option<usize>,
}

impl Augment {
    pub fn is_identity(&self) -> bool {
        !self.hflip && self.crop_pad.is_none()
    }
}

pub fn hflip(x: &Tensor) -> Tensor {
    let &[c, h, w] = x.shape() else { return x.clone() };
    Tensor::from_fn(&[c, h, w], |i| {
        let (row, col) = (i / w, i % w);
        x.data()[row * w + (w - 1 - col)]
    })
}

/// Crop of the zero-padded image whose top-left corner is `(dy, dx)` in
/// padded coordinates, `0 <= dy, dx <= 2 * pad`.
pub fn pad_crop(x: &Tensor, pad: usize, dy: usize, dx: usize) -> Tensor {
    let &[c, h, w] = x.shape() else { return x.clone() };
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for r in 0..h {
            for q in 0..w {
                let (sr, sq) = ((r + dy) as isize - pad as isize, (q + dx) as isize - pad as isize);
                if sr >= 0 && sq >= 0 && (sr as usize) < h && (sq as usize) < w {
                    out.data_mut()[(ch * h + r) * w + q] = x.data()[(ch * h + sr as usize) * w + sq as usize];
                }
            }
        }
    }
    out
}

/// Applies random flips and crops; deterministic given `rng` state.
pub fn augment(batch: &[Tensor], aug: Augment, rng: &mut impl Rng) -> Vec<Tensor> {
    batch
        .iter()
        .map(|x| {
            let mut out = x.clone();
            if aug.hflip && rng.random::<bool>() {
                out = hflip(&out);
            }
            if let Some(pad) = aug.crop_pad {
                let dy = rng.random_range(0..=2 * pad);
                let dx = rng.random_range(0..=2 * pad);
                out = pad_crop(&out, pad, dy, dx);
            }
            out
        })
        .collect()
}

/// Top-1 accuracy over the dataset, evaluated `batch_size` examples at a time.
pub fn evaluate<C: Classifier + ?Sized>(model: &C, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    use rayon::prelude::*;
    let mut hits = 0usize;
    for (xs, ys) in data.images.chunks(batch_size.max(1)).zip(data.labels.chunks(batch_size.max(1))) {
        let preds = xs.par_iter().map(|x| model.predict(x)).collect::<Result<Vec<_>>>()?;
        hits += preds.iter().zip(ys).filter(|(p, y)| p == y).count();
    }
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn fixture() -> Vec<u8> {
        let mut bytes = Vec::new();
        for (label, base) in [(3u8, 0u32), (9u8, 7u32)] {
            bytes.push(label);
            bytes.extend((0..3072u32).map(|i| ((i * 31 + base) % 256) as u8));
        }
        bytes
    }

    #[test]
    fn cifar_fixture_is_parsed_byte_exactly() {
        let d = parse_cifar_binary(&fixture(), CifarVariant::Cifar10, Split::Test).unwrap();
        assert_eq!(d.labels, vec![3, 9]);
        let img = &d.images[1];
        assert_eq!(img.shape(), &[3, 32, 32]);
        // green plane, row 2, column 5
        let i = 1024 + 2 * 32 + 5;
        assert_eq!(img.data()[i], ((i as u32 * 31 + 7) % 256) as f64 / 255.0);
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let mut bytes = vec![4u8, 77u8];
        bytes.extend(std::iter::repeat_n(255u8, 3072));
        let d = parse_cifar_binary(&bytes, CifarVariant::Cifar100, Split::Train).unwrap();
        assert_eq!(d.labels, vec![77]);
        assert!(d.images[0].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cifar_framing_errors() {
        assert!(parse_cifar_binary(&[], CifarVariant::Cifar10, Split::Test).unwrap().is_empty());
        let mut b = fixture();
        b.extend([1, 2, 3]);
        match parse_cifar_binary(&b, CifarVariant::Cifar10, Split::Test) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 2 * 3073),
            other => panic!("{other:?}"),
        }
        let mut b = fixture();
        b[3073] = 10;
        match parse_cifar_binary(&b, CifarVariant::Cifar10, Split::Test) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let cfg = SynthConfig::blobs([1, 8, 8], 3, 5);
        let a = synth_dataset(&cfg, 100, Split::Train).unwrap();
        assert_eq!(a, synth_dataset(&cfg, 100, Split::Train).unwrap());
        let mut hist = [0usize; 3];
        a.labels.iter().for_each(|&y| hist[y] += 1);
        assert!(hist.iter().max().unwrap() - hist.iter().min().unwrap() <= 1);
        let s = synth_dataset(&SynthConfig { kind: SynthKind::Stripes, ..cfg }, 30, Split::Train).unwrap();
        assert!(s.images.iter().all(|x| x.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn noiseless_blobs_are_linearly_separable() {
        // a nearest-class-mean direction separates the two fixed images
        let cfg = SynthConfig { noise: 0.0, jitter: 0.0, ..SynthConfig::blobs([1, 8, 8], 2, 1) };
        let d = synth_dataset(&cfg, 64, Split::Train).unwrap();
        let w = d.images[0].sub(&d.images[1]);
        let b = -(d.images[0].dot(&w) + d.images[1].dot(&w)) / 2.0;
        for (x, &y) in d.images.iter().zip(&d.labels) {
            let s = x.dot(&w) + b;
            assert!(if y == 0 { s > 0.0 } else { s < 0.0 });
        }
    }

    #[test]
    fn augment_identity_and_flip_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_fn(&[2, 4, 5], |i| i as f64 / 40.0);
        assert_eq!(augment(std::slice::from_ref(&x), Augment::default(), &mut rng), vec![x.clone()]);
        assert_eq!(hflip(&hflip(&x)), x);
        assert_eq!(pad_crop(&x, 4, 4, 4), x);
    }

    #[test]
    fn crop_offsets_are_uniform() {
        let pad = 2;
        let k = (2 * pad + 1) * (2 * pad + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = vec![0f64; k];
        let n = 10_000;
        for _ in 0..n {
            let dy = rng.random_range(0..=2 * pad);
            let dx = rng.random_range(0..=2 * pad);
            counts[dy * (2 * pad + 1) + dx] += 1.0;
        }
        let e = n as f64 / k as f64;
        let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
        let p = 1.0 - ChiSquared::new((k - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn crop_moves_content() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| (i + 1) as f64 / 10.0);
        let c = pad_crop(&x, 1, 0, 0);
        assert_eq!(c.data(), &[0.0, 0.0, 0.0, 0.0, 0.1, 0.2, 0.0, 0.4, 0.5]);
    }

    #[test]
    fn normalizer_statistics() {
        let imgs = vec![Tensor::full(&[1, 2, 2], 0.2), Tensor::full(&[1, 2, 2], 0.6)];
        let d = Dataset::new(imgs, vec![0, 1], 2, Split::Train).unwrap();
        let n = d.normalizer();
        assert!((n.mean[0] - 0.4).abs() < 1e-12);
        assert!((n.std[0] - 0.2).abs() < 1e-12);
    }
}
