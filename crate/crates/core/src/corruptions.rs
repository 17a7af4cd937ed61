//! Severity-indexed natural corruptions. Parameters come from a
//! `kind.severity = value` table; the built-in one is
//! `data/corruptions.table`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::Tensor;

const BUILTIN_TABLE: &str = include_str!("../data/corruptions.table");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    GaussianBlur,
    Contrast,
    Brightness,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 7] = [
        Self::GaussianNoise,
        Self::ShotNoise,
        Self::ImpulseNoise,
        Self::GaussianBlur,
        Self::Contrast,
        Self::Brightness,
        Self::Pixelate,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::GaussianNoise => "gaussian_noise",
            Self::ShotNoise => "shot_noise",
            Self::ImpulseNoise => "impulse_noise",
            Self::GaussianBlur => "gaussian_blur",
            Self::Contrast => "contrast",
            Self::Brightness => "brightness",
            Self::Pixelate => "pixelate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownCorruption {
                kind: s.to_string(),
                severity: 0,
            })
    }

    pub fn is_noise(&self) -> bool {
        matches!(self, Self::GaussianNoise | Self::ShotNoise | Self::ImpulseNoise)
    }

    /// Whether a larger parameter means a stronger corruption.
    fn increasing(&self) -> bool {
        !matches!(self, Self::ShotNoise | Self::Contrast | Self::Pixelate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeverityTable {
    params: HashMap<(CorruptionKind, u8), f64>,
}

impl Default for SeverityTable {
    fn default() -> Self {
        Self::parse(BUILTIN_TABLE).expect("built-in table is valid")
    }
}

impl SeverityTable {
    /// Parses a table and checks it is complete and strictly monotone in
    /// severity for every kind.
    pub fn parse(text: &str) -> Result<Self> {
        let mut params = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Config { line, msg };
            let (key, value) = body.split_once('=').ok_or_else(|| bad(format!("expected `kind.severity = value`, got {body:?}")))?;
            let (kind, sev) = key.trim().rsplit_once('.').ok_or_else(|| bad(format!("key {key:?} lacks `.severity`")))?;
            let kind = CorruptionKind::parse(kind).map_err(|e| bad(e.to_string()))?;
            let sev: u8 = sev.parse().ok().filter(|s| (1..=5).contains(s)).ok_or_else(|| bad(format!("severity {sev:?} not in 1..5")))?;
            let v: f64 = value.trim().parse().map_err(|_| bad(format!("cannot parse value {value:?}")))?;
            if params.insert((kind, sev), v).is_some() {
                return Err(bad(format!("{} severity {sev} given twice", kind.as_str())));
            }
        }
        for kind in CorruptionKind::ALL {
            let vals: Vec<f64> = (1..=5)
                .map(|s| params.get(&(kind, s)).copied().ok_or(Error::UnknownCorruption { kind: kind.as_str().into(), severity: s }))
                .collect::<Result<_>>()?;
            let monotone = vals.windows(2).all(|w| if kind.increasing() { w[1] > w[0] } else { w[1] < w[0] });
            if !monotone {
                return Err(Error::invalid("SeverityTable", format!("{} parameters are not strictly monotone", kind.as_str())));
            }
        }
        Ok(Self { params })
    }

    pub fn param(&self, kind: CorruptionKind, severity: u8) -> Result<f64> {
        self.params.get(&(kind, severity)).copied().ok_or(Error::UnknownCorruption {
            kind: kind.as_str().into(),
            severity,
        })
    }
}

/// Applies `kind` with an explicit parameter. Output is clipped to `[0, 1]`.
pub fn apply(kind: CorruptionKind, param: f64, x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::shape("corrupt", "image rank", 3, x.shape().len()));
    };
    let mut out = x.clone();
    match kind {
        CorruptionKind::GaussianNoise => {
            let n = Normal::new(0.0, param).map_err(|e| Error::invalid("corrupt", e.to_string()))?;
            out.data_mut().iter_mut().for_each(|v| *v += n.sample(rng));
        }
        CorruptionKind::ShotNoise => {
            for v in out.data_mut() {
                let rate = (*v * param).max(0.0);
                *v = if rate > 0.0 {
                    Poisson::new(rate).map_err(|e| Error::invalid("corrupt", e.to_string()))?.sample(rng) / param
                } else {
                    0.0
                };
            }
        }
        CorruptionKind::ImpulseNoise => {
            for v in out.data_mut() {
                if rng.random::<f64>() < param {
                    *v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                }
            }
        }
        CorruptionKind::GaussianBlur => out = blur(x, c, h, w, param),
        CorruptionKind::Contrast => {
            let per = h * w;
            for chunk in out.data_mut().chunks_mut(per) {
                let m = chunk.iter().sum::<f64>() / per as f64;
                chunk.iter_mut().for_each(|v| *v = m + param * (*v - m));
            }
        }
        CorruptionKind::Brightness => out.data_mut().iter_mut().for_each(|v| *v += param),
        CorruptionKind::Pixelate => out = pixelate(x, c, h, w, param),
    }
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

fn blur(x: &Tensor, c: usize, h: usize, w: usize, sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return x.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ks: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / ks).collect();
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let src = x.data();
    let mut tmp = vec![0.0; src.len()];
    for ch in 0..c {
        for row in 0..h {
            for col in 0..w {
                tmp[(ch * h + row) * w + col] = (-r..=r)
                    .map(|d| k[(d + r) as usize] * src[(ch * h + row) * w + clampi(col as isize + d, w)])
                    .sum();
            }
        }
    }
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, row, col) = (i / (h * w), (i / w) % h, i % w);
        (-r..=r)
            .map(|d| k[(d + r) as usize] * tmp[(ch * h + clampi(row as isize + d, h)) * w + col])
            .sum()
    })
}

fn pixelate(x: &Tensor, c: usize, h: usize, w: usize, factor: f64) -> Tensor {
    let sh = ((h as f64 * factor).round() as usize).clamp(1, h);
    let sw = ((w as f64 * factor).round() as usize).clamp(1, w);
    if sh == h && sw == w {
        return x.clone();
    }
    // box-average each small cell over the source pixels it covers
    let mut small = vec![0.0; c * sh * sw];
    let mut counts = vec![0usize; sh * sw];
    for row in 0..h {
        for col in 0..w {
            let (sr, sc) = (row * sh / h, col * sw / w);
            counts[sr * sw + sc] += 1;
            for ch in 0..c {
                small[(ch * sh + sr) * sw + sc] += x.data()[(ch * h + row) * w + col];
            }
        }
    }
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, row, col) = (i / (h * w), (i / w) % h, i % w);
        let (sr, sc) = (row * sh / h, col * sw / w);
        small[(ch * sh + sr) * sw + sc] / counts[sr * sw + sc] as f64
    })
}

pub fn corrupt_with(table: &SeverityTable, x: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    let param = table.param(spec.kind, spec.severity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    apply(spec.kind, param, x, &mut rng)
}

/// Corrupts with the built-in table.
pub fn corrupt(x: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    corrupt_with(&SeverityTable::default(), x, spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionCell {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionGrid {
    pub clean: f64,
    pub cells: Vec<CorruptionCell>,
    pub n: usize,
}

impl CorruptionGrid {
    pub fn accuracy(&self, kind: CorruptionKind, severity: u8) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.kind == kind && c.severity == severity)
            .map(|c| c.accuracy)
    }
}

/// Accuracy for every `(kind, severity)`; image `i` uses noise seed
/// `seed + i`, so cells differ only in the corruption applied.
pub fn corruption_sweep<C: Classifier + ?Sized>(
    model: &C,
    data: &Dataset,
    kinds: &[CorruptionKind],
    severities: &[u8],
    table: &SeverityTable,
    seed: u64,
) -> Result<CorruptionGrid> {
    if data.is_empty() {
        return Err(Error::invalid("corruption_sweep", "dataset is empty"));
    }
    let acc = |xs: &[Tensor]| -> Result<f64> { crate::model::accuracy(model, xs, &data.labels) };
    let clean = acc(&data.images)?;
    let mut cells = Vec::new();
    for &kind in kinds {
        for &severity in severities {
            let xs = data
                .images
                .par_iter()
                .enumerate()
                .map(|(i, x)| {
                    corrupt_with(
                        table,
                        x,
                        &CorruptionSpec {
                            kind,
                            severity,
                            seed: seed.wrapping_add(i as u64),
                        },
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            cells.push(CorruptionCell {
                kind,
                severity,
                accuracy: acc(&xs)?,
            });
        }
    }
    Ok(CorruptionGrid {
        clean,
        cells,
        n: data.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::dataset::Split;

    fn img(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, 8, 8], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn builtin_table_is_complete_and_monotone() {
        let t = SeverityTable::default();
        assert_eq!(t.param(CorruptionKind::GaussianNoise, 1).unwrap(), 0.04);
        assert!(t.param(CorruptionKind::Contrast, 6).is_err());
        let broken = BUILTIN_TABLE.replace("contrast.3 = 0.4", "contrast.3 = 0.6");
        assert!(SeverityTable::parse(&broken).is_err());
        let missing = BUILTIN_TABLE.replace("pixelate.5 = 0.65", "");
        assert!(matches!(SeverityTable::parse(&missing), Err(Error::UnknownCorruption { severity: 5, .. })));
    }

    #[test]
    fn unknown_kind_or_severity() {
        assert!(matches!(CorruptionKind::parse("fog"), Err(Error::UnknownCorruption { .. })));
        let spec = CorruptionSpec {
            kind: CorruptionKind::Brightness,
            severity: 0,
            seed: 0,
        };
        assert!(matches!(corrupt(&img(0), &spec), Err(Error::UnknownCorruption { severity: 0, .. })));
    }

    #[test]
    fn unit_contrast_is_identity() {
        let x = img(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = apply(CorruptionKind::Contrast, 1.0, &x, &mut rng).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn outputs_in_range_and_deterministic() {
        let x = img(2);
        for kind in CorruptionKind::ALL {
            for severity in 1..=5 {
                let spec = CorruptionSpec { kind, severity, seed: 7 };
                let a = corrupt(&x, &spec).unwrap();
                assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)), "{kind:?}");
                assert_eq!(a, corrupt(&x, &spec).unwrap());
            }
        }
        let s = |seed| CorruptionSpec {
            kind: CorruptionKind::GaussianNoise,
            severity: 3,
            seed,
        };
        assert_ne!(corrupt(&x, &s(1)).unwrap(), corrupt(&x, &s(2)).unwrap());
    }

    #[test]
    fn gaussian_noise_mean_absolute_deviation() {
        // E|N(0, s)| = s * sqrt(2 / pi); mid-grey images keep clipping negligible
        let x = Tensor::full(&[3, 8, 8], 0.5);
        let sigma = 0.1;
        let mut total = 0.0;
        for i in 0..1000 {
            let spec = CorruptionSpec {
                kind: CorruptionKind::GaussianNoise,
                severity: 5,
                seed: i,
            };
            total += corrupt(&x, &spec).unwrap().sub(&x).data().iter().map(|v| v.abs()).sum::<f64>();
        }
        let mad = total / (1000.0 * x.len() as f64);
        let expect = sigma * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mad / expect - 1.0).abs() < 0.05, "{mad} vs {expect}");
    }

    #[test]
    fn blur_and_pixelate_preserve_constants() {
        let x = Tensor::full(&[2, 8, 8], 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in [CorruptionKind::GaussianBlur, CorruptionKind::Pixelate] {
            let y = apply(kind, 0.65, &x, &mut rng).unwrap();
            assert!(y.max_abs_diff(&x) < 1e-12);
        }
        let p = pixelate(&img(3), 3, 8, 8, 0.5);
        assert_eq!(p.data()[0], p.data()[1]);
    }

    struct Constant;
    impl Classifier for Constant {
        fn classes(&self) -> usize {
            2
        }
        fn logits(&self, _: &Tensor) -> Result<Tensor> {
            Ok(Tensor::from_vec(vec![1.0, 0.0]))
        }
    }

    #[test]
    fn constant_model_sweep_is_flat() {
        let imgs: Vec<Tensor> = (0..20).map(img).collect();
        let labels = (0..20).map(|i| i % 2).collect();
        let d = Dataset::new(imgs, labels, 2, Split::Test).unwrap();
        let g = corruption_sweep(&Constant, &d, &CorruptionKind::ALL, &[1, 3, 5], &SeverityTable::default(), 0).unwrap();
        assert_eq!(g.clean, 0.5);
        assert!(g.cells.iter().all(|c| c.accuracy == 0.5));
    }
}
