//! Synthetic sensor-degradation corruptions at five severity levels.
//!
//! Noise kinds draw randomness from a per-image seed derived from the spec seed, the
//! kind and the image's global index, so results do not depend on how a dataset is
//! cut into batches. The remaining kinds are deterministic functions of the pixels.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4, ArrayView3, ArrayViewMut3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{map_indexed, Exec};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    MotionBlur,
    Contrast,
    Brightness,
    Pixelate,
    JpegLike,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 9] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::Pixelate,
        CorruptionKind::JpegLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::JpegLike => "jpeg_like",
        }
    }

    pub fn is_noise(self) -> bool {
        matches!(
            self,
            CorruptionKind::GaussianNoise | CorruptionKind::ShotNoise | CorruptionKind::ImpulseNoise
        )
    }

    /// Severity-indexed parameter (severity 1..=5).
    pub fn parameter(self, severity: u8) -> f64 {
        let table: [f64; 5] = match self {
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.18, 0.26],
            CorruptionKind::ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0],
            CorruptionKind::ImpulseNoise => [0.01, 0.03, 0.06, 0.1, 0.17],
            CorruptionKind::DefocusBlur => [1.0, 2.0, 3.0, 4.0, 6.0],
            CorruptionKind::MotionBlur => [3.0, 5.0, 7.0, 9.0, 12.0],
            CorruptionKind::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15],
            CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            CorruptionKind::Pixelate => [0.6, 0.5, 0.4, 0.3, 0.25],
            CorruptionKind::JpegLike => [80.0, 60.0, 40.0, 25.0, 10.0],
        };
        table[(severity.clamp(1, 5) - 1) as usize]
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
    /// Replaces the severity-table parameter when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_override: Option<f64>,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        let spec = Self {
            kind,
            severity,
            seed,
            param_override: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::InvalidArgument(format!(
                "severity {} not in 1..=5",
                self.severity
            )));
        }
        Ok(())
    }

    pub fn parameter(&self) -> f64 {
        self.param_override
            .unwrap_or_else(|| self.kind.parameter(self.severity))
    }
}

/// Where a batch came from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    /// Global index of the first image, used to derive per-image noise seeds.
    pub first_index: usize,
    pub corruption: Option<CorruptionSpec>,
}

/// `B x H x W x 3` pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub pixels: Array4<f32>,
    pub provenance: Provenance,
}

impl ImageBatch {
    pub fn new(pixels: Array4<f32>, source: impl Into<String>, first_index: usize) -> Result<Self> {
        if pixels.len_of(Axis(3)) != 3 {
            return Err(Error::BadImageShape(format!(
                "expected 3 channels, got {:?}",
                pixels.dim()
            )));
        }
        Ok(Self {
            pixels,
            provenance: Provenance {
                source: source.into(),
                first_index,
                corruption: None,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Applies `spec` to every image of `clean`; output is clipped to `[0, 1]`.
pub fn apply_corruption(clean: &ImageBatch, spec: &CorruptionSpec) -> Result<ImageBatch> {
    apply_corruption_with(clean, spec, Exec::default())
}

pub fn apply_corruption_with(clean: &ImageBatch, spec: &CorruptionSpec, exec: Exec) -> Result<ImageBatch> {
    spec.validate()?;
    let first = clean.provenance.first_index;
    let images = map_indexed(exec, clean.len(), |i| {
        let seed = seeds::derive(
            spec.seed,
            &[seeds::label(spec.kind.name()), (first + i) as u64],
        );
        corrupt_image(clean.pixels.index_axis(Axis(0), i), spec, seed)
    });
    let mut pixels = clean.pixels.clone();
    for (i, img) in images.into_iter().enumerate() {
        pixels.index_axis_mut(Axis(0), i).assign(&img);
    }
    Ok(ImageBatch {
        pixels,
        provenance: Provenance {
            source: clean.provenance.source.clone(),
            first_index: first,
            corruption: Some(spec.clone()),
        },
    })
}

fn corrupt_image(img: ArrayView3<'_, f32>, spec: &CorruptionSpec, seed: u64) -> Array3<f32> {
    let param = spec.parameter();
    let mut out = img.to_owned();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            if param > 0.0 {
                let n = Normal::new(0.0, param).expect("positive sigma");
                out.mapv_inplace(|p| p + n.sample(&mut rng) as f32);
            }
        }
        CorruptionKind::ShotNoise => {
            out.mapv_inplace(|p| {
                let lambda = (p as f64).max(0.0) * param;
                if lambda <= 0.0 {
                    0.0
                } else {
                    let k: f64 = Poisson::new(lambda).expect("positive rate").sample(&mut rng);
                    (k / param) as f32
                }
            });
        }
        CorruptionKind::ImpulseNoise => {
            out.mapv_inplace(|p| {
                if rng.gen::<f64>() < param {
                    if rng.gen::<bool>() {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    p
                }
            });
        }
        CorruptionKind::DefocusBlur => {
            let r = param.round() as i64;
            let taps: Vec<(i64, i64)> = (-r..=r)
                .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
                .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
                .collect();
            out = convolve(img, &taps);
        }
        CorruptionKind::MotionBlur => {
            let len = param.round().max(1.0) as i64;
            let start = -(len - 1) / 2;
            let taps: Vec<(i64, i64)> = (start..start + len).map(|k| (k, k)).collect();
            out = convolve(img, &taps);
        }
        CorruptionKind::Contrast => {
            let mean = img.mean().unwrap_or(0.0);
            let c = param as f32;
            out.mapv_inplace(|p| (p - mean) * c + mean);
        }
        CorruptionKind::Brightness => {
            let d = param as f32;
            out.mapv_inplace(|p| p + d);
        }
        CorruptionKind::Pixelate => pixelate(img, param, out.view_mut()),
        CorruptionKind::JpegLike => jpeg_like(img, param, out.view_mut()),
    }
    out.mapv_inplace(|p| p.clamp(0.0, 1.0));
    out
}

/// Mean over `taps` offsets with clamp-to-edge borders.
fn convolve(img: ArrayView3<'_, f32>, taps: &[(i64, i64)]) -> Array3<f32> {
    let (h, w, c) = img.dim();
    let inv = 1.0 / taps.len() as f32;
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
        let mut acc = 0.0f32;
        for &(dy, dx) in taps {
            let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
            let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
            acc += img[[yy, xx, ch]];
        }
        acc * inv
    })
}

fn pixelate(img: ArrayView3<'_, f32>, factor: f64, mut out: ArrayViewMut3<'_, f32>) {
    let (h, w, c) = img.dim();
    let mh = ((h as f64 * factor).round() as usize).clamp(1, h);
    let mw = ((w as f64 * factor).round() as usize).clamp(1, w);
    let mut small = Array3::<f32>::zeros((mh, mw, c));
    for a in 0..mh {
        let (y0, y1) = (a * h / mh, ((a + 1) * h / mh).max(a * h / mh + 1));
        for b in 0..mw {
            let (x0, x1) = (b * w / mw, ((b + 1) * w / mw).max(b * w / mw + 1));
            for ch in 0..c {
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += img[[y, x, ch]];
                    }
                }
                small[[a, b, ch]] = acc / ((y1 - y0) * (x1 - x0)) as f32;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[[y, x, ch]] = small[[y * mh / h, x * mw / w, ch]];
            }
        }
    }
}

const JPEG_LUMA: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57., 69.,
    56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64., 81.,
    104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

fn quant_table(quality: f64) -> [f64; 64] {
    let q = quality.clamp(1.0, 100.0);
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0; 64];
    for (dst, &base) in t.iter_mut().zip(JPEG_LUMA.iter()) {
        *dst = ((base * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    t
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (k, row) in m.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    m
}

/// Per-channel 8x8 block DCT quantization.
fn jpeg_like(img: ArrayView3<'_, f32>, quality: f64, mut out: ArrayViewMut3<'_, f32>) {
    let (h, w, c) = img.dim();
    let table = quant_table(quality);
    let basis = dct_basis();
    for ch in 0..c {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [[0.0f64; 8]; 8];
                for (i, row) in block.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        let y = (by + i).min(h - 1);
                        let x = (bx + j).min(w - 1);
                        *v = img[[y, x, ch]] as f64 * 255.0 - 128.0;
                    }
                }
                let mut coef = [[0.0f64; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut acc = 0.0;
                        for (i, row) in block.iter().enumerate() {
                            for (j, &x) in row.iter().enumerate() {
                                acc += basis[u][i] * basis[v][j] * x;
                            }
                        }
                        let q = table[u * 8 + v];
                        coef[u][v] = (acc / q).round() * q;
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        let (y, x) = (by + i, bx + j);
                        if y >= h || x >= w {
                            continue;
                        }
                        let mut acc = 0.0;
                        for (u, row) in coef.iter().enumerate() {
                            for (v, &cv) in row.iter().enumerate() {
                                acc += basis[u][i] * basis[v][j] * cv;
                            }
                        }
                        out[[y, x, ch]] = ((acc + 128.0) / 255.0) as f32;
                    }
                }
            }
        }
    }
}

/// One corrupted copy of `clean` per kind, each with a kind-derived seed.
pub fn corruption_suite(
    clean: &ImageBatch,
    kinds: &[CorruptionKind],
    severity: u8,
    seed: u64,
) -> Result<BTreeMap<CorruptionKind, ImageBatch>> {
    if kinds.is_empty() {
        return Err(Error::EmptyKinds);
    }
    kinds
        .iter()
        .map(|&kind| {
            let spec = CorruptionSpec::new(kind, severity, seeds::derive(seed, &[seeds::label(kind.name())]))?;
            Ok((kind, apply_corruption(clean, &spec)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(seed: u64) -> ImageBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = Array4::from_shape_fn((3, 16, 16, 3), |_| rng.gen::<f32>());
        ImageBatch::new(px, "test", 0).unwrap()
    }

    fn constant(v: f32) -> ImageBatch {
        ImageBatch::new(Array4::from_elem((2, 16, 16, 3), v), "const", 0).unwrap()
    }

    #[test]
    fn zero_sigma_gaussian_is_identity() {
        let b = batch(1);
        let spec = CorruptionSpec {
            param_override: Some(0.0),
            ..CorruptionSpec::new(CorruptionKind::GaussianNoise, 3, 9).unwrap()
        };
        assert_eq!(apply_corruption(&b, &spec).unwrap().pixels, b.pixels);
    }

    #[test]
    fn brightness_schedule() {
        for s in 1..=5u8 {
            let spec = CorruptionSpec::new(CorruptionKind::Brightness, s, 0).unwrap();
            let out = apply_corruption(&constant(0.0), &spec).unwrap();
            let expected = [0.1f32, 0.2, 0.3, 0.4, 0.5][s as usize - 1];
            assert!(out.pixels.iter().all(|&p| p == expected));
        }
        let spec = CorruptionSpec::new(CorruptionKind::Brightness, 5, 0).unwrap();
        let out = apply_corruption(&constant(0.8), &spec).unwrap();
        assert!(out.pixels.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn blurs_preserve_constants() {
        for kind in [CorruptionKind::DefocusBlur, CorruptionKind::MotionBlur, CorruptionKind::Pixelate] {
            for s in 1..=5 {
                let spec = CorruptionSpec::new(kind, s, 0).unwrap();
                let out = apply_corruption(&constant(0.37), &spec).unwrap();
                assert!(out.pixels.iter().all(|&p| (p - 0.37).abs() < 1e-6), "{kind} s{s}");
            }
        }
    }

    #[test]
    fn all_kinds_stay_in_unit_range() {
        let b = batch(2);
        for kind in CorruptionKind::ALL {
            for s in [1, 5] {
                let out = apply_corruption(&b, &CorruptionSpec::new(kind, s, 4).unwrap()).unwrap();
                assert!(out.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)), "{kind}");
                assert_eq!(out.provenance.corruption.as_ref().unwrap().kind, kind);
            }
        }
    }

    #[test]
    fn noise_depends_on_seed_only_for_noise_kinds() {
        let b = batch(3);
        for kind in CorruptionKind::ALL {
            let a = apply_corruption(&b, &CorruptionSpec::new(kind, 4, 1).unwrap()).unwrap();
            let c = apply_corruption(&b, &CorruptionSpec::new(kind, 4, 2).unwrap()).unwrap();
            let again = apply_corruption(&b, &CorruptionSpec::new(kind, 4, 1).unwrap()).unwrap();
            assert_eq!(a.pixels, again.pixels);
            assert_eq!(a.pixels != c.pixels, kind.is_noise(), "{kind}");
        }
    }

    #[test]
    fn per_image_seeds_are_batching_independent() {
        let b = batch(5);
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 5, 11).unwrap();
        let whole = apply_corruption(&b, &spec).unwrap();
        let tail = ImageBatch::new(b.pixels.slice(ndarray::s![1.., .., .., ..]).to_owned(), "test", 1).unwrap();
        let part = apply_corruption(&tail, &spec).unwrap();
        assert_eq!(whole.pixels.slice(ndarray::s![1.., .., .., ..]), part.pixels);
    }

    #[test]
    fn jpeg_high_quality_is_close() {
        let b = batch(6);
        let hi = apply_corruption(&b, &CorruptionSpec::new(CorruptionKind::JpegLike, 1, 0).unwrap()).unwrap();
        let lo = apply_corruption(&b, &CorruptionSpec::new(CorruptionKind::JpegLike, 5, 0).unwrap()).unwrap();
        let err = |x: &ImageBatch| (&x.pixels - &b.pixels).mapv(|v| v.abs()).mean().unwrap();
        assert!(err(&hi) < err(&lo));
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("defocus_blur".parse::<CorruptionKind>().unwrap(), CorruptionKind::DefocusBlur);
        assert!(matches!("fog".parse::<CorruptionKind>(), Err(Error::UnknownKind(_))));
        assert!(CorruptionSpec::new(CorruptionKind::Contrast, 6, 0).is_err());
    }

    #[test]
    fn suite_examples() {
        let b = batch(7);
        let kinds = [CorruptionKind::GaussianNoise, CorruptionKind::Contrast];
        let s1 = corruption_suite(&b, &kinds, 3, 42).unwrap();
        let s2 = corruption_suite(&b, &kinds, 3, 42).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.len(), 2);
        assert!(matches!(corruption_suite(&b, &[], 3, 42), Err(Error::EmptyKinds)));
    }
}
