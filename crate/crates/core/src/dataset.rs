//! Labeled image collections: the procedural toy benchmark, PNG folders and
//! pre-decoded tensor archives.

use std::fs;
use std::io::BufReader;
use std::path::Path;

use ndarray::{s, Array1, Array4, ArrayViewMut3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::archive::{self, TensorArchive};
use crate::corrupt::{apply_corruption, CorruptionSpec, ImageBatch};
use crate::error::{Error, Result};
use crate::seeds;

pub const TOY_CLASSES: [&str; 10] = [
    "disk", "square", "triangle", "ring", "plus", "cross", "hstripes", "vstripes", "checker", "dots",
];

const CLASS_NAMES_FILE: &str = "class_names.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N x H x W x 3` pixels in `[0, 1]`.
    pub images: Array4<f32>,
    pub labels: Option<Vec<usize>>,
    pub class_names: Vec<String>,
    pub source: String,
}

/// A contiguous slice of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub images: ImageBatch,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        images: Array4<f32>,
        labels: Option<Vec<usize>>,
        class_names: Vec<String>,
        source: impl Into<String>,
    ) -> Result<Self> {
        let (n, h, w, c) = images.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::BadImageShape(format!("dataset images have shape {:?}", images.dim())));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::LengthMismatch { left: n, right: l.len() });
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= class_names.len()) {
                return Err(Error::InvalidArgument(format!(
                    "label {bad} out of range for {} classes",
                    class_names.len()
                )));
            }
        }
        Ok(Self {
            images,
            labels,
            class_names,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_size(&self) -> (usize, usize) {
        let (_, h, w, _) = self.images.dim();
        (h, w)
    }

    /// Images `start..end` with their labels.
    pub fn slice(&self, start: usize, end: usize) -> LabeledBatch {
        let end = end.min(self.len());
        let pixels = self.images.slice(s![start..end, .., .., ..]).to_owned();
        LabeledBatch {
            images: ImageBatch {
                pixels,
                provenance: crate::corrupt::Provenance {
                    source: self.source.clone(),
                    first_index: start,
                    corruption: None,
                },
            },
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
        }
    }

    /// Consecutive batches of `batch_size`; the last one may be shorter.
    pub fn batches(&self, batch_size: usize) -> Vec<LabeledBatch> {
        let bs = batch_size.max(1);
        (0..self.len())
            .step_by(bs)
            .map(|start| self.slice(start, start + bs))
            .collect()
    }

    /// The first `n` images.
    pub fn head(&self, n: usize) -> Dataset {
        let b = self.slice(0, n);
        Dataset {
            images: b.images.pixels,
            labels: b.labels,
            class_names: self.class_names.clone(),
            source: self.source.clone(),
        }
    }

    /// SHA-256 over shape, pixels, labels and class names.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in self.images.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in self.images.iter() {
            h.update(v.to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for &y in labels {
                h.update((y as u64).to_le_bytes());
            }
        }
        for name in &self.class_names {
            h.update(name.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }

    /// Applies `spec` to every image, indexing noise seeds by position in the dataset.
    pub fn corrupted(&self, spec: &CorruptionSpec) -> Result<Dataset> {
        let whole = self.slice(0, self.len());
        let out = apply_corruption(&whole.images, spec)?;
        Ok(Dataset {
            images: out.pixels,
            labels: self.labels.clone(),
            class_names: self.class_names.clone(),
            source: format!("{}/{}-s{}", self.source, spec.kind, spec.severity),
        })
    }

    /// Stores images as tensor `images`, labels as tensor `labels` and class names as
    /// a JSON sidecar.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut a = TensorArchive::new();
        a.insert("images", self.images.clone().into_dyn());
        if let Some(labels) = &self.labels {
            a.insert(
                "labels",
                Array1::from_iter(labels.iter().map(|&y| y as f32)).into_dyn(),
            );
        }
        a.write(dir)?;
        archive::write_json(&dir.join(CLASS_NAMES_FILE), &self.class_names)
    }

    /// Reads an archive written by [`Dataset::save`] or a directory of PNGs with one
    /// subdirectory per class.
    pub fn load(path: &Path) -> Result<Dataset> {
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset path does not exist"),
            ));
        }
        if path.join(archive::MANIFEST).is_file() {
            load_archive(path)
        } else {
            load_png_dir(path)
        }
    }
}

fn load_archive(dir: &Path) -> Result<Dataset> {
    let mut a = TensorArchive::read(dir)?;
    let images = a
        .take("images")?
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|_| Error::BadImageShape("`images` must be N x H x W x 3".into()))?;
    let labels = if a.contains("labels") {
        let l = a.take("labels")?;
        Some(l.iter().map(|&v| v.round().max(0.0) as usize).collect::<Vec<_>>())
    } else {
        None
    };
    let names_path = dir.join(CLASS_NAMES_FILE);
    let class_names: Vec<String> = if names_path.is_file() {
        archive::read_json(&names_path)?
    } else {
        let c = labels.as_ref().and_then(|l| l.iter().max()).map_or(0, |m| m + 1);
        (0..c).map(|i| format!("class{i}")).collect()
    };
    Dataset::new(images, labels, class_names, dir.display().to_string())
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn load_png_dir(dir: &Path) -> Result<Dataset> {
    let mut class_names = Vec::new();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut shape = None;
    for class_dir in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        let class = class_names.len();
        class_names.push(
            class_dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        for file in sorted_entries(&class_dir)? {
            let is_png = file
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if !is_png {
                continue;
            }
            let (h, w, px) = decode_png(&file)?;
            match shape {
                None => shape = Some((h, w)),
                Some(s) if s != (h, w) => {
                    return Err(Error::BadImageShape(format!(
                        "{} is {h}x{w}, expected {}x{}",
                        file.display(),
                        s.0,
                        s.1
                    )))
                }
                _ => {}
            }
            images.extend(px);
            labels.push(class);
        }
    }
    let (h, w) = shape.ok_or_else(|| Error::InvalidArgument(format!("no PNG images under {}", dir.display())))?;
    let n = labels.len();
    let images = Array4::from_shape_vec((n, h, w, 3), images).map_err(|e| Error::shape(e.to_string()))?;
    Dataset::new(images, Some(labels), class_names, dir.display().to_string())
}

fn decode_png(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let bad = |e: png::DecodingError| Error::BadImageShape(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::BadImageShape(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let mut px = Vec::with_capacity(h * w * 3);
    for row in buf[..info.buffer_size()].chunks_exact(info.line_size) {
        for p in row[..w * channels].chunks_exact(channels) {
            let rgb = match channels {
                1 | 2 => [p[0]; 3],
                _ => [p[0], p[1], p[2]],
            };
            px.extend(rgb.iter().map(|&v| v as f32 / 255.0));
        }
    }
    Ok((h, w, px))
}

/// Writes an RGB image in `[0, 1]` as an 8-bit PNG.
pub fn write_png(path: &Path, image: ndarray::ArrayView3<'_, f32>) -> Result<()> {
    let (h, w, _) = image.dim();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let data: Vec<u8> = image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let to_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(&data).map_err(to_err)
}

/// Membership of normalized shape coordinates `(u, v)` in class `class`.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let in_box = u.abs() <= 1.0 && v.abs() <= 1.0;
    let band = |t: f64| ((t + 1.0) * 2.0).floor() as i64;
    match class {
        0 => u * u + v * v <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.85,
        2 => (-0.9..=0.8).contains(&v) && u.abs() <= 0.95 * (v + 0.9) / 1.7,
        3 => (0.3025..=1.0).contains(&(u * u + v * v)),
        4 => (u.abs() <= 0.28 && v.abs() <= 1.0) || (v.abs() <= 0.28 && u.abs() <= 1.0),
        5 => {
            let (a, b) = ((u + v) / std::f64::consts::SQRT_2, (u - v) / std::f64::consts::SQRT_2);
            (a.abs() <= 0.25 && b.abs() <= 1.1) || (b.abs() <= 0.25 && a.abs() <= 1.1)
        }
        6 => in_box && band(v) % 2 == 0,
        7 => in_box && band(u) % 2 == 0,
        8 => in_box && (band(u) + band(v)) % 2 == 0,
        _ => (u - 0.5).powi(2) + v * v <= 0.16 || (u + 0.5).powi(2) + v * v <= 0.16,
    }
}

fn render(class: usize, rng: &mut ChaCha8Rng, mut out: ArrayViewMut3<'_, f32>) {
    let (h, w, _) = out.dim();
    let bg_level: f64 = rng.gen_range(0.03..0.45);
    let gap: f64 = rng.gen_range(0.35..0.5);
    let up_ok = bg_level + gap <= 0.62;
    let down_ok = bg_level - gap >= 0.02;
    let fg_level = if up_ok && (!down_ok || rng.gen_bool(0.5)) {
        bg_level + gap
    } else {
        bg_level - gap
    };
    let mut tint = |level: f64| -> [f64; 3] {
        std::array::from_fn(|_| (level + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0))
    };
    let bg = tint(bg_level);
    let fg = tint(fg_level);
    let cx = 0.5 + rng.gen_range(-0.1..0.1);
    let cy = 0.5 + rng.gen_range(-0.1..0.1);
    let r = rng.gen_range(0.28..0.38);
    const SS: usize = 3;
    for y in 0..h {
        for x in 0..w {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = (x as f64 + (sx as f64 + 0.5) / SS as f64) / w as f64;
                    let py = (y as f64 + (sy as f64 + 0.5) / SS as f64) / h as f64;
                    if inside(class, (px - cx) / r, (py - cy) / r) {
                        hits += 1;
                    }
                }
            }
            let a = hits as f64 / (SS * SS) as f64;
            for c in 0..3 {
                out[[y, x, c]] = (bg[c] * (1.0 - a) + fg[c] * a) as f32;
            }
        }
    }
}

/// Balanced, shuffled procedural benchmark of ten shape classes on random
/// backgrounds. Pixel levels stay roughly within `[0, 0.6]`.
pub fn toy_shapes(n: usize, image_size: usize, seed: u64) -> Dataset {
    let c = TOY_CLASSES.len();
    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[seeds::label("labels")])));
    let mut images = Array4::<f32>::zeros((n, image_size, image_size, 3));
    for (i, mut img) in images.axis_iter_mut(Axis(0)).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[seeds::label("render"), i as u64]));
        render(labels[i], &mut rng, img.view_mut());
    }
    Dataset {
        images,
        labels: Some(labels),
        class_names: TOY_CLASSES.iter().map(|s| s.to_string()).collect(),
        source: format!("toy_shapes(n={n},size={image_size},seed={seed})"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_is_balanced_deterministic_and_in_range() {
        let a = toy_shapes(40, 16, 3);
        let b = toy_shapes(40, 16, 3);
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), toy_shapes(40, 16, 4).content_hash());
        let labels = a.labels.as_ref().unwrap();
        for c in 0..10 {
            assert_eq!(labels.iter().filter(|&&y| y == c).count(), 4);
        }
        assert!(a.images.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn shapes_have_contrast() {
        let d = toy_shapes(20, 16, 1);
        for img in d.images.axis_iter(Axis(0)) {
            let lum: Vec<f32> = img.axis_iter(Axis(2)).next().unwrap().iter().copied().collect();
            let (lo, hi) = lum.iter().fold((1f32, 0f32), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            assert!(hi - lo > 0.1);
        }
    }

    #[test]
    fn batches_cover_dataset() {
        let d = toy_shapes(10, 8, 0);
        let b = d.batches(4);
        assert_eq!(b.iter().map(|x| x.images.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b[2].images.provenance.first_index, 8);
        assert_eq!(b[1].labels.as_ref().unwrap()[..], d.labels.as_ref().unwrap()[4..8]);
    }

    #[test]
    fn archive_and_png_round_trips() {
        let d = toy_shapes(6, 8, 2);
        let dir = tempfile::tempdir().unwrap();
        d.save(&dir.path().join("arch")).unwrap();
        let back = Dataset::load(&dir.path().join("arch")).unwrap();
        assert_eq!(back.images, d.images);
        assert_eq!(back.labels, d.labels);
        assert_eq!(back.class_names, d.class_names);

        let root = dir.path().join("png");
        for (i, img) in d.images.axis_iter(Axis(0)).enumerate() {
            let class_dir = root.join(format!("c{}", d.labels.as_ref().unwrap()[i] % 2));
            fs::create_dir_all(&class_dir).unwrap();
            write_png(&class_dir.join(format!("{i:03}.png")), img).unwrap();
        }
        let png = Dataset::load(&root).unwrap();
        assert_eq!(png.len(), 6);
        assert_eq!(png.class_names, vec!["c0", "c1"]);
        let mut by_class: Vec<usize> = (0..6).collect();
        by_class.sort_by_key(|&i| (d.labels.as_ref().unwrap()[i] % 2, i));
        for (k, &i) in by_class.iter().enumerate() {
            let diff = &png.images.index_axis(Axis(0), k) - &d.images.index_axis(Axis(0), i);
            assert!(diff.iter().all(|v| v.abs() <= 0.5 / 255.0 + 1e-6));
        }
    }

    #[test]
    fn missing_path_is_io_error_with_path() {
        let err = Dataset::load(Path::new("/no/such/dataset")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("/no/such/dataset"));
    }
}
