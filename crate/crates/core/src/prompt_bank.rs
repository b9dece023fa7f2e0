//! Class prototype banks: prompt ensembles of precomputed text embeddings and seeded
//! random orthonormal banks for the toy benchmark.

use std::path::Path;

use ndarray::{s, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::archive::{self, TensorArchive};
use crate::error::{Error, Result};
use crate::sphere::PrototypeBank;

pub const TEXT_EMBEDDINGS: &str = "text_embeddings";
pub const CLASS_NAMES_FILE: &str = "class_names.json";

const UNIT_TOL: f64 = 1e-5;

/// Per-class mean over prompts, renormalized. `per_prompt` is `P x C x d`.
pub fn ensemble_prototypes(per_prompt: &Array3<f32>) -> Result<Array2<f32>> {
    let (p, c, d) = per_prompt.dim();
    if p == 0 || c == 0 || d == 0 {
        return Err(Error::EmptySet);
    }
    for (pi, prompt) in per_prompt.axis_iter(Axis(0)).enumerate() {
        for (ci, row) in prompt.axis_iter(Axis(0)).enumerate() {
            let n = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::InvalidArgument(format!(
                    "prompt {pi}, class {ci} embedding has norm {n}"
                )));
            }
        }
    }
    let mut out = Array2::<f32>::zeros((c, d));
    for ci in 0..c {
        let mut mean = vec![0f64; d];
        for pi in 0..p {
            for (m, &v) in mean.iter_mut().zip(per_prompt.slice(s![pi, ci, ..])) {
                *m += v as f64;
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt() / p as f64;
        if norm <= 1e-12 {
            return Err(Error::ZeroMeanVector { class: ci });
        }
        let total = norm * p as f64;
        for (dst, m) in out.row_mut(ci).iter_mut().zip(&mean) {
            *dst = (m / total) as f32;
        }
    }
    Ok(out)
}

/// `C` rows of a seeded random orthonormal basis of `R^d` (Gram-Schmidt on Gaussian
/// draws, carried out in 64-bit).
pub fn make_toy_bank(classes: usize, dim: usize, seed: u64, temperature: f32) -> Result<PrototypeBank> {
    if classes > dim {
        return Err(Error::TooManyClasses { classes, dim });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while basis.len() < classes {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        // two passes of modified Gram-Schmidt for numerical orthogonality
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-6 {
            continue;
        }
        basis.push(v.into_iter().map(|x| x / n).collect());
    }
    let protos = Array2::from_shape_fn((classes, dim), |(i, j)| basis[i][j] as f32);
    PrototypeBank::with_default_names(protos, temperature)
}

/// Loads `text_embeddings` (`P x C x d`) and the optional `class_names.json` sidecar,
/// then ensembles them into a bank.
pub fn load_bank(dir: &Path, temperature: f32) -> Result<PrototypeBank> {
    let a = TensorArchive::read(dir)?;
    let t = a
        .get(TEXT_EMBEDDINGS)?
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| Error::Archive(format!("`{TEXT_EMBEDDINGS}` must have shape [P, C, d]")))?;
    let protos = ensemble_prototypes(&t)?;
    let names_path = dir.join(CLASS_NAMES_FILE);
    if names_path.is_file() {
        let names: Vec<String> = archive::read_json(&names_path)?;
        PrototypeBank::new(protos, temperature, names)
    } else {
        PrototypeBank::with_default_names(protos, temperature)
    }
}

/// Writes a bank as a single-prompt `text_embeddings` archive.
pub fn save_bank(dir: &Path, bank: &PrototypeBank) -> Result<()> {
    let mut a = TensorArchive::new();
    let p = bank.prototypes().to_owned().insert_axis(Axis(0));
    a.insert(TEXT_EMBEDDINGS, p.into_dyn());
    a.write(dir)?;
    archive::write_json(&dir.join(CLASS_NAMES_FILE), &bank.class_names())
}
