//! Supervised pretraining of the toy stem against a fixed prototype bank, and stem
//! persistence.
//!
//! The stem is trained by minimizing cross-entropy of the zero-shot probabilities
//! against the true class on clean data, so the resulting encoder aligns images with
//! the bank's prototypes the way a contrastively trained encoder aligns them with
//! text embeddings.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use ndarray::{ArrayViewMut3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{self, TensorArchive};
use crate::dataset::Dataset;
use crate::encoder::{Encoder, EncoderConfig, GradMode, StemWeights};
use crate::error::{Error, Result};
use crate::optim::{optimizer_step, AdamWConfig, AdamWState};
use crate::par::Exec;
use crate::seeds;
use crate::sphere::{logits_backward, normalize_rows, normalize_rows_backward, zero_shot_probs, PrototypeBank};

const ENCODER_FILE: &str = "encoder.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Final learning rate as a fraction of `lr` (cosine schedule).
    pub final_lr_fraction: f64,
    /// Half-width of the per-image additive brightness jitter.
    pub brightness_jitter: f64,
    /// Half-width of the per-image contrast-scale jitter around 1.
    pub contrast_jitter: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 2e-3,
            weight_decay: 0.01,
            final_lr_fraction: 0.05,
            brightness_jitter: 0.0,
            contrast_jitter: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
}

/// Trains every stem tensor with AdamW on labeled clean data.
pub fn pretrain_stem(
    enc: EncoderConfig,
    data: &Dataset,
    bank: &PrototypeBank,
    cfg: &PretrainConfig,
    exec: Exec,
) -> Result<(StemWeights, PretrainReport)> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("pretraining needs labels".into()))?;
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::EmptySet);
    }
    let mut stem = StemWeights::init(enc, seeds::derive(cfg.seed, &[seeds::label("stem")]))?;
    let mut state = AdamWState::new(&stem);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, &[seeds::label("shuffle")]));
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut report = PretrainReport {
        epoch_loss: Vec::new(),
        epoch_accuracy: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut images = data.images.select(Axis(0), chunk);
            for (mut img, &i) in images.axis_iter_mut(Axis(0)).zip(chunk) {
                let mut r = ChaCha8Rng::seed_from_u64(seeds::derive(
                    cfg.seed,
                    &[seeds::label("jitter"), epoch as u64, i as u64],
                ));
                jitter(img.view_mut(), &mut r, cfg);
            }
            let truth: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let encoder = Encoder::new(&stem, None)?;
            let (raw, caches) = encoder.forward_batch_cached(images.view(), exec)?;
            let z = normalize_rows(raw.view())?;
            let pred = zero_shot_probs(&z, bank)?;
            let b = chunk.len() as f32;
            let mut g = pred.probs().to_owned();
            for (i, &y) in truth.iter().enumerate() {
                loss_sum -= (pred.probs()[[i, y]].max(1e-12) as f64).ln();
                if pred.labels()[i] == y {
                    hits += 1;
                }
                g[[i, y]] -= 1.0;
            }
            g.mapv_inplace(|v| v / b);
            let dz = logits_backward(g.view(), bank);
            let draw = normalize_rows_backward(raw.view(), dz.view());
            let grads = encoder.backward_batch(&caches, draw.view(), GradMode::Full, exec);
            let full = grads.full.expect("full gradients requested");
            let t = state.step as f64 / total_steps as f64;
            let cosine = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
            let lr = cfg.lr * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cosine);
            let opt = AdamWConfig {
                lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            };
            optimizer_step(&mut stem, &full, &mut state, &opt)?;
        }
        let n = data.len() as f64;
        report.epoch_loss.push(loss_sum / n);
        report.epoch_accuracy.push(hits as f64 / n);
        info!(
            "pretrain epoch {}: loss {:.4}, train acc {:.3}",
            epoch + 1,
            loss_sum / n,
            hits as f64 / n
        );
        if !(loss_sum.is_finite()) {
            return Err(Error::NumericFailure(format!("pretraining loss diverged at epoch {}", epoch + 1)));
        }
    }
    Ok((stem, report))
}

fn jitter(mut img: ArrayViewMut3<'_, f32>, rng: &mut ChaCha8Rng, cfg: &PretrainConfig) {
    let shift = if cfg.brightness_jitter > 0.0 {
        rng.gen_range(-cfg.brightness_jitter..cfg.brightness_jitter) as f32
    } else {
        0.0
    };
    let scale = if cfg.contrast_jitter > 0.0 {
        1.0 + rng.gen_range(-cfg.contrast_jitter..cfg.contrast_jitter) as f32
    } else {
        1.0
    };
    let mean = img.mean().unwrap_or(0.0);
    img.mapv_inplace(|p| ((p - mean) * scale + mean + shift).clamp(0.0, 1.0));
}

pub fn save_stem(dir: &Path, stem: &StemWeights) -> Result<()> {
    TensorArchive::from_views(stem.tensors()).write(dir)?;
    archive::write_json(&dir.join(ENCODER_FILE), &stem.config)
}

pub fn load_stem(dir: &Path) -> Result<StemWeights> {
    let config: EncoderConfig = archive::read_json(&dir.join(ENCODER_FILE))?;
    config.validate()?;
    let mut stem = StemWeights::zeros(config);
    TensorArchive::read(dir)?.fill_views(stem.tensors_mut())?;
    Ok(stem)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::toy_shapes;
    use crate::prompt_bank::make_toy_bank;
    use crate::sphere::batch_accuracy;

    fn small() -> EncoderConfig {
        EncoderConfig {
            image_size: 16,
            patch_size: 4,
            depth: 1,
            width: 16,
            heads: 2,
            embed_dim: 16,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn pretraining_reduces_loss() {
        let data = toy_shapes(64, 16, 0);
        let bank = make_toy_bank(10, 16, 1, 0.01).unwrap();
        let cfg = PretrainConfig {
            epochs: 4,
            batch_size: 16,
            ..Default::default()
        };
        let (_, report) = pretrain_stem(small(), &data, &bank, &cfg, Exec::Sequential).unwrap();
        assert!(report.epoch_loss.last().unwrap() < &report.epoch_loss[0]);
    }

    #[test]
    fn stem_round_trip() {
        let stem = StemWeights::init(small(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_stem(dir.path(), &stem).unwrap();
        let back = load_stem(dir.path()).unwrap();
        assert_eq!(back, stem);

        let data = toy_shapes(8, 16, 0);
        let bank = make_toy_bank(10, 16, 1, 0.01).unwrap();
        let acc = |s: &StemWeights| {
            let z = Encoder::new(s, None).unwrap().embed(data.images.view(), Exec::Sequential).unwrap();
            batch_accuracy(&zero_shot_probs(&z, &bank).unwrap(), data.labels.as_ref().unwrap()).unwrap()
        };
        assert_eq!(acc(&stem), acc(&back));
    }
}
