use ndarray::{Array2, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::lora_effective_weight;
use super::vit::{QkvGrads, StemWeights};
use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Attention projection an adapter is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Q,
    K,
    V,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::Q, Target::K, Target::V];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Q => "q",
            Target::K => "k",
            Target::V => "v",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Target>,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 2,
            alpha: 2.0,
            targets: Target::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// `A` is `width x rank`, `B` is `rank x width`; the weight delta is `scale * A B`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T> {
    pub a: Array2<T>,
    pub b: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraParams<T = f32> {
    rank: usize,
    scale: T,
    layers: Vec<[Option<LoraPair<T>>; 3]>,
}

impl<T: Real> LoraParams<T> {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn get(&self, layer: usize, t: Target) -> Option<&LoraPair<T>> {
        self.layers.get(layer)?[t.index()].as_ref()
    }

    pub fn get_mut(&mut self, layer: usize, t: Target) -> Option<&mut LoraPair<T>> {
        self.layers.get_mut(layer)?[t.index()].as_mut()
    }

    /// Named tensors `layers.{l}.{q|k|v}.{a|b}` in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        for (l, slots) in self.layers.iter().enumerate() {
            for t in Target::ALL {
                if let Some(p) = &slots[t.index()] {
                    out.push((format!("layers.{l}.{}.a", t.name()), p.a.view().into_dyn()));
                    out.push((format!("layers.{l}.{}.b", t.name()), p.b.view().into_dyn()));
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        for (l, slots) in self.layers.iter_mut().enumerate() {
            for (t, slot) in Target::ALL.into_iter().zip(slots.iter_mut()) {
                if let Some(p) = slot {
                    out.push((format!("layers.{l}.{}.a", t.name()), p.a.view_mut().into_dyn()));
                    out.push((format!("layers.{l}.{}.b", t.name()), p.b.view_mut().into_dyn()));
                }
            }
        }
        out
    }

    /// Same layout, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            rank: self.rank,
            scale: self.scale,
            layers: self
                .layers
                .iter()
                .map(|slots| {
                    std::array::from_fn(|i| {
                        slots[i].as_ref().map(|p| LoraPair {
                            a: Array2::zeros(p.a.raw_dim()),
                            b: Array2::zeros(p.b.raw_dim()),
                        })
                    })
                })
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(x, y)| {
                x.iter().zip(y).all(|(p, q)| match (p, q) {
                    (Some(p), Some(q)) => p.a.dim() == q.a.dim() && p.b.dim() == q.b.dim(),
                    (None, None) => true,
                    _ => false,
                })
            })
    }

    pub(crate) fn check_against(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.layers.len() != cfg.depth {
            return Err(Error::shape(format!(
                "adapters for {} layers, encoder has {}",
                self.layers.len(),
                cfg.depth
            )));
        }
        for slots in &self.layers {
            for p in slots.iter().flatten() {
                if p.a.dim() != (cfg.width, self.rank) || p.b.dim() != (self.rank, cfg.width) {
                    return Err(Error::shape(format!(
                        "adapter shapes {:?}/{:?} do not fit width {}",
                        p.a.dim(),
                        p.b.dim(),
                        cfg.width
                    )));
                }
            }
        }
        Ok(())
    }

    /// Adapter gradients from effective-weight gradients:
    /// `dA = s dW B^T`, `dB = s A^T dW`.
    pub fn grads_from_qkv(&self, g: &QkvGrads<T>) -> Self {
        let mut out = self.zeros_like();
        for (l, slots) in self.layers.iter().enumerate() {
            for t in Target::ALL {
                if let Some(p) = &slots[t.index()] {
                    let dw = &g.layers[l][t.index()];
                    let dst = out.layers[l][t.index()].as_mut().expect("same layout");
                    dst.a = dw.dot(&p.b.t()) * self.scale;
                    dst.b = p.a.t().dot(dw) * self.scale;
                }
            }
        }
        out
    }

    pub fn max_abs(&self) -> T {
        self.tensors()
            .iter()
            .flat_map(|(_, v)| v.iter().copied().collect::<Vec<_>>())
            .fold(T::zero(), |a, b| a.max(b.abs()))
    }

    pub fn cast<U: Real>(&self) -> LoraParams<U> {
        let c = |a: &Array2<T>| a.mapv(|v| U::lit(v.as_f64()));
        LoraParams {
            rank: self.rank,
            scale: U::lit(self.scale.as_f64()),
            layers: self
                .layers
                .iter()
                .map(|slots| {
                    std::array::from_fn(|i| {
                        slots[i].as_ref().map(|p| LoraPair { a: c(&p.a), b: c(&p.b) })
                    })
                })
                .collect(),
        }
    }
}

/// Fresh adapters: `B = 0`, `A ~ U[-sqrt(6/width), sqrt(6/width)]`.
pub fn init_lora<T: Real>(cfg: &LoraConfig, enc: &EncoderConfig) -> Result<LoraParams<T>> {
    if cfg.rank == 0 || cfg.rank >= enc.width {
        return Err(Error::RankTooLarge {
            rank: cfg.rank,
            width: enc.width,
        });
    }
    if !(cfg.alpha > 0.0) {
        return Err(Error::Config("LoRA alpha must be positive".into()));
    }
    let bound = (6.0 / enc.width as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layers = (0..enc.depth)
        .map(|_| {
            let mut slots: [Option<LoraPair<T>>; 3] = [None, None, None];
            for t in Target::ALL {
                if cfg.targets.contains(&t) {
                    let a = Array2::from_shape_simple_fn((enc.width, cfg.rank), || {
                        T::lit(rng.gen_range(-bound..=bound))
                    });
                    slots[t.index()] = Some(LoraPair {
                        a,
                        b: Array2::zeros((cfg.rank, enc.width)),
                    });
                }
            }
            slots
        })
        .collect();
    Ok(LoraParams {
        rank: cfg.rank,
        scale: T::lit(cfg.scale()),
        layers,
    })
}

/// EMA copy of the adapters used for inference and as the distillation target.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState<T = f32> {
    pub ema: LoraParams<T>,
    pub momentum: f64,
}

impl<T: Real> TeacherState<T> {
    pub fn new(ema: LoraParams<T>, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Config(format!("EMA momentum {momentum} not in (0,1)")));
        }
        Ok(Self { ema, momentum })
    }

    /// In-place `ema <- m * student + (1 - m) * ema`.
    pub fn update(&mut self, student: &LoraParams<T>) -> Result<()> {
        if !self.ema.same_layout(student) {
            return Err(Error::shape("teacher and student adapters differ in layout"));
        }
        let m = T::lit(self.momentum);
        for ((_, mut e), (_, s)) in self.ema.tensors_mut().into_iter().zip(student.tensors()) {
            // same value as m * s + (1 - m) * e, but exact when s == e
            e.zip_mut_with(&s, |e, &s| *e += m * (s - *e));
        }
        Ok(())
    }
}

/// Functional form of [`TeacherState::update`].
pub fn ema_update<T: Real>(teacher: &TeacherState<T>, student: &LoraParams<T>) -> Result<TeacherState<T>> {
    let mut next = teacher.clone();
    next.update(student)?;
    Ok(next)
}

/// Folds the adapters into the stem: each targeted `W` becomes `W + scale * A B`.
pub fn merge_lora<T: Real>(stem: &StemWeights<T>, lora: &LoraParams<T>, scale: T) -> Result<StemWeights<T>> {
    lora.check_against(&stem.config)?;
    let mut out = stem.clone();
    for (l, blk) in out.blocks.iter_mut().enumerate() {
        for t in Target::ALL {
            if let Some(p) = lora.get(l, t) {
                let merged = lora_effective_weight(blk.weight(t).view(), p.a.view(), p.b.view(), scale)?;
                *blk.weight_mut(t) = merged;
            }
        }
    }
    Ok(out)
}
