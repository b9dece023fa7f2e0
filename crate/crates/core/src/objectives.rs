//! Loss terms of the adaptation objective and the information-aware balancing.
//!
//! The objective on a batch is
//!
//! ```text
//! total = w * ent + (lambda / w) * unif + pl,    w = exp(mi - i0)
//! ```
//!
//! where `ent` is the mean prediction entropy, `unif` the log-mean Gaussian kernel
//! over all embedding pairs, `pl` the cross-entropy against the EMA teacher and `mi`
//! the mutual information between embeddings and predicted labels. `w` is treated as
//! a constant when differentiating.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::sphere::{logits_backward, marginal, EmbeddingBatch, PredictionBatch, PrototypeBank};

/// Probabilities are clamped to this inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalanceConfig {
    pub lambda: f64,
    pub i0: f64,
    pub balancing_enabled: bool,
    pub unif_enabled: bool,
    pub pl_enabled: bool,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            i0: 3.0,
            balancing_enabled: true,
            unif_enabled: true,
            pl_enabled: true,
        }
    }
}

impl BalanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.i0.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be >= 0 and i0 finite (got {}, {})",
                self.lambda, self.i0
            )));
        }
        Ok(())
    }
}

/// Per-batch values of every loss component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ent: f64,
    pub unif: f64,
    pub pl: f64,
    pub mi: f64,
    pub w: f64,
    pub total: f64,
    pub marginal_entropy: f64,
}

fn entropy_row<T: Real>(p: ArrayView1<'_, T>) -> T {
    let floor = T::lit(PROB_FLOOR);
    p.iter().fold(T::zero(), |acc, &v| {
        if v > T::zero() {
            acc - v * v.max(floor).ln()
        } else {
            acc
        }
    })
}

/// Mean prediction entropy, `0 log 0 = 0`.
pub fn entropy_loss<T: Real>(pred: &PredictionBatch<T>) -> T {
    let b = T::lit(pred.len() as f64);
    pred.probs()
        .rows()
        .into_iter()
        .map(entropy_row)
        .fold(T::zero(), |a, h| a + h)
        / b
}

/// Entropy of the batch-marginal prediction.
pub fn marginal_entropy<T: Real>(pred: &PredictionBatch<T>) -> T {
    entropy_row(marginal(pred).view())
}

fn sq_dist<T: Real>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> T {
    a.iter()
        .zip(b.iter())
        .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

fn kernel_matrix<T: Real>(z: &EmbeddingBatch<T>) -> Array2<T> {
    let n = z.len();
    let mut k = Array2::zeros((n, n));
    for i in 0..n {
        k[[i, i]] = T::one();
        for j in (i + 1)..n {
            let v = (-sq_dist(z.row(i), z.row(j))).exp();
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    k
}

fn require_pairs<T: Real>(z: &EmbeddingBatch<T>) -> Result<()> {
    if z.len() < 2 {
        return Err(Error::BatchTooSmall {
            size: z.len(),
            min: 2,
        });
    }
    Ok(())
}

/// `(1/B^2) sum_ij exp(-|z_i - z_j|^2)`, diagonal included.
pub fn uniformity_metric<T: Real>(z: &EmbeddingBatch<T>) -> Result<T> {
    require_pairs(z)?;
    let n = T::lit(z.len() as f64);
    Ok(kernel_matrix(z).sum() / (n * n))
}

/// Log of [`uniformity_metric`].
pub fn uniformity_loss<T: Real>(z: &EmbeddingBatch<T>) -> Result<T> {
    Ok(uniformity_metric(z)?.ln())
}

/// `H(mean p) - mean H(p)` before clamping; may be slightly negative from rounding.
pub fn mutual_information_unclamped<T: Real>(pred: &PredictionBatch<T>) -> T {
    marginal_entropy(pred) - entropy_loss(pred)
}

/// Mutual information between embeddings and predicted labels, clamped at 0.
pub fn mutual_information<T: Real>(pred: &PredictionBatch<T>) -> T {
    mutual_information_unclamped(pred).max(T::zero())
}

/// `exp(mi - i0)` when balancing is enabled, else 1.
pub fn balance_weight(mi: f64, cfg: &BalanceConfig) -> f64 {
    if cfg.balancing_enabled {
        (mi - cfg.i0).exp()
    } else {
        1.0
    }
}

fn check_same_shape<T: Real>(a: &PredictionBatch<T>, b: &PredictionBatch<T>) -> Result<()> {
    if a.probs().dim() != b.probs().dim() {
        return Err(Error::shape(format!(
            "teacher {:?} vs student {:?}",
            a.probs().dim(),
            b.probs().dim()
        )));
    }
    Ok(())
}

/// Cross-entropy of the student against the teacher, averaged over the batch.
pub fn distillation_loss<T: Real>(
    teacher: &PredictionBatch<T>,
    student: &PredictionBatch<T>,
) -> Result<T> {
    check_same_shape(teacher, student)?;
    let floor = T::lit(PROB_FLOOR);
    let mut acc = T::zero();
    for (q, p) in teacher.probs().rows().into_iter().zip(student.probs().rows()) {
        for (&qc, &pc) in q.iter().zip(p.iter()) {
            acc = acc - qc * pc.max(floor).ln();
        }
    }
    Ok(acc / T::lit(student.len() as f64))
}

/// Gradient of [`entropy_loss`] with respect to the student logits.
pub fn entropy_logit_grad<T: Real>(pred: &PredictionBatch<T>) -> Array2<T> {
    let floor = T::lit(PROB_FLOOR);
    let inv_b = T::one() / T::lit(pred.len() as f64);
    let mut out = Array2::zeros(pred.probs().raw_dim());
    for (p, mut g) in pred.probs().rows().into_iter().zip(out.rows_mut()) {
        // d/dp of -p ln(max(p, floor))
        let dp: Array1<T> = p.mapv(|v| {
            if v >= floor {
                -(v.ln() + T::one())
            } else {
                -floor.ln()
            }
        });
        let mean = p.dot(&dp);
        for c in 0..p.len() {
            g[c] = p[c] * (dp[c] - mean) * inv_b;
        }
    }
    out
}

/// Gradient of [`distillation_loss`] with respect to the student logits (teacher fixed).
pub fn distillation_logit_grad<T: Real>(
    teacher: &PredictionBatch<T>,
    student: &PredictionBatch<T>,
) -> Result<Array2<T>> {
    check_same_shape(teacher, student)?;
    let floor = T::lit(PROB_FLOOR);
    let inv_b = T::one() / T::lit(student.len() as f64);
    let mut out = Array2::zeros(student.probs().raw_dim());
    for ((q, p), mut g) in teacher
        .probs()
        .rows()
        .into_iter()
        .zip(student.probs().rows())
        .zip(out.rows_mut())
    {
        // Only unclamped log terms carry gradient.
        let active: T = q
            .iter()
            .zip(p.iter())
            .filter(|(_, &pc)| pc >= floor)
            .fold(T::zero(), |a, (&qc, _)| a + qc);
        for c in 0..p.len() {
            let own = if p[c] >= floor { q[c] } else { T::zero() };
            g[c] = (p[c] * active - own) * inv_b;
        }
    }
    Ok(out)
}

/// Gradient of [`uniformity_loss`] with respect to the unit embeddings.
pub fn uniformity_grad<T: Real>(z: &EmbeddingBatch<T>) -> Result<Array2<T>> {
    require_pairs(z)?;
    let n = z.len();
    let k = kernel_matrix(z);
    let s = k.sum();
    // d/dz_i log S = -(4 / S) sum_j k_ij (z_i - z_j); the 1/B^2 cancels.
    let coef = -T::lit(4.0) / s;
    let mut out = Array2::zeros((n, z.dim()));
    for i in 0..n {
        let zi = z.row(i);
        let mut gi = out.row_mut(i);
        for j in 0..n {
            if i == j {
                continue;
            }
            let kij = k[[i, j]] * coef;
            for (g, (&a, &b)) in gi.iter_mut().zip(zi.iter().zip(z.row(j).iter())) {
                *g = *g + kij * (a - b);
            }
        }
    }
    Ok(out)
}

/// Value-only evaluation of the balanced objective.
pub fn composite_loss<T: Real>(
    z: &EmbeddingBatch<T>,
    student: &PredictionBatch<T>,
    teacher: &PredictionBatch<T>,
    cfg: &BalanceConfig,
) -> Result<LossBreakdown> {
    if z.len() != student.len() {
        return Err(Error::LengthMismatch {
            left: z.len(),
            right: student.len(),
        });
    }
    let ent = entropy_loss(student).as_f64();
    let unif = uniformity_loss(z)?.as_f64();
    let pl = distillation_loss(teacher, student)?.as_f64();
    let h_marg = marginal_entropy(student).as_f64();
    let mi = (h_marg - ent).max(0.0);
    let w = balance_weight(mi, cfg);
    let mut total = w * ent;
    if cfg.unif_enabled {
        total += (cfg.lambda / w) * unif;
    }
    if cfg.pl_enabled {
        total += pl;
    }
    Ok(LossBreakdown {
        ent,
        unif,
        pl,
        mi,
        w,
        total,
        marginal_entropy: h_marg,
    })
}

/// Per-term gradients with respect to the unit embeddings.
#[derive(Debug, Clone)]
pub struct CompositeGrad<T> {
    pub ent: Array2<T>,
    pub unif: Array2<T>,
    pub pl: Array2<T>,
    /// `w * ent + (lambda / w) * unif + pl`, each term included only when enabled.
    pub total: Array2<T>,
}

/// Balanced objective together with its gradient with respect to the unit embeddings.
pub fn composite_loss_and_grad<T: Real>(
    z: &EmbeddingBatch<T>,
    student: &PredictionBatch<T>,
    teacher: &PredictionBatch<T>,
    bank: &PrototypeBank<T>,
    cfg: &BalanceConfig,
) -> Result<(LossBreakdown, CompositeGrad<T>)> {
    let losses = composite_loss(z, student, teacher, cfg)?;
    let ent = logits_backward(entropy_logit_grad(student).view(), bank);
    let pl = logits_backward(distillation_logit_grad(teacher, student)?.view(), bank);
    let unif = uniformity_grad(z)?;
    let w = T::lit(losses.w);
    let mut total = &ent * w;
    if cfg.unif_enabled {
        total.scaled_add(T::lit(cfg.lambda / losses.w), &unif);
    }
    if cfg.pl_enabled {
        total += &pl;
    }
    Ok((
        losses,
        CompositeGrad {
            ent,
            unif,
            pl,
            total,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{normalize_rows, zero_shot_probs};
    use ndarray::array;

    fn pred(rows: Array2<f64>) -> PredictionBatch<f64> {
        PredictionBatch::from_probs(rows).unwrap()
    }

    fn unit(rows: Array2<f64>) -> EmbeddingBatch<f64> {
        normalize_rows(rows.view()).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy_loss(&pred(array![[1.0, 0.0], [0.0, 1.0]])), 0.0);
        let u = pred(Array2::from_elem((3, 4), 0.25));
        assert!((entropy_loss(&u) - 4f64.ln()).abs() < 1e-12);
        let p = pred(array![[0.9, 0.1], [0.5, 0.5]]);
        // -(0.9 ln 0.9 + 0.1 ln 0.1) = 0.325082973..., ln 2 = 0.693147180...
        let expected = (0.325_082_973_391_448_2 + std::f64::consts::LN_2) / 2.0;
        assert!((entropy_loss(&p) - expected).abs() < 1e-12);
        assert!((entropy_loss(&p) - 0.50912).abs() < 1e-5);
    }

    #[test]
    fn uniformity_examples() {
        let same = unit(array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(uniformity_loss(&same).unwrap(), 0.0);
        assert_eq!(uniformity_metric(&same).unwrap(), 1.0);

        let anti = unit(array![[0.6, 0.8], [-0.6, -0.8]]);
        let closed = ((1.0 + (-4f64).exp()) / 2.0).ln();
        assert!((uniformity_loss(&anti).unwrap() - closed).abs() < 1e-12);
        assert!((uniformity_loss(&anti).unwrap() + 0.67500).abs() < 1e-5);
        assert!((uniformity_metric(&anti).unwrap() - 0.50916).abs() < 1e-5);

        let single = unit(array![[1.0, 0.0]]);
        assert!(matches!(
            uniformity_loss(&single),
            Err(Error::BatchTooSmall { size: 1, min: 2 })
        ));
    }

    #[test]
    fn mutual_information_examples() {
        let mi = mutual_information(&pred(array![[1.0, 0.0], [0.0, 1.0]]));
        assert!((mi - std::f64::consts::LN_2).abs() < 1e-12);
        let same = pred(array![[0.3, 0.7], [0.3, 0.7], [0.3, 0.7]]);
        assert!(mutual_information(&same).abs() < 1e-15);
        let p = pred(array![[0.9, 0.1], [0.1, 0.9]]);
        let expected = std::f64::consts::LN_2 - 0.325_082_973_391_448_2;
        assert!((mutual_information(&p) - expected).abs() < 1e-12);
        assert!((mutual_information(&p) - 0.36807).abs() < 1e-5);
    }

    #[test]
    fn balance_weight_examples() {
        let cfg = BalanceConfig::default();
        assert_eq!(balance_weight(cfg.i0, &cfg), 1.0);
        assert!((balance_weight(cfg.i0 + 1.0, &cfg) - std::f64::consts::E).abs() < 1e-12);
        let off = BalanceConfig {
            balancing_enabled: false,
            ..cfg
        };
        assert_eq!(balance_weight(0.123, &off), 1.0);
        assert_eq!(balance_weight(7.0, &off), 1.0);
    }

    #[test]
    fn distillation_examples() {
        let p = pred(array![[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]]);
        assert!((distillation_loss(&p, &p).unwrap() - entropy_loss(&p)).abs() < 1e-12);
        let q = pred(array![[1.0, 0.0]]);
        let s = pred(array![[0.5, 0.5]]);
        assert!((distillation_loss(&q, &s).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let wrong = pred(array![[0.5, 0.25, 0.25]]);
        assert!(matches!(
            distillation_loss(&q, &wrong),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn composite_full_ablation_is_entropy() {
        let z = unit(array![[1.0, 0.2, 0.0], [0.1, 1.0, 0.3], [0.0, 0.4, 1.0]]);
        let bank = PrototypeBank::with_default_names(
            array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            0.5,
        )
        .unwrap();
        let p = zero_shot_probs(&z, &bank).unwrap();
        let cfg = BalanceConfig {
            lambda: 0.0,
            pl_enabled: false,
            balancing_enabled: false,
            ..Default::default()
        };
        let l = composite_loss(&z, &p, &p, &cfg).unwrap();
        assert_eq!(l.total, entropy_loss(&p));
    }

    #[test]
    fn composite_component_sum_at_threshold() {
        let z = unit(array![[1.0, 0.2, 0.0], [0.1, 1.0, 0.3], [0.0, 0.4, 1.0], [0.5, 0.5, 0.5]]);
        let bank = PrototypeBank::with_default_names(
            array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            0.5,
        )
        .unwrap();
        let p = zero_shot_probs(&z, &bank).unwrap();
        let mi = mutual_information(&p);
        let cfg = BalanceConfig {
            lambda: 1.0,
            i0: mi,
            ..Default::default()
        };
        let l = composite_loss(&z, &p, &p, &cfg).unwrap();
        assert!((l.w - 1.0).abs() < 1e-15);
        let ent = entropy_loss(&p);
        let unif = uniformity_loss(&z).unwrap();
        assert!((l.total - (ent + unif + ent)).abs() < 1e-12);
        assert!((l.w * (cfg.lambda / l.w) - cfg.lambda).abs() < 1e-15);
    }

    #[test]
    fn uniformity_decreases_when_coincident_points_separate() {
        // Two coincident points and a third; rotate one of the pair away along a
        // great circle that moves it further from the third point too.
        let base = |theta: f64| {
            array![[1.0, 0.0, 0.0], [theta.cos(), theta.sin(), 0.0], [0.0, 0.0, 1.0]]
        };
        let mut prev = uniformity_loss(&unit(base(0.0))).unwrap();
        for k in 1..=8 {
            let v = uniformity_loss(&unit(base(k as f64 * 0.3))).unwrap();
            assert!(v < prev, "step {k}: {v} !< {prev}");
            prev = v;
        }
    }
}
