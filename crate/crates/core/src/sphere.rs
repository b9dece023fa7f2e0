//! Unit-hypersphere embeddings and the zero-shot classification head.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Rows with norm at or below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-12;
const UNIT_TOL: f64 = 1e-5;

/// A batch of unit-norm embeddings, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch<T = f32> {
    data: Array2<T>,
}

impl<T: Real> EmbeddingBatch<T> {
    /// Wraps rows that are already unit-norm.
    pub fn from_unit_rows(data: Array2<T>) -> Result<Self> {
        if data.ncols() < 2 {
            return Err(Error::InvalidArgument(format!(
                "embedding dimension {} < 2",
                data.ncols()
            )));
        }
        if data.nrows() == 0 {
            return Err(Error::EmptySet);
        }
        for (i, row) in data.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt().as_f64();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has norm {n}, expected 1"
                )));
            }
        }
        Ok(Self { data })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, T> {
        self.data.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, T> {
        self.data.row(i)
    }

    pub fn into_inner(self) -> Array2<T> {
        self.data
    }

    pub fn cast<U: Real>(&self) -> EmbeddingBatch<U> {
        EmbeddingBatch {
            data: self.data.mapv(|v| U::lit(v.as_f64())),
        }
    }
}

/// Class prototypes (unit rows) and the softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank<T = f32> {
    prototypes: Array2<T>,
    temperature: T,
    class_names: Vec<String>,
}

impl<T: Real> PrototypeBank<T> {
    pub fn new(prototypes: Array2<T>, temperature: T, class_names: Vec<String>) -> Result<Self> {
        if prototypes.nrows() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                prototypes.nrows()
            )));
        }
        if !(temperature > T::zero()) {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        if class_names.len() != prototypes.nrows() {
            return Err(Error::LengthMismatch {
                left: class_names.len(),
                right: prototypes.nrows(),
            });
        }
        // Reuse the embedding validation for the unit-norm rows.
        let prototypes = EmbeddingBatch::from_unit_rows(prototypes)?.into_inner();
        Ok(Self {
            prototypes,
            temperature,
            class_names,
        })
    }

    /// Bank with generated names `class_0`, `class_1`, ...
    pub fn with_default_names(prototypes: Array2<T>, temperature: T) -> Result<Self> {
        let names = (0..prototypes.nrows()).map(|c| format!("class_{c}")).collect();
        Self::new(prototypes, temperature, names)
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }

    pub fn prototypes(&self) -> ArrayView2<'_, T> {
        self.prototypes.view()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn with_temperature(&self, temperature: T) -> Result<Self> {
        Self::new(
            self.prototypes.clone(),
            temperature,
            self.class_names.clone(),
        )
    }

    pub fn cast<U: Real>(&self) -> PrototypeBank<U> {
        PrototypeBank {
            prototypes: self.prototypes.mapv(|v| U::lit(v.as_f64())),
            temperature: U::lit(self.temperature.as_f64()),
            class_names: self.class_names.clone(),
        }
    }
}

/// Row-stochastic class probabilities and their argmax labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBatch<T = f32> {
    probs: Array2<T>,
    labels: Vec<usize>,
}

impl<T: Real> PredictionBatch<T> {
    /// Builds a batch from probability rows; labels are the row argmax.
    pub fn from_probs(probs: Array2<T>) -> Result<Self> {
        let tol = if std::mem::size_of::<T>() == 4 { 1e-5 } else { 1e-6 };
        for (i, row) in probs.rows().into_iter().enumerate() {
            let s = row.sum().as_f64();
            if (s - 1.0).abs() > tol || row.iter().any(|&p| p < T::zero() || !p.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "row {i} is not a probability vector (sum {s})"
                )));
            }
        }
        let labels = probs.rows().into_iter().map(|r| argmax(r)).collect();
        Ok(Self { probs, labels })
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.probs.ncols()
    }

    pub fn probs(&self) -> ArrayView2<'_, T> {
        self.probs.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(row: ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = c;
        }
    }
    best
}

/// Scales each row to unit L2 norm.
pub fn normalize_rows<T: Real>(raw: ArrayView2<'_, T>) -> Result<EmbeddingBatch<T>> {
    if raw.ncols() < 2 {
        return Err(Error::InvalidArgument(format!(
            "embedding dimension {} < 2",
            raw.ncols()
        )));
    }
    let mut out = raw.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if n.as_f64() <= ZERO_NORM {
            return Err(Error::ZeroVectorRow { row: i });
        }
        row.mapv_inplace(|v| v / n);
    }
    Ok(EmbeddingBatch { data: out })
}

/// Pulls a gradient on the normalized rows back to the raw rows.
///
/// For `z = e / |e|`, `de = (dz - z (z . dz)) / |e|`.
pub fn normalize_rows_backward<T: Real>(
    raw: ArrayView2<'_, T>,
    grad_unit: ArrayView2<'_, T>,
) -> Array2<T> {
    let mut out = Array2::zeros(raw.raw_dim());
    for ((e, dz), mut de) in raw
        .rows()
        .into_iter()
        .zip(grad_unit.rows())
        .zip(out.rows_mut())
    {
        let n = e.dot(&e).sqrt();
        let z = e.mapv(|v| v / n);
        let proj = z.dot(&dz);
        de.assign(&((&dz - &(&z * proj)) / n));
    }
    out
}

/// Similarity logits `z . t_c / tau`.
pub fn zero_shot_logits<T: Real>(
    z: &EmbeddingBatch<T>,
    bank: &PrototypeBank<T>,
) -> Result<Array2<T>> {
    if z.dim() != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            found: z.dim(),
        });
    }
    let mut logits = z.view().dot(&bank.prototypes.t());
    let inv_tau = T::one() / bank.temperature;
    logits.mapv_inplace(|v| v * inv_tau);
    Ok(logits)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(logits: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Zero-shot class probabilities for a batch of embeddings.
pub fn zero_shot_probs<T: Real>(
    z: &EmbeddingBatch<T>,
    bank: &PrototypeBank<T>,
) -> Result<PredictionBatch<T>> {
    let logits = zero_shot_logits(z, bank)?;
    let probs = softmax_rows(logits.view());
    let labels = probs.rows().into_iter().map(|r| argmax(r)).collect();
    Ok(PredictionBatch { probs, labels })
}

/// Pulls a gradient on the logits back to the unit embeddings: `dz = dlogits . T / tau`.
pub fn logits_backward<T: Real>(
    grad_logits: ArrayView2<'_, T>,
    bank: &PrototypeBank<T>,
) -> Array2<T> {
    let inv_tau = T::one() / bank.temperature;
    let mut dz = grad_logits.dot(&bank.prototypes);
    dz.mapv_inplace(|v| v * inv_tau);
    dz
}

/// Fraction of predictions matching `truth`.
pub fn batch_accuracy<T: Real>(pred: &PredictionBatch<T>, truth: &[usize]) -> Result<f64> {
    accuracy(pred.labels(), truth)
}

pub(crate) fn accuracy(labels: &[usize], truth: &[usize]) -> Result<f64> {
    if labels.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: truth.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptySet);
    }
    let hits = labels.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Column means of the probability rows (the batch marginal).
pub fn marginal<T: Real>(pred: &PredictionBatch<T>) -> Array1<T> {
    pred.probs
        .mean_axis(Axis(0))
        .expect("prediction batch is non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn bank2() -> PrototypeBank<f64> {
        PrototypeBank::with_default_names(array![[1.0, 0.0], [0.0, 1.0]], 1.0).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let z = normalize_rows(array![[3.0f64, 4.0]].view()).unwrap();
        assert!((z.row(0)[0] - 0.6).abs() < 1e-12 && (z.row(0)[1] - 0.8).abs() < 1e-12);

        let z = normalize_rows(array![[1.0f64, 0.0], [0.0, -2.0]].view()).unwrap();
        assert_eq!(z.view(), array![[1.0, 0.0], [0.0, -1.0]].view());

        let err = normalize_rows(array![[0.0f64, 0.0]].view()).unwrap_err();
        assert!(matches!(err, Error::ZeroVectorRow { row: 0 }));
    }

    #[test]
    fn zero_shot_two_classes() {
        let z = EmbeddingBatch::from_unit_rows(array![[1.0f64, 0.0]]).unwrap();
        let p = zero_shot_probs(&z, &bank2()).unwrap();
        assert!((p.probs()[[0, 0]] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((p.probs()[[0, 1]] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert_eq!(p.labels(), &[0]);
    }

    #[test]
    fn zero_shot_saturates_at_small_temperature() {
        let z = EmbeddingBatch::from_unit_rows(array![[1.0f32, 0.0]]).unwrap();
        let bank = bank2().cast::<f32>().with_temperature(0.01).unwrap();
        let p = zero_shot_probs(&z, &bank).unwrap();
        assert!(p.probs()[[0, 0]] > 0.999_999);
        assert!(p.probs()[[0, 1]] < 1e-6);
        assert!(p.probs().iter().all(|v| v.is_finite()));
        assert_eq!(p.labels(), &[0]);
    }

    #[test]
    fn equidistant_embedding_gives_uniform_probs() {
        let s = 1.0 / 2f64.sqrt();
        let z = EmbeddingBatch::from_unit_rows(array![[s, s]]).unwrap();
        let p = zero_shot_probs(&z, &bank2()).unwrap();
        assert!((p.probs()[[0, 0]] - 0.5).abs() < 1e-12);
        // tie -> lowest index
        assert_eq!(p.labels(), &[0]);
    }

    #[test]
    fn dimension_mismatch() {
        let z = EmbeddingBatch::from_unit_rows(array![[1.0f64, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            zero_shot_probs(&z, &bank2()),
            Err(Error::DimensionMismatch { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn accuracy_examples() {
        let acc = |l: &[usize], t: &[usize]| accuracy(l, t).unwrap();
        assert_eq!(acc(&[0, 1], &[0, 1]), 1.0);
        assert_eq!(acc(&[0, 1], &[1, 0]), 0.0);
        assert_eq!(acc(&[0, 1, 2, 0], &[0, 1, 0, 0]), 0.75);
        assert!(matches!(
            accuracy(&[0], &[0, 1]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let raw = array![[0.3f64, -1.2, 0.7], [2.0, 0.1, -0.4]];
        let g = array![[0.5f64, 0.2, -0.9], [-0.3, 0.8, 0.1]];
        let analytic = normalize_rows_backward(raw.view(), g.view());
        let f = |r: &Array2<f64>| (normalize_rows(r.view()).unwrap().into_inner() * &g).sum();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut p = raw.clone();
                p[[i, j]] += h;
                let mut m = raw.clone();
                m[[i, j]] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                assert!((fd - analytic[[i, j]]).abs() < 1e-8);
            }
        }
    }

    fn raw_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-3.0f64..3.0, rows * cols)
            .prop_filter("no near-zero rows", move |v| {
                v.chunks(cols).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3)
            })
            .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
    }

    proptest! {
        #[test]
        fn probs_are_stochastic_and_label_is_tau_invariant(
            raw in raw_matrix(4, 5),
            protos in raw_matrix(3, 5),
            tau in 0.005f64..5.0,
        ) {
            let z = normalize_rows(raw.view()).unwrap();
            let t = normalize_rows(protos.view()).unwrap().into_inner();
            let bank = PrototypeBank::with_default_names(t, 1.0).unwrap();
            let p1 = zero_shot_probs(&z, &bank).unwrap();
            let p2 = zero_shot_probs(&z, &bank.with_temperature(tau).unwrap()).unwrap();
            for row in p2.probs().rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            }
            prop_assert_eq!(p1.labels(), p2.labels());
        }

        #[test]
        fn softmax_is_shift_invariant(raw in raw_matrix(3, 4), shift in -50.0f64..50.0) {
            let a = softmax_rows(raw.view());
            let b = softmax_rows((&raw + shift).view());
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn normalize_is_idempotent(raw in raw_matrix(5, 3)) {
            let once = normalize_rows(raw.view()).unwrap();
            let twice = normalize_rows(once.view()).unwrap();
            for (x, y) in once.view().iter().zip(twice.view().iter()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
