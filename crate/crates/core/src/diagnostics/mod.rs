//! Measurements on embeddings and predictions: modality gap, spherical PCA and
//! per-batch summaries.

pub mod emd;
pub mod spca;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::write_atomic;
use crate::error::{Error, Result};
use crate::objectives::{entropy_loss, mutual_information, uniformity_metric};
use crate::scalar::Real;
use crate::sphere::{batch_accuracy, EmbeddingBatch, PredictionBatch, PrototypeBank};

pub use emd::{emd, EmdConfig, GroundMetric};
pub use spca::{spherical_pca_project, write_projection_csv, PointSet, Projection};

/// EMD between image embeddings and the bank's prototypes.
pub fn modality_gap_emd<T: Real>(images: &EmbeddingBatch<T>, texts: &PrototypeBank<T>, cfg: &EmdConfig) -> Result<f64> {
    let a = images.view().mapv(|v| v.as_f64());
    let b = texts.prototypes().mapv(|v| v.as_f64());
    emd(a.view(), b.view(), cfg)
}

/// Spherical PCA of image embeddings together with the bank's prototypes.
pub fn project_batch<T: Real>(images: &EmbeddingBatch<T>, texts: &PrototypeBank<T>) -> Result<Projection> {
    let a = images.view().mapv(|v| v.as_f64());
    let b = texts.prototypes().mapv(|v| v.as_f64());
    spherical_pca_project(a.view(), b.view())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub mean_entropy: f64,
    pub uniformity_metric: f64,
    pub emd_modality_gap: f64,
    pub mutual_information: f64,
    /// Fraction of predictions assigned to each class.
    pub histogram: Vec<f64>,
    pub accuracy: Option<f64>,
}

/// Summarizes one batch of embeddings and their predictions.
pub fn collect_batch_metrics<T: Real>(
    z: &EmbeddingBatch<T>,
    pred: &PredictionBatch<T>,
    bank: &PrototypeBank<T>,
    truth: Option<&[usize]>,
    emd_cfg: &EmdConfig,
) -> Result<DiagnosticsReport> {
    if z.len() != pred.len() {
        return Err(Error::LengthMismatch {
            left: z.len(),
            right: pred.len(),
        });
    }
    if pred.num_classes() != bank.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: bank.num_classes(),
            found: pred.num_classes(),
        });
    }
    let mut histogram = vec![0.0; bank.num_classes()];
    for &l in pred.labels() {
        histogram[l] += 1.0;
    }
    histogram.iter_mut().for_each(|h| *h /= pred.len() as f64);
    Ok(DiagnosticsReport {
        mean_entropy: entropy_loss(pred).as_f64(),
        uniformity_metric: uniformity_metric(z)?.as_f64(),
        emd_modality_gap: modality_gap_emd(z, bank, emd_cfg)?,
        mutual_information: mutual_information(pred).as_f64(),
        histogram,
        accuracy: truth.map(|t| batch_accuracy(pred, t)).transpose()?,
    })
}

/// Writes reports as CSV with one `hist_<class>` column per class.
pub fn write_reports_csv(path: &Path, labels: &[String], reports: &[DiagnosticsReport], class_names: &[String]) -> Result<()> {
    if labels.len() != reports.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: reports.len(),
        });
    }
    let mut buf = Vec::new();
    write!(buf, "set,mean_entropy,uniformity_metric,emd_modality_gap,mi,accuracy").expect("write to vec");
    for c in class_names {
        write!(buf, ",hist_{c}").expect("write to vec");
    }
    writeln!(buf).expect("write to vec");
    for (label, r) in labels.iter().zip(reports) {
        write!(
            buf,
            "{label},{:.9},{:.9},{:.9},{:.9},{}",
            r.mean_entropy,
            r.uniformity_metric,
            r.emd_modality_gap,
            r.mutual_information,
            r.accuracy.map(|a| format!("{a:.9}")).unwrap_or_default()
        )
        .expect("write to vec");
        for h in &r.histogram {
            write!(buf, ",{h:.9}").expect("write to vec");
        }
        writeln!(buf).expect("write to vec");
    }
    write_atomic(path, &buf)
}
