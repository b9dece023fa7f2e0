//! Projection of hypersphere embeddings onto a circle for visualization.
//!
//! Points from both sets are mean-centered together, projected onto the top two
//! principal directions and pushed radially onto the unit circle. This is a PCA plane
//! plus normalization, not an iterative sphere fit.

use std::io::Write;
use std::path::Path;

use log::warn;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::archive::write_atomic;
use crate::error::{Error, Result};

pub const DEGENERATE_EIGENVALUE: f64 = 1e-10;

/// Which input set a projected point came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSet {
    Image,
    Text,
}

impl PointSet {
    pub fn name(self) -> &'static str {
        match self {
            PointSet::Image => "image",
            PointSet::Text => "text",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// Unit-circle coordinates, one row per input point (images first, then texts).
    pub points: Array2<f64>,
    pub sets: Vec<PointSet>,
    /// The two principal directions, as rows.
    pub axes: Array2<f64>,
    /// Covariance eigenvalues, descending.
    pub spectrum: Array1<f64>,
}

/// Eigen decomposition of a symmetric matrix by cyclic Jacobi rotations. Returns
/// eigenvalues in descending order and the matching eigenvectors as columns.
pub fn symmetric_eigen(a: ArrayView2<'_, f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = a.to_owned();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum();
        let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[[k, p]], m[[k, q]]);
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[[p, k]], m[[q, k]]);
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].total_cmp(&m[[i, i]]));
    let vals = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let vecs = v.select(Axis(1), &order);
    (vals, vecs)
}

/// Projects images and text prototypes (rows) onto the unit circle of their joint
/// principal plane.
pub fn spherical_pca_project(images: ArrayView2<'_, f64>, texts: ArrayView2<'_, f64>) -> Result<Projection> {
    if images.ncols() != texts.ncols() {
        return Err(Error::DimensionMismatch {
            expected: images.ncols(),
            found: texts.ncols(),
        });
    }
    let n = images.nrows() + texts.nrows();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("spherical PCA needs >= 3 points, got {n}")));
    }
    let all = ndarray::concatenate(Axis(0), &[images, texts]).expect("column counts checked");
    let mean = all.mean_axis(Axis(0)).expect("non-empty");
    let centered = &all - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let (vals, vecs) = symmetric_eigen(cov.view());
    if vals.len() < 2 || (vals[0] < DEGENERATE_EIGENVALUE && vals[1] < DEGENERATE_EIGENVALUE) {
        return Err(Error::DegenerateSpectrum {
            threshold: DEGENERATE_EIGENVALUE,
        });
    }
    let axes = vecs.slice(ndarray::s![.., ..2]).t().to_owned();
    let mut points = centered.dot(&axes.t());
    let mut zeros = 0usize;
    for mut row in points.rows_mut() {
        let r = row.dot(&row).sqrt();
        if r <= 1e-12 {
            row[0] = 1.0;
            row[1] = 0.0;
            zeros += 1;
        } else {
            row.mapv_inplace(|x| x / r);
        }
    }
    if zeros > 0 {
        warn!("{zeros} point(s) project to the origin; placed at angle 0");
    }
    let sets = std::iter::repeat(PointSet::Image)
        .take(images.nrows())
        .chain(std::iter::repeat(PointSet::Text).take(texts.nrows()))
        .collect();
    Ok(Projection {
        points,
        sets,
        axes,
        spectrum: vals,
    })
}

/// Writes `set,x,y` rows.
pub fn write_projection_csv(path: &Path, proj: &Projection) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "set,x,y").expect("write to vec");
    for (set, p) in proj.sets.iter().zip(proj.points.rows()) {
        writeln!(buf, "{},{:.9},{:.9}", set.name(), p[0], p[1]).expect("write to vec");
    }
    write_atomic(path, &buf)
}
