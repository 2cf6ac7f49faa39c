//! Linear probes from student tap layers to their paired teacher layers.
//!
//! Student and teacher widths differ, so feature agreement is measured
//! through a ridge-regression map fitted on one corpus and scored on
//! another. The same procedure is applied to every student, whatever its
//! training objective.

use anyhow::{bail, Result};
use candle_core::DType;
use nalgebra::DMatrix;
use uwkit_core::encoder::{images_to_tensor, tap_pairs};
use uwkit_core::nn::to_vec_f64;
use uwkit_core::{AnnotatedImage, VitEncoder};

pub const RIDGE: f64 = 1e-3;

type Rows = (Vec<f64>, usize);

fn to_matrix((rows, width): Rows) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows.len() / width.max(1), width, &rows)
}

/// `(student rows, teacher rows)` for each tap pair over `data`, one row per
/// token.
fn tap_rows(
    student: &VitEncoder,
    teacher: &VitEncoder,
    layers: &[usize],
    data: &[AnnotatedImage],
    batch: usize,
    dtype: DType,
) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
    let mut acc: Vec<(Rows, Rows)> = Vec::new();
    for chunk in data.chunks(batch.max(1)) {
        let arrays: Vec<_> = chunk.iter().map(|i| &i.image).collect();
        let x = images_to_tensor(&arrays, dtype)?;
        let pairs = tap_pairs(&teacher.encode(&x)?, &student.encode(&x)?, layers)?;
        acc.resize_with(pairs.len(), Default::default);
        for ((t, s), (rs, rt)) in pairs.iter().zip(acc.iter_mut()) {
            rs.0.extend(to_vec_f64(&s.tokens.detach())?);
            rs.1 = s.channels();
            rt.0.extend(to_vec_f64(&t.tokens.detach())?);
            rt.1 = t.channels();
        }
    }
    Ok(acc.into_iter().map(|(s, t)| (to_matrix(s), to_matrix(t))).collect())
}

fn with_bias(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().insert_column(x.ncols(), 1.0)
}

/// Ridge solution `W` of `[X 1] W ≈ Y`.
pub fn fit_ridge(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let xb = with_bias(x);
    let mut gram = xb.transpose() * &xb;
    let scale = gram.diagonal().mean().max(1e-12);
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda * scale;
    }
    let Some(chol) = gram.cholesky() else {
        bail!("probe normal equations are not positive definite");
    };
    Ok(chol.solve(&(xb.transpose() * y)))
}

/// Mean squared error of `[X 1] W` against `Y` over all entries.
pub fn probe_mse(x: &DMatrix<f64>, y: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    let r = with_bias(x) * w - y;
    r.iter().map(|v| v * v).sum::<f64>() / (r.len().max(1) as f64)
}

/// Held-out probe MSE for each student tap layer, fitted on `fit` and
/// scored on `score`.
pub fn tap_probe_mse(
    student: &VitEncoder,
    teacher: &VitEncoder,
    layers: &[usize],
    fit: &[AnnotatedImage],
    score: &[AnnotatedImage],
    batch: usize,
    dtype: DType,
) -> Result<Vec<f64>> {
    let fit_rows = tap_rows(student, teacher, layers, fit, batch, dtype)?;
    let score_rows = tap_rows(student, teacher, layers, score, batch, dtype)?;
    fit_rows
        .iter()
        .zip(&score_rows)
        .map(|((xs, xt), (ys, yt))| Ok(probe_mse(ys, yt, &fit_ridge(xs, xt, RIDGE)?)))
        .collect()
}
