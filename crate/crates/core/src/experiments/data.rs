//! Synthetic datasets and CSV ingestion.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::math::sigmoid;
use crate::tensor::Array;

#[derive(Debug, Clone)]
pub struct BlrData {
    /// `[n, D]`
    pub x: Array,
    /// `[n]`, values in {0, 1}
    pub y: Array,
    /// `[D]`; absent for loaded data.
    pub true_w: Option<Array>,
}

/// Draws `true_w ~ N(0, scale² I)`, rows `x ~ N(0, I)` and `y ~ Bernoulli(σ(x·w))`.
pub fn synth_blr_data(n: usize, dim: usize, weight_scale: f64, seed: u64) -> BlrData {
    let mut rng = RngState::new(seed);
    let true_w = rng.normal_array(&[dim]).scale(weight_scale);
    let x = rng.normal_array(&[n, dim]);
    let y = Array::from_shape_fn([n], |i| {
        let logit: f64 = (0..dim).map(|j| x.data()[i * dim + j] * true_w.data()[j]).sum();
        if rng.uniform() < sigmoid(logit) { 1.0 } else { 0.0 }
    });
    BlrData { x, y, true_w: Some(true_w) }
}

/// Fraction of rows where `x·w > 0` agrees with the label.
pub fn accuracy(x: &Array, y: &Array, w: &[f64]) -> f64 {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let hits = (0..n)
        .filter(|&i| {
            let logit: f64 = (0..d).map(|j| x.data()[i * d + j] * w[j]).sum();
            (logit > 0.0) == (y.data()[i] > 0.5)
        })
        .count();
    hits as f64 / n as f64
}

const GEN_LATENT: usize = 4;
const GEN_HIDDEN: usize = 16;

/// Binary images from a fixed random two-layer generator with a 4-d latent.
pub fn synth_binary_images(n: usize, n_x: usize, seed: u64) -> Array {
    let mut rng = RngState::new(seed);
    let a = rng.normal_array(&[GEN_LATENT, GEN_HIDDEN]).scale(1.5);
    let b = rng.normal_array(&[GEN_HIDDEN, n_x]).scale(1.5);
    let bias = rng.normal_array(&[n_x]);
    let z = rng.normal_array(&[n, GEN_LATENT]);
    let h = z.matmul(&a).expect("generator shapes").map(f64::tanh);
    let logits = h.matmul(&b).expect("generator shapes").add(&bias).expect("generator shapes");
    logits.map(|l| if rng.uniform() < sigmoid(l) { 1.0 } else { 0.0 })
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| {
                    Error::Domain(format!("{}:{}: cannot parse `{f}`", path.display(), lineno + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first().map(Vec::len) {
            if row.len() != first {
                return Err(Error::Shape(format!(
                    "{}:{}: {} columns, expected {first}",
                    path.display(),
                    lineno + 1,
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Shape(format!("{} holds no rows", path.display())));
    }
    Ok(rows)
}

fn check_binary(values: &[f64], what: &str) -> Result<()> {
    match values.iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::Domain(format!("{what} must be 0 or 1, found {v}"))),
        None => Ok(()),
    }
}

/// Header-free CSV, features then a 0/1 label in the last column.
pub fn load_blr_csv(path: &Path) -> Result<BlrData> {
    let rows = read_rows(path)?;
    let cols = rows[0].len();
    if cols < 2 {
        return Err(Error::Shape("BLR data needs at least one feature and a label".into()));
    }
    let n = rows.len();
    let mut x = Vec::with_capacity(n * (cols - 1));
    let mut y = Vec::with_capacity(n);
    for row in rows {
        x.extend_from_slice(&row[..cols - 1]);
        y.push(row[cols - 1]);
    }
    check_binary(&y, "labels")?;
    Ok(BlrData { x: Array::new([n, cols - 1], x)?, y: Array::new([n], y)?, true_w: None })
}

/// Header-free CSV of 0/1 pixels, one image per row.
pub fn load_binary_csv(path: &Path) -> Result<Array> {
    let rows = read_rows(path)?;
    let (n, d) = (rows.len(), rows[0].len());
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    check_binary(&data, "pixels")?;
    Array::new([n, d], data)
}
