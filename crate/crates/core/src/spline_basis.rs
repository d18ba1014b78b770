//! Natural cubic spline design matrices for calendar time and temperature.
//!
//! A basis with `df` degrees of freedom places `df − 1` interior knots at
//! equally spaced quantiles of the covariate and boundary knots at its
//! extremes, then spans the natural cubic spline space (zero curvature at
//! and beyond the boundaries) with `df` columns. The constant function is
//! excluded; the model carries an explicit intercept column instead.
//!
//! Internally the covariate is mapped to [0, 1] before the truncated-power
//! construction so the columns stay well conditioned at high `df`.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    pub label: String,
    /// All knots in the covariate's original scale, ascending; the first
    /// and last entries are the boundary knots.
    pub knots: Vec<f64>,
    /// n × df basis matrix, row per observation.
    pub matrix: Vec<Vec<f64>>,
    /// Per-column (mean, sd) once standardized; `None` for a raw basis.
    pub standardization: Option<Vec<(f64, f64)>>,
}

impl SplineBasis {
    pub fn n(&self) -> usize {
        self.matrix.len()
    }

    pub fn df(&self) -> usize {
        self.matrix.first().map_or(0, |row| row.len())
    }

    /// Raw (unstandardized) basis values at an arbitrary point, including
    /// points beyond the boundary knots where every column continues
    /// linearly.
    pub fn evaluate(&self, x: f64) -> Vec<f64> {
        evaluate_from_knots(x, &self.knots)
    }

    /// Map coefficients fitted on the standardized columns back to the
    /// raw-column scale: returns the adjusted intercept and slopes.
    pub fn back_transform(&self, intercept: f64, coefs: &[f64]) -> (f64, Vec<f64>) {
        match &self.standardization {
            None => (intercept, coefs.to_vec()),
            Some(consts) => {
                let mut shift = intercept;
                let mut raw = Vec::with_capacity(coefs.len());
                for (c, (mean, sd)) in coefs.iter().zip(consts) {
                    raw.push(c / sd);
                    shift -= c * mean / sd;
                }
                (shift, raw)
            }
        }
    }
}

/// Linearly interpolated quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

fn evaluate_from_knots(x: f64, knots: &[f64]) -> Vec<f64> {
    let lo = knots[0];
    let hi = knots[knots.len() - 1];
    let span = hi - lo;
    let t = (x - lo) / span;
    let scaled: Vec<f64> = knots.iter().map(|k| (k - lo) / span).collect();
    let m = scaled.len();
    let last = scaled[m - 1];
    let next_to_last = scaled[m - 2];
    let cube = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
    let d = |knot: f64| (cube(t - knot) - cube(t - last)) / (last - knot);

    let mut row = Vec::with_capacity(m - 1);
    row.push(t);
    let d_ref = d(next_to_last);
    for &knot in &scaled[..m - 2] {
        row.push(d(knot) - d_ref);
    }
    row
}

/// Build the natural cubic spline basis for a covariate series.
pub fn natural_cubic_basis(values: &[f64], df: usize, label: &str) -> Result<SplineBasis> {
    if df < 1 {
        return Err(Error::Invalid("spline df must be ≥ 1".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();
    if sorted.len() < df + 2 {
        return Err(Error::TooFewDistinctValues {
            need: df + 2,
            got: sorted.len(),
        });
    }

    let mut knots = Vec::with_capacity(df + 1);
    knots.push(sorted[0]);
    for j in 1..df {
        knots.push(quantile_sorted(&sorted, j as f64 / df as f64));
    }
    knots.push(sorted[sorted.len() - 1]);
    for w in knots.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::CoincidentKnots(w[0]));
        }
    }

    let matrix = values
        .iter()
        .map(|&x| evaluate_from_knots(x, &knots))
        .collect();
    Ok(SplineBasis {
        label: label.to_string(),
        knots,
        matrix,
        standardization: None,
    })
}

/// Rebuild a basis matrix from stored knots; bit-identical to the original
/// construction over the same values.
pub fn basis_from_knots(values: &[f64], knots: &[f64], label: &str) -> SplineBasis {
    SplineBasis {
        label: label.to_string(),
        knots: knots.to_vec(),
        matrix: values
            .iter()
            .map(|&x| evaluate_from_knots(x, knots))
            .collect(),
        standardization: None,
    }
}

/// Center and scale every column to mean 0, sd 1 (n−1 denominator),
/// keeping the constants for back-transformation.
pub fn standardize(basis: &SplineBasis) -> Result<SplineBasis> {
    let n = basis.n();
    let df = basis.df();
    if n < 2 {
        return Err(Error::TooFewSamples { need: 2, got: n });
    }
    let mut consts = Vec::with_capacity(df);
    let mut matrix = basis.matrix.clone();
    for j in 0..df {
        let mean = matrix.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let ss = matrix.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>();
        let sd = (ss / (n as f64 - 1.0)).sqrt();
        if sd == 0.0 {
            return Err(Error::ConstantColumn { index: j });
        }
        for row in &mut matrix {
            row[j] = (row[j] - mean) / sd;
        }
        consts.push((mean, sd));
    }
    Ok(SplineBasis {
        label: basis.label.clone(),
        knots: basis.knots.clone(),
        matrix,
        standardization: Some(consts),
    })
}

/// Audit export: `date,col_1..col_df`.
pub fn write_basis_csv(
    basis: &SplineBasis,
    dates: &[NaiveDate],
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (1..=basis.df()).map(|j| format!("col_{j}")).collect();
    writeln!(out, "date,{}", header.join(","))?;
    for (date, row) in dates.iter().zip(&basis.matrix) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{date},{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};

    fn ols(design: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
        let n = design.len();
        let p = design[0].len();
        let x = DMatrix::from_fn(n, p, |i, j| design[i][j]);
        let yv = DVector::from_column_slice(y);
        let svd = x.svd(true, true);
        svd.solve(&yv, 1e-12).unwrap().iter().copied().collect()
    }

    fn with_intercept(basis: &SplineBasis) -> Vec<Vec<f64>> {
        basis
            .matrix
            .iter()
            .map(|row| {
                let mut r = vec![1.0];
                r.extend_from_slice(row);
                r
            })
            .collect()
    }

    fn predict(design: &[Vec<f64>], coefs: &[f64]) -> Vec<f64> {
        design
            .iter()
            .map(|row| row.iter().zip(coefs).map(|(x, c)| x * c).sum())
            .collect()
    }

    #[test]
    fn df1_reproduces_linear_functions_exactly() {
        let x: Vec<f64> = (0..40).map(|i| i as f64 * 0.5).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 + 3.0 * v).collect();
        let basis = natural_cubic_basis(&x, 1, "x").unwrap();
        assert_eq!(basis.df(), 1);
        let design = with_intercept(&basis);
        let coefs = ols(&design, &y);
        for (fit, truth) in predict(&design, &coefs).iter().zip(&y) {
            assert_abs_diff_eq!(fit, truth, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_curvature_beyond_boundary_knots() {
        let x: Vec<f64> = (0..60).map(|i| i as f64).collect();
        let basis = natural_cubic_basis(&x, 5, "x").unwrap();
        let hi = *basis.knots.last().unwrap();
        let lo = basis.knots[0];
        let h = 0.25;
        for start in [hi + 1.0, hi + 7.0, lo - 5.0] {
            let f0 = basis.evaluate(start);
            let f1 = basis.evaluate(start + h);
            let f2 = basis.evaluate(start + 2.0 * h);
            for j in 0..basis.df() {
                let curvature = f2[j] - 2.0 * f1[j] + f0[j];
                assert!(
                    curvature.abs() < 1e-9,
                    "column {j} curved beyond boundary: {curvature}"
                );
            }
        }
    }

    #[test]
    fn df11_over_363_days_has_full_column_rank() {
        let x: Vec<f64> = (0..363).map(|i| i as f64).collect();
        let basis = natural_cubic_basis(&x, 11, "time").unwrap();
        assert_eq!(basis.n(), 363);
        assert_eq!(basis.df(), 11);
        let m = DMatrix::from_fn(363, 11, |i, j| basis.matrix[i][j]);
        let rank = m.svd(false, false).rank(1e-9);
        assert_eq!(rank, 11);
    }

    #[test]
    fn standardize_small_column_example() {
        let basis = SplineBasis {
            label: "toy".into(),
            knots: vec![0.0, 1.0],
            matrix: vec![vec![1.0], vec![2.0], vec![3.0]],
            standardization: None,
        };
        let std = standardize(&basis).unwrap();
        let col: Vec<f64> = std.matrix.iter().map(|r| r[0]).collect();
        assert_abs_diff_eq!(col[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(col[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(col[2], 1.0, epsilon = 1e-12);
        assert_eq!(std.standardization.as_ref().unwrap()[0], (2.0, 1.0));
    }

    #[test]
    fn standardize_is_idempotent_on_values() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64).sin() * 4.0 + i as f64).collect();
        let basis = natural_cubic_basis(&x, 4, "x").unwrap();
        let once = standardize(&basis).unwrap();
        let twice = standardize(&once).unwrap();
        for (a, b) in once.matrix.iter().flatten().zip(twice.matrix.iter().flatten()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_column_is_an_error() {
        let basis = SplineBasis {
            label: "toy".into(),
            knots: vec![0.0, 1.0],
            matrix: vec![vec![2.0], vec![2.0], vec![2.0]],
            standardization: None,
        };
        assert!(matches!(
            standardize(&basis),
            Err(Error::ConstantColumn { index: 0 })
        ));
    }

    #[test]
    fn back_transform_reproduces_unstandardized_fit() {
        let x: Vec<f64> = (0..80).map(|i| i as f64 * 0.3).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| 1.5 + (v * 0.4).sin() * 2.0 + 0.05 * v)
            .collect();
        let raw = natural_cubic_basis(&x, 5, "x").unwrap();
        let std = standardize(&raw).unwrap();

        let raw_design = with_intercept(&raw);
        let std_design = with_intercept(&std);
        let raw_coefs = ols(&raw_design, &y);
        let std_coefs = ols(&std_design, &y);

        // Predictions agree between the two parameterizations.
        let raw_pred = predict(&raw_design, &raw_coefs);
        let std_pred = predict(&std_design, &std_coefs);
        for (a, b) in raw_pred.iter().zip(&std_pred) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }

        // Back-transformed standardized coefficients predict on raw columns.
        let (b0, slopes) = std.back_transform(std_coefs[0], &std_coefs[1..]);
        let mut back = vec![b0];
        back.extend(slopes);
        for (a, b) in predict(&raw_design, &back).iter().zip(&std_pred) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn regenerated_basis_is_bit_identical() {
        let x: Vec<f64> = (0..90).map(|i| (i as f64 * 0.7).cos() * 10.0 + i as f64).collect();
        let basis = natural_cubic_basis(&x, 6, "x").unwrap();
        let regen = basis_from_knots(&x, &basis.knots, "x");
        assert_eq!(basis.matrix, regen.matrix);
    }

    #[test]
    fn too_few_distinct_values_is_an_error() {
        let x = vec![1.0, 1.0, 2.0, 2.0, 3.0];
        assert!(matches!(
            natural_cubic_basis(&x, 4, "x"),
            Err(Error::TooFewDistinctValues { need: 6, got: 3 })
        ));
    }
}
