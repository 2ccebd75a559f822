//! One-step-ahead regression model identification.
//!
//! The model class is a polynomial basis over the regressor entries and the
//! current input, fitted by ridge-regularized least squares through a QR
//! factorization. Columns are rescaled to unit RMS internally for
//! conditioning; stored coefficients are on the raw features.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::{build_regressor, DataRecord, Regressor};

/// A monomial feature: exponents over (q_1..q_{2n-1}, u), one entry per
/// variable, q entries first and the current input last.
pub type Feature = Vec<u32>;

/// Identified one-step predictor: y_{t+1} = sum_k c_k * feature_k(q_t, u_t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    pub n: usize,
    pub degree: u32,
    pub affine_in_u: bool,
    pub features: Vec<Feature>,
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdConfig {
    pub n: usize,
    pub degree: u32,
    pub ridge: f64,
    pub affine_in_u: bool,
}

impl Default for IdConfig {
    fn default() -> Self {
        Self {
            n: 1,
            degree: 1,
            ridge: 0.0,
            affine_in_u: true,
        }
    }
}

impl IdConfig {
    fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Config("model order must be >= 1".into()));
        }
        if self.degree < 1 {
            return Err(Error::Config("polynomial degree must be >= 1".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Config("ridge weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// All monomials of total degree <= `degree` over `nvars` variables,
/// optionally restricted to u-degree <= 1. Deterministic graded order.
fn enumerate_features(nvars: usize, degree: u32, affine_in_u: bool) -> Vec<Feature> {
    let mut out = Vec::new();
    let mut current = vec![0u32; nvars];
    fn rec(out: &mut Vec<Feature>, current: &mut Vec<u32>, var: usize, remaining: u32) {
        if var == current.len() {
            out.push(current.clone());
            return;
        }
        for e in 0..=remaining {
            current[var] = e;
            rec(out, current, var + 1, remaining - e);
        }
        current[var] = 0;
    }
    rec(&mut out, &mut current, 0, degree);
    if affine_in_u {
        let u_idx = nvars - 1;
        out.retain(|f| f[u_idx] <= 1);
    }
    out.sort_by_key(|f| (f.iter().sum::<u32>(), f.clone()));
    out
}

fn eval_feature(feature: &[u32], q: &[f64], u: f64) -> f64 {
    let mut v = 1.0;
    for (i, &e) in feature.iter().enumerate() {
        if e == 0 {
            continue;
        }
        let x = if i < q.len() { q[i] } else { u };
        v *= x.powi(e as i32);
    }
    v
}

impl RegressionModel {
    pub fn num_vars(&self) -> usize {
        2 * self.n
    }

    /// Exponent of u in a feature.
    fn u_degree(&self, feature: &[u32]) -> u32 {
        feature[self.num_vars() - 1]
    }

    /// Direct construction from named coefficients, mostly for tests and
    /// exact-model fixtures: (exponents, coefficient) pairs.
    pub fn from_terms(n: usize, degree: u32, terms: &[(Vec<u32>, f64)]) -> Result<Self> {
        let nvars = 2 * n;
        for (f, _) in terms {
            if f.len() != nvars {
                return Err(Error::Shape(format!(
                    "feature length {} != variable count {nvars}",
                    f.len()
                )));
            }
        }
        let affine = terms.iter().all(|(f, _)| f[nvars - 1] <= 1);
        Ok(Self {
            n,
            degree,
            affine_in_u: affine,
            features: terms.iter().map(|(f, _)| f.clone()).collect(),
            coefficients: terms.iter().map(|(_, c)| *c).collect(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(s)?;
        if model.coefficients.len() != model.features.len() {
            return Err(Error::Shape(format!(
                "{} coefficients for {} features",
                model.coefficients.len(),
                model.features.len()
            )));
        }
        Ok(model)
    }
}

/// Identify the one-step predictor from a data record.
pub fn identify(record: &DataRecord, cfg: &IdConfig) -> Result<RegressionModel> {
    cfg.validate()?;
    let n = cfg.n;
    let l = record.len();
    if l < n + 1 {
        return Err(Error::Data(format!(
            "record length {l} too short for order {n} (need at least {})",
            n + 1
        )));
    }

    let features = enumerate_features(2 * n, cfg.degree, cfg.affine_in_u);
    let rows = l - n;
    if cfg.ridge == 0.0 && rows < features.len() {
        return Err(Error::Data(format!(
            "{rows} usable rows for {} features with no regularization",
            features.len()
        )));
    }

    // Rows over all t with full regressor history and a next-step target.
    let t_first = record.u().start_index() + n as i64 - 1;
    let mut phi = DMatrix::zeros(rows, features.len());
    let mut target = DVector::zeros(rows);
    for (i, t) in (t_first..=-1).enumerate() {
        let q = build_regressor(record.y(), record.u(), t, n)?;
        let u_t = record.u().at(t)?;
        for (k, f) in features.iter().enumerate() {
            phi[(i, k)] = eval_feature(f, q.entries(), u_t);
        }
        target[i] = record.y().at(t + 1)?;
    }

    let coeffs = ridge_least_squares(&phi, &target, cfg.ridge)?;
    let affine = features
        .iter()
        .all(|f| f[f.len() - 1] <= 1);
    Ok(RegressionModel {
        n,
        degree: cfg.degree,
        affine_in_u: affine,
        features,
        coefficients: coeffs.iter().copied().collect(),
    })
}

/// Minimize ||phi c - y||^2 + ridge ||c||^2 by QR of the column-scaled
/// stacked system.
fn ridge_least_squares(phi: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    let (rows, cols) = phi.shape();
    // unit-RMS column scaling; zero columns keep scale 1
    let scales: Vec<f64> = (0..cols)
        .map(|k| {
            let rms = (phi.column(k).norm_squared() / rows as f64).sqrt();
            if rms > 0.0 {
                rms
            } else {
                1.0
            }
        })
        .collect();

    let stacked_rows = if ridge > 0.0 { rows + cols } else { rows };
    let mut a = DMatrix::zeros(stacked_rows, cols);
    let mut b = DVector::zeros(stacked_rows);
    for k in 0..cols {
        for i in 0..rows {
            a[(i, k)] = phi[(i, k)] / scales[k];
        }
        if ridge > 0.0 {
            // penalty on the raw coefficient c_k = cs_k / s_k
            a[(rows + k, k)] = ridge.sqrt() / scales[k];
        }
    }
    for i in 0..rows {
        b[i] = y[i];
    }

    let qr = a.clone().qr();
    let r = qr.r();
    if ridge == 0.0 {
        let max_diag = (0..cols).map(|k| r[(k, k)].abs()).fold(0.0f64, f64::max);
        let tol = max_diag * 1e-10 * (rows.max(cols) as f64);
        let deficient = (0..cols).filter(|&k| r[(k, k)].abs() <= tol).count();
        if deficient > 0 {
            return Err(Error::Conditioning(format!(
                "regressor matrix is rank-deficient: {deficient} of {cols} features \
                 are not identifiable without regularization"
            )));
        }
    }
    let qtb = qr.q().transpose() * b;
    let scaled = r
        .solve_upper_triangular(&qtb.rows(0, cols).into_owned())
        .ok_or_else(|| Error::Conditioning("singular triangular factor".into()))?;
    let mut c = DVector::zeros(cols);
    for k in 0..cols {
        c[k] = scaled[k] / scales[k];
    }
    Ok(c)
}

/// Evaluate the model at regressor `q` and input `u`.
pub fn predict(model: &RegressionModel, q: &Regressor, u: f64) -> Result<f64> {
    if q.order() != model.n {
        return Err(Error::Shape(format!(
            "regressor order {} != model order {}",
            q.order(),
            model.n
        )));
    }
    Ok(model
        .features
        .iter()
        .zip(&model.coefficients)
        .map(|(f, c)| c * eval_feature(f, q.entries(), u))
        .sum())
}

/// Split an affine-in-u model as predict(q, u) = a + b*u.
pub fn affine_decompose(model: &RegressionModel, q: &Regressor) -> Result<(f64, f64)> {
    if !model.affine_in_u {
        return Err(Error::Contract(
            "affine_decompose called on a model that is not affine in u".into(),
        ));
    }
    if q.order() != model.n {
        return Err(Error::Shape(format!(
            "regressor order {} != model order {}",
            q.order(),
            model.n
        )));
    }
    let mut a = 0.0;
    let mut b = 0.0;
    for (f, c) in model.features.iter().zip(&model.coefficients) {
        // feature with the u-factor removed
        let mut stripped = f.clone();
        let u_deg = model.u_degree(f);
        *stripped.last_mut().unwrap() = 0;
        let base = c * eval_feature(&stripped, q.entries(), 0.0);
        if u_deg == 0 {
            a += base;
        } else {
            b += base;
        }
    }
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::Regressor;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn simulate_record(
        next: impl Fn(&[f64], &[f64]) -> f64,
        n: usize,
        len: usize,
        seed: u64,
        amp: f64,
    ) -> DataRecord {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut y = vec![0.0; n];
        let mut u = Vec::new();
        let mut yo = Vec::new();
        for _ in 0..len {
            let ut: f64 = rng.gen_range(-amp..amp);
            // newest first, matching the regressor layout
            let ylags: Vec<f64> = y.iter().rev().take(n).cloned().collect();
            let ulags: Vec<f64> = {
                let mut v: Vec<f64> = u.iter().rev().take(n - 1).cloned().collect();
                v.insert(0, ut);
                v
            };
            let ynext = next(&ylags, &ulags);
            u.push(ut);
            yo.push(*y.last().unwrap());
            y.push(ynext);
        }
        DataRecord::new(u, yo).unwrap()
    }

    /// Independent oracle: solve the (possibly regularized) normal equations
    /// directly, a different algebraic route than the QR path.
    fn normal_equations_oracle(
        record: &DataRecord,
        features: &[Feature],
        n: usize,
        ridge: f64,
    ) -> DVector<f64> {
        let l = record.len();
        let rows = l - n;
        let t_first = record.u().start_index() + n as i64 - 1;
        let mut phi = DMatrix::zeros(rows, features.len());
        let mut target = DVector::zeros(rows);
        for (i, t) in (t_first..=-1).enumerate() {
            let q = build_regressor(record.y(), record.u(), t, n).unwrap();
            let u_t = record.u().at(t).unwrap();
            for (k, f) in features.iter().enumerate() {
                phi[(i, k)] = eval_feature(f, q.entries(), u_t);
            }
            target[i] = record.y().at(t + 1).unwrap();
        }
        let gram = phi.transpose() * &phi + DMatrix::identity(features.len(), features.len()) * ridge;
        let rhs = phi.transpose() * target;
        gram.lu().solve(&rhs).unwrap()
    }

    fn coeff_of(model: &RegressionModel, feature: &[u32]) -> f64 {
        model
            .features
            .iter()
            .zip(&model.coefficients)
            .find(|(f, _)| f.as_slice() == feature)
            .map(|(_, c)| *c)
            .unwrap()
    }

    #[test]
    fn identify_linear_first_order_plant() {
        // y_{t+1} = 0.5 y_t + u_t, noise-free, persistently exciting input
        let rec = simulate_record(|y, u| 0.5 * y[0] + u[0], 1, 200, 7, 1.0);
        let cfg = IdConfig {
            n: 1,
            degree: 1,
            ridge: 0.0,
            affine_in_u: true,
        };
        let model = identify(&rec, &cfg).unwrap();
        assert!((coeff_of(&model, &[1, 0]) - 0.5).abs() < 1e-8);
        assert!((coeff_of(&model, &[0, 1]) - 1.0).abs() < 1e-8);
        assert!(coeff_of(&model, &[0, 0]).abs() < 1e-8);

        // independent least-squares oracle agrees
        let oracle = normal_equations_oracle(&rec, &model.features, 1, 0.0);
        for (k, c) in model.coefficients.iter().enumerate() {
            assert!((c - oracle[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn identify_zero_record_with_ridge_gives_zero_coeffs() {
        let rec = DataRecord::new(vec![0.0; 50], vec![0.0; 50]).unwrap();
        let cfg = IdConfig {
            n: 1,
            degree: 1,
            ridge: 0.5,
            affine_in_u: true,
        };
        let model = identify(&rec, &cfg).unwrap();
        for c in &model.coefficients {
            assert_eq!(*c, 0.0);
        }
    }

    #[test]
    fn identify_quadratic_input_term() {
        // y_{t+1} = 0.8 y_t + u_t + 0.3 u_t^2
        let rec = simulate_record(|y, u| 0.8 * y[0] + u[0] + 0.3 * u[0] * u[0], 1, 400, 11, 1.0);
        let cfg = IdConfig {
            n: 1,
            degree: 2,
            ridge: 0.0,
            affine_in_u: false,
        };
        let model = identify(&rec, &cfg).unwrap();
        assert!(!model.affine_in_u);
        assert!((coeff_of(&model, &[0, 2]) - 0.3).abs() < 1e-6);
        assert!((coeff_of(&model, &[1, 0]) - 0.8).abs() < 1e-6);

        let oracle = normal_equations_oracle(&rec, &model.features, 1, 0.0);
        for (k, c) in model.coefficients.iter().enumerate() {
            assert!((c - oracle[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn identify_too_few_samples() {
        let rec = DataRecord::new(vec![1.0, 2.0], vec![0.5, 1.0]).unwrap();
        let cfg = IdConfig {
            n: 2,
            degree: 1,
            ridge: 0.0,
            affine_in_u: true,
        };
        assert!(matches!(identify(&rec, &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn identify_rank_deficient_without_ridge() {
        // constant input gives a collinear basis
        let rec = simulate_record(|y, _| 0.5 * y[0] + 1.0, 1, 60, 3, 1.0);
        let rec = DataRecord::new(vec![1.0; 60], rec.y().samples().to_vec()).unwrap();
        let cfg = IdConfig {
            n: 1,
            degree: 2,
            ridge: 0.0,
            affine_in_u: false,
        };
        match identify(&rec, &cfg) {
            Err(Error::Conditioning(msg)) => assert!(msg.contains("features")),
            other => panic!("expected conditioning error, got {other:?}"),
        }
    }

    #[test]
    fn interpolation_on_in_class_plant() {
        let rec = simulate_record(
            |y, u| 0.8 * y[0] - 0.2 * y[1] + u[0] + 0.3 * u[0] * u[0],
            2,
            300,
            5,
            1.0,
        );
        let cfg = IdConfig {
            n: 2,
            degree: 2,
            ridge: 0.0,
            affine_in_u: false,
        };
        let model = identify(&rec, &cfg).unwrap();
        let t_first = rec.u().start_index() + 1;
        let mut max_resid = 0.0f64;
        for t in t_first..=-1 {
            let q = build_regressor(rec.y(), rec.u(), t, 2).unwrap();
            let pred = predict(&model, &q, rec.u().at(t).unwrap()).unwrap();
            max_resid = max_resid.max((rec.y().at(t + 1).unwrap() - pred).abs());
        }
        assert!(max_resid < 1e-8, "max one-step residual {max_resid}");
    }

    #[test]
    fn ridge_monotonically_shrinks_coefficients() {
        let rec = simulate_record(|y, u| 0.6 * y[0] + 0.9 * u[0], 1, 120, 9, 1.0);
        let mut last_norm = f64::INFINITY;
        for ridge in [0.0, 0.01, 0.1, 1.0, 10.0] {
            let cfg = IdConfig {
                n: 1,
                degree: 2,
                ridge,
                affine_in_u: false,
            };
            let model = identify(&rec, &cfg).unwrap();
            let norm = model.coefficients.iter().map(|c| c * c).sum::<f64>().sqrt();
            assert!(norm <= last_norm + 1e-12, "ridge {ridge}: {norm} > {last_norm}");
            last_norm = norm;
        }
    }

    #[test]
    fn predict_is_dot_product() {
        let model = RegressionModel::from_terms(1, 1, &[(vec![1, 0], 0.5), (vec![0, 1], 1.0)]).unwrap();
        let q = Regressor::from_parts(vec![2.0], 1).unwrap();
        assert_relative_eq!(predict(&model, &q, 3.0).unwrap(), 4.0);
    }

    #[test]
    fn predict_zero_coefficients() {
        let model = RegressionModel::from_terms(1, 1, &[(vec![1, 0], 0.0), (vec![0, 1], 0.0)]).unwrap();
        let q = Regressor::from_parts(vec![9.0], 1).unwrap();
        assert_eq!(predict(&model, &q, -4.0).unwrap(), 0.0);
    }

    #[test]
    fn predict_rejects_wrong_order() {
        let model = RegressionModel::from_terms(2, 1, &[(vec![1, 0, 0, 0], 1.0)]).unwrap();
        let q = Regressor::from_parts(vec![1.0], 1).unwrap();
        assert!(matches!(predict(&model, &q, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn predict_linear_in_coefficients() {
        let q = Regressor::from_parts(vec![1.3], 1).unwrap();
        let m1 = RegressionModel::from_terms(1, 2, &[(vec![1, 0], 0.7), (vec![0, 1], -0.2)]).unwrap();
        let mut m2 = m1.clone();
        for c in &mut m2.coefficients {
            *c *= 3.0;
        }
        let p1 = predict(&m1, &q, 0.4).unwrap();
        let p2 = predict(&m2, &q, 0.4).unwrap();
        assert_relative_eq!(p2, 3.0 * p1, max_relative = 1e-12);
    }

    #[test]
    fn affine_decompose_reads_off_coefficients() {
        // {y_t: 0.5, u_t: 2, const: 0.1}, q = (3) -> (1.6, 2.0)
        let model = RegressionModel::from_terms(
            1,
            1,
            &[(vec![0, 0], 0.1), (vec![1, 0], 0.5), (vec![0, 1], 2.0)],
        )
        .unwrap();
        let q = Regressor::from_parts(vec![3.0], 1).unwrap();
        let (a, b) = affine_decompose(&model, &q).unwrap();
        assert_relative_eq!(a, 1.6);
        assert_relative_eq!(b, 2.0);
    }

    #[test]
    fn affine_decompose_pure_input_model() {
        let model = RegressionModel::from_terms(1, 1, &[(vec![0, 1], 1.0)]).unwrap();
        let q = Regressor::from_parts(vec![42.0], 1).unwrap();
        assert_eq!(affine_decompose(&model, &q).unwrap(), (0.0, 1.0));
    }

    #[test]
    fn affine_decompose_matches_predict() {
        let mut rng = StdRng::seed_from_u64(21);
        let features = enumerate_features(4, 2, true);
        let terms: Vec<(Vec<u32>, f64)> = features
            .into_iter()
            .map(|f| (f, rng.gen_range(-1.0..1.0)))
            .collect();
        let model = RegressionModel::from_terms(2, 2, &terms).unwrap();
        let q = Regressor::from_parts(vec![0.3, -0.7, 1.1], 2).unwrap();
        let (a, b) = affine_decompose(&model, &q).unwrap();
        for _ in 0..100 {
            let u: f64 = rng.gen_range(-5.0..5.0);
            let diff = predict(&model, &q, u).unwrap() - (a + b * u);
            assert!(diff.abs() < 1e-12);
        }
    }

    #[test]
    fn affine_decompose_rejects_nonaffine() {
        let model = RegressionModel::from_terms(1, 2, &[(vec![0, 2], 0.3)]).unwrap();
        let q = Regressor::from_parts(vec![0.0], 1).unwrap();
        assert!(matches!(
            affine_decompose(&model, &q),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn model_json_round_trip() {
        let rec = simulate_record(|y, u| 0.5 * y[0] + u[0], 1, 80, 13, 1.0);
        let cfg = IdConfig::default();
        let model = identify(&rec, &cfg).unwrap();
        let json = model.to_json().unwrap();
        let back = RegressionModel::from_json(&json).unwrap();
        assert_eq!(model, back);
    }
}
