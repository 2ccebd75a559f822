//! Virtual-reference design of the linear controller.
//!
//! The recorded output is pushed backwards through the reference model to
//! obtain the virtual reference, the inversion controller is replayed over
//! the record, and the incremental PID parameters are fitted by least
//! squares on the leftover input.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nic::NicController;
use crate::signals::{build_regressor, DataRecord, Signal};

/// Desired closed-loop behavior: a discrete transfer function
/// num(z^-1)/den(z^-1), coefficients indexed by lag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceModel {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
    pub relative_degree: usize,
}

impl ReferenceModel {
    /// Validates stability, minimum phase, and unit static gain.
    pub fn new(num: Vec<f64>, den: Vec<f64>) -> Result<Self> {
        if den.is_empty() || den[0] == 0.0 {
            return Err(Error::Config(
                "denominator must have a nonzero leading coefficient".into(),
            ));
        }
        let relative_degree = num
            .iter()
            .position(|c| *c != 0.0)
            .ok_or_else(|| Error::Config("numerator is identically zero".into()))?;
        if relative_degree == 0 {
            return Err(Error::Config(
                "reference model must have relative degree >= 1".into(),
            ));
        }
        let pole_radius = max_root_modulus(&den);
        if pole_radius >= 1.0 {
            return Err(Error::Config(format!(
                "reference model is not asymptotically stable (pole radius {pole_radius:.6})"
            )));
        }
        let zero_radius = max_root_modulus(&num[relative_degree..]);
        if zero_radius >= 1.0 {
            return Err(Error::NonInvertible(format!(
                "numerator zero on or outside the unit circle (radius {zero_radius:.6})"
            )));
        }
        let gain = num.iter().sum::<f64>() / den.iter().sum::<f64>();
        if (gain - 1.0).abs() > 1e-10 {
            return Err(Error::Config(format!(
                "reference model static gain is {gain}, expected 1"
            )));
        }
        Ok(Self {
            num,
            den,
            relative_degree,
        })
    }

    /// First-order lag y_t = (1-lambda) r_{t-1} + lambda y_{t-1}.
    pub fn first_order(lambda: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&lambda) {
            return Err(Error::Config(format!(
                "lambda must be in [0, 1), got {lambda}"
            )));
        }
        Self::new(vec![0.0, 1.0 - lambda], vec![1.0, -lambda])
    }

    /// Lead-in length that must be discarded after inverse filtering.
    pub fn settle_margin(&self) -> usize {
        self.num.len().max(self.den.len())
    }

    /// Filter `r` forward through the model from rest.
    pub fn filter(&self, r: &Signal) -> Result<Signal> {
        let t0 = r.start_index();
        let len = r.len();
        let mut y = Vec::with_capacity(len);
        for i in 0..len as i64 {
            let t = t0 + i;
            let mut acc = 0.0;
            for (k, b) in self.num.iter().enumerate() {
                let tk = t - k as i64;
                if r.contains(tk) {
                    acc += b * r.at(tk)?;
                }
            }
            for (k, a) in self.den.iter().enumerate().skip(1) {
                let idx = i - k as i64;
                if idx >= 0 {
                    acc -= a * y[idx as usize];
                }
            }
            y.push(acc / self.den[0]);
        }
        Signal::from_flat(y, 1, t0)
    }
}

/// Max modulus over the roots of c_0 z^p + c_1 z^(p-1) + ... + c_p, via the
/// companion matrix.
fn max_root_modulus(coeffs: &[f64]) -> f64 {
    // strip trailing zeros: they contribute roots at the origin
    let mut c = coeffs.to_vec();
    while c.last() == Some(&0.0) {
        c.pop();
    }
    let p = c.len().saturating_sub(1);
    if p == 0 {
        return 0.0;
    }
    let mut companion = DMatrix::zeros(p, p);
    for j in 0..p {
        companion[(0, j)] = -c[j + 1] / c[0];
    }
    for i in 1..p {
        companion[(i, i - 1)] = 1.0;
    }
    companion
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// The virtual reference: the fictitious reference that would have produced
/// `y` through the reference model. Computed offline by running the inverse
/// difference equation with a relative-degree look-ahead; the settle margin
/// at the start and the look-ahead samples at the end are dropped.
pub fn virtual_reference(model: &ReferenceModel, y: &Signal) -> Result<Signal> {
    let d = model.relative_degree;
    let margin = model.settle_margin();
    if y.len() < margin + d + 1 {
        return Err(Error::Data(format!(
            "record of {} samples too short for inverse filtering (need > {})",
            y.len(),
            margin + d
        )));
    }
    // num with the pure delay removed: n_tilde(z^-1), n_tilde[0] != 0
    let n_tilde = &model.num[d..];
    let t0 = y.start_index();
    let t_last = y.end_index() - d as i64;
    let count = (t_last - t0 + 1) as usize;
    let mut r = Vec::with_capacity(count);
    for i in 0..count as i64 {
        let s = t0 + i;
        let mut acc = 0.0;
        for (k, a) in model.den.iter().enumerate() {
            let tk = s + d as i64 - k as i64;
            if y.contains(tk) {
                acc += a * y.at(tk)?;
            }
        }
        for (j, b) in n_tilde.iter().enumerate().skip(1) {
            let idx = i - j as i64;
            if idx >= 0 {
                acc -= b * r[idx as usize];
            }
        }
        r.push(acc / n_tilde[0]);
    }
    // drop the lead-in transient
    let valid: Vec<f64> = r.split_off(margin.min(count));
    if valid.is_empty() {
        return Err(Error::Data("no valid virtual-reference samples".into()));
    }
    Signal::from_flat(valid, 1, t0 + margin as i64)
}

/// Replay the inversion controller over the record: at each step the
/// regressor is built from the recorded output and recorded applied input,
/// and the command targets the next virtual-reference sample. Pure in the
/// controller.
pub fn filter_through_nic(
    ctrl: &NicController,
    r_v: &Signal,
    record: &DataRecord,
) -> Result<Signal> {
    let n = ctrl.model.n;
    let t_first = (record.y().start_index() + n as i64 - 1).max(r_v.start_index() - 1);
    let t_last = (r_v.end_index() - 1).min(record.y().end_index());
    if t_first > t_last {
        return Err(Error::Range(
            "virtual reference and record windows do not overlap".into(),
        ));
    }
    let mut u_nl = Vec::with_capacity((t_last - t_first + 1) as usize);
    for t in t_first..=t_last {
        let q = build_regressor(record.y(), record.u(), t, n)?;
        u_nl.push(ctrl.solve(&q, r_v.at(t + 1)?)?);
    }
    Signal::from_flat(u_nl, 1, t_first)
}

/// Incremental (extended PID) controller state for the recursion
/// u_t = u_{t-1} + sum_i theta_i e_{t-i}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PidController {
    pub theta: Vec<f64>,
    #[serde(skip)]
    u_prev: f64,
    #[serde(skip)]
    err_hist: VecDeque<f64>,
}

impl PidController {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::Config("theta must have at least one entry".into()));
        }
        let order = theta.len() - 1;
        Ok(Self {
            theta,
            u_prev: 0.0,
            err_hist: VecDeque::from(vec![0.0; order]),
        })
    }

    pub fn order(&self) -> usize {
        self.theta.len() - 1
    }

    /// Zero gains: the controller contributes nothing.
    pub fn disabled() -> Self {
        Self::new(vec![0.0]).expect("nonempty theta")
    }

    pub fn reset(&mut self) {
        self.u_prev = 0.0;
        self.err_hist = VecDeque::from(vec![0.0; self.order()]);
    }

    /// One step of the recursion; advances internal state.
    pub fn step(&mut self, e_t: f64) -> Result<f64> {
        if !e_t.is_finite() {
            return Err(Error::Signal(format!("non-finite tracking error {e_t}")));
        }
        let mut u = self.u_prev + self.theta[0] * e_t;
        for (i, e) in self.err_hist.iter().enumerate() {
            u += self.theta[i + 1] * e;
        }
        if self.order() > 0 {
            self.err_hist.pop_back();
            self.err_hist.push_front(e_t);
        }
        self.u_prev = u;
        Ok(u)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        Self::new(c.theta)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VrftResult {
    pub theta: Vec<f64>,
    /// Sum of squared fit errors.
    pub residual: f64,
    pub samples_used: usize,
    pub reference_model: RefModelSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefModelSpec {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
}

impl VrftResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Fit the PID parameters to reproduce `delta_u` from the virtual error.
///
/// The recursion makes the controller output linear in theta:
/// u_t(theta) = sum_i theta_i * c_{i,t} with c_{i,t} the running sum of
/// e_{tau-i}, zero-initialized at the window start. Solved by QR.
pub fn fit_pid(delta_u: &Signal, e_v: &Signal, n_theta: usize) -> Result<(Vec<f64>, f64, usize)> {
    let t0 = delta_u.start_index().max(e_v.start_index());
    let t1 = delta_u.end_index().min(e_v.end_index());
    if t0 > t1 {
        return Err(Error::Range("delta_u and e_v windows do not overlap".into()));
    }
    let rows = (t1 - t0 + 1) as usize;
    let cols = n_theta + 1;
    if rows <= cols {
        return Err(Error::Data(format!(
            "{rows} samples cannot determine {cols} parameters"
        )));
    }

    let ev_at = |t: i64| -> f64 {
        if t >= t0 && e_v.contains(t) {
            e_v.at(t).unwrap()
        } else {
            0.0 // zero-filled history before the window start
        }
    };

    let mut c = DMatrix::zeros(rows, cols);
    let mut rhs = DVector::zeros(rows);
    let mut running = vec![0.0f64; cols];
    for (row, t) in (t0..=t1).enumerate() {
        for i in 0..cols {
            running[i] += ev_at(t - i as i64);
            c[(row, i)] = running[i];
        }
        rhs[row] = delta_u.at(t)?;
    }

    let qr = c.clone().qr();
    let r = qr.r();
    let max_diag = (0..cols).map(|k| r[(k, k)].abs()).fold(0.0f64, f64::max);
    let tol = max_diag * 1e-10 * (rows as f64);
    if (0..cols).any(|k| r[(k, k)].abs() <= tol) {
        return Err(Error::Conditioning(
            "virtual-error regressor matrix is rank-deficient".into(),
        ));
    }
    let qtb = qr.q().transpose() * &rhs;
    let theta = r
        .solve_upper_triangular(&qtb.rows(0, cols).into_owned())
        .ok_or_else(|| Error::Conditioning("singular triangular factor".into()))?;
    let residual = (&c * &theta - &rhs).norm_squared();
    Ok((theta.iter().copied().collect(), residual, rows))
}

/// The full linear-controller design: virtual reference, virtual error, NIC
/// replay, and the least-squares fit.
pub fn design_pid(
    record: &DataRecord,
    nic: &NicController,
    reference: &ReferenceModel,
    n_theta: usize,
) -> Result<(VrftResult, PidController)> {
    let r_v = virtual_reference(reference, record.y())?;
    let u_nl = filter_through_nic(nic, &r_v, record)?;

    // align everything on the overlap of the valid windows
    let t0 = r_v.start_index().max(u_nl.start_index());
    let t1 = r_v.end_index().min(u_nl.end_index()).min(record.u().end_index());
    let mut e_v = Vec::new();
    let mut delta_u = Vec::new();
    for t in t0..=t1 {
        e_v.push(r_v.at(t)? - record.y().at(t)?);
        delta_u.push(record.u().at(t)? - u_nl.at(t)?);
    }
    let e_v = Signal::from_flat(e_v, 1, t0)?;
    let delta_u = Signal::from_flat(delta_u, 1, t0)?;

    let (theta, residual, samples_used) = fit_pid(&delta_u, &e_v, n_theta)?;
    let pid = PidController::new(theta.clone())?;
    Ok((
        VrftResult {
            theta,
            residual,
            samples_used,
            reference_model: RefModelSpec {
                num: reference.num.clone(),
                den: reference.den.clone(),
            },
        },
        pid,
    ))
}
