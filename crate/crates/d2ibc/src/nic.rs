//! Nonlinear inversion controller: at each step, minimize a normalized
//! tracking-plus-effort objective over the admissible input interval.
//!
//! Affine-in-u models admit an exact stationary-point solve; everything else
//! goes through a coarse grid followed by golden-section refinement.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::{DataRecord, Regressor};
use crate::sysid::{affine_decompose, predict, RegressionModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub grid_points: usize,
    pub refine_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            grid_points: 101,
            refine_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NicController {
    pub model: RegressionModel,
    pub mu: f64,
    pub rho_y: f64,
    pub rho_u: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub solver: SolverConfig,
    #[serde(skip)]
    past_y: VecDeque<f64>,
    #[serde(skip)]
    past_u: VecDeque<f64>,
    /// Times the objective was flat in u and the tie was broken toward 0.
    #[serde(skip)]
    pub flat_objective_count: u64,
}

/// Normalization constants: squared 2-norms of the record's output and input
/// channels.
pub fn rho_constants(record: &DataRecord) -> Result<(f64, f64)> {
    let rho_y: f64 = record.y().iter_scalar().map(|v| v * v).sum();
    let rho_u: f64 = record.u().iter_scalar().map(|v| v * v).sum();
    if rho_y == 0.0 {
        return Err(Error::DegenerateNormalization(
            "output channel is identically zero".into(),
        ));
    }
    if rho_u == 0.0 {
        return Err(Error::DegenerateNormalization(
            "input channel is identically zero".into(),
        ));
    }
    Ok((rho_y, rho_u))
}

impl NicController {
    pub fn new(
        model: RegressionModel,
        mu: f64,
        rho_y: f64,
        rho_u: f64,
        u_min: f64,
        u_max: f64,
        solver: SolverConfig,
    ) -> Result<Self> {
        if !(u_min < u_max) {
            return Err(Error::Config(format!(
                "input interval [{u_min}, {u_max}] is empty"
            )));
        }
        if !(rho_y > 0.0) || !(rho_u > 0.0) {
            return Err(Error::Config("normalization constants must be positive".into()));
        }
        if !(mu >= 0.0) {
            return Err(Error::Config("mu must be nonnegative".into()));
        }
        if solver.grid_points < 3 {
            return Err(Error::Config("grid_points must be >= 3".into()));
        }
        if !(solver.refine_tol > 0.0) {
            return Err(Error::Config("refine_tol must be positive".into()));
        }
        let n = model.n;
        Ok(Self {
            model,
            mu,
            rho_y,
            rho_u,
            u_min,
            u_max,
            solver,
            past_y: VecDeque::with_capacity(n),
            past_u: VecDeque::with_capacity(n),
            flat_objective_count: 0,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ctrl: Self = serde_json::from_str(s)?;
        Self::new(
            ctrl.model, ctrl.mu, ctrl.rho_y, ctrl.rho_u, ctrl.u_min, ctrl.u_max, ctrl.solver,
        )
    }

    fn clip(&self, u: f64) -> f64 {
        u.clamp(self.u_min, self.u_max)
    }

    /// The step objective: (1/rho_y)(r - f(q, u))^2 + (mu/rho_u) u^2.
    pub fn objective(&self, q: &Regressor, r_next: f64, u: f64) -> Result<f64> {
        let pred = predict(&self.model, q, u)?;
        let track = r_next - pred;
        Ok(track * track / self.rho_y + self.mu * u * u / self.rho_u)
    }

    /// Pure solve of the constrained step problem for a given regressor.
    pub fn solve(&self, q: &Regressor, r_next: f64) -> Result<f64> {
        Ok(self.solve_inner(q, r_next)?.0)
    }

    fn solve_inner(&self, q: &Regressor, r_next: f64) -> Result<(f64, bool)> {
        if self.model.affine_in_u {
            let (a, b) = affine_decompose(&self.model, q)?;
            let denom = b * b / self.rho_y + self.mu / self.rho_u;
            if denom == 0.0 {
                // flat objective: smallest-|u| tie-break
                return Ok((self.clip(0.0), true));
            }
            let u_star = b * (r_next - a) / self.rho_y / denom;
            return Ok((self.clip(u_star), false));
        }
        self.solve_grid(q, r_next).map(|u| (u, false))
    }

    /// Coarse grid over U, then golden-section refinement around the best
    /// cell down to `refine_tol` width.
    fn solve_grid(&self, q: &Regressor, r_next: f64) -> Result<f64> {
        let m = self.solver.grid_points;
        let span = self.u_max - self.u_min;
        let mut best_u = self.u_min;
        let mut best_j = f64::INFINITY;
        let mut best_i = 0usize;
        for i in 0..m {
            let u = self.u_min + span * i as f64 / (m - 1) as f64;
            let j = self.objective(q, r_next, u)?;
            if better(j, u, best_j, best_u) {
                best_j = j;
                best_u = u;
                best_i = i;
            }
        }
        let lo = self.u_min + span * best_i.saturating_sub(1) as f64 / (m - 1) as f64;
        let hi = self.u_min + span * (best_i + 1).min(m - 1) as f64 / (m - 1) as f64;
        let (u_ref, j_ref) = golden_section(
            |u| self.objective(q, r_next, u).unwrap_or(f64::INFINITY),
            lo,
            hi,
            self.solver.refine_tol,
        );
        if better(j_ref, u_ref, best_j, best_u) {
            best_u = u_ref;
        }
        Ok(best_u)
    }

    /// Push observed plant output into the regressor history.
    pub fn observe_output(&mut self, y_t: f64) {
        if self.past_y.len() == self.model.n {
            self.past_y.pop_back();
        }
        self.past_y.push_front(y_t);
    }

    /// Overwrite the most recent input-history entry with the input actually
    /// applied to the plant (the sum of both controllers after saturation).
    pub fn note_applied_input(&mut self, u_t: f64) {
        if let Some(front) = self.past_u.front_mut() {
            *front = u_t;
        }
    }

    fn push_input(&mut self, u_t: f64) {
        if self.past_u.len() == self.model.n.saturating_sub(1).max(1) {
            self.past_u.pop_back();
        }
        self.past_u.push_front(u_t);
    }

    /// Regressor from the internal history buffers.
    pub fn regressor(&self) -> Result<Regressor> {
        let n = self.model.n;
        if self.past_y.len() < n || self.past_u.len() < n - 1 {
            return Err(Error::Range(format!(
                "history too short: {} outputs / {} inputs for order {n}",
                self.past_y.len(),
                self.past_u.len()
            )));
        }
        let y: Vec<f64> = self.past_y.iter().take(n).copied().collect();
        let u: Vec<f64> = self.past_u.iter().take(n - 1).copied().collect();
        Regressor::from_lags(&y, &u)
    }

    /// Solve for the next command and record it in the input history.
    pub fn command(&mut self, r_next: f64, q: &Regressor) -> Result<f64> {
        let (u, flat) = self.solve_inner(q, r_next)?;
        if flat {
            self.flat_objective_count += 1;
        }
        self.push_input(u);
        Ok(u)
    }

    pub fn reset_state(&mut self) {
        self.past_y.clear();
        self.past_u.clear();
        self.flat_objective_count = 0;
    }
}

/// Lexicographic (objective, |u|, u) comparison for deterministic
/// tie-breaking on flat or multimodal objectives.
fn better(j: f64, u: f64, best_j: f64, best_u: f64) -> bool {
    if j < best_j {
        return true;
    }
    if j > best_j {
        return false;
    }
    (u.abs(), u) < (best_u.abs(), best_u)
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while (b - a).abs() > tol {
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
    }
    if f1 < f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}
