//! Empirical stability certificates.
//!
//! The constants entering the finite-gain analysis are estimated by seeded
//! sampling and probing; they are lower bounds, never proofs, and the
//! certificate records the sampling provenance alongside every number.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nic::NicController;
use crate::signals::{lp_norm, Regressor, Signal};
use crate::simloop::{metrics, simulate_closed_loop, NoiseSpec, Plant, RunConfig, Trace};
use crate::sysid::{predict, RegressionModel};
use crate::vrft::PidController;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    /// Lipschitz constant of the model-plant residue w.r.t. the output lags.
    pub gamma_y: f64,
    /// Declared bound on the plant's noise gain row.
    pub gamma_xi: f64,
    /// Cascade gains: ||yhat|| <= gain_y ||y|| + gain_r ||r|| + offset_f.
    pub gain_y: f64,
    pub gain_r: f64,
    pub offset_f: f64,
    /// Error-system constants: ||ehat|| <= gain_y ||y|| + gain_s ||r|| + offset_e.
    pub gain_s: f64,
    pub offset_e: f64,
    /// max over u of |residue(0, u)|.
    pub delta_bar: f64,
    /// sup of |residue| over the whole certified domain.
    pub delta_inf: f64,
    /// offset_f + delta_bar.
    pub lambda_g: f64,
    pub verdicts: Verdicts,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdicts {
    /// gamma_y <= 1.
    pub residue_contraction: bool,
    /// gain_y < 1 - gamma_y.
    pub cascade_margin: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub gamma_samples: usize,
    pub gamma_seed: u64,
    pub grid_per_axis: usize,
    pub probe_horizon: usize,
    pub probe_seed: u64,
    pub probe_count: usize,
    pub degenerate_probes: bool,
}

impl StabilityCertificate {
    pub fn recompute_verdicts(&self) -> Verdicts {
        Verdicts {
            residue_contraction: self.gamma_y <= 1.0,
            cascade_margin: self.gain_y < 1.0 - self.gamma_y,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// The residue between the noise-free plant and the model, evaluated on
/// matching lag vectors (newest first).
fn residue(model: &RegressionModel, plant: &Plant, y_lags: &[f64], u_lags: &[f64]) -> Result<f64> {
    let q = Regressor::from_lags(y_lags, &u_lags[1..])?;
    let f = predict(model, &q, u_lags[0])?;
    Ok(plant.noise_free(y_lags, u_lags) - f)
}

/// Seeded Halton sequence with a random shift, one base per dimension.
struct Halton {
    bases: Vec<u64>,
    shifts: Vec<f64>,
    index: u64,
}

const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

impl Halton {
    fn new(dims: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let bases = (0..dims).map(|d| PRIMES[d % PRIMES.len()]).collect();
        let shifts = (0..dims).map(|_| rng.gen_range(0.0..1.0)).collect();
        Self {
            bases,
            shifts,
            index: 0,
        }
    }

    fn next_point(&mut self) -> Vec<f64> {
        self.index += 1;
        self.bases
            .iter()
            .zip(&self.shifts)
            .map(|(&b, &s)| {
                let mut i = self.index;
                let mut f = 1.0;
                let mut v = 0.0;
                while i > 0 {
                    f /= b as f64;
                    v += f * (i % b) as f64;
                    i /= b;
                }
                (v + s).fract()
            })
            .collect()
    }
}

fn scale(x: f64, lo: f64, hi: f64) -> f64 {
    lo + x * (hi - lo)
}

/// Sampled lower bound on the Lipschitz constant of the residue w.r.t. the
/// output lags: max |residue(y,u) - residue(y',u)| / ||y - y'||_inf over
/// seeded low-discrepancy draws from Y^n x Y^n x U^n.
pub fn estimate_gamma_y(
    model: &RegressionModel,
    plant: &Plant,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples < 100 {
        return Err(Error::Sampling(format!(
            "need at least 100 samples, got {samples}"
        )));
    }
    if model.n != plant.n {
        return Err(Error::Shape(format!(
            "model order {} != plant order {}",
            model.n, plant.n
        )));
    }
    let n = plant.n;
    let mut halton = Halton::new(3 * n, seed);
    let mut best = 0.0f64;
    let mut usable = 0usize;
    for _ in 0..samples {
        let p = halton.next_point();
        let y: Vec<f64> = (0..n).map(|k| scale(p[k], plant.y_min, plant.y_max)).collect();
        let y2: Vec<f64> = (0..n)
            .map(|k| scale(p[n + k], plant.y_min, plant.y_max))
            .collect();
        let u: Vec<f64> = (0..n)
            .map(|k| scale(p[2 * n + k], plant.u_min, plant.u_max))
            .collect();
        let dist = y
            .iter()
            .zip(&y2)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if dist == 0.0 {
            continue;
        }
        usable += 1;
        let d1 = residue(model, plant, &y, &u)?;
        let d2 = residue(model, plant, &y2, &u)?;
        best = best.max((d1 - d2).abs() / dist);
    }
    if usable == 0 {
        return Err(Error::Sampling("no usable sample pairs".into()));
    }
    Ok(best)
}

/// Grid maxima of the residue: (delta_bar over U^n at y = 0, delta_inf over
/// Y^n x U^n). Per-axis density is reduced when the dimension would blow the
/// evaluation budget.
pub fn estimate_delta_bounds(
    model: &RegressionModel,
    plant: &Plant,
    grid_per_axis: usize,
) -> Result<(f64, f64)> {
    if model.n != plant.n {
        return Err(Error::Shape(format!(
            "model order {} != plant order {}",
            model.n, plant.n
        )));
    }
    let n = plant.n;
    const BUDGET: usize = 200_000;

    let axis = |dims: usize| -> usize {
        let mut g = grid_per_axis.max(2);
        while g.pow(dims as u32) > BUDGET && g > 2 {
            g -= 1;
        }
        g
    };

    let grid_max = |dims: usize,
                    g: usize,
                    eval: &dyn Fn(&[f64]) -> Result<f64>|
     -> Result<f64> {
        let mut idx = vec![0usize; dims];
        let mut point = vec![0.0f64; dims];
        let mut best = 0.0f64;
        loop {
            for (d, &i) in idx.iter().enumerate() {
                point[d] = i as f64 / (g - 1) as f64;
            }
            best = best.max(eval(&point)?.abs());
            let mut d = 0;
            loop {
                idx[d] += 1;
                if idx[d] < g {
                    break;
                }
                idx[d] = 0;
                d += 1;
                if d == dims {
                    return Ok(best);
                }
            }
        }
    };

    let zeros = vec![0.0; n];
    let g_u = axis(n);
    let delta_bar = grid_max(n, g_u, &|p: &[f64]| {
        let u: Vec<f64> = p.iter().map(|&x| scale(x, plant.u_min, plant.u_max)).collect();
        residue(model, plant, &zeros, &u)
    })?;

    let g_yu = axis(2 * n);
    let delta_inf = grid_max(2 * n, g_yu, &|p: &[f64]| {
        let y: Vec<f64> = p[..n]
            .iter()
            .map(|&x| scale(x, plant.y_min, plant.y_max))
            .collect();
        let u: Vec<f64> = p[n..]
            .iter()
            .map(|&x| scale(x, plant.u_min, plant.u_max))
            .collect();
        residue(model, plant, &y, &u)
    })?;

    Ok((delta_bar, delta_inf.max(delta_bar)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub y_amplitudes: Vec<f64>,
    pub r_amplitudes: Vec<f64>,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            y_amplitudes: vec![0.25, 0.5, 1.0, 2.0],
            r_amplitudes: vec![0.25, 0.5, 1.0, 2.0],
            horizon: 200,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeGains {
    pub gain_y: f64,
    pub gain_r: f64,
    pub offset_f: f64,
    pub gain_s: f64,
    pub offset_e: f64,
    pub degenerate: bool,
    pub probe_count: usize,
}

/// Drive the controller+model cascade with injected bounded output and
/// reference sequences, then fit the smallest finite-gain constants covering
/// every probe.
pub fn estimate_cascade_gains(
    model: &RegressionModel,
    nic: &NicController,
    pid: &PidController,
    probe: &ProbeConfig,
) -> Result<CascadeGains> {
    use rand::{Rng, SeedableRng};
    let n = model.n;
    let horizon = probe.horizon.max(2 * n + 2);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(probe.seed);

    // (||y||, ||r||, ||yhat||, ||ehat||) per probe
    let mut rows: Vec<[f64; 4]> = Vec::new();
    for &ay in &probe.y_amplitudes {
        for &ar in &probe.r_amplitudes {
            let y: Vec<f64> = (0..horizon).map(|_| rng.gen_range(-1.0..1.0) * ay).collect();
            let r: Vec<f64> = (0..horizon).map(|_| rng.gen_range(-1.0..1.0) * ar).collect();

            let mut pid = pid.clone();
            pid.reset();
            let mut u_hist = vec![0.0f64; n.max(1)];
            let mut yhat_norm = 0.0f64;
            let mut ehat_norm = 0.0f64;
            let mut yhat_prev: Option<f64> = None;
            for t in 0..horizon - 1 {
                let e_t = r[t] - y[t];
                let u_lin = pid.step(e_t)?;
                let y_lags: Vec<f64> = (0..n).map(|k| if t >= k { y[t - k] } else { 0.0 }).collect();
                let q = Regressor::from_lags(&y_lags, &u_hist[..n - 1])?;
                let u_nl = nic.solve(&q, r[t + 1])?;
                let u_t = (u_nl + u_lin).clamp(nic.u_min, nic.u_max);
                let yhat_next = predict(model, &q, u_t)?;
                u_hist.rotate_right(1);
                u_hist[0] = u_t;
                yhat_norm = yhat_norm.max(yhat_next.abs());
                if let Some(yh) = yhat_prev {
                    ehat_norm = ehat_norm.max((r[t] - yh).abs());
                }
                yhat_prev = Some(yhat_next);
            }

            let y_norm = lp_norm(&y, f64::INFINITY)?;
            let r_norm = lp_norm(&r, f64::INFINITY)?;
            if !yhat_norm.is_finite() {
                return Err(Error::Validation(
                    "cascade output diverged on a bounded probe".into(),
                ));
            }
            rows.push([y_norm, r_norm, yhat_norm, ehat_norm]);
        }
    }

    let degenerate = rows.iter().all(|r| r[2] < 1e-14 && r[3] < 1e-14);
    let f_rows: Vec<[f64; 3]> = rows.iter().map(|r| [r[0], r[1], r[2]]).collect();
    let e_rows: Vec<[f64; 3]> = rows.iter().map(|r| [r[0], r[1], r[3]]).collect();
    let (gy_f, gr, lf) = fit_gain_plane(&f_rows);
    let (gy_e, gs, le) = fit_gain_plane(&e_rows);

    Ok(CascadeGains {
        gain_y: gy_f.max(gy_e),
        gain_r: gr,
        offset_f: lf,
        gain_s: gs,
        offset_e: le,
        degenerate,
        probe_count: rows.len(),
    })
}

/// Smallest nonnegative (g1, g2, c) with g1*a_i + g2*b_i + c >= o_i for all
/// probes, minimizing the implied bound at the largest probe amplitudes.
/// Three variables, so the LP is solved by vertex enumeration.
fn fit_gain_plane(rows: &[[f64; 3]]) -> (f64, f64, f64) {
    let max_a = rows.iter().map(|r| r[0]).fold(0.0f64, f64::max);
    let max_b = rows.iter().map(|r| r[1]).fold(0.0f64, f64::max);
    let cost = [max_a.max(1e-9), max_b.max(1e-9), 1.0];

    // constraints as (coef, rhs) with coef . x >= rhs
    let mut cons: Vec<([f64; 3], f64)> = rows.iter().map(|r| ([r[0], r[1], 1.0], r[2])).collect();
    cons.push(([1.0, 0.0, 0.0], 0.0));
    cons.push(([0.0, 1.0, 0.0], 0.0));
    cons.push(([0.0, 0.0, 1.0], 0.0));

    let feasible = |x: &[f64; 3]| -> bool {
        cons.iter().all(|(c, rhs)| {
            c[0] * x[0] + c[1] * x[1] + c[2] * x[2] >= rhs - 1e-9 * (1.0 + rhs.abs())
        })
    };

    let mut best: Option<([f64; 3], f64)> = None;
    let m = cons.len();
    for i in 0..m {
        for j in i + 1..m {
            for k in j + 1..m {
                if let Some(x) = solve3(&cons[i].0, cons[i].1, &cons[j].0, cons[j].1, &cons[k].0, cons[k].1)
                {
                    if !feasible(&x) {
                        continue;
                    }
                    let c = cost[0] * x[0] + cost[1] * x[1] + cost[2] * x[2];
                    // tie-break toward small offset, then small output gain
                    let better = match &best {
                        None => true,
                        Some((bx, bc)) => {
                            c < bc - 1e-12
                                || (c <= bc + 1e-12
                                    && (x[2], x[0], x[1]) < (bx[2], bx[0], bx[1]))
                        }
                    };
                    if better {
                        best = Some((x, c));
                    }
                }
            }
        }
    }
    let x = best.map(|(x, _)| x).unwrap_or([0.0, 0.0, 0.0]);
    (x[0].max(0.0), x[1].max(0.0), x[2].max(0.0))
}

fn solve3(
    a: &[f64; 3],
    ra: f64,
    b: &[f64; 3],
    rb: f64,
    c: &[f64; 3],
    rc: f64,
) -> Option<[f64; 3]> {
    let det = a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
        + a[2] * (b[0] * c[1] - b[1] * c[0]);
    if det.abs() < 1e-12 {
        return None;
    }
    let dx = ra * (b[1] * c[2] - b[2] * c[1]) - a[1] * (rb * c[2] - b[2] * rc)
        + a[2] * (rb * c[1] - b[1] * rc);
    let dy = a[0] * (rb * c[2] - b[2] * rc) - ra * (b[0] * c[2] - b[2] * c[0])
        + a[2] * (b[0] * rc - rb * c[0]);
    let dz = a[0] * (b[1] * rc - rb * c[1]) - a[1] * (b[0] * rc - rb * c[0])
        + ra * (b[0] * c[1] - b[1] * c[0]);
    Some([dx / det, dy / det, dz / det])
}

/// The two closed-loop bounds, evaluated at given reference and disturbance
/// sup norms.
pub fn theorem1_bounds(
    cert: &StabilityCertificate,
    r_norm: f64,
    xi_norm: f64,
) -> Result<(f64, f64)> {
    if cert.gain_y + cert.gamma_y >= 1.0 {
        return Err(Error::AssumptionViolation(format!(
            "gain_y + gamma_y = {} >= 1: the output bound is undefined",
            cert.gain_y + cert.gamma_y
        )));
    }
    let y_bound = (cert.gain_r * r_norm + cert.gamma_xi * xi_norm + cert.lambda_g)
        / (1.0 - cert.gain_y - cert.gamma_y);
    let gain_er = cert.gain_y + cert.gain_s;
    let e_bound = (gain_er * r_norm + cert.gamma_xi * xi_norm + cert.offset_e + cert.delta_inf)
        / (1.0 - cert.gain_y);
    Ok((y_bound, e_bound))
}

/// Assemble the full certificate for a model/controller pair on a plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyConfig {
    pub gamma_samples: usize,
    pub gamma_seed: u64,
    pub grid_per_axis: usize,
    pub probe: ProbeConfig,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            gamma_samples: 10_000,
            gamma_seed: 17,
            grid_per_axis: 50,
            probe: ProbeConfig::default(),
        }
    }
}

pub fn build_certificate(
    model: &RegressionModel,
    plant: &Plant,
    nic: &NicController,
    pid: &PidController,
    cfg: &CertifyConfig,
) -> Result<StabilityCertificate> {
    let gamma_y = estimate_gamma_y(model, plant, cfg.gamma_samples, cfg.gamma_seed)?;
    let (delta_bar, delta_inf) = estimate_delta_bounds(model, plant, cfg.grid_per_axis)?;
    let gains = estimate_cascade_gains(model, nic, pid, &cfg.probe)?;
    let lambda_g = gains.offset_f + delta_bar;
    let cert = StabilityCertificate {
        gamma_y,
        gamma_xi: plant.gamma_xi(),
        gain_y: gains.gain_y,
        gain_r: gains.gain_r,
        offset_f: gains.offset_f,
        gain_s: gains.gain_s,
        offset_e: gains.offset_e,
        delta_bar,
        delta_inf,
        lambda_g,
        verdicts: Verdicts {
            residue_contraction: gamma_y <= 1.0,
            cascade_margin: gains.gain_y < 1.0 - gamma_y,
        },
        provenance: Provenance {
            gamma_samples: cfg.gamma_samples,
            gamma_seed: cfg.gamma_seed,
            grid_per_axis: cfg.grid_per_axis,
            probe_horizon: cfg.probe.horizon,
            probe_seed: cfg.probe.seed,
            probe_count: gains.probe_count,
            degenerate_probes: gains.degenerate,
        },
    };
    Ok(cert)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepScenario {
    pub step_amplitude: f64,
    pub step_time: i64,
    pub disturbance_amplitude: f64,
    pub horizon: usize,
    pub settle_window: usize,
}

impl Default for StepScenario {
    fn default() -> Self {
        Self {
            step_amplitude: 1.0,
            step_time: 10,
            disturbance_amplitude: 0.05,
            horizon: 1000,
            settle_window: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateReport {
    pub step_verdict: Verdict,
    pub step_steady_state_error: f64,
    pub disturbance_verdict: Verdict,
    pub disturbance_steady_state_error: f64,
    /// Steady-state error of the same step run with the linear controller
    /// disabled, for contrast.
    pub contrast_steady_state_error: f64,
    pub tol: f64,
}

/// Behavioral check of the zero steady-state-error claims: a reference step
/// and a constant disturbance must both settle to zero error when the
/// integrator is active.
pub fn verify_theorem2(
    plant: &Plant,
    nic: &NicController,
    pid: &PidController,
    scenario: &StepScenario,
    tol: f64,
) -> Result<SteadyStateReport> {
    if pid.theta.iter().all(|t| *t == 0.0) {
        return Err(Error::Contract(
            "steady-state verification requires a nonzero linear controller".into(),
        ));
    }
    let horizon = scenario.horizon;
    let n = plant.n;
    let step_ref = Signal::from_scalars(
        (1..=horizon as i64 + 1)
            .map(|t| {
                if t >= scenario.step_time {
                    scenario.step_amplitude
                } else {
                    0.0
                }
            })
            .collect(),
        1,
    )?;
    let const_ref = Signal::from_scalars(vec![scenario.step_amplitude; horizon + 1], 1)?;

    let run = |reference: Signal, noise: NoiseSpec, pid: &PidController| -> Result<Trace> {
        let cfg = RunConfig {
            horizon,
            y0: vec![0.0; n],
            reference,
            noise,
            seed: 0,
        };
        simulate_closed_loop(plant, nic, pid, &cfg)
    };

    let judge = |trace: &Trace| -> Result<(Verdict, f64)> {
        let m = metrics(trace, scenario.settle_window)?;
        if m.steady_state_error < tol {
            return Ok((Verdict::Pass, m.steady_state_error));
        }
        // still settling? compare the last window against the one before it
        let e = trace.e.samples();
        let w = scenario.settle_window.max(1);
        if e.len() >= 2 * w {
            let prev: f64 =
                e[e.len() - 2 * w..e.len() - w].iter().map(|v| v.abs()).sum::<f64>() / w as f64;
            if m.steady_state_error < 0.9 * prev {
                return Ok((Verdict::Inconclusive, m.steady_state_error));
            }
        }
        Ok((Verdict::Fail, m.steady_state_error))
    };

    let step_trace = run(step_ref.clone(), NoiseSpec::Zero, pid)?;
    let (step_verdict, step_sse) = judge(&step_trace)?;

    let dist_trace = run(
        const_ref,
        NoiseSpec::Constant {
            amplitude: scenario.disturbance_amplitude,
            start: horizon as i64 / 2,
        },
        pid,
    )?;
    let (dist_verdict, dist_sse) = judge(&dist_trace)?;

    let contrast_trace = run(step_ref, NoiseSpec::Zero, &PidController::disabled())?;
    let contrast = metrics(&contrast_trace, scenario.settle_window)?.steady_state_error;

    Ok(SteadyStateReport {
        step_verdict,
        step_steady_state_error: step_sse,
        disturbance_verdict: dist_verdict,
        disturbance_steady_state_error: dist_sse,
        contrast_steady_state_error: contrast,
        tol,
    })
}
