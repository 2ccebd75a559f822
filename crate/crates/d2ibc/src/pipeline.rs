//! Config-driven pipeline: data generation, identification, controller
//! design, simulation, certification, reporting.
//!
//! Every stage reads its inputs from the artifact directory and rewrites its
//! outputs deterministically, so stages are individually invokable and
//! resumable, and a rerun with the same config and seeds is byte-identical.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::certify::{
    build_certificate, theorem1_bounds, verify_theorem2, CertifyConfig, ProbeConfig,
    StabilityCertificate, StepScenario, SteadyStateReport,
};
use crate::error::{Error, Result};
use crate::nic::{rho_constants, NicController, SolverConfig};
use crate::signals::{load_record, DataRecord, Signal};
use crate::simloop::{
    feasible_reference, metrics, simulate_closed_loop, simulate_open_loop, MetricsReport,
    NoiseSpec, Plant, RunConfig, Trace,
};
use crate::sysid::{identify, IdConfig, RegressionModel};
use crate::vrft::{design_pid, PidController, ReferenceModel, VrftResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub plant: PlantSpec,
    pub excitation: ExcitationSpec,
    pub identification: IdConfig,
    pub nic: NicSpec,
    pub reference_model: ReferenceModelSpec,
    pub pid: PidSpec,
    pub runs: Vec<RunSpec>,
    pub certificate: CertificateSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    /// One of the bundled benchmarks: linear (a), mildly_nonlinear (b),
    /// rational (c).
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationSpec {
    pub amplitude: f64,
    pub length: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NicSpec {
    pub mu: f64,
    pub grid_points: usize,
    pub refine_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceModelSpec {
    /// First-order lag pole; ignored when num/den are given explicitly.
    pub lambda: Option<f64>,
    pub num: Option<Vec<f64>>,
    pub den: Option<Vec<f64>>,
}

impl ReferenceModelSpec {
    pub fn build(&self) -> Result<ReferenceModel> {
        match (&self.num, &self.den) {
            (Some(num), Some(den)) => ReferenceModel::new(num.clone(), den.clone()),
            (None, None) => ReferenceModel::first_order(self.lambda.unwrap_or(0.6)),
            _ => Err(Error::Config(
                "reference model needs both num and den, or neither".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PidSpec {
    pub n_theta: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub name: String,
    pub horizon: usize,
    pub reference: ReferenceSpec,
    pub noise: NoiseSpec,
    pub seed: u64,
    pub settle_window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceSpec {
    Step { amplitude: f64, time: i64 },
    Constant { amplitude: f64 },
    /// Open-loop response of the plant to a seeded bounded input, so the
    /// reference is a solution of the system.
    Feasible { amplitude: f64, seed: u64 },
}

impl ReferenceSpec {
    fn realize(&self, plant: &Plant, horizon: usize) -> Result<Signal> {
        match self {
            ReferenceSpec::Step { amplitude, time } => Signal::from_scalars(
                (1..=horizon as i64 + 1)
                    .map(|t| if t >= *time { *amplitude } else { 0.0 })
                    .collect(),
                1,
            ),
            ReferenceSpec::Constant { amplitude } => {
                Signal::from_scalars(vec![*amplitude; horizon + 1], 1)
            }
            ReferenceSpec::Feasible { amplitude, seed } => {
                let probe = NoiseSpec::Uniform {
                    amplitude: *amplitude,
                    seed: *seed,
                }
                .realize(horizon + 2)?;
                feasible_reference(plant, &probe, &vec![0.0; plant.n], horizon)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateSpec {
    pub gamma_samples: usize,
    pub gamma_seed: u64,
    pub grid_per_axis: usize,
    pub probe_horizon: usize,
    pub probe_seed: u64,
    pub y_amplitudes: Vec<f64>,
    pub r_amplitudes: Vec<f64>,
    /// Norms at which the certificate evaluates the closed-loop bounds.
    pub r_norm: f64,
    pub xi_norm: f64,
    pub steady_state: StepScenario,
    pub steady_state_tol: f64,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        Plant::by_name(&self.plant.name)?;
        if self.excitation.length < 10 {
            return Err(Error::Config("excitation length must be >= 10".into()));
        }
        if !(self.excitation.amplitude > 0.0) {
            return Err(Error::Config("excitation amplitude must be positive".into()));
        }
        self.reference_model.build()?;
        for run in &self.runs {
            if run.settle_window >= run.horizon {
                return Err(Error::Config(format!(
                    "run '{}': settle window must be below the horizon",
                    run.name
                )));
            }
        }
        Ok(())
    }

    /// Derive every stage seed from one base seed.
    pub fn override_seeds(&mut self, base: u64) {
        self.excitation.seed = base;
        self.certificate.gamma_seed = base.wrapping_add(1);
        self.certificate.probe_seed = base.wrapping_add(2);
        for (k, run) in self.runs.iter_mut().enumerate() {
            run.seed = base.wrapping_add(10 + k as u64);
            if let NoiseSpec::Uniform { seed, .. } = &mut run.noise {
                *seed = run.seed;
            }
            if let ReferenceSpec::Feasible { seed, .. } = &mut run.reference {
                *seed = base.wrapping_add(100 + k as u64);
            }
        }
    }

    /// The bundled demo: plant (b) end to end.
    pub fn demo() -> Self {
        Self {
            plant: PlantSpec {
                name: "mildly_nonlinear".into(),
            },
            excitation: ExcitationSpec {
                amplitude: 1.0,
                length: 400,
                seed: 1,
            },
            identification: IdConfig {
                n: 2,
                degree: 2,
                ridge: 1e-6,
                affine_in_u: false,
            },
            nic: NicSpec {
                mu: 0.01,
                grid_points: 101,
                refine_tol: 1e-10,
            },
            reference_model: ReferenceModelSpec {
                lambda: Some(0.6),
                num: None,
                den: None,
            },
            pid: PidSpec { n_theta: 1 },
            runs: vec![
                RunSpec {
                    name: "step".into(),
                    horizon: 1000,
                    reference: ReferenceSpec::Step {
                        amplitude: 1.0,
                        time: 10,
                    },
                    noise: NoiseSpec::Zero,
                    seed: 10,
                    settle_window: 50,
                },
                RunSpec {
                    name: "feasible".into(),
                    horizon: 500,
                    reference: ReferenceSpec::Feasible {
                        amplitude: 0.8,
                        seed: 100,
                    },
                    noise: NoiseSpec::Zero,
                    seed: 11,
                    settle_window: 50,
                },
            ],
            certificate: CertificateSpec {
                gamma_samples: 10_000,
                gamma_seed: 17,
                grid_per_axis: 40,
                probe_horizon: 200,
                probe_seed: 7,
                y_amplitudes: vec![0.25, 0.5, 1.0, 2.0],
                r_amplitudes: vec![0.25, 0.5, 1.0, 2.0],
                r_norm: 1.0,
                xi_norm: 0.0,
                steady_state: StepScenario::default(),
                steady_state_tol: 1e-4,
            },
        }
    }
}

/// Artifact paths inside the output directory.
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.dir.join("data.csv")
    }
    pub fn model(&self) -> PathBuf {
        self.dir.join("model.json")
    }
    pub fn nic(&self) -> PathBuf {
        self.dir.join("nic.json")
    }
    pub fn pid(&self) -> PathBuf {
        self.dir.join("pid.json")
    }
    pub fn trace(&self, run: &str) -> PathBuf {
        self.dir.join(format!("trace_{run}.csv"))
    }
    pub fn certificate(&self) -> PathBuf {
        self.dir.join("certificate.json")
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.json")
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

/// Stage 1: open-loop data generation with seeded uniform excitation.
pub fn stage_gen(cfg: &PipelineConfig, out: &Artifacts) -> Result<DataRecord> {
    let plant = Plant::by_name(&cfg.plant.name)?;
    let l = cfg.excitation.length;
    let excitation = NoiseSpec::Uniform {
        amplitude: cfg.excitation.amplitude,
        seed: cfg.excitation.seed,
    }
    .realize(l)?;
    let zero = Signal::from_scalars(vec![0.0; l], 1)?;
    let y = simulate_open_loop(&plant, &excitation, &zero, &vec![0.0; plant.n])?;
    let record = DataRecord::new(excitation.samples().to_vec(), y.samples().to_vec())?;
    std::fs::create_dir_all(&out.dir)?;
    record.save(&out.data())?;
    Ok(record)
}

/// Stage 2: identify the one-step model from the stored record.
pub fn stage_identify(cfg: &PipelineConfig, out: &Artifacts) -> Result<RegressionModel> {
    let record = load_record(&out.data())
        .map_err(|e| Error::Data(format!("stage identify: {e}")))?;
    let model = identify(&record, &cfg.identification)?;
    write_atomic(&out.model(), &model.to_json()?)?;
    Ok(model)
}

/// Stage 3a: assemble the inversion controller.
pub fn stage_design_nic(cfg: &PipelineConfig, out: &Artifacts) -> Result<NicController> {
    let plant = Plant::by_name(&cfg.plant.name)?;
    let record = load_record(&out.data())?;
    let model = RegressionModel::from_json(&std::fs::read_to_string(out.model())?)?;
    let (rho_y, rho_u) = rho_constants(&record)?;
    let nic = NicController::new(
        model,
        cfg.nic.mu,
        rho_y,
        rho_u,
        plant.u_min,
        plant.u_max,
        SolverConfig {
            grid_points: cfg.nic.grid_points,
            refine_tol: cfg.nic.refine_tol,
        },
    )?;
    write_atomic(&out.nic(), &nic.to_json()?)?;
    Ok(nic)
}

/// Stage 3b: virtual-reference design of the linear controller.
pub fn stage_design_pid(cfg: &PipelineConfig, out: &Artifacts) -> Result<VrftResult> {
    let record = load_record(&out.data())?;
    let nic = NicController::from_json(&std::fs::read_to_string(out.nic())?)?;
    let reference = cfg.reference_model.build()?;
    let (result, _) = design_pid(&record, &nic, &reference, cfg.pid.n_theta)?;
    write_atomic(&out.pid(), &result.to_json()?)?;
    Ok(result)
}

fn load_controllers(out: &Artifacts) -> Result<(NicController, PidController)> {
    let nic = NicController::from_json(&std::fs::read_to_string(out.nic())?)?;
    let vrft = VrftResult::from_json(&std::fs::read_to_string(out.pid())?)?;
    Ok((nic, PidController::new(vrft.theta)?))
}

/// Stage 4: closed-loop runs, one trace CSV per configured run.
pub fn stage_simulate(cfg: &PipelineConfig, out: &Artifacts) -> Result<Vec<(String, Trace)>> {
    let plant = Plant::by_name(&cfg.plant.name)?;
    let (nic, pid) = load_controllers(out)?;
    let mut traces = Vec::new();
    for run in &cfg.runs {
        let reference = run.reference.realize(&plant, run.horizon)?;
        let run_cfg = RunConfig {
            horizon: run.horizon,
            y0: vec![0.0; plant.n],
            reference,
            noise: run.noise.clone(),
            seed: run.seed,
        };
        let trace = simulate_closed_loop(&plant, &nic, &pid, &run_cfg)?;
        trace.save_csv(&out.trace(&run.name))?;
        traces.push((run.name.clone(), trace));
    }
    Ok(traces)
}

/// Certificate artifact: the constants plus the closed-loop bounds evaluated
/// at the configured norms (absent when the assumptions fail).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateArtifact {
    pub certificate: StabilityCertificate,
    pub r_norm: f64,
    pub xi_norm: f64,
    pub y_bound: Option<f64>,
    pub e_bound: Option<f64>,
}

/// Stage 5: estimate the certificate constants and evaluate the bounds.
pub fn stage_certify(cfg: &PipelineConfig, out: &Artifacts) -> Result<CertificateArtifact> {
    let plant = Plant::by_name(&cfg.plant.name)?;
    let model = RegressionModel::from_json(&std::fs::read_to_string(out.model())?)?;
    let (nic, pid) = load_controllers(out)?;
    let spec = &cfg.certificate;
    let certify_cfg = CertifyConfig {
        gamma_samples: spec.gamma_samples,
        gamma_seed: spec.gamma_seed,
        grid_per_axis: spec.grid_per_axis,
        probe: ProbeConfig {
            y_amplitudes: spec.y_amplitudes.clone(),
            r_amplitudes: spec.r_amplitudes.clone(),
            horizon: spec.probe_horizon,
            seed: spec.probe_seed,
        },
    };
    let certificate = build_certificate(&model, &plant, &nic, &pid, &certify_cfg)?;
    let bounds = theorem1_bounds(&certificate, spec.r_norm, spec.xi_norm).ok();
    let artifact = CertificateArtifact {
        certificate,
        r_norm: spec.r_norm,
        xi_norm: spec.xi_norm,
        y_bound: bounds.map(|b| b.0),
        e_bound: bounds.map(|b| b.1),
    };
    write_atomic(
        &out.certificate(),
        &serde_json::to_string_pretty(&artifact)?,
    )?;
    if !artifact.certificate.verdicts.cascade_margin
        || !artifact.certificate.verdicts.residue_contraction
    {
        return Err(Error::AssumptionViolation(format!(
            "stage certify: gamma_y = {}, gain_y = {}",
            artifact.certificate.gamma_y, artifact.certificate.gain_y
        )));
    }
    Ok(artifact)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub metrics: MetricsReport,
    pub observed_y_norm: f64,
    pub observed_e_norm: f64,
    pub r_norm: f64,
    pub xi_norm: f64,
    pub y_bound: Option<f64>,
    pub e_bound: Option<f64>,
    pub y_bound_holds: Option<bool>,
    pub e_bound_holds: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub plant: String,
    pub runs: Vec<RunReport>,
    pub certificate: CertificateArtifact,
    pub steady_state: SteadyStateReport,
    pub total_saturations: usize,
}

/// Stage 6: cross-check simulated norms against the certified bounds and
/// verify the steady-state claims.
pub fn stage_report(cfg: &PipelineConfig, out: &Artifacts) -> Result<SummaryReport> {
    let plant = Plant::by_name(&cfg.plant.name)?;
    let (nic, pid) = load_controllers(out)?;
    let artifact: CertificateArtifact =
        serde_json::from_str(&std::fs::read_to_string(out.certificate())?)?;
    let traces = stage_simulate(cfg, out)?;

    let mut runs = Vec::new();
    let mut total_saturations = 0usize;
    let mut bound_violation = false;
    for (run_spec, (name, trace)) in cfg.runs.iter().zip(traces) {
        let m = metrics(&trace, run_spec.settle_window)?;
        let y_norm = trace.y.lp_norm(f64::INFINITY)?;
        let e_norm = trace.e.lp_norm(f64::INFINITY)?;
        let r_norm = trace.r.lp_norm(f64::INFINITY)?;
        let xi_norm = run_spec.noise.linf_bound();
        let bounds = theorem1_bounds(&artifact.certificate, r_norm, xi_norm).ok();
        let y_ok = bounds.map(|b| y_norm <= b.0);
        let e_ok = bounds.map(|b| e_norm <= b.1);
        if y_ok == Some(false) || e_ok == Some(false) {
            bound_violation = true;
        }
        total_saturations += m.saturation_count;
        runs.push(RunReport {
            name,
            metrics: m,
            observed_y_norm: y_norm,
            observed_e_norm: e_norm,
            r_norm,
            xi_norm,
            y_bound: bounds.map(|b| b.0),
            e_bound: bounds.map(|b| b.1),
            y_bound_holds: y_ok,
            e_bound_holds: e_ok,
        });
    }

    let steady_state = verify_theorem2(
        &plant,
        &nic,
        &pid,
        &cfg.certificate.steady_state,
        cfg.certificate.steady_state_tol,
    )?;

    let report = SummaryReport {
        plant: cfg.plant.name.clone(),
        runs,
        certificate: artifact,
        steady_state,
        total_saturations,
    };
    write_atomic(&out.report(), &serde_json::to_string_pretty(&report)?)?;
    if bound_violation {
        return Err(Error::Validation(
            "stage report: observed norm exceeded a certified bound".into(),
        ));
    }
    Ok(report)
}

/// All six stages in order.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Artifacts) -> Result<SummaryReport> {
    stage_gen(cfg, out)?;
    stage_identify(cfg, out)?;
    stage_design_nic(cfg, out)?;
    stage_design_pid(cfg, out)?;
    stage_simulate(cfg, out)?;
    stage_certify(cfg, out)?;
    stage_report(cfg, out)
}

/// Process exit code for an error, per the CLI contract:
/// 0 ok, 2 config, 3 data, 4 assumption violation, 5 bound violation.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Parse { .. } | Error::Io(_) => 3,
        Error::AssumptionViolation(_) => 4,
        Error::Validation(msg) if msg.contains("bound") => 5,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_config_round_trips_through_toml() {
        let cfg = PipelineConfig::demo();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn config_rejects_bad_plant() {
        let mut cfg = PipelineConfig::demo();
        cfg.plant.name = "nonexistent".into();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_rejects_settle_window_at_horizon() {
        let mut cfg = PipelineConfig::demo();
        cfg.runs[0].settle_window = cfg.runs[0].horizon;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seed_override_touches_every_stage_seed() {
        let mut cfg = PipelineConfig::demo();
        cfg.override_seeds(555);
        assert_eq!(cfg.excitation.seed, 555);
        assert_eq!(cfg.certificate.gamma_seed, 556);
        assert_ne!(cfg.runs[0].seed, cfg.runs[1].seed);
    }

    #[test]
    fn exit_codes_follow_contract() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Data("x".into())), 3);
        assert_eq!(exit_code(&Error::AssumptionViolation("x".into())), 4);
        assert_eq!(
            exit_code(&Error::Validation("exceeded a certified bound".into())),
            5
        );
        assert_eq!(exit_code(&Error::Domain("x".into())), 1);
    }
}
