use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use d2ibc::pipeline::{
    exit_code, run_pipeline, stage_certify, stage_design_nic, stage_design_pid, stage_gen,
    stage_identify, stage_report, stage_simulate, Artifacts, PipelineConfig,
};
use d2ibc::Result;

#[derive(Parser)]
#[command(
    name = "d2ibc",
    version,
    about = "Data-driven two-degrees-of-freedom control design and certification"
)]
struct Cli {
    /// Pipeline configuration (TOML). Omit to use the built-in demo setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override every stage seed, derived deterministically from this value.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the open-loop excitation record (data.csv).
    Gen,
    /// Fit the one-step regression model from data.csv (model.json).
    Identify,
    /// Design both controllers: inversion (nic.json) and PID (pid.json).
    Design,
    /// Run the configured closed-loop simulations (trace_*.csv).
    Simulate,
    /// Estimate stability constants and bounds (certificate.json).
    Certify,
    /// Cross-check simulations against the certificate (report.json).
    Report,
    /// Run every stage in order.
    All,
    /// Print the built-in demo configuration as TOML.
    InitConfig,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::demo(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seeds(seed);
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::InitConfig = cli.command {
        let text = toml::to_string_pretty(&PipelineConfig::demo())
            .map_err(|e| d2ibc::Error::Config(e.to_string()))?;
        print!("{text}");
        return Ok(());
    }
    let cfg = load_config(cli)?;
    let out = Artifacts::new(&cli.out);
    match cli.command {
        Command::Gen => {
            let record = stage_gen(&cfg, &out)?;
            println!("wrote {} ({} samples)", out.data().display(), record.len());
        }
        Command::Identify => {
            let model = stage_identify(&cfg, &out)?;
            println!(
                "wrote {} ({} features, order {})",
                out.model().display(),
                model.features.len(),
                model.n
            );
        }
        Command::Design => {
            stage_design_nic(&cfg, &out)?;
            let result = stage_design_pid(&cfg, &out)?;
            println!("wrote {}", out.nic().display());
            println!(
                "wrote {} (theta = {:?}, residual = {:.3e})",
                out.pid().display(),
                result.theta,
                result.residual
            );
        }
        Command::Simulate => {
            for (name, trace) in stage_simulate(&cfg, &out)? {
                println!(
                    "wrote {} ({} steps, {} saturations)",
                    out.trace(&name).display(),
                    trace.len(),
                    trace.saturation_count
                );
            }
        }
        Command::Certify => {
            let artifact = stage_certify(&cfg, &out)?;
            let c = &artifact.certificate;
            println!("wrote {}", out.certificate().display());
            println!(
                "gamma_y = {:.6}, Gamma_y = {:.6}, Gamma_r = {:.6}, Lambda_g = {:.6}",
                c.gamma_y, c.gain_y, c.gain_r, c.lambda_g
            );
            match (artifact.y_bound, artifact.e_bound) {
                (Some(yb), Some(eb)) => println!(
                    "bounds at |r| = {}, |xi| = {}: |y| <= {:.6}, |e| <= {:.6}",
                    artifact.r_norm, artifact.xi_norm, yb, eb
                ),
                _ => println!("bounds undefined: stability assumptions not met"),
            }
        }
        Command::Report => {
            print_report(&stage_report(&cfg, &out)?, &out);
        }
        Command::All => {
            print_report(&run_pipeline(&cfg, &out)?, &out);
        }
        Command::InitConfig => unreachable!(),
    }
    Ok(())
}

fn print_report(report: &d2ibc::pipeline::SummaryReport, out: &Artifacts) {
    println!("wrote {}", out.report().display());
    println!("plant: {}", report.plant);
    for r in &report.runs {
        let holds = match (r.y_bound_holds, r.e_bound_holds) {
            (Some(true), Some(true)) => "bounds hold",
            (None, None) => "bounds undefined",
            _ => "BOUND VIOLATED",
        };
        println!(
            "run {}: |e|_inf = {:.3e}, sse = {:.3e}, {} saturations, {}",
            r.name,
            r.metrics.linf_error,
            r.metrics.steady_state_error,
            r.metrics.saturation_count,
            holds
        );
    }
    let ss = &report.steady_state;
    println!(
        "steady state: step {:?} (sse = {:.3e}), disturbance {:?} (sse = {:.3e}), contrast without PID = {:.3e}",
        ss.step_verdict,
        ss.step_steady_state_error,
        ss.disturbance_verdict,
        ss.disturbance_steady_state_error,
        ss.contrast_steady_state_error
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
