use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use lfp_soc::config::Config;
use lfp_soc::ecm::BatteryState;
use lfp_soc::io::{self, IngestOptions};
use lfp_soc::scenario::{coulomb_feedback, filter_params, write_artifacts};
use lfp_soc::{
    generate_profile, identify_stream, run_ammkf, run_ekf, run_scenario, simulate_profile, ScenarioConfig, Trace,
};

#[derive(Parser, Debug)]
#[command(name = "lfp-soc", version, about = "SOC estimation for LiFePO4 cells with an uncertain OCV curve")]
struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Reject input traces with non-uniform timestamps.
    #[arg(long, global = true)]
    strict: bool,
    /// Resample input traces to this spacing, s, by zero-order hold.
    #[arg(long, global = true)]
    resample: Option<f64>,
    /// Extra `key=value` settings applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the configured cell and drive profile.
    Simulate,
    /// Identify R0, Rp and Cp from a measured trace.
    Identify {
        trace: PathBuf,
        /// Fixed forgetting factor instead of Coulomb-counted SOC feedback.
        #[arg(long)]
        no_feedback: bool,
    },
    /// Estimate SOC over a measured trace.
    Estimate {
        trace: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Ammkf)]
        method: Method,
    },
    /// CCM/ACM analysis of an innovation log.
    Analyze { innovations: PathBuf },
    /// Simulate, estimate with both methods and check the configured thresholds.
    Scenario,
    /// Run the scenario once per value of one key, in parallel.
    Sweep {
        #[arg(long)]
        key: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Method {
    Ekf,
    Ammkf,
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error + Send + Sync>>;

fn load_config(cli: &Cli) -> AnyResult<Config> {
    let mut c = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        c.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        c.set("seed", s)?;
    }
    Ok(c)
}

fn manifest(c: &Config) -> String {
    let args: Vec<String> = std::env::args().collect();
    format!("# lfp-soc {}\n# {}\n{}", env!("CARGO_PKG_VERSION"), args.join(" "), c.manifest())
}

fn write_manifest(dir: &Path, c: &Config) -> AnyResult<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("manifest.txt"), manifest(c))?;
    Ok(())
}

fn read_input(cli: &Cli, path: &Path) -> AnyResult<Trace> {
    let opts = IngestOptions { strict: cli.strict, resample_dt: cli.resample };
    Ok(io::load_trace(path, &opts)?)
}

/// Scenario settings checked against an external trace's sample period.
fn scenario_for(c: &Config, trace: &Trace) -> AnyResult<ScenarioConfig> {
    let mut c = c.clone();
    c.set("dt", trace.dt)?;
    Ok(ScenarioConfig::from_config(&c)?)
}

fn simulate(cli: &Cli, c: &Config) -> AnyResult<u8> {
    let cfg = ScenarioConfig::from_config(c)?;
    let profile = generate_profile(&cfg.profile, cfg.sim.dt, cfg.sim.rng_seed)?;
    let x0 = BatteryState::new(cfg.initial_soc_true, cfg.initial_up);
    let trace = simulate_profile(x0, &cfg.ecm, &cfg.true_curve, &profile.samples, &cfg.sim)?;
    if let Some(ev) = trace.cutoff_event() {
        log::warn!("simulation stopped early: {ev:?}");
    }
    io::write_trace(&trace, io::output_file(&cli.out, "trace.csv")?)?;
    write_manifest(&cli.out, c)?;
    println!("{} samples -> {}", trace.len(), cli.out.join("trace.csv").display());
    Ok(0)
}

fn identify(cli: &Cli, c: &Config, path: &Path, no_feedback: bool) -> AnyResult<u8> {
    let trace = read_input(cli, path)?;
    let cfg = scenario_for(c, &trace)?;
    let feedback = (!no_feedback).then(|| coulomb_feedback(&cfg, &trace));
    let res = identify_stream(&trace, feedback.as_deref(), &cfg.arls)?;
    if res.unidentifiable {
        log::warn!("input does not excite the model; parameters are unidentifiable");
    }
    io::write_identification(&res.steps, io::output_file(&cli.out, "identification.csv")?)?;
    write_manifest(&cli.out, c)?;
    match res.last_params() {
        Some(p) => println!("r0 {:.5} ohm, rp {:.5} ohm, cp {:.1} F", p.r0, p.rp, p.cp),
        None => println!("no parameters after warmup"),
    }
    Ok(0)
}

fn estimate(cli: &Cli, c: &Config, path: &Path, method: Method) -> AnyResult<u8> {
    let trace = read_input(cli, path)?;
    let cfg = scenario_for(c, &trace)?;
    let params = filter_params(&cfg, &trace)?;
    let steps = match method {
        Method::Ekf => {
            let steps = run_ekf(cfg.filter(), &params, &trace, &cfg.sim)?;
            io::write_estimates(&trace, &steps, io::output_file(&cli.out, "ekf.csv")?)?;
            steps
        }
        Method::Ammkf => {
            let out = run_ammkf(cfg.filter(), &params, &trace, &cfg.sim, &cfg.bank)?;
            io::write_estimates(&trace, &out.steps, io::output_file(&cli.out, "ammkf.csv")?)?;
            io::write_corrected_osc(&out.corrected_osc, io::output_file(&cli.out, "corrected_osc.csv")?)?;
            io::write_diagnostics(&out.intervals, io::output_file(&cli.out, "diagnostics.csv")?)?;
            io::write_innovation_log(&out, io::output_file(&cli.out, "innovations.csv")?)?;
            if out.adaptive_from.is_none() {
                log::warn!("innovations never settled; the bank was not engaged");
            }
            out.steps
        }
    };
    write_manifest(&cli.out, c)?;
    if let Some(truth) = trace.true_soc() {
        let est: Vec<f64> = steps.iter().map(|s| s.posterior.0.soc).collect();
        let m = lfp_soc::compute_metrics(&est, &truth, trace.dt)?;
        println!("rmse {:.4}, max {:.4}", m.rmse, m.max_abs_error);
    }
    Ok(0)
}

fn analyze(cli: &Cli, c: &Config, path: &Path) -> AnyResult<u8> {
    let f = File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let log = io::read_innovation_log(f)?;
    let rows = io::analyze_log(&log, &c.bank()?.ccm)?;
    io::write_analysis(&rows, io::output_file(&cli.out, "analysis.csv")?)?;
    write_manifest(&cli.out, c)?;
    println!("{} interval pairs", rows.len());
    Ok(0)
}

/// Runs one scenario into `dir`; returns the threshold violations.
fn scenario_into(c: &Config, dir: &Path) -> AnyResult<(Vec<String>, f64, f64)> {
    let cfg = ScenarioConfig::from_config(c)?;
    let report = run_scenario(&cfg)?;
    write_artifacts(&report, dir, &manifest(c))?;
    Ok((report.violations, report.ekf_metrics.rmse, report.ammkf_metrics.rmse))
}

fn scenario(cli: &Cli, c: &Config) -> AnyResult<u8> {
    let (violations, ekf, ammkf) = scenario_into(c, &cli.out)?;
    println!("ekf rmse {ekf:.4}, ammkf rmse {ammkf:.4}");
    for v in &violations {
        eprintln!("threshold violated: {v}");
    }
    Ok(if violations.is_empty() { 0 } else { 2 })
}

fn sweep(cli: &Cli, c: &Config, key: &str, values: &[String]) -> AnyResult<u8> {
    let runs: Vec<(String, Config)> = values
        .iter()
        .map(|v| {
            let mut run = c.clone();
            run.set(key, v)?;
            Ok((v.clone(), run))
        })
        .collect::<AnyResult<_>>()?;
    let results: Vec<AnyResult<(Vec<String>, f64, f64)>> =
        runs.par_iter().map(|(v, run)| scenario_into(run, &cli.out.join(format!("{key}={v}")))).collect();
    let mut summary = String::from("value,ekf_rmse,ammkf_rmse,violations\n");
    let mut failed = false;
    for ((v, _), r) in runs.iter().zip(results) {
        let (violations, ekf, ammkf) = r.map_err(|e| format!("{key}={v}: {e}"))?;
        println!("{key}={v}: ekf rmse {ekf:.4}, ammkf rmse {ammkf:.4}");
        for msg in &violations {
            eprintln!("{key}={v}: threshold violated: {msg}");
        }
        failed |= !violations.is_empty();
        summary.push_str(&format!("{v},{ekf},{ammkf},{}\n", violations.len()));
    }
    std::fs::write(cli.out.join("summary.csv"), summary)?;
    write_manifest(&cli.out, c)?;
    Ok(if failed { 2 } else { 0 })
}

fn run(cli: &Cli) -> AnyResult<u8> {
    let c = load_config(cli)?;
    match &cli.cmd {
        Command::Simulate => simulate(cli, &c),
        Command::Identify { trace, no_feedback } => identify(cli, &c, trace, *no_feedback),
        Command::Estimate { trace, method } => estimate(cli, &c, trace, *method),
        Command::Analyze { innovations } => analyze(cli, &c, innovations),
        Command::Scenario => scenario(cli, &c),
        Command::Sweep { key, values } => sweep(cli, &c, key, values),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
