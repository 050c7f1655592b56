use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use smartsize_core::calibration::{calibrate_rho, CalibrationOptions, CalibrationRun};
use smartsize_core::config::DependenceChoice;
use smartsize_core::contrast::z_test;
use smartsize_core::ipwre::{coefficient_names, fit_trial};
use smartsize_core::power::find_sample_size;
use smartsize_core::presets::{preset, preset_names};
use smartsize_core::studies::{run_study, Plan};
use smartsize_core::{DependenceSpec, Error, ObservedTrial, PowerEngine, RunManifest, Study, StudyConfig};

#[derive(Parser)]
#[command(name = "smartsize", version, about = "Monte Carlo power for two-stage restricted SMARTs with count outcomes")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Study configuration (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in scenario instead of a configuration file.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of Monte Carlo replicates.
    #[arg(long)]
    m: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Power curve over the sample-size grid and the smallest N reaching the target power.
    Power(Common),
    /// Map latent correlation to count-scale tau_max and pick rho for a target.
    Calibrate(Common),
    /// Write one simulated trial as CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Total sample size.
        #[arg(long)]
        n: usize,
    },
    /// Fit and test a trial CSV.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Dataset produced by `simulate` (or with the same columns).
        #[arg(long)]
        data: PathBuf,
    },
    /// Run one of the five simulation-study harnesses.
    ReplicateStudy {
        #[arg(value_parser = clap::value_parser!(u8).range(1..=5))]
        study: u8,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        m: Option<usize>,
        /// Use 5000 replicates per point.
        #[arg(long)]
        full: bool,
    },
    /// List built-in scenarios, or print one as TOML.
    Presets {
        #[arg(long)]
        show: Option<String>,
    },
}

enum Failure {
    Core(Error),
    TargetNotAchieved(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Core(e.into())
    }
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    exit_code: u8,
    path: Option<&'a str>,
    message: String,
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(Error::Config { .. }) | Failure::Core(Error::Io(_)) => 2,
            Failure::Core(Error::UnreachableTarget { .. }) | Failure::TargetNotAchieved(_) => 4,
            Failure::Core(_) => 3,
            Failure::Other(_) => 1,
        }
    }

    fn report(&self) {
        let code = self.exit_code();
        let rec = match self {
            Failure::Core(Error::Config { path, message }) => ErrorRecord {
                error: "config",
                exit_code: code,
                path: Some(path),
                message: message.clone(),
            },
            Failure::Core(e) => ErrorRecord {
                error: if code == 4 { "target_not_achieved" } else if code == 2 { "io" } else { "numerical" },
                exit_code: code,
                path: None,
                message: e.to_string(),
            },
            Failure::TargetNotAchieved(m) => ErrorRecord {
                error: "target_not_achieved",
                exit_code: code,
                path: None,
                message: m.clone(),
            },
            Failure::Other(m) => ErrorRecord { error: "internal", exit_code: code, path: None, message: m.clone() },
        };
        eprintln!("{}", serde_json::to_string(&rec).expect("error record serialises"));
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(k) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            Failure::Other(e.to_string()).report();
            return ExitCode::from(1);
        }
    }
    let threads = rayon::current_num_threads();
    let argv: Vec<String> = std::env::args().collect();
    let mut manifest = RunManifest::new(argv, threads);
    let result = match cli.command {
        Command::Power(c) => power(&c, &mut manifest),
        Command::Calibrate(c) => calibrate(&c, &mut manifest),
        Command::Simulate { common, n } => simulate(&common, n, &mut manifest),
        Command::Analyze { common, data } => analyze(&common, &data, &mut manifest),
        Command::ReplicateStudy { study, out, seed, m, full } => replicate(study, &out, seed, m, full, &mut manifest),
        Command::Presets { show } => presets(show.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            f.report();
            ExitCode::from(f.exit_code())
        }
    }
}

/// Load, apply overrides, validate and echo the derived quantities.
fn load(c: &Common, manifest: &mut RunManifest) -> Result<Study, Failure> {
    let mut cfg = match (&c.config, &c.preset) {
        (Some(path), None) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
            StudyConfig::from_toml(&text)?
        }
        (None, Some(name)) => {
            let p = preset(name)?;
            manifest.warnings.extend(p.warnings);
            p.config
        }
        _ => return Err(Error::config("--config", "one of --config or --preset is required").into()),
    };
    if let Some(seed) = c.seed {
        cfg.monte_carlo.seed = seed;
    }
    if let Some(m) = c.m {
        cfg.monte_carlo.m = m;
    }
    let study = cfg.resolve()?;
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", study.echo());
    manifest.attach(&study);
    fs::create_dir_all(&c.out)?;
    Ok(study)
}

fn write_manifest(out: &Path, manifest: &RunManifest) -> Outcome {
    fs::write(out.join("manifest.json"), manifest.to_json())?;
    Ok(())
}

/// Fixed dependence, or the calibrated one when a target is configured.
fn dependence(study: &Study, out: &Path, manifest: &mut RunManifest) -> Result<DependenceSpec, Failure> {
    match study.dependence {
        DependenceChoice::Fixed(d) => Ok(d),
        DependenceChoice::Target { tau_max, .. } => {
            let opts = study.calibration_options();
            let start = Instant::now();
            let table = calibrate_rho(tau_max, &study.design, &study.grid, opts)?;
            manifest.time("calibration", start.elapsed().as_secs_f64());
            write_calibration(out, &table.points)?;
            manifest.derive("selected_rho", table.selected_rho);
            println!("calibrated rho = {} for tau_max = {tau_max}", table.selected_rho);
            let eta = opts.eta.eta(table.selected_rho);
            Ok(DependenceSpec::with_eta(opts.structure, table.selected_rho, eta)?)
        }
    }
}

fn write_calibration(out: &Path, points: &[smartsize_core::calibration::CalibrationPoint]) -> Outcome {
    let mut w = csv::Writer::from_path(out.join("calibration.csv"))?;
    w.write_record(["rho", "tau_hat", "mc_se"])?;
    for p in points {
        w.write_record([p.rho.to_string(), p.tau_hat.to_string(), p.mc_se.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn power(c: &Common, manifest: &mut RunManifest) -> Outcome {
    let study = load(c, manifest)?;
    let dep = dependence(&study, &c.out, manifest)?;
    let cfg = study.power_config(dep);
    let target = study.config.monte_carlo.target_power;
    let start = Instant::now();
    let search = find_sample_size(&cfg, target, study.n_grid())?;
    manifest.time("power", start.elapsed().as_secs_f64());

    let mut w = csv::Writer::from_path(c.out.join("power.csv"))?;
    w.write_record(["n", "power", "mc_se", "failed", "elapsed_secs"])?;
    for e in &search.curve {
        w.write_record([
            e.n.to_string(),
            e.power.to_string(),
            e.mc_se.to_string(),
            e.failed.to_string(),
            format!("{:.3}", e.elapsed_seconds),
        ])?;
        println!("N = {:>5}  power = {:.4}  (mc se {:.4}, failed {})", e.n, e.power, e.mc_se, e.failed);
    }
    w.flush()?;
    let failed: usize = search.curve.iter().map(|e| e.failed).sum();
    let total: usize = search.curve.iter().map(|e| e.replicates).sum();
    if failed * 100 >= total {
        manifest.warnings.push(format!("{failed} of {total} replicates failed to fit"));
    }
    manifest.derive("target_power", target);
    manifest.derive("sample_size", search.n.map(serde_json::Value::from).unwrap_or(serde_json::Value::Null));
    write_manifest(&c.out, manifest)?;
    match search.n {
        Some(n) => {
            println!("smallest N reaching power {target}: {n}");
            Ok(())
        }
        None => Err(Failure::TargetNotAchieved(format!(
            "no sample size on the grid reaches power {target}; largest estimate {:.4}",
            search.curve.iter().map(|e| e.power).fold(f64::NEG_INFINITY, f64::max)
        ))),
    }
}

fn calibrate(c: &Common, manifest: &mut RunManifest) -> Outcome {
    let study = load(c, manifest)?;
    let mut opts: CalibrationOptions = study.calibration_options();
    let target = match study.dependence {
        DependenceChoice::Target { tau_max, .. } => Some(tau_max),
        DependenceChoice::Fixed(_) => None,
    };
    let start = Instant::now();
    let (points, selected) = match target {
        Some(t) => {
            let table = calibrate_rho(t, &study.design, &study.grid, opts)?;
            (table.points, table.selected_rho)
        }
        None => {
            opts.stop_after_crossing = false;
            let table = calibrate_rho(0.0, &study.design, &study.grid, opts)?;
            let rho = match study.dependence {
                DependenceChoice::Fixed(d) => d.rho,
                DependenceChoice::Target { .. } => unreachable!(),
            };
            (table.points, rho)
        }
    };
    manifest.time("calibration", start.elapsed().as_secs_f64());
    write_calibration(&c.out, &points)?;
    for p in &points {
        println!("rho = {:.2}  tau_hat = {:.4}  (mc se {:.4})", p.rho, p.tau_hat, p.mc_se);
    }
    let run = CalibrationRun { design: &study.design, grid: &study.grid, opts };
    let gi = points.iter().position(|p| p.rho == selected).unwrap_or(points.len());
    let pc = run.path_correlations_at(selected, gi)?;
    let mut w = csv::Writer::from_path(c.out.join("path_correlations.csv"))?;
    w.write_record(["path", "i", "j", "corr"])?;
    for (path, i, j, corr) in pc.long_rows() {
        w.write_record([path.to_string(), i.to_string(), j.to_string(), corr.to_string()])?;
    }
    w.flush()?;
    manifest.derive("selected_rho", selected);
    if let Some(t) = target {
        println!("selected rho = {selected} for tau_max = {t}");
    }
    write_manifest(&c.out, manifest)
}

fn simulate(c: &Common, n: usize, manifest: &mut RunManifest) -> Outcome {
    let study = load(c, manifest)?;
    let dep = dependence(&study, &c.out, manifest)?;
    let engine = PowerEngine::new(study.power_config(dep))?;
    let trial = engine.simulate(n, 0)?;
    let file = fs::File::create(c.out.join("dataset.csv"))?;
    trial.write_csv(std::io::BufWriter::new(file))?;
    manifest.derive("n", n);
    println!("wrote {} participants to {}", trial.len(), c.out.join("dataset.csv").display());
    write_manifest(&c.out, manifest)
}

#[derive(Serialize)]
struct Analysis {
    n: usize,
    coefficients: Vec<(String, f64)>,
    iterations: usize,
    estimand: String,
    pair: [String; 2],
    delta_hat: f64,
    std_error: f64,
    z: f64,
    p_value: f64,
    reject: bool,
    alpha: f64,
}

fn analyze(c: &Common, data: &Path, manifest: &mut RunManifest) -> Outcome {
    let study = load(c, manifest)?;
    let file = fs::File::open(data).map_err(|e| Error::config("--data", format!("cannot read {}: {e}", data.display())))?;
    let trial = ObservedTrial::read_csv(std::io::BufReader::new(file))?;
    if trial.occasions != study.design.occasions() {
        return Err(Error::config(
            "--data",
            format!("dataset has {} occasions, configuration has {}", trial.occasions, study.design.occasions()),
        )
        .into());
    }
    let fit = fit_trial(&trial, &study.design)?;
    let t = z_test(&fit.beta, &fit.covariance, study.pair, &study.weights, &study.design, study.alpha)?;
    let a = Analysis {
        n: trial.len(),
        coefficients: coefficient_names(&study.design).into_iter().zip(fit.beta.iter().copied()).collect(),
        iterations: fit.iterations,
        estimand: study.weights.kind.to_string(),
        pair: [study.pair.0.to_string(), study.pair.1.to_string()],
        delta_hat: t.delta_hat,
        std_error: t.std_error(),
        z: t.z,
        p_value: t.p_value,
        reject: t.reject,
        alpha: study.alpha,
    };
    println!(
        "delta_hat = {:.4}  se = {:.4}  z = {:.3}  p = {:.4}  reject = {}",
        a.delta_hat, a.std_error, a.z, a.p_value, a.reject
    );
    fs::write(c.out.join("analysis.json"), serde_json::to_string_pretty(&a).expect("analysis serialises"))?;
    write_manifest(&c.out, manifest)
}

fn replicate(id: u8, out: &Path, seed: Option<u64>, m: Option<usize>, full: bool, manifest: &mut RunManifest) -> Outcome {
    let mut plan = Plan::for_study(id, full)?;
    if let Some(s) = seed {
        plan.seed = s;
    }
    if let Some(m) = m {
        plan.m = m;
    }
    fs::create_dir_all(out)?;
    manifest.master_seed = Some(plan.seed);
    manifest.derive("study", id);
    manifest.derive("m", plan.m);
    let start = Instant::now();
    let files = run_study(id, &plan, out)?;
    manifest.time(&format!("study {id}"), start.elapsed().as_secs_f64());
    for f in files {
        println!("wrote {}", f.display());
    }
    write_manifest(out, manifest)
}

fn presets(show: Option<&str>) -> Outcome {
    match show {
        Some(name) => {
            let p = preset(name)?;
            for w in &p.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", p.config.to_toml());
        }
        None => {
            for name in preset_names() {
                println!("{name}");
            }
        }
    }
    Ok(())
}
