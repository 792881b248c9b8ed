use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use inla_recon::model::ModelKind;
use inla_recon::pipeline::{self, EngineKind, Inputs, RunConfig, Stage};
use inla_recon::pseudoproxy::{self, PseudoConfig};
use inla_recon::reduce::ReductionMethod;
use inla_recon::timeseries::YearRange;
use inla_recon::{Error, Result};

#[derive(Parser)]
#[command(name = "inla-recon", version, about = "Temperature reconstruction from proxy panels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic proxy world as CSV inputs.
    Generate(GenerateArgs),
    /// Screen, nest and reduce the proxies.
    Reduce(RunArgs),
    /// Reduce and fit; writes coefficient marginals.
    Fit(RunArgs),
    /// Fit and write the reconstruction with its 95% band.
    Reconstruct(RunArgs),
    /// Reconstruct and score the validation window.
    Validate(RunArgs),
    /// Every stage and artifact.
    All(RunArgs),
    /// Nested-Laplace and Gibbs fits side by side (model WF, one nest).
    CompareEngines(RunArgs),
    /// Re-run the configuration recorded in a manifest.
    Replay {
        manifest: PathBuf,
        /// Write into this directory instead of the recorded one.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// TOML file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    proxies_per_nest: Option<usize>,
    #[arg(long)]
    snr_min: Option<f64>,
    #[arg(long)]
    snr_max: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; flags and RECON_* variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    proxies: Option<PathBuf>,
    #[arg(long)]
    forcings: Option<PathBuf>,
    #[arg(long)]
    temperature: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    smoothed_reference: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelKind>,
    /// Comma-separated reduction methods.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<ReductionMethod>>,
    #[arg(long)]
    nests: Option<usize>,
    /// nested-laplace or gibbs.
    #[arg(long)]
    engine: Option<EngineKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Calibration window as START-END.
    #[arg(long, value_parser = parse_range)]
    calibration: Option<YearRange>,
    /// Validation window as START-END.
    #[arg(long, value_parser = parse_range)]
    validation: Option<YearRange>,
    #[arg(long)]
    k_nf: Option<usize>,
    #[arg(long)]
    k_mixed: Option<usize>,
    #[arg(long)]
    crps_draws: Option<usize>,
    #[arg(long)]
    gibbs_iterations: Option<usize>,
}

fn parse_range(s: &str) -> std::result::Result<YearRange, String> {
    let (a, b) = s.split_once('-').ok_or_else(|| format!("`{s}` is not START-END"))?;
    let start = a.trim().parse().map_err(|_| format!("bad start year `{a}`"))?;
    let end = b.trim().parse().map_err(|_| format!("bad end year `{b}`"))?;
    YearRange::new(start, end).map_err(|e| e.to_string())
}

impl RunArgs {
    fn resolve(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_process_env()?;
        let set = |slot: &mut PathBuf, v: Option<PathBuf>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut cfg.paths.proxies, self.proxies);
        set(&mut cfg.paths.forcings, self.forcings);
        set(&mut cfg.paths.temperature, self.temperature);
        set(&mut cfg.paths.output, self.output);
        if self.smoothed_reference.is_some() {
            cfg.paths.smoothed_reference = self.smoothed_reference;
        }
        if let Some(v) = self.model {
            cfg.model.kind = v;
        }
        if let Some(v) = self.methods {
            cfg.model.methods = v;
        }
        if let Some(v) = self.nests {
            cfg.model.nests = v;
        }
        if let Some(v) = self.engine {
            cfg.engine.kind = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        if let Some(v) = self.calibration {
            cfg.windows.calibration = v;
        }
        if let Some(v) = self.validation {
            cfg.windows.validation = v;
        }
        if self.k_nf.is_some() {
            cfg.model.k_nf = self.k_nf;
        }
        if self.k_mixed.is_some() {
            cfg.model.k_mixed = self.k_mixed;
        }
        if let Some(v) = self.crps_draws {
            cfg.scoring.crps_draws = v;
        }
        if let Some(v) = self.gibbs_iterations {
            cfg.engine.gibbs_iterations = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<PseudoConfig>(&text).map_err(|e| Error::Config(format!("invalid generator configuration: {e}")))?
        }
        None => PseudoConfig::default(),
    };
    if let Some(m) = args.model {
        cfg.kind = m;
    }
    if let Some(n) = args.proxies_per_nest {
        cfg.proxies_per_nest = [n; 8];
    }
    if let Some(v) = args.snr_min {
        cfg.snr_range.0 = v;
    }
    if let Some(v) = args.snr_max {
        cfg.snr_range.1 = v;
    }
    let world = pseudoproxy::generate(&cfg, args.seed)?;
    world.write_dir(&args.out)?;
    println!(
        "wrote {} proxies, forcings and temperatures to {}",
        world.proxies.len(),
        args.out.display()
    );
    Ok(())
}

fn run(args: RunArgs, stage: Stage) -> Result<()> {
    let cfg = args.resolve().map_err(|e| e.in_stage("config"))?;
    let out = pipeline::run_pipeline(&cfg, stage)?;
    for s in &out.scores {
        println!(
            "{} N={} {}: IS80 {:.4}  IS95 {:.4}  CRPS {:.4}  MSE {:.4}",
            s.model, s.n_nests, s.method, s.is80, s.is95, s.crps, s.mse
        );
    }
    println!(
        "wrote {} files to {}",
        out.manifest.outputs.len(),
        cfg.paths.output.display()
    );
    Ok(())
}

fn compare(args: RunArgs) -> Result<()> {
    let mut cfg = args.resolve().map_err(|e| e.in_stage("config"))?;
    if cfg.model.nests != 1 {
        log::info!("engine comparison uses one nest");
        cfg.model.nests = 1;
    }
    let inputs = Inputs::load(&cfg.paths).map_err(|e| e.in_stage("ingest"))?;
    let c = pipeline::compare_engines(&inputs, &cfg)?;
    println!("{:<16} {:>12} {:>12} {:>12} {:>12} {:>8}", "parameter", "laplace", "sd", "gibbs", "sd", "width");
    for (i, p) in c.parameters.iter().enumerate() {
        println!(
            "{:<16} {:>12.5} {:>12.5} {:>12.5} {:>12.5} {:>8.3}",
            p, c.laplace[i].mean, c.laplace[i].sd, c.gibbs[i].mean, c.gibbs[i].sd, c.width_ratio[i]
        );
    }
    println!(
        "nested-laplace {:.3}s, gibbs {:.3}s ({:.1}x)",
        c.laplace_seconds,
        c.gibbs_seconds,
        c.gibbs_seconds / c.laplace_seconds
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Reduce(a) => run(a, Stage::Reduce),
        Command::Fit(a) => run(a, Stage::Fit),
        Command::Reconstruct(a) => run(a, Stage::Reconstruct),
        Command::Validate(a) => run(a, Stage::Validate),
        Command::All(a) => run(a, Stage::All),
        Command::CompareEngines(a) => compare(a),
        Command::Replay { manifest, output } => pipeline::replay(&manifest, output).map(|o| {
            println!("replayed into {} files", o.manifest.outputs.len());
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
