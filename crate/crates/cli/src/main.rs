use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use popinterp_cli::commands::{evaluate, fit, predict, prln, simulate};
use popinterp_cli::config::{self, CommandConfig};
use popinterp_cli::output::Manifest;
use popinterp_cli::{CliError, Result};

#[derive(Parser, Debug)]
#[command(
    name = "popinterp",
    version,
    about = "Interpolate income distributions from published bin, mean and median estimates"
)]
struct Cli {
    /// More log output (-v info, -vv debug); RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any configuration key, e.g. `--set sampler.chains=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct SamplerFlags {
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    draws: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the tract model to each geography's estimates.
    FitTract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        estimates: Option<PathBuf>,
        /// Geography to fit; repeat for several.
        #[arg(long = "geo-id")]
        geo_ids: Vec<String>,
        #[arg(long)]
        prior_centers: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Fit tracts jointly with the microdata of the area containing them.
    FitNested {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        estimates: Option<PathBuf>,
        #[arg(long)]
        pums: Option<PathBuf>,
        #[arg(long = "geo-id")]
        geo_ids: Vec<String>,
        #[arg(long = "puma-id")]
        puma_ids: Vec<String>,
        #[arg(long)]
        prior_centers: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Pareto-linear point estimates from bin estimates.
    Prln {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        estimates: Option<PathBuf>,
        #[arg(long = "geo-id")]
        geo_ids: Vec<String>,
    },
    /// Run the simulation study on a synthetic world.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        tracts: Option<usize>,
        /// Microdata CSV used as the reference sample.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Posterior-predictive features from a fit.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fit: Option<PathBuf>,
        #[arg(long = "geo-id")]
        geo_ids: Vec<String>,
        #[arg(long)]
        population: Option<usize>,
    },
    /// Score a fit against held-out estimates.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fit: Option<PathBuf>,
        #[arg(long)]
        estimates: Option<PathBuf>,
        #[arg(long)]
        prln: Option<PathBuf>,
    },
    /// Validate an estimate CSV and write its canonical form.
    Ingest {
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat the run recorded in a manifest.
    Rerun {
        /// A manifest.json or the directory holding it.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a command's configuration file with every default.
    DefaultConfig { command: String },
}

fn path_value(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', "\\'"))
}

fn str_list(v: &[String]) -> String {
    let items: Vec<String> = v.iter().map(|s| format!("'{}'", s.replace('\'', "\\'"))).collect();
    format!("[{}]", items.join(", "))
}

struct Overrides(Vec<(String, String)>);

impl Overrides {
    fn new(common: &Common) -> Result<Self> {
        let mut v = common
            .set
            .iter()
            .map(|s| config::parse_override(s))
            .collect::<Result<Vec<_>>>()?;
        if let Some(s) = common.seed {
            v.push(("seed".into(), s.to_string()));
        }
        Ok(Self(v))
    }

    fn path(&mut self, key: &str, p: &Option<PathBuf>) {
        if let Some(p) = p {
            self.0.push((key.into(), path_value(p)));
        }
    }

    fn list(&mut self, key: &str, v: &[String]) {
        if !v.is_empty() {
            self.0.push((key.into(), str_list(v)));
        }
    }

    fn num(&mut self, key: &str, v: Option<usize>) {
        if let Some(v) = v {
            self.0.push((key.into(), v.to_string()));
        }
    }

    fn sampler(&mut self, s: &SamplerFlags) {
        self.num("sampler.chains", s.chains);
        self.num("sampler.warmup", s.warmup);
        self.num("sampler.draws", s.draws);
    }

    fn load<C: CommandConfig>(&self, common: &Common) -> Result<C> {
        config::load(common.config.as_deref(), &self.0)
    }
}

fn report(m: &Manifest, out: &Path) {
    println!(
        "{}: wrote {} file(s) and {} to {}",
        m.command,
        m.outputs.len(),
        popinterp_cli::output::MANIFEST_FILE,
        out.display()
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitTract {
            common,
            estimates,
            geo_ids,
            prior_centers,
            sampler,
        } => {
            let mut o = Overrides::new(&common)?;
            o.path("estimates", &estimates);
            o.list("geo_ids", &geo_ids);
            o.path("prior.centers", &prior_centers);
            o.sampler(&sampler);
            let cfg = o.load::<config::FitTractConfig>(&common)?;
            report(&fit::run_tract(&cfg, &common.out)?, &common.out);
        }
        Command::FitNested {
            common,
            estimates,
            pums,
            geo_ids,
            puma_ids,
            prior_centers,
            sampler,
        } => {
            let mut o = Overrides::new(&common)?;
            o.path("estimates", &estimates);
            o.path("pums", &pums);
            o.list("geo_ids", &geo_ids);
            o.list("puma_ids", &puma_ids);
            o.path("prior.centers", &prior_centers);
            o.sampler(&sampler);
            let cfg = o.load::<config::FitNestedConfig>(&common)?;
            report(&fit::run_nested(&cfg, &common.out)?, &common.out);
        }
        Command::Prln {
            common,
            estimates,
            geo_ids,
        } => {
            let mut o = Overrides::new(&common)?;
            if common.seed.is_some() {
                o.0.retain(|(k, _)| k != "seed");
            }
            o.path("estimates", &estimates);
            o.list("geo_ids", &geo_ids);
            let cfg = o.load::<config::PrlnConfig>(&common)?;
            report(&prln::run(&cfg, &common.out)?, &common.out);
        }
        Command::Simulate {
            common,
            reps,
            tracts,
            reference,
            sampler,
        } => {
            let mut o = Overrides::new(&common)?;
            o.num("n_reps", reps);
            o.num("n_tracts", tracts);
            o.path("reference", &reference);
            o.sampler(&sampler);
            let cfg = o.load::<config::SimulateConfig>(&common)?;
            report(&simulate::run(&cfg, &common.out)?, &common.out);
        }
        Command::Predict {
            common,
            fit,
            geo_ids,
            population,
        } => {
            let mut o = Overrides::new(&common)?;
            o.path("fit", &fit);
            o.list("geo_ids", &geo_ids);
            o.num("predictive.population", population);
            let cfg = o.load::<config::PredictConfig>(&common)?;
            report(&predict::run(&cfg, &common.out)?, &common.out);
        }
        Command::Evaluate {
            common,
            fit,
            estimates,
            prln,
        } => {
            let mut o = Overrides::new(&common)?;
            if common.seed.is_some() {
                o.0.retain(|(k, _)| k != "seed");
            }
            o.path("fit", &fit);
            o.path("estimates", &estimates);
            o.path("prln", &prln);
            let cfg = o.load::<config::EvaluateConfig>(&common)?;
            report(&evaluate::run(&cfg, &common.out)?, &common.out);
        }
        Command::Ingest { estimates, out } => {
            let estimates = std::path::absolute(&estimates).map_err(|e| CliError::io(&estimates, e))?;
            report(&popinterp_cli::commands::run_ingest(&estimates, &out)?, &out);
        }
        Command::Rerun { manifest, out } => {
            let dir = if manifest.is_dir() {
                manifest.clone()
            } else {
                manifest.parent().map(Path::to_path_buf).unwrap_or_default()
            };
            let m = Manifest::read(&dir)?;
            report(&popinterp_cli::commands::rerun(&m, &out)?, &out);
        }
        Command::DefaultConfig { command } => match config::template(&command) {
            Some(t) => print!("{t}"),
            None => {
                return Err(CliError::invalid(format!(
                    "unknown command '{command}'; use fit-tract, fit-nested, prln, simulate, predict or evaluate"
                )))
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
