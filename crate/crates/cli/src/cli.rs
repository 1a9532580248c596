//! Command-line surface: subcommands, config overrides and exit codes.

use std::path::PathBuf;

use chanprobe::repair::RepairMode;
use clap::{Args, Parser, Subcommand};

use crate::artifacts::ReportRecord;
use crate::config::{PipelineConfig, Preset, SeedSpec};
use crate::error::{CliError, CliResult};
use crate::report::format_r_relevance;
use crate::stages::{export_scenario, serve, Pipeline};

/// Exit code when repair could only export the manifest.
pub const EXIT_MANIFEST_ONLY: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "chanprobe", version, about = "Probe an image classifier through single style-channel edits")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,

    /// Increase log detail (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// TOML pipeline config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, global = true)]
    pub preset: Option<Preset>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// `N` (seeds 0..N), `A..B`, or a comma list.
    #[arg(long, global = true)]
    pub seeds: Option<String>,
    /// Screening method: grad, smoothgrad or fda.
    #[arg(long, global = true)]
    pub method: Option<String>,
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    #[arg(long, global = true)]
    pub tau_fraction: Option<f64>,
    #[arg(long, global = true)]
    pub truncation: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rank style channels by sensitivity and keep the top-k per layer.
    Screen,
    /// Perturb candidate channels and record confidence drops.
    Mine,
    /// Label influential channels relevant or spurious.
    Attribute,
    /// Push relevant channels across the decision boundary.
    Explore,
    /// Build the repair set and fine-tune the classifier head.
    Repair,
    /// Write metrics, tables and image sheets.
    Report,
    /// Run every stage in order.
    RunAll,
    /// Train the synthetic scenario and write its parts to a directory.
    Scenario {
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the synthetic generator and toy SUT over the wire protocol.
    Serve {
        /// Listen on a Unix socket instead of stdin/stdout.
        #[arg(long)]
        socket: Option<PathBuf>,
    },
}

pub fn parse_seeds(text: &str) -> CliResult<SeedSpec> {
    let bad = || CliError::Config(format!("cannot parse seeds {text:?}; use N, A..B or a,b,c"));
    let num = |s: &str| s.trim().parse::<u64>().map_err(|_| bad());
    let t = text.trim();
    if let Some((a, b)) = t.split_once("..") {
        let (a, b) = (num(a)?, num(b)?);
        if b <= a {
            return Err(bad());
        }
        return Ok(SeedSpec {
            count: (b - a) as usize,
            start: a,
            list: None,
        });
    }
    if t.contains(',') {
        let list = t.split(',').map(num).collect::<CliResult<Vec<_>>>()?;
        return Ok(SeedSpec {
            list: Some(list),
            ..SeedSpec::default()
        });
    }
    Ok(SeedSpec {
        count: num(t)? as usize,
        start: 0,
        list: None,
    })
}

impl Overrides {
    /// Loads the config file (or preset defaults) and applies command-line overrides.
    pub fn resolve(&self) -> CliResult<PipelineConfig> {
        let mut c = match &self.config {
            Some(path) => PipelineConfig::load(path, self.preset)?,
            None => match self.preset {
                Some(p) => p.config(),
                None => PipelineConfig::default(),
            },
        };
        if let Some(o) = &self.output {
            c.output_dir = o.clone();
        }
        if let Some(w) = self.workers {
            c.workers = w;
        }
        if let Some(s) = &self.seeds {
            c.seeds = parse_seeds(s)?;
        }
        if let Some(m) = &self.method {
            c.screening.method = m.clone();
        }
        if let Some(e) = self.epsilon {
            c.oracle.epsilon = e;
        }
        if let Some(t) = self.tau_fraction {
            c.oracle.tau_fraction = t;
        }
        if let Some(t) = self.truncation {
            c.truncation = t;
        }
        c.apply_env_credentials();
        c.validate()?;
        Ok(c)
    }
}

/// Runs one command and returns the process exit code.
pub fn run(cli: &Cli) -> CliResult<i32> {
    let config = cli.overrides.resolve()?;
    let pipeline = || Pipeline::new(config.clone());
    let mut code = 0;
    match &cli.command {
        Command::Screen => pipeline()?.screen()?,
        Command::Mine => pipeline()?.mine()?,
        Command::Attribute => pipeline()?.attribute()?,
        Command::Explore => pipeline()?.explore()?,
        Command::Repair => code = repair_code(pipeline()?.repair()?),
        Command::Report => {
            let p = pipeline()?;
            print_report(&p, &p.report()?);
        }
        Command::RunAll => {
            let p = pipeline()?;
            let (mode, report) = p.run_all()?;
            code = repair_code(mode);
            print_report(&p, &report);
        }
        Command::Scenario { out } => {
            export_scenario(&config, out)?;
            println!("scenario written to {}", out.display());
        }
        Command::Serve { socket } => serve(&config, socket.as_deref())?,
    }
    Ok(code)
}

fn repair_code(mode: RepairMode) -> i32 {
    match mode {
        RepairMode::Finetuned => 0,
        RepairMode::ManifestOnly => EXIT_MANIFEST_ONLY,
    }
}

fn print_report(p: &Pipeline, r: &ReportRecord) {
    println!("seeds: {}", r.seeds);
    println!("R_relevance: {}", format_r_relevance(r.r_relevance));
    println!(
        "channels: {} relevant, {} spurious, {} undetermined",
        r.relevant_channels, r.spurious_channels, r.undetermined_channels
    );
    println!("influential inputs: {}, boundary inputs: {}", r.influential_inputs, r.boundary_inputs);
    for (name, s) in [("MS-SSIM", r.ms_ssim), ("d2_image", r.d2_image), ("d2_boundary", r.d2_boundary)] {
        match s {
            Some(s) => println!("{name}: {:.4} ± {:.4} (n={})", s.mean, s.std, s.n),
            None => println!("{name}: n/a"),
        }
    }
    if let Some(o) = &r.repair {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.1}%", 100.0 * x));
        let after = o.after.unwrap_or(o.before);
        println!(
            "repair ({:?}): generated holdout {} -> {}, original holdout {} -> {}",
            o.mode,
            pct(o.before.generated_holdout),
            pct(after.generated_holdout),
            pct(o.before.original_holdout),
            pct(after.original_holdout)
        );
    }
    if !r.deterministic {
        println!("note: attribution used a non-deterministic backend");
    }
    println!("artifacts: {}", p.layout.root.display());
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_line_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn seed_syntax() {
        assert_eq!(parse_seeds("3").unwrap().resolve(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("5..8").unwrap().resolve(), vec![5, 6, 7]);
        assert_eq!(parse_seeds("9, 2,4").unwrap().resolve(), vec![9, 2, 4]);
        assert!(parse_seeds("8..5").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn flags_override_the_config() {
        let cli = Cli::try_parse_from([
            "chanprobe",
            "screen",
            "--seeds",
            "4",
            "--method",
            "fda",
            "--epsilon",
            "3",
            "--tau-fraction",
            "0.6",
            "--truncation",
            "0.5",
        ])
        .unwrap();
        let c = cli.overrides.resolve().unwrap();
        assert_eq!(c.seeds.resolve().len(), 4);
        assert_eq!(c.screening.method, "fda");
        assert_eq!((c.oracle.epsilon, c.oracle.tau_fraction, c.truncation), (3.0, 0.6, 0.5));
    }

    #[test]
    fn invalid_override_is_a_config_error() {
        let cli = Cli::try_parse_from(["chanprobe", "screen", "--method", "lrp"]).unwrap();
        assert_eq!(cli.overrides.resolve().unwrap_err().exit_code(), 2);
    }
}
