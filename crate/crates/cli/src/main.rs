//! Command-line front end for the sit-to-stand reachability pipeline.
//!
//! Verbs map to pipeline stages (each verb runs its prerequisites, reusing
//! whatever artifacts already exist in the output directory):
//!
//! ```text
//!     sts-reach plan      --out runs/demo
//!     sts-reach lqr       --out runs/demo
//!     sts-reach reach     --out runs/demo --samples 50 --grid-hz 20
//!     sts-reach validate  --out runs/demo
//!     sts-reach report    --out runs/demo
//! ```

use clap::{Args, Parser, Subcommand};
use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;
use sts_reach::pipeline::{self, Stage};
use sts_reach::scenario::{self, Scenario};

#[derive(Parser)]
#[command(
    name = "sts-reach",
    about = "Reachable-set over-approximation for a three-link sit-to-stand robot",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan the reference trajectory (task-space blend + kinematic inversion
    /// + control allocation).
    Plan(Common),
    /// Design the finite-horizon LQR along the reference.
    Lqr(Common),
    /// Compute reachable-set over-approximations in state, output and input
    /// space.
    Reach(Common),
    /// Check fresh sampled trajectories against the reach boxes.
    Validate(Common),
    /// Run everything still missing and write the manifest.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML); defaults apply for every missing field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Restrict execution to these stages (comma-separated:
    /// plan,lqr,reach-x,reach-y,reach-u,validate). Prerequisites are added
    /// automatically.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<String>>,
    /// Seed for the bounds sample set (validation uses seed + 1).
    #[arg(long)]
    seed: Option<u64>,
    /// Sample count for both the bounds and validation sets.
    #[arg(long)]
    samples: Option<usize>,
    /// Grid frequency in Hz.
    #[arg(long)]
    grid_hz: Option<f64>,
    /// Worker threads (0 = one per core).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory for artifacts and reports.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, default_stages) = match &cli.command {
        Command::Plan(c) => (c, vec![Stage::Plan]),
        Command::Lqr(c) => (c, vec![Stage::Plan, Stage::Lqr]),
        Command::Reach(c) => (
            c,
            vec![
                Stage::Plan,
                Stage::Lqr,
                Stage::ReachX,
                Stage::ReachY,
                Stage::ReachU,
            ],
        ),
        Command::Validate(c) | Command::Report(c) => (c, Stage::ALL.to_vec()),
    };

    let mut scenario = match &common.config {
        Some(path) => match scenario::load_scenario(path) {
            Ok((s, notices)) => {
                for n in notices {
                    eprintln!("note: {n}");
                }
                s
            }
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => {
            eprintln!("note: no --config given, using the default scenario");
            Scenario::default()
        }
    };
    if let Some(seed) = common.seed {
        scenario.seed_bounds = seed;
        scenario.seed_validate = seed + 1;
    }
    if let Some(n) = common.samples {
        scenario.n_bounds = n;
        scenario.n_validate = n;
    }
    if let Some(hz) = common.grid_hz {
        scenario.grid_hz = hz;
    }
    if let Some(w) = common.workers {
        scenario.workers = w;
    }

    let stages: BTreeSet<Stage> = match &common.stages {
        Some(names) => {
            let mut set = BTreeSet::new();
            for name in names {
                match name.parse() {
                    Ok(stage) => {
                        set.insert(stage);
                    }
                    Err(e) => {
                        eprintln!("error: {e}");
                        return ExitCode::from(2);
                    }
                }
            }
            set
        }
        None => default_stages.into_iter().collect(),
    };

    match pipeline::run(&scenario, &stages, &common.out) {
        Ok(report) => {
            for t in &report.timings {
                let mark = if t.cached { " (cached)" } else { "" };
                eprintln!("{:<10} {:8.2}s{}", t.stage, t.seconds, mark);
            }
            for c in &report.containment {
                eprintln!(
                    "containment[{}]: {}/{} inside (fraction {:.6}, worst margin {:.3e})",
                    c.space.tag(),
                    c.checked - c.violations,
                    c.checked,
                    c.fraction,
                    c.worst_margin
                );
            }
            if let Some(p) = &report.manifest_path {
                eprintln!("manifest: {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
