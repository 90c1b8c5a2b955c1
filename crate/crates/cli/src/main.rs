//! `certimap`: run scenarios, sweep covariances, and expose brute-force oracles.

mod oracle;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use certimap::esdf::write_snapshot;
use certimap::eval::{
    check_assertions, report_json, run_experiment_with, run_rover_pair, series_csv, summary_csv, summary_table, sweep,
    sweep_csv, EvalError, PolicyMap,
};
use certimap::sim::scenario::{KappaSpec, Policy, Scenario, ScenarioError, SigmaSpec};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "certimap", version, about = "Certified obstacle maps under odometry drift")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every configured policy in lockstep and write the report.
    Run {
        #[command(flatten)]
        cfg: RunConfig,
        /// Write map snapshots every N frames (0 disables).
        #[arg(long, default_value_t = 0)]
        snapshot_every: usize,
    },
    /// Repeat a run for each `sigma^2` (as `sigma^2 * I`) and write sweep.csv.
    Sweep {
        #[command(flatten)]
        cfg: RunConfig,
        #[arg(long, value_delimiter = ',', required = true)]
        sigmas: Vec<f64>,
    },
    /// Closed-loop rover mission with the baseline and certified ESDF.
    Rover {
        #[command(flatten)]
        cfg: RunConfig,
    },
    /// Check scenario files and print diagnostics.
    Validate {
        #[arg(required = true)]
        scenarios: Vec<String>,
    },
    /// Brute-force reference computations.
    Oracle {
        #[command(subcommand)]
        cmd: oracle::OracleCmd,
    },
}

#[derive(Args)]
struct RunConfig {
    /// Scenario file, or a preset name (room, corridor).
    #[arg(long)]
    scenario: String,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Restrict to these policies (repeatable or comma separated).
    #[arg(long, value_delimiter = ',')]
    policy: Vec<Policy>,
    /// Incremental covariance `s * I`.
    #[arg(long)]
    sigma: Option<f64>,
    /// A number, or `autoP` for the chi-square quantile (e.g. auto97).
    #[arg(long)]
    kappa: Option<KappaSpec>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    voxel_size: Option<f64>,
    #[arg(long)]
    frames: Option<usize>,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    /// Bad input: exit 2.
    Usage(String),
    /// Runtime failure: exit 1.
    Runtime(String),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Scenario(s) => s.into(),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl RunConfig {
    fn scenario(&self) -> Result<Scenario, Failure> {
        let mut s = Scenario::load(&self.scenario)?;
        if !self.policy.is_empty() {
            s.policies = self.policy.clone();
        }
        if let Some(v) = self.sigma {
            s.sigma = SigmaSpec::Scalar(v);
        }
        if let Some(k) = self.kappa {
            s.kappa = k;
        }
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        if let Some(v) = self.voxel_size {
            s.mapping.voxel_size = v;
        }
        if let Some(n) = self.frames {
            s.trajectory.frames = n;
        }
        s.validate()?;
        Ok(s)
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn cmd_run(cfg: &RunConfig, snapshot_every: usize) -> Result<bool, Failure> {
    let scn = cfg.scenario()?;
    fs::create_dir_all(&cfg.out)?;
    let snap_dir = cfg.out.join("snapshots");
    if snapshot_every > 0 {
        fs::create_dir_all(&snap_dir)?;
    }
    let mut snap_err: Option<std::io::Error> = None;
    let mut hook = |k: usize, _: &_, _: &_, maps: &[(Policy, PolicyMap)]| {
        if snapshot_every == 0 || !k.is_multiple_of(snapshot_every) || snap_err.is_some() {
            return;
        }
        for (p, m) in maps {
            let res = match m {
                PolicyMap::Esdf(m) => fs::File::create(snap_dir.join(format!("{}_{k:06}.bin", p.name())))
                    .and_then(|f| write_snapshot(&m.grid, std::io::BufWriter::new(f))),
                PolicyMap::Sfc(m) => fs::write(
                    snap_dir.join(format!("{}_{k:06}.json", p.name())),
                    serde_json::to_string(m).expect("corridor serializes"),
                ),
            };
            if let Err(e) = res {
                snap_err = Some(e);
            }
        }
    };
    let (report, _) = run_experiment_with(&scn, Some(&mut hook))?;
    if let Some(e) = snap_err {
        return Err(e.into());
    }
    write(&cfg.out, "report.json", &report_json(&report))?;
    write(&cfg.out, "summary.csv", &summary_csv(&report))?;
    for s in &report.series {
        write(&cfg.out, &format!("series_{}.csv", s.policy.name()), &series_csv(s))?;
    }
    print!("{}", summary_table(&report));
    println!("kappa {:.4}, seed {}", report.kappa, report.seed);
    let failures = check_assertions(&report);
    for f in &failures {
        eprintln!("assertion failed: {} {:?} = {} (expected {})", f.policy.name(), f.metric, f.value, f.bound);
    }
    Ok(failures.is_empty())
}

fn cmd_sweep(cfg: &RunConfig, sigmas: &[f64]) -> Result<bool, Failure> {
    let scn = cfg.scenario()?;
    if let Some(bad) = sigmas.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Failure::Usage(format!("sigma^2 must be finite and non-negative, got {bad}")));
    }
    fs::create_dir_all(&cfg.out)?;
    let rows = sweep(&scn, sigmas)?;
    let text = sweep_csv(&rows);
    write(&cfg.out, "sweep.csv", &text)?;
    print!("{text}");
    Ok(true)
}

fn cmd_rover(cfg: &RunConfig) -> Result<bool, Failure> {
    let scn = cfg.scenario()?;
    let r = run_rover_pair(&scn)?;
    let text = serde_json::to_string_pretty(&r).expect("report serializes");
    fs::create_dir_all(&cfg.out)?;
    write(&cfg.out, "rover.json", &text)?;
    println!("{text}");
    Ok(true)
}

fn cmd_validate(paths: &[String]) -> Result<bool, Failure> {
    let mut ok = true;
    for p in paths {
        match Scenario::load(p) {
            Ok(s) => println!("{p}: ok ({}, {} frames, {} policies)", s.name, s.trajectory.frames, s.policies.len()),
            Err(e) => {
                ok = false;
                eprintln!("{p}: {e}");
            }
        }
    }
    if ok {
        Ok(true)
    } else {
        Err(Failure::Usage("validation failed".into()))
    }
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("CERTIMAP_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| Failure::Usage(format!("CERTIMAP_THREADS must be an integer, got '{v}'")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = init_threads().and_then(|()| match &cli.cmd {
        Cmd::Run { cfg, snapshot_every } => cmd_run(cfg, *snapshot_every),
        Cmd::Sweep { cfg, sigmas } => cmd_sweep(cfg, sigmas),
        Cmd::Rover { cfg } => cmd_rover(cfg),
        Cmd::Validate { scenarios } => cmd_validate(scenarios),
        Cmd::Oracle { cmd } => oracle::run(cmd).map_err(Failure::Usage),
    });
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
