mod server;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use ssim::analysis::{analyze_trajectories, TrialSummary, DEFAULT_MAX_LAG_FRACTION};
use ssim::config::ScenarioConfig;
use ssim::geom::Vec2;
use ssim::harness::{run_batch, run_scripted, run_trial, Script};
use ssim::record::{load_trajectory, Sample};
use ssim::steering::SessionLog;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Port used by `serve` when `--port` is absent.
pub const PORT_ENV: &str = "SSIM_PORT";
const FALLBACK_PORT: u16 = 7878;

#[derive(Parser)]
#[command(name = "ssim", version, about = "Supersmarticle locomotion simulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one trial and write its trajectory.
    Run {
        /// Scenario TOML; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the full ensemble state at every sample.
        #[arg(long)]
        poses: bool,
    },
    /// Run seeds × light placements in parallel.
    Batch {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Half-open range `A..B` or a single seed.
        #[arg(long)]
        seeds: String,
        /// `edges` for the four plate edge midpoints, or `X,Y;X,Y;...`.
        #[arg(long, default_value = "edges")]
        lights: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a light-cue script (TOML) or replay a steering session log (JSONL).
    Script {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        script: PathBuf,
        /// Overrides the config seed; ignored for session logs, which carry their own.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bias and diffusion statistics over a directory of trajectory CSVs.
    Analyze {
        /// Directory of `time,x,y` CSVs, or a single CSV.
        #[arg(long = "in")]
        input: PathBuf,
        /// Light position for trajectories without metadata.
        #[arg(long = "light-pos", value_parser = parse_point, allow_hyphen_values = true)]
        light_pos: Option<Vec2>,
        /// JSON report path; histogram and MSD CSVs go beside it.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_LAG_FRACTION)]
        max_lag_fraction: f64,
    },
    /// Live steering server speaking ssim/1 over TCP.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Falls back to $SSIM_PORT, then 7878. `0` picks a free port.
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// Where session logs are written, one file per reset.
        #[arg(long, default_value = "session-logs")]
        log_dir: PathBuf,
        #[arg(long, default_value_t = ssim::steering::DEFAULT_SNAPSHOT_HZ)]
        snapshot_hz: f64,
    },
    /// Print the built-in default scenario as TOML.
    DefaultConfig,
}

fn parse_point(s: &str) -> std::result::Result<Vec2, String> {
    let (x, y) = s.split_once(',').ok_or_else(|| format!("expected X,Y, got `{s}`"))?;
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("bad coordinate `{t}`"));
    Ok(Vec2::new(num(x)?, num(y)?))
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let num = |t: &str| t.trim().parse::<u64>().with_context(|| format!("bad seed `{t}`"));
    match s.split_once("..") {
        Some((a, b)) => {
            let (a, b) = (num(a)?, num(b)?);
            if b <= a {
                bail!("empty seed range `{s}`");
            }
            Ok((a..b).collect())
        }
        None => Ok(vec![num(s)?]),
    }
}

fn parse_placements(s: &str, cfg: &ScenarioConfig) -> Result<Vec<Vec2>> {
    if s == "edges" {
        return Ok(cfg.edge_midpoints().to_vec());
    }
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| parse_point(p).map_err(|e| anyhow!(e)))
        .collect()
}

fn load_config(path: Option<&Path>) -> Result<ScenarioConfig> {
    let cfg = match path {
        Some(p) => ScenarioConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ScenarioConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct BatchIndexRow {
    file: Option<String>,
    seed: u64,
    placement: usize,
    light_x: f64,
    light_y: f64,
    error: Option<String>,
}

fn cmd_batch(config: Option<&Path>, seeds: &str, lights: &str, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let seeds = parse_seeds(seeds)?;
    let placements = parse_placements(lights, &cfg)?;
    let trials = run_batch(&cfg, &seeds, &placements)?;
    let mut index = Vec::new();
    let mut failures = 0;
    for t in &trials {
        let stem = format!("trial_s{}_p{}", t.seed, t.placement);
        let (file, error) = match &t.outcome {
            Ok(rec) => {
                rec.write_files(out, &stem)?;
                (Some(format!("{stem}.csv")), None)
            }
            Err(e) => {
                failures += 1;
                eprintln!("seed {} placement {}: {e}", t.seed, t.placement);
                (None, Some(e.clone()))
            }
        };
        index.push(BatchIndexRow {
            file,
            seed: t.seed,
            placement: t.placement,
            light_x: t.light_position.x,
            light_y: t.light_position.y,
            error,
        });
    }
    std::fs::write(out.join("batch.json"), serde_json::to_string_pretty(&index)? + "\n")?;
    println!("{} trials, {failures} failed, written to {}", trials.len(), out.display());
    if failures > 0 {
        bail!("{failures} of {} trials failed", trials.len());
    }
    Ok(())
}

fn cmd_script(config: Option<&Path>, script: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    let text = std::fs::read_to_string(script).with_context(|| format!("reading {}", script.display()))?;
    let is_log = script.extension().is_some_and(|e| e == "jsonl");
    let script = if is_log {
        let log = SessionLog::from_jsonl(&text)?;
        cfg.rng_seed = log.seed;
        if log.config_hash != cfg.hash() {
            eprintln!("warning: session log was recorded under config {}, replaying under {}", log.config_hash, cfg.hash());
        }
        log.to_script()?
    } else {
        if let Some(s) = seed {
            cfg.rng_seed = s;
        }
        Script::from_toml(&text)?
    };
    let rec = run_scripted(&cfg, &script)?;
    let path = rec.write_files(out, "trajectory")?;
    println!("{:?} after {:.1} s: {}", rec.meta.termination_reason, rec.duration(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct TrialRow {
    file: String,
    light_x: f64,
    light_y: f64,
    samples: usize,
    /// `None` when the net displacement is too small to define an angle.
    summary: Option<TrialSummary>,
}

#[derive(Serialize)]
struct Report {
    stats: ssim::analysis::BatchStats,
    drift_share_at_max_lag: Option<f64>,
    trials: Vec<TrialRow>,
}

fn trajectory_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            name.ends_with(".csv") && !name.ends_with(".msd.csv") && !name.ends_with(".histogram.csv")
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no trajectory CSVs in {}", input.display());
    }
    Ok(files)
}

fn cmd_analyze(input: &Path, light_pos: Option<Vec2>, report: &Path, max_lag_fraction: f64) -> Result<()> {
    let mut loaded: Vec<(String, Vec<Sample>, Vec2)> = Vec::new();
    for f in trajectory_files(input)? {
        let (samples, meta) = load_trajectory(&f).with_context(|| format!("loading {}", f.display()))?;
        let light = meta
            .and_then(|m| m.light_positions.first().copied())
            .or(light_pos)
            .ok_or_else(|| anyhow!("{}: no light position in metadata and no --light-pos", f.display()))?;
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        loaded.push((name, samples, light));
    }
    let pairs: Vec<(&[Sample], Vec2)> = loaded.iter().map(|(_, s, l)| (s.as_slice(), *l)).collect();
    let analysis = analyze_trajectories(&pairs, max_lag_fraction)?;
    let max_lag = analysis.mean_msd.lags.last().copied().unwrap_or(0.0);
    let out = Report {
        stats: analysis.stats.clone(),
        drift_share_at_max_lag: analysis.fit.map(|f| f.drift_share(max_lag)),
        trials: loaded
            .iter()
            .zip(&analysis.trials)
            .map(|((file, samples, light), summary)| TrialRow {
                file: file.clone(),
                light_x: light.x,
                light_y: light.y,
                samples: samples.len(),
                summary: *summary,
            })
            .collect(),
    };
    if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(report, serde_json::to_string_pretty(&out)? + "\n")?;
    let stem = report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    analysis.stats.write_histogram_csv(&report.with_file_name(format!("{stem}.histogram.csv")))?;
    analysis.mean_msd.write_csv(&report.with_file_name(format!("{stem}.msd.csv")))?;
    let s = &analysis.stats;
    println!(
        "{}/{} toward (binomial p = {:.3e}), {} degenerate, Rayleigh p = {:.3e}",
        s.toward_count, s.total, s.binomial_p, s.degenerate, s.rayleigh_p
    );
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Run { config, seed, out, poses } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.rng_seed = s;
            }
            cfg.record_poses |= poses;
            let rec = run_trial(&cfg)?;
            let path = rec.write_files(&out, "trajectory")?;
            println!("{:?} after {:.1} s: {}", rec.meta.termination_reason, rec.duration(), path.display());
            Ok(())
        }
        Cmd::Batch { config, seeds, lights, out } => cmd_batch(config.as_deref(), &seeds, &lights, &out),
        Cmd::Script { config, script, seed, out } => cmd_script(config.as_deref(), &script, seed, &out),
        Cmd::Analyze {
            input,
            light_pos,
            report,
            max_lag_fraction,
        } => cmd_analyze(&input, light_pos, &report, max_lag_fraction),
        Cmd::Serve {
            config,
            port,
            bind,
            log_dir,
            snapshot_hz,
        } => {
            let cfg = load_config(config.as_deref())?;
            let port = match port {
                Some(p) => p,
                None => match std::env::var(PORT_ENV) {
                    Ok(v) => v.parse().with_context(|| format!("${PORT_ENV} is not a port: `{v}`"))?,
                    Err(_) => FALLBACK_PORT,
                },
            };
            if !(snapshot_hz > 0.0) {
                bail!("--snapshot-hz must be positive");
            }
            server::serve(cfg, &format!("{bind}:{port}"), &log_dir, snapshot_hz)
        }
        Cmd::DefaultConfig => {
            print!("{}", ScenarioConfig::default().to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
