use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use plasticity_lab::agent::checkpoint::{Archive, Entry};
use plasticity_lab::harness::config::{parse_seeds, ExperimentConfig, OUTPUT_ROOT_VAR};
use plasticity_lab::harness::plot::{plot, PlotKind};
use plasticity_lab::harness::run::run_experiment;

#[derive(Parser)]
#[command(name = "plab", version, about = "Plasticity experiments on pixel control tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every arm and seed of an experiment config.
    Run {
        config: PathBuf,
        /// Seeds, e.g. `1,2,3` or `1..5`; overrides the config's list.
        #[arg(long)]
        seed: Option<String>,
        /// Config override `section.key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Concurrent runs.
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
    },
    /// Draw mean ± std curves from metrics CSVs.
    Plot {
        /// Glob selecting metrics files, e.g. `runs/exp/*.csv`.
        pattern: String,
        #[arg(long, default_value = "return")]
        kind: PlotKind,
        /// Output file; defaults to `<kind>.svg` next to the first input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the contents of a checkpoint.
    Inspect { checkpoint: PathBuf },
    /// Print the default configuration.
    DefaultConfig,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            mut overrides,
            jobs,
        } => {
            if let Some(spec) = seed {
                let seeds = parse_seeds(&spec)?;
                let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
                overrides.push(format!("seeds=[{}]", list.join(",")));
            }
            let cfg = ExperimentConfig::load(&config, &overrides)
                .with_context(|| format!("loading {}", config.display()))?;
            let out = cfg.output_root();
            eprintln!(
                "{}: protocol {}, {} seed(s), writing to {} (set {OUTPUT_ROOT_VAR} to relocate)",
                cfg.name,
                cfg.protocol.as_str(),
                cfg.seeds.len(),
                out.display()
            );
            for s in run_experiment(&cfg, jobs)? {
                let switch = s
                    .controller
                    .switch_step
                    .map_or_else(|| "-".to_string(), |x| x.to_string());
                println!(
                    "{:<14} seed {:<4} final return {:>8.2}  updates {:>7}  rr switch {:>6}  {:.0}s",
                    s.arm,
                    s.seed,
                    s.final_return(10).unwrap_or(f64::NAN),
                    s.controller_updates,
                    switch,
                    s.wall_secs
                );
            }
        }
        Command::Plot { pattern, kind, out } => {
            let mut paths: Vec<PathBuf> = glob::glob(&pattern)
                .with_context(|| format!("bad glob '{pattern}'"))?
                .collect::<std::result::Result<_, _>>()?;
            paths.sort();
            if paths.is_empty() {
                bail!("no files match '{pattern}'");
            }
            let svg = plot(&paths, kind)?;
            let out = out.unwrap_or_else(|| {
                let name = match kind {
                    PlotKind::Return => "return.svg",
                    PlotKind::Fau => "fau.svg",
                };
                paths[0].with_file_name(name)
            });
            std::fs::write(&out, svg).with_context(|| format!("writing {}", out.display()))?;
            println!("{}", out.display());
        }
        Command::Inspect { checkpoint } => {
            let a = Archive::read(&checkpoint)?;
            for (key, entry) in &a.entries {
                match entry {
                    Entry::Array { shape, data } => {
                        let norm = data.iter().map(|x| x * x).sum::<f64>().sqrt();
                        println!("{key:<48} {shape:?}  |x|={norm:.4}");
                    }
                    Entry::Counter(c) => println!("{key:<48} {c}"),
                }
            }
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml_string()?),
    }
    Ok(())
}
