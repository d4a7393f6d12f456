use std::fs;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;

use airfl_cli::config::{self, apply_patch, parse_config};
use airfl_cli::runner;

/// Federated learning simulator with over-the-air aggregation.
#[derive(Parser, Debug)]
#[command(name = "airfl", version)]
struct Args {
    /// Path to a TOML experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<String>,

    /// Name of a built-in experiment preset.
    #[arg(long)]
    preset: Option<String>,

    /// Override the master RNG seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long)]
    out: Option<String>,

    /// List the built-in presets and exit.
    #[arg(long)]
    list_presets: bool,
}

fn main() -> ExitCode {
    match real_main() {
        Ok(ok) => {
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<bool> {
    let args = Args::parse();

    if args.list_presets {
        for (name, _) in config::PRESETS {
            println!("{name}");
        }
        return Ok(true);
    }

    let text = match (&args.config, &args.preset) {
        (Some(path), None) => {
            fs::read_to_string(path).with_context(|| format!("reading {path}"))?.to_string()
        }
        (None, Some(name)) => config::preset(name)?.to_string(),
        (None, None) => bail!("one of --config or --preset is required (or --list-presets)"),
        (Some(_), Some(_)) => unreachable!("clap enforces exclusivity"),
    };

    let mut base: toml::Value =
        toml::from_str(&text).context("config is not valid TOML")?;
    if let Some(seed) = args.seed {
        apply_patch(&mut base, "run.master_seed", &toml::Value::Integer(seed as i64))?;
    }
    if let Some(out) = &args.out {
        apply_patch(&mut base, "output.dir", &toml::Value::String(out.clone()))?;
    }
    // Re-serialize so the patched document also drives per-cell parsing.
    let patched = toml::to_string(&base)?;
    let doc = parse_config(&patched)?;
    let base: toml::Value = toml::from_str(&patched)?;

    let (summary, all_ok) = runner::run(&doc, &base)?;
    for cell in &summary.cells {
        match &cell.error {
            None => println!(
                "{}: ok ({} rounds, final gap {:?})",
                cell.cell, cell.rounds, cell.final_gap
            ),
            Some(err) => eprintln!("{}: error: {err}", cell.cell),
        }
    }
    Ok(all_ok)
}
