//! Runs a full experiment and prints the report.
//!
//! `cargo run --release --example experiment -- [config.toml] [out_dir]`

use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context;
use cotprompt::experiment::{run_experiment, ExperimentConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let config: ExperimentConfig = match args.next() {
        Some(path) => {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {path}"))?;
            toml::from_str(&text).with_context(|| format!("parsing {path}"))?
        }
        None => ExperimentConfig::default(),
    };
    let out = args.next().map(PathBuf::from);
    let start = Instant::now();
    let mut log = |m: &str| eprintln!("[{:>7.1}s] {m}", start.elapsed().as_secs_f64());
    let report = run_experiment(&config, out.as_deref(), &mut log)?;
    print!("{}", report.to_text());
    if let Some(dir) = out {
        report.write(&dir)?;
    }
    Ok(())
}
