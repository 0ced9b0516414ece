//! Runs every ablation variant on the synthetic shift task over five seeds.
//!
//! ```text
//! cargo run --release -p dynalign --example synth_sweep -- configs/synth_gain.toml
//! ```

use std::path::PathBuf;

use dynalign::config::parse_config;
use dynalign::eval::{evaluate, mean_std, Variant};
use dynalign::synth::generate_synth_shift;
use dynalign::trainer::train;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("configs/synth_gain.toml"));
    let base = parse_config(&path)?;
    for variant in Variant::ALL {
        let mut accs = Vec::new();
        for k in 0..5 {
            let mut cfg = base.clone();
            cfg.seed = base.seed + k;
            cfg.synth.seed = base.synth.seed + k;
            cfg.variant = variant;
            let task = generate_synth_shift(&cfg.synth)?;
            let out = train(&task.source, &task.target, &cfg.train_config())?;
            accs.push(evaluate(&out.params, &task.target_labels.reveal(&task.target)?)?.accuracy);
        }
        let (mean, std) = mean_std(&accs);
        let per_seed: Vec<String> = accs.iter().map(|a| format!("{:.3}", a)).collect();
        println!(
            "{variant}  {:.2} ± {:.2}  [{}]",
            100.0 * mean,
            100.0 * std,
            per_seed.join(", ")
        );
    }
    Ok(())
}
