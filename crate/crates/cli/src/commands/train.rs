use std::fmt::Write as _;

use clap::Args;
use serde::Serialize;

use efem::training::{heldout_sdf_error, train, TrainConfig};

use crate::error::CliError;
use crate::manifest::{out_dir, read_config, write_atomic, RunManifest};
use crate::GlobalArgs;

pub const CHECKPOINT: &str = "prior.ckpt";
pub const LIBRARY: &str = "library.lib";
pub const LOSS_CSV: &str = "loss.csv";
pub const SUMMARY: &str = "summary.json";

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Overrides `steps` in the config.
    #[arg(long)]
    steps: Option<usize>,
    /// Held-out shapes scored after training.
    #[arg(long, default_value_t = 32)]
    heldout_shapes: usize,
}

#[derive(Debug, Serialize)]
struct Summary {
    steps: usize,
    final_loss: Option<f64>,
    heldout_sdf_error: f64,
    divergence_steps: usize,
    parameters: usize,
}

pub fn run(g: &GlobalArgs, args: TrainArgs) -> Result<(), CliError> {
    let mut cfg: TrainConfig = read_config(&g.config)?;
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let dir = out_dir(&g.out)?;
    let outputs = [CHECKPOINT, LIBRARY, LOSS_CSV, SUMMARY].iter().map(|f| dir.join(f)).collect();
    let manifest = RunManifest::new("train", &cfg, cfg.seed, outputs)?;
    manifest.write(dir)?;

    log::info!("training for {} steps", cfg.steps);
    let out = train(&cfg, |s| {
        if s.step % 100 == 0 {
            log::info!("step {} loss {:.5} mse {:.5}", s.step, s.loss, s.mse);
        }
    })?;
    out.model.save_file(&dir.join(CHECKPOINT))?;
    out.library.save_file(&dir.join(LIBRARY))?;

    let mut csv = String::from("step,loss,mse,lambda\n");
    for s in &out.log {
        writeln!(csv, "{},{},{},{}", s.step, s.loss, s.mse, s.lambda).expect("string write");
    }
    write_atomic(&dir.join(LOSS_CSV), csv.as_bytes())?;

    let heldout = heldout_sdf_error(&out.model, &cfg, args.heldout_shapes)?;
    log::info!("held-out mean |SDF error| {heldout:.5}");
    let summary = Summary {
        steps: cfg.steps,
        final_loss: out.log.last().map(|s| s.loss),
        heldout_sdf_error: heldout,
        divergence_steps: out.divergence_steps,
        parameters: out.model.param_count(),
    };
    write_atomic(&dir.join(SUMMARY), &serde_json::to_vec_pretty(&summary)?)?;
    manifest.finish(dir)
}
