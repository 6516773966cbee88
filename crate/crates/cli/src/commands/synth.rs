use clap::Args;
use rayon::prelude::*;

use efem::scenegen::{generate, write_scene, SceneSpec, Setup};

use crate::error::CliError;
use crate::manifest::{out_dir, read_config, RunManifest};
use crate::GlobalArgs;

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scenes to write; scene `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Overrides `setup` in the config: z, so3 or pile.
    #[arg(long)]
    setup: Option<String>,
}

pub fn scene_stem(i: usize) -> String {
    format!("scene_{i:04}")
}

pub fn run(g: &GlobalArgs, args: SynthArgs) -> Result<(), CliError> {
    let mut spec: SceneSpec = read_config(&g.config)?;
    if let Some(seed) = g.seed {
        spec.seed = seed;
    }
    if let Some(s) = &args.setup {
        spec.setup = match s.to_ascii_lowercase().as_str() {
            "z" => Setup::Z,
            "so3" => Setup::SO3,
            "pile" => Setup::Pile,
            other => return Err(CliError::user(format!("unknown setup {other:?}; expected z, so3 or pile"))),
        };
    }
    spec.validate()?;
    let dir = out_dir(&g.out)?;
    let outputs = (0..args.count)
        .flat_map(|i| [".ply", ".gt.json"].map(|ext| dir.join(format!("{}{ext}", scene_stem(i)))))
        .collect();
    let manifest = RunManifest::new("synth", &spec, spec.seed, outputs)?;
    manifest.write(dir)?;

    let results: Vec<Result<(), CliError>> = (0..args.count)
        .into_par_iter()
        .map(|i| {
            let spec_i = SceneSpec {
                seed: spec.seed.wrapping_add(i as u64),
                ..spec.clone()
            };
            let (cloud, gt) = generate(&spec_i)?;
            write_scene(dir, &scene_stem(i), &cloud, &gt)?;
            Ok(())
        })
        .collect();
    for (i, r) in results.into_iter().enumerate() {
        r.map_err(|e| e.context(format!("scene {i}")))?;
    }
    log::info!("wrote {} scenes to {}", args.count, dir.display());
    manifest.finish(dir)
}
