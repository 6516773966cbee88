use std::path::{Path, PathBuf};

use clap::Args;

use efem::engine::{run as run_engine, EngineConfig};
use efem::geometry::obj::write_obj_file;
use efem::geometry::ply::{read_ply_file, PlyError};
use efem::prior::{LatentLibrary, PriorModel};

use crate::commands::train::LIBRARY;
use crate::error::CliError;
use crate::manifest::{out_dir, read_config, write_atomic, RunManifest};
use crate::GlobalArgs;

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Scene PLY with positions and normals.
    scene: PathBuf,
    /// `oracle:sphere` or a checkpoint path.
    #[arg(long, default_value = "oracle:sphere")]
    prior: String,
    /// Shape library for poses; defaults to `library.lib` beside the checkpoint.
    #[arg(long)]
    library: Option<PathBuf>,
    /// Skip the joint phase-2 iterations.
    #[arg(long)]
    no_phase2: bool,
    /// Ignore normals in the fitting error.
    #[arg(long)]
    no_normals: bool,
    /// Give every point to at most one instance.
    #[arg(long)]
    disjoint_masks: bool,
    /// Do not write instance meshes.
    #[arg(long)]
    no_meshes: bool,
}

/// Scene file name without `.ply`.
fn scene_id(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.strip_suffix(".ply").map(str::to_owned).unwrap_or(name)
}

pub fn report_name(id: &str) -> String {
    format!("{id}.report.json")
}

pub fn run(g: &GlobalArgs, args: SegmentArgs) -> Result<(), CliError> {
    let mut cfg: EngineConfig = read_config(&g.config)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.use_phase2 &= !args.no_phase2;
    cfg.use_normals &= !args.no_normals;
    cfg.disjoint_masks |= args.disjoint_masks;
    cfg.validate()?;

    let scene = read_ply_file(&args.scene).map_err(|e| match e {
        PlyError::MissingProperty(p) => CliError::user(format!(
            "{}: property `{p}` is missing; segmentation needs positions and normals",
            args.scene.display()
        )),
        other => CliError::from(other).context(args.scene.display()),
    })?;
    let prior = PriorModel::load(&args.prior).map_err(|e| CliError::user(format!("prior {}: {e}", args.prior)))?;
    let library_path = args.library.clone().or_else(|| {
        if prior.is_analytic() {
            return None;
        }
        let sibling = Path::new(&args.prior).with_file_name(LIBRARY);
        sibling.exists().then_some(sibling)
    });
    let library = match &library_path {
        Some(p) => Some(LatentLibrary::load_file(p).map_err(|e| CliError::user(format!("library {}: {e}", p.display())))?),
        None => None,
    };

    let dir = out_dir(&g.out)?;
    let id = scene_id(&args.scene);
    let report_path = dir.join(report_name(&id));
    let manifest_cfg = serde_json::json!({
        "engine": cfg,
        "scene": args.scene,
        "prior": args.prior,
        "library": library_path,
    });
    let manifest = RunManifest::new("segment", &manifest_cfg, cfg.seed, vec![report_path.clone()])?;
    manifest.write(dir)?;

    log::info!("segmenting {} points with {}", scene.len(), prior.name());
    let seg = run_engine(&scene, &prior, library.as_ref(), &cfg)?;
    log::info!("{} instances; {:?}", seg.instances.len(), seg.diagnostics);

    let mut mesh_files = Vec::with_capacity(seg.instances.len());
    for (k, inst) in seg.instances.iter().enumerate() {
        if args.no_meshes || inst.mesh.is_empty() {
            mesh_files.push(None);
            continue;
        }
        let name = format!("{id}.inst{k:02}.obj");
        write_obj_file(&inst.mesh, &dir.join(&name)).map_err(|e| CliError::from(e).context(&name))?;
        mesh_files.push(Some(name));
    }
    let report = seg.to_report(&mesh_files);
    write_atomic(&report_path, &serde_json::to_vec_pretty(&report)?)?;
    manifest.finish(dir)
}
