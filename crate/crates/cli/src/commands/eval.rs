use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use efem::engine::Report;
use efem::evalkit::{evaluate, format_table, ApReport, Prediction};
use efem::scenegen::{gt_index_sets, read_ground_truth};

use crate::error::CliError;
use crate::manifest::write_atomic;
use crate::GlobalArgs;

pub const RESULTS_JSON: &str = "results.json";
pub const RESULTS_TXT: &str = "results.txt";

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Glob of `<id>.report.json` files.
    #[arg(long)]
    reports: String,
    /// Glob of `<id>.gt.json` files.
    #[arg(long)]
    gt: String,
    /// Row label for the table.
    #[arg(long, default_value = "scenes")]
    setup: String,
    /// Column label for the table.
    #[arg(long, default_value = "efem")]
    method: String,
}

#[derive(Debug, Serialize)]
struct Results<'a> {
    setup: &'a str,
    method: &'a str,
    scene_ids: Vec<&'a String>,
    report: &'a ApReport,
}

fn by_id(pattern: &str, suffix: &str) -> Result<BTreeMap<String, PathBuf>, CliError> {
    let paths = glob::glob(pattern).map_err(|e| CliError::user(format!("bad glob {pattern:?}: {e}")))?;
    let mut out = BTreeMap::new();
    for p in paths {
        let p = p.map_err(|e| CliError::user(e.to_string()))?;
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let id = name
            .strip_suffix(suffix)
            .or_else(|| name.strip_suffix(".json"))
            .unwrap_or(&name)
            .to_owned();
        if let Some(prev) = out.insert(id.clone(), p.clone()) {
            return Err(CliError::user(format!("scene id {id} matches both {} and {}", prev.display(), p.display())));
        }
    }
    Ok(out)
}

fn load(report: &Path, gt: &Path) -> Result<(Vec<Prediction>, Vec<Vec<usize>>), CliError> {
    let text = std::fs::read(report).map_err(|e| CliError::from(e).context(report.display()))?;
    let r: Report = serde_json::from_slice(&text).map_err(|e| CliError::user(format!("{}: {e}", report.display())))?;
    let gt = read_ground_truth(gt).map_err(|e| CliError::from(e).context(gt.display()))?;
    let n = gt.point_ids.len();
    let preds = r
        .instances
        .into_iter()
        .map(|i| {
            if let Some(bad) = i.point_indices.iter().find(|&&p| p >= n) {
                return Err(CliError::user(format!("{}: point index {bad} out of range for {n} points", report.display())));
            }
            Ok(Prediction {
                points: i.point_indices,
                confidence: i.confidence,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok((preds, gt_index_sets(&gt)))
}

pub fn run(g: &GlobalArgs, args: EvalArgs) -> Result<(), CliError> {
    let reports = by_id(&args.reports, ".report.json")?;
    let gts = by_id(&args.gt, ".gt.json")?;
    if reports.is_empty() {
        return Err(CliError::user(format!("no reports match {:?}", args.reports)));
    }
    let missing_gt: Vec<&String> = reports.keys().filter(|k| !gts.contains_key(*k)).collect();
    let missing_report: Vec<&String> = gts.keys().filter(|k| !reports.contains_key(*k)).collect();
    if !missing_gt.is_empty() || !missing_report.is_empty() {
        return Err(CliError::user(format!(
            "unmatched scene ids: reports without ground truth {missing_gt:?}, ground truth without reports {missing_report:?}"
        )));
    }
    let ids: Vec<&String> = reports.keys().collect();
    let scenes = ids
        .par_iter()
        .map(|id| load(&reports[*id], &gts[*id]))
        .collect::<Result<Vec<_>, _>>()?;
    let report = evaluate(&scenes);
    let table = format_table(&[(args.setup.clone(), args.method.clone(), report.clone())]);
    print!("{table}");
    if let Some(dir) = &g.out {
        std::fs::create_dir_all(dir)?;
        let results = Results {
            setup: &args.setup,
            method: &args.method,
            scene_ids: ids,
            report: &report,
        };
        write_atomic(&dir.join(RESULTS_JSON), &serde_json::to_vec_pretty(&results)?)?;
        write_atomic(&dir.join(RESULTS_TXT), table.as_bytes())?;
    }
    Ok(())
}
