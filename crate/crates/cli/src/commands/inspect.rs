use std::path::PathBuf;

use clap::Args;

use efem::prior::{LatentLibrary, LearnedPrior};

use crate::error::CliError;
use crate::GlobalArgs;

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// A prior checkpoint or a shape library.
    path: PathBuf,
}

pub fn run(_: &GlobalArgs, args: InspectArgs) -> Result<(), CliError> {
    let summary = match LatentLibrary::load_file(&args.path) {
        Ok(lib) => serde_json::json!({
            "kind": "library",
            "entries": lib.len(),
            "code_channels": lib.entries.first().map(|e| e.code.theta_r.len()),
            "invariant_dims": lib.entries.first().map(|e| e.code.theta_inv.len()),
        }),
        Err(lib_err) => match LearnedPrior::load_file(&args.path) {
            Ok(model) => serde_json::json!({
                "kind": "checkpoint",
                "topology": model.topology,
                "parameters": model.param_count(),
            }),
            Err(ck_err) => {
                return Err(CliError::user(format!(
                    "{}: neither a library ({lib_err}) nor a checkpoint ({ck_err})",
                    args.path.display()
                )))
            }
        },
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
