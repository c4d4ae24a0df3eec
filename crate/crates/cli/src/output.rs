//! Provenance records and small file-writing helpers shared by commands.

use std::path::Path;

use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const PROVENANCE_NAME: &str = "provenance.json";

#[derive(Serialize)]
struct Provenance<'a, F: Serialize> {
    tool: &'static str,
    tool_version: &'static str,
    command: &'a str,
    seed: Option<u64>,
    flags: &'a F,
    formats: Formats,
}

#[derive(Serialize)]
struct Formats {
    model_manifest: u32,
    tensor: &'static str,
    image: &'static str,
    csv_float: &'static str,
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::Data(format!(
            "cannot create output directory {}: {e}",
            dir.display()
        ))
    })
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_provenance<F: Serialize>(
    dir: &Path,
    command: &str,
    seed: Option<u64>,
    flags: &F,
) -> CliResult<()> {
    write_json(
        &dir.join(PROVENANCE_NAME),
        &Provenance {
            tool: "saliency",
            tool_version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            flags,
            formats: Formats {
                model_manifest: saliency::netgraph::MANIFEST_FORMAT_VERSION,
                tensor: "TNSR v1 (f64 little-endian)",
                image: "PGM P5 8-bit",
                csv_float: "9 significant digits",
            },
        },
    )
}

pub fn csv_writer(path: &Path) -> CliResult<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))
}

pub fn finish_csv(mut w: csv::Writer<std::fs::File>, path: &Path) -> CliResult<()> {
    w.flush()
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}
