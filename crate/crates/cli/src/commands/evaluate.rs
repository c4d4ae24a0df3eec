use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::Serialize;

use saliency::eval::{aggregate, iou, sort_records, write_records_csv, EvalReport, IouRecord};
use saliency::heatmap::{
    load_mask, normalize, threshold, Heatmap, MaskSource, Method, SegmentationMask, DEFAULT_TAU,
};
use saliency::netgraph::load_model;
use saliency::tensor::load_tnsr;

use super::{all_taus, parse_tau, tau_tag};
use crate::commands::predict;
use crate::dataset;
use crate::error::{CliError, CliResult};
use crate::output;

pub const RECORDS: &str = "records.csv";
pub const SUMMARY: &str = "summary.json";

#[derive(Debug, Parser, Serialize)]
pub struct Args {
    /// Dataset directory holding the ground-truth masks.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory written by `explain`; heatmaps are normalized and thresholded here.
    #[arg(long, conflicts_with = "masks", required_unless_present = "masks")]
    pub explanations: Option<PathBuf>,
    /// Directory of precomputed binary masks named `{id}/c{k}_{method}_mask_t{tau}.pgm`.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Comma-separated subset of lime,shap,gradcam,lrp to score.
    #[arg(long, default_value = "lime,shap,gradcam,lrp", value_delimiter = ',')]
    pub methods: Vec<Method>,
    #[arg(long, default_value_t = DEFAULT_TAU, value_parser = parse_tau)]
    pub tau: f64,
    /// Additional thresholds; one summary file per value.
    #[arg(long, value_delimiter = ',', value_parser = parse_tau)]
    pub tau_grid: Option<Vec<f64>>,
    /// Optional model for the AUROC/AUPRC block.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Clone)]
struct Item {
    id: String,
    class: usize,
    method: Method,
    /// Heatmap file, or the directory holding mask files.
    path: PathBuf,
}

/// `c{k}_{method}` stem, or `None` for any other file name.
fn parse_stem(stem: &str) -> Option<(usize, Method)> {
    let (class, method) = stem.split_once('_')?;
    let class = class.strip_prefix('c')?;
    if class.is_empty() || !class.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((class.parse().ok()?, method.parse().ok()?))
}

fn read_dir_sorted(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths = entries
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", dir.display())))?;
    paths.sort();
    Ok(paths)
}

fn collect_items(root: &Path, masks: bool, methods: &[Method], tau: f64) -> CliResult<Vec<Item>> {
    let mut items = Vec::new();
    for dir in read_dir_sorted(root)?.into_iter().filter(|p| p.is_dir()) {
        let id = dir
            .file_name()
            .expect("entry name")
            .to_string_lossy()
            .into_owned();
        for file in read_dir_sorted(&dir)? {
            let name = file
                .file_name()
                .expect("entry name")
                .to_string_lossy()
                .into_owned();
            let stem = if masks {
                name.strip_suffix(&format!("_mask_{}.pgm", tau_tag(tau)))
            } else {
                name.strip_suffix(".tnsr")
            };
            if let Some((class, method)) = stem.and_then(parse_stem) {
                if methods.contains(&method) {
                    items.push(Item {
                        id: id.clone(),
                        class,
                        method,
                        path: if masks { dir.clone() } else { file },
                    });
                }
            }
        }
    }
    Ok(items)
}

fn records_for(item: &Item, args: &Args, taus: &[f64]) -> CliResult<Vec<IouRecord>> {
    let mut out = Vec::with_capacity(taus.len());
    let predicted: Vec<(f64, SegmentationMask)> = if args.masks.is_some() {
        taus.iter()
            .map(|&tau| {
                let name = format!(
                    "c{}_{}_mask_{}.pgm",
                    item.class,
                    item.method.name(),
                    tau_tag(tau)
                );
                Ok((tau, load_mask(item.path.join(name), MaskSource::Predicted)?))
            })
            .collect::<CliResult<_>>()?
    } else {
        let heat = Heatmap::new(load_tnsr(&item.path)?, item.method, item.class)?;
        let norm = normalize(&heat, item.method.default_normalization());
        taus.iter()
            .map(|&tau| Ok((tau, threshold(&norm, tau)?)))
            .collect::<CliResult<_>>()?
    };
    for (tau, pred) in predicted {
        let gt = dataset::ground_truth(
            &args.data,
            &item.id,
            item.class,
            pred.height(),
            pred.width(),
        )?;
        let v = iou(&pred, &gt)?;
        out.push(IouRecord {
            instance_id: item.id.clone(),
            class_id: item.class,
            method: item.method.name().to_string(),
            tau,
            iou: v.iou,
            degenerate: v.degenerate,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct Summary<'a> {
    tau: f64,
    source: &'static str,
    #[serde(flatten)]
    report: &'a EvalReport,
}

pub fn run(args: &Args) -> CliResult<()> {
    let instances = dataset::read_manifest(&args.data)?;
    let taus = all_taus(args.tau, &args.tau_grid);
    let (root, masks) = match (&args.explanations, &args.masks) {
        (Some(d), None) => (d, false),
        (None, Some(d)) => (d, true),
        _ => {
            return Err(crate::usage(
                "give exactly one of --explanations or --masks",
            ))
        }
    };
    if !root.is_dir() {
        return Err(CliError::Data(format!(
            "{} is not a directory",
            root.display()
        )));
    }
    let items = collect_items(root, masks, &args.methods, args.tau)?;
    if items.is_empty() {
        return Err(CliError::Data(format!(
            "no heatmaps or masks found under {}",
            root.display()
        )));
    }
    let known: BTreeSet<&str> = instances.iter().map(|i| i.id.as_str()).collect();
    let unknown: BTreeSet<&str> = items
        .iter()
        .map(|i| i.id.as_str())
        .filter(|id| !known.contains(id))
        .collect();
    if !unknown.is_empty() {
        let first: Vec<&str> = unknown.iter().take(10).copied().collect();
        return Err(CliError::Data(format!(
            "{} instance id(s) have no ground truth in {}: {}",
            unknown.len(),
            args.data.display(),
            first.join(", ")
        )));
    }

    let mut records: Vec<IouRecord> = crate::with_workers(args.workers, || {
        saliency::par::try_map_range(items.len(), |i| records_for(&items[i], args, &taus))
    })?
    .into_iter()
    .flatten()
    .collect();
    sort_records(&mut records);

    let prediction = match &args.model {
        Some(m) => {
            let net = load_model(m)?;
            let probs =
                crate::with_workers(args.workers, || predict::probabilities(&net, &instances))?;
            predict::metrics(&net, &instances, &probs)?
        }
        None => None,
    };

    output::create_dir(&args.out)?;
    let mut csv = Vec::new();
    write_records_csv(&records, &mut csv)?;
    output::write_text(
        &args.out.join(RECORDS),
        &String::from_utf8(csv).expect("ascii csv"),
    )?;

    let source = if masks { "masks" } else { "heatmaps" };
    for (i, &tau) in taus.iter().enumerate() {
        let at: Vec<IouRecord> = records.iter().filter(|r| r.tau == tau).cloned().collect();
        let mut report = aggregate(&at)?;
        if i == 0 {
            report.prediction = prediction.clone();
        }
        let summary = Summary {
            tau,
            source,
            report: &report,
        };
        if i == 0 {
            output::write_json(&args.out.join(SUMMARY), &summary)?;
        }
        if args.tau_grid.is_some() {
            output::write_json(
                &args.out.join(format!("summary_{}.json", tau_tag(tau))),
                &summary,
            )?;
        }
    }
    output::write_provenance(&args.out, "evaluate", None, args)
}
