use std::path::PathBuf;

use clap::Parser;
use serde::Serialize;

use saliency::eval::{format_sig9, prediction_metrics, PredictionMetrics};
use saliency::netgraph::{load_model, Network};

use crate::dataset::{self, Instance};
use crate::error::{CliError, CliResult};
use crate::output;

pub const PREDICTIONS: &str = "predictions.csv";
pub const METRICS: &str = "metrics.json";

#[derive(Debug, Parser, Serialize)]
pub struct Args {
    /// Model directory or manifest file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

/// Probabilities for every instance, in manifest order.
pub fn probabilities(net: &Network, instances: &[Instance]) -> CliResult<Vec<Vec<f64>>> {
    saliency::par::try_map_range(instances.len(), |i| {
        let x = dataset::load_input(&instances[i], net.input_shape())?;
        Ok(net.predict(&x)?)
    })
}

/// AUROC/AUPRC when the manifest carries one label per model class.
pub fn metrics(
    net: &Network,
    instances: &[Instance],
    probs: &[Vec<f64>],
) -> CliResult<Option<PredictionMetrics>> {
    if instances[0].labels.len() != net.num_classes() {
        return Ok(None);
    }
    let labels: Vec<Vec<bool>> = instances.iter().map(|i| i.labels.clone()).collect();
    Ok(Some(prediction_metrics(probs, &labels)?))
}

pub fn run(args: &Args) -> CliResult<()> {
    let net = load_model(&args.model)?;
    let instances = dataset::read_manifest(&args.data)?;
    let probs = crate::with_workers(args.workers, || probabilities(&net, &instances))?;

    output::create_dir(&args.out)?;
    let path = args.out.join(PREDICTIONS);
    let mut w = output::csv_writer(&path)?;
    let mut header = vec!["id".to_string()];
    header.extend((0..net.num_classes()).map(|k| format!("p{k}")));
    w.write_record(&header)
        .map_err(|e| CliError::csv(&path, e))?;
    for (inst, p) in instances.iter().zip(&probs) {
        let mut row = vec![inst.id.clone()];
        row.extend(p.iter().map(|&v| format_sig9(v)));
        w.write_record(&row).map_err(|e| CliError::csv(&path, e))?;
    }
    output::finish_csv(w, &path)?;
    if let Some(m) = metrics(&net, &instances, &probs)? {
        output::write_json(&args.out.join(METRICS), &m)?;
    }
    output::write_provenance(&args.out, "predict", None, args)
}
