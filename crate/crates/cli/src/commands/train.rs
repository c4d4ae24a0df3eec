use std::path::PathBuf;

use clap::Parser;
use serde::Serialize;

use saliency::netgraph::{save_model, toy_cnn, train, LabeledSample, TrainConfig};

use crate::dataset;
use crate::error::CliResult;
use crate::output;

pub const SIDECAR: &str = "train.json";

#[derive(Debug, Parser, Serialize)]
pub struct Args {
    /// Dataset directory (as written by gen-data).
    #[arg(long)]
    pub data: PathBuf,
    /// Model output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    seed: u64,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    training_instances: usize,
    final_loss: Option<f64>,
    epoch_losses: &'a [f64],
}

pub fn run(args: &Args) -> CliResult<()> {
    let instances = dataset::read_manifest(&args.data)?;
    let first = saliency::pgm::GrayImage::load(&instances[0].image_path)?;
    let shape = [1, first.height, first.width];
    let classes = instances[0].labels.len();
    let data = instances
        .iter()
        .map(|inst| {
            Ok(LabeledSample {
                input: dataset::load_input(inst, &shape)?,
                labels: inst.labels.iter().map(|&b| b as u8 as f64).collect(),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;

    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        seed: args.seed,
    };
    let init = toy_cnn(&shape, classes, args.seed);
    let (net, report) = crate::with_workers(args.workers, || train(&init, &data, &cfg))?;

    output::create_dir(&args.out)?;
    save_model(&net, &args.out)?;
    output::write_json(
        &args.out.join(SIDECAR),
        &Sidecar {
            seed: args.seed,
            epochs: args.epochs,
            batch_size: args.batch_size,
            learning_rate: args.learning_rate,
            training_instances: data.len(),
            final_loss: report.final_loss(),
            epoch_losses: &report.epoch_losses,
        },
    )?;
    output::write_provenance(&args.out, "train", Some(args.seed), args)
}
