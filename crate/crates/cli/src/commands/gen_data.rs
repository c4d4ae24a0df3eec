use std::path::PathBuf;

use clap::Parser;
use serde::Serialize;

use saliency::heatmap::{save_mask, MaskSource, SegmentationMask};
use saliency::netgraph::{generate_blob_dataset, BLOB_CLASSES};

use crate::dataset::{self, ManifestRow};
use crate::error::{CliError, CliResult};
use crate::output;

#[derive(Debug, Parser, Serialize)]
pub struct Args {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images.
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    /// Side length in pixels.
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

pub fn run(args: &Args) -> CliResult<()> {
    if args.n == 0 {
        return Err(crate::usage("--n must be at least 1"));
    }
    let samples = crate::with_workers(args.workers, || {
        generate_blob_dataset(args.n, args.image_size, args.seed)
    })
    .map_err(|e| crate::usage(e.to_string()))?;

    let out = &args.out;
    output::create_dir(&out.join("images"))?;
    output::create_dir(&out.join("masks"))?;

    let manifest_path = out.join(dataset::MANIFEST);
    let labels_path = out.join(dataset::LABELS);
    let mut manifest = output::csv_writer(&manifest_path)?;
    let mut labels = output::csv_writer(&labels_path)?;
    let mut header = vec!["id".to_string()];
    header.extend((0..BLOB_CLASSES).map(|k| format!("c{k}")));
    labels
        .write_record(&header)
        .map_err(|e| CliError::csv(&labels_path, e))?;

    for s in &samples {
        let (h, w) = (s.image.height, s.image.width);
        s.image.save(out.join(dataset::image_rel(&s.id)))?;
        let mut union = vec![false; h * w];
        for class in 0..BLOB_CLASSES {
            if s.blobs[class].is_none() {
                continue;
            }
            let bits = s.mask_bits(class);
            for (u, &b) in union.iter_mut().zip(&bits) {
                *u |= b;
            }
            let mask = SegmentationMask::new(h, w, bits, MaskSource::GroundTruth)?;
            save_mask(&mask, out.join(dataset::class_mask_rel(&s.id, class)))?;
        }
        let union = SegmentationMask::new(h, w, union, MaskSource::GroundTruth)?;
        save_mask(&union, out.join(dataset::union_mask_rel(&s.id)))?;

        let present: Vec<bool> = s.blobs.iter().map(Option::is_some).collect();
        manifest
            .serialize(ManifestRow {
                id: s.id.clone(),
                image: dataset::image_rel(&s.id),
                mask: dataset::union_mask_rel(&s.id),
                labels: dataset::encode_labels(&present),
            })
            .map_err(|e| CliError::csv(&manifest_path, e))?;
        let mut row = vec![s.id.clone()];
        row.extend(present.iter().map(|&b| (b as u8).to_string()));
        labels
            .write_record(&row)
            .map_err(|e| CliError::csv(&labels_path, e))?;
    }
    output::finish_csv(manifest, &manifest_path)?;
    output::finish_csv(labels, &labels_path)?;
    output::write_provenance(out, "gen-data", Some(args.seed), args)
}
