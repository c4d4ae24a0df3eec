//! On-disk dataset layout written by `gen-data` and read by the other
//! commands:
//!
//! ```text
//! images/{id}.pgm        input image
//! masks/{id}.pgm         union of all object masks
//! masks/{id}_c{k}.pgm    mask of class k (only for positive classes)
//! labels.csv             id,c0,c1,...
//! manifest.csv           id,image,mask,labels  (labels as "1;0;0;1")
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use saliency::heatmap::{load_mask, MaskSource, SegmentationMask};
use saliency::pgm::GrayImage;
use saliency::Tensor;

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.csv";
pub const LABELS: &str = "labels.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub labels: String,
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub id: String,
    pub image_path: PathBuf,
    pub labels: Vec<bool>,
}

pub fn image_rel(id: &str) -> String {
    format!("images/{id}.pgm")
}

pub fn union_mask_rel(id: &str) -> String {
    format!("masks/{id}.pgm")
}

pub fn class_mask_rel(id: &str, class: usize) -> String {
    format!("masks/{id}_c{class}.pgm")
}

pub fn encode_labels(labels: &[bool]) -> String {
    labels
        .iter()
        .map(|&b| if b { "1" } else { "0" })
        .collect::<Vec<_>>()
        .join(";")
}

fn decode_labels(s: &str, row: usize) -> CliResult<Vec<bool>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|v| match v.trim() {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(CliError::Data(format!(
                "manifest row {row}: label `{other}` is not 0 or 1"
            ))),
        })
        .collect()
}

/// Instances listed in `dir/manifest.csv`, in file order.
pub fn read_manifest(dir: &Path) -> CliResult<Vec<Instance>> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!(
            "data directory {} does not exist",
            dir.display()
        )));
    }
    let path = dir.join(MANIFEST);
    let mut reader = csv::Reader::from_path(&path).map_err(|e| CliError::csv(&path, e))?;
    let mut out = Vec::new();
    let mut seen = BTreeMap::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| CliError::csv(&path, e))?;
        if seen.insert(row.id.clone(), i).is_some() {
            return Err(CliError::Data(format!(
                "manifest lists id `{}` twice",
                row.id
            )));
        }
        out.push(Instance {
            labels: decode_labels(&row.labels, i + 1)?,
            image_path: dir.join(&row.image),
            id: row.id,
        });
    }
    if out.is_empty() {
        return Err(CliError::Data(format!(
            "{} lists no instances",
            path.display()
        )));
    }
    let k = out[0].labels.len();
    if let Some(bad) = out.iter().find(|r| r.labels.len() != k) {
        return Err(CliError::Data(format!(
            "instance `{}` has {} labels, expected {k}",
            bad.id,
            bad.labels.len()
        )));
    }
    Ok(out)
}

pub fn load_input(inst: &Instance, input_shape: &[usize]) -> CliResult<Tensor> {
    let img = GrayImage::load(&inst.image_path)?;
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    if img.height != h || img.width != w {
        return Err(CliError::Data(format!(
            "image {} is {}x{}, model expects {h}x{w}",
            inst.image_path.display(),
            img.width,
            img.height
        )));
    }
    Ok(img.to_tensor(c))
}

/// Ground-truth mask of `class`; a missing file means the class is absent.
pub fn ground_truth(
    dir: &Path,
    id: &str,
    class: usize,
    h: usize,
    w: usize,
) -> CliResult<SegmentationMask> {
    let path = dir.join(class_mask_rel(id, class));
    if !path.exists() {
        return Ok(SegmentationMask::empty(h, w, MaskSource::GroundTruth));
    }
    let mask = load_mask(&path, MaskSource::GroundTruth)?;
    if (mask.height(), mask.width()) != (h, w) {
        return Err(CliError::Data(format!(
            "mask {} is {}x{}, expected {w}x{h}",
            path.display(),
            mask.width(),
            mask.height()
        )));
    }
    Ok(mask)
}
