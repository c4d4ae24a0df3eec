//! JSON model manifest plus one TNSR file per parameter tensor.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::layer::{BatchNorm, Conv2d, Dense, Layer, SUPPORTED_KINDS};
use super::Network;
use crate::error::{Error, Result};
use crate::tensor::{load_tnsr, save_tnsr, Tensor};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "model.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pad: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
    /// Parameter name to TNSR path, relative to the manifest.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    params: BTreeMap<String, String>,
}

/// Writes `dir/model.json` and its weight files; returns the manifest path.
pub fn save_model(net: &Network, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers = Vec::with_capacity(net.layers().len());
    for (i, layer) in net.layers().iter().enumerate() {
        let mut entry = LayerEntry {
            kind: layer.kind_name().to_string(),
            stride: None,
            pad: None,
            window: None,
            params: BTreeMap::new(),
        };
        let mut tensors: Vec<(&str, &Tensor)> = Vec::new();
        match layer {
            Layer::Conv2d(c) => {
                entry.stride = Some(c.stride);
                entry.pad = Some(c.pad);
                tensors.extend([("kernels", &c.kernels), ("bias", &c.bias)]);
            }
            Layer::Dense(d) => tensors.extend([("weights", &d.weights), ("bias", &d.bias)]),
            Layer::BatchNorm(bn) => tensors.extend([
                ("gamma", &bn.gamma),
                ("beta", &bn.beta),
                ("mean", &bn.mean),
                ("var", &bn.var),
            ]),
            Layer::MaxPool2d { window, stride } => {
                entry.window = Some(*window);
                entry.stride = Some(*stride);
            }
            Layer::Relu | Layer::Sigmoid | Layer::GlobalAvgPool | Layer::Flatten => {}
        }
        for (name, t) in tensors {
            let file = format!("layer{i:02}_{name}.tnsr");
            save_tnsr(t, dir.join(&file))?;
            entry.params.insert(name.to_string(), file);
        }
        layers.push(entry);
    }
    let manifest = Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        input_shape: net.input_shape().to_vec(),
        num_classes: net.num_classes(),
        layers,
    };
    let path = dir.join(MANIFEST_NAME);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &manifest).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads and shape-checks a network. `path` may be the manifest itself or
/// the directory holding `model.json`.
pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    let mut path = path.as_ref().to_path_buf();
    if path.is_dir() {
        path.push(MANIFEST_NAME);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    if manifest.format_version != MANIFEST_FORMAT_VERSION {
        return Err(Error::InvalidArgument(format!(
            "unsupported manifest format_version {} (expected {MANIFEST_FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let layers = manifest
        .layers
        .iter()
        .enumerate()
        .map(|(i, entry)| build_layer(i, entry, base))
        .collect::<Result<Vec<_>>>()?;
    Network::new(manifest.input_shape, manifest.num_classes, layers)
}

fn build_layer(index: usize, entry: &LayerEntry, base: &Path) -> Result<Layer> {
    let param = |name: &str| -> Result<Tensor> {
        let rel = entry.params.get(name).ok_or_else(|| Error::Layer {
            layer: index,
            kind: kind_static(&entry.kind),
            message: format!("missing parameter `{name}`"),
        })?;
        load_tnsr(base.join(rel))
    };
    let wrap = |e: Error| match e {
        Error::Shape {
            context,
            expected,
            actual,
        } => Error::Shape {
            context: format!("layer {index} ({}) {context}", entry.kind),
            expected,
            actual,
        },
        Error::InvalidArgument(m) => Error::Layer {
            layer: index,
            kind: kind_static(&entry.kind),
            message: m,
        },
        other => other,
    };
    let layer = match entry.kind.as_str() {
        "Conv2D" => Layer::Conv2d(
            Conv2d::new(
                param("kernels")?,
                param("bias")?,
                entry.stride.unwrap_or(1),
                entry.pad.unwrap_or(0),
            )
            .map_err(wrap)?,
        ),
        "Dense" => Layer::Dense(Dense::new(param("weights")?, param("bias")?).map_err(wrap)?),
        "ReLU" => Layer::Relu,
        "Sigmoid" => Layer::Sigmoid,
        "MaxPool2D" => {
            let window = entry.window.unwrap_or(2);
            Layer::MaxPool2d {
                window,
                stride: entry.stride.unwrap_or(window),
            }
        }
        "GlobalAvgPool" => Layer::GlobalAvgPool,
        "BatchNorm" => Layer::BatchNorm(
            BatchNorm::new(
                param("gamma")?,
                param("beta")?,
                param("mean")?,
                param("var")?,
            )
            .map_err(wrap)?,
        ),
        "Flatten" => Layer::Flatten,
        other => {
            return Err(Error::UnknownLayerKind {
                kind: other.to_string(),
                supported: SUPPORTED_KINDS.join(", "),
            })
        }
    };
    Ok(layer)
}

fn kind_static(kind: &str) -> &'static str {
    SUPPORTED_KINDS
        .iter()
        .copied()
        .find(|k| *k == kind)
        .unwrap_or("unknown")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::toy_cnn;

    fn write(dir: &Path, name: &str, t: &Tensor) {
        save_tnsr(t, dir.join(name)).unwrap();
    }

    #[test]
    fn loads_four_layer_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "k.tnsr", &Tensor::filled(&[4, 1, 3, 3], 0.1));
        write(dir.path(), "kb.tnsr", &Tensor::zeros(&[4]));
        write(dir.path(), "w.tnsr", &Tensor::filled(&[2, 4], 0.5));
        write(dir.path(), "b.tnsr", &Tensor::zeros(&[2]));
        let manifest = r#"{
            "format_version": 1, "input_shape": [1, 6, 6], "num_classes": 2,
            "layers": [
                {"kind": "Conv2D", "stride": 1, "pad": 1, "params": {"kernels": "k.tnsr", "bias": "kb.tnsr"}},
                {"kind": "ReLU"},
                {"kind": "GlobalAvgPool"},
                {"kind": "Dense", "params": {"weights": "w.tnsr", "bias": "b.tnsr"}}
            ]}"#;
        std::fs::write(dir.path().join("model.json"), manifest).unwrap();
        let net = load_model(dir.path().join("model.json")).unwrap();
        assert_eq!(net.layers().len(), 4);
        assert_eq!(net.activation_shape(1), &[4, 6, 6]);
    }

    #[test]
    fn dense_extent_mismatch_names_layer() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "w.tnsr", &Tensor::filled(&[2, 5], 0.5));
        write(dir.path(), "b.tnsr", &Tensor::zeros(&[2]));
        let manifest = r#"{
            "format_version": 1, "input_shape": [1, 2, 2], "num_classes": 2,
            "layers": [
                {"kind": "Flatten"},
                {"kind": "Dense", "params": {"weights": "w.tnsr", "bias": "b.tnsr"}}
            ]}"#;
        std::fs::write(dir.path().join("model.json"), manifest).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        match &err {
            Error::Shape {
                context,
                expected,
                actual,
            } => {
                assert!(context.contains("layer 1 (Dense)"), "{context}");
                assert_eq!(expected, &vec![5]);
                assert_eq!(actual, &vec![4]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_kind_lists_supported() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = r#"{"format_version": 1, "input_shape": [1, 2, 2], "num_classes": 1,
            "layers": [{"kind": "Dropout"}]}"#;
        std::fs::write(dir.path().join("model.json"), manifest).unwrap();
        let msg = load_model(dir.path()).unwrap_err().to_string();
        assert!(
            msg.contains("Dropout") && msg.contains("GlobalAvgPool"),
            "{msg}"
        );
    }

    #[test]
    fn round_trip_reproduces_forward() {
        let net = toy_cnn(&[1, 12, 12], 3, 11);
        let dir = tempfile::tempdir().unwrap();
        let path = save_model(&net, dir.path()).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded, net);
        let x = Tensor::from_fn(&[1, 12, 12], |i| ((i * 37) % 17) as f64 / 17.0);
        assert_eq!(
            loaded.forward(&x).unwrap().logits.data(),
            net.forward(&x).unwrap().logits.data()
        );
    }
}
