use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Parser;
use serde::Serialize;
use serde_json::{json, Value};

use saliency::eval::format_sig9;
use saliency::gradcam::{grad_cam, TargetLayer};
use saliency::heatmap::{normalize, save_mask, threshold, Heatmap, Method, DEFAULT_TAU};
use saliency::lime::{
    explain_lime_classes, segment_superpixels, Baseline, Lambda, LimeConfig, SuperpixelMap,
};
use saliency::lrp::{lrp, LrpConfig};
use saliency::netgraph::{load_model, Network};
use saliency::pgm::GrayImage;
use saliency::shap::{kernel_shap_classes, ShapConfig};
use saliency::tensor::save_tnsr;
use saliency::Tensor;

use super::{all_taus, parse_tau, tau_tag};
use crate::dataset::{self, Instance};
use crate::error::{CliError, CliResult};
use crate::output;

pub const SUMMARY: &str = "explain_summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassSelection {
    All,
    /// Classes labelled present for each instance.
    Positive,
    List(Vec<usize>),
}

impl FromStr for ClassSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "all" => Ok(ClassSelection::All),
            "positive" => Ok(ClassSelection::Positive),
            list => list
                .split(',')
                .map(|c| {
                    c.trim().parse().map_err(|_| {
                        format!("class `{c}` is not `all`, `positive` or a class index")
                    })
                })
                .collect::<Result<Vec<_>, _>>()
                .map(ClassSelection::List),
        }
    }
}

#[derive(Debug, Parser, Serialize)]
pub struct Args {
    /// Model directory or manifest file.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory with manifest.csv.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated subset of lime,shap,gradcam,lrp.
    #[arg(long, default_value = "lime,shap,gradcam,lrp", value_delimiter = ',')]
    pub methods: Vec<Method>,
    /// `all`, `positive` (labelled classes per instance) or a comma list.
    #[arg(long, default_value = "all")]
    pub classes: ClassSelection,
    #[arg(long, default_value_t = DEFAULT_TAU, value_parser = parse_tau)]
    pub tau: f64,
    /// Extra thresholds for mask files, comma-separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_tau)]
    pub tau_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// LRP stabilizer.
    #[arg(long, default_value_t = 1e-6)]
    pub epsilon: f64,
    /// LIME perturbation samples.
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    /// SHAP coalition budget.
    #[arg(long, default_value_t = 2000)]
    pub coalitions: usize,
    /// Target superpixel count for LIME and SHAP.
    #[arg(long, default_value_t = 50)]
    pub segments: usize,
    /// Grad-CAM layer: `last-conv` or a layer index.
    #[arg(long, default_value = "last-conv")]
    pub target_layer: String,
    /// Also write per-layer LRP relevance tensors.
    #[arg(long)]
    pub dump_relevance: bool,
}

/// What one (instance, class, method) produced.
struct Outcome {
    id: String,
    class: usize,
    method: Method,
    result: CliResult<bool>,
}

struct Job<'a> {
    args: &'a Args,
    net: &'a Network,
    target: TargetLayer,
    taus: Vec<f64>,
}

pub fn run(args: &Args) -> CliResult<()> {
    let target: TargetLayer = args
        .target_layer
        .parse()
        .map_err(|e: saliency::Error| crate::usage(e.to_string()))?;
    if !(args.epsilon >= 0.0 && args.epsilon.is_finite()) {
        return Err(crate::usage(format!(
            "--epsilon must be >= 0, got {}",
            args.epsilon
        )));
    }
    for (i, m) in args.methods.iter().enumerate() {
        if args.methods[..i].contains(m) {
            return Err(crate::usage(format!(
                "method `{m}` is listed twice in --methods"
            )));
        }
    }
    let net = load_model(&args.model)?;
    let instances = dataset::read_manifest(&args.data)?;
    let k = net.num_classes();
    match &args.classes {
        ClassSelection::List(list) => {
            if let Some(&bad) = list.iter().find(|&&c| c >= k) {
                return Err(CliError::Data(format!(
                    "class index {bad} out of range: model has {k} classes"
                )));
            }
        }
        ClassSelection::Positive if instances[0].labels.len() != k => {
            return Err(CliError::Data(format!(
                "`--classes positive` needs {k} labels per instance, manifest has {}",
                instances[0].labels.len()
            )));
        }
        _ => {}
    }
    output::create_dir(&args.out)?;
    let job = Job {
        args,
        net: &net,
        target,
        taus: all_taus(args.tau, &args.tau_grid),
    };
    let outcomes: Vec<Outcome> = crate::with_workers(args.workers, || {
        saliency::par::map_range(instances.len(), |i| job.instance(&instances[i]))
    })
    .into_iter()
    .flatten()
    .collect();

    let path = args.out.join(SUMMARY);
    let mut w = output::csv_writer(&path)?;
    w.write_record([
        "instance_id",
        "class_id",
        "method",
        "status",
        "degenerate",
        "message",
    ])
    .map_err(|e| CliError::csv(&path, e))?;
    let mut failures = Vec::new();
    for o in &outcomes {
        let (status, degenerate, message) = match &o.result {
            Ok(d) => ("ok", (*d as u8).to_string(), String::new()),
            Err(e) => {
                failures.push((
                    e.exit_code(),
                    format!("{} class {} {}: {e}", o.id, o.class, o.method),
                ));
                ("failed", String::new(), e.to_string())
            }
        };
        w.write_record([
            o.id.as_str(),
            &o.class.to_string(),
            o.method.name(),
            status,
            &degenerate,
            &message,
        ])
        .map_err(|e| CliError::csv(&path, e))?;
    }
    output::finish_csv(w, &path)?;
    output::write_provenance(&args.out, "explain", Some(args.seed), args)?;
    match failures.first() {
        None => Ok(()),
        Some((code, first)) => Err(CliError::Partial {
            code: *code,
            message: format!(
                "{} of {} explanations failed; first: {first}",
                failures.len(),
                outcomes.len()
            ),
        }),
    }
}

impl Job<'_> {
    fn classes(&self, inst: &Instance) -> Vec<usize> {
        match &self.args.classes {
            ClassSelection::All => (0..self.net.num_classes()).collect(),
            ClassSelection::Positive => (0..self.net.num_classes())
                .filter(|&c| inst.labels[c])
                .collect(),
            ClassSelection::List(l) => l.clone(),
        }
    }

    fn instance(&self, inst: &Instance) -> Vec<Outcome> {
        let classes = self.classes(inst);
        let mut out = Vec::new();
        let fail_all = |out: &mut Vec<Outcome>, method: Method, msg: &CliError| {
            for &c in &classes {
                out.push(Outcome {
                    id: inst.id.clone(),
                    class: c,
                    method,
                    result: Err(clone_error(msg)),
                });
            }
        };
        if classes.is_empty() {
            return out;
        }
        let dir = self.args.out.join(&inst.id);
        let prepared = dataset::load_input(inst, self.net.input_shape()).and_then(|x| {
            output::create_dir(&dir)?;
            Ok(x)
        });
        let x = match prepared {
            Ok(x) => x,
            Err(e) => {
                for &m in &self.args.methods {
                    fail_all(&mut out, m, &e);
                }
                return out;
            }
        };

        let needs_segments = self
            .args
            .methods
            .iter()
            .any(|m| matches!(m, Method::Lime | Method::Shap));
        let segments = if needs_segments {
            Some(
                segment_superpixels(&x, self.args.segments, self.args.seed)
                    .map_err(CliError::from)
                    .and_then(|sp| {
                        let labels = Tensor::new(
                            vec![sp.height(), sp.width()],
                            sp.labels().iter().map(|&l| l as f64).collect(),
                        )?;
                        save_tnsr(&labels, dir.join("superpixels.tnsr"))?;
                        Ok(sp)
                    }),
            )
        } else {
            None
        };

        for &method in &self.args.methods {
            let results: Vec<(usize, CliResult<bool>)> = match method {
                Method::Lime | Method::Shap => match segments.as_ref().expect("segmented") {
                    Err(e) => classes.iter().map(|&c| (c, Err(clone_error(e)))).collect(),
                    Ok(sp) => self.superpixel_method(method, &x, sp, &classes, &dir),
                },
                Method::GradCam => classes
                    .iter()
                    .map(|&c| {
                        let r = grad_cam(self.net, &x, c, self.target)
                            .map_err(CliError::from)
                            .and_then(|g| {
                                let rows = g.alpha.iter().enumerate().map(|(k, a)| (k, *a));
                                write_pairs(
                                    &dir.join(format!("c{c}_gradcam.csv")),
                                    "channel",
                                    "alpha",
                                    rows,
                                )?;
                                self.emit(&dir, &inst.id, c, method, g.heatmap.clone(), json!(g))
                            });
                        (c, r)
                    })
                    .collect(),
                Method::Lrp => classes
                    .iter()
                    .map(|&c| {
                        let cfg = LrpConfig {
                            epsilon: self.args.epsilon,
                        };
                        let r = lrp(self.net, &x, c, &cfg)
                            .map_err(CliError::from)
                            .and_then(|m| {
                                if self.args.dump_relevance {
                                    for (l, t) in m.relevance.iter().enumerate() {
                                        save_tnsr(
                                            t,
                                            dir.join(format!("c{c}_lrp_relevance{l:02}.tnsr")),
                                        )?;
                                    }
                                }
                                self.emit(&dir, &inst.id, c, method, m.heatmap.clone(), json!(m))
                            });
                        (c, r)
                    })
                    .collect(),
            };
            out.extend(results.into_iter().map(|(class, result)| Outcome {
                id: inst.id.clone(),
                class,
                method,
                result,
            }));
        }
        out
    }

    fn superpixel_method(
        &self,
        method: Method,
        x: &Tensor,
        sp: &SuperpixelMap,
        classes: &[usize],
        dir: &Path,
    ) -> Vec<(usize, CliResult<bool>)> {
        let id = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let fitted: CliResult<Vec<(Tensor, Vec<f64>, Value)>> = match method {
            Method::Lime => {
                let cfg = LimeConfig {
                    num_samples: self.args.samples,
                    kernel_width: 0.25,
                    lasso_lambda: Lambda::Auto,
                    max_features: 10,
                    baseline: Baseline::MeanColor,
                    seed: self.args.seed,
                    segments: self.args.segments,
                };
                explain_lime_classes(self.net, x, classes, sp, &cfg)
                    .map(|v| {
                        v.into_iter()
                            .map(|e| (e.heatmap.clone(), e.coefficients.clone(), json!(e)))
                            .collect()
                    })
                    .map_err(CliError::from)
            }
            _ => {
                let cfg = ShapConfig {
                    num_coalitions: self.args.coalitions,
                    baseline: Baseline::MeanColor,
                    seed: self.args.seed,
                    segments: self.args.segments,
                };
                kernel_shap_classes(self.net, x, classes, sp, &cfg)
                    .map(|v| {
                        v.into_iter()
                            .map(|e| (e.heatmap.clone(), e.values.phi.clone(), json!(e)))
                            .collect()
                    })
                    .map_err(CliError::from)
            }
        };
        match fitted {
            Err(e) => classes.iter().map(|&c| (c, Err(clone_error(&e)))).collect(),
            Ok(list) => classes
                .iter()
                .zip(list)
                .map(|(&c, (heat, coef, details))| {
                    let column = if method == Method::Lime {
                        "coefficient"
                    } else {
                        "phi"
                    };
                    let r = write_pairs(
                        &dir.join(format!("c{c}_{}.csv", method.name())),
                        "superpixel_id",
                        column,
                        coef.iter().copied().enumerate(),
                    )
                    .and_then(|_| self.emit(dir, &id, c, method, heat, details));
                    (c, r)
                })
                .collect(),
        }
    }

    /// Writes heatmap, preview, masks and metadata; returns the degenerate flag.
    fn emit(
        &self,
        dir: &Path,
        id: &str,
        class: usize,
        method: Method,
        scores: Tensor,
        details: Value,
    ) -> CliResult<bool> {
        let stem = format!("c{class}_{}", method.name());
        let heat = Heatmap::new(scores, method, class)?;
        save_tnsr(&heat.scores, dir.join(format!("{stem}.tnsr")))?;
        GrayImage::preview(&heat.scores)?.save(dir.join(format!("{stem}.pgm")))?;
        let norm = normalize(&heat, method.default_normalization());
        let mut masks = Vec::new();
        for &tau in &self.taus {
            let name = format!("{stem}_mask_{}.pgm", tau_tag(tau));
            save_mask(&threshold(&norm, tau)?, dir.join(&name))?;
            masks.push(json!({ "tau": tau, "file": name }));
        }
        let record = norm.normalization.expect("normalized");
        output::write_json(
            &dir.join(format!("{stem}.json")),
            &json!({
                "instance_id": id,
                "class_index": class,
                "method": method.name(),
                "seed": self.args.seed,
                "heatmap": format!("{stem}.tnsr"),
                "preview": format!("{stem}.pgm"),
                "normalization": record,
                "degenerate": record.degenerate,
                "masks": masks,
                "details": details,
            }),
        )?;
        Ok(record.degenerate)
    }
}

fn write_pairs(
    path: &Path,
    key: &str,
    value: &str,
    rows: impl Iterator<Item = (usize, f64)>,
) -> CliResult<()> {
    let mut text = format!("{key},{value}\n");
    for (k, v) in rows {
        text.push_str(&format!("{k},{}\n", format_sig9(v)));
    }
    output::write_text(path, &text)
}

/// Errors are not `Clone`; failures shared by several classes are re-created
/// with the same exit code and message.
fn clone_error(e: &CliError) -> CliError {
    CliError::Partial {
        code: e.exit_code(),
        message: e.to_string(),
    }
}
