//! LIME over superpixels: perturb an instance by blanking segments, weight
//! the perturbations by proximity, and fit a sparse linear surrogate.

mod lasso;
mod slic;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use slic::{segment_superpixels, SuperpixelMap};

use crate::error::{Error, Result};
use crate::netgraph::Network;
use crate::tensor::Tensor;
use lasso::Design;

/// Geometric step of the automatic penalty path.
const LAMBDA_PATH_FACTOR: f64 = 0.7;
/// The path stops once λ falls below this fraction of λ_max.
const LAMBDA_PATH_FLOOR: f64 = 1e-9;

/// Replacement value for switched-off superpixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Per-channel mean of the instance.
    MeanColor,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Lambda {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimeConfig {
    pub num_samples: usize,
    pub kernel_width: f64,
    pub lasso_lambda: Lambda,
    pub max_features: usize,
    pub baseline: Baseline,
    pub seed: u64,
    /// Target superpixel count handed to the segmenter.
    pub segments: usize,
}

impl Default for LimeConfig {
    fn default() -> Self {
        LimeConfig {
            num_samples: 1000,
            kernel_width: 0.25,
            lasso_lambda: Lambda::Auto,
            max_features: 10,
            baseline: Baseline::MeanColor,
            seed: 0,
            segments: 50,
        }
    }
}

impl LimeConfig {
    pub fn surrogate_family(&self) -> &'static str {
        "sparse linear (lasso)"
    }

    fn validate(&self) -> Result<()> {
        if !(self.kernel_width > 0.0 && self.kernel_width.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "kernel_width must be positive, got {}",
                self.kernel_width
            )));
        }
        if let Lambda::Fixed(l) = self.lasso_lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "lasso_lambda must be >= 0, got {l}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-channel fill values for `baseline`.
pub fn baseline_fill(x: &Tensor, baseline: Baseline) -> Vec<f64> {
    let c = x.shape()[0];
    match baseline {
        Baseline::Zero => vec![0.0; c],
        Baseline::MeanColor => {
            let plane = x.len() / c;
            x.data()
                .chunks(plane)
                .map(|ch| crate::tensor::pairwise_sum(ch) / plane as f64)
                .collect()
        }
    }
}

fn check_instance(x: &Tensor, sp: &SuperpixelMap) -> Result<()> {
    match *x.shape() {
        [_, h, w] if h == sp.height() && w == sp.width() => Ok(()),
        _ => Err(Error::shape(
            "instance vs superpixel map",
            &[
                x.shape().first().copied().unwrap_or(1),
                sp.height(),
                sp.width(),
            ],
            x.shape(),
        )),
    }
}

/// `h(z)`: the instance with every superpixel `s` where `!present[s]`
/// replaced by `fill`.
pub fn perturb(x: &Tensor, sp: &SuperpixelMap, present: &[bool], fill: &[f64]) -> Tensor {
    let plane = sp.height() * sp.width();
    let labels = sp.labels();
    let mut data = x.data().to_vec();
    for (c, chunk) in data.chunks_mut(plane).enumerate() {
        for (v, &l) in chunk.iter_mut().zip(labels) {
            if !present[l] {
                *v = fill[c];
            }
        }
    }
    Tensor::from_raw(x.shape().to_vec(), data)
}

/// Evaluates `f` on every perturbation in parallel; the first non-finite
/// output (lowest index) is reported.
pub(crate) fn evaluate_rows<F>(
    x: &Tensor,
    sp: &SuperpixelMap,
    rows: &[Vec<bool>],
    fill: &[f64],
    f: &F,
) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&Tensor) -> Result<Vec<f64>> + Sync,
{
    crate::par::try_map_range(rows.len(), |i| {
        let out = f(&perturb(x, sp, &rows[i], fill))?;
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::NonFinite(format!("black-box output for sample {i}")))
        }
    })
}

/// Perturbation design with black-box outputs and proximity weights.
/// Row 0 is always the unperturbed instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub rows: Vec<Vec<bool>>,
    /// One output vector per row (one entry per explained target).
    pub outputs: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// Kernel weight of a coalition with `present` of `total` features on:
/// `exp(−d²/width²)` with `d` the cosine distance to the all-ones vector.
pub fn kernel_weight(present: usize, total: usize, width: f64) -> f64 {
    let d = if present == 0 {
        1.0
    } else {
        1.0 - (present as f64 / total as f64).sqrt()
    };
    (-(d * d) / (width * width)).exp()
}

/// Draws `num_samples` Bernoulli(½) rows (re-drawing any all-ones row) after
/// the all-ones row and evaluates `predict` on each perturbed instance.
pub fn sample_neighborhood<F>(
    x: &Tensor,
    sp: &SuperpixelMap,
    cfg: &LimeConfig,
    predict: &F,
) -> Result<Neighborhood>
where
    F: Fn(&Tensor) -> Result<Vec<f64>> + Sync,
{
    cfg.validate()?;
    check_instance(x, sp)?;
    let s = sp.count();
    if cfg.num_samples < s {
        return Err(Error::InvalidArgument(format!(
            "num_samples ({}) must be at least the superpixel count ({s})",
            cfg.num_samples
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.num_samples + 1);
    rows.push(vec![true; s]);
    while rows.len() <= cfg.num_samples {
        let z: Vec<bool> = (0..s).map(|_| rng.random_bool(0.5)).collect();
        if z.iter().any(|&b| !b) {
            rows.push(z);
        }
    }
    let fill = baseline_fill(x, cfg.baseline);
    let outputs = evaluate_rows(x, sp, &rows, &fill, predict)?;
    let weights = rows
        .iter()
        .map(|z| kernel_weight(z.iter().filter(|&&b| b).count(), s, cfg.kernel_width))
        .collect();
    Ok(Neighborhood {
        rows,
        outputs,
        weights,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimeExplanation {
    pub class_index: usize,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Weighted R² clipped to `[0, 1]`.
    pub r_squared: f64,
    pub r_squared_raw: f64,
    /// Penalty actually used.
    pub lambda: f64,
    #[serde(skip)]
    pub heatmap: Tensor,
    pub warnings: Vec<String>,
    pub config: LimeConfig,
}

/// Fits the surrogate to output column `target` of `samples`.
pub fn fit_surrogate(
    samples: &Neighborhood,
    target: usize,
    sp: &SuperpixelMap,
    cfg: &LimeConfig,
) -> Result<LimeExplanation> {
    cfg.validate()?;
    let s = sp.count();
    if samples.rows.len() < s + 1 {
        return Err(Error::InvalidArgument(format!(
            "surrogate needs at least {} samples, got {}",
            s + 1,
            samples.rows.len()
        )));
    }
    let x: Vec<Vec<f64>> = samples
        .rows
        .iter()
        .map(|z| z.iter().map(|&b| b as u8 as f64).collect())
        .collect();
    let y: Vec<f64> = samples
        .outputs
        .iter()
        .map(|o| {
            o.get(target).copied().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "output column {target} out of range ({} columns)",
                    o.len()
                ))
            })
        })
        .collect::<Result<_>>()?;
    let design = Design::new(&x, &y, &samples.weights);
    let mut warnings: Vec<String> = design
        .degenerate
        .iter()
        .map(|j| {
            format!(
                "superpixel {j} has no weighted variation across samples; coefficient forced to 0"
            )
        })
        .collect();

    let nnz = |b: &[f64]| b.iter().filter(|&&v| v != 0.0).count();
    let lambda_max = design.lambda_max();
    let mut beta = vec![0.0; s];
    let lambda = match cfg.lasso_lambda {
        Lambda::Fixed(l) => {
            let mut l = l;
            design.solve(l, &mut beta);
            if nnz(&beta) > cfg.max_features {
                let requested = l;
                while nnz(&beta) > cfg.max_features && l < lambda_max {
                    l = if l > 0.0 {
                        l / LAMBDA_PATH_FACTOR
                    } else {
                        lambda_max * LAMBDA_PATH_FLOOR
                    };
                    l = l.min(lambda_max);
                    design.solve(l, &mut beta);
                }
                warnings.push(format!(
                    "lambda {requested} left more than {} nonzero coefficients; raised to {l}",
                    cfg.max_features
                ));
            }
            l
        }
        Lambda::Auto => {
            let mut chosen = (lambda_max, vec![0.0; s]);
            let mut l = lambda_max;
            while l > lambda_max * LAMBDA_PATH_FLOOR {
                l *= LAMBDA_PATH_FACTOR;
                design.solve(l, &mut beta);
                if nnz(&beta) > cfg.max_features {
                    break;
                }
                chosen = (l, beta.clone());
            }
            beta = chosen.1;
            chosen.0
        }
    };
    let r2 = design.r_squared(&beta);
    Ok(LimeExplanation {
        class_index: target,
        intercept: design.intercept(&beta),
        r_squared: r2.clamp(0.0, 1.0),
        r_squared_raw: r2,
        lambda,
        heatmap: sp.paint(&beta)?,
        coefficients: beta,
        warnings,
        config: cfg.clone(),
    })
}

/// Class probabilities of `net` as a black box over `[C,H,W]` inputs.
pub fn class_probabilities(net: &Network) -> impl Fn(&Tensor) -> Result<Vec<f64>> + Sync + '_ {
    move |t| net.predict(t)
}

/// LIME for several classes of one instance; the neighbourhood sample is
/// shared, so every class sees the same perturbations.
pub fn explain_lime_classes(
    net: &Network,
    x: &Tensor,
    classes: &[usize],
    sp: &SuperpixelMap,
    cfg: &LimeConfig,
) -> Result<Vec<LimeExplanation>> {
    for &c in classes {
        if c >= net.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "class index {c} out of range for {} classes",
                net.num_classes()
            )));
        }
    }
    let samples = sample_neighborhood(x, sp, cfg, &class_probabilities(net))?;
    classes
        .iter()
        .map(|&c| fit_surrogate(&samples, c, sp, cfg))
        .collect()
}

/// Segments `x`, samples, and fits the surrogate for `class_index`.
pub fn explain_lime(
    net: &Network,
    x: &Tensor,
    class_index: usize,
    cfg: &LimeConfig,
) -> Result<LimeExplanation> {
    let sp = segment_superpixels(x, cfg.segments, cfg.seed)?;
    Ok(explain_lime_classes(net, x, &[class_index], &sp, cfg)?.remove(0))
}
