//! Shapley attributions over superpixels: brute-force enumeration for small
//! games and KernelSHAP (Shapley-kernel weighted least squares) otherwise.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lime::{baseline_fill, evaluate_rows, Baseline, SuperpixelMap};
use crate::netgraph::Network;
use crate::tensor::Tensor;

pub const MAX_EXACT_PLAYERS: usize = 20;
const RIDGE_JITTER: f64 = 1e-10;

/// Exact Shapley values of the game `value` over `m` players by summing
/// weighted marginal contributions over all `2^m` coalitions.
pub fn exact_shapley<F>(value: F, m: usize) -> Result<Vec<f64>>
where
    F: Fn(&[bool]) -> f64,
{
    if m > MAX_EXACT_PLAYERS {
        return Err(Error::InvalidArgument(format!(
            "exact Shapley enumeration is limited to {MAX_EXACT_PLAYERS} players (got {m}); use kernel_shap"
        )));
    }
    let table: Vec<f64> = (0..1usize << m)
        .map(|mask| value(&mask_to_bits(mask, m)))
        .collect();
    // |z|! (m-|z|-1)! / m!  =  1 / (m * C(m-1, |z|))
    let weight: Vec<f64> = (0..m)
        .map(|k| 1.0 / (m as f64 * binomial(m - 1, k)))
        .collect();
    Ok((0..m)
        .map(|i| {
            let bit = 1usize << i;
            (0..1usize << m)
                .filter(|mask| mask & bit == 0)
                .map(|mask| weight[mask.count_ones() as usize] * (table[mask | bit] - table[mask]))
                .sum()
        })
        .collect())
}

fn mask_to_bits(mask: usize, m: usize) -> Vec<bool> {
    (0..m).map(|i| mask >> i & 1 == 1).collect()
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley-kernel weight of a coalition of size `s` among `m` players.
pub fn shapley_kernel_weight(m: usize, s: usize) -> f64 {
    (m - 1) as f64 / (binomial(m, s) * s as f64 * (m - s) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapConfig {
    pub num_coalitions: usize,
    pub baseline: Baseline,
    pub seed: u64,
    /// Target superpixel count handed to the segmenter.
    pub segments: usize,
}

impl Default for ShapConfig {
    fn default() -> Self {
        ShapConfig {
            num_coalitions: 2000,
            baseline: Baseline::MeanColor,
            seed: 0,
            segments: 50,
        }
    }
}

/// Attributions for one output of a game.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapValues {
    pub phi: Vec<f64>,
    /// Value of the empty coalition.
    pub base_value: f64,
    /// Value of the full coalition.
    pub full_value: f64,
    /// Coalitions entering the regression (empty and full excluded).
    pub num_coalitions: usize,
    /// True when every proper coalition was enumerated.
    pub exact: bool,
    pub warnings: Vec<String>,
}

/// Coalition rows for KernelSHAP: every proper coalition when the budget
/// allows, otherwise uniform draws each paired with its complement.
fn coalitions(m: usize, budget: usize, seed: u64) -> (Vec<Vec<bool>>, bool) {
    let all = if m < usize::BITS as usize - 1 {
        (1usize << m) - 2
    } else {
        usize::MAX
    };
    if budget >= all {
        return ((1..=all).map(|mask| mask_to_bits(mask, m)).collect(), true);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(budget);
    while rows.len() < budget {
        let z: Vec<bool> = (0..m).map(|_| rng.random_bool(0.5)).collect();
        let ones = z.iter().filter(|&&b| b).count();
        if ones == 0 || ones == m {
            continue;
        }
        let complement = z.iter().map(|b| !b).collect();
        rows.push(z);
        if rows.len() < budget {
            rows.push(complement);
        }
    }
    (rows, false)
}

/// Solves the constrained WLS for each output column. `values[r][k]` is
/// output `k` on coalition `rows[r]`; `empty`/`full` are the endpoint values.
fn solve_kernel_wls(
    m: usize,
    rows: &[Vec<bool>],
    values: &[Vec<f64>],
    empty: &[f64],
    full: &[f64],
    exact: bool,
) -> Result<Vec<ShapValues>> {
    let outputs = empty.len();
    let raw: Vec<f64> = rows
        .iter()
        .map(|z| shapley_kernel_weight(m, z.iter().filter(|&&b| b).count()))
        .collect();
    let top = raw.iter().cloned().fold(0.0, f64::max);
    let w: Vec<f64> = raw.iter().map(|v| v / top).collect();

    // Eliminating phi_{m-1} via the efficiency constraint leaves m-1 unknowns
    // with regressors z_i - z_{m-1}.
    let free = m - 1;
    let mut a = DMatrix::<f64>::zeros(free, free);
    let design: Vec<Vec<f64>> = rows
        .iter()
        .map(|z| {
            let last = z[m - 1] as u8 as f64;
            (0..free).map(|i| z[i] as u8 as f64 - last).collect()
        })
        .collect();
    for (x, &wr) in design.iter().zip(&w) {
        for i in 0..free {
            if x[i] == 0.0 {
                continue;
            }
            for j in 0..free {
                a[(i, j)] += wr * x[i] * x[j];
            }
        }
    }
    let mut warnings = Vec::new();
    let chol = match a.clone().cholesky() {
        Some(c) => Some(c),
        None => {
            warnings.push(format!(
                "coalition design is singular; solved with ridge jitter {RIDGE_JITTER}"
            ));
            let mut jittered = a;
            for i in 0..free {
                jittered[(i, i)] += RIDGE_JITTER;
            }
            jittered.cholesky()
        }
    };

    (0..outputs)
        .map(|k| {
            let delta = full[k] - empty[k];
            let mut phi = vec![0.0; m];
            if free > 0 {
                let chol = chol
                    .as_ref()
                    .ok_or_else(|| Error::NonFinite("KernelSHAP normal equations".into()))?;
                let mut b = DVector::<f64>::zeros(free);
                for ((x, z), (vals, &wr)) in design.iter().zip(rows).zip(values.iter().zip(&w)) {
                    let target = vals[k] - empty[k] - z[m - 1] as u8 as f64 * delta;
                    for i in 0..free {
                        b[i] += wr * x[i] * target;
                    }
                }
                let sol = chol.solve(&b);
                phi[..free].copy_from_slice(sol.as_slice());
            }
            phi[m - 1] = delta - phi[..free].iter().sum::<f64>();
            if phi.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("KernelSHAP attribution".into()));
            }
            Ok(ShapValues {
                phi,
                base_value: empty[k],
                full_value: full[k],
                num_coalitions: rows.len(),
                exact,
                warnings: warnings.clone(),
            })
        })
        .collect()
}

fn check_budget(m: usize, budget: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::InvalidArgument(
            "KernelSHAP needs at least one feature".into(),
        ));
    }
    let needed = (m + 2)
        .min(if m < 63 {
            (1usize << m) - 2
        } else {
            usize::MAX
        })
        .max(1);
    if budget < needed {
        return Err(Error::InvalidArgument(format!(
            "num_coalitions must be at least {needed} for {m} features, got {budget}"
        )));
    }
    Ok(())
}

/// KernelSHAP on an explicit game over `m` players.
pub fn kernel_shap_game<F>(
    value: F,
    m: usize,
    num_coalitions: usize,
    seed: u64,
) -> Result<ShapValues>
where
    F: Fn(&[bool]) -> f64,
{
    check_budget(m, num_coalitions)?;
    let (rows, exact) = coalitions(m, num_coalitions, seed);
    let values: Vec<Vec<f64>> = rows.iter().map(|z| vec![value(z)]).collect();
    let empty = value(&vec![false; m]);
    let full = value(&vec![true; m]);
    Ok(solve_kernel_wls(m, &rows, &values, &[empty], &[full], exact)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapExplanation {
    pub class_index: usize,
    #[serde(flatten)]
    pub values: ShapValues,
    #[serde(skip)]
    pub heatmap: Tensor,
    pub seed: u64,
}

/// KernelSHAP over superpixels for several classes of one instance, sharing
/// the coalition sample. The game value is the class probability.
pub fn kernel_shap_classes(
    net: &Network,
    x: &Tensor,
    classes: &[usize],
    sp: &SuperpixelMap,
    cfg: &ShapConfig,
) -> Result<Vec<ShapExplanation>> {
    for &c in classes {
        if c >= net.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "class index {c} out of range for {} classes",
                net.num_classes()
            )));
        }
    }
    let m = sp.count();
    check_budget(m, cfg.num_coalitions)?;
    let (mut rows, exact) = coalitions(m, cfg.num_coalitions, cfg.seed);
    rows.push(vec![false; m]);
    rows.push(vec![true; m]);
    let fill = baseline_fill(x, cfg.baseline);
    let predict = |t: &Tensor| net.predict(t);
    let mut values = evaluate_rows(x, sp, &rows, &fill, &predict)?;
    let full = values.pop().expect("full row");
    let empty = values.pop().expect("empty row");
    rows.truncate(rows.len() - 2);
    let pick = |v: &[f64]| classes.iter().map(|&c| v[c]).collect::<Vec<_>>();
    let per_class: Vec<Vec<f64>> = values.iter().map(|v| pick(v)).collect();
    let solved = solve_kernel_wls(m, &rows, &per_class, &pick(&empty), &pick(&full), exact)?;
    classes
        .iter()
        .zip(solved)
        .map(|(&c, values)| {
            Ok(ShapExplanation {
                class_index: c,
                heatmap: sp.paint(&values.phi)?,
                values,
                seed: cfg.seed,
            })
        })
        .collect()
}

pub fn kernel_shap(
    net: &Network,
    x: &Tensor,
    class_index: usize,
    sp: &SuperpixelMap,
    cfg: &ShapConfig,
) -> Result<ShapExplanation> {
    Ok(kernel_shap_classes(net, x, &[class_index], sp, cfg)?.remove(0))
}
