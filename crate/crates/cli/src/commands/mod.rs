pub mod evaluate;
pub mod explain;
pub mod gen_data;
pub mod predict;
pub mod train;

use saliency::eval::format_sig9;

/// A threshold in `[0, 1]`.
pub(crate) fn parse_tau(s: &str) -> Result<f64, String> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("tau {v} is outside [0, 1]"))
    }
}

/// `--tau` first, then grid values not equal to it, in the given order.
pub(crate) fn all_taus(tau: f64, grid: &Option<Vec<f64>>) -> Vec<f64> {
    let mut out = vec![tau];
    for &t in grid.iter().flatten() {
        if !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

pub(crate) fn tau_tag(tau: f64) -> String {
    format!("t{}", format_sig9(tau))
}
