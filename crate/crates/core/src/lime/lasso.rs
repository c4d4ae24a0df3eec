//! Weighted lasso with an unpenalized intercept, solved by cyclic coordinate
//! descent on weighted-centered data.
//!
//! Objective: `½ Σ_i w_i (y_i − b − x_i·β)² + λ Σ_j |β_j|`.

const MAX_SWEEPS: usize = 100_000;
const TOLERANCE: f64 = 1e-13;

pub(crate) struct Design {
    cols: Vec<Vec<f64>>,
    y: Vec<f64>,
    w: Vec<f64>,
    x_mean: Vec<f64>,
    y_mean: f64,
    /// `Σ w x̃_j²` per column.
    curvature: Vec<f64>,
    /// Columns with no weighted variance; their coefficient stays 0.
    pub degenerate: Vec<usize>,
}

impl Design {
    /// `rows[i][j]` is feature `j` of sample `i`.
    pub fn new(rows: &[Vec<f64>], y: &[f64], w: &[f64]) -> Self {
        let p = rows.first().map_or(0, Vec::len);
        let wsum: f64 = w.iter().sum();
        let y_mean = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / wsum;
        let mut cols = Vec::with_capacity(p);
        let mut x_mean = Vec::with_capacity(p);
        let mut curvature = Vec::with_capacity(p);
        let mut degenerate = Vec::new();
        for j in 0..p {
            let mean = rows.iter().zip(w).map(|(r, wi)| r[j] * wi).sum::<f64>() / wsum;
            let col: Vec<f64> = rows.iter().map(|r| r[j] - mean).collect();
            let a: f64 = col.iter().zip(w).map(|(x, wi)| wi * x * x).sum();
            if a <= 1e-12 * wsum {
                degenerate.push(j);
            }
            cols.push(col);
            x_mean.push(mean);
            curvature.push(a);
        }
        Design {
            cols,
            y: y.iter().map(|v| v - y_mean).collect(),
            w: w.to_vec(),
            x_mean,
            y_mean,
            curvature,
            degenerate,
        }
    }

    pub fn features(&self) -> usize {
        self.cols.len()
    }

    fn usable(&self, j: usize) -> bool {
        !self.degenerate.contains(&j)
    }

    /// Smallest λ for which β = 0 is optimal.
    pub fn lambda_max(&self) -> f64 {
        (0..self.features())
            .filter(|&j| self.usable(j))
            .map(|j| self.corr(j, &self.y).abs())
            .fold(0.0, f64::max)
    }

    fn corr(&self, j: usize, r: &[f64]) -> f64 {
        self.cols[j]
            .iter()
            .zip(r)
            .zip(&self.w)
            .map(|((x, r), w)| w * x * r)
            .sum()
    }

    /// Runs coordinate descent from `beta` (warm start) at penalty `lambda`.
    pub fn solve(&self, lambda: f64, beta: &mut [f64]) {
        for &j in &self.degenerate {
            beta[j] = 0.0;
        }
        let mut resid = self.y.clone();
        for (j, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                for (r, x) in resid.iter_mut().zip(&self.cols[j]) {
                    *r -= b * x;
                }
            }
        }
        let scale = self
            .curvature
            .iter()
            .fold(0.0f64, |m, &a| m.max(a.sqrt()))
            .max(f64::MIN_POSITIVE);
        for _ in 0..MAX_SWEEPS {
            let mut max_step = 0.0f64;
            for (j, bj) in beta.iter_mut().enumerate().take(self.features()) {
                if !self.usable(j) {
                    continue;
                }
                let a = self.curvature[j];
                let rho = self.corr(j, &resid) + a * *bj;
                let new = soft_threshold(rho, lambda) / a;
                let delta = new - *bj;
                if delta != 0.0 {
                    for (r, x) in resid.iter_mut().zip(&self.cols[j]) {
                        *r -= delta * x;
                    }
                    *bj = new;
                    max_step = max_step.max(delta.abs() * a.sqrt());
                }
            }
            if max_step <= TOLERANCE * scale {
                break;
            }
        }
    }

    pub fn intercept(&self, beta: &[f64]) -> f64 {
        self.y_mean
            - self
                .x_mean
                .iter()
                .zip(beta)
                .map(|(m, b)| m * b)
                .sum::<f64>()
    }

    /// Weighted coefficient of determination (unclipped). A constant target
    /// counts as perfectly explained when the fit reproduces it.
    pub fn r_squared(&self, beta: &[f64]) -> f64 {
        let mut sse = 0.0;
        let mut sst = 0.0;
        for i in 0..self.y.len() {
            let fit: f64 = (0..self.features())
                .map(|j| self.cols[j][i] * beta[j])
                .sum();
            let e = self.y[i] - fit;
            sse += self.w[i] * e * e;
            sst += self.w[i] * self.y[i] * self.y[i];
        }
        if sst > 0.0 {
            1.0 - sse / sst
        } else if sse == 0.0 {
            1.0
        } else {
            0.0
        }
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_planted_weights_at_zero_penalty() {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i: u64| {
                (0..5)
                    .map(|j| ((i * 2654435761) >> (j * 3 + 5) & 1) as f64)
                    .collect()
            })
            .collect();
        let truth = [0.5, -1.25, 0.0, 2.0, 0.125];
        let y: Vec<f64> = rows
            .iter()
            .map(|r| 0.3 + r.iter().zip(&truth).map(|(x, b)| x * b).sum::<f64>())
            .collect();
        let w: Vec<f64> = (0..40).map(|i| 0.2 + (i % 5) as f64 * 0.1).collect();
        let d = Design::new(&rows, &y, &w);
        let mut beta = vec![0.0; 5];
        d.solve(0.0, &mut beta);
        for (b, t) in beta.iter().zip(&truth) {
            assert!((b - t).abs() < 1e-9, "{beta:?}");
        }
        assert!((d.intercept(&beta) - 0.3).abs() < 1e-9);
        assert!((d.r_squared(&beta) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_max_zeroes_everything() {
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![(i % 2) as f64, (i % 3 == 0) as u8 as f64])
            .collect();
        let y: Vec<f64> = rows.iter().map(|r| r[0] * 2.0 - r[1]).collect();
        let d = Design::new(&rows, &y, &vec![1.0; 30]);
        let mut beta = vec![0.0; 2];
        d.solve(d.lambda_max(), &mut beta);
        assert_eq!(beta, vec![0.0, 0.0]);
        d.solve(d.lambda_max() * 0.5, &mut beta);
        assert!(beta.iter().any(|&b| b != 0.0));
    }

    #[test]
    fn constant_column_is_degenerate() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, (i % 2) as f64]).collect();
        let y: Vec<f64> = rows.iter().map(|r| r[1]).collect();
        let d = Design::new(&rows, &y, &[1.0; 10]);
        assert_eq!(d.degenerate, vec![0]);
        let mut beta = vec![5.0, 0.0];
        d.solve(0.0, &mut beta);
        assert_eq!(beta[0], 0.0);
        assert!((beta[1] - 1.0).abs() < 1e-12);
    }
}
