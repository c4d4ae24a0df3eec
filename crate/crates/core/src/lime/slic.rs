//! Deterministic SLIC-style superpixels: k-means on (intensity, row, col)
//! from a regular grid of seeds, followed by connectivity repair.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const ITERATIONS: usize = 10;
/// Intensity difference that weighs as much as one grid step of distance.
const COMPACTNESS: f64 = 0.1;

/// Per-pixel segment ids for an `H x W` image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelMap {
    height: usize,
    width: usize,
    labels: Vec<usize>,
    count: usize,
}

impl SuperpixelMap {
    /// Validates that ids are dense in `[0, S)`.
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(Error::shape(
                "superpixel labels",
                &[height * width],
                &[labels.len()],
            ));
        }
        let count = labels.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; count];
        for &l in &labels {
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!(
                "superpixel id {missing} is unused; ids must cover 0..{count}"
            )));
        }
        Ok(SuperpixelMap {
            height,
            width,
            labels,
            count,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Number of segments `S`.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// `[H, W]` map with `values[label]` painted over each segment.
    pub fn paint(&self, values: &[f64]) -> Result<Tensor> {
        if values.len() != self.count {
            return Err(Error::shape(
                "superpixel values",
                &[self.count],
                &[values.len()],
            ));
        }
        Tensor::new(
            vec![self.height, self.width],
            self.labels.iter().map(|&l| values[l]).collect(),
        )
    }
}

/// Segments a `[C, H, W]` (or `[H, W]`) image into roughly
/// `target_segments` contiguous regions. The result never has fewer than
/// `target/2` or more than `2 * target` segments: if clustering lands
/// outside that band a plain grid is used instead. The algorithm has no
/// random component, so `seed` does not change the output.
pub fn segment_superpixels(
    image: &Tensor,
    target_segments: usize,
    seed: u64,
) -> Result<SuperpixelMap> {
    let _ = seed;
    let (channels, h, w) = match *image.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "superpixels need an [H,W] or [C,H,W] image, got {:?}",
                image.shape()
            )))
        }
    };
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!(
            "image must be at least 2x2 for superpixels, got {h}x{w}"
        )));
    }
    let n = h * w;
    if target_segments < 2 || target_segments > n {
        return Err(Error::InvalidArgument(format!(
            "target_segments must be in 2..={n}, got {target_segments}"
        )));
    }

    let plane = image.data();
    let intensity: Vec<f64> = (0..n)
        .map(|p| (0..channels).map(|c| plane[c * n + p]).sum::<f64>() / channels as f64)
        .collect();

    let (gh, gw) = grid_dims(h, w, target_segments);
    let step = ((n as f64) / target_segments as f64).sqrt();
    let mut centers: Vec<[f64; 3]> = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let r = (gy as f64 + 0.5) * h as f64 / gh as f64 - 0.5;
            let c = (gx as f64 + 0.5) * w as f64 / gw as f64 - 0.5;
            let p = r.round() as usize * w + c.round() as usize;
            centers.push([intensity[p], r, c]);
        }
    }

    let mut assign = vec![0usize; n];
    let spatial = 1.0 / (step * step);
    let tonal = 1.0 / (COMPACTNESS * COMPACTNESS);
    for _ in 0..ITERATIONS {
        for (p, slot) in assign.iter_mut().enumerate() {
            let (r, c) = ((p / w) as f64, (p % w) as f64);
            let mut best = (f64::INFINITY, 0);
            for (k, ctr) in centers.iter().enumerate() {
                let di = intensity[p] - ctr[0];
                let (dr, dc) = (r - ctr[1], c - ctr[2]);
                let d = di * di * tonal + (dr * dr + dc * dc) * spatial;
                if d < best.0 {
                    best = (d, k);
                }
            }
            *slot = best.1;
        }
        let mut acc = vec![[0.0f64; 4]; centers.len()];
        for (p, &k) in assign.iter().enumerate() {
            acc[k][0] += intensity[p];
            acc[k][1] += (p / w) as f64;
            acc[k][2] += (p % w) as f64;
            acc[k][3] += 1.0;
        }
        for (ctr, a) in centers.iter_mut().zip(&acc) {
            if a[3] > 0.0 {
                *ctr = [a[0] / a[3], a[1] / a[3], a[2] / a[3]];
            }
        }
    }

    let labels = enforce_connectivity(&assign, h, w, (n / (4 * target_segments)).max(1));
    let map = SuperpixelMap::new(h, w, labels)?;
    let lo = target_segments.div_ceil(2);
    if map.count() >= lo && map.count() <= 2 * target_segments {
        Ok(map)
    } else {
        grid_map(h, w, gh, gw)
    }
}

/// Grid of roughly `target` cells with the image's aspect ratio.
fn grid_dims(h: usize, w: usize, target: usize) -> (usize, usize) {
    let gh = ((target as f64 * h as f64 / w as f64).sqrt().round() as usize).clamp(1, h);
    let gw = ((target as f64 / gh as f64).round() as usize).clamp(1, w);
    (gh, gw)
}

fn grid_map(h: usize, w: usize, gh: usize, gw: usize) -> Result<SuperpixelMap> {
    let labels = (0..h * w)
        .map(|p| ((p / w) * gh / h) * gw + (p % w) * gw / w)
        .collect();
    SuperpixelMap::new(h, w, labels)
}

/// Splits clusters into 4-connected components, merges components smaller
/// than `min_size` into an adjacent one, and relabels densely in scan order.
fn enforce_connectivity(assign: &[usize], h: usize, w: usize, min_size: usize) -> Vec<usize> {
    let n = h * w;
    let neighbors = |p: usize| {
        let (r, c) = (p / w, p % w);
        [
            (r > 0).then(|| p - w),
            (c > 0).then(|| p - 1),
            (c + 1 < w).then(|| p + 1),
            (r + 1 < h).then(|| p + w),
        ]
        .into_iter()
        .flatten()
    };

    let mut comp = vec![usize::MAX; n];
    let mut members: Vec<Vec<usize>> = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = members.len();
        let mut stack = vec![start];
        let mut pixels = Vec::new();
        comp[start] = id;
        while let Some(p) = stack.pop() {
            pixels.push(p);
            for q in neighbors(p) {
                if comp[q] == usize::MAX && assign[q] == assign[start] {
                    comp[q] = id;
                    stack.push(q);
                }
            }
        }
        pixels.sort_unstable();
        members.push(pixels);
    }

    // Union-find style redirection; small components fold into the first
    // foreign neighbour met in scan order.
    let mut parent: Vec<usize> = (0..members.len()).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut size: Vec<usize> = members.iter().map(Vec::len).collect();
    for (id, group) in members.iter().enumerate() {
        let me = root(&mut parent, id);
        if size[me] >= min_size {
            continue;
        }
        let target = group
            .iter()
            .flat_map(|&p| neighbors(p))
            .map(|q| root(&mut parent, comp[q]))
            .find(|&r| r != me);
        if let Some(t) = target {
            parent[me] = t;
            size[t] += size[me];
        }
    }

    let mut dense = vec![usize::MAX; members.len()];
    let mut next = 0;
    (0..n)
        .map(|p| {
            let r = root(&mut parent, comp[p]);
            if dense[r] == usize::MAX {
                dense[r] = next;
                next += 1;
            }
            dense[r]
        })
        .collect()
}
