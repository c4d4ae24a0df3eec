//! Synthetic multi-label "blob" images with pixel-exact ground-truth masks.
//!
//! Class `c` is a textured rectangle placed somewhere inside quadrant `c`
//! (row-major: top-left, top-right, bottom-left, bottom-right). Each class
//! has its own texture so that a small convolutional net can tell them
//! apart locally: solid, horizontal stripes, vertical stripes, checkerboard.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pgm::GrayImage;

pub const BLOB_CLASSES: usize = 4;

const BRIGHT: u8 = 255;
const DIM: u8 = 90;
const BACKGROUND_MAX: u8 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlobRect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl BlobRect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.height && c >= self.col && c < self.col + self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobSample {
    pub id: String,
    pub image: GrayImage,
    /// One entry per class; `Some` when the class is present.
    pub blobs: Vec<Option<BlobRect>>,
}

impl BlobSample {
    pub fn labels(&self) -> Vec<f64> {
        self.blobs
            .iter()
            .map(|b| if b.is_some() { 1.0 } else { 0.0 })
            .collect()
    }

    /// Row-major binary mask of the class blob (all false if absent).
    pub fn mask_bits(&self, class: usize) -> Vec<bool> {
        let (h, w) = (self.image.height, self.image.width);
        match self.blobs.get(class).copied().flatten() {
            Some(rect) => (0..h * w).map(|i| rect.contains(i / w, i % w)).collect(),
            None => vec![false; h * w],
        }
    }
}

fn texture(class: usize, r: usize, c: usize) -> u8 {
    let on = match class {
        0 => true,
        1 => r.is_multiple_of(2),
        2 => c.is_multiple_of(2),
        _ => (r + c).is_multiple_of(2),
    };
    if on {
        BRIGHT
    } else {
        DIM
    }
}

/// Generates `n` samples of `image_size`² pixels. Sample `i` draws from its
/// own ChaCha stream, so the set is reproducible for a given seed.
pub fn generate_blob_dataset(n: usize, image_size: usize, seed: u64) -> Result<Vec<BlobSample>> {
    if image_size < 8 {
        return Err(Error::InvalidArgument(format!(
            "image_size must be >= 8, got {image_size}"
        )));
    }
    Ok(crate::par::map_range(n, |i| {
        blob_sample(i, image_size, seed)
    }))
}

fn blob_sample(index: usize, size: usize, seed: u64) -> BlobSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);

    let quadrant = size / 2;
    let lo = (size / 5).max(2);
    let hi = (3 * size / 8).max(lo).min(quadrant);

    let mut pixels: Vec<u8> = (0..size * size)
        .map(|_| rng.random_range(0..=BACKGROUND_MAX))
        .collect();
    let mut blobs = Vec::with_capacity(BLOB_CLASSES);
    for class in 0..BLOB_CLASSES {
        if !rng.random_bool(0.5) {
            blobs.push(None);
            continue;
        }
        let height = rng.random_range(lo..=hi);
        let width = rng.random_range(lo..=hi);
        let (qr, qc) = (class / 2, class % 2);
        let row = qr * quadrant + rng.random_range(0..=quadrant - height);
        let col = qc * quadrant + rng.random_range(0..=quadrant - width);
        let rect = BlobRect {
            row,
            col,
            height,
            width,
        };
        for r in 0..height {
            for c in 0..width {
                pixels[(row + r) * size + col + c] = texture(class, r, c);
            }
        }
        blobs.push(Some(rect));
    }
    BlobSample {
        id: format!("img_{index:05}"),
        image: GrayImage {
            width: size,
            height: size,
            pixels,
        },
        blobs,
    }
}
