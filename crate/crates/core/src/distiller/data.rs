//! Procedural training images: a flat background with one to three soft
//! Gaussian blobs alpha-composited on top. Every image is a pure function
//! of `(seed, index)`.

use rand::Rng;

use crate::rng;
use crate::tensor::Tensor;

pub const DATASET_RESOLUTION: usize = 32;

/// `[3, res, res]` image with values in `[−1, 1]`.
pub fn blob_image(seed: u64, index: u64, res: usize) -> Tensor {
    let mut r = rng::stream(seed, rng::ids::DATASET + index);
    let mut px = vec![0.0; 3 * res * res];
    let bg: [f64; 3] = std::array::from_fn(|_| r.random_range(-0.6..0.6));
    for c in 0..3 {
        px[c * res * res..(c + 1) * res * res].fill(bg[c]);
    }
    let blobs = r.random_range(1..=3);
    let size = res as f64;
    for _ in 0..blobs {
        let cy = r.random_range(0.15..0.85) * size;
        let cx = r.random_range(0.15..0.85) * size;
        let sigma = r.random_range(0.06..0.2) * size;
        let color: [f64; 3] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
        for y in 0..res {
            for x in 0..res {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let a = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                for c in 0..3 {
                    let p = &mut px[(c * res + y) * res + x];
                    *p = (1.0 - a) * *p + a * color[c];
                }
            }
        }
    }
    px.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Tensor::new(vec![3, res, res], px).expect("sized above")
}

/// The 32×32 dataset sample at `index`.
pub fn synth_dataset_sample(seed: u64, index: u64) -> Tensor {
    blob_image(seed, index, DATASET_RESOLUTION)
}

/// `[n, 3, res, res]` batch of consecutive samples starting at `first`.
pub fn blob_batch(seed: u64, first: u64, n: usize, res: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * 3 * res * res);
    for i in 0..n as u64 {
        data.extend_from_slice(blob_image(seed, first + i, res).data());
    }
    Tensor::new(vec![n, 3, res, res], data).expect("sized above")
}
