// SPDX-License-Identifier: Apache-2.0

//! Fixed-size image records and synthetic datasets.
//!
//! A record is one label byte followed by a 32x32 image as three
//! channel planes (red, green, blue), row-major within each plane.
//! Decoding maps bytes to floats in [0, 1] and lays pixels out
//! channel-last so the decoded tensor feeds the model directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tensor, TensorError};

/// Source image side length, in pixels.
pub const IMAGE_SIDE: usize = 32;

/// Bytes per record: one label byte plus three channel planes.
pub const RECORD_LEN: usize = 1 + 3 * IMAGE_SIDE * IMAGE_SIDE;

/// Number of classes a record's label byte may take.
pub const CLASSES: usize = 10;

/// Decode one record into its label and a `[32, 32, 3]` image.
pub fn decode_record(raw: &[u8]) -> Result<(u8, Tensor), TensorError> {
    if raw.len() != RECORD_LEN {
        return Err(TensorError::RecordTruncated);
    }
    let label = raw[0];
    if label as usize >= CLASSES {
        return Err(TensorError::LabelOutOfRange(label));
    }
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[p * 3 + c] = raw[1 + c * plane + p] as f32 / 255.0;
        }
    }
    Ok((label, Tensor::new(vec![IMAGE_SIDE, IMAGE_SIDE, 3], data)?))
}

/// Encode a label and a `[32, 32, 3]` image with values in [0, 1].
pub fn encode_record(label: u8, image: &Tensor) -> Result<Vec<u8>, TensorError> {
    if label as usize >= CLASSES {
        return Err(TensorError::LabelOutOfRange(label));
    }
    if image.shape() != [IMAGE_SIDE, IMAGE_SIDE, 3] {
        return Err(TensorError::ShapeMismatch(format!(
            "record image must be [32, 32, 3], got {:?}",
            image.shape()
        )));
    }
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let mut raw = vec![0u8; RECORD_LEN];
    raw[0] = label;
    for (p, px) in image.data().chunks_exact(3).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            raw[1 + c * plane + p] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(raw)
}

/// Convert labels to one-hot rows.
pub fn one_hot(labels: &[u8], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l as usize] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("labels checked at decode")
}

/// Base color per class for the synthetic dataset. Classes are far
/// apart in color space so even a narrow model separates them.
const PALETTE: [[u8; 3]; CLASSES] = [
    [230, 40, 40],
    [40, 230, 40],
    [40, 40, 230],
    [230, 230, 40],
    [230, 40, 230],
    [40, 230, 230],
    [240, 140, 30],
    [140, 30, 240],
    [150, 150, 150],
    [245, 245, 245],
];

/// Generate `count` records whose class determines the dominant color,
/// with a vertical shading gradient and per-pixel noise on top. The
/// same seed always yields the same bytes.
pub fn synthetic_dataset(count: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let mut out = Vec::with_capacity(count * RECORD_LEN);
    for i in 0..count {
        let label = (i % CLASSES) as u8;
        let base = PALETTE[label as usize];
        out.push(label);
        let start = out.len();
        out.resize(start + 3 * plane, 0);
        for row in 0..IMAGE_SIDE {
            let shade = 0.75 + 0.25 * (row as f32 / (IMAGE_SIDE - 1) as f32);
            for col in 0..IMAGE_SIDE {
                let p = row * IMAGE_SIDE + col;
                for c in 0..3 {
                    let noise: f32 = rng.gen_range(-20.0..20.0);
                    let v = base[c] as f32 * shade + noise;
                    out[start + c * plane + p] = v.clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    out
}

/// Two well-separated point clouds with one-hot labels, for quick
/// convergence checks on a linear model.
pub fn separable_set(n: usize, dim: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = vec![0.0f32; n * dim];
    let mut labels = vec![0.0f32; n * 2];
    for i in 0..n {
        let class = i % 2;
        let center = if class == 0 { -1.0 } else { 1.0 };
        for d in 0..dim {
            features[i * dim + d] = center + rng.gen_range(-0.3..0.3);
        }
        labels[i * 2 + class] = 1.0;
    }
    (
        Tensor::new(vec![n, dim], features).expect("shape matches data"),
        Tensor::new(vec![n, 2], labels).expect("shape matches data"),
    )
}
