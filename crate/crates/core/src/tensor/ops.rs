// SPDX-License-Identifier: Apache-2.0

//! Forward kernels. Each is a pure function from input tensors to an
//! output tensor; cost accounting and finiteness checks live in the
//! session, which also owns shape dispatch for graph nodes.

use super::{Tensor, TensorError};

/// Rec. 601 luma weights; the mix is done in f64 so a gray pixel is an
/// exact fixed point of saturation scaling after the cast back to f32.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn mismatch(msg: String) -> TensorError {
    TensorError::ShapeMismatch(msg)
}

/// Interpret a tensor as a batch of images: rank 3 is a single [h,w,c]
/// image, rank 4 is [n,h,w,c].
fn image_dims(x: &Tensor, op: &str) -> Result<(usize, usize, usize, usize), TensorError> {
    match *x.shape() {
        [h, w, c] => Ok((1, h, w, c)),
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(mismatch(format!(
            "{op} wants an [n,h,w,c] or [h,w,c] tensor, got {:?}",
            x.shape()
        ))),
    }
}

fn image_shape(x: &Tensor, h: usize, w: usize, c: usize) -> Vec<usize> {
    match *x.shape() {
        [_, _, _] => vec![h, w, c],
        [n, _, _, _] => vec![n, h, w, c],
        _ => unreachable!("checked by image_dims"),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(mismatch(format!(
            "matmul wants two rank-2 tensors, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    if k != k2 {
        return Err(mismatch(format!(
            "matmul inner dims differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0f32; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in ad[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Elementwise sum; a rank-1 right side matching the last axis broadcasts
/// across the leading axes (bias add).
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let last = *a.shape().last().unwrap_or(&0);
    if b.rank() == 1 && b.shape()[0] == last {
        let bd = b.data();
        let data = a
            .data()
            .chunks_exact(last)
            .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    Err(mismatch(format!(
        "add cannot combine {:?} with {:?}",
        a.shape(),
        b.shape()
    )))
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape unchanged")
}

/// Softmax over the last axis of a tensor of rank 1 or higher.
pub fn softmax(x: &Tensor) -> Result<Tensor, TensorError> {
    let Some(&classes) = x.shape().last() else {
        return Err(mismatch("softmax wants rank 1 or higher".to_string()));
    };
    let mut data = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(classes) {
        let top = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v));
        let exps: Vec<f32> = row.iter().map(|&v| (v - top).exp()).collect();
        let sum: f32 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / sum));
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// Mean cross-entropy between label rows (one-hot or any distribution)
/// and the softmax of the logit rows, as a scalar.
pub fn softmax_xent(logits: &Tensor, labels: &Tensor) -> Result<Tensor, TensorError> {
    let (&[n, c], &[n2, c2]) = (logits.shape(), labels.shape()) else {
        return Err(mismatch(format!(
            "cross entropy wants rank-2 logits and labels, got {:?} and {:?}",
            logits.shape(),
            labels.shape()
        )));
    };
    if n != n2 || c != c2 {
        return Err(mismatch(format!(
            "cross entropy shapes differ: {:?} vs {:?}",
            logits.shape(),
            labels.shape()
        )));
    }
    let mut total = 0f32;
    for (lrow, trow) in logits.data().chunks_exact(c).zip(labels.data().chunks_exact(c)) {
        let top = lrow.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v));
        let lse = top + lrow.iter().map(|&v| (v - top).exp()).sum::<f32>().ln();
        total += trow
            .iter()
            .zip(lrow)
            .map(|(&t, &v)| t * (lse - v))
            .sum::<f32>();
    }
    Ok(Tensor::scalar(total / n as f32))
}

/// Same-padding stride-1 convolution of [n,h,w,ic] with [kh,kw,ic,oc]
/// filters; kernel sides must be odd.
pub fn conv2d_same(x: &Tensor, w: &Tensor) -> Result<Tensor, TensorError> {
    let (&[n, h, wd, ic], &[kh, kw, wic, oc]) = (x.shape(), w.shape()) else {
        return Err(mismatch(format!(
            "conv2d wants [n,h,w,ic] and [kh,kw,ic,oc], got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    };
    if wic != ic {
        return Err(mismatch(format!(
            "conv2d channel mismatch: input {ic}, filter {wic}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(mismatch(format!("conv2d kernel {kh}x{kw} must be odd")));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0f32; n * h * wd * oc];
    let xs = x.data();
    let ws = w.data();
    for b in 0..n {
        for y in 0..h {
            for dy in 0..kh {
                let sy = match (y + dy).checked_sub(ph) {
                    Some(sy) if sy < h => sy,
                    _ => continue,
                };
                for ox in 0..wd {
                    let orow = ((b * h + y) * wd + ox) * oc;
                    for dx in 0..kw {
                        let sx = match (ox + dx).checked_sub(pw) {
                            Some(sx) if sx < wd => sx,
                            _ => continue,
                        };
                        let xrow = ((b * h + sy) * wd + sx) * ic;
                        let wbase = (dy * kw + dx) * ic * oc;
                        for ci in 0..ic {
                            let xv = xs[xrow + ci];
                            let wrow = &ws[wbase + ci * oc..wbase + (ci + 1) * oc];
                            let orow = &mut out[orow..orow + oc];
                            for (o, &wv) in orow.iter_mut().zip(wrow) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, h, wd, oc], out)
}

/// 2x2 max pooling with stride 2 over [n,h,w,c]; h and w must be even.
/// Ties go to the earliest element in row-major window order, so the
/// gradient routing is deterministic.
pub fn maxpool2x2(x: &Tensor) -> Result<Tensor, TensorError> {
    let &[n, h, w, c] = x.shape() else {
        return Err(mismatch(format!(
            "maxpool wants [n,h,w,c], got {:?}",
            x.shape()
        )));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(mismatch(format!("maxpool wants even sides, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.data();
    let mut out = vec![0f32; n * oh * ow * c];
    for b in 0..n {
        for y in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = xs[((b * h + 2 * y + dy) * w + 2 * ox + dx) * c + ch];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[((b * oh + y) * ow + ox) * c + ch] = best;
                }
            }
        }
    }
    Tensor::new(vec![n, oh, ow, c], out)
}

/// Reinterpret under new dimensions; one entry may be -1 to be inferred.
pub fn reshape(x: &Tensor, dims: &[i64]) -> Result<Tensor, TensorError> {
    let wildcards = dims.iter().filter(|&&d| d == -1).count();
    if wildcards > 1 || dims.iter().any(|&d| d == 0 || d < -1) {
        return Err(mismatch(format!("bad reshape target {dims:?}")));
    }
    let known: usize = dims
        .iter()
        .filter(|&&d| d > 0)
        .map(|&d| d as usize)
        .product();
    let mut shape = Vec::with_capacity(dims.len());
    for &d in dims {
        if d == -1 {
            if known == 0 || !x.len().is_multiple_of(known) {
                return Err(mismatch(format!(
                    "cannot infer {dims:?} from {} elements",
                    x.len()
                )));
            }
            shape.push(x.len() / known);
        } else {
            shape.push(d as usize);
        }
    }
    x.reshaped(&shape)
}

/// Spatial window copy from each image.
pub fn crop(
    x: &Tensor,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> Result<Tensor, TensorError> {
    let (n, h, w, c) = image_dims(x, "crop")?;
    if height == 0 || width == 0 || top + height > h || left + width > w {
        return Err(mismatch(format!(
            "crop {height}x{width}+{top}+{left} outside {h}x{w}"
        )));
    }
    let xs = x.data();
    let mut out = Vec::with_capacity(n * height * width * c);
    for b in 0..n {
        for y in 0..height {
            let row = ((b * h + top + y) * w + left) * c;
            out.extend_from_slice(&xs[row..row + width * c]);
        }
    }
    Tensor::new(image_shape(x, height, width, c), out)
}

/// Mirror each image around its vertical axis.
pub fn flip_h(x: &Tensor) -> Result<Tensor, TensorError> {
    let (n, h, w, c) = image_dims(x, "flip")?;
    let xs = x.data();
    let mut out = Vec::with_capacity(xs.len());
    for b in 0..n {
        for y in 0..h {
            let row = (b * h + y) * w * c;
            for ox in (0..w).rev() {
                out.extend_from_slice(&xs[row + ox * c..row + (ox + 1) * c]);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Shift every value by `delta`, clamped to [0,1].
pub fn brightness(x: &Tensor, delta: f32) -> Tensor {
    let data = x.data().iter().map(|&v| (v + delta).clamp(0.0, 1.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape unchanged")
}

/// Scale each pixel's chroma about its luma by `scale`, clamped to [0,1].
/// Gray pixels are exact fixed points for any scale.
pub fn saturation(x: &Tensor, scale: f32) -> Result<Tensor, TensorError> {
    let (_, _, _, c) = image_dims(x, "saturation")?;
    if c != 3 {
        return Err(mismatch(format!("saturation wants 3 channels, got {c}")));
    }
    let s = scale as f64;
    let mut out = Vec::with_capacity(x.len());
    for px in x.data().chunks_exact(3) {
        let luma = LUMA[0] * px[0] as f64 + LUMA[1] * px[1] as f64 + LUMA[2] * px[2] as f64;
        for &p in px {
            let v = luma + s * (p as f64 - luma);
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
