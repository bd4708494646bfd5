// SPDX-License-Identifier: Apache-2.0

//! Backward kernels: given the forward inputs and the gradient flowing
//! into an op's output, produce the gradients for its inputs. Shapes are
//! trusted because the session only calls these after the forward pass
//! succeeded on the same tensors.

use super::ops::LUMA;
use super::Tensor;

pub fn matmul(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());

    let mut da = vec![0f32; m * k];
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &bd[p * n..(p + 1) * n];
            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }

    let mut db = vec![0f32; k * n];
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let drow = &mut db[p * n..(p + 1) * n];
            for (o, &gv) in drow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }

    (
        Tensor::new(vec![m, k], da).expect("matmul grad shape"),
        Tensor::new(vec![k, n], db).expect("matmul grad shape"),
    )
}

/// Gradient of `add`; the right side sums over broadcast rows when it was
/// a rank-1 bias.
pub fn add(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let da = g.clone();
    if a.shape() == b.shape() {
        return (da, g.clone());
    }
    let last = b.shape()[0];
    let mut db = vec![0f32; last];
    for row in g.data().chunks_exact(last) {
        for (o, &gv) in db.iter_mut().zip(row) {
            *o += gv;
        }
    }
    (da, Tensor::new(vec![last], db).expect("bias grad shape"))
}

pub fn relu(x: &Tensor, g: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape unchanged")
}

/// Takes the forward output `y` rather than the input: dx = y*(g - <g,y>)
/// row by row.
pub fn softmax(y: &Tensor, g: &Tensor) -> Tensor {
    let classes = *y.shape().last().expect("softmax rank checked forward");
    let mut data = Vec::with_capacity(y.len());
    for (yrow, grow) in y.data().chunks_exact(classes).zip(g.data().chunks_exact(classes)) {
        let inner: f32 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
        data.extend(yrow.iter().zip(grow).map(|(&yv, &gv)| yv * (gv - inner)));
    }
    Tensor::new(y.shape().to_vec(), data).expect("shape unchanged")
}

pub fn softmax_xent(logits: &Tensor, labels: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let scale = g.data()[0] / n as f32;
    let mut dlogits = Vec::with_capacity(n * c);
    let mut dlabels = Vec::with_capacity(n * c);
    for (lrow, trow) in logits
        .data()
        .chunks_exact(c)
        .zip(labels.data().chunks_exact(c))
    {
        let top = lrow.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v));
        let exps: Vec<f32> = lrow.iter().map(|&v| (v - top).exp()).collect();
        let sum: f32 = exps.iter().sum();
        let lse = top + sum.ln();
        let mass: f32 = trow.iter().sum();
        for ch in 0..c {
            let p = exps[ch] / sum;
            dlogits.push((mass * p - trow[ch]) * scale);
            dlabels.push((lse - lrow[ch]) * scale);
        }
    }
    (
        Tensor::new(vec![n, c], dlogits).expect("xent grad shape"),
        Tensor::new(vec![n, c], dlabels).expect("xent grad shape"),
    )
}

pub fn conv2d_same(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (n, h, wd, ic) = {
        let s = x.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (kh, kw, oc) = {
        let s = w.shape();
        (s[0], s[1], s[3])
    };
    let (ph, pw) = (kh / 2, kw / 2);
    let xs = x.data();
    let ws = w.data();
    let gd = g.data();
    let mut dx = vec![0f32; xs.len()];
    let mut dw = vec![0f32; ws.len()];
    for b in 0..n {
        for y in 0..h {
            for dy in 0..kh {
                let sy = match (y + dy).checked_sub(ph) {
                    Some(sy) if sy < h => sy,
                    _ => continue,
                };
                for ox in 0..wd {
                    let grow = &gd[((b * h + y) * wd + ox) * oc..][..oc];
                    for dxk in 0..kw {
                        let sx = match (ox + dxk).checked_sub(pw) {
                            Some(sx) if sx < wd => sx,
                            _ => continue,
                        };
                        let xrow = ((b * h + sy) * wd + sx) * ic;
                        let wbase = (dy * kw + dxk) * ic * oc;
                        for ci in 0..ic {
                            let xv = xs[xrow + ci];
                            let wrow = &ws[wbase + ci * oc..][..oc];
                            let dwrow = &mut dw[wbase + ci * oc..][..oc];
                            let mut acc = 0f32;
                            for o in 0..oc {
                                dwrow[o] += xv * grow[o];
                                acc += wrow[o] * grow[o];
                            }
                            dx[xrow + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("conv grad shape"),
        Tensor::new(w.shape().to_vec(), dw).expect("conv grad shape"),
    )
}

/// Routes each output gradient to the window element the forward max
/// picked, using the same earliest-wins tie rule.
pub fn maxpool2x2(x: &Tensor, g: &Tensor) -> Tensor {
    let (n, h, w, c) = {
        let s = x.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.data();
    let gd = g.data();
    let mut dx = vec![0f32; xs.len()];
    for b in 0..n {
        for y in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for dy in 0..2 {
                        for dxk in 0..2 {
                            let at = ((b * h + 2 * y + dy) * w + 2 * ox + dxk) * c + ch;
                            if xs[at] > best {
                                best = xs[at];
                                best_at = at;
                            }
                        }
                    }
                    dx[best_at] += gd[((b * oh + y) * ow + ox) * c + ch];
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx).expect("shape unchanged")
}

pub fn reshape(x: &Tensor, g: &Tensor) -> Tensor {
    g.reshaped(x.shape()).expect("element count unchanged")
}

/// Scatters the window gradient back into a zero image.
pub fn crop(x: &Tensor, top: usize, left: usize, g: &Tensor) -> Tensor {
    let (n, h, w, c) = match *x.shape() {
        [h, w, c] => (1, h, w, c),
        [n, h, w, c] => (n, h, w, c),
        _ => unreachable!("checked by the forward pass"),
    };
    let (gh, gw) = {
        let s = g.shape();
        (s[s.len() - 3], s[s.len() - 2])
    };
    let gd = g.data();
    let mut dx = vec![0f32; x.len()];
    for b in 0..n {
        for y in 0..gh {
            let src = ((b * gh + y) * gw) * c;
            let dst = ((b * h + top + y) * w + left) * c;
            dx[dst..dst + gw * c].copy_from_slice(&gd[src..src + gw * c]);
        }
    }
    Tensor::new(x.shape().to_vec(), dx).expect("shape unchanged")
}

pub fn flip_h(g: &Tensor) -> Tensor {
    super::ops::flip_h(g).expect("shape already validated")
}

pub fn brightness(x: &Tensor, delta: f32, g: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&xv, &gv)| {
            let shifted = xv + delta;
            if shifted > 0.0 && shifted < 1.0 {
                gv
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape unchanged")
}

pub fn saturation(x: &Tensor, scale: f32, g: &Tensor) -> Tensor {
    let s = scale as f64;
    let mut dx = Vec::with_capacity(x.len());
    for (px, gpx) in x.data().chunks_exact(3).zip(g.data().chunks_exact(3)) {
        let luma = LUMA[0] * px[0] as f64 + LUMA[1] * px[1] as f64 + LUMA[2] * px[2] as f64;
        let mut masked = [0f64; 3];
        let mut pass_sum = 0f64;
        for ch in 0..3 {
            let u = luma + s * (px[ch] as f64 - luma);
            if u > 0.0 && u < 1.0 {
                masked[ch] = gpx[ch] as f64;
                pass_sum += gpx[ch] as f64;
            }
        }
        for ch in 0..3 {
            dx.push((s * masked[ch] + LUMA[ch] * (1.0 - s) * pass_sum) as f32);
        }
    }
    Tensor::new(x.shape().to_vec(), dx).expect("shape unchanged")
}
