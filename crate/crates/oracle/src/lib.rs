//! Naive 64-bit reference implementations used as test oracles.
//!
//! Everything here is written as plain nested loops over row-major buffers,
//! independent of the optimized kernels it checks.

/// `[N, C, H, W]` convolution, no bias.
pub fn conv2d(
    x: &[f64],
    xs: [usize; 4],
    k: &[f64],
    ks: [usize; 4],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = xs;
    let [o, c2, kh, kw] = ks;
    assert_eq!(c, c2);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut y = vec![0.0; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for di in 0..kh {
                            for dj in 0..kw {
                                let r = (i * stride + di) as isize - pad as isize;
                                let q = (j * stride + dj) as isize - pad as isize;
                                if r < 0 || q < 0 || r >= h as isize || q >= w as isize {
                                    continue;
                                }
                                s += x[((b * c + ic) * h + r as usize) * w + q as usize]
                                    * k[((oc * c + ic) * kh + di) * kw + dj];
                            }
                        }
                    }
                    y[((b * o + oc) * ho + i) * wo + j] = s;
                }
            }
        }
    }
    (y, [n, o, ho, wo])
}

/// `y = x W^T + b` for `x: [N, F]`, `w: [O, F]`.
pub fn linear(x: &[f64], n: usize, f: usize, w: &[f64], o: usize, b: Option<&[f64]>) -> Vec<f64> {
    let mut y = vec![0.0; n * o];
    for r in 0..n {
        for c in 0..o {
            let mut s = b.map_or(0.0, |b| b[c]);
            for t in 0..f {
                s += x[r * f + t] * w[c * f + t];
            }
            y[r * o + c] = s;
        }
    }
    y
}

/// Batch-statistics normalization (biased variance) with affine transform.
pub fn batchnorm_train(x: &[f64], xs: [usize; 4], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let m = (n * h * w) as f64;
    let mut y = vec![0.0; x.len()];
    for ch in 0..c {
        let idx = |b: usize, p: usize| (b * c + ch) * h * w + p;
        let mut mean = 0.0;
        for b in 0..n {
            for p in 0..h * w {
                mean += x[idx(b, p)];
            }
        }
        mean /= m;
        let mut var = 0.0;
        for b in 0..n {
            for p in 0..h * w {
                var += (x[idx(b, p)] - mean).powi(2);
            }
        }
        var /= m;
        for b in 0..n {
            for p in 0..h * w {
                y[idx(b, p)] = gamma[ch] * (x[idx(b, p)] - mean) / (var + eps).sqrt() + beta[ch];
            }
        }
    }
    y
}

pub fn batchnorm_eval(
    x: &[f64],
    xs: [usize; 4],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Vec<f64> {
    let [_, c, h, w] = xs;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / (h * w)) % c;
            gamma[ch] * (v - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch]
        })
        .collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

fn pool(x: &[f64], xs: [usize; 4], k: usize, s: usize, max: bool) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = xs;
    let ho = (h - k) / s + 1;
    let wo = (w - k) / s + 1;
    let mut y = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                let vals = (0..k)
                    .flat_map(|a| (0..k).map(move |b| (a, b)))
                    .map(|(a, b)| x[(plane * h + i * s + a) * w + j * s + b]);
                y.push(if max {
                    vals.fold(f64::NEG_INFINITY, f64::max)
                } else {
                    vals.sum::<f64>() / (k * k) as f64
                });
            }
        }
    }
    (y, [n, c, ho, wo])
}

pub fn maxpool2d(x: &[f64], xs: [usize; 4], k: usize, s: usize) -> (Vec<f64>, [usize; 4]) {
    pool(x, xs, k, s, true)
}

pub fn avgpool2d(x: &[f64], xs: [usize; 4], k: usize, s: usize) -> (Vec<f64>, [usize; 4]) {
    pool(x, xs, k, s, false)
}

/// Mean softmax cross-entropy over rows of `logits: [N, K]`.
pub fn softmax_cross_entropy(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let row = &logits[r * k..(r + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    total / n as f64
}

/// The shared block on `[N, C, H, W]`: explicit zero padding to a multiple
/// of `t`, a per-pixel `t×t` matrix product per group and layer, cropping.
pub fn tsb_apply(v: &[f64], vs: [usize; 4], layers: &[Vec<f64>], t: usize) -> Vec<f64> {
    let [n, c, h, w] = vs;
    let groups = c.div_ceil(t);
    let cp = groups * t;
    let hw = h * w;
    let mut cur = vec![0.0; n * cp * hw];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                cur[(b * cp + ch) * hw + p] = v[(b * c + ch) * hw + p];
            }
        }
    }
    for layer in layers {
        let mut next = vec![0.0; cur.len()];
        for b in 0..n {
            for g in 0..groups {
                for p in 0..hw {
                    for i in 0..t {
                        let mut s = 0.0;
                        for j in 0..t {
                            s += layer[i * t + j] * cur[(b * cp + g * t + j) * hw + p];
                        }
                        next[(b * cp + g * t + i) * hw + p] = s;
                    }
                }
            }
        }
        cur = next;
    }
    let mut out = vec![0.0; n * c * hw];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                out[(b * c + ch) * hw + p] = cur[(b * cp + ch) * hw + p];
            }
        }
    }
    out
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max |a - b| / max(max |b|, floor)`: error relative to the gradient's scale.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max).max(floor);
    diff / scale
}

/// `Σ r_i y_i`: turns any tensor output into a scalar loss for gradient checks.
pub fn project(y: &[f64], r: &[f64]) -> f64 {
    y.iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Small deterministic generator so the oracle needs no dependencies.
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Lcg(seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407))
    }

    /// Uniform in [-1, 1).
    pub fn next_f64(&mut self) -> f64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    pub fn vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_f64()).collect()
    }
}
