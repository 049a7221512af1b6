//! Permutation-equivariant per-node network: a shared encoder, mean pooling
//! over nodes, and a shared decoder fed with `[node code; pooled code]`.
//!
//! All weights live in one flat vector so the optimizer and checkpoint treat
//! them uniformly. Layer `l` stores `W_l` (out × in, row-major) then `b_l`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IN_DIM: usize = 7;
pub const HIDDEN: usize = 64;
pub const OUT_DIM: usize = 3;
/// `(out, in)` of the four dense layers.
pub const LAYERS: [(usize, usize); 4] = [(HIDDEN, IN_DIM), (HIDDEN, HIDDEN), (HIDDEN, 2 * HIDDEN), (OUT_DIM, HIDDEN)];

pub fn param_count() -> usize {
    LAYERS.iter().map(|(o, i)| o * i + o).sum()
}

fn offsets() -> [(usize, usize); 4] {
    let mut out = [(0, 0); 4];
    let mut at = 0;
    for (l, (o, i)) in LAYERS.iter().enumerate() {
        out[l] = (at, at + o * i);
        at += o * i + o;
    }
    out
}

fn weight(p: &[f64], l: usize) -> ArrayView2<'_, f64> {
    let (w, _) = offsets()[l];
    let (o, i) = LAYERS[l];
    ArrayView2::from_shape((o, i), &p[w..w + o * i]).expect("layer shape")
}

fn bias(p: &[f64], l: usize) -> ArrayView1<'_, f64> {
    let (_, b) = offsets()[l];
    ArrayView1::from(&p[b..b + LAYERS[l].0])
}

fn weight_mut(p: &mut [f64], l: usize) -> ArrayViewMut2<'_, f64> {
    let (w, _) = offsets()[l];
    let (o, i) = LAYERS[l];
    ArrayViewMut2::from_shape((o, i), &mut p[w..w + o * i]).expect("layer shape")
}

fn bias_mut(p: &mut [f64], l: usize) -> ArrayViewMut1<'_, f64> {
    let (_, b) = offsets()[l];
    ArrayViewMut1::from(&mut p[b..b + LAYERS[l].0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    #[serde(skip)]
    pub params: Vec<f64>,
    pub init_seed: u64,
}

/// Activations kept for the backward pass.
pub struct Tape {
    x: Array2<f64>,
    a1: Array2<f64>,
    h1: Array2<f64>,
    a2: Array2<f64>,
    h2: Array2<f64>,
    a3: Array2<f64>,
    h3: Array2<f64>,
    pooled: Array1<f64>,
}

fn relu(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|v| v.max(0.0))
}

/// Correctly rounded sum (Shewchuk's partials), independent of order.
fn exact_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for k in 0..partials.len() {
            let mut y = partials[k];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // Round the exact sum of the partials, as in Python's math.fsum.
    let mut hi = 0.0;
    if let Some(mut n) = partials.len().checked_sub(1) {
        hi = partials[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = partials[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

const EXP_BUCKETS: usize = 2048;

/// Exact integer accumulator of finite doubles: one i128 of significands per
/// binary exponent. Holds up to 2^64 terms without overflow.
struct SuperAcc {
    buckets: Vec<i128>,
    nonfinite: f64,
}

impl SuperAcc {
    fn new() -> Self {
        Self {
            buckets: vec![0; EXP_BUCKETS],
            nonfinite: 0.0,
        }
    }

    fn add(&mut self, v: f64) {
        let bits = v.to_bits();
        let exp = ((bits >> 52) & 0x7ff) as usize;
        if exp == 0x7ff {
            self.nonfinite += v;
            return;
        }
        let frac = (bits & ((1u64 << 52) - 1)) as i128;
        // Subnormals share the scale of exponent 1.
        let (e, m) = if exp == 0 { (1, frac) } else { (exp, frac | 1 << 52) };
        self.buckets[e] += if bits >> 63 == 1 { -m } else { m };
    }

    /// Correctly rounded total.
    fn sum(&self) -> f64 {
        if self.nonfinite != 0.0 || self.nonfinite.is_nan() {
            return self.nonfinite;
        }
        let mut parts = Vec::new();
        for (e, &acc) in self.buckets.iter().enumerate() {
            if acc == 0 {
                continue;
            }
            let sign = if acc < 0 { -1.0 } else { 1.0 };
            let mut m = acc.unsigned_abs();
            let mut p = e as i32 - 1075;
            // 53-bit chunks are exact doubles; scaling by a power of two is exact.
            while m != 0 {
                let chunk = (m & ((1u128 << 53) - 1)) as f64;
                if chunk != 0.0 {
                    parts.push(sign * scale2(chunk, p));
                }
                m >>= 53;
                p += 53;
            }
        }
        exact_sum(parts.into_iter())
    }
}

/// `x · 2^p` without forming an out-of-range power of two.
fn scale2(mut x: f64, mut p: i32) -> f64 {
    while p > 1000 {
        x *= 2f64.powi(1000);
        p -= 1000;
    }
    if p < -1000 {
        // x < 2^53, so x · 2^(p+53) stays normal and the final step is exact.
        x *= 2f64.powi(p + 53);
        p = -53;
    }
    x * 2f64.powi(p)
}

/// Column means with exact summation, so row order cannot change the result.
fn exact_mean_rows(h: &Array2<f64>) -> Array1<f64> {
    let n = h.nrows() as f64;
    let mut acc: Vec<SuperAcc> = (0..h.ncols()).map(|_| SuperAcc::new()).collect();
    for row in h.rows() {
        for (a, &v) in acc.iter_mut().zip(row.iter()) {
            a.add(v);
        }
    }
    Array1::from_iter(acc.iter().map(|a| a.sum() / n))
}

fn dense(x: &ArrayView2<f64>, p: &[f64], l: usize) -> Array2<f64> {
    let mut a = x.dot(&weight(p, l).t());
    a += &bias(p, l);
    a
}

impl Network {
    /// He-uniform weights, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = crate::sampling::sample_rng(seed, u64::MAX);
        let mut params = vec![0.0; param_count()];
        for (l, (o, i)) in LAYERS.iter().enumerate() {
            let a = (6.0 / *i as f64).sqrt();
            let (w, _) = offsets()[l];
            for v in &mut params[w..w + o * i] {
                *v = rng.random_range(-a..a);
            }
        }
        Self { params, init_seed: seed }
    }

    pub fn zeros() -> Self {
        Self {
            params: vec![0.0; param_count()],
            init_seed: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    fn check(&self, x: &ArrayView2<f64>) -> Result<()> {
        if self.params.len() != param_count() {
            return Err(Error::Shape(format!(
                "network has {} parameters, expected {}",
                self.params.len(),
                param_count()
            )));
        }
        if x.ncols() != IN_DIM || x.nrows() == 0 {
            return Err(Error::Shape(format!(
                "features must be N×{IN_DIM} with N ≥ 1, got {}×{}",
                x.nrows(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// `N × 3` output for `N × 7` inputs, and the tape for [`Network::backward`].
    pub fn forward_tape(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        self.check(&x)?;
        let p = &self.params;
        let a1 = dense(&x, p, 0);
        let h1 = relu(&a1);
        let a2 = dense(&h1.view(), p, 1);
        let h2 = relu(&a2);
        let pooled = exact_mean_rows(&h2);
        let w3 = weight(p, 2);
        // Decoder input [h2 | pooled]: the pooled half is one row shared by all nodes.
        let mut a3 = h2.dot(&w3.slice(s![.., ..HIDDEN]).t());
        let ctx = w3.slice(s![.., HIDDEN..]).dot(&pooled) + bias(p, 2);
        a3 += &ctx;
        let h3 = relu(&a3);
        let y = dense(&h3.view(), p, 3);
        Ok((
            y,
            Tape {
                x: x.to_owned(),
                a1,
                h1,
                a2,
                h2,
                a3,
                h3,
                pooled,
            },
        ))
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_tape(x)?.0)
    }

    /// Adds `∂L/∂θ` to `grad` given `dy = ∂L/∂y`.
    pub fn backward(&self, tape: &Tape, dy: ArrayView2<f64>, grad: &mut [f64]) {
        let p = &self.params;
        let n = tape.x.nrows() as f64;
        let mask = |d: Array2<f64>, a: &Array2<f64>| {
            let mut d = d;
            d.zip_mut_with(a, |g, &v| {
                if v <= 0.0 {
                    *g = 0.0
                }
            });
            d
        };
        // Layer 4.
        weight_mut(grad, 3).scaled_add(1.0, &dy.t().dot(&tape.h3));
        bias_mut(grad, 3).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        let da3 = mask(dy.dot(&weight(p, 3)), &tape.a3);
        // Layer 3 on [h2 | pooled].
        {
            let mut gw3 = weight_mut(grad, 2);
            gw3.slice_mut(s![.., ..HIDDEN]).scaled_add(1.0, &da3.t().dot(&tape.h2));
            let col = da3.sum_axis(Axis(0));
            let outer = col
                .view()
                .insert_axis(Axis(1))
                .dot(&tape.pooled.view().insert_axis(Axis(0)));
            gw3.slice_mut(s![.., HIDDEN..]).scaled_add(1.0, &outer);
        }
        let da3_sum = da3.sum_axis(Axis(0));
        bias_mut(grad, 2).scaled_add(1.0, &da3_sum);
        let w3 = weight(p, 2);
        let mut dh2 = da3.dot(&w3.slice(s![.., ..HIDDEN]));
        let dpooled = w3.slice(s![.., HIDDEN..]).t().dot(&da3_sum) / n;
        dh2 += &dpooled;
        let da2 = mask(dh2, &tape.a2);
        weight_mut(grad, 1).scaled_add(1.0, &da2.t().dot(&tape.h1));
        bias_mut(grad, 1).scaled_add(1.0, &da2.sum_axis(Axis(0)));
        let da1 = mask(da2.dot(&weight(p, 1)), &tape.a1);
        weight_mut(grad, 0).scaled_add(1.0, &da1.t().dot(&tape.x));
        bias_mut(grad, 0).scaled_add(1.0, &da1.sum_axis(Axis(0)));
    }
}
