//! Tape-free forward-pass kernels, generic over 32/64-bit floats, plus a
//! deterministic high-water-mark gauge for inference buffer accounting.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::sync::atomic::{AtomicUsize, Ordering};

/// Float precision for the inference path. f64 is used during training and
/// evaluation; f32 backs the throughput benchmark.
pub trait Real:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn maximum(self, other: Self) -> Self;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn maximum(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

// ---- deterministic memory gauge --------------------------------------

static CURRENT_BYTES: AtomicUsize = AtomicUsize::new(0);
static PEAK_BYTES: AtomicUsize = AtomicUsize::new(0);

pub fn reset_peak_bytes() {
    CURRENT_BYTES.store(0, Ordering::SeqCst);
    PEAK_BYTES.store(0, Ordering::SeqCst);
}

pub fn peak_bytes() -> usize {
    PEAK_BYTES.load(Ordering::SeqCst)
}

/// A buffer whose size is counted against the gauge for its whole lifetime.
pub struct TrackedBuf<F> {
    pub data: Vec<F>,
}

impl<F: Real> TrackedBuf<F> {
    pub fn zeros(len: usize) -> Self {
        let bytes = len * std::mem::size_of::<F>();
        let cur = CURRENT_BYTES.fetch_add(bytes, Ordering::SeqCst) + bytes;
        PEAK_BYTES.fetch_max(cur, Ordering::SeqCst);
        TrackedBuf { data: vec![F::ZERO; len] }
    }
}

impl<F> Drop for TrackedBuf<F> {
    fn drop(&mut self) {
        let bytes = self.data.len() * std::mem::size_of::<F>();
        CURRENT_BYTES.fetch_sub(bytes, Ordering::SeqCst);
    }
}

// ---- kernels ----------------------------------------------------------

/// out[m,n] = a[m,k] · b[k,n]; `out` must be zeroed by the caller.
pub fn matmul<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let ar = &a[r * k..(r + 1) * k];
        let or = &mut out[r * n..(r + 1) * n];
        for (kk, &av) in ar.iter().enumerate() {
            let br = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in or.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
}

pub fn add_row_inplace<F: Real>(a: &mut [F], row: &[F]) {
    let cols = row.len();
    for (i, v) in a.iter_mut().enumerate() {
        *v += row[i % cols];
    }
}

pub fn gelu_inplace<F: Real>(x: &mut [F]) {
    let c0 = F::from_f64(0.797_884_560_802_865_4);
    let c1 = F::from_f64(0.044_715);
    let half = F::from_f64(0.5);
    for v in x.iter_mut() {
        let u = c0 * (*v + c1 * *v * *v * *v);
        *v = half * *v * (F::ONE + u.tanh());
    }
}

pub fn softmax_row_inplace<F: Real>(row: &mut [F]) {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.maximum(v);
    }
    let mut sum = F::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub fn layer_norm_row_inplace<F: Real>(row: &mut [F], gain: &[F], bias: &[F], eps: F) {
    let n = F::from_f64(row.len() as f64);
    let mut mean = F::ZERO;
    for &v in row.iter() {
        mean += v;
    }
    mean = mean / n;
    let mut var = F::ZERO;
    for &v in row.iter() {
        var += (v - mean) * (v - mean);
    }
    var = var / n;
    let inv = F::ONE / (var + eps).sqrt();
    for (i, v) in row.iter_mut().enumerate() {
        *v = gain[i] * (*v - mean) * inv + bias[i];
    }
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut s = F::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}
