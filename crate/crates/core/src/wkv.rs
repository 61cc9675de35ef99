//! Bidirectional weighted key-value (BiWKV) operator.
//!
//! For a lane of `T` tokens with keys `k`, values `v`, a per-channel distance
//! factor `w` and current-token bonus `u`:
//!
//! ```text
//! y_t = (sum_{i != t} e^{b(t,i) w + k_i} v_i + e^{u + k_t} v_t)
//!     / (sum_{i != t} e^{b(t,i) w + k_i}     + e^{u + k_t})
//! b(t, i) = -(|t - i| - 1) / T
//! ```
//!
//! [`biwkv_reference`] evaluates this directly in O(T^2) per lane.
//! [`biwkv_scan`] runs one recurrence left-to-right and one right-to-left, so
//! each lane costs O(T). Every running sum is held as `(p, a, b)` meaning
//! `e^p * a` and `e^p * b`, with `p` the largest exponent absorbed so far.
//!
//! Sequences are stored lane-major: `(batch, channel, token)`, tokens being
//! the row-major flattening of an `H x W` plane (column index fastest).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{FeatureMap, Scalar};

/// Per-channel distance factor `w` and current-token bonus `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct WkvParams<T> {
    pub w: Vec<T>,
    pub u: Vec<T>,
}

impl<T: Scalar> WkvParams<T> {
    pub fn new(w: Vec<T>, u: Vec<T>) -> Result<Self> {
        if w.len() != u.len() {
            return Err(Error::shape(format!(
                "wkv params: w has {} channels, u has {}",
                w.len(),
                u.len()
            )));
        }
        if w.iter().chain(&u).any(|x| !x.is_finite()) {
            return Err(Error::Numeric("wkv params must be finite".into()));
        }
        Ok(Self { w, u })
    }

    /// `w` evenly spaced over `[-1, 1]`, `u` = 0.5 plus a small stagger.
    pub fn init(channels: usize) -> Self {
        let w = (0..channels)
            .map(|c| {
                if channels == 1 {
                    T::zero()
                } else {
                    T::of(-1.0 + 2.0 * c as f64 / (channels - 1) as f64)
                }
            })
            .collect();
        let u = (0..channels)
            .map(|c| T::of(0.5 + 0.1 * (((c % 3) as f64) - 1.0)))
            .collect();
        Self { w, u }
    }

    pub fn channels(&self) -> usize {
        self.w.len()
    }
}

/// Keys and values for `batch x channels` lanes of `len` tokens each.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub batch: usize,
    pub channels: usize,
    pub len: usize,
}

impl<T: Scalar> TokenSequence<T> {
    /// From lane-major `(batch, channel, token)` buffers.
    pub fn new(k: Vec<T>, v: Vec<T>, batch: usize, channels: usize, len: usize) -> Result<Self> {
        let n = batch * channels * len;
        if len == 0 || k.len() != n || v.len() != n {
            return Err(Error::shape(format!(
                "token sequence (B={batch}, C={channels}, T={len}) needs {n} keys and values, got {} and {}",
                k.len(),
                v.len()
            )));
        }
        Ok(Self {
            k,
            v,
            batch,
            channels,
            len,
        })
    }

    /// From `(batch, token, channel)` buffers.
    pub fn from_btc(k: &[T], v: &[T], batch: usize, len: usize, channels: usize) -> Result<Self> {
        if k.len() != batch * len * channels || v.len() != k.len() {
            return Err(Error::shape("token sequence buffers do not match (B, T, C)"));
        }
        Self::new(
            btc_to_lanes(k, batch, len, channels),
            btc_to_lanes(v, batch, len, channels),
            batch,
            channels,
            len,
        )
    }

    /// Flattens two equally shaped feature maps into lanes of `H*W` tokens.
    pub fn from_maps(k: &FeatureMap<T>, v: &FeatureMap<T>) -> Result<Self> {
        v.expect_shape(k.shape(), "wkv values")?;
        let [b, c, h, w] = k.shape();
        Self::new(k.data().to_vec(), v.data().to_vec(), b, c, h * w)
    }

    pub fn lanes(&self) -> usize {
        self.batch * self.channels
    }

    /// Reverses token order within every lane.
    pub fn reversed(&self) -> Self {
        Self {
            k: reverse_lanes(&self.k, self.len),
            v: reverse_lanes(&self.v, self.len),
            ..*self
        }
    }

    fn check(&self, params: &WkvParams<T>) -> Result<()> {
        if params.channels() != self.channels {
            return Err(Error::shape(format!(
                "wkv params cover {} channels, sequence has {}",
                params.channels(),
                self.channels
            )));
        }
        if self.k.iter().chain(&self.v).any(|x| x.is_nan()) {
            return Err(Error::Numeric("NaN in wkv input".into()));
        }
        Ok(())
    }
}

pub fn btc_to_lanes<T: Copy>(x: &[T], batch: usize, len: usize, channels: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for b in 0..batch {
        for c in 0..channels {
            for t in 0..len {
                out.push(x[(b * len + t) * channels + c]);
            }
        }
    }
    out
}

pub fn lanes_to_btc<T: Copy>(x: &[T], batch: usize, len: usize, channels: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for b in 0..batch {
        for t in 0..len {
            for c in 0..channels {
                out.push(x[(b * channels + c) * len + t]);
            }
        }
    }
    out
}

pub fn reverse_lanes<T: Copy>(x: &[T], len: usize) -> Vec<T> {
    x.chunks(len)
        .flat_map(|lane| lane.iter().rev().copied())
        .collect()
}

/// Relative position bias between 1-indexed tokens `t != i` of a length-`len`
/// sequence: `-(|t - i| - 1) / len`.
pub fn position_bias(t: usize, i: usize, len: usize) -> Result<f64> {
    if t == i {
        return Err(Error::param(
            "position bias is undefined on the diagonal; the current token uses the bonus u",
        ));
    }
    if t == 0 || i == 0 || t > len || i > len {
        return Err(Error::param(format!(
            "token indices ({t}, {i}) outside 1..={len}"
        )));
    }
    Ok(-((t.abs_diff(i) as f64) - 1.0) / len as f64)
}

#[inline]
fn bias<T: Scalar>(t: usize, i: usize, len: T) -> T {
    -(T::of(t.abs_diff(i) as f64) - T::one()) / len
}

/// O(T^2) evaluation of one lane with per-position max subtraction.
pub fn reference_lane<T: Scalar>(k: &[T], v: &[T], w: T, u: T, out: &mut [T]) {
    let n = k.len();
    let len = T::of(n as f64);
    let mut expo = vec![T::zero(); n];
    for t in 0..n {
        for i in 0..n {
            expo[i] = if i == t { u + k[t] } else { bias(t, i, len) * w + k[i] };
        }
        let m = expo.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let (mut num, mut den) = (T::zero(), T::zero());
        for i in 0..n {
            let e = (expo[i] - m).exp();
            num = num + e * v[i];
            den = den + e;
        }
        out[t] = num / den;
    }
}

/// Exponent-shifted running sums `e^p * a`, `e^p * b`.
#[derive(Clone, Copy, Debug)]
struct Accum<T> {
    p: T,
    a: T,
    b: T,
}

impl<T: Scalar> Accum<T> {
    fn empty() -> Self {
        Self {
            p: T::neg_infinity(),
            a: T::zero(),
            b: T::zero(),
        }
    }

    /// Decays every absorbed term by `e^{step}` and adds `e^{key} * value`.
    #[inline]
    fn push(&mut self, step: T, key: T, value: T) {
        let decayed = self.p + step;
        let q = decayed.max(key);
        let e_old = (decayed - q).exp();
        let e_new = (key - q).exp();
        self.a = e_old * self.a + e_new * value;
        self.b = e_old * self.b + e_new;
        self.p = q;
    }
}

/// O(T) evaluation of one lane.
pub fn scan_lane<T: Scalar>(k: &[T], v: &[T], w: T, u: T, out: &mut [T]) {
    let n = k.len();
    let step = -w / T::of(n as f64);
    let mut fwd = Vec::with_capacity(n);
    let mut acc = Accum::empty();
    for t in 0..n {
        fwd.push(acc);
        acc.push(step, k[t], v[t]);
    }
    let mut bwd = Accum::empty();
    for t in (0..n).rev() {
        let f = fwd[t];
        let d = u + k[t];
        let q = f.p.max(bwd.p).max(d);
        let ef = (f.p - q).exp();
        let eb = (bwd.p - q).exp();
        let ed = (d - q).exp();
        out[t] = (ef * f.a + eb * bwd.a + ed * v[t]) / (ef * f.b + eb * bwd.b + ed);
        bwd.push(step, k[t], v[t]);
    }
}

fn run_lanes<T: Scalar>(
    seq: &TokenSequence<T>,
    params: &WkvParams<T>,
    lane: fn(&[T], &[T], T, T, &mut [T]),
) -> Result<Vec<T>> {
    seq.check(params)?;
    let n = seq.len;
    let mut out = vec![T::zero(); seq.k.len()];
    out.par_chunks_mut(n)
        .enumerate()
        .for_each(|(idx, o)| {
            let c = idx % seq.channels;
            let r = idx * n..(idx + 1) * n;
            lane(&seq.k[r.clone()], &seq.v[r], params.w[c], params.u[c], o);
        });
    Ok(out)
}

/// Quadratic-time BiWKV; output is lane-major like the input.
pub fn biwkv_reference<T: Scalar>(seq: &TokenSequence<T>, params: &WkvParams<T>) -> Result<Vec<T>> {
    run_lanes(seq, params, reference_lane)
}

/// Linear-time BiWKV; output is lane-major like the input.
pub fn biwkv_scan<T: Scalar>(seq: &TokenSequence<T>, params: &WkvParams<T>) -> Result<Vec<T>> {
    run_lanes(seq, params, scan_lane)
}

/// Gradients of a scalar loss through BiWKV.
#[derive(Clone, Debug, PartialEq)]
pub struct WkvGrads<T> {
    /// Lane-major, like the keys.
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Per channel, summed over the batch.
    pub w: Vec<T>,
    pub u: Vec<T>,
}

struct LaneGrads<T> {
    k: Vec<T>,
    v: Vec<T>,
    w: T,
    u: T,
}

/// O(T^2) backward straight from the softmax form of the output.
pub fn reference_backward_lane<T: Scalar>(k: &[T], v: &[T], w: T, u: T, g: &[T]) -> (Vec<T>, Vec<T>, T, T) {
    let n = k.len();
    let len = T::of(n as f64);
    let mut gk = vec![T::zero(); n];
    let mut gv = vec![T::zero(); n];
    let (mut gw, mut gu) = (T::zero(), T::zero());
    let mut weight = vec![T::zero(); n];
    for t in 0..n {
        for i in 0..n {
            weight[i] = if i == t { u + k[t] } else { bias(t, i, len) * w + k[i] };
        }
        let m = weight.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        weight.iter_mut().for_each(|e| *e = (*e - m).exp());
        let den: T = weight.iter().copied().sum();
        weight.iter_mut().for_each(|e| *e = *e / den);
        let y: T = weight.iter().zip(v).map(|(&a, &b)| a * b).sum();
        for i in 0..n {
            let contrib = g[t] * weight[i];
            gv[i] = gv[i] + contrib;
            gk[i] = gk[i] + contrib * (v[i] - y);
            if i == t {
                gu = gu + contrib * (v[i] - y);
            } else {
                gw = gw + contrib * (v[i] - y) * bias(t, i, len);
            }
        }
    }
    (gk, gv, gw, gu)
}

/// Running sums plus their derivatives w.r.t. `w`, all scaled by `e^p`.
#[derive(Clone, Copy, Debug)]
struct TangentAccum<T> {
    p: T,
    a: T,
    b: T,
    da: T,
    db: T,
}

impl<T: Scalar> TangentAccum<T> {
    fn empty() -> Self {
        Self {
            p: T::neg_infinity(),
            a: T::zero(),
            b: T::zero(),
            da: T::zero(),
            db: T::zero(),
        }
    }

    /// `S' = lambda S + e^k v` with `lambda = e^{-w/T}`, so
    /// `dS'/dw = lambda (dS/dw - S / T)`.
    #[inline]
    fn push(&mut self, step: T, inv_len: T, key: T, value: T) {
        let decayed = self.p + step;
        let q = decayed.max(key);
        let e_old = (decayed - q).exp();
        let e_new = (key - q).exp();
        self.da = e_old * (self.da - self.a * inv_len);
        self.db = e_old * (self.db - self.b * inv_len);
        self.a = e_old * self.a + e_new * value;
        self.b = e_old * self.b + e_new;
        self.p = q;
    }
}

/// Weighted sums `sum_{t != i} e^{b(t,i) w + key_t} (c1_t, c2_t)`, sharing one
/// exponent per direction.
#[derive(Clone, Copy, Debug)]
struct PairAccum<T> {
    p: T,
    s1: T,
    s2: T,
}

impl<T: Scalar> PairAccum<T> {
    fn empty() -> Self {
        Self {
            p: T::neg_infinity(),
            s1: T::zero(),
            s2: T::zero(),
        }
    }

    #[inline]
    fn push(&mut self, step: T, key: T, c1: T, c2: T) {
        let decayed = self.p + step;
        let q = decayed.max(key);
        let e_old = (decayed - q).exp();
        let e_new = (key - q).exp();
        self.s1 = e_old * self.s1 + e_new * c1;
        self.s2 = e_old * self.s2 + e_new * c2;
        self.p = q;
    }
}

/// O(T) backward for one lane.
///
/// With `D_t` the denominator and `alpha_{t,i} = e^{s_{t,i}} / D_t`:
/// `dv_i = sum_t g_t alpha_{t,i}` and
/// `dk_i = v_i dv_i - sum_t g_t y_t alpha_{t,i}`; the off-diagonal parts are
/// decayed sums over `t` with key `-ln D_t`. `dw` comes from carrying
/// `d/dw` of the running sums alongside the forward recurrences.
fn scan_backward_lane<T: Scalar>(k: &[T], v: &[T], w: T, u: T, g: &[T]) -> LaneGrads<T> {
    let n = k.len();
    let inv_len = T::one() / T::of(n as f64);
    let step = -w * inv_len;

    let mut fwd = Vec::with_capacity(n);
    let mut acc = TangentAccum::empty();
    for t in 0..n {
        fwd.push(acc);
        acc.push(step, inv_len, k[t], v[t]);
    }

    let mut y = vec![T::zero(); n];
    let mut log_den = vec![T::zero(); n];
    let mut diag = vec![T::zero(); n];
    let (mut gw, mut gu) = (T::zero(), T::zero());
    let mut bwd = TangentAccum::empty();
    for t in (0..n).rev() {
        let f = fwd[t];
        let d = u + k[t];
        let q = f.p.max(bwd.p).max(d);
        let ef = (f.p - q).exp();
        let eb = (bwd.p - q).exp();
        let ed = (d - q).exp();
        let num = ef * f.a + eb * bwd.a + ed * v[t];
        let den = ef * f.b + eb * bwd.b + ed;
        let yt = num / den;
        let dnum = ef * f.da + eb * bwd.da;
        let dden = ef * f.db + eb * bwd.db;
        gw = gw + g[t] * (dnum - yt * dden) / den;
        let alpha = ed / den;
        gu = gu + g[t] * alpha * (v[t] - yt);
        y[t] = yt;
        log_den[t] = q + den.ln();
        diag[t] = alpha;
        bwd.push(step, inv_len, k[t], v[t]);
    }

    let mut gv = vec![T::zero(); n];
    let mut gk = vec![T::zero(); n];
    let mut fwd_pairs = Vec::with_capacity(n);
    let mut pair = PairAccum::empty();
    for t in 0..n {
        fwd_pairs.push(pair);
        pair.push(step, -log_den[t], g[t], g[t] * y[t]);
    }
    let mut back = PairAccum::<T>::empty();
    for i in (0..n).rev() {
        let f: PairAccum<T> = fwd_pairs[i];
        let ef = (f.p + k[i]).exp();
        let eb = (back.p + k[i]).exp();
        let to_v = ef * f.s1 + eb * back.s1 + g[i] * diag[i];
        let to_yv = ef * f.s2 + eb * back.s2 + g[i] * y[i] * diag[i];
        gv[i] = to_v;
        gk[i] = v[i] * to_v - to_yv;
        back.push(step, -log_den[i], g[i], g[i] * y[i]);
    }

    LaneGrads {
        k: gk,
        v: gv,
        w: gw,
        u: gu,
    }
}

fn gather_grads<T: Scalar>(seq: &TokenSequence<T>, lanes: Vec<LaneGrads<T>>) -> WkvGrads<T> {
    let mut out = WkvGrads {
        k: Vec::with_capacity(seq.k.len()),
        v: Vec::with_capacity(seq.v.len()),
        w: vec![T::zero(); seq.channels],
        u: vec![T::zero(); seq.channels],
    };
    for (idx, lane) in lanes.into_iter().enumerate() {
        let c = idx % seq.channels;
        out.k.extend(lane.k);
        out.v.extend(lane.v);
        out.w[c] = out.w[c] + lane.w;
        out.u[c] = out.u[c] + lane.u;
    }
    out
}

fn backward_with<T: Scalar>(
    seq: &TokenSequence<T>,
    params: &WkvParams<T>,
    upstream: &[T],
    lane: fn(&[T], &[T], T, T, &[T]) -> LaneGrads<T>,
) -> Result<WkvGrads<T>> {
    seq.check(params)?;
    if upstream.len() != seq.k.len() {
        return Err(Error::shape(format!(
            "wkv upstream gradient has {} values, expected {}",
            upstream.len(),
            seq.k.len()
        )));
    }
    let n = seq.len;
    let lanes: Vec<LaneGrads<T>> = (0..seq.lanes())
        .into_par_iter()
        .map(|idx| {
            let c = idx % seq.channels;
            let r = idx * n..(idx + 1) * n;
            lane(&seq.k[r.clone()], &seq.v[r.clone()], params.w[c], params.u[c], &upstream[r])
        })
        .collect();
    Ok(gather_grads(seq, lanes))
}

/// Linear-time backward pass.
pub fn biwkv_backward<T: Scalar>(seq: &TokenSequence<T>, params: &WkvParams<T>, upstream: &[T]) -> Result<WkvGrads<T>> {
    backward_with(seq, params, upstream, scan_backward_lane)
}

/// Quadratic-time backward pass, kept as a correctness baseline.
pub fn biwkv_backward_reference<T: Scalar>(
    seq: &TokenSequence<T>,
    params: &WkvParams<T>,
    upstream: &[T],
) -> Result<WkvGrads<T>> {
    backward_with(seq, params, upstream, |k, v, w, u, g| {
        let (k, v, w, u) = reference_backward_lane(k, v, w, u, g);
        LaneGrads { k, v, w, u }
    })
}
