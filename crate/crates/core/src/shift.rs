//! Token shifts: channel groups of a feature map are replaced by spatially
//! displaced copies, then blended with the original by a learnable `omega`.
//!
//! A group with offset `(dy, dx)` reads `x[y - dy, x - dx]` (zero outside the
//! image), so `(0, 1)` moves content one pixel to the right.
//!
//! Context-guided shift gives each offset a channel budget proportional to
//! `1 / manhattan(offset)`; the simpler uni/bi/quad shifts are the same
//! machinery with one, two or four unit offsets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::activation::sigmoid_scalar;
use crate::numerics::{join, FeatureMap, HasParams, Param, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Offset {
    pub dy: i32,
    pub dx: i32,
}

impl Offset {
    pub const fn new(dy: i32, dx: i32) -> Self {
        Self { dy, dx }
    }

    pub fn manhattan(&self) -> u32 {
        self.dy.unsigned_abs() + self.dx.unsigned_abs()
    }
}

/// Ordered, duplicate-free set of non-zero offsets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OffsetDictionary {
    offsets: Vec<Offset>,
}

const UNIT: [Offset; 4] = [
    Offset::new(0, 1),
    Offset::new(0, -1),
    Offset::new(1, 0),
    Offset::new(-1, 0),
];

impl OffsetDictionary {
    pub fn new(offsets: Vec<Offset>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::param("offset dictionary is empty"));
        }
        for (i, o) in offsets.iter().enumerate() {
            if o.manhattan() == 0 {
                return Err(Error::param("offset dictionary contains the zero offset"));
            }
            if offsets[..i].contains(o) {
                return Err(Error::param(format!(
                    "offset ({}, {}) appears twice",
                    o.dy, o.dx
                )));
            }
        }
        Ok(Self { offsets })
    }

    /// The 12 neighbours within Manhattan distance 2: four at distance 1,
    /// then eight at distance 2.
    pub fn context() -> Self {
        let mut offsets = UNIT.to_vec();
        offsets.extend([
            Offset::new(0, 2),
            Offset::new(0, -2),
            Offset::new(2, 0),
            Offset::new(-2, 0),
            Offset::new(1, 1),
            Offset::new(1, -1),
            Offset::new(-1, 1),
            Offset::new(-1, -1),
        ]);
        Self { offsets }
    }

    /// [`OffsetDictionary::context`] plus the four axis offsets at distance 3.
    pub fn context_plus() -> Self {
        let mut d = Self::context();
        d.offsets.extend([
            Offset::new(0, 3),
            Offset::new(0, -3),
            Offset::new(3, 0),
            Offset::new(-3, 0),
        ]);
        d
    }

    pub fn offsets(&self) -> &[Offset] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// `sum_p 1/d_p`.
    pub fn weight_sum(&self) -> f64 {
        self.offsets.iter().map(|o| 1.0 / o.manhattan() as f64).sum()
    }

    /// Largest `|dy|` and `|dx|`.
    pub fn reach(&self) -> (u32, u32) {
        self.offsets.iter().fold((0, 0), |(a, b), o| {
            (a.max(o.dy.unsigned_abs()), b.max(o.dx.unsigned_abs()))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftVariant {
    Uni,
    Bi,
    Quad,
    Cts,
    CtsPlus,
}

impl ShiftVariant {
    pub const ALL: [ShiftVariant; 5] = [
        ShiftVariant::Uni,
        ShiftVariant::Bi,
        ShiftVariant::Quad,
        ShiftVariant::Cts,
        ShiftVariant::CtsPlus,
    ];

    pub fn dictionary(&self) -> OffsetDictionary {
        match self {
            ShiftVariant::Uni => OffsetDictionary {
                offsets: UNIT[..1].to_vec(),
            },
            ShiftVariant::Bi => OffsetDictionary {
                offsets: UNIT[..2].to_vec(),
            },
            ShiftVariant::Quad => OffsetDictionary {
                offsets: UNIT.to_vec(),
            },
            ShiftVariant::Cts => OffsetDictionary::context(),
            ShiftVariant::CtsPlus => OffsetDictionary::context_plus(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShiftVariant::Uni => "uni",
            ShiftVariant::Bi => "bi",
            ShiftVariant::Quad => "quad",
            ShiftVariant::Cts => "cts",
            ShiftVariant::CtsPlus => "cts_plus",
        }
    }
}

impl fmt::Display for ShiftVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShiftVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShiftVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shift variant {s:?} (expected uni, bi, quad, cts or cts_plus)")))
    }
}

/// Contiguous channel range filled from one offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelSpan {
    pub offset: Offset,
    pub start: usize,
    pub count: usize,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Splits `[0, channels)` into one span per offset, in dictionary order.
///
/// Span sizes are `floor(C * w_p / sum_q w_q)` with `w_p = 1/d_p`, computed
/// in exact integer arithmetic; the last span absorbs the remainder.
pub fn partition_channels(dict: &OffsetDictionary, channels: usize) -> Result<Vec<ChannelSpan>> {
    if channels == 0 {
        return Err(Error::param("cannot partition zero channels"));
    }
    let lcm = dict
        .offsets
        .iter()
        .map(|o| o.manhattan() as u64)
        .fold(1u64, |acc, d| acc / gcd(acc, d) * d);
    // sum_p w_p scaled by lcm is an integer
    let scaled_sum: u64 = dict.offsets.iter().map(|o| lcm / o.manhattan() as u64).sum();
    let mut spans = Vec::with_capacity(dict.len());
    let mut start = 0usize;
    for o in &dict.offsets {
        let count = (channels as u64 * (lcm / o.manhattan() as u64) / scaled_sum) as usize;
        spans.push(ChannelSpan {
            offset: *o,
            start,
            count,
        });
        start += count;
    }
    if let Some(last) = spans.last_mut() {
        last.count += channels - start;
    }
    Ok(spans)
}

/// Fills every span of `o` with `x` displaced by the span's offset.
pub fn displace<T: Scalar>(x: &FeatureMap<T>, spans: &[ChannelSpan]) -> FeatureMap<T> {
    let [b, _, h, w] = x.shape();
    let mut out = FeatureMap::zeros(x.shape());
    for ib in 0..b {
        for span in spans {
            let (dy, dx) = (span.offset.dy as isize, span.offset.dx as isize);
            for c in span.start..span.start + span.count {
                let src = x.plane(ib, c);
                let dst = out.plane_mut(ib, c);
                for y in 0..h as isize {
                    let sy = y - dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w as isize {
                        let sx = xx - dx;
                        if sx >= 0 && sx < w as isize {
                            dst[(y * w as isize + xx) as usize] = src[(sy * w as isize + sx) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`displace`].
pub fn displace_adjoint<T: Scalar>(dy_out: &FeatureMap<T>, spans: &[ChannelSpan]) -> FeatureMap<T> {
    let [b, _, h, w] = dy_out.shape();
    let mut out = FeatureMap::zeros(dy_out.shape());
    for ib in 0..b {
        for span in spans {
            let (oy, ox) = (span.offset.dy as isize, span.offset.dx as isize);
            for c in span.start..span.start + span.count {
                let src = dy_out.plane(ib, c);
                let dst = out.plane_mut(ib, c);
                for y in 0..h as isize {
                    let sy = y - oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w as isize {
                        let sx = xx - ox;
                        if sx >= 0 && sx < w as isize {
                            let d = (sy * w as isize + sx) as usize;
                            dst[d] = dst[d] + src[(y * w as isize + xx) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn blend<T: Scalar>(x: &FeatureMap<T>, o: &FeatureMap<T>, omega: T) -> FeatureMap<T> {
    let keep = T::one() - omega;
    o.zip_map(x, |a, b| omega * a + keep * b).expect("same shape")
}

/// `omega * shifted(x) + (1 - omega) * x` with the dictionary's channel
/// partition. Offsets must be smaller than the image in each direction.
pub fn cts<T: Scalar>(x: &FeatureMap<T>, dict: &OffsetDictionary, omega: T) -> Result<FeatureMap<T>> {
    if !(omega >= T::zero() && omega <= T::one()) {
        return Err(Error::param(format!("omega {omega} outside [0, 1]")));
    }
    let (ry, rx) = dict.reach();
    if ry as usize >= x.height() || rx as usize >= x.width() {
        return Err(Error::param(format!(
            "offset reach ({ry}, {rx}) does not fit a {}x{} image",
            x.height(),
            x.width()
        )));
    }
    let spans = partition_channels(dict, x.channels())?;
    Ok(blend(x, &displace(x, &spans), omega))
}

/// Uni/bi/quad shift blended by `omega`.
pub fn baseline_shift<T: Scalar>(x: &FeatureMap<T>, variant: ShiftVariant, omega: T) -> Result<FeatureMap<T>> {
    cts(x, &variant.dictionary(), omega)
}

/// Learnable token shift; `omega = sigmoid(raw)` keeps the blend in [0, 1].
#[derive(Clone, Debug)]
pub struct TokenShift<T> {
    variant: ShiftVariant,
    spans: Vec<ChannelSpan>,
    pub omega_raw: Param<T>,
}

#[derive(Clone, Debug)]
pub struct ShiftCache<T> {
    shifted: FeatureMap<T>,
    x: FeatureMap<T>,
}

impl<T: Scalar> TokenShift<T> {
    pub fn new(variant: ShiftVariant, channels: usize) -> Result<Self> {
        Ok(Self {
            variant,
            spans: partition_channels(&variant.dictionary(), channels)?,
            omega_raw: Param::filled(vec![1], T::zero(), false),
        })
    }

    pub fn variant(&self) -> ShiftVariant {
        self.variant
    }

    pub fn spans(&self) -> &[ChannelSpan] {
        &self.spans
    }

    pub fn omega(&self) -> T {
        sigmoid_scalar(self.omega_raw.value[0])
    }

    /// Offsets larger than the feature map simply read zeros here, so any
    /// resolution reaching the network stays valid.
    pub fn forward(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, ShiftCache<T>) {
        let shifted = displace(x, &self.spans);
        let y = blend(x, &shifted, self.omega());
        (
            y,
            ShiftCache {
                shifted,
                x: x.clone(),
            },
        )
    }

    pub fn backward(&mut self, cache: &ShiftCache<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
        let omega = self.omega();
        let mut dx = dy.scale(T::one() - omega);
        dx.axpy(omega, &displace_adjoint(dy, &self.spans))
            .expect("same shape");
        let mut domega = T::zero();
        for ((&g, &o), &x) in dy.data().iter().zip(cache.shifted.data()).zip(cache.x.data()) {
            domega = domega + g * (o - x);
        }
        self.omega_raw.grad[0] = self.omega_raw.grad[0] + domega * omega * (T::one() - omega);
        dx
    }
}

impl<T: Scalar> HasParams<T> for TokenShift<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "omega"), &self.omega_raw);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "omega"), &mut self.omega_raw);
    }
}
