//! Uniform affine fake quantization, MSE scale calibration and learnable
//! soft rounding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stretch constants of the rectified sigmoid.
pub const ZETA: f64 = 1.1;
pub const GAMMA: f64 = -0.1;

/// Shrink factors scanned by [`calibrate_scale`]: 100 coarse steps over
/// `[0.2, 1.0]`, each coarse interval subdivided 101 times.
pub const SHRINK_MIN: f64 = 0.2;
pub const SHRINK_MAX: f64 = 1.0;
pub const COARSE_STEPS: usize = 100;
pub const REFINE_STEPS: usize = 101;

/// Scale/zero-point/bit-width of one fake quantizer.
///
/// `scale` has one entry (per-tensor) or one entry per slice of the leading
/// axis (per-output-channel, symmetric only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: Vec<f64>,
    pub zero_point: i64,
    pub bits: u32,
    pub symmetric: bool,
}

impl QuantParams {
    pub fn per_tensor(scale: f64, zero_point: i64, bits: u32, symmetric: bool) -> Self {
        Self {
            scale: vec![scale],
            zero_point,
            bits,
            symmetric,
        }
    }

    pub fn symmetric(scale: f64, bits: u32) -> Self {
        Self::per_tensor(scale, 0, bits, true)
    }

    pub fn qmin(&self) -> i64 {
        if self.symmetric {
            -(1i64 << (self.bits - 1))
        } else {
            0
        }
    }

    pub fn qmax(&self) -> i64 {
        if self.symmetric {
            (1i64 << (self.bits - 1)) - 1
        } else {
            (1i64 << self.bits) - 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.bits) {
            return Err(Error::InvalidArgument(format!("bit-width {} outside 2..=16", self.bits)));
        }
        if self.scale.is_empty() || self.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument("quantizer scales must be positive and finite".into()));
        }
        if self.symmetric && self.zero_point != 0 {
            return Err(Error::InvalidArgument("symmetric quantizer with non-zero zero point".into()));
        }
        if !self.symmetric && self.scale.len() != 1 {
            return Err(Error::InvalidArgument("per-channel quantizers must be symmetric".into()));
        }
        if !(self.qmin()..=self.qmax()).contains(&self.zero_point) {
            return Err(Error::InvalidArgument(format!(
                "zero point {} outside the integer grid",
                self.zero_point
            )));
        }
        Ok(())
    }

    /// Scale for each slice of the leading axis of `t`, as `(scale, slice_len)`.
    fn check_against(&self, t: &Tensor) -> Result<usize> {
        self.validate()?;
        match self.scale.len() {
            1 => Ok(t.len()),
            n if n == t.outer() => Ok(t.inner_len()),
            n => Err(Error::shape("per-channel scale count", t.outer(), n)),
        }
    }

    fn scale_at(&self, i: usize, slice: usize) -> f64 {
        if self.scale.len() == 1 {
            self.scale[0]
        } else {
            self.scale[i / slice]
        }
    }
}

/// Quantize-dequantize with nearest rounding.
pub fn fake_quantize(t: &Tensor, q: &QuantParams) -> Result<Tensor> {
    let slice = q.check_against(t)?;
    let (lo, hi, zp) = (q.qmin() as f64, q.qmax() as f64, q.zero_point as f64);
    let mut out = t.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let s = q.scale_at(i, slice);
        let k = ((*v / s).round() + zp).clamp(lo, hi);
        *v = (k - zp) * s;
    }
    Ok(out)
}

/// [`fake_quantize`] plus a mask of the elements that were not clamped,
/// i.e. where the straight-through gradient is 1.
pub fn fake_quantize_masked(t: &Tensor, q: &QuantParams) -> Result<(Tensor, Vec<bool>)> {
    let slice = q.check_against(t)?;
    let (lo, hi, zp) = (q.qmin() as f64, q.qmax() as f64, q.zero_point as f64);
    let mut out = t.clone();
    let mut mask = vec![true; t.len()];
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let s = q.scale_at(i, slice);
        let r = (*v / s).round() + zp;
        mask[i] = (lo..=hi).contains(&r);
        *v = (r.clamp(lo, hi) - zp) * s;
    }
    Ok((out, mask))
}

/// Mean squared error of [`fake_quantize`].
pub fn quantization_mse(t: &Tensor, q: &QuantParams) -> Result<f64> {
    let fq = fake_quantize(t, q)?;
    Ok(fq.sub(t)?.sq_norm() / t.len() as f64)
}

/// Candidate shrink factor `i` of the calibration grid.
pub fn shrink_factor(i: usize) -> f64 {
    let n = (COARSE_STEPS - 1) * REFINE_STEPS;
    SHRINK_MIN + (SHRINK_MAX - SHRINK_MIN) * i as f64 / n as f64
}

pub fn shrink_grid_len() -> usize {
    (COARSE_STEPS - 1) * REFINE_STEPS + 1
}

/// Sorted values with prefix sums, so that the quantization error for a
/// given scale costs one binary search per integer level.
struct SortedValues {
    values: Vec<f64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl SortedValues {
    fn new(data: &[f64]) -> Self {
        let mut values = data.to_vec();
        values.sort_by(f64::total_cmp);
        let mut sum = Vec::with_capacity(values.len() + 1);
        let mut sum_sq = Vec::with_capacity(values.len() + 1);
        let (mut a, mut b) = (0.0, 0.0);
        sum.push(0.0);
        sum_sq.push(0.0);
        for v in &values {
            a += v;
            b += v * v;
            sum.push(a);
            sum_sq.push(b);
        }
        Self { values, sum, sum_sq }
    }

    /// Squared error of values `[i, j)` against the constant `c`.
    fn group_error(&self, i: usize, j: usize, c: f64) -> f64 {
        if i >= j {
            return 0.0;
        }
        let n = (j - i) as f64;
        let s1 = self.sum[j] - self.sum[i];
        let s2 = self.sum_sq[j] - self.sum_sq[i];
        (s2 - 2.0 * c * s1 + c * c * n).max(0.0)
    }

    /// Total squared error of quantizing every value with `scale`, integer
    /// grid `[qmin, qmax]` and zero point `zp`.
    fn total_error(&self, scale: f64, qmin: i64, qmax: i64, zp: i64) -> f64 {
        let n = self.values.len();
        // Level r (relative to the zero point) holds values in [(r-0.5)s, (r+0.5)s);
        // the outermost levels absorb everything beyond them.
        let rlo = qmin - zp;
        let rhi = qmax - zp;
        let first = self.values[0];
        let last = self.values[n - 1];
        let r_start = ((first / scale).round() as i64).clamp(rlo, rhi);
        let r_end = ((last / scale).round() as i64).clamp(rlo, rhi);
        let mut err = 0.0;
        let mut i = 0;
        for r in r_start..=r_end {
            let j = if r == r_end {
                n
            } else {
                let bound = (r as f64 + 0.5) * scale;
                i + self.values[i..].partition_point(|&v| v < bound)
            };
            err += self.group_error(i, j, r as f64 * scale);
            i = j;
        }
        err
    }
}

/// Scale search over one slice. Returns `(scale, zero_point)`.
fn search_scale(data: &[f64], bits: u32, symmetric: bool) -> Option<(f64, i64)> {
    let (min, max) = data
        .iter()
        .fold((0.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if min == 0.0 && max == 0.0 {
        return None;
    }
    let (qmin, qmax, zp, base) = if symmetric {
        let qmax = (1i64 << (bits - 1)) - 1;
        let maxabs = max.max(-min);
        (-(qmax + 1), qmax, 0, maxabs / qmax as f64)
    } else {
        let levels = (1i64 << bits) - 1;
        let zp = ((-min * levels as f64) / (max - min)).round() as i64;
        (0, levels, zp.clamp(0, levels), (max - min) / levels as f64)
    };

    let sorted = SortedValues::new(data);
    let mut best = (f64::INFINITY, base);
    for i in 0..shrink_grid_len() {
        let scale = shrink_factor(i) * base;
        let err = sorted.total_error(scale, qmin, qmax, zp);
        // `<=` while scanning upwards: ties go to the larger scale.
        if err <= best.0 {
            best = (err, scale);
        }
    }
    Some((best.1, zp))
}

/// Picks the scale (and zero point) minimizing the mean squared quantization
/// error over the shrink-factor grid.
///
/// Symmetric quantizers scale the max-abs value onto `2^(bits-1) - 1`;
/// asymmetric ones map `[min(t, 0), max(t, 0)]` onto `[0, 2^bits - 1]` with a
/// zero point fixed by that range. Per-channel calibration works along the
/// leading axis and requires `symmetric`; an all-zero channel gets scale 1.
pub fn calibrate_scale(t: &Tensor, bits: u32, symmetric: bool, per_channel: bool) -> Result<QuantParams> {
    if !(2..=16).contains(&bits) {
        return Err(Error::InvalidArgument(format!("bit-width {bits} outside 2..=16")));
    }
    if per_channel && !symmetric {
        return Err(Error::InvalidArgument("per-channel calibration must be symmetric".into()));
    }
    if t.data().iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateRange);
    }
    if !t.is_finite() {
        return Err(Error::InvalidArgument("cannot calibrate a non-finite tensor".into()));
    }

    if per_channel {
        let inner = t.inner_len();
        let scale = t
            .data()
            .chunks(inner)
            .map(|c| search_scale(c, bits, true).map_or(1.0, |(s, _)| s))
            .collect();
        Ok(QuantParams {
            scale,
            zero_point: 0,
            bits,
            symmetric: true,
        })
    } else {
        let (scale, zero_point) = search_scale(t.data(), bits, symmetric).ok_or(Error::DegenerateRange)?;
        Ok(QuantParams::per_tensor(scale, zero_point, bits, symmetric))
    }
}

/// Continuous rounding variables for one weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftRoundState {
    pub v: Tensor,
    pub zeta: f64,
    pub gamma: f64,
    /// Current regularizer temperature.
    pub beta: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SoftRoundState {
    pub fn new(v: Tensor) -> Self {
        Self {
            v,
            zeta: ZETA,
            gamma: GAMMA,
            beta: 20.0,
        }
    }

    /// Initializes `V` so that `h(V)` equals the fractional part of `w / scale`.
    pub fn from_weights(w: &Tensor, q: &QuantParams) -> Result<Self> {
        let slice = q.check_against(w)?;
        let (zeta, gamma) = (ZETA, GAMMA);
        let v = w
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = x / q.scale_at(i, slice);
                let rest = y - y.floor();
                -((zeta - gamma) / (rest - gamma) - 1.0).ln()
            })
            .collect();
        Ok(Self::new(Tensor::new(w.shape().to_vec(), v)?))
    }

    /// Rectified sigmoid `clip(sigmoid(v) * (zeta - gamma) + gamma, 0, 1)`.
    pub fn h_of(&self, v: f64) -> f64 {
        (sigmoid(v) * (self.zeta - self.gamma) + self.gamma).clamp(0.0, 1.0)
    }

    /// `dh/dv`, zero where the clip is active.
    pub fn h_grad_of(&self, v: f64) -> f64 {
        let s = sigmoid(v);
        let raw = s * (self.zeta - self.gamma) + self.gamma;
        if raw > 0.0 && raw < 1.0 {
            s * (1.0 - s) * (self.zeta - self.gamma)
        } else {
            0.0
        }
    }

    pub fn h(&self) -> Tensor {
        self.v.map(|v| self.h_of(v))
    }

    /// Fraction of `h(V)` within `tol` of 0 or 1.
    pub fn saturation_fraction(&self, tol: f64) -> f64 {
        let n = self.v.len();
        let sat = self
            .v
            .data()
            .iter()
            .map(|&v| self.h_of(v))
            .filter(|&h| h <= tol || h >= 1.0 - tol)
            .count();
        sat as f64 / n as f64
    }
}

fn check_soft(w: &Tensor, q: &QuantParams, s: &SoftRoundState) -> Result<usize> {
    w.check_same_shape(&s.v, "rounding variables")?;
    q.check_against(w)
}

/// `dequant(clamp(floor(w / scale) + h(V)))` on the integer grid.
pub fn soft_quantize_weights(w: &Tensor, q: &QuantParams, s: &SoftRoundState) -> Result<Tensor> {
    let slice = check_soft(w, q, s)?;
    let (lo, hi, zp) = (q.qmin() as f64, q.qmax() as f64, q.zero_point as f64);
    let mut out = w.clone();
    for (i, (x, &v)) in out.data_mut().iter_mut().zip(s.v.data()).enumerate() {
        let sc = q.scale_at(i, slice);
        let k = ((*x / sc).floor() + zp + s.h_of(v)).clamp(lo, hi);
        *x = (k - zp) * sc;
    }
    Ok(out)
}

/// Chain rule through [`soft_quantize_weights`]: maps a gradient with
/// respect to the soft-quantized weights onto `V`.
pub fn soft_quantize_grad(w: &Tensor, q: &QuantParams, s: &SoftRoundState, grad_wq: &Tensor) -> Result<Tensor> {
    let slice = check_soft(w, q, s)?;
    w.check_same_shape(grad_wq, "soft-quantized weight gradient")?;
    let (lo, hi, zp) = (q.qmin() as f64, q.qmax() as f64, q.zero_point as f64);
    let data = w
        .data()
        .iter()
        .zip(s.v.data())
        .zip(grad_wq.data())
        .enumerate()
        .map(|(i, ((&x, &v), &g))| {
            let sc = q.scale_at(i, slice);
            let k = (x / sc).floor() + zp + s.h_of(v);
            if k < lo || k > hi {
                0.0
            } else {
                g * sc * s.h_grad_of(v)
            }
        })
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// Snaps `h(V)` to `{0, 1}` at 0.5 and dequantizes.
pub fn hard_quantize_weights(w: &Tensor, q: &QuantParams, s: &SoftRoundState) -> Result<Tensor> {
    let slice = check_soft(w, q, s)?;
    let (lo, hi, zp) = (q.qmin() as f64, q.qmax() as f64, q.zero_point as f64);
    let mut out = w.clone();
    for (i, (x, &v)) in out.data_mut().iter_mut().zip(s.v.data()).enumerate() {
        let sc = q.scale_at(i, slice);
        let up = if s.h_of(v) >= 0.5 { 1.0 } else { 0.0 };
        let k = ((*x / sc).floor() + zp + up).clamp(lo, hi);
        *x = (k - zp) * sc;
    }
    Ok(out)
}

/// `sum(1 - |2h(V) - 1|^beta)` and its gradient with respect to `V`.
pub fn rounding_regularizer(s: &SoftRoundState) -> (f64, Tensor) {
    let beta = s.beta;
    let value = s
        .v
        .data()
        .iter()
        .map(|&v| 1.0 - (2.0 * s.h_of(v) - 1.0).abs().powf(beta))
        .sum();
    let grad = s.v.map(|v| {
        let d = 2.0 * s.h_of(v) - 1.0;
        let a = d.abs();
        let dh = s.h_grad_of(v);
        if dh == 0.0 || a == 0.0 {
            0.0
        } else {
            -beta * a.powf(beta - 1.0) * d.signum() * 2.0 * dh
        }
    });
    (value, grad)
}

/// Linearly decreasing temperature from `start` at iteration 0 to `end` at
/// `total`.
pub fn anneal_temperature(iter: usize, total: usize, start: f64, end: f64) -> f64 {
    if total == 0 {
        return end;
    }
    let t = iter.min(total) as f64 / total as f64;
    start + (end - start) * t
}
