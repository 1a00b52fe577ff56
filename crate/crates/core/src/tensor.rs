//! Dense 5-axis tensors with axes `(N, C, T, H, W)`, row-major, `W`
//! fastest-varying.
//!
//! Tensors are immutable from the caller's perspective: every public
//! operation returns a fresh tensor and checks that the result is finite
//! (a NaN/Inf is a contract violation reported as [`Error::NonFinite`]).
//! Two element types are supported at runtime, `f32` (the training
//! default) and `f64` (used by the finite-difference gradient checks).

use crate::error::{Error, Result};
use num_traits::Float;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Element type of a tensor buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dtype::F32 => write!(f, "float32"),
            Dtype::F64 => write!(f, "float64"),
        }
    }
}

/// Axis selector for axis-wise operations (softmax).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Channel,
    Time,
}

/// Train/eval switch for stochastic layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Shape of a 5-axis tensor. All extents are at least 1 and the product
/// is checked against the platform index range on construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape5 {
    pub n: usize,
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape5 {
    pub fn new(n: usize, c: usize, t: usize, h: usize, w: usize) -> Result<Self> {
        let s = Shape5 { n, c, t, h, w };
        for e in s.dims() {
            if e == 0 {
                return Err(Error::InvalidShape(format!(
                    "extent 0 in {s}; all extents must be >= 1"
                )));
            }
        }
        s.checked_volume()?;
        Ok(s)
    }

    pub fn dims(&self) -> [usize; 5] {
        [self.n, self.c, self.t, self.h, self.w]
    }

    fn checked_volume(&self) -> Result<usize> {
        self.dims()
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Overflow(format!("shape volume of {self}")))
    }

    /// Number of elements. Valid by construction.
    pub fn volume(&self) -> usize {
        self.n * self.c * self.t * self.h * self.w
    }

    /// Row-major linear index of `(n, c, t, h, w)`.
    #[inline(always)]
    pub fn index(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> usize {
        ((((n * self.c + c) * self.t + t) * self.h + h) * self.w) + w
    }
}

impl std::fmt::Display for Shape5 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}, {}, {}, {}, {})",
            self.n, self.c, self.t, self.h, self.w
        )
    }
}

/// Backing storage, one variant per supported dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum Buffer {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// Dense row-major 5-axis tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor5 {
    shape: Shape5,
    data: Buffer,
}

/// Dispatches a closure over the concrete element type of one tensor.
macro_rules! with_buf {
    ($t:expr, $d:ident, $body:expr) => {
        match &$t.data {
            Buffer::F32($d) => $body,
            Buffer::F64($d) => $body,
        }
    };
}

impl Tensor5 {
    /// All-zero tensor of the given shape and dtype.
    pub fn zeros(shape: Shape5, dtype: Dtype) -> Self {
        let len = shape.volume();
        let data = match dtype {
            Dtype::F32 => Buffer::F32(vec![0.0; len]),
            Dtype::F64 => Buffer::F64(vec![0.0; len]),
        };
        Tensor5 { shape, data }
    }

    pub fn zeros_like(other: &Tensor5) -> Self {
        Tensor5::zeros(other.shape, other.dtype())
    }

    pub fn full(shape: Shape5, dtype: Dtype, value: f64) -> Result<Self> {
        let mut t = Tensor5::zeros(shape, dtype);
        match &mut t.data {
            Buffer::F32(v) => v.fill(value as f32),
            Buffer::F64(v) => v.fill(value),
        }
        t.check_finite("full")?;
        Ok(t)
    }

    pub fn from_vec_f32(shape: Shape5, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.volume() {
            return Err(Error::shape_mismatch(
                format!("{} elements for {shape}", shape.volume()),
                format!("{} elements", data.len()),
            ));
        }
        let t = Tensor5 {
            shape,
            data: Buffer::F32(data),
        };
        t.check_finite("from_vec_f32")?;
        Ok(t)
    }

    pub fn from_vec_f64(shape: Shape5, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.volume() {
            return Err(Error::shape_mismatch(
                format!("{} elements for {shape}", shape.volume()),
                format!("{} elements", data.len()),
            ));
        }
        let t = Tensor5 {
            shape,
            data: Buffer::F64(data),
        };
        t.check_finite("from_vec_f64")?;
        Ok(t)
    }

    /// Tensor filled from a function of the linear index (test helper and
    /// deterministic ramp construction).
    pub fn from_fn(shape: Shape5, dtype: Dtype, f: impl Fn(usize) -> f64) -> Result<Self> {
        let len = shape.volume();
        let t = match dtype {
            Dtype::F32 => Tensor5 {
                shape,
                data: Buffer::F32((0..len).map(|i| f(i) as f32).collect()),
            },
            Dtype::F64 => Tensor5 {
                shape,
                data: Buffer::F64((0..len).map(f).collect()),
            },
        };
        t.check_finite("from_fn")?;
        Ok(t)
    }

    /// Uniform random tensor in `[-scale, scale]`, seeded.
    pub fn uniform(shape: Shape5, dtype: Dtype, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.volume();
        let data = match dtype {
            Dtype::F32 => Buffer::F32(
                (0..len)
                    .map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * scale) as f32)
                    .collect(),
            ),
            Dtype::F64 => Buffer::F64(
                (0..len)
                    .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
                    .collect(),
            ),
        };
        Tensor5 { shape, data }
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.volume()
    }

    pub fn is_empty(&self) -> bool {
        false // extents are >= 1 by construction
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            Buffer::F32(_) => Dtype::F32,
            Buffer::F64(_) => Dtype::F64,
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            Buffer::F32(v) => Ok(v),
            Buffer::F64(_) => Err(Error::DtypeMismatch("expected float32 buffer".into())),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            Buffer::F64(v) => Ok(v),
            Buffer::F32(_) => Err(Error::DtypeMismatch("expected float64 buffer".into())),
        }
    }

    pub(crate) fn as_f32_mut(&mut self) -> &mut [f32] {
        match &mut self.data {
            Buffer::F32(v) => v,
            Buffer::F64(_) => unreachable!("dtype checked by caller"),
        }
    }

    pub(crate) fn as_f64_mut(&mut self) -> &mut [f64] {
        match &mut self.data {
            Buffer::F64(v) => v,
            Buffer::F32(_) => unreachable!("dtype checked by caller"),
        }
    }

    /// Element read with f64 widening, for tests and reports.
    pub fn get(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> f64 {
        let i = self.shape.index(n, c, t, h, w);
        with_buf!(self, d, d[i] as f64)
    }

    /// Whole buffer widened to f64 (copy).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        with_buf!(self, d, d.iter().map(|&x| x as f64).collect())
    }

    /// Casts to the requested dtype (copy when it differs).
    pub fn cast(&self, dtype: Dtype) -> Tensor5 {
        if self.dtype() == dtype {
            return self.clone();
        }
        match (&self.data, dtype) {
            (Buffer::F32(v), Dtype::F64) => Tensor5 {
                shape: self.shape,
                data: Buffer::F64(v.iter().map(|&x| x as f64).collect()),
            },
            (Buffer::F64(v), Dtype::F32) => Tensor5 {
                shape: self.shape,
                data: Buffer::F32(v.iter().map(|&x| x as f32).collect()),
            },
            _ => unreachable!(),
        }
    }

    pub(crate) fn check_finite(&self, op: &str) -> Result<()> {
        let ok = with_buf!(self, d, d.iter().all(|x| x.is_finite()));
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    fn require_same_shape(&self, other: &Tensor5, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape_mismatch(
                format!("{} in {op}", self.shape),
                other.shape,
            ));
        }
        if self.dtype() != other.dtype() {
            return Err(Error::DtypeMismatch(format!(
                "{op}: {} vs {}",
                self.dtype(),
                other.dtype()
            )));
        }
        Ok(())
    }

    fn binary(&self, other: &Tensor5, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor5> {
        self.require_same_shape(other, op)?;
        let out = match (&self.data, &other.data) {
            (Buffer::F32(a), Buffer::F32(b)) => Tensor5 {
                shape: self.shape,
                data: Buffer::F32(
                    a.iter()
                        .zip(b)
                        .map(|(&x, &y)| f(x as f64, y as f64) as f32)
                        .collect(),
                ),
            },
            (Buffer::F64(a), Buffer::F64(b)) => Tensor5 {
                shape: self.shape,
                data: Buffer::F64(a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()),
            },
            _ => unreachable!("dtype checked above"),
        };
        out.check_finite(op)?;
        Ok(out)
    }

    fn map(&self, op: &str, f: impl Fn(f64) -> f64) -> Result<Tensor5> {
        let out = match &self.data {
            Buffer::F32(a) => Tensor5 {
                shape: self.shape,
                data: Buffer::F32(a.iter().map(|&x| f(x as f64) as f32).collect()),
            },
            Buffer::F64(a) => Tensor5 {
                shape: self.shape,
                data: Buffer::F64(a.iter().map(|&x| f(x)).collect()),
            },
        };
        out.check_finite(op)?;
        Ok(out)
    }

    pub fn add(&self, other: &Tensor5) -> Result<Tensor5> {
        self.binary(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor5) -> Result<Tensor5> {
        self.binary(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor5) -> Result<Tensor5> {
        self.binary(other, "mul", |a, b| a * b)
    }

    pub fn scalar_mul(&self, s: f64) -> Result<Tensor5> {
        self.map("scalar_mul", |a| a * s)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor5> {
        if !(lo <= hi) {
            return Err(Error::InvalidArg(format!("clamp bounds {lo} > {hi}")));
        }
        self.map("clamp", |a| a.max(lo).min(hi))
    }

    /// In-place accumulation, used by gradient buffers. Shapes and dtypes
    /// must match.
    pub(crate) fn add_assign(&mut self, other: &Tensor5) -> Result<()> {
        self.require_same_shape(other, "add_assign")?;
        match (&mut self.data, &other.data) {
            (Buffer::F32(a), Buffer::F32(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += *y;
                }
            }
            (Buffer::F64(a), Buffer::F64(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += *y;
                }
            }
            _ => unreachable!(),
        }
        Ok(())
    }

    pub(crate) fn fill(&mut self, value: f64) {
        match &mut self.data {
            Buffer::F32(v) => v.fill(value as f32),
            Buffer::F64(v) => v.fill(value),
        }
    }

    /// `max(x, 0)` elementwise.
    pub fn relu(&self) -> Result<Tensor5> {
        self.map("relu", |a| if a > 0.0 { a } else { 0.0 })
    }

    /// Logistic function, `1 / (1 + e^-x)`, elementwise; output in (0, 1).
    pub fn sigmoid(&self) -> Result<Tensor5> {
        self.map("sigmoid", sigmoid_scalar)
    }

    /// Max-stabilized softmax along the channel or time axis. Slices along
    /// the chosen axis sum to 1.
    pub fn softmax_axis(&self, axis: Axis) -> Result<Tensor5> {
        let mut out = Tensor5::zeros_like(self);
        match (&self.data, &mut out.data) {
            (Buffer::F32(a), Buffer::F32(b)) => softmax_axis_kernel(a, b, self.shape, axis),
            (Buffer::F64(a), Buffer::F64(b)) => softmax_axis_kernel(a, b, self.shape, axis),
            _ => unreachable!(),
        }
        out.check_finite("softmax_axis")?;
        Ok(out)
    }

    /// Inverted dropout. Train mode zeroes each element with probability
    /// `rate` and scales survivors by `1/(1-rate)`; eval mode is the
    /// identity. Deterministic in the seed.
    pub fn dropout(&self, rate: f64, mode: Mode, seed: u64) -> Result<Tensor5> {
        let mask = dropout_mask(self.shape, self.dtype(), rate, mode, seed)?;
        match mask {
            None => Ok(self.clone()),
            Some(m) => self.mul(&m),
        }
    }

    /// Central `H/factor x W/factor` window; other axes unchanged. The
    /// offset is `(H - H/factor) / 2` (and likewise for `W`).
    pub fn crop_center_spatial(&self, factor: usize) -> Result<Tensor5> {
        let s = self.shape;
        if factor == 0 {
            return Err(Error::InvalidArg("crop factor must be >= 1".into()));
        }
        if s.h % factor != 0 || s.w % factor != 0 {
            return Err(Error::InvalidArg(format!(
                "crop factor {factor} does not divide spatial extents {}x{}",
                s.h, s.w
            )));
        }
        let (ch, cw) = (s.h / factor, s.w / factor);
        let (h0, w0) = ((s.h - ch) / 2, (s.w - cw) / 2);
        let os = Shape5::new(s.n, s.c, s.t, ch, cw)?;
        let mut out = Tensor5::zeros(os, self.dtype());
        match (&self.data, &mut out.data) {
            (Buffer::F32(a), Buffer::F32(b)) => copy_window(a, b, s, os, h0, w0),
            (Buffer::F64(a), Buffer::F64(b)) => copy_window(a, b, s, os, h0, w0),
            _ => unreachable!(),
        }
        Ok(out)
    }

    /// Zero-pads the spatial axes back up to `(h, w)`, centering the
    /// existing content at offset `((h - H) / 2, (w - W) / 2)`; the exact
    /// inverse placement of [`Tensor5::crop_center_spatial`].
    pub fn pad_center_spatial(&self, h: usize, w: usize) -> Result<Tensor5> {
        let s = self.shape;
        if h < s.h || w < s.w {
            return Err(Error::InvalidArg(format!(
                "pad target {h}x{w} smaller than input {}x{}",
                s.h, s.w
            )));
        }
        let (h0, w0) = ((h - s.h) / 2, (w - s.w) / 2);
        let os = Shape5::new(s.n, s.c, s.t, h, w)?;
        let mut out = Tensor5::zeros(os, self.dtype());
        match (&self.data, &mut out.data) {
            (Buffer::F32(a), Buffer::F32(b)) => paste_window(a, b, s, os, h0, w0),
            (Buffer::F64(a), Buffer::F64(b)) => paste_window(a, b, s, os, h0, w0),
            _ => unreachable!(),
        }
        Ok(out)
    }

    /// Relabels `(N, C', T, H, W)` as `(N, 1, C'.T, H, W)` with output
    /// time index `t_out = t * C' + c`: consecutive output frames within
    /// one source time step come from consecutive channels. Pure
    /// relabeling, no value changes.
    pub fn fold_channels_into_time(&self) -> Result<Tensor5> {
        let s = self.shape;
        let t_total = s
            .c
            .checked_mul(s.t)
            .ok_or_else(|| Error::Overflow("folded time extent".into()))?;
        let os = Shape5::new(s.n, 1, t_total, s.h, s.w)?;
        let mut out = Tensor5::zeros(os, self.dtype());
        match (&self.data, &mut out.data) {
            (Buffer::F32(a), Buffer::F32(b)) => fold_ct_kernel(a, b, s),
            (Buffer::F64(a), Buffer::F64(b)) => fold_ct_kernel(a, b, s),
            _ => unreachable!(),
        }
        Ok(out)
    }

    /// Inverse of [`Tensor5::fold_channels_into_time`]: splits the time
    /// axis of a single-channel tensor back into `(c_prime, T)`.
    pub fn unfold_time_into_channels(&self, c_prime: usize) -> Result<Tensor5> {
        let s = self.shape;
        if s.c != 1 {
            return Err(Error::InvalidArg(format!(
                "unfold expects a single-channel tensor, got C={}",
                s.c
            )));
        }
        if c_prime == 0 || s.t % c_prime != 0 {
            return Err(Error::InvalidArg(format!(
                "time extent {} not divisible by channel count {c_prime}",
                s.t
            )));
        }
        let os = Shape5::new(s.n, c_prime, s.t / c_prime, s.h, s.w)?;
        let mut out = Tensor5::zeros(os, self.dtype());
        match (&self.data, &mut out.data) {
            (Buffer::F32(a), Buffer::F32(b)) => fold_ct_inverse_kernel(a, b, os),
            (Buffer::F64(a), Buffer::F64(b)) => fold_ct_inverse_kernel(a, b, os),
            _ => unreachable!(),
        }
        Ok(out)
    }
}

#[inline]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Dropout mask tensor (entries 0 or 1/(1-rate)), or `None` when the op is
/// the identity (eval mode or rate 0).
pub(crate) fn dropout_mask(
    shape: Shape5,
    dtype: Dtype,
    rate: f64,
    mode: Mode,
    seed: u64,
) -> Result<Option<Tensor5>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArg(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep_scale = 1.0 / (1.0 - rate);
    let len = shape.volume();
    let mut mask = Tensor5::zeros(shape, dtype);
    match &mut mask.data {
        Buffer::F32(v) => {
            for i in 0..len {
                if rng.random::<f64>() >= rate {
                    v[i] = keep_scale as f32;
                }
            }
        }
        Buffer::F64(v) => {
            for i in 0..len {
                if rng.random::<f64>() >= rate {
                    v[i] = keep_scale;
                }
            }
        }
    }
    Ok(Some(mask))
}

fn softmax_axis_kernel<T: Float>(x: &[T], out: &mut [T], s: Shape5, axis: Axis) {
    let (len, stride) = match axis {
        Axis::Channel => (s.c, s.t * s.h * s.w),
        Axis::Time => (s.t, s.h * s.w),
    };
    // Iterate every lane along the chosen axis.
    let lane = |base: usize, out: &mut [T], x: &[T]| {
        let mut m = x[base];
        for k in 1..len {
            let v = x[base + k * stride];
            if v > m {
                m = v;
            }
        }
        let mut sum = T::zero();
        for k in 0..len {
            let e = (x[base + k * stride] - m).exp();
            out[base + k * stride] = e;
            sum = sum + e;
        }
        for k in 0..len {
            out[base + k * stride] = out[base + k * stride] / sum;
        }
    };
    match axis {
        Axis::Channel => {
            for n in 0..s.n {
                for thw in 0..s.t * s.h * s.w {
                    lane(n * s.c * s.t * s.h * s.w + thw, out, x);
                }
            }
        }
        Axis::Time => {
            for nc in 0..s.n * s.c {
                for hw in 0..s.h * s.w {
                    lane(nc * s.t * s.h * s.w + hw, out, x);
                }
            }
        }
    }
}

fn copy_window<T: Copy>(x: &[T], out: &mut [T], s: Shape5, os: Shape5, h0: usize, w0: usize) {
    for nct in 0..s.n * s.c * s.t {
        let xb = nct * s.h * s.w;
        let ob = nct * os.h * os.w;
        for hh in 0..os.h {
            let xr = xb + (h0 + hh) * s.w + w0;
            let or = ob + hh * os.w;
            out[or..or + os.w].copy_from_slice(&x[xr..xr + os.w]);
        }
    }
}

fn paste_window<T: Copy>(x: &[T], out: &mut [T], s: Shape5, os: Shape5, h0: usize, w0: usize) {
    for nct in 0..s.n * s.c * s.t {
        let xb = nct * s.h * s.w;
        let ob = nct * os.h * os.w;
        for hh in 0..s.h {
            let xr = xb + hh * s.w;
            let or = ob + (h0 + hh) * os.w + w0;
            out[or..or + s.w].copy_from_slice(&x[xr..xr + s.w]);
        }
    }
}

fn fold_ct_kernel<T: Copy>(x: &[T], out: &mut [T], s: Shape5) {
    let hw = s.h * s.w;
    for n in 0..s.n {
        for c in 0..s.c {
            for t in 0..s.t {
                let src = ((n * s.c + c) * s.t + t) * hw;
                let t_out = t * s.c + c;
                let dst = (n * s.c * s.t + t_out) * hw;
                out[dst..dst + hw].copy_from_slice(&x[src..src + hw]);
            }
        }
    }
}

fn fold_ct_inverse_kernel<T: Copy>(x: &[T], out: &mut [T], os: Shape5) {
    let hw = os.h * os.w;
    for n in 0..os.n {
        for c in 0..os.c {
            for t in 0..os.t {
                let t_in = t * os.c + c;
                let src = (n * os.c * os.t + t_in) * hw;
                let dst = ((n * os.c + c) * os.t + t) * hw;
                out[dst..dst + hw].copy_from_slice(&x[src..src + hw]);
            }
        }
    }
}

/// Concatenates tensors along the channel axis. All other extents and the
/// dtype must agree.
pub fn concat_channels(parts: &[&Tensor5]) -> Result<Tensor5> {
    if parts.is_empty() {
        return Err(Error::InvalidArg("concat of zero tensors".into()));
    }
    let first = parts[0].shape;
    let dtype = parts[0].dtype();
    let mut c_total = 0usize;
    for p in parts {
        let s = p.shape;
        if (s.n, s.t, s.h, s.w) != (first.n, first.t, first.h, first.w) || p.dtype() != dtype {
            return Err(Error::shape_mismatch(
                format!("{} (concat base)", first),
                s,
            ));
        }
        c_total += s.c;
    }
    let os = Shape5::new(first.n, c_total, first.t, first.h, first.w)?;
    let mut out = Tensor5::zeros(os, dtype);
    let thw = first.t * first.h * first.w;
    let mut c_off = 0usize;
    for p in parts {
        let pc = p.shape.c;
        for n in 0..first.n {
            let dst = (n * c_total + c_off) * thw;
            let src = n * pc * thw;
            match (&mut out.data, &p.data) {
                (Buffer::F32(o), Buffer::F32(x)) => {
                    o[dst..dst + pc * thw].copy_from_slice(&x[src..src + pc * thw])
                }
                (Buffer::F64(o), Buffer::F64(x)) => {
                    o[dst..dst + pc * thw].copy_from_slice(&x[src..src + pc * thw])
                }
                _ => unreachable!(),
            }
        }
        c_off += pc;
    }
    Ok(out)
}

/// Copies a contiguous channel range `[c0, c0+len)` out of a tensor.
pub fn slice_channels(x: &Tensor5, c0: usize, len: usize) -> Result<Tensor5> {
    let s = x.shape;
    if len == 0 || c0 + len > s.c {
        return Err(Error::InvalidArg(format!(
            "channel slice [{c0}, {}) out of range for C={}",
            c0 + len,
            s.c
        )));
    }
    let os = Shape5::new(s.n, len, s.t, s.h, s.w)?;
    let mut out = Tensor5::zeros(os, x.dtype());
    let thw = s.t * s.h * s.w;
    for n in 0..s.n {
        let src = (n * s.c + c0) * thw;
        let dst = n * len * thw;
        match (&mut out.data, &x.data) {
            (Buffer::F32(o), Buffer::F32(v)) => {
                o[dst..dst + len * thw].copy_from_slice(&v[src..src + len * thw])
            }
            (Buffer::F64(o), Buffer::F64(v)) => {
                o[dst..dst + len * thw].copy_from_slice(&v[src..src + len * thw])
            }
            _ => unreachable!(),
        }
    }
    Ok(out)
}

/// Copies one sample `[n0, n0+len)` range along the batch axis.
pub fn slice_batch(x: &Tensor5, n0: usize, len: usize) -> Result<Tensor5> {
    let s = x.shape;
    if len == 0 || n0 + len > s.n {
        return Err(Error::InvalidArg(format!(
            "batch slice [{n0}, {}) out of range for N={}",
            n0 + len,
            s.n
        )));
    }
    let os = Shape5::new(len, s.c, s.t, s.h, s.w)?;
    let mut out = Tensor5::zeros(os, x.dtype());
    let per = s.c * s.t * s.h * s.w;
    match (&mut out.data, &x.data) {
        (Buffer::F32(o), Buffer::F32(v)) => {
            o.copy_from_slice(&v[n0 * per..(n0 + len) * per]);
        }
        (Buffer::F64(o), Buffer::F64(v)) => {
            o.copy_from_slice(&v[n0 * per..(n0 + len) * per]);
        }
        _ => unreachable!(),
    }
    Ok(out)
}

/// Stacks tensors with identical `(C, T, H, W)` along the batch axis.
pub fn stack_batch(parts: &[&Tensor5]) -> Result<Tensor5> {
    if parts.is_empty() {
        return Err(Error::InvalidArg("stack of zero tensors".into()));
    }
    let s = parts[0].shape;
    let dtype = parts[0].dtype();
    let mut n_total = 0usize;
    for p in parts {
        let q = p.shape;
        if (q.c, q.t, q.h, q.w) != (s.c, s.t, s.h, s.w) || p.dtype() != dtype {
            return Err(Error::shape_mismatch(format!("{s} (stack base)"), q));
        }
        n_total += q.n;
    }
    let os = Shape5::new(n_total, s.c, s.t, s.h, s.w)?;
    let mut out = Tensor5::zeros(os, dtype);
    let per = s.c * s.t * s.h * s.w;
    let mut off = 0usize;
    for p in parts {
        let cnt = p.shape.n * per;
        match (&mut out.data, &p.data) {
            (Buffer::F32(o), Buffer::F32(v)) => o[off..off + cnt].copy_from_slice(v),
            (Buffer::F64(o), Buffer::F64(v)) => o[off..off + cnt].copy_from_slice(v),
            _ => unreachable!(),
        }
        off += cnt;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh(n: usize, c: usize, t: usize, h: usize, w: usize) -> Shape5 {
        Shape5::new(n, c, t, h, w).unwrap()
    }

    #[test]
    fn zeros_has_expected_volume() {
        let t = Tensor5::zeros(sh(1, 1, 1, 2, 2), Dtype::F32);
        assert_eq!(t.len(), 4);
        assert!(t.as_f32().unwrap().iter().all(|&x| x == 0.0));

        let t = Tensor5::zeros(sh(2, 11, 4, 12, 12), Dtype::F64);
        assert_eq!(t.len(), 12672);
        assert!(t.as_f64().unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Shape5::new(1, 0, 1, 2, 2).is_err());
        assert!(Shape5::new(0, 1, 1, 1, 1).is_err());
    }

    #[test]
    fn shape_volume_overflow_rejected() {
        assert!(Shape5::new(usize::MAX, 2, 1, 1, 1).is_err());
        assert!(Shape5::new(1 << 40, 1 << 40, 1, 1, 1).is_err());
    }

    #[test]
    fn elementwise_hand_cases() {
        let s = sh(1, 1, 1, 1, 2);
        let a = Tensor5::from_vec_f32(s, vec![1.0, 2.0]).unwrap();
        let b = Tensor5::from_vec_f32(s, vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().as_f32().unwrap(), &[4.0, 6.0]);
        assert_eq!(a.sub(&b).unwrap().as_f32().unwrap(), &[-2.0, -2.0]);
        assert_eq!(a.mul(&b).unwrap().as_f32().unwrap(), &[3.0, 8.0]);

        let c = Tensor5::from_vec_f32(s, vec![1.0, -1.0]).unwrap();
        assert_eq!(c.scalar_mul(0.0).unwrap().as_f32().unwrap(), &[0.0, 0.0]);
        assert_eq!(
            c.clamp(-0.5, 0.5).unwrap().as_f32().unwrap(),
            &[0.5, -0.5]
        );
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let a = Tensor5::zeros(sh(1, 1, 1, 2, 2), Dtype::F32);
        let b = Tensor5::zeros(sh(1, 1, 1, 2, 3), Dtype::F32);
        assert!(matches!(a.mul(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let a = Tensor5::zeros(sh(1, 1, 1, 2, 2), Dtype::F32);
        let b = Tensor5::zeros(sh(1, 1, 1, 2, 2), Dtype::F64);
        assert!(matches!(a.add(&b), Err(Error::DtypeMismatch(_))));
    }

    #[test]
    fn nan_input_rejected() {
        let s = sh(1, 1, 1, 1, 2);
        assert!(matches!(
            Tensor5::from_vec_f32(s, vec![1.0, f32::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn relu_definition() {
        let s = sh(1, 1, 1, 1, 3);
        let x = Tensor5::from_vec_f64(s, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(x.relu().unwrap().as_f64().unwrap(), &[0.0, 0.0, 2.0]);

        let neg = Tensor5::from_vec_f64(s, vec![-3.0, -0.5, -1e9]).unwrap();
        assert!(neg.relu().unwrap().as_f64().unwrap().iter().all(|&v| v == 0.0));

        let pos = Tensor5::from_vec_f64(s, vec![0.0, 0.5, 7.0]).unwrap();
        assert_eq!(pos.relu().unwrap(), pos);
    }

    #[test]
    fn sigmoid_values() {
        let s = sh(1, 1, 1, 1, 1);
        let z = Tensor5::from_vec_f64(s, vec![0.0]).unwrap();
        assert_eq!(z.sigmoid().unwrap().as_f64().unwrap()[0], 0.5);

        let t = Tensor5::from_vec_f64(s, vec![10.0]).unwrap();
        let v = t.sigmoid().unwrap().as_f64().unwrap()[0];
        assert!((v - 0.9999546).abs() < 1e-6, "sigmoid(10) = {v}");

        // sigmoid(x) + sigmoid(-x) = 1 for sampled x.
        for i in 0..50 {
            let x = -8.0 + 16.0 * (i as f64) / 49.0;
            let p = sigmoid_scalar(x) + sigmoid_scalar(-x);
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_hand_cases() {
        let s = sh(1, 1, 2, 1, 1);
        let x = Tensor5::from_vec_f64(s, vec![0.0, 0.0]).unwrap();
        let y = x.softmax_axis(Axis::Time).unwrap();
        assert_eq!(y.as_f64().unwrap(), &[0.5, 0.5]);

        let big = Tensor5::from_vec_f64(s, vec![1000.0, 1000.0]).unwrap();
        let y = big.softmax_axis(Axis::Time).unwrap();
        assert_eq!(y.as_f64().unwrap(), &[0.5, 0.5]);

        let x = Tensor5::from_vec_f64(s, vec![0.0, 3.0f64.ln()]).unwrap();
        let y = x.softmax_axis(Axis::Time).unwrap();
        assert!((y.as_f64().unwrap()[0] - 0.25).abs() < 1e-12);
        assert!((y.as_f64().unwrap()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_with_extreme_magnitudes() {
        let s = sh(2, 3, 5, 2, 2);
        let x = Tensor5::from_fn(s, Dtype::F64, |i| {
            let r = ((i as f64) * 0.7391).sin();
            r * 1e4
        })
        .unwrap();
        for axis in [Axis::Channel, Axis::Time] {
            let y = x.softmax_axis(axis).unwrap();
            let (len, stride) = match axis {
                Axis::Channel => (s.c, s.t * s.h * s.w),
                Axis::Time => (s.t, s.h * s.w),
            };
            let d = y.as_f64().unwrap();
            // check a few lanes
            for base in [0usize, 3, s.h * s.w - 1] {
                let lane_base = match axis {
                    Axis::Channel => base,
                    Axis::Time => base,
                };
                let sum: f64 = (0..len).map(|k| d[lane_base + k * stride]).sum();
                assert!((sum - 1.0).abs() < 1e-6, "axis {axis:?} lane sum {sum}");
            }
        }
    }

    #[test]
    fn dropout_eval_and_zero_rate_identity() {
        let s = sh(1, 2, 2, 3, 3);
        let x = Tensor5::from_fn(s, Dtype::F32, |i| i as f64 * 0.25 - 2.0).unwrap();
        assert_eq!(x.dropout(0.4, Mode::Eval, 7).unwrap(), x);
        assert_eq!(x.dropout(0.0, Mode::Train, 7).unwrap(), x);
        assert!(x.dropout(1.0, Mode::Train, 7).is_err());
    }

    #[test]
    fn dropout_survival_fraction() {
        let s = sh(1, 1, 1, 100, 1000);
        let x = Tensor5::full(s, Dtype::F32, 1.0).unwrap();
        let y = x.dropout(0.4, Mode::Train, 42).unwrap();
        let survivors = y.as_f32().unwrap().iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / 1e5;
        assert!((frac - 0.6).abs() < 0.01, "surviving fraction {frac}");
        // survivors are scaled by 1/(1-rate)
        let scale = 1.0f32 / 0.6;
        assert!(y
            .as_f32()
            .unwrap()
            .iter()
            .all(|&v| v == 0.0 || (v - scale).abs() < 1e-6));
    }

    #[test]
    fn crop_center_offsets() {
        let s = sh(1, 1, 1, 48, 48);
        let x = Tensor5::from_fn(s, Dtype::F32, |i| i as f64).unwrap();
        let y = x.crop_center_spatial(6).unwrap();
        assert_eq!(y.shape().dims(), [1, 1, 1, 8, 8]);
        // window starts at rows/cols 20..27
        for hh in 0..8 {
            for ww in 0..8 {
                assert_eq!(y.get(0, 0, 0, hh, ww), x.get(0, 0, 0, 20 + hh, 20 + ww));
            }
        }
        // factor 1 is the identity
        assert_eq!(x.crop_center_spatial(1).unwrap(), x);
    }

    #[test]
    fn crop_divisibility_enforced() {
        let x = Tensor5::zeros(sh(1, 1, 1, 50, 48), Dtype::F32);
        assert!(x.crop_center_spatial(6).is_err());
    }

    #[test]
    fn crop_then_pad_preserves_window() {
        let s = sh(2, 3, 2, 12, 18);
        let x = Tensor5::from_fn(s, Dtype::F64, |i| (i as f64 * 0.37).cos()).unwrap();
        let cropped = x.crop_center_spatial(3).unwrap();
        let padded = cropped.pad_center_spatial(12, 18).unwrap();
        assert_eq!(padded.shape(), s);
        let (h0, w0) = ((12 - 4) / 2, (18 - 6) / 2);
        for n in 0..2 {
            for c in 0..3 {
                for t in 0..2 {
                    for hh in 0..4 {
                        for ww in 0..6 {
                            assert_eq!(
                                padded.get(n, c, t, h0 + hh, w0 + ww),
                                x.get(n, c, t, h0 + hh, w0 + ww)
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn fold_is_time_major_relabeling() {
        let s = sh(1, 8, 4, 2, 2);
        let x = Tensor5::from_fn(s, Dtype::F32, |i| i as f64).unwrap();
        let y = x.fold_channels_into_time().unwrap();
        assert_eq!(y.shape().dims(), [1, 1, 32, 2, 2]);
        for c in 0..8 {
            for t in 0..4 {
                let t_out = t * 8 + c;
                for hh in 0..2 {
                    for ww in 0..2 {
                        assert_eq!(y.get(0, 0, t_out, hh, ww), x.get(0, c, t, hh, ww));
                    }
                }
            }
        }
    }

    #[test]
    fn fold_single_channel_identity() {
        let s = sh(2, 1, 5, 3, 3);
        let x = Tensor5::from_fn(s, Dtype::F64, |i| i as f64 * 0.5).unwrap();
        let y = x.fold_channels_into_time().unwrap();
        assert_eq!(y.shape(), s.clone());
        assert_eq!(y, x);
    }

    #[test]
    fn fold_unfold_round_trip_exhaustive_small() {
        // all (C', T) with C'.T <= 256 on a small spatial grid
        for c in 1..=16usize {
            for t in 1..=16usize {
                if c * t > 256 {
                    continue;
                }
                let s = sh(1, c, t, 2, 3);
                let x = Tensor5::from_fn(s, Dtype::F32, |i| i as f64).unwrap();
                let back = x
                    .fold_channels_into_time()
                    .unwrap()
                    .unfold_time_into_channels(c)
                    .unwrap();
                assert_eq!(back, x, "round trip failed for C'={c}, T={t}");
            }
        }
    }

    #[test]
    fn concat_and_slice_channels_inverse() {
        let s = sh(2, 6, 2, 3, 3);
        let x = Tensor5::from_fn(s, Dtype::F32, |i| i as f64).unwrap();
        let a = slice_channels(&x, 0, 2).unwrap();
        let b = slice_channels(&x, 2, 4).unwrap();
        let back = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn stack_and_slice_batch_inverse() {
        let s = sh(3, 2, 2, 2, 2);
        let x = Tensor5::from_fn(s, Dtype::F32, |i| i as f64).unwrap();
        let s0 = slice_batch(&x, 0, 1).unwrap();
        let s12 = slice_batch(&x, 1, 2).unwrap();
        let back = stack_batch(&[&s0, &s12]).unwrap();
        assert_eq!(back, x);
    }
}
