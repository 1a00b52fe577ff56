//! Direct 3D convolution: forward, input/weight/bias gradients, and
//! closed-form FLOPs / parameter accounting for full vs. decomposed
//! kernels.
//!
//! Convention: cross-correlation (no kernel flip), zero padding. The
//! output extent per axis is `floor((in + 2p - d*(k-1) - 1) / s) + 1`.
//! Weights are stored as `(c_out, c_in/groups, k_t, k_h, k_w)` tensors,
//! biases as `(1, c_out, 1, 1, 1)`.
//!
//! The stride-1 path walks kernel taps and accumulates whole contiguous
//! output rows per tap, which keeps the inner loop vectorizable; the
//! per-output-element summation order (c_in, then k_t, k_h, k_w) is fixed,
//! so results are bit-identical no matter how work is split over threads.

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Shape5, Tensor5};
use rayon::prelude::*;

pub(crate) trait Scalar:
    num_traits::Float + std::ops::AddAssign + Send + Sync + 'static
{
}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Full description of one convolution; drives forward, backward, FLOPs,
/// and parameter counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    /// Kernel extents `(k_t, k_h, k_w)`.
    pub kernel: (usize, usize, usize),
    pub dilation: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: (usize, usize, usize)) -> Self {
        ConvSpec {
            c_in,
            c_out,
            kernel,
            dilation: (1, 1, 1),
            stride: (1, 1, 1),
            padding: (0, 0, 0),
            groups: 1,
        }
    }

    /// "Same" padding: output extents equal input extents at stride 1.
    /// Requires odd kernel extents.
    pub fn same(c_in: usize, c_out: usize, kernel: (usize, usize, usize)) -> Result<Self> {
        ConvSpec::new(c_in, c_out, kernel).into_same()
    }

    /// Sets padding so each axis preserves its extent at stride 1.
    pub fn into_same(mut self) -> Result<Self> {
        let (kt, kh, kw) = self.kernel;
        let (dt, dh, dw) = self.dilation;
        for k in [kt, kh, kw] {
            if k % 2 == 0 {
                return Err(Error::InvalidConfig(format!(
                    "same padding requires odd kernel extents, got {:?}",
                    self.kernel
                )));
            }
        }
        self.padding = (dt * (kt - 1) / 2, dh * (kh - 1) / 2, dw * (kw - 1) / 2);
        Ok(self)
    }

    pub fn with_dilation(mut self, d: (usize, usize, usize)) -> Self {
        self.dilation = d;
        self
    }

    pub fn with_stride(mut self, s: (usize, usize, usize)) -> Self {
        self.stride = s;
        self
    }

    pub fn with_padding(mut self, p: (usize, usize, usize)) -> Self {
        self.padding = p;
        self
    }

    pub fn with_groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (kt, kh, kw) = self.kernel;
        let (dt, dh, dw) = self.dilation;
        let (st, sh, sw) = self.stride;
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::InvalidConfig("conv channels must be >= 1".into()));
        }
        if kt == 0 || kh == 0 || kw == 0 || dt == 0 || dh == 0 || dw == 0 {
            return Err(Error::InvalidConfig(
                "conv kernel and dilation extents must be >= 1".into(),
            ));
        }
        if st == 0 || sh == 0 || sw == 0 {
            return Err(Error::InvalidConfig("conv strides must be >= 1".into()));
        }
        if self.groups == 0 || self.c_in % self.groups != 0 || self.c_out % self.groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "groups {} must divide c_in {} and c_out {}",
                self.groups, self.c_in, self.c_out
            )));
        }
        Ok(())
    }

    fn out_extent(input: usize, k: usize, d: usize, s: usize, p: usize) -> Result<usize> {
        let eff = 1 + (k - 1) * d;
        let padded = input + 2 * p;
        if eff > padded {
            return Err(Error::InvalidShape(format!(
                "effective kernel extent {eff} exceeds padded input extent {padded}"
            )));
        }
        Ok((padded - eff) / s + 1)
    }

    /// Output shape for an input shape; errors if the effective kernel
    /// does not fit the padded input.
    pub fn output_shape(&self, x: Shape5) -> Result<Shape5> {
        self.validate()?;
        if x.c != self.c_in {
            return Err(Error::shape_mismatch(
                format!("input with C={}", self.c_in),
                x,
            ));
        }
        let (kt, kh, kw) = self.kernel;
        let (dt, dh, dw) = self.dilation;
        let (st, sh, sw) = self.stride;
        let (pt, ph, pw) = self.padding;
        Shape5::new(
            x.n,
            self.c_out,
            Self::out_extent(x.t, kt, dt, st, pt)?,
            Self::out_extent(x.h, kh, dh, sh, ph)?,
            Self::out_extent(x.w, kw, dw, sw, pw)?,
        )
    }

    /// `(c_out, c_in/groups, k_t, k_h, k_w)`.
    pub fn weight_shape(&self) -> Result<Shape5> {
        self.validate()?;
        Shape5::new(
            self.c_out,
            self.c_in / self.groups,
            self.kernel.0,
            self.kernel.1,
            self.kernel.2,
        )
    }

    pub fn bias_shape(&self) -> Result<Shape5> {
        Shape5::new(1, self.c_out, 1, 1, 1)
    }
}

/// Multiply-accumulate count of a dense `k_t x k_h x k_w` 3D convolution
/// over an `H x W` map: `H * W * C_in * C_out * (K_t * K_h * K_w)`.
/// Exact checked integer arithmetic.
pub fn flops_full(
    h: u64,
    w: u64,
    c_in: u64,
    c_out: u64,
    k_t: u64,
    k_h: u64,
    k_w: u64,
) -> Result<u128> {
    for (name, v) in [
        ("h", h),
        ("w", w),
        ("c_in", c_in),
        ("c_out", c_out),
        ("k_t", k_t),
        ("k_h", k_h),
        ("k_w", k_w),
    ] {
        if v == 0 {
            return Err(Error::InvalidArg(format!("flops_full: {name} must be >= 1")));
        }
    }
    let kernel = (k_t as u128)
        .checked_mul(k_h as u128)
        .and_then(|p| p.checked_mul(k_w as u128))
        .ok_or_else(|| Error::Overflow("flops_full kernel product".into()))?;
    checked_product(&[h as u128, w as u128, c_in as u128, c_out as u128, kernel])
        .ok_or_else(|| Error::Overflow("flops_full".into()))
}

/// Multiply-accumulate count of the decomposed (spatial 2D then temporal
/// 1D) pipeline: `H * W * C_in * C_out * (K_t + K_h * K_w)`.
pub fn flops_decomposed(
    h: u64,
    w: u64,
    c_in: u64,
    c_out: u64,
    k_t: u64,
    k_h: u64,
    k_w: u64,
) -> Result<u128> {
    for (name, v) in [
        ("h", h),
        ("w", w),
        ("c_in", c_in),
        ("c_out", c_out),
        ("k_t", k_t),
        ("k_h", k_h),
        ("k_w", k_w),
    ] {
        if v == 0 {
            return Err(Error::InvalidArg(format!(
                "flops_decomposed: {name} must be >= 1"
            )));
        }
    }
    let kernel = (k_h as u128)
        .checked_mul(k_w as u128)
        .and_then(|p| p.checked_add(k_t as u128))
        .ok_or_else(|| Error::Overflow("flops_decomposed kernel sum".into()))?;
    checked_product(&[h as u128, w as u128, c_in as u128, c_out as u128, kernel])
        .ok_or_else(|| Error::Overflow("flops_decomposed".into()))
}

fn checked_product(factors: &[u128]) -> Option<u128> {
    factors.iter().try_fold(1u128, |acc, &f| acc.checked_mul(f))
}

/// Learnable parameter count of one convolution:
/// `(c_in / groups) * c_out * k_t * k_h * k_w`, plus `c_out` with bias.
pub fn param_count(spec: &ConvSpec, with_bias: bool) -> Result<u128> {
    spec.validate()?;
    let (kt, kh, kw) = spec.kernel;
    let weights = checked_product(&[
        (spec.c_in / spec.groups) as u128,
        spec.c_out as u128,
        kt as u128,
        kh as u128,
        kw as u128,
    ])
    .ok_or_else(|| Error::Overflow("param_count".into()))?;
    Ok(weights + if with_bias { spec.c_out as u128 } else { 0 })
}

fn check_conv_args(x: &Tensor5, weight: &Tensor5, bias: Option<&Tensor5>, spec: &ConvSpec) -> Result<Shape5> {
    let os = spec.output_shape(x.shape())?;
    let ws = spec.weight_shape()?;
    if weight.shape() != ws {
        return Err(Error::shape_mismatch(
            format!("weight {ws}"),
            weight.shape(),
        ));
    }
    if weight.dtype() != x.dtype() {
        return Err(Error::DtypeMismatch("conv weight dtype != input dtype".into()));
    }
    if let Some(b) = bias {
        if b.shape() != spec.bias_shape()? {
            return Err(Error::shape_mismatch(
                format!("bias {}", spec.bias_shape()?),
                b.shape(),
            ));
        }
        if b.dtype() != x.dtype() {
            return Err(Error::DtypeMismatch("conv bias dtype != input dtype".into()));
        }
    }
    Ok(os)
}

/// 3D cross-correlation with zero padding.
pub fn conv3d_forward(
    x: &Tensor5,
    weight: &Tensor5,
    bias: Option<&Tensor5>,
    spec: &ConvSpec,
) -> Result<Tensor5> {
    let os = check_conv_args(x, weight, bias, spec)?;
    let mut out = Tensor5::zeros(os, x.dtype());
    match x.dtype() {
        Dtype::F32 => conv_fwd_kernel::<f32>(
            x.as_f32()?,
            x.shape(),
            weight.as_f32()?,
            bias.map(|b| b.as_f32()).transpose()?,
            spec,
            os,
            out.as_f32_mut(),
        ),
        Dtype::F64 => conv_fwd_kernel::<f64>(
            x.as_f64()?,
            x.shape(),
            weight.as_f64()?,
            bias.map(|b| b.as_f64()).transpose()?,
            spec,
            os,
            out.as_f64_mut(),
        ),
    }
    out.check_finite("conv3d_forward")?;
    Ok(out)
}

/// Spatial-only convolution (`1 x k_h x k_w` kernel); the time axis is
/// untouched. Delegates to [`conv3d_forward`] bit-identically.
pub fn spatial_conv(
    x: &Tensor5,
    weight: &Tensor5,
    bias: Option<&Tensor5>,
    dilation: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor5> {
    let ws = weight.shape();
    if ws.t != 1 {
        return Err(Error::InvalidArg(format!(
            "spatial_conv kernel must have k_t = 1, got {}",
            ws.t
        )));
    }
    let groups = infer_groups(x.shape().c, ws.c)?;
    let spec = ConvSpec::new(x.shape().c, ws.n, (1, ws.h, ws.w))
        .with_dilation((1, dilation.0, dilation.1))
        .with_padding((0, padding.0, padding.1))
        .with_groups(groups);
    conv3d_forward(x, weight, bias, &spec)
}

/// Temporal-only convolution (`k_t x 1 x 1` kernel); spatial axes are
/// untouched. Delegates to [`conv3d_forward`] bit-identically.
pub fn temporal_conv(
    x: &Tensor5,
    weight: &Tensor5,
    bias: Option<&Tensor5>,
    padding: usize,
) -> Result<Tensor5> {
    let ws = weight.shape();
    if ws.h != 1 || ws.w != 1 {
        return Err(Error::InvalidArg(format!(
            "temporal_conv kernel must have k_h = k_w = 1, got {}x{}",
            ws.h, ws.w
        )));
    }
    let groups = infer_groups(x.shape().c, ws.c)?;
    let spec = ConvSpec::new(x.shape().c, ws.n, (ws.t, 1, 1))
        .with_padding((padding, 0, 0))
        .with_groups(groups);
    conv3d_forward(x, weight, bias, &spec)
}

fn infer_groups(c_in: usize, c_per_group: usize) -> Result<usize> {
    if c_per_group == 0 || c_in % c_per_group != 0 {
        return Err(Error::InvalidArg(format!(
            "weight second extent {c_per_group} does not divide c_in {c_in}"
        )));
    }
    Ok(c_in / c_per_group)
}

/// Gradients of a convolution given the upstream output gradient.
pub struct ConvGrads {
    pub dx: Option<Tensor5>,
    pub dw: Tensor5,
    pub db: Option<Tensor5>,
}

/// Backward pass of [`conv3d_forward`]: gradients w.r.t. input, weight,
/// and bias. `need_dx` / `need_db` skip unneeded outputs.
pub fn conv3d_backward(
    x: &Tensor5,
    weight: &Tensor5,
    spec: &ConvSpec,
    dy: &Tensor5,
    need_dx: bool,
    need_db: bool,
) -> Result<ConvGrads> {
    let os = check_conv_args(x, weight, None, spec)?;
    if dy.shape() != os {
        return Err(Error::shape_mismatch(format!("dy {os}"), dy.shape()));
    }
    if dy.dtype() != x.dtype() {
        return Err(Error::DtypeMismatch("dy dtype != input dtype".into()));
    }
    let mut dw = Tensor5::zeros(weight.shape(), x.dtype());
    let mut dx = need_dx.then(|| Tensor5::zeros(x.shape(), x.dtype()));
    let mut db = need_db.then(|| Tensor5::zeros(spec.bias_shape().unwrap(), x.dtype()));
    match x.dtype() {
        Dtype::F32 => conv_bwd_kernel::<f32>(
            x.as_f32()?,
            x.shape(),
            weight.as_f32()?,
            spec,
            dy.as_f32()?,
            os,
            dx.as_mut().map(|t| t.as_f32_mut()),
            dw.as_f32_mut(),
            db.as_mut().map(|t| t.as_f32_mut()),
        ),
        Dtype::F64 => conv_bwd_kernel::<f64>(
            x.as_f64()?,
            x.shape(),
            weight.as_f64()?,
            spec,
            dy.as_f64()?,
            os,
            dx.as_mut().map(|t| t.as_f64_mut()),
            dw.as_f64_mut(),
            db.as_mut().map(|t| t.as_f64_mut()),
        ),
    }
    Ok(ConvGrads { dx, dw, db })
}

/// `out[i] += sum_k w_k * x[i + off_k]` over an arbitrary tap list,
/// processed in groups of four taps per pass so each pass performs four
/// fused multiply-adds per output element. The group boundaries are fixed
/// by the tap order, so the per-element summation order is deterministic.
fn run_fma_taps<T: Scalar>(out: &mut [T], x: &[T], taps: &[(usize, T)]) {
    let n = out.len();
    let mut k = 0;
    while k < taps.len() {
        match taps.len() - k {
            1 => {
                let (o0, w0) = taps[k];
                for (o, &a) in out.iter_mut().zip(&x[o0..o0 + n]) {
                    *o += w0 * a;
                }
                k += 1;
            }
            2 => {
                let ((o0, w0), (o1, w1)) = (taps[k], taps[k + 1]);
                for ((o, &a), &b) in out.iter_mut().zip(&x[o0..o0 + n]).zip(&x[o1..o1 + n]) {
                    *o += w0 * a + w1 * b;
                }
                k += 2;
            }
            3 => {
                let ((o0, w0), (o1, w1), (o2, w2)) = (taps[k], taps[k + 1], taps[k + 2]);
                for (((o, &a), &b), &c) in out
                    .iter_mut()
                    .zip(&x[o0..o0 + n])
                    .zip(&x[o1..o1 + n])
                    .zip(&x[o2..o2 + n])
                {
                    *o += w0 * a + w1 * b + w2 * c;
                }
                k += 3;
            }
            _ => {
                let ((o0, w0), (o1, w1), (o2, w2), (o3, w3)) =
                    (taps[k], taps[k + 1], taps[k + 2], taps[k + 3]);
                for ((((o, &a), &b), &c), &d) in out
                    .iter_mut()
                    .zip(&x[o0..o0 + n])
                    .zip(&x[o1..o1 + n])
                    .zip(&x[o2..o2 + n])
                    .zip(&x[o3..o3 + n])
                {
                    *o += w0 * a + w1 * b + w2 * c + w3 * d;
                }
                k += 4;
            }
        }
    }
}

/// `acc[k] += sum_rows sum_i dy[row + i] * x[row' + i + off_k]`.
/// Dot products are reductions, which the auto-vectorizer will not reorder
/// on its own, so the lanes are split by hand; the per-tap lane partials
/// persist across all rows and are combined once, in a fixed order.
const DOT_LANES: usize = 8;

fn run_dot_taps<T: Scalar>(
    dy: &[T],
    x: &[T],
    rows: &[(usize, usize)],
    len: usize,
    offs: &[usize],
    accs: &mut [T],
) {
    let mut k = 0;
    while k + 4 <= offs.len() {
        let o: [usize; 4] = offs[k..k + 4].try_into().unwrap();
        let r = dot4_rows(dy, x, rows, len, o);
        for t in 0..4 {
            accs[k + t] += r[t];
        }
        k += 4;
    }
    while k < offs.len() {
        accs[k] += dot1_rows(dy, x, rows, len, offs[k]);
        k += 1;
    }
}

fn dot4_rows<T: Scalar>(
    dy: &[T],
    x: &[T],
    rows: &[(usize, usize)],
    len: usize,
    o: [usize; 4],
) -> [T; 4] {
    const L: usize = DOT_LANES;
    let main = len - len % L;
    let mut a = [[T::zero(); L]; 4];
    let mut rem = [T::zero(); 4];
    for &(doff, xoff) in rows {
        let d = &dy[doff..doff + len];
        let x0 = &x[o[0] + xoff..o[0] + xoff + len];
        let x1 = &x[o[1] + xoff..o[1] + xoff + len];
        let x2 = &x[o[2] + xoff..o[2] + xoff + len];
        let x3 = &x[o[3] + xoff..o[3] + xoff + len];
        for ((((d, v0), v1), v2), v3) in d[..main]
            .chunks_exact(L)
            .zip(x0[..main].chunks_exact(L))
            .zip(x1[..main].chunks_exact(L))
            .zip(x2[..main].chunks_exact(L))
            .zip(x3[..main].chunks_exact(L))
        {
            for l in 0..L {
                a[0][l] += d[l] * v0[l];
                a[1][l] += d[l] * v1[l];
                a[2][l] += d[l] * v2[l];
                a[3][l] += d[l] * v3[l];
            }
        }
        for i in main..len {
            rem[0] += d[i] * x0[i];
            rem[1] += d[i] * x1[i];
            rem[2] += d[i] * x2[i];
            rem[3] += d[i] * x3[i];
        }
    }
    let mut out = [T::zero(); 4];
    for t in 0..4 {
        let mut s = T::zero();
        for l in 0..L {
            s += a[t][l];
        }
        out[t] = s + rem[t];
    }
    out
}

fn dot1_rows<T: Scalar>(dy: &[T], x: &[T], rows: &[(usize, usize)], len: usize, o: usize) -> T {
    const L: usize = DOT_LANES;
    let main = len - len % L;
    let mut a = [T::zero(); L];
    let mut rem = T::zero();
    for &(doff, xoff) in rows {
        let d = &dy[doff..doff + len];
        let x0 = &x[o + xoff..o + xoff + len];
        for (d, v0) in d[..main].chunks_exact(L).zip(x0[..main].chunks_exact(L)) {
            for l in 0..L {
                a[l] += d[l] * v0[l];
            }
        }
        for i in main..len {
            rem += d[i] * x0[i];
        }
    }
    let mut s = T::zero();
    for l in 0..L {
        s += a[l];
    }
    s + rem
}

/// How much of an output slab is one contiguous run whose source offsets
/// are linear in the output index. With `W`-axis taps absent and no `W`
/// padding, output and padded-input row strides agree, so runs extend to
/// whole time slices or the whole slab.
#[derive(Clone, Copy, PartialEq, Eq)]
enum RunPlan {
    /// run = whole (T, H, W) slab
    Slab,
    /// run = one (H, W) slice per output t
    PerT,
    /// run = one W row per (t, h)
    PerTh,
}

fn run_plan(kernel: (usize, usize, usize), padding: (usize, usize, usize)) -> RunPlan {
    if kernel.2 == 1 && padding.2 == 0 {
        if kernel.1 == 1 && padding.1 == 0 {
            RunPlan::Slab
        } else {
            RunPlan::PerT
        }
    } else {
        RunPlan::PerTh
    }
}

/// Zero-padded copy of every `(n, c)` plane of `x`, or a borrow when no
/// padding is needed. Padded plane dims are `(t+2pt, h+2ph, w+2pw)`.
enum PaddedPlanes<'a, T> {
    Borrowed(&'a [T]),
    Owned(Vec<T>),
}

impl<'a, T> std::ops::Deref for PaddedPlanes<'a, T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        match self {
            PaddedPlanes::Borrowed(s) => s,
            PaddedPlanes::Owned(v) => v,
        }
    }
}

fn build_padded<'a, T: Scalar>(
    x: &'a [T],
    s: Shape5,
    pads: (usize, usize, usize),
) -> (PaddedPlanes<'a, T>, (usize, usize, usize)) {
    let (pt, ph, pw) = pads;
    let dims = (s.t + 2 * pt, s.h + 2 * ph, s.w + 2 * pw);
    if pads == (0, 0, 0) {
        return (PaddedPlanes::Borrowed(x), dims);
    }
    let plane = dims.0 * dims.1 * dims.2;
    let mut buf = vec![T::zero(); s.n * s.c * plane];
    for nc in 0..s.n * s.c {
        let src = &x[nc * s.t * s.h * s.w..];
        let dst = &mut buf[nc * plane..(nc + 1) * plane];
        for t in 0..s.t {
            for h in 0..s.h {
                let srow = (t * s.h + h) * s.w;
                let drow = ((t + pt) * dims.1 + (h + ph)) * dims.2 + pw;
                dst[drow..drow + s.w].copy_from_slice(&src[srow..srow + s.w]);
            }
        }
    }
    (PaddedPlanes::Owned(buf), dims)
}

/// Runs `f(slab_index, slab)` over equal disjoint chunks of `out`,
/// in parallel when the total work is worth it. Each slab is written by
/// exactly one closure invocation, so parallelism cannot change results.
fn for_each_slab<T: Send, F: Fn(usize, &mut [T]) + Sync>(
    out: &mut [T],
    slab_len: usize,
    work: usize,
    f: F,
) {
    const PAR_WORK_THRESHOLD: usize = 1 << 15;
    if work >= PAR_WORK_THRESHOLD && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(slab_len)
            .enumerate()
            .for_each(|(i, slab)| f(i, slab));
    } else {
        for (i, slab) in out.chunks_mut(slab_len).enumerate() {
            f(i, slab);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_fwd_kernel<T: Scalar>(
    x: &[T],
    xs: Shape5,
    w: &[T],
    bias: Option<&[T]>,
    spec: &ConvSpec,
    os: Shape5,
    out: &mut [T],
) {
    let (kt, kh, kw) = spec.kernel;
    let (dt, dh, dw_) = spec.dilation;
    let cpg = spec.c_in / spec.groups;
    let opg = spec.c_out / spec.groups;
    let slab = os.t * os.h * os.w;
    let work = slab * os.n * os.c * cpg * kt * kh * kw;

    if spec.stride != (1, 1, 1) {
        conv_fwd_strided(x, xs, w, bias, spec, os, out);
        return;
    }
    let (xpad, (_ptt, phh, pww)) = build_padded(x, xs, spec.padding);
    let plane = _ptt * phh * pww;
    let xpad: &[T] = &xpad;
    let plan = run_plan(spec.kernel, spec.padding);
    let x_tstride = phh * pww;

    for_each_slab(out, slab, work, |idx, oslab| {
        let n = idx / os.c;
        let co = idx % os.c;
        let g = co / opg;
        if let Some(b) = bias {
            oslab.fill(b[co]);
        }
        // one tap per (c_in-in-group, k_t, k_h, k_w): padded-plane offset
        // and weight, in the fixed summation order
        let mut taps: Vec<(usize, T)> = Vec::with_capacity(cpg * kt * kh * kw);
        for cig in 0..cpg {
            let ci = g * cpg + cig;
            let wbase = ((co * cpg) + cig) * kt * kh * kw;
            for kti in 0..kt {
                for khi in 0..kh {
                    for kwi in 0..kw {
                        taps.push((
                            ci * plane + (kti * dt) * x_tstride + (khi * dh) * pww + kwi * dw_,
                            w[wbase + (kti * kh + khi) * kw + kwi],
                        ));
                    }
                }
            }
        }
        let xn = &xpad[n * xs.c * plane..(n + 1) * xs.c * plane];
        match plan {
            RunPlan::Slab => run_fma_taps(oslab, xn, &taps),
            RunPlan::PerT => {
                let run = os.h * os.w;
                for to in 0..os.t {
                    run_fma_taps(&mut oslab[to * run..(to + 1) * run], &xn[to * x_tstride..], &taps);
                }
            }
            RunPlan::PerTh => {
                for to in 0..os.t {
                    for ho in 0..os.h {
                        let orow = (to * os.h + ho) * os.w;
                        run_fma_taps(
                            &mut oslab[orow..orow + os.w],
                            &xn[to * x_tstride + ho * pww..],
                            &taps,
                        );
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn conv_fwd_strided<T: Scalar>(
    x: &[T],
    xs: Shape5,
    w: &[T],
    bias: Option<&[T]>,
    spec: &ConvSpec,
    os: Shape5,
    out: &mut [T],
) {
    let (kt, kh, kw) = spec.kernel;
    let (dt, dh, dw_) = spec.dilation;
    let (pt, ph, pw) = spec.padding;
    let (st, sh_, sw) = spec.stride;
    let cpg = spec.c_in / spec.groups;
    let opg = spec.c_out / spec.groups;
    let slab = os.t * os.h * os.w;
    let x_chw = xs.t * xs.h * xs.w;
    let work = slab * os.n * os.c * cpg * kt * kh * kw;

    for_each_slab(out, slab, work, |idx, oslab| {
        let n = idx / os.c;
        let co = idx % os.c;
        let g = co / opg;
        if let Some(b) = bias {
            oslab.fill(b[co]);
        }
        let xn = &x[n * xs.c * x_chw..(n + 1) * xs.c * x_chw];
        for cig in 0..cpg {
            let ci = g * cpg + cig;
            let xc = &xn[ci * x_chw..(ci + 1) * x_chw];
            let wbase = ((co * cpg) + cig) * kt * kh * kw;
            for to in 0..os.t {
                for ho in 0..os.h {
                    for wo in 0..os.w {
                        let mut acc = T::zero();
                        for kti in 0..kt {
                            let ti = (to * st + kti * dt).wrapping_sub(pt);
                            if ti >= xs.t {
                                continue;
                            }
                            for khi in 0..kh {
                                let hi = (ho * sh_ + khi * dh).wrapping_sub(ph);
                                if hi >= xs.h {
                                    continue;
                                }
                                for kwi in 0..kw {
                                    let wi = (wo * sw + kwi * dw_).wrapping_sub(pw);
                                    if wi >= xs.w {
                                        continue;
                                    }
                                    acc += w[wbase + (kti * kh + khi) * kw + kwi]
                                        * xc[(ti * xs.h + hi) * xs.w + wi];
                                }
                            }
                        }
                        oslab[(to * os.h + ho) * os.w + wo] += acc;
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn conv_bwd_kernel<T: Scalar>(
    x: &[T],
    xs: Shape5,
    w: &[T],
    spec: &ConvSpec,
    dy: &[T],
    os: Shape5,
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: Option<&mut [T]>,
) {
    let (kt, kh, kw) = spec.kernel;
    let (dt, dh, dw_) = spec.dilation;
    let (pt, ph, pw) = spec.padding;
    let stride1 = spec.stride == (1, 1, 1);
    let cpg = spec.c_in / spec.groups;
    let opg = spec.c_out / spec.groups;
    let x_chw = xs.t * xs.h * xs.w;
    let o_chw = os.t * os.h * os.w;
    let ktap = kt * kh * kw;

    if let Some(db) = db {
        for co in 0..os.c {
            let mut acc = T::zero();
            for n in 0..os.n {
                let base = (n * os.c + co) * o_chw;
                for v in &dy[base..base + o_chw] {
                    acc += *v;
                }
            }
            db[co] = acc;
        }
    }

    // dx via the transposed convolution: pad dy by d*(k-1) - p per axis
    // and run the forward row kernel with flipped weights. Only valid at
    // stride 1 and non-over-padded specs; otherwise scatter directly.
    let flip_pads = (|| {
        let p = (
            dt.checked_mul(kt - 1)?.checked_sub(pt)?,
            dh.checked_mul(kh - 1)?.checked_sub(ph)?,
            dw_.checked_mul(kw - 1)?.checked_sub(pw)?,
        );
        Some(p)
    })();

    if stride1 {
        // dw: parallel over c_out rows; padded input; tap accumulators
        // cover the whole (c_in-in-group x kernel) row at once.
        let (xpad, (_xpt, xph, xpw)) = build_padded(x, xs, spec.padding);
        let xplane = _xpt * xph * xpw;
        let xpad: &[T] = &xpad;
        let x_tstride = xph * xpw;
        let plan = run_plan(spec.kernel, spec.padding);
        let work = os.n * os.c * cpg * ktap * o_chw;
        for_each_slab(dw, cpg * ktap, work, |co, dwrow| {
            let g = co / opg;
            let mut offs: Vec<usize> = Vec::with_capacity(cpg * ktap);
            for cig in 0..cpg {
                let ci = g * cpg + cig;
                for kti in 0..kt {
                    for khi in 0..kh {
                        for kwi in 0..kw {
                            offs.push(
                                ci * xplane
                                    + (kti * dt) * x_tstride
                                    + (khi * dh) * xpw
                                    + kwi * dw_,
                            );
                        }
                    }
                }
            }
            let (rows, run_len): (Vec<(usize, usize)>, usize) = match plan {
                RunPlan::Slab => (vec![(0, 0)], o_chw),
                RunPlan::PerT => (
                    (0..os.t)
                        .map(|to| (to * os.h * os.w, to * x_tstride))
                        .collect(),
                    os.h * os.w,
                ),
                RunPlan::PerTh => {
                    let mut v = Vec::with_capacity(os.t * os.h);
                    for to in 0..os.t {
                        for ho in 0..os.h {
                            v.push(((to * os.h + ho) * os.w, to * x_tstride + ho * xpw));
                        }
                    }
                    (v, os.w)
                }
            };
            for n in 0..os.n {
                let dyc = &dy[(n * os.c + co) * o_chw..(n * os.c + co + 1) * o_chw];
                let xn = &xpad[n * xs.c * xplane..(n + 1) * xs.c * xplane];
                run_dot_taps(dyc, xn, &rows, run_len, &offs, dwrow);
            }
        });
    } else {
        conv_bwd_dw_strided(x, xs, w, spec, dy, os, dw);
    }

    if let Some(dx) = dx {
        match (stride1, flip_pads) {
            (true, Some(fp)) => {
                // dx = conv of the padded dy with per-axis flipped weights
                let (dypad, (_dpt, dph, dpw)) = build_padded(dy, os, fp);
                let dplane = _dpt * dph * dpw;
                let dypad: &[T] = &dypad;
                let d_tstride = dph * dpw;
                let plan = run_plan(spec.kernel, fp);
                let work = os.n * spec.c_in * opg * ktap * o_chw;
                for_each_slab(dx, x_chw, work, |idx, dxslab| {
                    let n = idx / xs.c;
                    let ci = idx % xs.c;
                    let g = ci / cpg;
                    let cig = ci % cpg;
                    let mut taps: Vec<(usize, T)> = Vec::with_capacity(opg * ktap);
                    for cog in 0..opg {
                        let co = g * opg + cog;
                        let wbase = (co * cpg + cig) * ktap;
                        for ktf in 0..kt {
                            for khf in 0..kh {
                                for kwf in 0..kw {
                                    taps.push((
                                        co * dplane
                                            + (ktf * dt) * d_tstride
                                            + (khf * dh) * dpw
                                            + kwf * dw_,
                                        w[wbase
                                            + ((kt - 1 - ktf) * kh + (kh - 1 - khf)) * kw
                                            + (kw - 1 - kwf)],
                                    ));
                                }
                            }
                        }
                    }
                    let dn = &dypad[n * os.c * dplane..(n + 1) * os.c * dplane];
                    match plan {
                        RunPlan::Slab => run_fma_taps(dxslab, dn, &taps),
                        RunPlan::PerT => {
                            let run = xs.h * xs.w;
                            for ti in 0..xs.t {
                                run_fma_taps(
                                    &mut dxslab[ti * run..(ti + 1) * run],
                                    &dn[ti * d_tstride..],
                                    &taps,
                                );
                            }
                        }
                        RunPlan::PerTh => {
                            for ti in 0..xs.t {
                                for hi in 0..xs.h {
                                    let xrow = (ti * xs.h + hi) * xs.w;
                                    run_fma_taps(
                                        &mut dxslab[xrow..xrow + xs.w],
                                        &dn[ti * d_tstride + hi * dpw..],
                                        &taps,
                                    );
                                }
                            }
                        }
                    }
                });
            }
            _ => conv_bwd_dx_scatter(xs, w, spec, dy, os, dx),
        }
    }
}

fn conv_bwd_dw_strided<T: Scalar>(
    x: &[T],
    xs: Shape5,
    _w: &[T],
    spec: &ConvSpec,
    dy: &[T],
    os: Shape5,
    dw: &mut [T],
) {
    let (kt, kh, kw) = spec.kernel;
    let (dt, dh, dw_) = spec.dilation;
    let (pt, ph, pw) = spec.padding;
    let (st, sh_, sw) = spec.stride;
    let cpg = spec.c_in / spec.groups;
    let opg = spec.c_out / spec.groups;
    let x_chw = xs.t * xs.h * xs.w;
    let o_chw = os.t * os.h * os.w;
    let ktap = kt * kh * kw;
    let work = os.n * os.c * cpg * ktap * o_chw;
    for_each_slab(dw, cpg * ktap, work, |co, dwrow| {
        let g = co / opg;
        for n in 0..os.n {
            let dyc = &dy[(n * os.c + co) * o_chw..(n * os.c + co + 1) * o_chw];
            for cig in 0..cpg {
                let ci = g * cpg + cig;
                let xc = &x[(n * xs.c + ci) * x_chw..(n * xs.c + ci + 1) * x_chw];
                for kti in 0..kt {
                    for khi in 0..kh {
                        for kwi in 0..kw {
                            let widx = cig * ktap + (kti * kh + khi) * kw + kwi;
                            let mut acc = T::zero();
                            for to in 0..os.t {
                                let ti = (to * st + kti * dt).wrapping_sub(pt);
                                if ti >= xs.t {
                                    continue;
                                }
                                for ho in 0..os.h {
                                    let hi = (ho * sh_ + khi * dh).wrapping_sub(ph);
                                    if hi >= xs.h {
                                        continue;
                                    }
                                    for wo in 0..os.w {
                                        let wi = (wo * sw + kwi * dw_).wrapping_sub(pw);
                                        if wi >= xs.w {
                                            continue;
                                        }
                                        acc += dyc[(to * os.h + ho) * os.w + wo]
                                            * xc[(ti * xs.h + hi) * xs.w + wi];
                                    }
                                }
                            }
                            dwrow[widx] += acc;
                        }
                    }
                }
            }
        }
    });
}

fn conv_bwd_dx_scatter<T: Scalar>(
    xs: Shape5,
    w: &[T],
    spec: &ConvSpec,
    dy: &[T],
    os: Shape5,
    dx: &mut [T],
) {
    let (kt, kh, kw) = spec.kernel;
    let (dt, dh, dw_) = spec.dilation;
    let (pt, ph, pw) = spec.padding;
    let (st, sh_, sw) = spec.stride;
    let cpg = spec.c_in / spec.groups;
    let opg = spec.c_out / spec.groups;
    let x_chw = xs.t * xs.h * xs.w;
    let o_chw = os.t * os.h * os.w;
    let ktap = kt * kh * kw;
    // parallel over (n, c_in): each slab reads every co of its group
    let work = os.n * spec.c_in * opg * ktap * o_chw;
    for_each_slab(dx, x_chw, work, |idx, dxslab| {
        let n = idx / xs.c;
        let ci = idx % xs.c;
        let g = ci / cpg;
        let cig = ci % cpg;
        for cog in 0..opg {
            let co = g * opg + cog;
            let dyc = &dy[(n * os.c + co) * o_chw..(n * os.c + co + 1) * o_chw];
            let wbase = (co * cpg + cig) * ktap;
            for kti in 0..kt {
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wv = w[wbase + (kti * kh + khi) * kw + kwi];
                        for to in 0..os.t {
                            let ti = (to * st + kti * dt).wrapping_sub(pt);
                            if ti >= xs.t {
                                continue;
                            }
                            for ho in 0..os.h {
                                let hi = (ho * sh_ + khi * dh).wrapping_sub(ph);
                                if hi >= xs.h {
                                    continue;
                                }
                                for wo in 0..os.w {
                                    let wi = (wo * sw + kwi * dw_).wrapping_sub(pw);
                                    if wi >= xs.w {
                                        continue;
                                    }
                                    dxslab[(ti * xs.h + hi) * xs.w + wi] +=
                                        wv * dyc[(to * os.h + ho) * os.w + wo];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Dtype, Shape5, Tensor5};

    fn sh(n: usize, c: usize, t: usize, h: usize, w: usize) -> Shape5 {
        Shape5::new(n, c, t, h, w).unwrap()
    }

    /// Independent reference convolution: plain septuple loop, summation
    /// order (c_in, k_t, k_h, k_w) per output element. Used as the test
    /// oracle for the production kernels.
    pub(crate) fn naive_conv(
        x: &Tensor5,
        weight: &Tensor5,
        bias: Option<&Tensor5>,
        spec: &ConvSpec,
    ) -> Tensor5 {
        let xs = x.shape();
        let os = spec.output_shape(xs).unwrap();
        let (kt, kh, kw) = spec.kernel;
        let (dt, dh, dw) = spec.dilation;
        let (st, sh_, sw) = spec.stride;
        let (pt, ph, pw) = spec.padding;
        let cpg = spec.c_in / spec.groups;
        let opg = spec.c_out / spec.groups;
        let mut out = vec![0.0f64; os.volume()];
        for n in 0..os.n {
            for co in 0..os.c {
                let g = co / opg;
                for to in 0..os.t {
                    for ho in 0..os.h {
                        for wo in 0..os.w {
                            let mut acc = bias.map_or(0.0, |b| b.get(0, co, 0, 0, 0));
                            for cig in 0..cpg {
                                let ci = g * cpg + cig;
                                for a in 0..kt {
                                    for b2 in 0..kh {
                                        for c2 in 0..kw {
                                            let ti = to * st + a * dt;
                                            let hi = ho * sh_ + b2 * dh;
                                            let wi = wo * sw + c2 * dw;
                                            if ti < pt || hi < ph || wi < pw {
                                                continue;
                                            }
                                            let (ti, hi, wi) = (ti - pt, hi - ph, wi - pw);
                                            if ti >= xs.t || hi >= xs.h || wi >= xs.w {
                                                continue;
                                            }
                                            acc += weight.get(co, cig, a, b2, c2)
                                                * x.get(n, ci, ti, hi, wi);
                                        }
                                    }
                                }
                            }
                            out[os.index(n, co, to, ho, wo)] = acc;
                        }
                    }
                }
            }
        }
        Tensor5::from_vec_f64(os, out).unwrap()
    }

    fn max_rel_err(a: &Tensor5, b: &Tensor5) -> f64 {
        let av = a.to_f64_vec();
        let bv = b.to_f64_vec();
        av.iter()
            .zip(&bv)
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
            .fold(0.0, f64::max)
    }

    fn rng_tensor(s: Shape5, seed: u64) -> Tensor5 {
        Tensor5::uniform(s, Dtype::F64, 1.0, seed)
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let x = rng_tensor(sh(1, 1, 3, 4, 5), 1);
        let w = Tensor5::full(sh(1, 1, 1, 1, 1), Dtype::F64, 1.0).unwrap();
        let spec = ConvSpec::new(1, 1, (1, 1, 1));
        let y = conv3d_forward(&x, &w, None, &spec).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn hand_cross_correlation() {
        // input [1,2,3], kernel [1,0,-1], no padding -> [-2]
        let x = Tensor5::from_vec_f64(sh(1, 1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor5::from_vec_f64(sh(1, 1, 1, 1, 3), vec![1.0, 0.0, -1.0]).unwrap();
        let spec = ConvSpec::new(1, 1, (1, 1, 3));
        let y = conv3d_forward(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape().dims(), [1, 1, 1, 1, 1]);
        assert_eq!(y.as_f64().unwrap(), &[-2.0]);
    }

    #[test]
    fn matches_naive_reference_on_random_specs() {
        let cases: Vec<(Shape5, ConvSpec)> = vec![
            (sh(2, 3, 4, 5, 5), ConvSpec::same(3, 4, (3, 3, 3)).unwrap()),
            (sh(1, 2, 3, 6, 6), ConvSpec::new(2, 2, (1, 3, 3)).with_padding((0, 2, 2))),
            (
                sh(1, 4, 4, 7, 7),
                ConvSpec::same(4, 4, (1, 5, 5)).unwrap().with_groups(2),
            ),
            (
                sh(2, 2, 5, 6, 6),
                ConvSpec::new(2, 4, (3, 3, 3)).with_stride((1, 2, 2)).with_padding((1, 1, 1)),
            ),
            (
                sh(1, 1, 6, 9, 9),
                ConvSpec::same(1, 1, (3, 3, 3)).unwrap().with_dilation((1, 3, 3)),
            ),
            (
                sh(1, 6, 2, 5, 5),
                ConvSpec::same(6, 6, (1, 3, 3)).unwrap().with_groups(6),
            ),
            (sh(2, 3, 4, 4, 4), ConvSpec::new(3, 5, (2, 2, 2)).with_stride((2, 1, 2))),
        ];
        for (i, (xs, spec)) in cases.into_iter().enumerate() {
            let x = rng_tensor(xs, 100 + i as u64);
            let w = rng_tensor(spec.weight_shape().unwrap(), 200 + i as u64);
            let b = rng_tensor(spec.bias_shape().unwrap(), 300 + i as u64);
            let got = conv3d_forward(&x, &w, Some(&b), &spec).unwrap();
            let want = naive_conv(&x, &w, Some(&b), &spec);
            let err = max_rel_err(&got, &want);
            assert!(err < 1e-12, "case {i}: max rel err {err}");
        }
    }

    #[test]
    fn spatial_conv_equals_conv3d_bit_identically() {
        let x = Tensor5::uniform(sh(2, 3, 4, 6, 6), Dtype::F32, 1.0, 7);
        let spec = ConvSpec::same(3, 5, (1, 3, 3)).unwrap();
        let w = Tensor5::uniform(spec.weight_shape().unwrap(), Dtype::F32, 0.5, 8);
        let b = Tensor5::uniform(spec.bias_shape().unwrap(), Dtype::F32, 0.5, 9);
        let a = conv3d_forward(&x, &w, Some(&b), &spec).unwrap();
        let s = spatial_conv(&x, &w, Some(&b), (1, 1), (1, 1)).unwrap();
        assert_eq!(a, s);
    }

    #[test]
    fn spatial_conv_time_independence() {
        // constant-in-time input -> every time slice transformed identically
        let base = Tensor5::uniform(sh(1, 2, 1, 5, 5), Dtype::F64, 1.0, 11);
        let x = {
            let s = sh(1, 2, 3, 5, 5);
            Tensor5::from_fn(s, Dtype::F64, |i| {
                let w = i % 5;
                let h = (i / 5) % 5;
                let c = i / 75;
                base.get(0, c % 2, 0, h, w)
            })
            .unwrap()
        };
        let spec = ConvSpec::same(2, 2, (1, 3, 3)).unwrap();
        let w = rng_tensor(spec.weight_shape().unwrap(), 12);
        let y = conv3d_forward(&x, &w, None, &spec).unwrap();
        for t in 1..3 {
            for c in 0..2 {
                for hh in 0..5 {
                    for ww in 0..5 {
                        assert_eq!(y.get(0, c, t, hh, ww), y.get(0, c, 0, hh, ww));
                    }
                }
            }
        }
    }

    #[test]
    fn spatial_averaging_kernel_constant_interior() {
        let x = Tensor5::full(sh(1, 1, 1, 6, 6), Dtype::F64, 3.0).unwrap();
        let w = Tensor5::full(sh(1, 1, 1, 3, 3), Dtype::F64, 1.0 / 9.0).unwrap();
        let y = spatial_conv(&x, &w, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(y.shape().dims(), [1, 1, 1, 4, 4]);
        for v in y.as_f64().unwrap() {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn temporal_delta_kernel_is_identity() {
        let x = rng_tensor(sh(1, 2, 5, 3, 3), 13);
        let w = Tensor5::from_vec_f64(sh(2, 2, 3, 1, 1), {
            // per-output-channel delta at k_t=1 picking its own channel
            let mut v = vec![0.0; 2 * 2 * 3];
            v[0 * 6 + 0 * 3 + 1] = 1.0; // out0 <- in0
            v[1 * 6 + 1 * 3 + 1] = 1.0; // out1 <- in1
            v
        })
        .unwrap();
        let y = temporal_conv(&x, &w, None, 1).unwrap();
        let diff = max_rel_err(&y, &x);
        assert!(diff < 1e-15);
    }

    #[test]
    fn temporal_difference_kernel() {
        // series [1,2,4], cross-correlation with kernel [-1, 1], no padding,
        // gives forward differences [1, 2].
        let x = Tensor5::from_vec_f64(sh(1, 1, 3, 1, 1), vec![1.0, 2.0, 4.0]).unwrap();
        let w = Tensor5::from_vec_f64(sh(1, 1, 2, 1, 1), vec![-1.0, 1.0]).unwrap();
        let y = temporal_conv(&x, &w, None, 0).unwrap();
        assert_eq!(y.as_f64().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn temporal_conv_spatially_constant_input() {
        // spatially-constant input -> every pixel's series filtered identically
        let series = [0.3, -1.2, 0.7, 2.0];
        let x = Tensor5::from_fn(sh(1, 1, 4, 3, 3), Dtype::F64, |i| series[i / 9]).unwrap();
        let w = rng_tensor(sh(1, 1, 3, 1, 1), 14);
        let y = temporal_conv(&x, &w, None, 1).unwrap();
        for t in 0..4 {
            let v0 = y.get(0, 0, t, 0, 0);
            for hh in 0..3 {
                for ww in 0..3 {
                    assert_eq!(y.get(0, 0, t, hh, ww), v0);
                }
            }
        }
    }

    #[test]
    fn linearity_in_input() {
        let xs = sh(1, 2, 3, 5, 5);
        let spec = ConvSpec::same(2, 3, (3, 3, 3)).unwrap();
        let w = rng_tensor(spec.weight_shape().unwrap(), 21);
        let x1 = rng_tensor(xs, 22);
        let x2 = rng_tensor(xs, 23);
        let (a, b) = (0.7, -1.3);
        let lhs = conv3d_forward(
            &x1.scalar_mul(a).unwrap().add(&x2.scalar_mul(b).unwrap()).unwrap(),
            &w,
            None,
            &spec,
        )
        .unwrap();
        let rhs = conv3d_forward(&x1, &w, None, &spec)
            .unwrap()
            .scalar_mul(a)
            .unwrap()
            .add(
                &conv3d_forward(&x2, &w, None, &spec)
                    .unwrap()
                    .scalar_mul(b)
                    .unwrap(),
            )
            .unwrap();
        assert!(max_rel_err(&lhs, &rhs) < 1e-6);
    }

    #[test]
    fn grouped_full_depthwise_equals_per_channel_filtering() {
        let c = 4;
        let xs = sh(1, c, 3, 5, 5);
        let x = rng_tensor(xs, 31);
        let spec = ConvSpec::same(c, c, (1, 3, 3)).unwrap().with_groups(c);
        let w = rng_tensor(spec.weight_shape().unwrap(), 32);
        let y = conv3d_forward(&x, &w, None, &spec).unwrap();
        // filter each channel independently with its own 1-channel conv
        for ch in 0..c {
            let xc = crate::tensor::slice_channels(&x, ch, 1).unwrap();
            let wc = Tensor5::from_fn(sh(1, 1, 1, 3, 3), Dtype::F64, |i| {
                w.get(ch, 0, 0, (i / 3) % 3, i % 3)
            })
            .unwrap();
            let yc = conv3d_forward(&xc, &wc, None, &ConvSpec::same(1, 1, (1, 3, 3)).unwrap())
                .unwrap();
            for t in 0..3 {
                for hh in 0..5 {
                    for ww in 0..5 {
                        let a = y.get(0, ch, t, hh, ww);
                        let b = yc.get(0, 0, t, hh, ww);
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn separable_kernel_decomposition_oracle() {
        // full kernel w[co,ci,kt,kh,kw] = a[co,kt] * s[co,ci,kh,kw]
        // == spatial conv (c_in->c_out) then depthwise temporal conv.
        for case in 0..5u64 {
            let (c_in, c_out, kt, khw) = (2, 3, 3, 3);
            let xs = sh(1, c_in, 5, 6, 6);
            let x = rng_tensor(xs, 40 + case);
            let a = Tensor5::uniform(sh(c_out, 1, kt, 1, 1), Dtype::F64, 1.0, 50 + case);
            let s = Tensor5::uniform(sh(c_out, c_in, 1, khw, khw), Dtype::F64, 1.0, 60 + case);
            let full_w = Tensor5::from_fn(
                sh(c_out, c_in, kt, khw, khw),
                Dtype::F64,
                |i| {
                    let kw = i % khw;
                    let kh = (i / khw) % khw;
                    let ktt = (i / (khw * khw)) % kt;
                    let ci = (i / (khw * khw * kt)) % c_in;
                    let co = i / (khw * khw * kt * c_in);
                    a.get(co, 0, ktt, 0, 0) * s.get(co, ci, 0, kh, kw)
                },
            )
            .unwrap();
            let full_spec = ConvSpec::same(c_in, c_out, (kt, khw, khw)).unwrap();
            let dense = conv3d_forward(&x, &full_w, None, &full_spec).unwrap();

            let mid = spatial_conv(&x, &s, None, (1, 1), (1, 1)).unwrap();
            let pipeline = temporal_conv(&mid, &a, None, 1).unwrap();
            let err = max_rel_err(&dense, &pipeline);
            assert!(err < 1e-6, "case {case}: err {err}");
        }
    }

    #[test]
    fn flops_full_hand_cases() {
        assert_eq!(flops_full(4, 4, 2, 3, 3, 3, 3).unwrap(), 2592);
        assert_eq!(flops_full(1, 1, 7, 9, 1, 1, 1).unwrap(), 63);
        assert_eq!(
            flops_full(252, 252, 64, 64, 3, 3, 3).unwrap(),
            252u128 * 252 * 64 * 64 * 27
        );
        assert!(flops_full(0, 4, 2, 3, 3, 3, 3).is_err());
    }

    #[test]
    fn flops_decomposed_hand_cases() {
        assert_eq!(flops_decomposed(4, 4, 2, 3, 3, 3, 3).unwrap(), 1152);
        // ratio for a 3x3x3 kernel is 12/27
        let full = flops_full(10, 10, 8, 8, 3, 3, 3).unwrap();
        let dec = flops_decomposed(10, 10, 8, 8, 3, 3, 3).unwrap();
        assert_eq!(dec * 27, full * 12);
        // k_t = 1 substitution
        assert_eq!(
            flops_decomposed(5, 6, 2, 3, 1, 7, 7).unwrap(),
            5 * 6 * 2 * 3 * (1 + 49)
        );
    }

    #[test]
    fn flops_overflow_reported() {
        assert!(flops_full(u64::MAX, u64::MAX, u64::MAX, u64::MAX, 2, 2, 2).is_err());
    }

    #[test]
    fn param_count_cases() {
        let spec = ConvSpec::new(1, 1, (1, 1, 1));
        assert_eq!(param_count(&spec, true).unwrap(), 2);

        let spec = ConvSpec::new(16, 32, (3, 3, 3));
        assert_eq!(param_count(&spec, false).unwrap(), 13824);

        let grouped = ConvSpec::new(16, 32, (3, 3, 3)).with_groups(4);
        assert_eq!(
            param_count(&grouped, false).unwrap() * 4,
            param_count(&spec, false).unwrap()
        );
    }

    #[test]
    fn effective_kernel_larger_than_padded_input_rejected() {
        let spec = ConvSpec::new(1, 1, (1, 9, 9));
        assert!(spec.output_shape(sh(1, 1, 1, 4, 4)).is_err());
    }

    #[test]
    fn backward_matches_naive_finite_differences_spot() {
        // spot-check dw and dx against central differences on a tiny case
        let xs = sh(1, 2, 3, 4, 4);
        let spec = ConvSpec::same(2, 2, (3, 3, 3)).unwrap().with_groups(1);
        let x = rng_tensor(xs, 70);
        let w = rng_tensor(spec.weight_shape().unwrap(), 71);
        let dy = rng_tensor(spec.output_shape(xs).unwrap(), 72);

        let grads = conv3d_backward(&x, &w, &spec, &dy, true, true).unwrap();
        let h = 1e-6;

        // loss = sum(conv(x, w) * dy)
        let loss = |x: &Tensor5, w: &Tensor5| -> f64 {
            let y = conv3d_forward(x, w, None, &spec).unwrap();
            y.to_f64_vec()
                .iter()
                .zip(dy.to_f64_vec().iter())
                .map(|(a, b)| a * b)
                .sum()
        };

        // a few weight coordinates
        for &i in &[0usize, 5, 17, 40, 53] {
            let mut v = w.to_f64_vec();
            v[i] += h;
            let wp = Tensor5::from_vec_f64(w.shape(), v.clone()).unwrap();
            v[i] -= 2.0 * h;
            let wm = Tensor5::from_vec_f64(w.shape(), v).unwrap();
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
            let an = grads.dw.to_f64_vec()[i];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-5,
                "dw[{i}]: fd {fd} vs {an}"
            );
        }
        // a few input coordinates
        let dx = grads.dx.unwrap();
        for &i in &[0usize, 13, 37, 80] {
            let mut v = x.to_f64_vec();
            v[i] += h;
            let xp = Tensor5::from_vec_f64(x.shape(), v.clone()).unwrap();
            v[i] -= 2.0 * h;
            let xm = Tensor5::from_vec_f64(x.shape(), v).unwrap();
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
            let an = dx.to_f64_vec()[i];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-5,
                "dx[{i}]: fd {fd} vs {an}"
            );
        }
    }

    /// Walks the reference convolution loop nest and counts one MAC per
    /// kernel tap (taps reading the zero-padded halo included, matching
    /// the closed-form convention).
    fn count_macs(xs: Shape5, spec: &ConvSpec) -> u128 {
        let os = spec.output_shape(xs).unwrap();
        let cpg = spec.c_in / spec.groups;
        let (kt, kh, kw) = spec.kernel;
        let mut macs: u128 = 0;
        for _n in 0..os.n {
            for _co in 0..os.c {
                for _to in 0..os.t {
                    for _ho in 0..os.h {
                        for _wo in 0..os.w {
                            for _cig in 0..cpg {
                                macs += (kt * kh * kw) as u128;
                            }
                        }
                    }
                }
            }
        }
        macs
    }

    #[test]
    fn flops_match_mac_count_of_reference_conv() {
        // dense 3D conv on a single time step, stride 1, same padding
        let (h, w, c_in, c_out, kt, kh, kw) = (4u64, 5u64, 2u64, 3u64, 3u64, 3u64, 3u64);
        let spec = ConvSpec::same(c_in as usize, c_out as usize, (1, kh as usize, kw as usize))
            .unwrap();
        // 2D spatial case (k_t = 1): closed form with k_t=1 on one frame
        let xs = sh(1, c_in as usize, 1, h as usize, w as usize);
        assert_eq!(
            count_macs(xs, &spec),
            flops_full(h, w, c_in, c_out, 1, kh, kw).unwrap()
        );

        // decomposed pipeline: spatial (1,kh,kw) then temporal (kt,1,1),
        // counted on one frame to match the per-frame closed form
        let spatial = ConvSpec::same(c_in as usize, c_out as usize, (1, kh as usize, kw as usize))
            .unwrap();
        let temporal =
            ConvSpec::same(c_out as usize, c_out as usize, (kt as usize, 1, 1)).unwrap();
        let mid = spatial.output_shape(xs).unwrap();
        // temporal stage mixes c_out -> c_out, so its per-frame MACs are
        // H*W*C_out*C_out*K_t; Eq-style decomposed form books the pipeline
        // with c_in = c_out at both stages:
        let both = count_macs(xs, &spatial) * (c_out as u128) / (c_in as u128)
            + count_macs(mid, &temporal);
        assert_eq!(
            both,
            flops_decomposed(h, w, c_out, c_out, kt, kh, kw).unwrap()
        );
    }
}
