//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] is both the value arena of one forward pass and the ordered
//! record of executed operations. Each op method runs eagerly, appends its
//! record, and returns a [`ValueId`] handle. [`Tape::backward`] walks the
//! records in exact reverse order, accumulating gradients per value;
//! values loaded from a [`ParamStore`] additionally accumulate into the
//! store's gradient buffers. A tape can be consumed by backward once.

use crate::conv::{conv3d_backward, conv3d_forward, ConvSpec};
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{dropout_mask, sigmoid_scalar, Axis, Mode, Shape5, Tensor5};

/// Handle to a value held by a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Clone, Copy, Debug)]
enum Source {
    /// Caller-provided leaf (input data, targets).
    Input,
    /// Leaf loaded from a parameter store; index into the store.
    Param(usize),
    /// Produced by a recorded operation.
    Op,
}

enum Node {
    Conv {
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        spec: ConvSpec,
        out: ValueId,
    },
    Relu {
        x: ValueId,
        out: ValueId,
    },
    Sigmoid {
        x: ValueId,
        out: ValueId,
    },
    Softmax {
        x: ValueId,
        axis: Axis,
        out: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
        out: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
        out: ValueId,
    },
    AddScaled {
        a: ValueId,
        b: ValueId,
        alpha: f64,
        out: ValueId,
    },
    MaxPoolHw {
        x: ValueId,
        choice: Vec<u8>,
        out: ValueId,
    },
    UpsampleNearestHw {
        x: ValueId,
        out: ValueId,
    },
    ConcatC {
        xs: Vec<ValueId>,
        out: ValueId,
    },
    SplitC {
        x: ValueId,
        outs: Vec<ValueId>,
    },
    CropCenterHw {
        x: ValueId,
        out: ValueId,
    },
    FoldCt {
        x: ValueId,
        out: ValueId,
    },
    Dropout {
        x: ValueId,
        mask: Tensor5,
        out: ValueId,
    },
    WeightedSum {
        x: ValueId,
        weights: Tensor5,
        out: ValueId,
    },
    BceWithLogits {
        z: ValueId,
        y: ValueId,
        pos_weight: f64,
        out: ValueId,
    },
}

/// Gradients w.r.t. tape values (inputs and intermediates), returned by
/// [`Tape::backward`]. Parameter gradients go to the store instead.
pub struct Gradients {
    grads: Vec<Option<Tensor5>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Tensor5> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor5>,
    sources: Vec<Source>,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, t: Tensor5, src: Source) -> ValueId {
        self.values.push(t);
        self.sources.push(src);
        ValueId(self.values.len() - 1)
    }

    /// Registers a leaf input value.
    pub fn input(&mut self, t: Tensor5) -> ValueId {
        self.push(t, Source::Input)
    }

    /// Loads a parameter from the store; its gradient will accumulate into
    /// the store's buffer for that parameter.
    pub fn param(&mut self, store: &ParamStore, idx: usize) -> ValueId {
        self.push(store.value(idx).clone(), Source::Param(idx))
    }

    pub fn value(&self, id: ValueId) -> &Tensor5 {
        &self.values[id.0]
    }

    pub fn shape(&self, id: ValueId) -> Shape5 {
        self.values[id.0].shape()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn conv3d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        spec: ConvSpec,
    ) -> Result<ValueId> {
        let out = conv3d_forward(
            self.value(x),
            self.value(w),
            b.map(|id| self.value(id)),
            &spec,
        )?;
        let out = self.push(out, Source::Op);
        self.nodes.push(Node::Conv { x, w, b, spec, out });
        Ok(out)
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        let out = self.value(x).relu()?;
        let out = self.push(out, Source::Op);
        self.nodes.push(Node::Relu { x, out });
        Ok(out)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        let out = self.value(x).sigmoid()?;
        let out = self.push(out, Source::Op);
        self.nodes.push(Node::Sigmoid { x, out });
        Ok(out)
    }

    pub fn softmax_axis(&mut self, x: ValueId, axis: Axis) -> Result<ValueId> {
        let out = self.value(x).softmax_axis(axis)?;
        let out = self.push(out, Source::Op);
        self.nodes.push(Node::Softmax { x, axis, out });
        Ok(out)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = self.value(a).add(self.value(b))?;
        let out = self.push(out, Source::Op);
        self.nodes.push(Node::Add { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = self.value(a).mul(self.value(b))?;
        let out = self.push(out, Source::Op);
        self.nodes.push(Node::Mul { a, b, out });
        Ok(out)
    }

    /// `a + alpha * b`.
    pub fn add_scaled(&mut self, a: ValueId, b: ValueId, alpha: f64) -> Result<ValueId> {
        let out = self.value(a).add(&self.value(b).scalar_mul(alpha)?)?;
        let out = self.push(out, Source::Op);
        self.nodes.push(Node::AddScaled { a, b, alpha, out });
        Ok(out)
    }

    /// Spatial max pooling with a 1x2x2 window and stride (1, 2, 2).
    /// Requires even H and W.
    pub fn max_pool_hw(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.shape(x);
        if xs.h % 2 != 0 || xs.w % 2 != 0 {
            return Err(Error::InvalidShape(format!(
                "max_pool_hw requires even spatial extents, got {}x{}",
                xs.h, xs.w
            )));
        }
        let os = Shape5::new(xs.n, xs.c, xs.t, xs.h / 2, xs.w / 2)?;
        let xt = self.value(x);
        let mut choice = vec![0u8; os.volume()];
        let out = pool_forward(xt, os, &mut choice);
        let out = self.push(out, Source::Op);
        self.nodes.push(Node::MaxPoolHw { x, choice, out });
        Ok(out)
    }

    /// Nearest-neighbor 2x spatial upsampling.
    pub fn upsample_nearest_hw(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.shape(x);
        let os = Shape5::new(xs.n, xs.c, xs.t, xs.h * 2, xs.w * 2)?;
        let out = upsample_forward(self.value(x), os);
        let out = self.push(out, Source::Op);
        self.nodes.push(Node::UpsampleNearestHw { x, out });
        Ok(out)
    }

    pub fn concat_c(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        let parts: Vec<&Tensor5> = xs.iter().map(|&id| self.value(id)).collect();
        let out = crate::tensor::concat_channels(&parts)?;
        let out = self.push(out, Source::Op);
        self.nodes.push(Node::ConcatC {
            xs: xs.to_vec(),
            out,
        });
        Ok(out)
    }

    /// Splits the channel axis into `g` contiguous even groups.
    pub fn split_c(&mut self, x: ValueId, g: usize) -> Result<Vec<ValueId>> {
        let xs = self.shape(x);
        if g == 0 || xs.c % g != 0 {
            return Err(Error::InvalidArg(format!(
                "channel count {} not divisible by group count {g}",
                xs.c
            )));
        }
        let per = xs.c / g;
        let mut outs = Vec::with_capacity(g);
        for i in 0..g {
            let part = crate::tensor::slice_channels(self.value(x), i * per, per)?;
            outs.push(self.push(part, Source::Op));
        }
        self.nodes.push(Node::SplitC {
            x,
            outs: outs.clone(),
        });
        Ok(outs)
    }

    pub fn crop_center_hw(&mut self, x: ValueId, factor: usize) -> Result<ValueId> {
        let out = self.value(x).crop_center_spatial(factor)?;
        let out = self.push(out, Source::Op);
        self.nodes.push(Node::CropCenterHw { x, out });
        Ok(out)
    }

    pub fn fold_ct(&mut self, x: ValueId) -> Result<ValueId> {
        let out = self.value(x).fold_channels_into_time()?;
        let out = self.push(out, Source::Op);
        self.nodes.push(Node::FoldCt { x, out });
        Ok(out)
    }

    pub fn dropout(&mut self, x: ValueId, rate: f64, mode: Mode, seed: u64) -> Result<ValueId> {
        let xt = self.value(x);
        match dropout_mask(xt.shape(), xt.dtype(), rate, mode, seed)? {
            None => Ok(x), // identity: no node recorded
            Some(mask) => {
                let out = xt.mul(&mask)?;
                let out = self.push(out, Source::Op);
                self.nodes.push(Node::Dropout { x, mask, out });
                Ok(out)
            }
        }
    }

    /// Scalar `sum(x * weights)`; the generic projection loss used by the
    /// gradient checks.
    pub fn weighted_sum(&mut self, x: ValueId, weights: &Tensor5) -> Result<ValueId> {
        let xt = self.value(x);
        if weights.shape() != xt.shape() || weights.dtype() != xt.dtype() {
            return Err(Error::shape_mismatch(xt.shape(), weights.shape()));
        }
        let s: f64 = xt
            .to_f64_vec()
            .iter()
            .zip(weights.to_f64_vec().iter())
            .map(|(a, b)| a * b)
            .sum();
        let out = Tensor5::full(Shape5::new(1, 1, 1, 1, 1)?, xt.dtype(), s)?;
        let out = self.push(out, Source::Op);
        self.nodes.push(Node::WeightedSum {
            x,
            weights: weights.clone(),
            out,
        });
        Ok(out)
    }

    /// Mean binary cross-entropy on logits with a positive-class weight,
    /// in the numerically stable softplus form. `y` must be binary.
    pub fn bce_with_logits(&mut self, z: ValueId, y: ValueId, pos_weight: f64) -> Result<ValueId> {
        let loss = crate::train::bce_with_logits_value(self.value(z), self.value(y), pos_weight)?;
        let out = Tensor5::full(Shape5::new(1, 1, 1, 1, 1)?, self.value(z).dtype(), loss)?;
        let out = self.push(out, Source::Op);
        self.nodes.push(Node::BceWithLogits {
            z,
            y,
            pos_weight,
            out,
        });
        Ok(out)
    }

    /// Reverse pass from a scalar loss value. Parameter gradients
    /// accumulate into `store`; gradients of inputs and intermediates are
    /// returned. Consumes the tape's ability to run backward again.
    pub fn backward(&mut self, loss: ValueId, store: &mut ParamStore) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let loss_t = self.value(loss);
        if loss_t.len() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward requires a scalar loss, got shape {}",
                loss_t.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor5>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor5::full(loss_t.shape(), loss_t.dtype(), 1.0)?);

        for node in self.nodes.iter().rev() {
            self.backward_node(node, &mut grads)?;
        }

        for (i, src) in self.sources.iter().enumerate() {
            if let (Source::Param(p), Some(g)) = (src, &grads[i]) {
                if *p >= store.len() || store.value(*p).shape() != g.shape() {
                    return Err(Error::InvalidArg(format!(
                        "parameter {p} does not match the store used in forward"
                    )));
                }
                store.accumulate_grad(*p, g)?;
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, grads: &mut [Option<Tensor5>]) -> Result<()> {
        match node {
            Node::Conv { x, w, b, spec, out } => {
                let Some(dy) = grads[out.0].clone() else {
                    return Ok(());
                };
                let cg =
                    conv3d_backward(self.value(*x), self.value(*w), spec, &dy, true, b.is_some())?;
                accumulate(grads, *x, cg.dx.expect("dx requested"))?;
                accumulate(grads, *w, cg.dw)?;
                if let (Some(bid), Some(db)) = (b, cg.db) {
                    accumulate(grads, *bid, db)?;
                }
            }
            Node::Relu { x, out } => {
                let Some(dy) = grads[out.0].as_ref() else {
                    return Ok(());
                };
                let xt = self.value(*x);
                let dx: Vec<f64> = xt
                    .to_f64_vec()
                    .iter()
                    .zip(dy.to_f64_vec().iter())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, tensor_like(xt, dx)?)?;
            }
            Node::Sigmoid { x, out } => {
                let Some(dy) = grads[out.0].as_ref() else {
                    return Ok(());
                };
                let dx: Vec<f64> = self
                    .value(*out)
                    .to_f64_vec()
                    .iter()
                    .zip(dy.to_f64_vec().iter())
                    .map(|(&sv, &g)| g * sv * (1.0 - sv))
                    .collect();
                accumulate(grads, *x, tensor_like(self.value(*x), dx)?)?;
            }
            Node::Softmax { x, axis, out } => {
                let Some(dy) = grads[out.0].as_ref() else {
                    return Ok(());
                };
                let dx = softmax_backward(self.value(*out), dy, *axis)?;
                accumulate(grads, *x, dx)?;
            }
            Node::Add { a, b, out } => {
                let Some(dy) = grads[out.0].clone() else {
                    return Ok(());
                };
                accumulate(grads, *a, dy.clone())?;
                accumulate(grads, *b, dy)?;
            }
            Node::Mul { a, b, out } => {
                let Some(dy) = grads[out.0].clone() else {
                    return Ok(());
                };
                let da = dy.mul(self.value(*b))?;
                let db = dy.mul(self.value(*a))?;
                accumulate(grads, *a, da)?;
                accumulate(grads, *b, db)?;
            }
            Node::AddScaled { a, b, alpha, out } => {
                let Some(dy) = grads[out.0].clone() else {
                    return Ok(());
                };
                accumulate(grads, *a, dy.clone())?;
                accumulate(grads, *b, dy.scalar_mul(*alpha)?)?;
            }
            Node::MaxPoolHw { x, choice, out } => {
                let Some(dy) = grads[out.0].as_ref() else {
                    return Ok(());
                };
                let dx = pool_backward(self.value(*x).shape(), dy, choice)?;
                accumulate(grads, *x, dx)?;
            }
            Node::UpsampleNearestHw { x, out } => {
                let Some(dy) = grads[out.0].as_ref() else {
                    return Ok(());
                };
                let dx = upsample_backward(self.value(*x).shape(), dy)?;
                accumulate(grads, *x, dx)?;
            }
            Node::ConcatC { xs, out } => {
                let Some(dy) = grads[out.0].clone() else {
                    return Ok(());
                };
                let mut c0 = 0usize;
                for &id in xs {
                    let c = self.value(id).shape().c;
                    let slice = crate::tensor::slice_channels(&dy, c0, c)?;
                    accumulate(grads, id, slice)?;
                    c0 += c;
                }
            }
            Node::SplitC { x, outs } => {
                let dtype = self.value(*x).dtype();
                let parts: Vec<Tensor5> = outs
                    .iter()
                    .map(|&id| match &grads[id.0] {
                        Some(g) => g.clone(),
                        None => Tensor5::zeros(self.value(id).shape(), dtype),
                    })
                    .collect();
                let refs: Vec<&Tensor5> = parts.iter().collect();
                let dx = crate::tensor::concat_channels(&refs)?;
                accumulate(grads, *x, dx)?;
            }
            Node::CropCenterHw { x, out } => {
                let Some(dy) = grads[out.0].as_ref() else {
                    return Ok(());
                };
                let xs = self.value(*x).shape();
                let dx = dy.pad_center_spatial(xs.h, xs.w)?;
                accumulate(grads, *x, dx)?;
            }
            Node::FoldCt { x, out } => {
                let Some(dy) = grads[out.0].as_ref() else {
                    return Ok(());
                };
                let xs = self.value(*x).shape();
                let dx = dy.unfold_time_into_channels(xs.c)?;
                accumulate(grads, *x, dx)?;
            }
            Node::Dropout { x, mask, out } => {
                let Some(dy) = grads[out.0].as_ref() else {
                    return Ok(());
                };
                accumulate(grads, *x, dy.mul(mask)?)?;
            }
            Node::WeightedSum { x, weights, out } => {
                let Some(dy) = grads[out.0].as_ref() else {
                    return Ok(());
                };
                let g = dy.get(0, 0, 0, 0, 0);
                accumulate(grads, *x, weights.scalar_mul(g)?)?;
            }
            Node::BceWithLogits {
                z,
                y,
                pos_weight,
                out,
            } => {
                let Some(dy) = grads[out.0].as_ref() else {
                    return Ok(());
                };
                let g = dy.get(0, 0, 0, 0, 0);
                let zt = self.value(*z);
                let zv = zt.to_f64_vec();
                let yv = self.value(*y).to_f64_vec();
                let count = zv.len() as f64;
                let pw = *pos_weight;
                let dz: Vec<f64> = zv
                    .iter()
                    .zip(&yv)
                    .map(|(&zi, &yi)| {
                        let s = sigmoid_scalar(zi);
                        g * (s * (1.0 + (pw - 1.0) * yi) - pw * yi) / count
                    })
                    .collect();
                accumulate(grads, *z, tensor_like(zt, dz)?)?;
            }
        }
        Ok(())
    }
}

fn tensor_like(reference: &Tensor5, data: Vec<f64>) -> Result<Tensor5> {
    Ok(Tensor5::from_vec_f64(reference.shape(), data)?.cast(reference.dtype()))
}

fn accumulate(grads: &mut [Option<Tensor5>], id: ValueId, g: Tensor5) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn pool_forward(x: &Tensor5, os: Shape5, choice: &mut [u8]) -> Tensor5 {
    let xs = x.shape();
    let xv = x.to_f64_vec();
    let mut ov = vec![0.0f64; os.volume()];
    for nct in 0..xs.n * xs.c * xs.t {
        let xb = nct * xs.h * xs.w;
        let ob = nct * os.h * os.w;
        for ho in 0..os.h {
            for wo in 0..os.w {
                let base = xb + (2 * ho) * xs.w + 2 * wo;
                let cand = [xv[base], xv[base + 1], xv[base + xs.w], xv[base + xs.w + 1]];
                let mut best = 0usize;
                for k in 1..4 {
                    if cand[k] > cand[best] {
                        best = k;
                    }
                }
                ov[ob + ho * os.w + wo] = cand[best];
                choice[ob + ho * os.w + wo] = best as u8;
            }
        }
    }
    Tensor5::from_vec_f64(os, ov).expect("pool output").cast(x.dtype())
}

fn pool_backward(xs: Shape5, dy: &Tensor5, choice: &[u8]) -> Result<Tensor5> {
    let os = dy.shape();
    let dyv = dy.to_f64_vec();
    let mut dx = vec![0.0f64; xs.volume()];
    for nct in 0..xs.n * xs.c * xs.t {
        let xb = nct * xs.h * xs.w;
        let ob = nct * os.h * os.w;
        for ho in 0..os.h {
            for wo in 0..os.w {
                let k = choice[ob + ho * os.w + wo] as usize;
                let (dh, dw) = (k / 2, k % 2);
                dx[xb + (2 * ho + dh) * xs.w + 2 * wo + dw] += dyv[ob + ho * os.w + wo];
            }
        }
    }
    Ok(Tensor5::from_vec_f64(xs, dx)?.cast(dy.dtype()))
}

fn upsample_forward(x: &Tensor5, os: Shape5) -> Tensor5 {
    let xs = x.shape();
    let xv = x.to_f64_vec();
    let mut ov = vec![0.0f64; os.volume()];
    for nct in 0..xs.n * xs.c * xs.t {
        let xb = nct * xs.h * xs.w;
        let ob = nct * os.h * os.w;
        for ho in 0..os.h {
            for wo in 0..os.w {
                ov[ob + ho * os.w + wo] = xv[xb + (ho / 2) * xs.w + wo / 2];
            }
        }
    }
    Tensor5::from_vec_f64(os, ov)
        .expect("upsample output")
        .cast(x.dtype())
}

fn upsample_backward(xs: Shape5, dy: &Tensor5) -> Result<Tensor5> {
    let os = dy.shape();
    let dyv = dy.to_f64_vec();
    let mut dx = vec![0.0f64; xs.volume()];
    for nct in 0..xs.n * xs.c * xs.t {
        let xb = nct * xs.h * xs.w;
        let ob = nct * os.h * os.w;
        for ho in 0..os.h {
            for wo in 0..os.w {
                dx[xb + (ho / 2) * xs.w + wo / 2] += dyv[ob + ho * os.w + wo];
            }
        }
    }
    Ok(Tensor5::from_vec_f64(xs, dx)?.cast(dy.dtype()))
}

fn softmax_backward(s: &Tensor5, dy: &Tensor5, axis: Axis) -> Result<Tensor5> {
    let shape = s.shape();
    let sv = s.to_f64_vec();
    let dyv = dy.to_f64_vec();
    let mut dx = vec![0.0f64; shape.volume()];
    let (len, stride) = match axis {
        Axis::Channel => (shape.c, shape.t * shape.h * shape.w),
        Axis::Time => (shape.t, shape.h * shape.w),
    };
    let mut lane = |base: usize| {
        let mut dot = 0.0;
        for k in 0..len {
            let i = base + k * stride;
            dot += dyv[i] * sv[i];
        }
        for k in 0..len {
            let i = base + k * stride;
            dx[i] = sv[i] * (dyv[i] - dot);
        }
    };
    match axis {
        Axis::Channel => {
            for n in 0..shape.n {
                for thw in 0..shape.t * shape.h * shape.w {
                    lane(n * shape.c * stride + thw);
                }
            }
        }
        Axis::Time => {
            for nc in 0..shape.n * shape.c {
                for hw in 0..shape.h * shape.w {
                    lane(nc * shape.t * stride + hw);
                }
            }
        }
    }
    Ok(Tensor5::from_vec_f64(shape, dx)?.cast(s.dtype()))
}
