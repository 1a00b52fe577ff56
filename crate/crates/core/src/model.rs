//! Full model assembly: an encoder/decoder trunk of aggregation blocks
//! with spatial-only down/upsampling and skip concatenation, a 1x1x1
//! channel-reduction head, center crop and channel-time fold producing
//! the early prediction, and the refinement block producing the final
//! prediction. Both outputs are logits.
//!
//! Also here: the named parameter store (the unit of checkpointing and
//! optimization), deterministic initialization, per-layer FLOPs and
//! parameter accounting, and the STAR checkpoint format binding.

use crate::blocks::{
    lcam_forward, lcam_register, str_forward, str_register, AttentionNorm, LcamConfig, StrConfig,
};
use crate::conv::{flops_decomposed, flops_full, param_count, ConvSpec};
use crate::error::{Error, Result};
use crate::tape::{Tape, ValueId};
use crate::tensor::{Dtype, Mode, Shape5, Tensor5};
use std::collections::HashMap;
use std::path::Path;

/// Named collection of learnable tensors plus their gradient buffers.
/// Iteration order is registration order and is deterministic.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

#[derive(Clone)]
struct Entry {
    name: String,
    value: Tensor5,
    grad: Tensor5,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor5) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArg(format!("duplicate parameter {name}")));
        }
        let grad = Tensor5::zeros_like(&value);
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad,
        });
        let idx = self.entries.len() - 1;
        self.index.insert(name.to_string(), idx);
        Ok(idx)
    }

    /// Registers `{prefix}.weight` (fan-in-scaled uniform) and
    /// `{prefix}.bias` (zeros) for a convolution.
    pub fn register_conv(
        &mut self,
        prefix: &str,
        spec: &ConvSpec,
        init: &mut Initializer,
    ) -> Result<()> {
        self.register_conv_with_bias_value(prefix, spec, init, 0.0)
    }

    pub fn register_conv_with_bias_value(
        &mut self,
        prefix: &str,
        spec: &ConvSpec,
        init: &mut Initializer,
        bias_value: f64,
    ) -> Result<()> {
        let w = init.conv_weight(spec)?;
        self.register(&format!("{prefix}.weight"), w)?;
        let b = Tensor5::full(spec.bias_shape()?, init.dtype, bias_value)?;
        self.register(&format!("{prefix}.bias"), b)?;
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArg(format!("unknown parameter {name}")))
    }

    pub fn value(&self, idx: usize) -> &Tensor5 {
        &self.entries[idx].value
    }

    pub fn grad(&self, idx: usize) -> &Tensor5 {
        &self.entries[idx].grad
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub(crate) fn value_grad_mut(&mut self, idx: usize) -> (&mut Tensor5, &Tensor5) {
        let e = &mut self.entries[idx];
        (&mut e.value, &e.grad)
    }

    pub fn accumulate_grad(&mut self, idx: usize, g: &Tensor5) -> Result<()> {
        self.entries[idx].grad.add_assign(g)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor5)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn iter_grads(&self) -> impl Iterator<Item = (&str, &Tensor5)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.grad))
    }

    /// Total learnable scalar count.
    pub fn scalar_count(&self) -> u128 {
        self.entries.iter().map(|e| e.value.len() as u128).sum()
    }

    /// Casts every parameter (and zeroed gradient) to `dtype`.
    pub fn cast(&self, dtype: Dtype) -> ParamStore {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.register(&e.name, e.value.cast(dtype)).expect("unique");
        }
        out
    }

    /// Overwrites one named parameter with a constant. Diagnostic helper.
    pub fn fill_param(&mut self, name: &str, value: f64) -> Result<()> {
        let idx = self.index_of(name)?;
        self.entries[idx].value.fill(value);
        Ok(())
    }

    /// Sets every `.weight` tensor whose conv maps C channels to C
    /// channels to a centered delta (identity) kernel and every `.bias`
    /// to zero. Diagnostic helper for pass-through tests.
    pub fn set_delta_kernels(&mut self) -> Result<()> {
        for e in &mut self.entries {
            if e.name.ends_with(".bias") {
                e.value.fill(0.0);
                continue;
            }
            let s = e.value.shape(); // (c_out, c_in/groups, kt, kh, kw)
            let (c_out, cpg) = (s.n, s.c);
            if c_out % cpg != 0 {
                return Err(Error::InvalidArg(format!(
                    "{}: cannot build delta kernel for shape {s}",
                    e.name
                )));
            }
            let (kt, kh, kw) = (s.t, s.h, s.w);
            let mut v = vec![0.0f64; s.volume()];
            for co in 0..c_out {
                v[s.index(co, co % cpg, kt / 2, kh / 2, kw / 2)] = 1.0;
            }
            e.value = Tensor5::from_vec_f64(s, v)?.cast(e.value.dtype());
        }
        Ok(())
    }
}

/// Deterministic fan-in-scaled uniform initializer. Each created tensor
/// consumes one derived seed, so build order fixes every weight.
pub struct Initializer {
    seed: u64,
    counter: u64,
    pub dtype: Dtype,
}

impl Initializer {
    pub fn new(seed: u64, dtype: Dtype) -> Self {
        Initializer {
            seed,
            counter: 0,
            dtype,
        }
    }

    fn next_seed(&mut self) -> u64 {
        // splitmix64 over (seed, counter)
        let mut z = self
            .seed
            .wrapping_add(self.counter.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.counter += 1;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn conv_weight(&mut self, spec: &ConvSpec) -> Result<Tensor5> {
        let ws = spec.weight_shape()?;
        let fan_in = ws.c * ws.t * ws.h * ws.w;
        // uniform(-sqrt(6/fan_in), sqrt(6/fan_in)): unit-ish variance gain
        // under the rectifier
        let scale = (6.0 / fan_in as f64).sqrt();
        Ok(Tensor5::uniform(ws, self.dtype, scale, self.next_seed()))
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub init_filters: usize,
    /// Encoder depth; the deepest level is the bottleneck, so there are
    /// `levels - 1` down/upsampling stages.
    pub levels: usize,
    pub crop_factor: usize,
    pub lcam_groups: usize,
    pub lcam_dilation: usize,
    pub lcam_residual: bool,
    pub str_cfg: StrConfig,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 11,
            t_in: 4,
            t_out: 32,
            init_filters: 32,
            levels: 3,
            crop_factor: 6,
            lcam_groups: 4,
            lcam_dilation: 1,
            lcam_residual: true,
            str_cfg: StrConfig::default(),
            dropout_rate: 0.4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.t_in == 0 || self.levels == 0 || self.crop_factor == 0 {
            return Err(Error::InvalidConfig(
                "in_channels, t_in, levels, crop_factor must be >= 1".into(),
            ));
        }
        if self.t_out == 0 || self.t_out % self.t_in != 0 {
            return Err(Error::InvalidConfig(format!(
                "t_out {} must be a positive multiple of t_in {}",
                self.t_out, self.t_in
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        self.lcam_at(0)?.validate()?;
        self.str_cfg.validate()?;
        if self.str_cfg.channels != 1 {
            return Err(Error::InvalidConfig(
                "refinement operates on the single-channel prediction volume".into(),
            ));
        }
        Ok(())
    }

    /// Channel width at encoder level `i`.
    pub fn width(&self, level: usize) -> usize {
        self.init_filters << level
    }

    /// Channels before the channel-time fold.
    pub fn c_prime(&self) -> usize {
        self.t_out / self.t_in
    }

    fn lcam_at(&self, level: usize) -> Result<LcamConfig> {
        Ok(LcamConfig {
            channels: self.width(level),
            group_count: self.lcam_groups,
            dilation: self.lcam_dilation,
            residual: self.lcam_residual,
        })
    }

    /// Validates an input shape against the architecture: channel and
    /// time extents, pooling divisibility, and crop divisibility.
    pub fn validate_input(&self, s: Shape5) -> Result<()> {
        if s.c != self.in_channels || s.t != self.t_in {
            return Err(Error::shape_mismatch(
                format!(
                    "(N, {}, {}, H, W) input",
                    self.in_channels, self.t_in
                ),
                s,
            ));
        }
        let pool = 1usize << (self.levels - 1);
        if s.h % pool != 0 || s.w % pool != 0 {
            return Err(Error::InvalidShape(format!(
                "spatial extents {}x{} must be divisible by 2^(levels-1) = {pool}",
                s.h, s.w
            )));
        }
        if s.h % self.crop_factor != 0 || s.w % self.crop_factor != 0 {
            return Err(Error::InvalidShape(format!(
                "spatial extents {}x{} must be divisible by crop factor {}",
                s.h, s.w, self.crop_factor
            )));
        }
        Ok(())
    }
}

/// Logical stages of the network in execution order; shared by parameter
/// registration and the FLOPs audit so they cannot drift apart.
enum StageDef {
    Conv {
        name: String,
        spec: ConvSpec,
        /// Spatial downscale factor at which this conv runs.
        scale: usize,
        bias_init: f64,
    },
    Lcam {
        prefix: String,
        cfg: LcamConfig,
        scale: usize,
    },
    Str {
        prefix: String,
        cfg: StrConfig,
    },
}

fn stages(cfg: &ModelConfig) -> Result<Vec<StageDef>> {
    cfg.validate()?;
    let mut v = Vec::new();
    let f = cfg.init_filters;
    v.push(StageDef::Conv {
        name: "stem".into(),
        spec: ConvSpec::same(cfg.in_channels, f, (1, 1, 1))?,
        scale: 1,
        bias_init: 0.0,
    });
    for i in 0..cfg.levels {
        for j in 0..2 {
            v.push(StageDef::Lcam {
                prefix: format!("enc{i}.lcam{j}"),
                cfg: cfg.lcam_at(i)?,
                scale: 1 << i,
            });
        }
        if i + 1 < cfg.levels {
            v.push(StageDef::Conv {
                name: format!("down{i}"),
                spec: ConvSpec::same(cfg.width(i), cfg.width(i + 1), (1, 1, 1))?,
                scale: 1 << (i + 1),
                bias_init: 0.0,
            });
        }
    }
    for i in (0..cfg.levels - 1).rev() {
        v.push(StageDef::Conv {
            name: format!("up{i}"),
            spec: ConvSpec::same(cfg.width(i + 1), cfg.width(i), (1, 1, 1))?,
            scale: 1 << i,
            bias_init: 0.0,
        });
        v.push(StageDef::Conv {
            name: format!("fuse{i}"),
            spec: ConvSpec::same(2 * cfg.width(i), cfg.width(i), (1, 1, 1))?,
            scale: 1 << i,
            bias_init: 0.0,
        });
        for j in 0..2 {
            v.push(StageDef::Lcam {
                prefix: format!("dec{i}.lcam{j}"),
                cfg: cfg.lcam_at(i)?,
                scale: 1 << i,
            });
        }
    }
    v.push(StageDef::Conv {
        name: "head".into(),
        spec: ConvSpec::same(f, cfg.c_prime(), (1, 1, 1))?,
        scale: 1,
        bias_init: 0.0,
    });
    v.push(StageDef::Str {
        prefix: "str".into(),
        cfg: cfg.str_cfg,
    });
    Ok(v)
}

/// Instantiates all parameters. Two builds with the same seed are
/// bit-identical.
pub fn build(cfg: &ModelConfig, seed: u64, dtype: Dtype) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed, dtype);
    for stage in stages(cfg)? {
        match stage {
            StageDef::Conv {
                name,
                spec,
                bias_init,
                ..
            } => store.register_conv_with_bias_value(&name, &spec, &mut init, bias_init)?,
            StageDef::Lcam { prefix, cfg, .. } => {
                lcam_register(&mut store, &prefix, &cfg, &mut init)?
            }
            StageDef::Str { prefix, cfg } => str_register(&mut store, &prefix, &cfg, &mut init)?,
        }
    }
    Ok(store)
}

/// Per-forward options.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOpts {
    pub mode: Mode,
    /// Base seed for the dropout masks of this pass.
    pub dropout_seed: u64,
    /// Diagnostic: zero out the skip connection of one encoder level.
    pub ablate_skip: Option<usize>,
}

impl Default for ForwardOpts {
    fn default() -> Self {
        ForwardOpts {
            mode: Mode::Eval,
            dropout_seed: 0,
            ablate_skip: None,
        }
    }
}

fn mix_seed(base: u64, k: u64) -> u64 {
    let mut z = base ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

/// Runs the network. Returns `(y_early, y_final)`, both logits of shape
/// `(N, 1, t_out, H/crop, W/crop)`.
pub fn forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    x: ValueId,
    opts: &ForwardOpts,
) -> Result<(ValueId, ValueId)> {
    cfg.validate()?;
    cfg.validate_input(tape.shape(x))?;

    let conv = |tape: &mut Tape, name: &str, v: ValueId, spec: ConvSpec| -> Result<ValueId> {
        let w = tape.param(store, store.index_of(&format!("{name}.weight"))?);
        let b = tape.param(store, store.index_of(&format!("{name}.bias"))?);
        tape.conv3d(v, w, Some(b), spec)
    };

    let mut lcam_counter = 0u64;
    let mut dropped_lcam =
        |tape: &mut Tape, prefix: &str, lcfg: &LcamConfig, v: ValueId| -> Result<ValueId> {
            let seed = mix_seed(opts.dropout_seed, lcam_counter);
            lcam_counter += 1;
            lcam_forward(
                tape,
                store,
                prefix,
                lcfg,
                v,
                Some((cfg.dropout_rate, opts.mode, seed)),
            )
        };

    let mut v = conv(
        tape,
        "stem",
        x,
        ConvSpec::same(cfg.in_channels, cfg.init_filters, (1, 1, 1))?,
    )?;
    v = tape.relu(v)?;

    let mut skips: Vec<ValueId> = Vec::new();
    for i in 0..cfg.levels {
        let lcfg = cfg.lcam_at(i)?;
        for j in 0..2 {
            v = dropped_lcam(tape, &format!("enc{i}.lcam{j}"), &lcfg, v)?;
        }
        if i + 1 < cfg.levels {
            skips.push(v);
            v = tape.max_pool_hw(v)?;
            v = conv(
                tape,
                &format!("down{i}"),
                v,
                ConvSpec::same(cfg.width(i), cfg.width(i + 1), (1, 1, 1))?,
            )?;
            v = tape.relu(v)?;
        }
    }

    for i in (0..cfg.levels - 1).rev() {
        v = tape.upsample_nearest_hw(v)?;
        v = conv(
            tape,
            &format!("up{i}"),
            v,
            ConvSpec::same(cfg.width(i + 1), cfg.width(i), (1, 1, 1))?,
        )?;
        v = tape.relu(v)?;
        let skip = if opts.ablate_skip == Some(i) {
            tape.input(Tensor5::zeros(
                tape.shape(skips[i]),
                tape.value(skips[i]).dtype(),
            ))
        } else {
            skips[i]
        };
        v = tape.concat_c(&[v, skip])?;
        v = conv(
            tape,
            &format!("fuse{i}"),
            v,
            ConvSpec::same(2 * cfg.width(i), cfg.width(i), (1, 1, 1))?,
        )?;
        v = tape.relu(v)?;
        let lcfg = cfg.lcam_at(i)?;
        for j in 0..2 {
            v = dropped_lcam(tape, &format!("dec{i}.lcam{j}"), &lcfg, v)?;
        }
    }

    // head emits logits: no activation
    v = conv(
        tape,
        "head",
        v,
        ConvSpec::same(cfg.init_filters, cfg.c_prime(), (1, 1, 1))?,
    )?;
    v = tape.crop_center_hw(v, cfg.crop_factor)?;
    let y_early = tape.fold_ct(v)?;
    let y_final = str_forward(tape, store, "str", &cfg.str_cfg, y_early)?;
    Ok((y_early, y_final))
}

/// Convenience eval-mode forward on a fresh tape.
pub fn predict(store: &ParamStore, cfg: &ModelConfig, x: &Tensor5) -> Result<(Tensor5, Tensor5)> {
    let mut tape = Tape::new();
    let xid = tape.input(x.clone());
    let (e, f) = forward(&mut tape, store, cfg, xid, &ForwardOpts::default())?;
    Ok((tape.value(e).clone(), tape.value(f).clone()))
}

/// One row of the per-layer cost report.
pub struct StageRow {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: String,
    pub h: usize,
    pub w: usize,
    pub t: usize,
    pub params: u128,
    /// Actual multiply-accumulate count (per sample), kernel taps times
    /// output positions.
    pub macs: u128,
    /// Cost of the dense 3D-conv equivalent of this stage (equal for
    /// stages that are already dense).
    pub dense_macs: u128,
    /// Savings ratio as an exact fraction, e.g. `12/27`.
    pub ratio: String,
}

/// Model-level cost audit.
pub struct FlopsReport {
    pub rows: Vec<StageRow>,
    pub total_params: u128,
    pub total_macs: u128,
    pub total_dense_macs: u128,
    /// Parameters of the dense baseline: the same skeleton with every
    /// aggregation block replaced by two dense 3x3x3 convolutions at the
    /// same width (the classic double-conv level unit).
    pub dense_unet3d_params: u128,
    /// Parameters with every decomposed stage replaced by its dense
    /// same-receptive-field equivalent.
    pub dense_equiv_params: u128,
}

/// Per-layer and total multiply-accumulate counts for an `(h, w)` input,
/// with the hypothetical dense-3D-conv cost of each decomposed stack for
/// side-by-side comparison.
pub fn count_model_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<FlopsReport> {
    cfg.validate()?;
    cfg.validate_input(Shape5::new(1, cfg.in_channels, cfg.t_in, h, w)?)?;
    let mut rows: Vec<StageRow> = Vec::new();
    let mut dense_unet3d_params: u128 = 0;
    let mut dense_equiv_params: u128 = 0;

    let conv_row = |name: &str, spec: &ConvSpec, h: usize, w: usize, t: usize| -> Result<StageRow> {
        let (kt, kh, kw) = spec.kernel;
        let macs = flops_full(
            h as u64,
            w as u64,
            (spec.c_in / spec.groups) as u64,
            spec.c_out as u64,
            kt as u64,
            kh as u64,
            kw as u64,
        )? * t as u128;
        Ok(StageRow {
            name: name.to_string(),
            c_in: spec.c_in,
            c_out: spec.c_out,
            kernel: format!("{kt}x{kh}x{kw}"),
            h,
            w,
            t,
            params: param_count(spec, true)?,
            macs,
            dense_macs: macs,
            ratio: "1/1".into(),
        })
    };

    for stage in stages(cfg)? {
        match stage {
            StageDef::Conv {
                name, spec, scale, ..
            } => {
                let row = conv_row(&name, &spec, h / scale, w / scale, cfg.t_in)?;
                dense_unet3d_params += row.params;
                dense_equiv_params += row.params;
                rows.push(row);
            }
            StageDef::Lcam { prefix, cfg: lc, scale } => {
                let (hh, ww, t) = (h / scale, w / scale, cfg.t_in);
                let c = lc.channels as u64;
                let g = lc.group_count;

                // spatial 1x3x3 pre-conv + temporal 3x1x1 form the
                // decomposed pair of one dense 3x3x3 kernel
                let pair_macs =
                    flops_decomposed(hh as u64, ww as u64, c, c, 3, 3, 3)? * t as u128;
                let pair_dense =
                    flops_full(hh as u64, ww as u64, c, c, 3, 3, 3)? * t as u128;
                let pair_params = param_count(&ConvSpec::same(lc.channels, lc.channels, (1, 3, 3))?, true)?
                    + param_count(&ConvSpec::same(lc.channels, lc.channels, (3, 1, 1))?, true)?;
                rows.push(StageRow {
                    name: format!("{prefix}.st_pair"),
                    c_in: lc.channels,
                    c_out: lc.channels,
                    kernel: "1x3x3+3x1x1".into(),
                    h: hh,
                    w: ww,
                    t,
                    params: pair_params,
                    macs: pair_macs,
                    dense_macs: pair_dense,
                    ratio: "12/27".into(),
                });
                dense_equiv_params +=
                    param_count(&ConvSpec::same(lc.channels, lc.channels, (3, 3, 3))?, true)?;

                // channel-split branches; the dense counterpart keeps the
                // full input channel count per branch (factor g)
                let per = lc.channels / g;
                let mut mksc_macs: u128 = 0;
                let mut mksc_dense: u128 = 0;
                let mut mksc_params: u128 = 0;
                let mut mksc_dense_params: u128 = 0;
                for (i, &n) in lc.kernel_ladder().iter().enumerate() {
                    let _ = i;
                    mksc_macs += flops_full(
                        hh as u64,
                        ww as u64,
                        per as u64,
                        per as u64,
                        1,
                        n as u64,
                        n as u64,
                    )? * t as u128;
                    mksc_dense += flops_full(
                        hh as u64,
                        ww as u64,
                        c,
                        per as u64,
                        1,
                        n as u64,
                        n as u64,
                    )? * t as u128;
                    let spec = ConvSpec::new(per, per, (1, n, n));
                    mksc_params += param_count(&spec, true)?;
                    let dense_spec = ConvSpec::new(lc.channels, per, (1, n, n));
                    mksc_dense_params += param_count(&dense_spec, true)?;
                }
                rows.push(StageRow {
                    name: format!("{prefix}.mksc"),
                    c_in: lc.channels,
                    c_out: lc.channels,
                    kernel: format!("split{g} ladder {:?}", lc.kernel_ladder()),
                    h: hh,
                    w: ww,
                    t,
                    params: mksc_params,
                    macs: mksc_macs,
                    dense_macs: mksc_dense,
                    ratio: format!("1/{g}"),
                });
                dense_equiv_params += mksc_dense_params;

                let agg_spec = ConvSpec::same(lc.channels, lc.channels, (3, 3, 3))?;
                let row = conv_row(&format!("{prefix}.agg"), &agg_spec, hh, ww, t)?;
                dense_equiv_params += row.params;
                rows.push(row);

                // dense baseline: the whole block becomes two 3x3x3 convs
                dense_unet3d_params +=
                    2 * param_count(&ConvSpec::same(lc.channels, lc.channels, (3, 3, 3))?, true)?;
            }
            StageDef::Str { prefix, cfg: sc } => {
                let (hh, ww, t) = (h / cfg.crop_factor, w / cfg.crop_factor, cfg.t_out);
                let c = sc.channels as u64;
                if sc.dense_attention {
                    let spec = ConvSpec::same(sc.channels, sc.channels, (7, 7, 7))?;
                    let row = conv_row(&format!("{prefix}.att"), &spec, hh, ww, t)?;
                    dense_unet3d_params += row.params;
                    dense_equiv_params += row.params;
                    rows.push(row);
                } else {
                    // two depthwise stages + mix vs one dense 7x7x7
                    let macs = (flops_full(hh as u64, ww as u64, 1, c, 3, 3, 3)?
                        + flops_full(hh as u64, ww as u64, 1, c, 3, 3, 3)?
                        + flops_full(hh as u64, ww as u64, c, c, 1, 1, 1)?)
                        * t as u128;
                    let dense =
                        flops_full(hh as u64, ww as u64, c, c, 7, 7, 7)? * t as u128;
                    let params = sc.parameter_count()?
                        - sc.residual_blocks as u128
                            * param_count(&ConvSpec::same(sc.channels, sc.channels, (3, 3, 3))?, true)?;
                    rows.push(StageRow {
                        name: format!("{prefix}.att"),
                        c_in: sc.channels,
                        c_out: sc.channels,
                        kernel: "dw3x3x3+dw3x3x3(d3)+1x1x1".into(),
                        h: hh,
                        w: ww,
                        t,
                        params,
                        macs,
                        dense_macs: dense,
                        ratio: "55/343".into(),
                    });
                    dense_unet3d_params += params;
                    dense_equiv_params +=
                        param_count(&ConvSpec::same(sc.channels, sc.channels, (7, 7, 7))?, true)?
                            + param_count(&ConvSpec::same(sc.channels, sc.channels, (1, 1, 1))?, true)?;
                }
                for i in 0..sc.residual_blocks {
                    let spec = ConvSpec::same(sc.channels, sc.channels, (3, 3, 3))?;
                    let row = conv_row(&format!("{prefix}.res{i}"), &spec, hh, ww, t)?;
                    dense_unet3d_params += row.params;
                    dense_equiv_params += row.params;
                    rows.push(row);
                }
            }
        }
    }

    let total_params = rows.iter().map(|r| r.params).sum();
    let total_macs = rows.iter().map(|r| r.macs).sum();
    let total_dense_macs = rows.iter().map(|r| r.dense_macs).sum();
    Ok(FlopsReport {
        rows,
        total_params,
        total_macs,
        total_dense_macs,
        dense_unet3d_params,
        dense_equiv_params,
    })
}

/// Closed-form learnable parameter total; equals the built store's count.
pub fn parameter_total(cfg: &ModelConfig) -> Result<u128> {
    // any valid input size works, parameters do not depend on it
    let h = lcm(1 << (cfg.levels - 1), cfg.crop_factor);
    Ok(count_model_flops(cfg, h, h)?.total_params)
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

const CONFIG_PREFIX: &str = "config.";

fn config_entries(cfg: &ModelConfig) -> Vec<(String, f64)> {
    let norm = match cfg.str_cfg.attention_norm {
        AttentionNorm::SoftmaxTime => 0.0,
        AttentionNorm::SigmoidGate => 1.0,
        AttentionNorm::Identity => 2.0,
    };
    vec![
        ("config.in_channels".into(), cfg.in_channels as f64),
        ("config.t_in".into(), cfg.t_in as f64),
        ("config.t_out".into(), cfg.t_out as f64),
        ("config.init_filters".into(), cfg.init_filters as f64),
        ("config.levels".into(), cfg.levels as f64),
        ("config.crop_factor".into(), cfg.crop_factor as f64),
        ("config.lcam_groups".into(), cfg.lcam_groups as f64),
        ("config.lcam_dilation".into(), cfg.lcam_dilation as f64),
        (
            "config.lcam_residual".into(),
            if cfg.lcam_residual { 1.0 } else { 0.0 },
        ),
        ("config.str_norm".into(), norm),
        (
            "config.str_dense_attention".into(),
            if cfg.str_cfg.dense_attention { 1.0 } else { 0.0 },
        ),
        (
            "config.str_residual_blocks".into(),
            cfg.str_cfg.residual_blocks as f64,
        ),
        ("config.dropout_rate".into(), cfg.dropout_rate),
    ]
}

/// Writes a STAR checkpoint: the architecture as `config.*` scalar
/// entries, then every parameter in store order.
pub fn save_checkpoint(path: impl AsRef<Path>, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    let scalar = Shape5::new(1, 1, 1, 1, 1)?;
    let cfg_tensors: Vec<(String, Tensor5)> = config_entries(cfg)
        .into_iter()
        .map(|(k, v)| Ok((k, Tensor5::full(scalar, Dtype::F64, v)?)))
        .collect::<Result<_>>()?;
    let mut entries: Vec<(&str, &Tensor5)> = cfg_tensors
        .iter()
        .map(|(k, t)| (k.as_str(), t))
        .collect();
    for (name, value) in store.iter() {
        entries.push((name, value));
    }
    crate::io::save_star(path, entries)
}

/// Reads a STAR checkpoint back into a config and parameter store,
/// verifying the parameter inventory against a fresh build of the
/// reconstructed config.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, ParamStore)> {
    let origin = path.as_ref().display().to_string();
    let entries = crate::io::load_star(path)?;
    let mut cfg_map: HashMap<String, f64> = HashMap::new();
    let mut store = ParamStore::new();
    let mut dtype = None;
    for (name, tensor) in entries {
        if let Some(key) = name.strip_prefix(CONFIG_PREFIX) {
            cfg_map.insert(key.to_string(), tensor.get(0, 0, 0, 0, 0));
        } else {
            dtype.get_or_insert(tensor.dtype());
            store.register(&name, tensor)?;
        }
    }
    let need = |k: &str| -> Result<f64> {
        cfg_map.get(k).copied().ok_or_else(|| Error::Corrupt {
            path: origin.clone(),
            detail: format!("missing config.{k} entry"),
        })
    };
    let norm = match need("str_norm")? as i64 {
        0 => AttentionNorm::SoftmaxTime,
        1 => AttentionNorm::SigmoidGate,
        2 => AttentionNorm::Identity,
        other => {
            return Err(Error::Corrupt {
                path: origin,
                detail: format!("unknown attention norm code {other}"),
            })
        }
    };
    let cfg = ModelConfig {
        in_channels: need("in_channels")? as usize,
        t_in: need("t_in")? as usize,
        t_out: need("t_out")? as usize,
        init_filters: need("init_filters")? as usize,
        levels: need("levels")? as usize,
        crop_factor: need("crop_factor")? as usize,
        lcam_groups: need("lcam_groups")? as usize,
        lcam_dilation: need("lcam_dilation")? as usize,
        lcam_residual: need("lcam_residual")? != 0.0,
        str_cfg: StrConfig {
            channels: 1,
            attention_norm: norm,
            dense_attention: need("str_dense_attention")? != 0.0,
            residual_blocks: need("str_residual_blocks")? as usize,
        },
        dropout_rate: need("dropout_rate")?,
    };
    // verify the inventory: names and shapes must match a fresh build
    let reference = build(&cfg, 0, dtype.unwrap_or(Dtype::F32))?;
    if reference.len() != store.len() {
        return Err(Error::Corrupt {
            path: origin,
            detail: format!(
                "checkpoint has {} parameters, architecture needs {}",
                store.len(),
                reference.len()
            ),
        });
    }
    for i in 0..reference.len() {
        if reference.name(i) != store.name(i) || reference.value(i).shape() != store.value(i).shape()
        {
            return Err(Error::Corrupt {
                path: origin,
                detail: format!(
                    "parameter {} mismatch: expected {} {}, got {} {}",
                    i,
                    reference.name(i),
                    reference.value(i).shape(),
                    store.name(i),
                    store.value(i).shape()
                ),
            });
        }
    }
    Ok((cfg, store))
}
