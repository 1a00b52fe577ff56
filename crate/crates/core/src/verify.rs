//! Built-in verification: finite-difference checks for every
//! differentiable operation and both blocks plus a tiny end-to-end model,
//! the kernel-decomposition oracle, closed-form FLOPs checks, and file
//! format round trips. Each check yields one pass/fail report line.
//!
//! All checks run in float64 with fixed derived seeds, so a given seed
//! always produces the same report.

use crate::blocks::{
    lcam_forward, lcam_register, residual_block, str_forward, str_register, LcamConfig, StrConfig,
};
use crate::conv::{conv3d_forward, flops_decomposed, flops_full, ConvSpec};
use crate::error::Result;
use crate::model::{build, forward, ForwardOpts, Initializer, ModelConfig, ParamStore};
use crate::tape::{Tape, ValueId};
use crate::tensor::{Axis, Dtype, Mode, Shape5, Tensor5};

/// Outcome of one verification check.
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckReport {
    fn from_err(name: &str, err: impl std::fmt::Display) -> Self {
        CheckReport {
            name: name.into(),
            passed: false,
            detail: format!("error: {err}"),
        }
    }
}

pub fn all_passed(reports: &[CheckReport]) -> bool {
    reports.iter().all(|r| r.passed)
}

/// Deliberate-fault injection for testing the harness itself.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    None,
    /// Perturbs one computed gradient entry before comparison; the first
    /// check must then fail.
    PerturbGradient,
}

const OP_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;

fn sh(n: usize, c: usize, t: usize, h: usize, w: usize) -> Shape5 {
    Shape5::new(n, c, t, h, w).unwrap()
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn fd_grad(f: &mut dyn FnMut(&[f64]) -> Result<f64>, x0: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut g = vec![0.0; x0.len()];
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let fp = f(&x)?;
        x[i] = x0[i] - h;
        let fm = f(&x)?;
        x[i] = x0[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Checks d(sum(op(x) . r))/dx against central differences. `store`
/// must be the store the closure loads parameters from (empty for pure
/// ops); their gradients are discarded.
fn check_input_grad(
    name: &str,
    x0: Tensor5,
    corrupt: bool,
    store: &ParamStore,
    apply: &dyn Fn(&mut Tape, ValueId) -> Result<ValueId>,
) -> CheckReport {
    let run = || -> Result<(f64, String)> {
        let shape = x0.shape();
        let mut store = store.clone();
        let mut tape = Tape::new();
        let x = tape.input(x0.clone());
        let y = apply(&mut tape, x)?;
        let r = Tensor5::uniform(tape.shape(y), Dtype::F64, 1.0, 0xA5A5);
        let loss = tape.weighted_sum(y, &r)?;
        let grads = tape.backward(loss, &mut store)?;
        let mut got = grads
            .get(x)
            .map(|g| g.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; shape.volume()]);
        if corrupt {
            got[0] += 0.5;
        }
        let mut f = |v: &[f64]| -> Result<f64> {
            let mut t = Tape::new();
            let xi = t.input(Tensor5::from_vec_f64(shape, v.to_vec())?);
            let y = apply(&mut t, xi)?;
            Ok(t.value(y)
                .to_f64_vec()
                .iter()
                .zip(r.to_f64_vec().iter())
                .map(|(a, b)| a * b)
                .sum())
        };
        let want = fd_grad(&mut f, &x0.to_f64_vec(), FD_STEP)?;
        let err = max_rel_err(&got, &want);
        Ok((err, format!("max rel err {err:.2e} over {} coords", got.len())))
    };
    match run() {
        Ok((err, detail)) => CheckReport {
            name: name.into(),
            passed: err < OP_TOL,
            detail,
        },
        Err(e) => CheckReport::from_err(name, e),
    }
}

/// Checks a sample of parameter coordinates of a store-backed forward
/// against central differences of the re-run forward.
fn check_param_grads(
    name: &str,
    store: &ParamStore,
    coords: &[(usize, usize)],
    tol: f64,
    run_loss: &dyn Fn(&ParamStore, &mut Option<&mut ParamStore>) -> Result<f64>,
) -> CheckReport {
    let work = || -> Result<(f64, String)> {
        // analytic gradients
        let mut grad_store = store.clone();
        grad_store.zero_grads();
        let _ = run_loss(store, &mut Some(&mut grad_store))?;
        let mut worst = 0.0f64;
        for &(pidx, coord) in coords {
            let got = grad_store.grad(pidx).to_f64_vec()[coord];
            let base = store.value(pidx).to_f64_vec();
            let eval = |delta: f64| -> Result<f64> {
                let mut probe = store.clone();
                let mut v = base.clone();
                v[coord] += delta;
                let shape = probe.value(pidx).shape();
                *probe.value_grad_mut(pidx).0 = Tensor5::from_vec_f64(shape, v)?;
                run_loss(&probe, &mut None)
            };
            let fd = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            let err = (got - fd).abs() / got.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(err);
        }
        Ok((
            worst,
            format!("max rel err {worst:.2e} over {} sampled params", coords.len()),
        ))
    };
    match work() {
        Ok((err, detail)) => CheckReport {
            name: name.into(),
            passed: err < tol,
            detail,
        },
        Err(e) => CheckReport::from_err(name, e),
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

/// Finite-difference suite over ops, blocks, and the tiny end-to-end
/// model.
pub fn gradcheck_suite(seed: u64, corruption: Corruption) -> Vec<CheckReport> {
    let mut reports = Vec::new();
    let corrupt_first = corruption == Corruption::PerturbGradient;
    let t = |s: u64| Tensor5::uniform(sh(1, 2, 3, 4, 4), Dtype::F64, 1.0, mix(seed, s));

    // convolution variants
    let conv_check = |name: &str,
                      xs: Shape5,
                      spec: ConvSpec,
                      salt: u64,
                      corrupt: bool|
     -> CheckReport {
        let w0 = Tensor5::uniform(
            spec.weight_shape().unwrap(),
            Dtype::F64,
            0.5,
            mix(seed, salt),
        );
        let b0 = Tensor5::uniform(
            spec.bias_shape().unwrap(),
            Dtype::F64,
            0.5,
            mix(seed, salt + 1),
        );
        check_input_grad(
            name,
            Tensor5::uniform(xs, Dtype::F64, 1.0, mix(seed, salt + 2)),
            corrupt,
            &ParamStore::new(),
            &move |tape, x| {
                let w = tape.input(w0.clone());
                let b = tape.input(b0.clone());
                tape.conv3d(x, w, Some(b), spec)
            },
        )
    };
    reports.push(conv_check(
        "grad.conv.same_3x3x3",
        sh(1, 2, 3, 4, 4),
        ConvSpec::same(2, 3, (3, 3, 3)).unwrap(),
        11,
        corrupt_first,
    ));
    reports.push(conv_check(
        "grad.conv.dilated",
        sh(1, 2, 3, 9, 9),
        ConvSpec::same(2, 2, (1, 3, 3))
            .unwrap()
            .with_dilation((1, 3, 3))
            .into_same()
            .unwrap(),
        13,
        false,
    ));
    reports.push(conv_check(
        "grad.conv.grouped",
        sh(1, 4, 2, 4, 4),
        ConvSpec::same(4, 4, (1, 3, 3)).unwrap().with_groups(4),
        17,
        false,
    ));
    reports.push(conv_check(
        "grad.conv.strided",
        sh(1, 2, 4, 5, 5),
        ConvSpec::new(2, 3, (3, 3, 3))
            .with_stride((1, 2, 2))
            .with_padding((1, 1, 1)),
        19,
        false,
    ));

    // weight gradient of a conv through the parameter store
    {
        let spec = ConvSpec::same(2, 2, (3, 3, 3)).unwrap();
        let mut store = ParamStore::new();
        let mut init = Initializer::new(mix(seed, 23), Dtype::F64);
        store.register_conv("probe", &spec, &mut init).unwrap();
        let x0 = Tensor5::uniform(sh(1, 2, 3, 4, 4), Dtype::F64, 1.0, mix(seed, 29));
        let r = Tensor5::uniform(spec.output_shape(x0.shape()).unwrap(), Dtype::F64, 1.0, mix(seed, 31));
        let coords: Vec<(usize, usize)> = (0..8).map(|k| (0, k * 13 % 108)).collect();
        reports.push(check_param_grads(
            "grad.conv.weights",
            &store,
            &coords,
            OP_TOL,
            &move |s, sink| {
                let mut tape = Tape::new();
                let x = tape.input(x0.clone());
                let w = tape.param(s, 0);
                let b = tape.param(s, 1);
                let y = tape.conv3d(x, w, Some(b), spec)?;
                let loss = tape.weighted_sum(y, &r)?;
                let v = tape.value(loss).get(0, 0, 0, 0, 0);
                if let Some(gs) = sink.as_deref_mut() {
                    let mut probe = s.clone();
                    probe.zero_grads();
                    tape.backward(loss, &mut probe)?;
                    for i in 0..probe.len() {
                        gs.accumulate_grad(i, probe.grad(i))?;
                    }
                }
                Ok(v)
            },
        ));
    }

    // elementwise and structural ops
    let nudged = {
        let base = t(37);
        let v: Vec<f64> = base
            .to_f64_vec()
            .iter()
            .map(|&x| if x.abs() < 0.1 { x + 0.3 } else { x })
            .collect();
        Tensor5::from_vec_f64(base.shape(), v).unwrap()
    };
    reports.push(check_input_grad("grad.relu", nudged, false, &ParamStore::new(), &|t, x| {
        t.relu(x)
    }));
    reports.push(check_input_grad("grad.sigmoid", t(41), false, &ParamStore::new(), &|t, x| {
        t.sigmoid(x)
    }));
    reports.push(check_input_grad(
        "grad.softmax_time",
        t(43),
        false,
        &ParamStore::new(),
        &|t, x| t.softmax_axis(x, Axis::Time),
    ));
    reports.push(check_input_grad(
        "grad.softmax_channel",
        t(47),
        false,
        &ParamStore::new(),
        &|t, x| t.softmax_axis(x, Axis::Channel),
    ));
    reports.push(check_input_grad("grad.max_pool", t(53), false, &ParamStore::new(), &|t, x| {
        t.max_pool_hw(x)
    }));
    reports.push(check_input_grad("grad.upsample", t(59), false, &ParamStore::new(), &|t, x| {
        t.upsample_nearest_hw(x)
    }));
    reports.push(check_input_grad(
        "grad.crop_center",
        Tensor5::uniform(sh(1, 2, 2, 6, 6), Dtype::F64, 1.0, mix(seed, 61)),
        false,
        &ParamStore::new(),
        &|t, x| t.crop_center_hw(x, 3),
    ));
    reports.push(check_input_grad(
        "grad.fold_channels_time",
        Tensor5::uniform(sh(1, 4, 3, 2, 2), Dtype::F64, 1.0, mix(seed, 67)),
        false,
        &ParamStore::new(),
        &|t, x| t.fold_ct(x),
    ));
    reports.push(check_input_grad(
        "grad.split_concat",
        Tensor5::uniform(sh(1, 4, 2, 3, 3), Dtype::F64, 1.0, mix(seed, 71)),
        false,
        &ParamStore::new(),
        &|t, x| {
            let parts = t.split_c(x, 2)?;
            t.concat_c(&[parts[1], parts[0]])
        },
    ));
    reports.push(check_input_grad("grad.dropout", t(73), false, &ParamStore::new(), &|t, x| {
        t.dropout(x, 0.4, Mode::Train, 12345)
    }));
    {
        let gate = t(79);
        reports.push(check_input_grad(
            "grad.attention_gate_mul",
            t(83),
            false,
            &ParamStore::new(),
            &move |t, x| {
                let g = t.input(gate.clone());
                t.mul(x, g)
            },
        ));
    }
    {
        let shape = sh(1, 1, 2, 3, 3);
        let target =
            Tensor5::from_fn(shape, Dtype::F64, |i| ((i * 5) % 3 == 0) as u64 as f64).unwrap();
        reports.push(check_input_grad(
            "grad.bce_pos_weight",
            Tensor5::uniform(shape, Dtype::F64, 2.0, mix(seed, 89)),
            false,
            &ParamStore::new(),
            &move |t, z| {
                let y = t.input(target.clone());
                t.bce_with_logits(z, y, 4.0)
            },
        ));
    }

    // blocks
    {
        let cfg = LcamConfig::new(8, 4);
        let mut store = ParamStore::new();
        let mut init = Initializer::new(mix(seed, 97), Dtype::F64);
        lcam_register(&mut store, "blk", &cfg, &mut init).unwrap();
        let store2 = store.clone();
        reports.push(check_input_grad(
            "grad.block.lcam",
            Tensor5::uniform(sh(1, 8, 2, 6, 6), Dtype::F64, 1.0, mix(seed, 101)),
            false,
            &store,
            &move |t, x| lcam_forward(t, &store2, "blk", &cfg, x, None),
        ));
    }
    {
        let cfg = StrConfig::default();
        let mut store = ParamStore::new();
        let mut init = Initializer::new(mix(seed, 103), Dtype::F64);
        str_register(&mut store, "str", &cfg, &mut init).unwrap();
        let store2 = store.clone();
        reports.push(check_input_grad(
            "grad.block.str",
            Tensor5::uniform(sh(1, 1, 8, 6, 6), Dtype::F64, 1.0, mix(seed, 107)),
            false,
            &store,
            &move |t, x| str_forward(t, &store2, "str", &cfg, x),
        ));
    }
    {
        let spec = ConvSpec::same(2, 2, (3, 3, 3)).unwrap();
        let mut store = ParamStore::new();
        let mut init = Initializer::new(mix(seed, 109), Dtype::F64);
        store.register_conv("rb", &spec, &mut init).unwrap();
        let store2 = store.clone();
        reports.push(check_input_grad(
            "grad.block.residual",
            Tensor5::uniform(sh(1, 2, 3, 5, 5), Dtype::F64, 1.0, mix(seed, 113)),
            false,
            &store,
            &move |t, x| residual_block(t, &store2, "rb", x),
        ));
    }

    // tiny end-to-end model: 20 sampled parameters, relative error < 1e-3
    {
        let cfg = ModelConfig {
            init_filters: 4,
            levels: 2,
            dropout_rate: 0.0,
            ..ModelConfig::default()
        };
        match build(&cfg, mix(seed, 127), Dtype::F64) {
            Ok(store) => {
                let x0 = Tensor5::uniform(
                    sh(1, cfg.in_channels, cfg.t_in, 12, 12),
                    Dtype::F64,
                    1.0,
                    mix(seed, 131),
                );
                let target = Tensor5::from_fn(sh(1, 1, 32, 2, 2), Dtype::F64, |i| {
                    ((i * 7) % 3 == 0) as u64 as f64
                })
                .unwrap();
                // sample 20 (param, coord) pairs deterministically
                let mut coords = Vec::new();
                let mut z = mix(seed, 137);
                for _ in 0..20 {
                    z = mix(z, 1);
                    let p = (z % store.len() as u64) as usize;
                    z = mix(z, 2);
                    let c = (z % store.value(p).len() as u64) as usize;
                    coords.push((p, c));
                }
                let cfg2 = cfg;
                reports.push(check_param_grads(
                    "grad.model.end_to_end",
                    &store,
                    &coords,
                    MODEL_TOL,
                    &move |s, sink| {
                        let mut tape = Tape::new();
                        let x = tape.input(x0.clone());
                        let y = tape.input(target.clone());
                        let (ye, yf) = forward(&mut tape, s, &cfg2, x, &ForwardOpts::default())?;
                        let lf = tape.bce_with_logits(yf, y, 4.0)?;
                        let le = tape.bce_with_logits(ye, y, 4.0)?;
                        let loss = tape.add_scaled(lf, le, 0.2)?;
                        let v = tape.value(loss).get(0, 0, 0, 0, 0);
                        if let Some(gs) = sink.as_deref_mut() {
                            let mut probe = s.clone();
                            probe.zero_grads();
                            tape.backward(loss, &mut probe)?;
                            for i in 0..probe.len() {
                                gs.accumulate_grad(i, probe.grad(i))?;
                            }
                        }
                        Ok(v)
                    },
                ));
            }
            Err(e) => reports.push(CheckReport::from_err("grad.model.end_to_end", e)),
        }
    }

    reports
}

/// Non-gradient checks: decomposition oracle, FLOPs closed forms, fold
/// and crop round trips, file-format round trips.
pub fn structural_suite(seed: u64) -> Vec<CheckReport> {
    let mut reports = Vec::new();

    // kernel decomposition oracle: separable dense kernel == spatial then
    // depthwise-temporal pipeline
    {
        let mut worst = 0.0f64;
        let mut failed = None;
        for case in 0..8u64 {
            let (c_in, c_out, kt, khw) = (2usize, 3usize, 3usize, 3usize);
            let xs = sh(1, c_in, 5, 6, 6);
            let x = Tensor5::uniform(xs, Dtype::F64, 1.0, mix(seed, 200 + case));
            let a = Tensor5::uniform(sh(c_out, 1, kt, 1, 1), Dtype::F64, 1.0, mix(seed, 300 + case));
            let s = Tensor5::uniform(
                sh(c_out, c_in, 1, khw, khw),
                Dtype::F64,
                1.0,
                mix(seed, 400 + case),
            );
            let run = || -> Result<f64> {
                let full_w = Tensor5::from_fn(sh(c_out, c_in, kt, khw, khw), Dtype::F64, |i| {
                    let kw = i % khw;
                    let kh = (i / khw) % khw;
                    let ktt = (i / (khw * khw)) % kt;
                    let ci = (i / (khw * khw * kt)) % c_in;
                    let co = i / (khw * khw * kt * c_in);
                    a.get(co, 0, ktt, 0, 0) * s.get(co, ci, 0, kh, kw)
                })?;
                let dense = conv3d_forward(
                    &x,
                    &full_w,
                    None,
                    &ConvSpec::same(c_in, c_out, (kt, khw, khw))?,
                )?;
                let mid = crate::conv::spatial_conv(&x, &s, None, (1, 1), (1, 1))?;
                let pipe = crate::conv::temporal_conv(&mid, &a, None, 1)?;
                Ok(max_rel_err(&dense.to_f64_vec(), &pipe.to_f64_vec()))
            };
            match run() {
                Ok(err) => worst = worst.max(err),
                Err(e) => failed = Some(e.to_string()),
            }
        }
        reports.push(match failed {
            Some(e) => CheckReport::from_err("oracle.kernel_decomposition", e),
            None => CheckReport {
                name: "oracle.kernel_decomposition".into(),
                passed: worst < 1e-6,
                detail: format!("max rel err {worst:.2e} over 8 separable kernels"),
            },
        });
    }

    // FLOPs closed forms against an independent widened evaluation
    {
        let mut ok = true;
        let mut z = mix(seed, 500);
        for _ in 0..32 {
            z = mix(z, 3);
            let pick = |z: &mut u64, m: u64| {
                *z = mix(*z, 5);
                1 + *z % m
            };
            let (h, w, ci, co) = (
                pick(&mut z, 300),
                pick(&mut z, 300),
                pick(&mut z, 128),
                pick(&mut z, 128),
            );
            let (kt, kh, kw) = (pick(&mut z, 7), pick(&mut z, 9), pick(&mut z, 9));
            let full = flops_full(h, w, ci, co, kt, kh, kw).unwrap();
            let dec = flops_decomposed(h, w, ci, co, kt, kh, kw).unwrap();
            // independent association: fold pairwise in reverse
            let base = [h, w, ci, co].iter().rev().fold(1u128, |a, &b| a * b as u128);
            ok &= full == base * (kt as u128 * kh as u128 * kw as u128);
            ok &= dec == base * (kt as u128 + kh as u128 * kw as u128);
        }
        // the canonical 3x3x3 savings ratio
        let full = flops_full(10, 10, 4, 4, 3, 3, 3).unwrap();
        let dec = flops_decomposed(10, 10, 4, 4, 3, 3, 3).unwrap();
        ok &= dec * 27 == full * 12;
        reports.push(CheckReport {
            name: "closed_form.flops".into(),
            passed: ok,
            detail: "32 random tuples + 12/27 ratio".into(),
        });
    }

    // fold/unfold and crop/pad round trips
    {
        let run = || -> Result<bool> {
            let x = Tensor5::uniform(sh(2, 8, 4, 6, 6), Dtype::F32, 1.0, mix(seed, 600));
            let folded = x.fold_channels_into_time()?;
            let ok1 = folded.shape().dims() == [2, 1, 32, 6, 6]
                && folded.unfold_time_into_channels(8)? == x;
            let c = Tensor5::uniform(sh(1, 2, 2, 12, 12), Dtype::F32, 1.0, mix(seed, 601));
            let cropped = c.crop_center_spatial(6)?;
            let padded = cropped.pad_center_spatial(12, 12)?;
            let mut ok2 = true;
            for hh in 0..2 {
                for ww in 0..2 {
                    ok2 &= padded.get(0, 0, 0, 5 + hh, 5 + ww) == c.get(0, 0, 0, 5 + hh, 5 + ww);
                }
            }
            Ok(ok1 && ok2)
        };
        reports.push(match run() {
            Ok(passed) => CheckReport {
                name: "round_trip.fold_crop".into(),
                passed,
                detail: "fold/unfold bit-exact, crop window preserved".into(),
            },
            Err(e) => CheckReport::from_err("round_trip.fold_crop", e),
        });
    }

    // file format round trips in a scratch directory
    {
        let run = || -> Result<bool> {
            let dir = std::env::temp_dir().join(format!(
                "stconv_selftest_{}_{}",
                std::process::id(),
                mix(seed, 700)
            ));
            std::fs::create_dir_all(&dir)?;
            let tensor = Tensor5::uniform(sh(2, 3, 2, 4, 5), Dtype::F32, 1.0, mix(seed, 701));
            let tpath = dir.join("t.stsr");
            crate::io::save_stsr(&tpath, &tensor)?;
            let ok1 = crate::io::load_stsr(&tpath)? == tensor;

            let cfg = ModelConfig {
                init_filters: 4,
                levels: 2,
                ..ModelConfig::default()
            };
            let store = build(&cfg, mix(seed, 702), Dtype::F32)?;
            let cpath = dir.join("m.star");
            crate::model::save_checkpoint(&cpath, &cfg, &store)?;
            let (cfg2, store2) = crate::model::load_checkpoint(&cpath)?;
            let mut ok2 = cfg2.init_filters == cfg.init_filters && store2.len() == store.len();
            for i in 0..store.len() {
                ok2 &= store2.value(i) == store.value(i);
            }
            // corrupted magic must be rejected
            let mut bytes = std::fs::read(&tpath)?;
            bytes[0] = b'X';
            std::fs::write(&tpath, &bytes)?;
            let ok3 = crate::io::load_stsr(&tpath).is_err();
            std::fs::remove_dir_all(&dir)?;
            Ok(ok1 && ok2 && ok3)
        };
        reports.push(match run() {
            Ok(passed) => CheckReport {
                name: "round_trip.formats".into(),
                passed,
                detail: "tensor blob + checkpoint lossless, corruption rejected".into(),
            },
            Err(e) => CheckReport::from_err("round_trip.formats", e),
        });
    }

    reports
}

/// The full release gate: gradient suite plus structural checks.
pub fn selftest_suite(seed: u64) -> Vec<CheckReport> {
    let mut reports = gradcheck_suite(seed, Corruption::None);
    reports.extend(structural_suite(seed));
    reports
}
