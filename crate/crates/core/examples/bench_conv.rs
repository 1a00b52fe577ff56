//! Rough throughput check of the convolution kernels at the shapes the
//! trainer actually runs. Prints GMAC/s per case.

use std::time::Instant;
use stconv_core::conv::{conv3d_backward, conv3d_forward, ConvSpec};
use stconv_core::tensor::{Dtype, Shape5, Tensor5};

fn bench(name: &str, xs: Shape5, spec: ConvSpec, iters: usize) {
    let x = Tensor5::uniform(xs, Dtype::F32, 1.0, 1);
    let w = Tensor5::uniform(spec.weight_shape().unwrap(), Dtype::F32, 0.1, 2);
    let b = Tensor5::uniform(spec.bias_shape().unwrap(), Dtype::F32, 0.1, 3);
    let os = spec.output_shape(xs).unwrap();
    let macs = (os.volume() / spec.c_out as usize)
        * spec.c_out
        * (spec.c_in / spec.groups)
        * spec.kernel.0
        * spec.kernel.1
        * spec.kernel.2;

    let t0 = Instant::now();
    let mut y = None;
    for _ in 0..iters {
        y = Some(conv3d_forward(&x, &w, Some(&b), &spec).unwrap());
    }
    let fwd = t0.elapsed().as_secs_f64();

    let dy = y.unwrap();
    let t0 = Instant::now();
    for _ in 0..iters {
        let _ = conv3d_backward(&x, &w, &spec, &dy, false, false).unwrap();
    }
    let dw_only = t0.elapsed().as_secs_f64();
    let t0 = Instant::now();
    for _ in 0..iters {
        let _ = conv3d_backward(&x, &w, &spec, &dy, true, true).unwrap();
    }
    let bwd = t0.elapsed().as_secs_f64();
    let dx_only = (bwd - dw_only).max(1e-9);

    println!(
        "{name:32} fwd {:8.2}  dw {:8.2}  dx {:8.2} GMAC/s",
        macs as f64 * iters as f64 / fwd / 1e9,
        macs as f64 * iters as f64 / dw_only / 1e9,
        macs as f64 * iters as f64 / dx_only / 1e9,
    );
}

fn main() {
    let sh = |n, c, t, h, w| Shape5::new(n, c, t, h, w).unwrap();
    // level-0 trunk shapes at batch 4, 48x48, T=4
    bench(
        "spatial 1x3x3 C16 48x48",
        sh(4, 16, 4, 48, 48),
        ConvSpec::same(16, 16, (1, 3, 3)).unwrap(),
        20,
    );
    bench(
        "mksc 1x9x9 C4 48x48",
        sh(4, 4, 4, 48, 48),
        ConvSpec::same(4, 4, (1, 9, 9)).unwrap(),
        20,
    );
    bench(
        "temporal 3x1x1 C16 48x48",
        sh(4, 16, 4, 48, 48),
        ConvSpec::same(16, 16, (3, 1, 1)).unwrap(),
        20,
    );
    bench(
        "agg 3x3x3 C16 48x48",
        sh(4, 16, 4, 48, 48),
        ConvSpec::same(16, 16, (3, 3, 3)).unwrap(),
        20,
    );
    bench(
        "agg 3x3x3 C64 12x12",
        sh(4, 64, 4, 12, 12),
        ConvSpec::same(64, 64, (3, 3, 3)).unwrap(),
        20,
    );
    bench(
        "pointwise 1x1x1 11->16 48x48",
        sh(4, 11, 4, 48, 48),
        ConvSpec::same(11, 16, (1, 1, 1)).unwrap(),
        50,
    );
}
