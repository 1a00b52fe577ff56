//! Times one desk-scale optimizer step and extrapolates a full training
//! run (500 samples x 10 epochs).

use std::time::Instant;
use stconv_core::data::{generate, stack_samples, SceneSpec};
use stconv_core::model::{build, forward, ForwardOpts, ModelConfig};
use stconv_core::tape::Tape;
use stconv_core::tensor::{Dtype, Mode};
use stconv_core::train::{adamw_step, AdamState, TrainConfig};

fn main() {
    let cfg = ModelConfig {
        init_filters: 16,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        seed: 42,
        ..TrainConfig::desk()
    };
    let spec = SceneSpec::desk(48);

    let t0 = Instant::now();
    let samples = generate(&spec, 42, 8).unwrap();
    println!("gen 8 samples: {:.3}s", t0.elapsed().as_secs_f64());

    let mut store = build(&cfg, 42, Dtype::F32).unwrap();
    let mut state = AdamState::new(&store);
    println!("params: {}", store.scalar_count());

    let refs: Vec<_> = samples[..4].iter().collect();
    let (xb, yb) = stack_samples(&refs).unwrap();

    // warmup + timed steps
    let mut step = 0u64;
    for round in 0..4 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let x = tape.input(xb.clone());
        let y = tape.input(yb.clone());
        let opts = ForwardOpts {
            mode: Mode::Train,
            dropout_seed: round,
            ablate_skip: None,
        };
        let (ye, yf) = forward(&mut tape, &store, &cfg, x, &opts).unwrap();
        let fwd = t0.elapsed().as_secs_f64();
        let lf = tape.bce_with_logits(yf, y, tc.pos_weight).unwrap();
        let le = tape.bce_with_logits(ye, y, tc.pos_weight).unwrap();
        let loss = tape.add_scaled(lf, le, tc.alpha).unwrap();
        let t1 = Instant::now();
        store.zero_grads();
        tape.backward(loss, &mut store).unwrap();
        let bwd = t1.elapsed().as_secs_f64();
        step += 1;
        adamw_step(&mut store, &mut state, &tc, tc.lr, step).unwrap();
        let total = t0.elapsed().as_secs_f64();
        println!(
            "step {round}: fwd {fwd:.3}s  bwd {bwd:.3}s  total {total:.3}s  loss {:.4}",
            tape.value(loss).get(0, 0, 0, 0, 0)
        );
        if round == 3 {
            let per_epoch = total * (500.0 / 4.0);
            println!(
                "extrapolated: {:.0}s/epoch train, {:.0}s for 10 epochs (1 core)",
                per_epoch,
                per_epoch * 10.0
            );
        }
    }
}
