//! Overfit sanity probe: two sequences, a few hundred steps, loss should
//! collapse. Small grid and width so iterations are fast.

use stconv_core::data::{generate, stack_samples, SceneSpec};
use stconv_core::model::{build, forward, ForwardOpts, ModelConfig};
use stconv_core::tape::Tape;
use stconv_core::tensor::{Dtype, Mode};
use stconv_core::train::{adamw_step, AdamState, TrainConfig};

fn main() {
    let cfg = ModelConfig {
        init_filters: 8,
        levels: 2,
        dropout_rate: 0.0,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        lr: 3e-3,
        weight_decay: 0.0,
        seed: 1,
        ..TrainConfig::desk()
    };
    let spec = SceneSpec::desk(24);
    let samples = generate(&spec, 1, 2).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let (xb, yb) = stack_samples(&refs).unwrap();
    let rain: f64 = yb.to_f64_vec().iter().sum::<f64>() / yb.len() as f64;
    println!("rain fraction {rain:.3}");

    let mut store = build(&cfg, 1, Dtype::F32).unwrap();
    let mut state = AdamState::new(&store);
    let t0 = std::time::Instant::now();
    for step in 1..=200u64 {
        let mut tape = Tape::new();
        let x = tape.input(xb.clone());
        let y = tape.input(yb.clone());
        let (ye, yf) = forward(
            &mut tape,
            &store,
            &cfg,
            x,
            &ForwardOpts {
                mode: Mode::Train,
                dropout_seed: step,
                ablate_skip: None,
            },
        )
        .unwrap();
        let lf = tape.bce_with_logits(yf, y, tc.pos_weight).unwrap();
        let le = tape.bce_with_logits(ye, y, tc.pos_weight).unwrap();
        let loss = tape.add_scaled(lf, le, tc.alpha).unwrap();
        let v = tape.value(loss).get(0, 0, 0, 0, 0);
        store.zero_grads();
        tape.backward(loss, &mut store).unwrap();
        adamw_step(&mut store, &mut state, &tc, tc.lr, step).unwrap();
        if step % 25 == 0 || step == 1 {
            println!("step {step:3}  loss {v:.5}");
        }
    }
    println!("200 steps in {:.1}s", t0.elapsed().as_secs_f64());
}
