//! Small-subset probe of the desk training recipe: watches val mIoU per
//! epoch under the reference hyperparameters.

use stconv_core::data::{generate, SceneSpec};
use stconv_core::model::{build, ModelConfig};
use stconv_core::tensor::Dtype;
use stconv_core::train::{train_loop, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(120);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);

    let cfg = ModelConfig {
        init_filters: 16,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        seed: 42,
        epochs,
        ..TrainConfig::desk()
    };
    let spec = SceneSpec::desk(48);
    let all = generate(&spec, 42, n_train + 40).unwrap();
    let (train, val) = all.split_at(n_train);

    let mut store = build(&cfg, 42, Dtype::F32).unwrap();
    let t0 = std::time::Instant::now();
    let result = train_loop(&cfg, &mut store, train, &val[..40], &tc).unwrap();
    for r in &result.log {
        println!(
            "epoch {:2}  train {:.4}  val {:.4}  miou {:.4}  lr {:.2e}",
            r.epoch, r.train_loss, r.val_loss, r.val_miou, r.lr
        );
    }
    println!(
        "best epoch {}  elapsed {:.0}s",
        result.best_epoch,
        t0.elapsed().as_secs_f64()
    );
}
