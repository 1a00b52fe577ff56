//! Prints target statistics of the desk dataset template: rain fraction,
//! empty-frame share, and the frame-persistence baseline scores.

use stconv_core::data::{generate_scenes, persistence_prediction, render_sample, SceneSpec};
use stconv_core::metrics::{miou, MetricsRecord};

fn main() {
    let spec = SceneSpec::desk(48);
    let n = 60;
    let scenes = generate_scenes(&spec, 42, n).unwrap();
    let mut fracs = Vec::new();
    let mut empty_frames = 0usize;
    let mut total_frames = 0usize;
    let mut persist = Vec::new();
    for scene in &scenes {
        let s = render_sample(&spec, scene).unwrap();
        let yv = s.y.as_f32().unwrap();
        fracs.push(yv.iter().map(|&v| v as f64).sum::<f64>() / yv.len() as f64);
        let hw = 8 * 8;
        for t in 0..32 {
            total_frames += 1;
            if yv[t * hw..(t + 1) * hw].iter().all(|&v| v == 0.0) {
                empty_frames += 1;
            }
        }
        // persistence baseline scored against the truth volume
        let p = persistence_prediction(&spec, scene).unwrap();
        let pv = p.as_f32().unwrap();
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0, 0, 0);
        for (a, b) in pv.iter().zip(yv) {
            match (*a > 0.5, *b > 0.5) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        persist.push(MetricsRecord::from_counts(tp, fp, fn_, tn));
    }
    fracs.sort_by(f64::total_cmp);
    println!(
        "rain fraction: mean {:.3}  p10 {:.3}  p50 {:.3}  p90 {:.3}",
        fracs.iter().sum::<f64>() / n as f64,
        fracs[n / 10],
        fracs[n / 2],
        fracs[9 * n / 10]
    );
    println!(
        "empty frames: {:.1}%   persistence mIoU: {:.3}",
        100.0 * empty_frames as f64 / total_frames as f64,
        miou(&persist)
    );
}
