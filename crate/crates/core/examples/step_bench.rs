//! Times forward and forward+backward passes of the desk denoiser.

use std::time::Instant;

use voxdiff_core::denoiser::{Denoiser, DenoiserConfig, LossKind};
use voxdiff_core::diffusion::NoisePredictor;
use voxdiff_core::{Rng, Volume};

fn main() {
    let c = DenoiserConfig::desk();
    println!("desk parameters: {}", c.parameter_count());
    let d = Denoiser::build(c.clone(), &mut Rng::new(0)).unwrap();
    let mut r = Rng::new(1);
    let batches: Vec<usize> = match std::env::args().nth(1) {
        Some(b) => vec![b.parse().expect("batch size")],
        None => vec![1, 4, 20],
    };
    for batch in batches {
        let inputs: Vec<Volume> =
            (0..batch).map(|_| Volume::new(3, c.size, r.normals(3 * c.size.voxels())).unwrap()).collect();
        let targets: Vec<Volume> =
            (0..batch).map(|_| Volume::new(1, c.size, r.normals(c.size.voxels())).unwrap()).collect();
        let ts: Vec<usize> = (0..batch).map(|i| 10 + i).collect();
        let reps = 5;
        let t0 = Instant::now();
        for _ in 0..reps {
            d.predict_noise_batch(&inputs, &ts).unwrap();
        }
        let fwd = t0.elapsed().as_secs_f64() / reps as f64;
        let t0 = Instant::now();
        for _ in 0..reps {
            d.loss_and_gradients(&inputs, &ts, &targets, LossKind::L1).unwrap();
        }
        let step = t0.elapsed().as_secs_f64() / reps as f64;
        println!("batch {batch:>2}: forward {:.1} ms, forward+backward {:.1} ms", fwd * 1e3, step * 1e3);
    }
}
