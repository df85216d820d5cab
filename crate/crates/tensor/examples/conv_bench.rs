//! Times the reference and fast convolution kernels on desk-sized shapes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use voxdiff_tensor::{conv3d_backward, conv3d_fast, conv3d_reference, Tensor};

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for (cin, cout, side, stride) in [(3, 8, 16, 1), (8, 8, 16, 1), (24, 8, 16, 1), (8, 8, 16, 2), (16, 16, 8, 1), (32, 16, 8, 1)] {
        let x: Tensor<f32> = Tensor::from_vec(
            &[1, cin, side, side, side],
            (0..cin * side * side * side).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let w: Tensor<f32> =
            Tensor::from_vec(&[cout, cin, 3, 3, 3], (0..cout * cin * 27).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let t = Instant::now();
        let r = conv3d_reference(&x, &w, None, stride, 1).unwrap();
        let tr = t.elapsed();
        let t = Instant::now();
        let reps = 20;
        for _ in 0..reps {
            conv3d_fast(&x, &w, None, stride, 1).unwrap();
        }
        let tf = t.elapsed() / reps;
        let t = Instant::now();
        for _ in 0..reps {
            conv3d_backward(&x, &w, &r, stride, 1, true).unwrap();
        }
        let tb = t.elapsed() / reps;
        println!(
            "cin {cin:2} cout {cout:2} side {side:2} stride {stride}: reference {tr:?}, fast {tf:?}, backward {tb:?}, speedup {:.1}x",
            tr.as_secs_f64() / tf.as_secs_f64()
        );
    }
}
