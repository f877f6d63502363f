//! Times a forward and backward 4D convolution at U-Net patch size.

use std::time::Instant;

use clutter4d::ops4d::Conv4d;
use clutter4d::{Fill, Tensor6D};

fn main() {
    let normal = |s, seed| Tensor6D::seeded_fill(s, Fill::Normal { mean: 0.0, std: 1.0 }, seed).unwrap();
    for (ci, co) in [(4, 8), (8, 8), (24, 8)] {
        let x = normal([1, ci, 16, 16, 16, 8], 1);
        let layer = Conv4d::new(normal([co, ci, 3, 3, 3, 3], 2), Tensor6D::zeros([co, 1, 1, 1, 1, 1])).unwrap();
        let t0 = Instant::now();
        let y = layer.forward(&x).unwrap();
        let fwd = t0.elapsed();
        let t0 = Instant::now();
        layer.backward(&y, &x).unwrap();
        let bwd = t0.elapsed();
        let gflop = 2.0 * 81.0 * (ci * co) as f64 * 32768.0 / 1e9;
        println!(
            "{ci:>2} -> {co:>2}: forward {:?} ({:.1} GFLOP/s), backward {:?}",
            fwd,
            gflop / fwd.as_secs_f64(),
            bwd
        );
    }
}
