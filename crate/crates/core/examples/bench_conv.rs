use densebox::tensor::kernels::*;
use densebox::Scalar;
use std::time::Instant;

fn run_bench<T: Scalar>(c1: usize, c2: usize, c3: usize) {
    let mut best = (f64::MAX, f64::MAX);
    for _ in 0..5 {
        let r = once::<T>(c1, c2, c3);
        best = (best.0.min(r.0), best.1.min(r.1));
    }
    println!(
        "{} {c1},{c2},{c3}: fwd {:.1}ms bwd {:.1}ms",
        std::any::type_name::<T>(),
        best.0 * 1e3,
        best.1 * 1e3
    );
}

fn once<T: Scalar>(c1: usize, c2: usize, c3: usize) -> (f64, f64) {
    let layers = [
        (3, c1, 240, 3),
        (c1, c1, 240, 3),
        (c1, c2, 120, 3),
        (c2, c2, 120, 3),
        (c2, c3, 30, 3),
        (c3, c3, 30, 3),
        (c2 + c3, 48, 60, 1),
        (c2 + c3, 48, 60, 1),
        (48, 1, 60, 1),
        (48, 4, 60, 1),
    ];
    let (mut tf, mut tb) = (0.0, 0.0);
    for &(i, o, s, k) in &layers {
        let d = ConvDims {
            in_c: i,
            out_c: o,
            h: s,
            w: s,
            k,
            pad: k / 2,
        };
        let x = vec![T::one(); i * s * s];
        let w = vec![T::one(); o * i * k * k];
        let b = vec![T::zero(); o];
        let t = Instant::now();
        let y = conv2d_forward(d, &x, &w, &b);
        tf += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let _ = conv2d_backward(d, &x, &w, &y);
        tb += t.elapsed().as_secs_f64();
    }
    (tf, tb)
}

fn main() {
    for _ in 0..1 {
        run_bench::<f64>(16, 32, 64);
        run_bench::<f64>(8, 16, 32);
        run_bench::<f32>(16, 32, 64);
        run_bench::<f32>(8, 16, 32);
    }
}
