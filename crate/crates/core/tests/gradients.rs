mod common;

use attnprune::{AttentionBlock, Matrix, Projection};
use common::{nudge, rng};

fn objective(b: &AttentionBlock, x: &Matrix, up: &Matrix) -> f64 {
    b.forward(x).unwrap().hadamard(up).unwrap().sum()
}

#[test]
fn seed42_block_gradients_match_central_differences() {
    let b = AttentionBlock::random(8, 2, 4, 1.0, &mut rng(42));
    let x = Matrix::random_normal(5, 8, 1.0, &mut rng(7));
    let up = Matrix::random_normal(5, 8, 1.0, &mut rng(9));
    let g = b.backward(&x, &up).unwrap();
    let step = 1e-5;
    for (p, analytic) in Projection::ALL.into_iter().zip([&g.w_q, &g.w_k, &g.w_v, &g.w_o]) {
        for idx in 0..analytic.len() {
            let fd = (objective(&nudge(&b, p, idx, step), &x, &up) - objective(&nudge(&b, p, idx, -step), &x, &up))
                / (2.0 * step);
            let a = analytic.data()[idx];
            // entries below 1e-4 are compared on that floor instead of their own size
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
            assert!(rel <= 1e-6, "{p:?}[{idx}]: analytic {a} fd {fd} rel {rel}");
        }
    }
}

#[test]
fn input_gradient_matches_central_differences() {
    let b = AttentionBlock::random(6, 3, 2, 1.0, &mut rng(5));
    let x = Matrix::random_normal(4, 6, 1.0, &mut rng(6));
    let up = Matrix::random_normal(4, 6, 1.0, &mut rng(8));
    let g = b.backward(&x, &up).unwrap();
    let step = 1e-5;
    for idx in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[idx] += step;
        let mut xm = x.clone();
        xm.data_mut()[idx] -= step;
        let fd = (objective(&b, &xp, &up) - objective(&b, &xm, &up)) / (2.0 * step);
        let a = g.x.data()[idx];
        assert!((a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1e-4), "x[{idx}]: {a} vs {fd}");
    }
}
