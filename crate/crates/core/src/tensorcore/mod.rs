//! Dense tensors and tape-based reverse-mode differentiation.
//!
//! [`Tensor`] is a plain value type. Differentiable computations are recorded
//! on a [`Tape`], which hands out [`Var`] handles; `backward` on a scalar
//! result yields gradients for every leaf registered with [`Tape::param`].

mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, Padding, Tape, Var, NORM_EPS};
pub use tensor::{Real, Tensor};

use crate::error::{Error, Result};

/// Unit-norm copy of a vector.
pub fn l2_normalize<T: Real>(x: &[T]) -> Result<Vec<T>> {
    let n = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    if !(n > T::of(NORM_EPS)) {
        return Err(Error::Degenerate(format!("cannot normalize vector of norm {:e}", n.as_f64())));
    }
    Ok(x.iter().map(|&v| v / n).collect())
}

/// Cosine similarity of two equally long vectors, clamped to `[-1, 1]`.
///
/// Computed as `a·b / sqrt(|a|²|b|²)`, so `cosine(v, v)` is exactly one.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("cosine", format!("lengths {} and {}", a.len(), b.len())));
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: T = a.iter().map(|&x| x * x).sum();
    let nb: T = b.iter().map(|&x| x * x).sum();
    let eps = T::of(NORM_EPS * NORM_EPS);
    if !(na > eps) || !(nb > eps) {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    let c = dot / (na * nb).sqrt();
    if !c.is_finite() {
        return Err(Error::NonFinite { op: "cosine" });
    }
    Ok(c.max(-T::one()).min(T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    /// Central finite differences of `f` around `x`, in f64.
    fn numeric_grad(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.numel());
        for i in 0..x.numel() {
            let h = 1e-6 * x.data()[i].abs().max(1.0);
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            out.push((f(&xp) - f(&xm)) / (2.0 * h));
        }
        out
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        diff / scale.max(1e-12)
    }

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(t64(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let p = tape.matmul(i2, i2).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 0., 0., 1.]);

        let a = tape.constant(t64(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let b = tape.constant(t64(&[2, 1], &[1., 1.])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3., 7.]);

        let bad = tape.matmul(b, b);
        assert!(matches!(bad, Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rnd = lcg(seed);
            let a = t64(&[3, 4], &(0..12).map(|_| rnd()).collect::<Vec<_>>());
            let b = t64(&[4, 2], &(0..8).map(|_| rnd()).collect::<Vec<_>>());
            let w = t64(&[3, 2], &(0..6).map(|_| rnd()).collect::<Vec<_>>());
            let f = |a: &Tensor<f64>, b: &Tensor<f64>| {
                let mut tape = Tape::<f64>::new();
                let (va, vb, vw) = (tape.param(a.clone()).unwrap(), tape.param(b.clone()).unwrap(), tape.constant(w.clone()).unwrap());
                let p = tape.matmul(va, vb).unwrap();
                let q = tape.mul(p, vw).unwrap();
                let l = tape.sum(q).unwrap();
                (tape.value(l).item().unwrap(), tape.backward(l).unwrap(), va, vb)
            };
            let (_, grads, va, vb) = f(&a, &b);
            let ga = numeric_grad(&a, &|x| f(x, &b).0);
            let gb = numeric_grad(&b, &|x| f(&a, x).0);
            assert!(rel_err(grads.get(va).unwrap().data(), &ga) < 1e-5);
            assert!(rel_err(grads.get(vb).unwrap().data(), &gb) < 1e-5);
        }
    }

    #[test]
    fn conv1d_averaging_kernel_preserves_constants() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[10, 1], 2.5)).unwrap();
        let w = tape.constant(Tensor::full(&[5, 1, 1], 0.2)).unwrap();
        let y = tape.conv1d(x, w, 1, Padding::Same).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[10, 1]);
        for t in 2..8 {
            assert!((out.data()[t] - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1d_impulse_reproduces_kernel() {
        let mut tape = Tape::<f64>::new();
        let mut x = Tensor::zeros(&[9, 1]);
        x.data_mut()[4] = 1.0;
        let kernel = [1.0, 2.0, 3.0];
        let x = tape.constant(x).unwrap();
        let w = tape.constant(t64(&[3, 1, 1], &kernel)).unwrap();
        let y = tape.conv1d(x, w, 1, Padding::Same).unwrap();
        // cross-correlation: out[t] = Σ_j x[t + j - 1] w[j], so the impulse at 4
        // shows up reversed around it
        assert_eq!(&tape.value(y).data()[3..6], &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn conv1d_shape_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
        let w = tape.constant(Tensor::zeros(&[5, 2, 1])).unwrap();
        assert!(matches!(tape.conv1d(x, w, 1, Padding::None), Err(Error::Shape { .. })));
        let w_even = tape.constant(Tensor::zeros(&[2, 2, 1])).unwrap();
        assert!(tape.conv1d(x, w_even, 1, Padding::Same).is_err());
        let w_same = tape.constant(Tensor::zeros(&[5, 2, 4])).unwrap();
        let y = tape.conv1d(x, w_same, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 4]);
    }

    #[test]
    fn conv1d_gradient_matches_finite_differences() {
        for (seed, stride, padding) in [(1, 1, Padding::Same), (2, 2, Padding::Same), (3, 1, Padding::None), (4, 3, Padding::None)] {
            let mut rnd = lcg(seed);
            let x = t64(&[9, 2], &(0..18).map(|_| rnd()).collect::<Vec<_>>());
            let w = t64(&[3, 2, 3], &(0..18).map(|_| rnd()).collect::<Vec<_>>());
            let run = |x: &Tensor<f64>, w: &Tensor<f64>| {
                let mut tape = Tape::<f64>::new();
                let (vx, vw) = (tape.param(x.clone()).unwrap(), tape.param(w.clone()).unwrap());
                let y = tape.conv1d(vx, vw, stride, padding).unwrap();
                let y2 = tape.mul(y, y).unwrap();
                let l = tape.sum(y2).unwrap();
                (tape.value(l).item().unwrap(), tape.backward(l).unwrap(), vx, vw)
            };
            let (_, g, vx, vw) = run(&x, &w);
            let gx = numeric_grad(&x, &|v| run(v, &w).0);
            let gw = numeric_grad(&w, &|v| run(&x, v).0);
            assert!(rel_err(g.get(vx).unwrap().data(), &gx) < 1e-6);
            assert!(rel_err(g.get(vw).unwrap().data(), &gw) < 1e-6);
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[3], &[-1., 0., 2.])).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0., 0., 2.]);

        let m = tape.constant(t64(&[2, 2], &[1., 3., 5., 7.])).unwrap();
        let mean = tape.mean_axis(m, 0).unwrap();
        assert_eq!(tape.value(mean).data(), &[3., 5.]);
        let mean1 = tape.mean_axis(m, 1).unwrap();
        assert_eq!(tape.value(mean1).data(), &[2., 6.]);
        assert!(matches!(tape.mean_axis(m, 2), Err(Error::Shape { .. })));

        let s = tape.constant(Tensor::scalar(2.0)).unwrap();
        let p = tape.mul(m, s).unwrap();
        assert_eq!(tape.value(p).data(), &[2., 6., 10., 14.]);
        let v = tape.constant(t64(&[3], &[1., 1., 1.])).unwrap();
        assert!(tape.add(m, v).is_err());
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rnd = lcg(100 + seed);
            let a = t64(&[3, 4], &(0..12).map(|_| rnd() + 0.05).collect::<Vec<_>>());
            let b = t64(&[3, 4], &(0..12).map(|_| rnd()).collect::<Vec<_>>());
            let run = |a: &Tensor<f64>| {
                let mut tape = Tape::<f64>::new();
                let va = tape.param(a.clone()).unwrap();
                let vb = tape.constant(b.clone()).unwrap();
                let s = tape.add(va, vb).unwrap();
                let d = tape.sub(s, va).unwrap();
                let m = tape.mul(va, d).unwrap();
                let r = tape.relu(m).unwrap();
                let r2 = tape.mul(r, va).unwrap();
                let mm = tape.mean_axis(r2, 1).unwrap();
                let sc = tape.scale(mm, 3.0).unwrap();
                let l = tape.sum(sc).unwrap();
                (tape.value(l).item().unwrap(), tape.backward(l).unwrap(), va)
            };
            let (_, g, va) = run(&a);
            let num = numeric_grad(&a, &|x| run(x).0);
            assert!(rel_err(g.get(va).unwrap().data(), &num) < 1e-5, "seed {seed}");
        }
    }

    #[test]
    fn normalize_and_cosine() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[2], &[3., 4.])).unwrap();
        let n = tape.l2_normalize(x).unwrap();
        let out = tape.value(n).data().to_vec();
        assert!((out[0] - 0.6).abs() < 1e-15 && (out[1] - 0.8).abs() < 1e-15);
        let nn = tape.l2_normalize(n).unwrap();
        for (a, b) in tape.value(nn).data().iter().zip(&out) {
            assert!((a - b).abs() < 1e-15);
        }
        let z = tape.constant(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(tape.l2_normalize(z), Err(Error::Degenerate(_))));

        assert_eq!(cosine(&[0.3, -2.0, 7.0], &[0.3, -2.0, 7.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());

        let mut rnd = lcg(7);
        let v: Vec<f64> = (0..16).map(|_| rnd()).collect();
        let u = l2_normalize(&v).unwrap();
        assert!((u.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        assert!((cosine(&u, &v).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_and_cosine_gradients() {
        for seed in 0..20 {
            let mut rnd = lcg(300 + seed);
            let a = t64(&[5], &(0..5).map(|_| rnd()).collect::<Vec<_>>());
            let b = t64(&[5], &(0..5).map(|_| rnd()).collect::<Vec<_>>());
            let run = |a: &Tensor<f64>, b: &Tensor<f64>| {
                let mut tape = Tape::<f64>::new();
                let (va, vb) = (tape.param(a.clone()).unwrap(), tape.param(b.clone()).unwrap());
                let c = tape.cosine(va, vb).unwrap();
                (tape.value(c).item().unwrap(), tape.backward(c).unwrap(), va, vb)
            };
            let (_, g, va, vb) = run(&a, &b);
            assert!(rel_err(g.get(va).unwrap().data(), &numeric_grad(&a, &|x| run(x, &b).0)) < 1e-5);
            assert!(rel_err(g.get(vb).unwrap().data(), &numeric_grad(&b, &|x| run(&a, x).0)) < 1e-5);
        }
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(&[3], &[1., -2., 5.])).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1., 1., 1.]);

        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(&[3], &[1., -2., 5.])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2., -4., 10.]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::<f64>::new();
        assert!(matches!(tape.backward(Var(7)), Err(Error::Tape(_))));

        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(&[2], &[1., 2.])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));

        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(&[2], &[1., 2.])).unwrap();
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::Tape(_))));
        assert!(tape.constant(Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(f64::MAX)).unwrap();
        assert!(matches!(tape.mul(x, x), Err(Error::NonFinite { op: "mul" })));
        assert!(tape.constant(Tensor::scalar(f64::NAN)).is_err());
    }

    #[test]
    fn local_mean_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[3, 1], &[1., 2., 6.])).unwrap();
        let y = tape.local_mean(x, 11).unwrap();
        assert_eq!(tape.value(y).data(), &[3., 3., 3.]);
        let id = tape.local_mean(x, 1).unwrap();
        assert_eq!(tape.value(id).data(), &[1., 2., 6.]);
        assert!(tape.local_mean(x, 4).is_err());
    }

    #[test]
    fn structured_op_gradients() {
        for seed in 0..20 {
            let mut rnd = lcg(500 + seed);
            let frames = t64(&[6, 4], &(0..24).map(|_| rnd()).collect::<Vec<_>>());
            let targets = t64(&[2, 2], &(0..4).map(|_| rnd()).collect::<Vec<_>>());
            let weights: Vec<f64> = (0..24).map(|_| rnd()).collect();
            let run = |f: &Tensor<f64>, t: &Tensor<f64>| {
                let mut tape = Tape::<f64>::new();
                let (vf, vt) = (tape.param(f.clone()).unwrap(), tape.param(t.clone()).unwrap());
                let lm = tape.local_mean(vf, 3).unwrap();
                let d = tape.pairwise_sq_dist(lm, vt).unwrap();
                let w = tape.constant(t64(&[6, 2, 2], &weights)).unwrap();
                let dw = tape.mul(d, w).unwrap();
                let gsel = tape.gather(dw, vec![0, 3, 5, 6, 9, 23, 23]).unwrap();
                let l = tape.sum(gsel).unwrap();
                (tape.value(l).item().unwrap(), tape.backward(l).unwrap(), vf, vt)
            };
            let (_, g, vf, vt) = run(&frames, &targets);
            assert!(rel_err(g.get(vf).unwrap().data(), &numeric_grad(&frames, &|x| run(x, &targets).0)) < 1e-5);
            assert!(rel_err(g.get(vt).unwrap().data(), &numeric_grad(&targets, &|x| run(&frames, x).0)) < 1e-5);
        }
    }

    #[test]
    fn aam_ce_gradient_and_transpose() {
        for seed in 0..20 {
            let mut rnd = lcg(700 + seed);
            let d = t64(&[3, 4], &(0..12).map(|_| rnd()).collect::<Vec<_>>());
            let w = t64(&[5, 4], &(0..20).map(|_| rnd()).collect::<Vec<_>>());
            let run = |d: &Tensor<f64>, w: &Tensor<f64>| {
                let mut tape = Tape::<f64>::new();
                let (vd, vw) = (tape.param(d.clone()).unwrap(), tape.param(w.clone()).unwrap());
                let nd = tape.l2_normalize(vd).unwrap();
                let nw = tape.l2_normalize(vw).unwrap();
                let wt = tape.transpose(nw).unwrap();
                let cos = tape.matmul(nd, wt).unwrap();
                let ce = tape.aam_ce(cos, vec![(0, 1), (1, 4), (2, 0), (0, 3)], 4.0, 0.2).unwrap();
                let l = tape.sum(ce).unwrap();
                (tape.value(l).item().unwrap(), tape.backward(l).unwrap(), vd, vw)
            };
            let (_, g, vd, vw) = run(&d, &w);
            assert!(rel_err(g.get(vd).unwrap().data(), &numeric_grad(&d, &|x| run(x, &w).0)) < 1e-5);
            assert!(rel_err(g.get(vw).unwrap().data(), &numeric_grad(&w, &|x| run(&d, x).0)) < 1e-5);
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut rnd = lcg(42);
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::new(vec![20, 3], (0..60).map(|_| rnd() as f32).collect()).unwrap()).unwrap();
            let w = tape.param(Tensor::new(vec![5, 3, 4], (0..60).map(|_| rnd() as f32).collect()).unwrap()).unwrap();
            let y = tape.conv1d(x, w, 1, Padding::Same).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(), run());
    }
}
