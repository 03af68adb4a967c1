//! Cosine learning-rate schedule and momentum SGD with weight decay.

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `final + ½(base − final)(1 + cos(πt/T))`, written as a convex combination
/// so that both endpoints are returned exactly.
pub fn lr_at(t: u64, total: u64, base_lr: f64, final_lr: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::config("schedule needs at least one iteration"));
    }
    if t > total {
        return Err(Error::config(format!("iteration {t} beyond schedule length {total}")));
    }
    let w = 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos());
    Ok(base_lr * w + final_lr * (1.0 - w))
}

/// Momentum buffers mirroring the encoder, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    pub buffers: EncoderParams<T>,
    pub t: u64,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(params: &EncoderParams<T>) -> Self {
        Self {
            buffers: params.zeros_like(),
            t: 0,
        }
    }
}

/// `buf ← μ·buf + (g + wd·θ)`, `θ ← θ − lr·buf`.
///
/// Non-finite gradients abort the step before anything is modified.
pub fn sgd_step<T: Scalar>(
    params: &mut EncoderParams<T>,
    grads: &EncoderParams<T>,
    state: &mut SgdState<T>,
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    let shapes = |p: &EncoderParams<T>| p.tensors().iter().map(|t| t.len()).collect::<Vec<_>>();
    if shapes(params) != shapes(grads) || shapes(params) != shapes(&state.buffers) {
        return Err(Error::shape("gradient or optimizer buffers do not mirror the parameters"));
    }
    if !grads.all_finite() {
        return Err(Error::numeric("non-finite gradient"));
    }
    for ((p, g), b) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.buffers.tensors_mut())
    {
        for ((p, &g), b) in p.iter_mut().zip(g).zip(b.iter_mut()) {
            *b = momentum * *b + (g + weight_decay * *p);
            *p = *p - lr * *b;
        }
    }
    state.t += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderDims;
    use crate::rng::seeded;
    use rand::Rng as _;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let (base, fin) = (0.03, 3e-5);
        assert_eq!(lr_at(0, 1000, base, fin).unwrap(), base);
        assert_eq!(lr_at(1000, 1000, base, fin).unwrap(), fin);
        assert!((lr_at(500, 1000, base, fin).unwrap() - (base + fin) / 2.0).abs() < 1e-15);
        assert!(lr_at(1001, 1000, base, fin).is_err());
    }

    #[test]
    fn schedule_is_monotone() {
        let lrs: Vec<f64> = (0..=50).map(|t| lr_at(t, 50, 0.5, 0.01).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn tiny() -> EncoderParams<f64> {
        let dims = EncoderDims {
            input: 2,
            backbone: vec![3],
            head_hidden: 3,
            embed: 2,
        };
        EncoderParams::init(&dims, &mut seeded(1)).unwrap()
    }

    fn filled(p: &EncoderParams<f64>, v: f64) -> EncoderParams<f64> {
        let mut g = p.zeros_like();
        g.tensors_mut().into_iter().for_each(|t| t.fill(v));
        g
    }

    #[test]
    fn plain_gradient_descent() {
        let mut p = tiny();
        let before = p.clone();
        let g = filled(&p, 0.5);
        let mut s = SgdState::new(&p);
        sgd_step(&mut p, &g, &mut s, 0.1, 0.0, 0.0).unwrap();
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x, y - 0.1 * 0.5);
            }
        }
        assert_eq!(s.t, 1);
    }

    #[test]
    fn momentum_accumulates_geometrically() {
        let mut p = tiny();
        let g = filled(&p, 1.0);
        let mut s = SgdState::new(&p);
        sgd_step(&mut p, &g, &mut s, 0.1, 0.9, 0.0).unwrap();
        let mid = p.clone();
        sgd_step(&mut p, &g, &mut s, 0.1, 0.9, 0.0).unwrap();
        for (a, b) in p.tensors().iter().zip(mid.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((y - x - 0.1 * 1.9).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn randomized_step_matches_reference_recurrence() {
        let mut rng = seeded(77);
        let mut p32 = tiny().cast::<f32>();
        let mut reference: Vec<Vec<f64>> = p32.tensors().iter().map(|t| t.iter().map(|&x| x as f64).collect()).collect();
        let mut bufs: Vec<Vec<f64>> = reference.iter().map(|t| vec![0.0; t.len()]).collect();
        let mut s = SgdState::new(&p32);
        for _ in 0..5 {
            let mut g = p32.zeros_like();
            g.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0)));
            let (lr, mu, wd) = (0.05, 0.9, 1e-4);
            sgd_step(&mut p32, &g, &mut s, lr as f32, mu as f32, wd as f32).unwrap();
            for ((r, b), gt) in reference.iter_mut().zip(bufs.iter_mut()).zip(g.tensors()) {
                for ((r, b), &gv) in r.iter_mut().zip(b.iter_mut()).zip(gt) {
                    *b = mu * *b + (gv as f64 + wd * *r);
                    *r -= lr * *b;
                }
            }
        }
        for (a, r) in p32.tensors().iter().zip(&reference) {
            for (&x, &y) in a.iter().zip(r) {
                assert!((x as f64 - y).abs() < 1e-5, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_changes() {
        let mut p = tiny();
        let before = p.clone();
        let mut g = filled(&p, 0.0);
        g.tensors_mut()[1][0] = f64::NAN;
        let mut s = SgdState::new(&p);
        assert!(matches!(sgd_step(&mut p, &g, &mut s, 0.1, 0.9, 0.0), Err(Error::Numeric(_))));
        assert_eq!(p, before);
        assert_eq!(s.t, 0);
    }
}
