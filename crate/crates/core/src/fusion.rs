//! Gradient-weighted fusion of boundary and soft-attention features.
//!
//! `F_fuse = (1 - g_w) ⊙ f_wav + (1 - g_sa) ⊙ f_sa`, where `g_*` are
//! min-max normalized gradient magnitudes of each branch. A branch whose
//! features receive large gradients is down-weighted.
//!
//! The weights used at step `t` are an exponential moving average of the
//! gradients captured at earlier steps. An untrained state is all zeros, so
//! the first step (and inference from a fresh model) fuses by plain sum.

use crate::tape::{Tape, Var};
use crate::{Error, Real, Result, Tensor};

pub const DEFAULT_DECAY: f64 = 0.9;
const NORM_EPS: f64 = 1e-8;

/// `(|g| - min|g|) / (max|g| - min|g| + 1e-8)` over the whole tensor; a
/// constant tensor maps to zeros.
pub fn normalize_gradients<T: Real>(raw: &Tensor<T>) -> Tensor<T> {
    let abs = raw.map(|v| v.abs());
    let (lo, hi) = abs
        .data()
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi <= lo {
        return Tensor::zeros(raw.shape());
    }
    let denom = hi - lo + T::of(NORM_EPS);
    abs.map(|v| ((v - lo) / denom).min(T::one()))
}

/// Persisted fusion weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionState<T: Real = f32> {
    pub g_w_ema: Tensor<T>,
    pub g_sa_ema: Tensor<T>,
    pub decay: T,
    pub initialized: bool,
}

impl<T: Real> FusionState<T> {
    pub fn new(shape: &[usize], decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Config(format!("fusion decay must be in (0, 1), got {decay}")));
        }
        Ok(Self {
            g_w_ema: Tensor::zeros(shape),
            g_sa_ema: Tensor::zeros(shape),
            decay: T::of(decay),
            initialized: false,
        })
    }

    pub fn shape(&self) -> &[usize] {
        self.g_w_ema.shape()
    }

    /// `ĝ ← decay·ĝ + (1 - decay)·normalize(grad)` for both branches.
    pub fn update(&mut self, grad_f_wav: &Tensor<T>, grad_f_sa: &Tensor<T>) -> Result<()> {
        self.g_w_ema.expect_same_shape(grad_f_wav, "update_fusion_state")?;
        self.g_sa_ema.expect_same_shape(grad_f_sa, "update_fusion_state")?;
        let d = self.decay;
        let blend = |ema: &mut Tensor<T>, g: &Tensor<T>| {
            let n = normalize_gradients(g);
            for (e, &v) in ema.data_mut().iter_mut().zip(n.data()) {
                *e = (d * *e + (T::one() - d) * v).min(T::one()).max(T::zero());
            }
        };
        blend(&mut self.g_w_ema, grad_f_wav);
        blend(&mut self.g_sa_ema, grad_f_sa);
        self.initialized = true;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> FusionState<U> {
        FusionState {
            g_w_ema: self.g_w_ema.cast(),
            g_sa_ema: self.g_sa_ema.cast(),
            decay: U::of(self.decay.as_f64()),
            initialized: self.initialized,
        }
    }
}

pub fn update_fusion_state<T: Real>(
    state: &mut FusionState<T>,
    grad_f_wav: &Tensor<T>,
    grad_f_sa: &Tensor<T>,
) -> Result<()> {
    state.update(grad_f_wav, grad_f_sa)
}

fn check_weights<T: Real>(g: &Tensor<T>) -> Result<()> {
    if let Some(bad) = g.data().iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::OutOfRange {
            op: "fuse",
            detail: format!("fusion weight {bad} outside [0, 1]"),
        });
    }
    Ok(())
}

/// Eq.-style fusion on plain tensors.
pub fn fuse<T: Real>(f_wav: &Tensor<T>, f_sa: &Tensor<T>, g_w: &Tensor<T>, g_sa: &Tensor<T>) -> Result<Tensor<T>> {
    for t in [f_sa, g_w, g_sa] {
        f_wav.expect_same_shape(t, "fuse")?;
    }
    check_weights(g_w)?;
    check_weights(g_sa)?;
    Ok(Tensor::from_fn(f_wav.shape(), |i| {
        let one = T::one();
        (one - g_w.data()[i]) * f_wav.data()[i] + (one - g_sa.data()[i]) * f_sa.data()[i]
    }))
}

/// Differentiable fusion; the weights enter as constants, so no gradient
/// reaches them.
pub fn fuse_on<T: Real>(tape: &mut Tape<T>, f_wav: Var, f_sa: Var, g_w: &Tensor<T>, g_sa: &Tensor<T>) -> Result<Var> {
    tape.value(f_wav).expect_same_shape(tape.value(f_sa), "fuse")?;
    tape.value(f_wav).expect_same_shape(g_w, "fuse")?;
    tape.value(f_wav).expect_same_shape(g_sa, "fuse")?;
    if tape.is_checked() {
        check_weights(g_w)?;
        check_weights(g_sa)?;
    }
    let w_wav = tape.constant(g_w.map(|v| T::one() - v));
    let w_sa = tape.constant(g_sa.map(|v| T::one() - v));
    let a = tape.mul(f_wav, w_wav)?;
    let b = tape.mul(f_sa, w_sa)?;
    tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_cases() {
        let z = normalize_gradients(&Tensor::<f64>::zeros(&[5]));
        assert!(z.data().iter().all(|&v| v == 0.0));
        let g = normalize_gradients(&Tensor::<f64>::from_f64(&[3], &[-2.0, 0.0, 2.0]).unwrap());
        assert!((g.data()[0] - 1.0).abs() < 1e-7);
        assert_eq!(g.data()[1], 0.0);
        assert!((g.data()[2] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn fuse_worked_example() {
        let s = [2, 2, 2];
        let f = fuse(
            &Tensor::<f64>::full(&s, 2.0),
            &Tensor::full(&s, 4.0),
            &Tensor::full(&s, 0.5),
            &Tensor::full(&s, 0.25),
        )
        .unwrap();
        assert!(f.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn fuse_rejects_bad_inputs() {
        let s = [2, 2, 1];
        let one = Tensor::<f64>::ones(&s);
        assert!(fuse(&one, &Tensor::ones(&[2, 2, 2]), &one, &one).is_err());
        assert!(matches!(
            fuse(&one, &one, &Tensor::full(&s, 1.5), &one),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn first_update_is_a_tenth() {
        let mut st = FusionState::<f64>::new(&[3], 0.9).unwrap();
        assert!(!st.initialized);
        let raw = Tensor::from_f64(&[3], &[0.5, -1.0, 0.25]).unwrap();
        st.update(&raw, &raw).unwrap();
        let g = normalize_gradients(&raw);
        for (e, n) in st.g_w_ema.data().iter().zip(g.data()) {
            assert!((e - 0.1 * n).abs() < 1e-15);
        }
        assert!(st.initialized);
        assert!(st.update(&Tensor::zeros(&[4]), &raw).is_err());
    }

    #[test]
    fn decay_validated() {
        assert!(FusionState::<f32>::new(&[1], 1.0).is_err());
        assert!(FusionState::<f32>::new(&[1], 0.0).is_err());
    }
}
