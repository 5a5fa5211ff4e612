use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::real::Real;

/// Exponential moving average of a parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState<T> {
    pub shadow: ParamSet<T>,
    pub decay: f64,
}

impl<T: Real> EmaState<T> {
    pub fn new(params: &ParamSet<T>, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("ema decay {decay} outside [0, 1)")));
        }
        Ok(Self { shadow: params.clone(), decay })
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`.
    pub fn update(&mut self, params: &ParamSet<T>) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::shape("ema shadow does not match parameters"));
        }
        let (d, one_d) = (T::lit(self.decay), T::lit(1.0 - self.decay));
        for (s, p) in self.shadow.tensors_mut().iter_mut().zip(params.tensors()) {
            if s.shape() != p.shape() {
                return Err(Error::shape("ema shadow does not match parameters"));
            }
            for (a, &b) in s.data.iter_mut().zip(&p.data) {
                *a = d * *a + one_d * b;
            }
        }
        Ok(())
    }
}

pub fn ema_update<T: Real>(mut ema: EmaState<T>, params: &ParamSet<T>) -> Result<EmaState<T>> {
    ema.update(params)?;
    Ok(ema)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn set(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.add("w", Tensor::new(1, 2, vec![v, -v]));
        p
    }

    #[test]
    fn zero_decay_copies() {
        let ema = ema_update(EmaState::new(&set(1.0), 0.0).unwrap(), &set(3.0)).unwrap();
        assert_eq!(ema.shadow, set(3.0));
    }

    #[test]
    fn near_one_decay_barely_moves() {
        let ema = ema_update(EmaState::new(&set(1.0), 1.0 - 1e-12).unwrap(), &set(5.0)).unwrap();
        let v = ema.shadow.tensors()[0].data[0];
        assert!((v - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn geometric_convergence() {
        let decay = 0.8;
        let mut ema = EmaState::new(&set(0.0), decay).unwrap();
        let target = set(2.0);
        let mut prev_err = 2.0;
        for _ in 0..20 {
            ema.update(&target).unwrap();
            let err = 2.0 - ema.shadow.tensors()[0].data[0];
            assert!((err / prev_err - decay).abs() < 1e-10);
            prev_err = err;
        }
    }

    #[test]
    fn rejects_bad_decay_and_shapes() {
        assert!(EmaState::new(&set(0.0), 1.0).is_err());
        let mut ema = EmaState::new(&set(0.0), 0.5).unwrap();
        let mut other = ParamSet::new();
        other.add("w", Tensor::zeros(2, 2));
        assert!(ema.update(&other).is_err());
    }
}
