use crate::error::{Error, Result};
use crate::model::ParameterRegistry;
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moments and step count of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot<T: Scalar = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Number of updates applied to this tensor.
    pub t: u64,
}

/// Adam with bias correction. Each parameter keeps its own step count, so a
/// partition that sat frozen for a phase resumes with a correct correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar = f32> {
    slots: Vec<AdamSlot<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParameterRegistry<T>) -> Self {
        let slots = params
            .iter()
            .map(|(_, p)| AdamSlot { m: vec![T::zero(); p.tensor.len()], v: vec![T::zero(); p.tensor.len()], t: 0 })
            .collect();
        Adam { slots }
    }

    pub fn from_slots(params: &ParameterRegistry<T>, slots: Vec<AdamSlot<T>>) -> Result<Self> {
        let ok = slots.len() == params.len()
            && slots.iter().zip(params.iter()).all(|(s, (_, p))| s.m.len() == p.tensor.len() && s.v.len() == p.tensor.len());
        if !ok {
            return Err(Error::Config("optimizer state does not match the parameters".into()));
        }
        Ok(Adam { slots })
    }

    pub fn slots(&self) -> &[AdamSlot<T>] {
        &self.slots
    }

    /// Updates the parameters at `subset`, reading `grads[i]` for parameter `i`.
    pub fn step(
        &mut self,
        params: &mut ParameterRegistry<T>,
        subset: &[usize],
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        for &i in subset {
            let name = params.at(i).0;
            let Some(g) = grads.get(i).and_then(|g| g.as_ref()) else {
                return Err(Error::State(format!("no gradient for `{name}`")));
            };
            if g.len() != self.slots[i].m.len() {
                return Err(Error::State(format!("gradient for `{name}` has the wrong size")));
            }
        }
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let (lr, eps) = (T::of(lr), T::of(EPSILON));
        for &i in subset {
            let g = grads[i].as_ref().unwrap().data();
            let slot = &mut self.slots[i];
            slot.t += 1;
            let bc1 = T::of(1.0 - BETA1.powf(slot.t as f64));
            let bc2 = T::of(1.0 - BETA2.powf(slot.t as f64));
            let theta = params.at_mut(i).1.tensor.data_mut();
            for (k, &gk) in g.iter().enumerate() {
                slot.m[k] = b1 * slot.m[k] + c1 * gk;
                slot.v[k] = b2 * slot.v[k] + c2 * gk * gk;
                let m_hat = slot.m[k] / bc1;
                let v_hat = slot.v[k] / bc2;
                theta[k] = theta[k] - lr * (m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate: `base` until `decay_epoch`, then
/// `base / factor`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub decay_epoch: u64,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { base: 0.001, decay_epoch: 150, factor: 2.0 }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: u64) -> f64 {
        if epoch < self.decay_epoch {
            self.base
        } else {
            self.base / self.factor
        }
    }
}

pub fn lr_at(epoch: u64) -> f64 {
    LrSchedule::default().lr_at(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Partition;

    fn single(value: f64) -> ParameterRegistry<f64> {
        let mut r = ParameterRegistry::default();
        r.insert("w", Partition::ThetaBase, Tensor::full([1], value)).unwrap();
        r
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(0.5);
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &[0], &[Some(Tensor::full([1], 1.0))], 0.001).unwrap();
        let expect = 0.5 - 0.001 * (0.1 / (1.0 - 0.9)) / ((0.001f64 / (1.0 - 0.999)).sqrt() + 1e-8);
        assert!((p.at(0).1.tensor.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = single(0.25);
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &[0], &[Some(Tensor::zeros([1]))], 0.001).unwrap();
        assert_eq!(p.at(0).1.tensor.data()[0], 0.25);
        assert_eq!(adam.slots()[0].t, 1);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = single(0.0);
        let mut adam = Adam::new(&p);
        assert!(adam.step(&mut p, &[0], &[None], 0.001).is_err());
        assert_eq!(adam.slots()[0].t, 0);
    }

    #[test]
    fn schedule_boundaries() {
        assert_eq!(lr_at(0), 0.001);
        assert_eq!(lr_at(149), 0.001);
        assert_eq!(lr_at(150), 0.0005);
        assert_eq!(lr_at(10_000), 0.0005);
    }
}
