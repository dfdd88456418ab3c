use std::collections::BTreeMap;

use super::ScheduleConfig;
use crate::error::{Error, Result};
use crate::model::{Param, ParamGroup};
use crate::scalar::Scalar;

/// Learning-rate multiplier per parameter group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupMultipliers([f64; 7]);

impl GroupMultipliers {
    pub fn ones() -> Self {
        Self([1.0; 7])
    }

    pub fn from_fn(f: impl Fn(ParamGroup) -> f64) -> Self {
        Self(ParamGroup::ALL.map(f))
    }

    pub fn get(&self, g: ParamGroup) -> f64 {
        self.0[g as usize]
    }

    pub fn set(&mut self, g: ParamGroup, v: f64) {
        self.0[g as usize] = v;
    }

    pub fn to_map(&self) -> BTreeMap<String, f64> {
        ParamGroup::ALL.iter().map(|&g| (g.name().to_string(), self.get(g))).collect()
    }
}

/// First and second moments per parameter plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

/// One decoupled-weight-decay Adam update with bias-corrected moments.
/// Rejects the whole step, leaving everything untouched, if any gradient is non-finite.
/// An update that overflows is reported after the fact; callers roll back from a snapshot.
pub fn adamw_step<T: Scalar>(
    params: &mut [Param<T>],
    grads: &[Option<&[T]>],
    opt: &mut OptimizerState<T>,
    base_lr: f64,
    mult: &GroupMultipliers,
    cfg: &ScheduleConfig,
) -> Result<()> {
    if grads.len() != params.len() || opt.m.len() != params.len() {
        return Err(Error::Usage("gradient/optimizer state does not match parameters".into()));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.len() != p.value.numel() {
                return Err(Error::Config(format!("gradient for {} has {} entries", p.name, g.len())));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "adamw_step", detail: format!("gradient of {} at {i}", p.name) });
            }
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut overflow = None;
    for (i, p) in params.iter_mut().enumerate() {
        let lr = base_lr * mult.get(p.group);
        let decay = if p.decay || cfg.decay_all { 1.0 - lr * cfg.weight_decay } else { 1.0 };
        let (m, v) = (&mut opt.m[i], &mut opt.v[i]);
        let data = p.value.data_mut();
        for j in 0..data.len() {
            let g = grads[i].map_or(0.0, |g| g[j].f64());
            let mj = b1 * m[j].f64() + (1.0 - b1) * g;
            let vj = b2 * v[j].f64() + (1.0 - b2) * g * g;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            let w = data[j].f64() * decay - lr * (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
            data[j] = T::of(w);
            if overflow.is_none() && !data[j].is_finite() {
                overflow = Some(format!("{} at {j}", p.name));
            }
        }
    }
    match overflow {
        Some(detail) => Err(Error::NonFinite { op: "adamw_step", detail }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn scalar_param(v: f64, group: ParamGroup, decay: bool) -> Param<f64> {
        Param { name: "p".into(), value: Tensor::new([1], vec![v]).unwrap(), group, decay }
    }

    /// Textbook AdamW on one scalar, written out step by step.
    fn oracle(mut w: f64, grads: &[f64], lrs: &[f64], b1: f64, b2: f64, wd: f64, eps: f64) -> f64 {
        let (mut m, mut v) = (0.0, 0.0);
        for (k, (&g, &lr)) in grads.iter().zip(lrs).enumerate() {
            let t = (k + 1) as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powf(t));
            let vhat = v / (1.0 - b2.powf(t));
            w -= lr * wd * w;
            w -= lr * mhat / (vhat.sqrt() + eps);
        }
        w
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut cfg = ScheduleConfig::new(1e-3, 10);
        cfg.weight_decay = 0.0;
        let mut ps = vec![scalar_param(0.7, ParamGroup::Ffn, true)];
        let mut st = OptimizerState::new(&ps);
        let g = [0.0];
        adamw_step(&mut ps, &[Some(&g[..])], &mut st, 1e-3, &GroupMultipliers::ones(), &cfg).unwrap();
        assert_eq!(ps[0].value.data()[0], 0.7);
    }

    #[test]
    fn zero_multiplier_freezes_group() {
        let cfg = ScheduleConfig::new(1e-3, 10);
        let mut ps = vec![scalar_param(0.7, ParamGroup::UpperQk, true), scalar_param(0.7, ParamGroup::Ffn, true)];
        let mut st = OptimizerState::new(&ps);
        let mut mult = GroupMultipliers::ones();
        mult.set(ParamGroup::UpperQk, 0.0);
        let g = [0.3];
        adamw_step(&mut ps, &[Some(&g[..]), Some(&g[..])], &mut st, 1e-2, &mult, &cfg).unwrap();
        assert_eq!(ps[0].value.data()[0], 0.7);
        assert_ne!(ps[1].value.data()[0], 0.7);
    }

    #[test]
    fn two_step_hand_algebra() {
        let cfg = ScheduleConfig::new(0.1, 10);
        let mut ps = vec![scalar_param(1.0, ParamGroup::Ffn, true)];
        let mut st = OptimizerState::new(&ps);
        let lr = 0.1;
        for g in [1.0, -1.0] {
            let gg = [g];
            adamw_step(&mut ps, &[Some(&gg[..])], &mut st, lr, &GroupMultipliers::ones(), &cfg).unwrap();
        }
        // step 1: m̂ = 1, v̂ = 1 → w = 1·(1 − 0.01) − 0.1·1/(1 + 1e-8)
        let w1 = 0.99 - 0.1 / (1.0 + 1e-8);
        // step 2: m = 0.9·0.1 − 0.1 = −0.01, v = 0.95·0.05 + 0.05 = 0.0975
        let mhat = -0.01 / (1.0 - 0.81);
        let vhat: f64 = 0.0975 / (1.0 - 0.9025);
        let w2 = w1 * 0.99 - 0.1 * mhat / (vhat.sqrt() + 1e-8);
        assert!((ps[0].value.data()[0] - w2).abs() < 1e-12);
    }

    #[test]
    fn matches_oracle_on_random_trajectories() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = ScheduleConfig::new(1e-2, 100);
        for _ in 0..100 {
            let len = rng.gen_range(1..40);
            let grads: Vec<f64> = (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let lrs: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1e-2)).collect();
            let mult = rng.gen_range(0.1..1.0);
            let w0 = rng.gen_range(-2.0..2.0);
            let mut ps = vec![scalar_param(w0, ParamGroup::UpperQk, true)];
            let mut st = OptimizerState::new(&ps);
            let mut gm = GroupMultipliers::ones();
            gm.set(ParamGroup::UpperQk, mult);
            for (g, lr) in grads.iter().zip(&lrs) {
                let gg = [*g];
                adamw_step(&mut ps, &[Some(&gg[..])], &mut st, *lr, &gm, &cfg).unwrap();
            }
            let eff: Vec<f64> = lrs.iter().map(|l| l * mult).collect();
            let want = oracle(w0, &grads, &eff, 0.9, 0.95, 0.1, 1e-8);
            assert!((ps[0].value.data()[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn exempt_parameters_skip_decay() {
        let cfg = ScheduleConfig::new(1e-1, 10);
        let mut ps = vec![scalar_param(1.0, ParamGroup::Norms, false)];
        let mut st = OptimizerState::new(&ps);
        let g = [0.0];
        adamw_step(&mut ps, &[Some(&g[..])], &mut st, 0.1, &GroupMultipliers::ones(), &cfg).unwrap();
        assert_eq!(ps[0].value.data()[0], 1.0);
    }

    #[test]
    fn non_finite_gradient_aborts_without_touching_state() {
        let cfg = ScheduleConfig::new(1e-1, 10);
        let mut ps = vec![scalar_param(1.0, ParamGroup::Ffn, true)];
        let mut st = OptimizerState::new(&ps);
        let g = [f64::NAN];
        let r = adamw_step(&mut ps, &[Some(&g[..])], &mut st, 0.1, &GroupMultipliers::ones(), &cfg);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
        assert_eq!(st.step, 0);
        assert_eq!(ps[0].value.data()[0], 1.0);
    }
}
