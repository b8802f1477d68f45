//! Straight-path flow matching over the three-component target space:
//! interpolants, constant velocity targets, the per-component weighted loss and
//! a fixed-step Euler sampler.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedspace::{ConditioningSequence, TargetEmbedding};
use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_STEPS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x0: TargetEmbedding,
    pub x1: TargetEmbedding,
    /// One time shared by all three components.
    pub t: f64,
    pub xt: TargetEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_cls: f64,
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_p: 0.4, lambda_cls: 0.3, lambda_reg: 0.3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_p, self.lambda_cls, self.lambda_reg];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().all(|&v| v == 0.0) {
            return Err(Error::Config(format!("loss weights must be nonnegative and not all zero, got {w:?}")));
        }
        Ok(())
    }
}

/// Per-component losses before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ComponentLosses {
    pub patch: f64,
    pub cls: f64,
    pub reg: f64,
}

impl ComponentLosses {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.lambda_p * self.patch + w.lambda_cls * self.cls + w.lambda_reg * self.reg
    }
}

/// Standard-normal triple drawn in storage order (patches, cls, registers).
pub fn gaussian_like(x: &TargetEmbedding, rng: &mut impl Rng) -> TargetEmbedding {
    let mut noise = || rng.sample::<f32, _>(StandardNormal);
    TargetEmbedding {
        patches: x.patches.mapv(|_| noise()),
        cls: x.cls.mapv(|_| noise()),
        registers: x.registers.mapv(|_| noise()),
    }
}

/// `t * x1 + (1 - t) * x0`, elementwise.
pub fn interpolate(x0: &TargetEmbedding, x1: &TargetEmbedding, t: f64) -> Result<TargetEmbedding> {
    let (a, b) = (t as f32, (1.0 - t) as f32);
    x1.zip_map(x0, |p, q| a * p + b * q)
}

pub fn make_flow_sample(x1: &TargetEmbedding, t: f64, rng: &mut impl Rng) -> Result<FlowSample> {
    check_t(t)?;
    let x0 = gaussian_like(x1, rng);
    let xt = interpolate(&x0, x1, t)?;
    Ok(FlowSample { x0, x1: x1.clone(), t, xt })
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Range(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

/// `x1 - x0`; the straight path has the same velocity at every `t`.
pub fn velocity_target(fs: &FlowSample) -> TargetEmbedding {
    fs.x1.zip_map(&fs.x0, |a, b| a - b).expect("flow sample components agree")
}

fn mean_sq_diff<'a>(pred: impl Iterator<Item = &'a f32>, target: impl Iterator<Item = &'a f32>, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    pred.zip(target).map(|(&p, &u)| (f64::from(p) - f64::from(u)).powi(2)).sum::<f64>() / n as f64
}

/// Mean squared velocity error of each component.
pub fn component_losses(pred: &TargetEmbedding, fs: &FlowSample) -> Result<ComponentLosses> {
    if !pred.same_shape(&fs.x1) {
        return Err(Error::shape(format!("prediction {:?} vs target {:?}", pred.dims(), fs.x1.dims())));
    }
    let u = velocity_target(fs);
    Ok(ComponentLosses {
        patch: mean_sq_diff(pred.patches.iter(), u.patches.iter(), u.patches.len()),
        cls: mean_sq_diff(pred.cls.iter(), u.cls.iter(), u.cls.len()),
        reg: mean_sq_diff(pred.registers.iter(), u.registers.iter(), u.registers.len()),
    })
}

/// `sum_k lambda_k * mean((pred_k - (x1_k - x0_k))^2)`.
pub fn flow_loss(pred: &TargetEmbedding, fs: &FlowSample, w: &LossWeights) -> Result<f64> {
    Ok(component_losses(pred, fs)?.weighted(w))
}

pub fn sample_t(rng: &mut impl Rng) -> f64 {
    rng.random_range(0.0..=1.0)
}

/// Anything that predicts a velocity triple for a noisy triple at time `t`.
pub trait VelocityModel {
    /// `(h, w, d_img, n_reg)` of the triples this model consumes and emits.
    fn dims(&self) -> (usize, usize, usize, usize);

    fn velocity(&self, x: &TargetEmbedding, t: f64, c: &ConditioningSequence) -> Result<TargetEmbedding>;

    /// One velocity per `(x, c)` pair at a shared `t`. Override to batch.
    fn velocity_batch(&self, xs: &[TargetEmbedding], t: f64, cs: &[&ConditioningSequence]) -> Result<Vec<TargetEmbedding>> {
        xs.iter().zip(cs).map(|(x, c)| self.velocity(x, t, c)).collect()
    }
}

/// Euler integration from noise: `x += v(x, k / n, c) / n` for `k = 0..n`.
pub fn sample<M: VelocityModel + ?Sized>(
    model: &M,
    c: &ConditioningSequence,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<TargetEmbedding> {
    Ok(sample_batch(model, &[c], steps, rng)?.remove(0))
}

/// [`sample`] for several conditionings at once. Noise is drawn per item in
/// order, so item `i` matches what sequential calls would produce.
pub fn sample_batch<M: VelocityModel + ?Sized>(
    model: &M,
    cs: &[&ConditioningSequence],
    steps: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TargetEmbedding>> {
    if steps == 0 {
        return Err(Error::Range("sampler needs at least one step".into()));
    }
    let dims = model.dims();
    let (h, w, d, n_reg) = dims;
    let template = TargetEmbedding::from_values(dims, std::iter::repeat_n(0.0, (h * w + 1 + n_reg) * d))?;
    // The state is integrated in f64 so that rounding does not grow with the step count.
    let mut state: Vec<Vec<f64>> =
        cs.iter().map(|_| gaussian_like(&template, rng).values().map(|&v| f64::from(v)).collect()).collect();
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let xs = state
            .iter()
            .map(|s| TargetEmbedding::from_values(dims, s.iter().map(|&v| v as f32)))
            .collect::<Result<Vec<_>>>()?;
        let vs = model.velocity_batch(&xs, t, cs)?;
        for (s, v) in state.iter_mut().zip(&vs) {
            if !v.same_shape(&template) {
                return Err(Error::shape(format!("model returned {:?}, expected {:?}", v.dims(), dims)));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("velocity at step {k} (t = {t})")));
            }
            for (x, &dv) in s.iter_mut().zip(v.values()) {
                *x += dt * f64::from(dv);
            }
        }
    }
    state.into_iter().map(|s| TargetEmbedding::from_values(dims, s.into_iter().map(|v| v as f32))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedspace::SpaceConfig;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> SpaceConfig {
        SpaceConfig { h: 3, w: 2, d_img: 5, n_reg: 2, s: 2, d_cond: 4 }
    }

    fn random(seed: u64) -> TargetEmbedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = TargetEmbedding::zeros(&cfg());
        let mut e = gaussian_like(&z, &mut rng);
        e.patches.mapv_inplace(|v| 2.0 * v + 0.5);
        e
    }

    fn cond() -> ConditioningSequence {
        ConditioningSequence { latents: Array2::zeros((2, 4)) }
    }

    fn bits(e: &TargetEmbedding) -> Vec<u32> {
        e.values().map(|v| v.to_bits()).collect()
    }

    /// Returns `target - x0` no matter where it is queried.
    struct ConstantVelocity(TargetEmbedding);

    impl VelocityModel for ConstantVelocity {
        fn dims(&self) -> (usize, usize, usize, usize) {
            self.0.dims()
        }

        fn velocity(&self, _: &TargetEmbedding, _: f64, _: &ConditioningSequence) -> Result<TargetEmbedding> {
            Ok(self.0.clone())
        }
    }

    struct Exploding;

    impl VelocityModel for Exploding {
        fn dims(&self) -> (usize, usize, usize, usize) {
            TargetEmbedding::zeros(&cfg()).dims()
        }

        fn velocity(&self, x: &TargetEmbedding, _: f64, _: &ConditioningSequence) -> Result<TargetEmbedding> {
            Ok(x.zip_map(x, |_, _| f32::NAN).unwrap())
        }
    }

    #[test]
    fn endpoints_are_exact() {
        let x1 = random(1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = make_flow_sample(&x1, 0.0, &mut rng).unwrap();
        assert_eq!(bits(&a.xt), bits(&a.x0));
        let b = make_flow_sample(&x1, 1.0, &mut rng).unwrap();
        assert_eq!(bits(&b.xt), bits(&x1));
    }

    #[test]
    fn midpoint_matches_independent_noise() {
        let x1 = random(1);
        let fs = make_flow_sample(&x1, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise: Vec<f32> = (0..x1.num_values()).map(|_| rng.sample(StandardNormal)).collect();
        for ((&xt, &x1v), &n) in fs.xt.values().zip(x1.values()).zip(&noise) {
            assert!((xt - 0.5 * (x1v + n)).abs() <= 1e-6 * (1.0 + xt.abs()));
        }
    }

    #[test]
    fn out_of_range_t_is_rejected() {
        let x1 = random(1);
        assert!(make_flow_sample(&x1, 1.5, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn velocity_target_is_subtraction_and_time_free() {
        let x1 = random(1);
        let mut fs = make_flow_sample(&x1, 0.1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let u = velocity_target(&fs);
        let brute: Vec<f32> = x1.values().zip(fs.x0.values()).map(|(a, b)| a - b).collect();
        assert_eq!(u.values().copied().collect::<Vec<_>>(), brute);
        fs.t = 0.9;
        assert_eq!(velocity_target(&fs), u);
        fs.x0 = x1.clone();
        assert!(velocity_target(&fs).values().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_fixtures() {
        let w = LossWeights::default();
        let x1 = random(2);
        let fs = make_flow_sample(&x1, 0.3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let u = velocity_target(&fs);
        assert_eq!(flow_loss(&u, &fs, &w).unwrap(), 0.0);
        let plus_one = u.zip_map(&u, |a, _| a + 1.0).unwrap();
        assert!((flow_loss(&plus_one, &fs, &w).unwrap() - 1.0).abs() < 1e-6);

        let zero = TargetEmbedding::zeros(&cfg());
        let ones = zero.zip_map(&zero, |_, _| 1.0).unwrap();
        let fs = FlowSample { x0: zero.clone(), x1: ones, t: 0.4, xt: zero.clone() };
        let w = LossWeights { lambda_p: 0.5, lambda_cls: 0.2, lambda_reg: 0.1 };
        assert!((flow_loss(&zero, &fs, &w).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn loss_shape_mismatch() {
        let x1 = random(2);
        let fs = make_flow_sample(&x1, 0.3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let other = TargetEmbedding::zeros(&SpaceConfig { n_reg: 1, ..cfg() });
        assert!(matches!(flow_loss(&other, &fs, &LossWeights::default()), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { lambda_p: 0.0, lambda_cls: 0.0, lambda_reg: 0.0 }.validate().is_err());
        assert!(LossWeights { lambda_p: -1.0, lambda_cls: 1.0, lambda_reg: 0.0 }.validate().is_err());
    }

    fn rel_err(a: &TargetEmbedding, b: &TargetEmbedding) -> f64 {
        let num: f64 = a.values().zip(b.values()).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum();
        let den: f64 = b.values().map(|&y| f64::from(y).powi(2)).sum();
        (num / den).sqrt()
    }

    #[test]
    fn constant_field_is_integrated_exactly() {
        let x1 = random(7);
        let template = TargetEmbedding::zeros(&cfg());
        for steps in [1, 7, 50] {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let x0 = gaussian_like(&template, &mut rng.clone());
            let oracle = ConstantVelocity(x1.zip_map(&x0, |a, b| a - b).unwrap());
            let out = sample(&oracle, &cond(), steps, &mut rng).unwrap();
            assert!(rel_err(&out, &x1) < 1e-6, "steps {steps}");
        }
    }

    #[test]
    fn one_step_is_x0_plus_velocity() {
        let template = TargetEmbedding::zeros(&cfg());
        let v = random(3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x0 = gaussian_like(&template, &mut rng.clone());
        let out = sample(&ConstantVelocity(v.clone()), &cond(), 1, &mut rng).unwrap();
        assert_eq!(out, x0.zip_map(&v, |a, b| a + b).unwrap());
    }

    #[test]
    fn sampling_is_reproducible_and_batch_consistent() {
        let m = ConstantVelocity(random(5));
        let c = cond();
        let a = sample_batch(&m, &[&c, &c], 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_batch(&m, &[&c, &c], 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let first = sample(&m, &c, 4, &mut rng).unwrap();
        let second = sample(&m, &c, 4, &mut rng).unwrap();
        assert_eq!(vec![first, second], a);
    }

    #[test]
    fn diverging_model_is_reported() {
        let r = sample(&Exploding, &cond(), 3, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert!(sample(&Exploding, &cond(), 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn uniform_time_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_t(&mut rng)).collect();
        assert!(draws.iter().all(|t| (0.0..=1.0).contains(t)));
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
        let mut again = ChaCha8Rng::seed_from_u64(77);
        assert_eq!(sample_t(&mut again), draws[0]);
    }

    proptest! {
        #[test]
        fn loss_is_nonnegative(seed in 0u64..10_000, t in 0.0f64..=1.0) {
            let x1 = random(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let fs = make_flow_sample(&x1, t, &mut rng).unwrap();
            let pred = gaussian_like(&x1, &mut rng);
            let l = flow_loss(&pred, &fs, &LossWeights::default()).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(flow_loss(&velocity_target(&fs), &fs, &LossWeights::default()).unwrap(), 0.0);
        }
    }
}
