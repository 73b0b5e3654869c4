//! Rectified flow matching objective and the shared training loop.
//!
//! One loop drives all three stages. They differ only in how a training
//! draw is formed and which quantity is regressed:
//!
//! * [`Stage::Rfm`]: fresh Gaussian `x0`, `t ~ U(t_min, 1 - t_min)`, random
//!   condition dropout, target `x1 - x0`, loss weighted by `w(t)`;
//! * [`Stage::Reflow`]: stored `(x0', x̂1)`, same `t` law and weighting, the
//!   guided combination `γ v(c) + (1-γ) v(∅)` regressed toward `x̂1 - x0'`;
//! * [`Stage::Distill`]: `t = 0`, unweighted error between the one-step
//!   endpoint `x0' + v_cfg(x0', 0)` and `x̂1`.
//!
//! Squared norms are averaged over elements, so the loss scale does not
//! depend on sequence length.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::estimator::{self, ConditionSeq, Estimator, EstimatorConfig, LatentSeq};
use crate::exec::Executor;
use crate::graph::{Graph, Var};
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::real::Real;
use crate::rectify::ReflowTriplet;
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

/// Lower edge of the training time interval `(t_min, 1 - t_min)`.
pub const T_MIN: f64 = 1e-5;

/// A first-stage training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub x1: LatentSeq,
    pub c: ConditionSeq,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub cond_drop_prob: f64,
    pub reweight: bool,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 2000,
            lr: 1e-3,
            cond_drop_prob: 0.2,
            reweight: true,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(Error::Config(alloc::format!(
                "cond_drop_prob {} outside [0, 1]",
                self.cond_drop_prob
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip_norm: self.clip_norm,
        }
    }
}

/// `x_t = (1-t) x0 + t x1` and the target velocity `u = x1 - x0`.
pub fn interpolate(x0: &LatentSeq, x1: &LatentSeq, t: f64) -> Result<(LatentSeq, LatentSeq)> {
    if x0.shape() != x1.shape() {
        return Err(dim_err!(
            "noise {:?} and data {:?} differ in shape",
            x0.shape(),
            x1.shape()
        ));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(alloc::format!("t = {t} outside [0, 1]")));
    }
    let tf = t as f32;
    let xt = x0.zip_map(x1, |a, b| (1.0 - tf) * a + tf * b)?;
    let u = x0.zip_map(x1, |a, b| b - a)?;
    Ok((xt, u))
}

/// Logit-normal(0, 1) density,
/// `w(t) = 1/sqrt(2π) · 1/(t(1-t)) · exp(-(ln t - ln(1-t))² / 2)`.
pub fn logit_normal_weight(t: f64) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(alloc::format!(
            "logit-normal weight undefined at t = {t}"
        )));
    }
    let logit = libm::log(t) - libm::log(1.0 - t);
    Ok(1.0 / libm::sqrt(2.0 * core::f64::consts::PI) / (t * (1.0 - t)) * libm::exp(-0.5 * logit * logit))
}

/// Which regression a training step performs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stage {
    Rfm { cond_drop_prob: f64 },
    Reflow { gamma: f64 },
    Distill { gamma: f64 },
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Rfm { .. } => "rfm",
            Stage::Reflow { .. } => "reflow",
            Stage::Distill { .. } => "distill",
        }
    }
}

/// Training data: first-stage pairs or stored reflow triplets.
#[derive(Clone, Copy, Debug)]
pub enum TrainSource<'a> {
    Items(&'a [TrainItem]),
    Triplets(&'a [ReflowTriplet]),
}

impl TrainSource<'_> {
    pub fn len(&self) -> usize {
        match self {
            TrainSource::Items(v) => v.len(),
            TrainSource::Triplets(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A fully specified training example.
#[derive(Clone, Debug)]
pub struct Draw {
    pub x0: LatentSeq,
    pub x1: LatentSeq,
    pub c: ConditionSeq,
    pub t: f64,
}

/// Forms the draw for batch slot `slot` of step `step`.
///
/// Streams: `Batch(step, slot)` picks the item, `Time(step, slot)` the time,
/// `Noise(step, slot)` the noise, `Dropout(step, slot)` the null flag.
pub fn make_draw(source: TrainSource<'_>, stage: Stage, seed: u64, step: u64, slot: u64) -> Result<Draw> {
    if source.is_empty() {
        return Err(Error::Usage("empty training set".into()));
    }
    let idx = rng::stream(seed, Purpose::Batch, step, slot).random_range(0..source.len());
    let t = match stage {
        Stage::Distill { .. } => 0.0,
        _ => rng::uniform(&mut rng::stream(seed, Purpose::Time, step, slot), T_MIN, 1.0 - T_MIN),
    };
    match (source, stage) {
        (TrainSource::Items(items), Stage::Rfm { cond_drop_prob }) => {
            let item = &items[idx];
            let x0 = rng::normal_tensor(&mut rng::stream(seed, Purpose::Noise, step, slot), item.x1.shape());
            let drop = rng::stream(seed, Purpose::Dropout, step, slot).random::<f64>() < cond_drop_prob;
            let mut c = item.c.clone();
            c.null = c.null || drop;
            Ok(Draw {
                x0,
                x1: item.x1.clone(),
                c,
                t,
            })
        }
        (TrainSource::Triplets(tr), Stage::Reflow { .. } | Stage::Distill { .. }) => {
            let tr = &tr[idx];
            Ok(Draw {
                x0: tr.x0_prime.clone(),
                x1: tr.x1_hat.clone(),
                c: tr.c.clone(),
                t,
            })
        }
        (TrainSource::Items(_), _) => Err(Error::Usage(
            "reflow and distillation train on reflow triplets".into(),
        )),
        (TrainSource::Triplets(_), _) => Err(Error::Usage(
            "first-stage training uses data pairs, not triplets".into(),
        )),
    }
}

/// Anything that can build `v(x, t | c)` on a graph.
pub trait GraphField {
    fn build<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, t: f64, c: &Tensor<T>) -> Result<Var>;
}

impl GraphField for EstimatorConfig {
    fn build<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, t: f64, c: &Tensor<T>) -> Result<Var> {
        estimator::forward(g, self, x, t, c)
    }
}

fn guided_on_graph<T: Real, M: GraphField>(
    g: &mut Graph<'_, T>,
    model: &M,
    x: Var,
    t: f64,
    c: &ConditionSeq,
    gamma: f64,
) -> Result<Var> {
    let vc = model.build(g, x, t, &c.effective().cast())?;
    if gamma == 1.0 {
        return Ok(vc);
    }
    let vn = model.build(g, x, t, &c.to_null().effective().cast())?;
    g.axpby(gamma, vc, 1.0 - gamma, vn)
}

/// Loss of a single draw; `weight` maps `t` to the objective weight.
pub fn draw_loss<T: Real, M: GraphField>(
    g: &mut Graph<'_, T>,
    model: &M,
    stage: Stage,
    draw: &Draw,
    weight: impl Fn(f64) -> Result<f64>,
) -> Result<Var> {
    match stage {
        Stage::Rfm { .. } | Stage::Reflow { .. } => {
            let (xt, u) = interpolate(&draw.x0, &draw.x1, draw.t)?;
            let x = g.constant(xt.cast());
            let u = g.constant(u.cast());
            let v = match stage {
                Stage::Reflow { gamma } => guided_on_graph(g, model, x, draw.t, &draw.c, gamma)?,
                _ => model.build(g, x, draw.t, &draw.c.effective().cast())?,
            };
            let l = g.mse(v, u)?;
            g.scale(l, weight(draw.t)?)
        }
        Stage::Distill { gamma } => {
            let x0 = g.constant(draw.x0.cast());
            let x1 = g.constant(draw.x1.cast());
            let v = guided_on_graph(g, model, x0, 0.0, &draw.c, gamma)?;
            let endpoint = g.add(x0, v)?;
            g.mse(endpoint, x1)
        }
    }
}

/// Objective weight for `t` under a config.
pub fn weight_for(reweight: bool) -> impl Fn(f64) -> Result<f64> {
    move |t| if reweight { logit_normal_weight(t) } else { Ok(1.0) }
}

/// Batch loss value and its parameter gradients (index-aligned with the store).
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: f64,
    pub grads: Vec<Vec<f32>>,
}

/// Mean loss over `draws` and its gradient. Items may run on any worker;
/// gradients are summed in draw order.
pub fn batch_loss<E: Executor>(
    est: &Estimator,
    stage: Stage,
    draws: &[Draw],
    reweight: bool,
    exec: &E,
) -> Result<BatchLoss> {
    if draws.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let results = exec.map(draws.len(), |i| -> Result<(f64, Vec<Vec<f32>>)> {
        let mut g = Graph::with_params(&est.params);
        let l = draw_loss(&mut g, &est.cfg, stage, &draws[i], weight_for(reweight))?;
        let value = g.value(l)[0] as f64;
        let grads = g.backward(l)?.into_param_grads(&est.params);
        Ok((value, grads))
    });
    let inv = 1.0 / draws.len() as f64;
    let mut loss = 0.0f64;
    let mut acc: Option<Vec<Vec<f32>>> = None;
    for r in results {
        let (value, grads) = r?;
        loss += value;
        match acc.as_mut() {
            None => acc = Some(grads),
            Some(a) => {
                for (dst, src) in a.iter_mut().zip(&grads) {
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
    let mut grads = acc.expect("non-empty batch");
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v *= inv as f32;
        }
    }
    Ok(BatchLoss {
        loss: loss * inv,
        grads,
    })
}

/// First-stage loss for one batch: draws come from the `(seed, step)` streams.
pub fn rfm_loss<E: Executor>(
    est: &Estimator,
    items: &[TrainItem],
    cfg: &TrainConfig,
    step: u64,
    exec: &E,
) -> Result<BatchLoss> {
    let stage = Stage::Rfm {
        cond_drop_prob: cfg.cond_drop_prob,
    };
    let draws = step_draws(TrainSource::Items(items), stage, cfg, step)?;
    batch_loss(est, stage, &draws, cfg.reweight, exec)
}

pub fn step_draws(source: TrainSource<'_>, stage: Stage, cfg: &TrainConfig, step: u64) -> Result<Vec<Draw>> {
    (0..cfg.batch_size as u64)
        .map(|slot| make_draw(source, stage, cfg.seed, step, slot))
        .collect()
}

/// Per-step record passed to the observer.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub adam: AdamState,
}

/// Runs `cfg.steps` Adam steps of `stage` on `source`.
pub fn train<E: Executor>(
    est: &mut Estimator,
    source: TrainSource<'_>,
    stage: Stage,
    cfg: &TrainConfig,
    exec: &E,
    observer: &mut dyn FnMut(StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Usage("empty training set".into()));
    }
    let adam_cfg = cfg.adam();
    let mut adam = AdamState::new(&est.params);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let draws = step_draws(source, stage, cfg, step as u64)?;
        let BatchLoss { loss, mut grads } = batch_loss(est, stage, &draws, cfg.reweight, exec)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, lr: cfg.lr });
        }
        let grad_norm = match cfg.clip_norm {
            Some(max) => clip_global_norm(&mut grads, max),
            None => crate::optim::global_norm(&grads),
        };
        adam_step(&mut est.params, &grads, &mut adam, &adam_cfg)?;
        losses.push(loss);
        observer(StepRecord { step, loss, grad_norm });
    }
    Ok(TrainOutcome { losses, adam })
}

/// Fraction of null conditions among `n` first-stage draws (dropout check).
pub fn dropout_rate(items: &[TrainItem], cond_drop_prob: f64, seed: u64, n: usize) -> Result<f64> {
    let stage = Stage::Rfm { cond_drop_prob };
    let mut nulls = 0usize;
    for i in 0..n {
        let d = make_draw(TrainSource::Items(items), stage, seed, (i / 32) as u64, (i % 32) as u64)?;
        nulls += d.c.null as usize;
    }
    Ok(nulls as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Sequential;
    use alloc::vec;

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let x0 = Tensor::new(vec![1, 2], vec![0.0f32, 0.0]).unwrap();
        let x1 = Tensor::new(vec![1, 2], vec![2.0f32, 4.0]).unwrap();
        let (xt, u) = interpolate(&x0, &x1, 0.5).unwrap();
        assert_eq!(xt.data(), &[1.0, 2.0]);
        assert_eq!(u.data(), &[2.0, 4.0]);
        let a = Tensor::new(vec![1, 2], vec![0.3f32, -1.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![1.5f32, 2.0]).unwrap();
        assert_eq!(interpolate(&a, &b, 0.0).unwrap().0, a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap().0, b);
        assert!(interpolate(&a, &Tensor::zeros(&[2, 1]), 0.5).is_err());
    }

    #[test]
    fn weight_values() {
        let w = logit_normal_weight(0.5).unwrap();
        assert!((w - 4.0 / libm::sqrt(2.0 * core::f64::consts::PI)).abs() < 1e-12);
        assert!(logit_normal_weight(0.0).is_err());
        assert!(logit_normal_weight(1.0).is_err());
        for t in [0.01, 0.2, 0.33, 0.49] {
            let (a, b) = (logit_normal_weight(t).unwrap(), logit_normal_weight(1.0 - t).unwrap());
            assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }

    fn item(seed: u64) -> TrainItem {
        let mut r = rng::stream(seed, Purpose::Data, 0, 0);
        TrainItem {
            x1: rng::normal_tensor(&mut r, &[2, 4]),
            c: ConditionSeq::new(rng::normal_tensor(&mut r, &[1, 3])),
        }
    }

    /// Returns a fixed tensor regardless of input.
    struct Fixed(Tensor<f32>);
    impl GraphField for Fixed {
        fn build<T: Real>(&self, g: &mut Graph<'_, T>, _x: Var, _t: f64, _c: &Tensor<T>) -> Result<Var> {
            Ok(g.constant(self.0.cast()))
        }
    }

    #[test]
    fn perfect_field_has_zero_loss() {
        let items = [item(1)];
        let stage = Stage::Rfm { cond_drop_prob: 0.2 };
        let d = make_draw(TrainSource::Items(&items), stage, 5, 0, 0).unwrap();
        let (_, u) = interpolate(&d.x0, &d.x1, d.t).unwrap();
        let mut g: Graph<'_, f32> = Graph::new();
        let l = draw_loss(&mut g, &Fixed(u), stage, &d, weight_for(true)).unwrap();
        assert_eq!(g.value(l)[0], 0.0);
    }

    #[test]
    fn zero_field_loss_matches_direct_recomputation() {
        let items: Vec<TrainItem> = (0..4).map(item).collect();
        let cfg = EstimatorConfig::tiny(4, 3, 2, 8);
        let est = Estimator::new(cfg, 0).unwrap();
        let tc = TrainConfig {
            batch_size: 6,
            seed: 17,
            ..TrainConfig::default()
        };
        let got = rfm_loss(&est, &items, &tc, 3, &Sequential).unwrap().loss;
        let stage = Stage::Rfm { cond_drop_prob: 0.2 };
        let mut expect = 0.0;
        for slot in 0..6 {
            let d = make_draw(TrainSource::Items(&items), stage, 17, 3, slot).unwrap();
            let w = logit_normal_weight(d.t).unwrap();
            let sq: f64 = d
                .x1
                .data()
                .iter()
                .zip(d.x0.data())
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum();
            expect += w * sq / d.x1.numel() as f64;
        }
        expect /= 6.0;
        assert!((got - expect).abs() < 1e-5 * expect.max(1.0), "{got} vs {expect}");
    }

    #[test]
    fn reweight_off_equals_unit_weight() {
        let items: Vec<TrainItem> = (0..3).map(item).collect();
        let est = Estimator::new(EstimatorConfig::tiny(4, 3, 2, 8), 1).unwrap();
        let tc = TrainConfig {
            batch_size: 4,
            reweight: false,
            ..TrainConfig::default()
        };
        let stage = Stage::Rfm { cond_drop_prob: 0.2 };
        let off = rfm_loss(&est, &items, &tc, 0, &Sequential).unwrap();
        let draws = step_draws(TrainSource::Items(&items), stage, &tc, 0).unwrap();
        let mut total = 0.0;
        for d in &draws {
            let mut g = Graph::with_params(&est.params);
            let l = draw_loss(&mut g, &est.cfg, stage, d, |_| Ok(1.0)).unwrap();
            total += g.value(l)[0] as f64;
        }
        assert_eq!(off.loss, total / 4.0);
    }

    #[test]
    fn empty_batch_is_usage_error() {
        let est = Estimator::new(EstimatorConfig::tiny(4, 3, 2, 8), 1).unwrap();
        let stage = Stage::Rfm { cond_drop_prob: 0.0 };
        assert!(matches!(batch_loss(&est, stage, &[], true, &Sequential), Err(Error::Usage(_))));
        assert!(matches!(
            rfm_loss(&est, &[], &TrainConfig::default(), 0, &Sequential),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn zero_steps_leave_params_unchanged() {
        let items: Vec<TrainItem> = (0..3).map(item).collect();
        let mut est = Estimator::new(EstimatorConfig::tiny(4, 3, 2, 8), 1).unwrap();
        let before = est.params.clone();
        let tc = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let out = train(&mut est, TrainSource::Items(&items), Stage::Rfm { cond_drop_prob: 0.2 }, &tc, &Sequential, &mut |_| {}).unwrap();
        assert!(out.losses.is_empty());
        assert_eq!(est.params, before);
    }

    #[test]
    fn dropout_frequency_is_close_to_configured() {
        let items = [item(0)];
        let rate = dropout_rate(&items, 0.2, 99, 10_000).unwrap();
        assert!((rate - 0.2).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn distill_draws_use_time_zero() {
        let trip = ReflowTriplet {
            x0_prime: Tensor::zeros(&[2, 4]),
            x1_hat: Tensor::filled(&[2, 4], 1.0),
            c: ConditionSeq::new(Tensor::zeros(&[1, 3])),
        };
        let src = [trip];
        for step in 0..20 {
            let d = make_draw(TrainSource::Triplets(&src), Stage::Distill { gamma: 4.5 }, 1, step, 0).unwrap();
            assert_eq!(d.t, 0.0);
        }
    }
}
