//! Reflow with the guided field and one-step distillation.
//!
//! The guidance scale used to build the triplets is also the scale composed
//! inside the reflow and distillation losses. The losses only constrain the
//! composed field, so the conditional branch alone (`γ = 1`) is not a good
//! sampler afterwards; reflowed and distilled models are sampled at the
//! training scale.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::estimator::{ConditionSeq, Estimator, LatentSeq};
use crate::exec::Executor;
use crate::rfm::{train, Stage, StepRecord, TrainConfig, TrainItem, TrainOutcome, TrainSource};
use crate::rng::{self, Purpose};
use crate::sampler::{solve, GuidanceConfig, SolverConfig, SolverKind, VectorField};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ReflowTriplet {
    /// The stored input noise.
    pub x0_prime: LatentSeq,
    /// The sample generated from `x0_prime`.
    pub x1_hat: LatentSeq,
    pub c: ConditionSeq,
}

/// Everything needed to regenerate a triplet store bit-identically.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ReflowDatasetMeta {
    pub source_checkpoint: String,
    pub solver: SolverKind,
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
    pub gamma: f64,
    pub guidance_enabled: bool,
    pub seed: u64,
    pub item_count: usize,
    /// Indices of conditions whose solve failed.
    pub skipped: Vec<usize>,
}

impl ReflowDatasetMeta {
    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            kind: self.solver,
            steps: self.steps,
            rtol: self.rtol,
            atol: self.atol,
            record_trajectory: false,
        }
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            gamma: self.gamma,
            enabled: self.guidance_enabled,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReflowStore {
    pub triplets: Vec<ReflowTriplet>,
    pub meta: ReflowDatasetMeta,
}

/// Noise for reflow item `i`, drawn from the `Sample(i, 0)` stream.
pub fn reflow_noise(seed: u64, i: usize, shape: &[usize]) -> Tensor<f32> {
    rng::normal_tensor(&mut rng::stream(seed, Purpose::Sample, i as u64, 0), shape)
}

/// Samples one triplet per dataset condition with the guided field.
///
/// The noise shape follows each item's `x1`. Items whose solve fails are
/// left out and listed in `meta.skipped`.
pub fn generate_reflow_data<F: VectorField + ?Sized, E: Executor>(
    field: &F,
    items: &[TrainItem],
    solver: &SolverConfig,
    guidance: &GuidanceConfig,
    seed: u64,
    source_checkpoint: &str,
    exec: &E,
) -> Result<ReflowStore> {
    solver.validate()?;
    guidance.validate()?;
    let mut s = solver.clone();
    s.record_trajectory = false;
    let results = exec.map(items.len(), |i| {
        let x0 = reflow_noise(seed, i, items[i].x1.shape());
        let sol = solve(field, &x0, &items[i].c, &s, guidance)?;
        Ok::<_, Error>(ReflowTriplet {
            x0_prime: x0,
            x1_hat: sol.x1,
            c: items[i].c.clone(),
        })
    });
    let mut triplets = Vec::with_capacity(items.len());
    let mut skipped = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(t) => triplets.push(t),
            Err(_) => skipped.push(i),
        }
    }
    let meta = ReflowDatasetMeta {
        source_checkpoint: source_checkpoint.into(),
        solver: s.kind,
        steps: s.steps,
        rtol: s.rtol,
        atol: s.atol,
        gamma: guidance.gamma,
        guidance_enabled: guidance.enabled,
        seed,
        item_count: triplets.len(),
        skipped,
    };
    Ok(ReflowStore { triplets, meta })
}

/// Guidance scale composed inside the reflow and distillation losses.
fn training_gamma(g: &GuidanceConfig) -> f64 {
    g.effective().unwrap_or(1.0)
}

/// Reflow: regresses `γ v(c) + (1-γ) v(∅)` toward `x̂1 - x0'` on the stored
/// pairs, with the first-stage time law and weighting and no dropout.
pub fn reflow_train<E: Executor>(
    est: &mut Estimator,
    triplets: &[ReflowTriplet],
    guidance: &GuidanceConfig,
    cfg: &TrainConfig,
    exec: &E,
    observer: &mut dyn FnMut(StepRecord),
) -> Result<TrainOutcome> {
    let stage = Stage::Reflow {
        gamma: training_gamma(guidance),
    };
    train(est, TrainSource::Triplets(triplets), stage, cfg, exec, observer)
}

/// Distillation: `t = 0`, unweighted error of the one-step endpoint
/// `x0' + v_cfg(x0', 0)` against `x̂1`.
pub fn distill_train<E: Executor>(
    est: &mut Estimator,
    triplets: &[ReflowTriplet],
    guidance: &GuidanceConfig,
    cfg: &TrainConfig,
    exec: &E,
    observer: &mut dyn FnMut(StepRecord),
) -> Result<TrainOutcome> {
    let stage = Stage::Distill {
        gamma: training_gamma(guidance),
    };
    train(est, TrainSource::Triplets(triplets), stage, cfg, exec, observer)
}

/// Root-mean-square change of the null-branch output between two models on
/// probe inputs. Reflow does not constrain this branch directly, so the
/// value is logged rather than bounded.
pub fn null_branch_drift<A: VectorField + ?Sized, B: VectorField + ?Sized>(
    before: &A,
    after: &B,
    probes: &[(Tensor<f32>, f64, ConditionSeq)],
) -> Result<f64> {
    let (mut sq, mut n) = (0.0f64, 0usize);
    for (x, t, c) in probes {
        let null = c.to_null();
        let a = before.eval(x, *t, &null)?;
        let b = after.eval(x, *t, &null)?;
        for (p, q) in a.data().iter().zip(b.data()) {
            let d = (p - q) as f64;
            sq += d * d;
        }
        n += a.numel();
    }
    if n == 0 {
        return Err(Error::Usage("no probes".into()));
    }
    Ok(libm::sqrt(sq / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Sequential;
    use crate::graph::{Graph, Var};
    use crate::real::Real;
    use crate::rfm::{draw_loss, make_draw, weight_for, GraphField};
    use alloc::vec;

    struct Zero;
    impl VectorField for Zero {
        fn eval(&self, x: &Tensor<f32>, _t: f64, _c: &ConditionSeq) -> Result<Tensor<f32>> {
            Ok(Tensor::zeros(x.shape()))
        }
    }

    struct Failing;
    impl VectorField for Failing {
        fn eval(&self, _x: &Tensor<f32>, _t: f64, _c: &ConditionSeq) -> Result<Tensor<f32>> {
            Err(Error::NonFinite("stub".into()))
        }
    }

    fn items(n: usize) -> Vec<TrainItem> {
        (0..n)
            .map(|i| TrainItem {
                x1: Tensor::filled(&[2, 3], i as f32),
                c: ConditionSeq::new(Tensor::filled(&[1, 2], 1.0)),
            })
            .collect()
    }

    #[test]
    fn zero_field_keeps_noise() {
        let store = generate_reflow_data(
            &Zero,
            &items(5),
            &SolverConfig::euler(25),
            &GuidanceConfig::default(),
            3,
            "ck",
            &Sequential,
        )
        .unwrap();
        assert_eq!(store.triplets.len(), 5);
        for t in &store.triplets {
            assert_eq!(t.x0_prime, t.x1_hat);
        }
        assert_eq!(store.meta.steps, 25);
        assert_eq!(store.meta.gamma, 4.5);
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let go = || {
            generate_reflow_data(
                &Zero,
                &items(4),
                &SolverConfig::euler(3),
                &GuidanceConfig::default(),
                11,
                "ck",
                &Sequential,
            )
            .unwrap()
        };
        assert_eq!(go().triplets, go().triplets);
    }

    #[test]
    fn failing_items_are_skipped_and_counted() {
        let store = generate_reflow_data(
            &Failing,
            &items(3),
            &SolverConfig::euler(2),
            &GuidanceConfig::default(),
            0,
            "ck",
            &Sequential,
        )
        .unwrap();
        assert!(store.triplets.is_empty());
        assert_eq!(store.meta.skipped, vec![0, 1, 2]);
    }

    /// Field that returns `x̂1 - x0'` for a single known triplet.
    struct Straight(Tensor<f32>);
    impl GraphField for Straight {
        fn build<T: Real>(&self, g: &mut Graph<'_, T>, _x: Var, _t: f64, _c: &Tensor<T>) -> Result<Var> {
            Ok(g.constant(self.0.cast()))
        }
    }

    fn triplet() -> ReflowTriplet {
        ReflowTriplet {
            x0_prime: Tensor::new(vec![2, 2], vec![0.5f32, -1.0, 0.25, 2.0]).unwrap(),
            x1_hat: Tensor::new(vec![2, 2], vec![1.0f32, 1.0, -1.0, 0.0]).unwrap(),
            c: ConditionSeq::new(Tensor::filled(&[1, 2], 1.0)),
        }
    }

    #[test]
    fn straight_stub_has_zero_reflow_and_distill_loss() {
        let tr = [triplet()];
        let u = tr[0].x1_hat.zip_map(&tr[0].x0_prime, |a, b| a - b).unwrap();
        for stage in [Stage::Reflow { gamma: 4.5 }, Stage::Distill { gamma: 4.5 }] {
            let d = make_draw(TrainSource::Triplets(&tr), stage, 0, 0, 0).unwrap();
            let mut g: Graph<'_, f64> = Graph::new();
            let l = draw_loss(&mut g, &Straight(u.clone()), stage, &d, weight_for(true)).unwrap();
            assert!(g.value(l)[0].abs() < 1e-12, "{stage:?}");
        }
    }

    #[test]
    fn reflow_keeps_stored_noise() {
        let tr = [triplet()];
        for step in 0..5 {
            let d = make_draw(TrainSource::Triplets(&tr), Stage::Reflow { gamma: 2.0 }, 9, step, 1).unwrap();
            assert_eq!(d.x0, tr[0].x0_prime);
            assert!(!d.c.null);
        }
    }
}
