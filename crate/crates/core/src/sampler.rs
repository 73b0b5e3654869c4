//! ODE sampling from noise (`t = 0`) to data (`t = 1`) with optional
//! classifier-free guidance.

use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{dim_err, Error, Result};
use crate::estimator::ConditionSeq;
use crate::exec::Executor;
use crate::tensor::Tensor;

/// A conditional vector field `v(x, t | c)`.
pub trait VectorField: Sync {
    fn eval(&self, x: &Tensor<f32>, t: f64, c: &ConditionSeq) -> Result<Tensor<f32>>;
}

impl<F: VectorField + ?Sized> VectorField for &F {
    fn eval(&self, x: &Tensor<f32>, t: f64, c: &ConditionSeq) -> Result<Tensor<f32>> {
        (**self).eval(x, t, c)
    }
}

/// Wraps a field and counts evaluations.
pub struct CountingField<F> {
    inner: F,
    count: AtomicUsize,
}

impl<F: VectorField> CountingField<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.count.store(0, Ordering::Relaxed);
    }

    pub fn inner(&self) -> &F {
        &self.inner
    }
}

impl<F: VectorField> VectorField for CountingField<F> {
    fn eval(&self, x: &Tensor<f32>, t: f64, c: &ConditionSeq) -> Result<Tensor<f32>> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.eval(x, t, c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SolverKind {
    Euler,
    Dopri5,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct SolverConfig {
    pub kind: SolverKind,
    /// Uniform Euler steps on `[0, 1]`.
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
    pub record_trajectory: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            kind: SolverKind::Euler,
            steps: 25,
            rtol: 1e-5,
            atol: 1e-5,
            record_trajectory: false,
        }
    }
}

impl SolverConfig {
    pub fn euler(steps: usize) -> Self {
        Self {
            kind: SolverKind::Euler,
            steps,
            ..Self::default()
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            kind: SolverKind::Dopri5,
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn recording(mut self) -> Self {
        self.record_trajectory = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SolverKind::Euler if self.steps == 0 => {
                Err(Error::Config("Euler needs at least one step".into()))
            }
            SolverKind::Dopri5 if !(self.rtol > 0.0 && self.atol > 0.0) => {
                Err(Error::Config("Dopri5 tolerances must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Guidance scale `γ`. Disabled guidance behaves exactly like `γ = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct GuidanceConfig {
    pub gamma: f64,
    pub enabled: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            gamma: 4.5,
            enabled: true,
        }
    }
}

impl GuidanceConfig {
    pub fn scale(gamma: f64) -> Self {
        Self {
            gamma,
            enabled: true,
        }
    }

    pub fn off() -> Self {
        Self {
            gamma: 1.0,
            enabled: false,
        }
    }

    /// Effective scale; `None` means the plain conditional field.
    pub fn effective(&self) -> Option<f64> {
        if !self.enabled || self.gamma == 1.0 {
            None
        } else {
            Some(self.gamma)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(alloc::format!(
                "guidance scale {} must be a finite non-negative number",
                self.gamma
            )));
        }
        Ok(())
    }

    /// Field evaluations per step of a single-stage solver.
    pub fn evals_per_call(&self) -> usize {
        if self.effective().is_some() {
            2
        } else {
            1
        }
    }
}

/// `γ v(x,t|c) + (1-γ) v(x,t|∅)`; with `γ = 1` only the conditional branch
/// is evaluated.
pub fn guided_field<F: VectorField + ?Sized>(
    field: &F,
    x: &Tensor<f32>,
    t: f64,
    c: &ConditionSeq,
    g: &GuidanceConfig,
) -> Result<Tensor<f32>> {
    let cond = field.eval(x, t, c)?;
    let Some(gamma) = g.effective() else {
        return Ok(cond);
    };
    let uncond = field.eval(x, t, &c.to_null())?;
    let (a, b) = (gamma as f32, (1.0 - gamma) as f32);
    cond.zip_map(&uncond, |vc, vn| a * vc + b * vn)
}

/// Recorded states and fields of one solve.
///
/// `times` increase strictly from 0 to 1; `states[k]` is the state at
/// `times[k]`; `fields[k]` is the field evaluated at the start of step `k`,
/// so `fields.len() == times.len() - 1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Tensor<f32>>,
    pub fields: Vec<Tensor<f32>>,
}

/// Maximum snapshots kept in a trajectory.
pub const MAX_SNAPSHOTS: usize = 256;

impl Trajectory {
    fn push(&mut self, t: f64, x: &Tensor<f32>, v: &Tensor<f32>) {
        self.times.push(t);
        self.states.push(x.clone());
        self.fields.push(v.clone());
    }

    fn finish(&mut self, x: &Tensor<f32>) {
        self.times.push(1.0);
        self.states.push(x.clone());
        self.thin(MAX_SNAPSHOTS);
    }

    /// Keeps at most `max` evenly spaced snapshots, always including both ends.
    pub fn thin(&mut self, max: usize) {
        let n = self.times.len();
        if n <= max || max < 2 {
            return;
        }
        let keep: Vec<usize> = (0..max).map(|i| (i * (n - 1) + (max - 1) / 2) / (max - 1)).collect();
        let times = keep.iter().map(|&i| self.times[i]).collect();
        let states = keep.iter().map(|&i| self.states[i].clone()).collect();
        let fields = keep[..max - 1].iter().map(|&i| self.fields[i].clone()).collect();
        self.times = times;
        self.states = states;
        self.fields = fields;
    }
}

/// Mean over recorded fields of `|v_k - d|² / |d|²` with `d = x_end - x_start`.
/// Zero for straight constant-velocity paths and for closed loops (`d = 0`).
pub fn straightness(traj: &Trajectory) -> Result<f64> {
    if traj.states.len() < 2 {
        return Err(Error::Usage("straightness needs at least two states".into()));
    }
    let start = &traj.states[0];
    let end = &traj.states[traj.states.len() - 1];
    let d: Vec<f64> = end
        .data()
        .iter()
        .zip(start.data())
        .map(|(&a, &b)| a as f64 - b as f64)
        .collect();
    let dd: f64 = d.iter().map(|v| v * v).sum();
    if dd == 0.0 || traj.fields.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for v in &traj.fields {
        let dev: f64 = v
            .data()
            .iter()
            .zip(&d)
            .map(|(&a, &b)| (a as f64 - b) * (a as f64 - b))
            .sum();
        total += dev / dd;
    }
    Ok(total / traj.fields.len() as f64)
}

/// Output of a solve.
#[derive(Clone, Debug)]
pub struct Solution {
    pub x1: Tensor<f32>,
    pub trajectory: Option<Trajectory>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

pub fn solve<F: VectorField + ?Sized>(
    field: &F,
    x0: &Tensor<f32>,
    c: &ConditionSeq,
    s: &SolverConfig,
    g: &GuidanceConfig,
) -> Result<Solution> {
    match s.kind {
        SolverKind::Euler => euler_solve(field, x0, c, s, g),
        SolverKind::Dopri5 => dopri5_solve(field, x0, c, s, g),
    }
}

/// `x_{k+1} = x_k + ε v(x_k, kε | c)` with `ε = 1/steps`.
pub fn euler_solve<F: VectorField + ?Sized>(
    field: &F,
    x0: &Tensor<f32>,
    c: &ConditionSeq,
    s: &SolverConfig,
    g: &GuidanceConfig,
) -> Result<Solution> {
    if s.kind != SolverKind::Euler {
        return Err(Error::Usage("euler_solve called with a non-Euler config".into()));
    }
    s.validate()?;
    g.validate()?;
    let eps = 1.0f32 / s.steps as f32;
    let mut x = x0.clone();
    let mut traj = s.record_trajectory.then(Trajectory::default);
    for k in 0..s.steps {
        let t = k as f64 / s.steps as f64;
        let v = guided_field(field, &x, t, c, g)?;
        if v.shape() != x.shape() {
            return Err(dim_err!("field shape {:?} for state {:?}", v.shape(), x.shape()));
        }
        if let Some(tr) = traj.as_mut() {
            tr.push(t, &x, &v);
        }
        for (xi, &vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += eps * vi;
        }
        if !x.is_finite() {
            return Err(Error::SolverNaN { step: k });
        }
    }
    if let Some(tr) = traj.as_mut() {
        tr.finish(&x);
    }
    Ok(Solution {
        x1: x,
        trajectory: traj,
        accepted_steps: s.steps,
        rejected_steps: 0,
    })
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// 5th-order weights minus embedded 4th-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;
const PI_BETA: f64 = 0.04;
const MIN_STEP: f64 = 1e-12;
const MAX_STEPS: usize = 100_000;

fn to_f32(shape: &[usize], v: &[f64]) -> Tensor<f32> {
    Tensor::new(shape.to_vec(), v.iter().map(|&x| x as f32).collect()).expect("state shape")
}

/// Adaptive Dormand–Prince 5(4) with PI step-size control. The first trial
/// step spans the whole interval; the last step is clipped to land on `t = 1`.
pub fn dopri5_solve<F: VectorField + ?Sized>(
    field: &F,
    x0: &Tensor<f32>,
    c: &ConditionSeq,
    s: &SolverConfig,
    g: &GuidanceConfig,
) -> Result<Solution> {
    if s.kind != SolverKind::Dopri5 {
        return Err(Error::Usage("dopri5_solve called with a non-Dopri5 config".into()));
    }
    s.validate()?;
    g.validate()?;
    let shape = x0.shape().to_vec();
    let n = x0.numel();
    let eval = |x: &[f64], t: f64| -> Result<Vec<f64>> {
        let v = guided_field(field, &to_f32(&shape, x), t, c, g)?;
        if v.numel() != n {
            return Err(dim_err!("field shape {:?} for state {:?}", v.shape(), shape));
        }
        Ok(v.data().iter().map(|&z| z as f64).collect())
    };

    let mut x: Vec<f64> = x0.data().iter().map(|&z| z as f64).collect();
    let mut t = 0.0f64;
    let mut h = 1.0f64;
    let mut err_old = 1e-4f64;
    let mut k1 = eval(&x, t)?;
    let mut traj = s.record_trajectory.then(Trajectory::default);
    let (mut accepted, mut rejected) = (0usize, 0usize);
    let mut ks: [Vec<f64>; 7] = Default::default();
    let mut stage = vec_of(n);
    let mut last_rejected = false;

    while t < 1.0 {
        if accepted + rejected >= MAX_STEPS {
            return Err(Error::Stiffness { t, h });
        }
        let last = t + h >= 1.0;
        if last {
            h = 1.0 - t;
        } else if h < MIN_STEP {
            return Err(Error::Stiffness { t, h });
        }
        ks[0].clone_from(&k1);
        for i in 1..7 {
            for j in 0..n {
                let mut acc = 0.0;
                for (l, &a) in A[i].iter().enumerate() {
                    acc += a * ks[l][j];
                }
                stage[j] = x[j] + h * acc;
            }
            ks[i] = eval(&stage, t + C[i] * h)?;
        }
        // stage now holds the 5th-order solution (row 7 of A equals b)
        let mut err_sq = 0.0;
        for j in 0..n {
            let mut e = 0.0;
            for (l, &w) in E.iter().enumerate() {
                e += w * ks[l][j];
            }
            let scale = s.atol + s.rtol * x[j].abs().max(stage[j].abs());
            let r = h * e / scale;
            err_sq += r * r;
        }
        let err = libm::sqrt(err_sq / n.max(1) as f64);
        if !err.is_finite() {
            return Err(Error::SolverNaN { step: accepted });
        }
        let expo = 0.2 - PI_BETA * 0.75;
        if err <= 1.0 {
            if let Some(tr) = traj.as_mut() {
                tr.push(t, &to_f32(&shape, &x), &to_f32(&shape, &k1));
            }
            x.clone_from(&stage);
            k1 = core::mem::take(&mut ks[6]);
            t = if last { 1.0 } else { t + h };
            accepted += 1;
            let mut fac = libm::pow(err, expo) / libm::pow(err_old, PI_BETA) / SAFETY;
            fac = fac.clamp(1.0 / MAX_FACTOR, 1.0 / MIN_FACTOR);
            let mut h_new = h / fac;
            if last_rejected {
                h_new = h_new.min(h);
            }
            err_old = err.max(1e-4);
            h = h_new;
            last_rejected = false;
        } else {
            rejected += 1;
            let fac = (libm::pow(err, expo) / SAFETY).min(1.0 / MIN_FACTOR);
            h /= fac;
            last_rejected = true;
        }
    }
    let x1 = to_f32(&shape, &x);
    if !x1.is_finite() {
        return Err(Error::SolverNaN { step: accepted });
    }
    if let Some(tr) = traj.as_mut() {
        tr.finish(&x1);
    }
    Ok(Solution {
        x1,
        trajectory: traj,
        accepted_steps: accepted,
        rejected_steps: rejected,
    })
}

fn vec_of(n: usize) -> Vec<f64> {
    alloc::vec![0.0; n]
}

/// Solves one ODE per `(noise, condition)` pair; results are in input order.
pub fn solve_many<F: VectorField + ?Sized, E: Executor>(
    field: &F,
    noise: &[Tensor<f32>],
    conds: &[ConditionSeq],
    s: &SolverConfig,
    g: &GuidanceConfig,
    exec: &E,
) -> Result<Vec<Solution>> {
    if noise.len() != conds.len() {
        return Err(dim_err!("{} noise tensors for {} conditions", noise.len(), conds.len()));
    }
    exec.map(noise.len(), |i| solve(field, &noise[i], &conds[i], s, g))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    struct Constant(f32);
    impl VectorField for Constant {
        fn eval(&self, x: &Tensor<f32>, _t: f64, _c: &ConditionSeq) -> Result<Tensor<f32>> {
            Ok(x.map(|_| self.0))
        }
    }

    struct Linear;
    impl VectorField for Linear {
        fn eval(&self, x: &Tensor<f32>, _t: f64, _c: &ConditionSeq) -> Result<Tensor<f32>> {
            Ok(x.clone())
        }
    }

    /// Conditional branch returns `(1, 0)`, null branch `(0, 1)`.
    struct TwoBranch;
    impl VectorField for TwoBranch {
        fn eval(&self, _x: &Tensor<f32>, _t: f64, c: &ConditionSeq) -> Result<Tensor<f32>> {
            let v = if c.null { [0.0, 1.0] } else { [1.0, 0.0] };
            Ok(Tensor::new(vec![1, 2], v.to_vec()).unwrap())
        }
    }

    fn cond() -> ConditionSeq {
        ConditionSeq::new(Tensor::filled(&[1, 1], 1.0))
    }

    fn scalar(v: f32) -> Tensor<f32> {
        Tensor::new(vec![1, 1], vec![v]).unwrap()
    }

    #[test]
    fn guided_field_combines_branches() {
        let x = Tensor::zeros(&[1, 2]);
        let v = guided_field(&TwoBranch, &x, 0.0, &cond(), &GuidanceConfig::scale(2.0)).unwrap();
        assert_eq!(v.data(), &[2.0, -1.0]);
        let v0 = guided_field(&TwoBranch, &x, 0.0, &cond(), &GuidanceConfig::scale(0.0)).unwrap();
        assert_eq!(v0.data(), &[0.0, 1.0]);
        let counter = CountingField::new(TwoBranch);
        let v1 = guided_field(&counter, &x, 0.0, &cond(), &GuidanceConfig::scale(1.0)).unwrap();
        assert_eq!(v1.data(), &[1.0, 0.0]);
        assert_eq!(counter.count(), 1);
    }

    #[test]
    fn euler_exact_for_constant_fields() {
        for steps in [1, 3, 7, 25, 64] {
            let out = euler_solve(
                &Constant(2.5),
                &scalar(-1.0),
                &cond(),
                &SolverConfig::euler(steps),
                &GuidanceConfig::off(),
            )
            .unwrap();
            assert!((out.x1.data()[0] - 1.5).abs() < 1e-5, "steps={steps}");
        }
    }

    #[test]
    fn euler_single_step_is_one_field_evaluation() {
        let f = CountingField::new(Linear);
        let out = euler_solve(&f, &scalar(0.75), &cond(), &SolverConfig::euler(1), &GuidanceConfig::off()).unwrap();
        assert_eq!(out.x1.data()[0], 1.5);
        assert_eq!(f.count(), 1);
        let f = CountingField::new(TwoBranch);
        euler_solve(&f, &Tensor::zeros(&[1, 2]), &cond(), &SolverConfig::euler(5), &GuidanceConfig::scale(3.0)).unwrap();
        assert_eq!(f.count(), 10);
    }

    #[test]
    fn euler_on_linear_field_approaches_e() {
        let out = euler_solve(&Linear, &scalar(1.0), &cond(), &SolverConfig::euler(512), &GuidanceConfig::off()).unwrap();
        let e = core::f64::consts::E;
        assert!(((out.x1.data()[0] as f64) - e).abs() / e < 0.005);
    }

    #[test]
    fn dopri5_constant_field_single_step() {
        let out = dopri5_solve(&Constant(-0.5), &scalar(2.0), &cond(), &SolverConfig::dopri5(1e-6, 1e-6), &GuidanceConfig::off()).unwrap();
        assert_eq!(out.accepted_steps, 1);
        assert_eq!(out.rejected_steps, 0);
        assert!((out.x1.data()[0] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn dopri5_linear_field_matches_e() {
        let out = dopri5_solve(&Linear, &scalar(1.0), &cond(), &SolverConfig::dopri5(1e-6, 1e-6), &GuidanceConfig::off()).unwrap();
        assert!(((out.x1.data()[0] as f64) - core::f64::consts::E).abs() < 1e-4);
    }

    #[test]
    fn dopri5_error_does_not_grow_with_tighter_tolerance() {
        let e = core::f64::consts::E;
        let mut last = f64::INFINITY;
        for tol in [1e-3, 5e-4, 2.5e-4, 1.25e-4, 6.25e-5] {
            let out = dopri5_solve(&Linear, &scalar(1.0), &cond(), &SolverConfig::dopri5(tol, tol), &GuidanceConfig::off()).unwrap();
            let err = ((out.x1.data()[0] as f64) - e).abs();
            assert!(err <= last + 1e-7, "tol {tol}: {err} > {last}");
            last = err;
        }
    }

    #[test]
    fn trajectory_records_increasing_times() {
        let out = euler_solve(&Linear, &scalar(1.0), &cond(), &SolverConfig::euler(4).recording(), &GuidanceConfig::off()).unwrap();
        let tr = out.trajectory.unwrap();
        assert_eq!(tr.times, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(tr.states.len(), 5);
        assert_eq!(tr.fields.len(), 4);
        let long = euler_solve(&Linear, &scalar(1.0), &cond(), &SolverConfig::euler(1000).recording(), &GuidanceConfig::off()).unwrap();
        let tr = long.trajectory.unwrap();
        assert_eq!(tr.times.len(), MAX_SNAPSHOTS);
        assert_eq!(tr.fields.len(), MAX_SNAPSHOTS - 1);
        assert_eq!(tr.times[0], 0.0);
        assert_eq!(*tr.times.last().unwrap(), 1.0);
        assert!(tr.times.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn straightness_cases() {
        let straight = euler_solve(&Constant(1.0), &scalar(0.0), &cond(), &SolverConfig::euler(8).recording(), &GuidanceConfig::off()).unwrap();
        assert!(straightness(&straight.trajectory.unwrap()).unwrap() < 1e-12);

        let path = |vs: [f32; 2]| Trajectory {
            times: vec![0.0, 0.5, 1.0],
            states: vec![scalar(0.0), scalar(0.5 * vs[0]), scalar(0.5 * (vs[0] + vs[1]))],
            fields: vec![scalar(vs[0]), scalar(vs[1])],
        };
        // +1 then -1 returns to the start: zero displacement convention
        assert_eq!(straightness(&path([1.0, -1.0])).unwrap(), 0.0);
        // +2 then 0: d = 1, deviations 1 and 1
        assert!((straightness(&path([2.0, 0.0])).unwrap() - 1.0).abs() < 1e-12);
        let one = Trajectory {
            times: vec![0.0],
            states: vec![scalar(0.0)],
            fields: vec![],
        };
        assert!(straightness(&one).is_err());
    }

    #[test]
    fn configs_validate() {
        assert!(SolverConfig::euler(0).validate().is_err());
        assert!(SolverConfig::dopri5(0.0, 1e-6).validate().is_err());
        assert!(GuidanceConfig::scale(-1.0).validate().is_err());
        assert_eq!(GuidanceConfig { gamma: 7.0, enabled: false }.effective(), None);
    }

    struct Exploding;
    impl VectorField for Exploding {
        fn eval(&self, x: &Tensor<f32>, _t: f64, _c: &ConditionSeq) -> Result<Tensor<f32>> {
            Ok(x.map(|v| v * 1e30))
        }
    }

    #[test]
    fn euler_reports_nan_step() {
        let err = euler_solve(&Exploding, &scalar(1e10), &cond(), &SolverConfig::euler(10), &GuidanceConfig::off()).unwrap_err();
        assert!(matches!(err, Error::SolverNaN { .. }));
    }
}
