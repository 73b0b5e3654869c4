//! Synthetic conditional tasks with known ground truth.
//!
//! * Gauss: class `k` maps to `N(μ_k, σ² I)`, the condition is a one-hot
//!   class vector of length one.
//! * Events: each condition frame carries an event id or silence; the
//!   matching block of `r` latent frames carries that event's template plus
//!   jitter. Alignment is checked with a block-wise matched filter.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::estimator::{ConditionSeq, LatentSeq};
use crate::rfm::TrainItem;
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct GaussTaskSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub std: f64,
    /// Class means; when absent they sit on a circle of `radius` in the
    /// first two coordinates.
    pub means: Option<Vec<Vec<f64>>>,
    pub radius: f64,
    /// Latent frames per item.
    pub regulate_ratio: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for GaussTaskSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            dim: 2,
            std: 0.1,
            means: None,
            radius: 1.0,
            regulate_ratio: 1,
            samples_per_class: 512,
            seed: 0,
        }
    }
}

impl GaussTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 || self.regulate_ratio == 0 {
            return Err(Error::Config(
                "num_classes, dim and regulate_ratio must be positive".into(),
            ));
        }
        if !(self.std >= 0.0) {
            return Err(Error::Config(format!("std {} must be non-negative", self.std)));
        }
        if self.means.is_none() && self.dim < 2 && self.num_classes > 1 {
            return Err(Error::Config("circle means need dim >= 2".into()));
        }
        let m = self.class_means();
        if m.len() != self.num_classes || m.iter().any(|v| v.len() != self.dim) {
            return Err(Error::Config(format!(
                "means must be {} x {}",
                self.num_classes, self.dim
            )));
        }
        for a in 0..m.len() {
            for b in a + 1..m.len() {
                if m[a] == m[b] {
                    return Err(Error::Config(format!("means {a} and {b} coincide")));
                }
            }
        }
        Ok(())
    }

    pub fn class_means(&self) -> Vec<Vec<f64>> {
        if let Some(m) = &self.means {
            return m.clone();
        }
        (0..self.num_classes)
            .map(|k| {
                let a = 2.0 * core::f64::consts::PI * k as f64 / self.num_classes as f64;
                let mut v = vec![0.0; self.dim];
                v[0] = self.radius * libm::cos(a);
                if self.dim > 1 {
                    v[1] = self.radius * libm::sin(a);
                }
                v
            })
            .collect()
    }

    pub fn num_items(&self) -> usize {
        self.num_classes * self.samples_per_class
    }

    /// Latent shape `[r x D_x]`.
    pub fn latent_shape(&self) -> [usize; 2] {
        [self.regulate_ratio, self.dim]
    }

    /// One-hot condition `[1 x K]` for class `k`.
    pub fn condition(&self, k: usize) -> ConditionSeq {
        let mut c = Tensor::zeros(&[1, self.num_classes]);
        c.data_mut()[k] = 1.0;
        ConditionSeq::new(c)
    }

    /// Class of item `i` (classes are interleaved).
    pub fn class_of(&self, i: usize) -> usize {
        i % self.num_classes
    }

    fn draw(&self, k: usize, rng: &mut impl Rng) -> LatentSeq {
        let mu = &self.class_means()[k];
        let mut x = Tensor::zeros(&self.latent_shape());
        for (j, v) in x.data_mut().iter_mut().enumerate() {
            let z: f64 = rng::normal(rng);
            *v = (mu[j % self.dim] + self.std * z) as f32;
        }
        x
    }

    /// Fresh ground-truth samples of class `k`, independent of the dataset.
    pub fn class_batch(&self, k: usize, n: usize, seed: u64) -> Vec<LatentSeq> {
        (0..n)
            .map(|i| self.draw(k, &mut rng::stream(seed, Purpose::Probe, k as u64, i as u64)))
            .collect()
    }
}

pub fn gen_gauss(spec: &GaussTaskSpec) -> Result<Vec<TrainItem>> {
    spec.validate()?;
    Ok((0..spec.num_items())
        .map(|i| {
            let k = spec.class_of(i);
            let mut r = rng::stream(spec.seed, Purpose::Data, i as u64, 0);
            TrainItem {
                x1: spec.draw(k, &mut r),
                c: spec.condition(k),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct EventTaskSpec {
    pub cond_len: usize,
    pub regulate_ratio: usize,
    pub num_events: usize,
    pub dim: usize,
    pub density: f64,
    pub jitter: f64,
    pub num_items: usize,
    pub seed: u64,
}

impl Default for EventTaskSpec {
    fn default() -> Self {
        Self {
            cond_len: 16,
            regulate_ratio: 4,
            num_events: 4,
            dim: 4,
            density: 0.25,
            jitter: 0.05,
            num_items: 2048,
            seed: 0,
        }
    }
}

impl EventTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cond_len == 0 || self.regulate_ratio == 0 || self.num_events == 0 || self.dim == 0 {
            return Err(Error::Config(
                "cond_len, regulate_ratio, num_events and dim must be positive".into(),
            ));
        }
        if self.num_events > self.regulate_ratio * self.dim {
            return Err(Error::Config(format!(
                "{} orthogonal templates do not fit in {} dimensions",
                self.num_events,
                self.regulate_ratio * self.dim
            )));
        }
        if !(0.0..=1.0).contains(&self.density) {
            return Err(Error::Config(format!("density {} outside [0, 1]", self.density)));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::Config(format!("jitter {} must be non-negative", self.jitter)));
        }
        Ok(())
    }

    /// Channels of the condition: one per event plus silence (last).
    pub fn cond_dim(&self) -> usize {
        self.num_events + 1
    }

    pub fn silence(&self) -> usize {
        self.num_events
    }

    pub fn latent_len(&self) -> usize {
        self.cond_len * self.regulate_ratio
    }

    pub fn block_len(&self) -> usize {
        self.regulate_ratio * self.dim
    }

    /// `K` orthonormal patterns of `r x D_x`, scaled to unit RMS.
    pub fn templates(&self) -> Vec<Vec<f64>> {
        let n = self.block_len();
        let mut r = rng::stream(self.seed, Purpose::Templates, 0, 0);
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.num_events);
        while out.len() < self.num_events {
            let mut v: Vec<f64> = (0..n).map(|_| rng::normal(&mut r)).collect();
            for u in &out {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for (a, b) in v.iter_mut().zip(u) {
                    *a -= d * b;
                }
            }
            let norm = libm::sqrt(v.iter().map(|a| a * a).sum::<f64>());
            if norm < 1e-6 {
                continue;
            }
            let s = libm::sqrt(n as f64) / norm;
            out.push(v.into_iter().map(|a| a * s).collect());
        }
        out
    }

    /// Condition `[L_c x (K+1)]` for an event sequence (`None` is silence).
    pub fn condition(&self, events: &[Option<usize>]) -> Result<ConditionSeq> {
        if events.len() != self.cond_len {
            return Err(dim_err!("{} events for cond_len {}", events.len(), self.cond_len));
        }
        let mut c = Tensor::zeros(&[self.cond_len, self.cond_dim()]);
        let w = self.cond_dim();
        for (j, e) in events.iter().enumerate() {
            let k = e.unwrap_or(self.silence());
            if k > self.num_events {
                return Err(Error::Domain(format!("event id {k} out of range")));
            }
            c.data_mut()[j * w + k] = 1.0;
        }
        Ok(ConditionSeq::new(c))
    }

    /// Recovers the event sequence from a condition.
    pub fn events_of(&self, c: &ConditionSeq) -> Result<Vec<Option<usize>>> {
        if c.features.shape() != [self.cond_len, self.cond_dim()] {
            return Err(dim_err!(
                "condition {:?} does not match [{}, {}]",
                c.features.shape(),
                self.cond_len,
                self.cond_dim()
            ));
        }
        Ok((0..self.cond_len)
            .map(|j| {
                let row = c.features.row(j);
                let k = (0..row.len())
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                    .unwrap_or(self.silence());
                (k < self.num_events).then_some(k)
            })
            .collect())
    }

    /// Latent for an event sequence: templates plus `N(0, jitter²)` noise.
    pub fn render(&self, events: &[Option<usize>], templates: &[Vec<f64>], rng: &mut impl Rng) -> Result<LatentSeq> {
        if events.len() != self.cond_len {
            return Err(dim_err!("{} events for cond_len {}", events.len(), self.cond_len));
        }
        let n = self.block_len();
        let mut x = Tensor::zeros(&[self.latent_len(), self.dim]);
        let data = x.data_mut();
        for (j, e) in events.iter().enumerate() {
            for i in 0..n {
                let base = e.map_or(0.0, |k| templates[k][i]);
                let z: f64 = rng::normal(rng);
                data[j * n + i] = (base + self.jitter * z) as f32;
            }
        }
        Ok(x)
    }
}

pub fn gen_events(spec: &EventTaskSpec) -> Result<Vec<TrainItem>> {
    spec.validate()?;
    let templates = spec.templates();
    (0..spec.num_items)
        .map(|i| {
            let mut r = rng::stream(spec.seed, Purpose::Data, i as u64, 0);
            let events: Vec<Option<usize>> = (0..spec.cond_len)
                .map(|_| {
                    let on = r.random::<f64>() < spec.density;
                    let k = r.random_range(0..spec.num_events);
                    on.then_some(k)
                })
                .collect();
            Ok(TrainItem {
                x1: spec.render(&events, &templates, &mut r)?,
                c: spec.condition(&events)?,
            })
        })
        .collect()
}

/// Cosine similarity of `template` with latent block `j`; zero for an all-zero block.
pub fn block_ncc(x: &LatentSeq, template: &[f64], j: usize) -> f64 {
    let n = template.len();
    let block = &x.data()[j * n..(j + 1) * n];
    let (mut dot, mut bb, mut tt) = (0.0, 0.0, 0.0);
    for (&b, &t) in block.iter().zip(template) {
        let b = b as f64;
        dot += b * t;
        bb += b * b;
        tt += t * t;
    }
    if bb == 0.0 || tt == 0.0 {
        0.0
    } else {
        dot / libm::sqrt(bb * tt)
    }
}

/// Matched-filter decision for a planted event `k` at block `j`.
///
/// Returns whether the best-responding block is `j` and the number of
/// candidate blocks. Other blocks that also carry `k` are not candidates,
/// since a response there is equally correct.
pub fn detect_event(x: &LatentSeq, events: &[Option<usize>], templates: &[Vec<f64>], j: usize) -> (bool, usize) {
    let k = events[j].expect("detect_event on a silent block");
    let mut best = j;
    let mut best_score = block_ncc(x, &templates[k], j);
    let mut candidates = 1;
    for (b, e) in events.iter().enumerate() {
        if b == j || *e == Some(k) {
            continue;
        }
        candidates += 1;
        let s = block_ncc(x, &templates[k], b);
        if s > best_score {
            best = b;
            best_score = s;
        }
    }
    (best == j, candidates)
}
