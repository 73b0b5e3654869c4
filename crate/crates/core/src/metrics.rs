//! Fréchet distance between Gaussian fits and a matched-filter alignment score.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::estimator::{ConditionSeq, LatentSeq};
use crate::toydata::{detect_event, EventTaskSpec};

/// Mean and covariance (`D x D`, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl GaussianFit {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance.
pub fn fit_gaussian(samples: &[Vec<f64>]) -> Result<GaussianFit> {
    if samples.len() < 2 {
        return Err(Error::Usage(alloc::format!(
            "fit_gaussian needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let d = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != d) {
        return Err(dim_err!("sample of length {} among length {d}", bad.len()));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut cov = vec![0.0; d * d];
    for s in samples {
        for i in 0..d {
            let a = s[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += a * (s[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1.0);
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(GaussianFit { mean, cov })
}

/// Flattens latents into sample vectors.
pub fn flatten(xs: &[LatentSeq]) -> Vec<Vec<f64>> {
    xs.iter()
        .map(|x| x.data().iter().map(|&v| v as f64).collect())
        .collect()
}

/// Eigen-decomposition of a symmetric `n x n` matrix by cyclic Jacobi
/// rotations. Returns eigenvalues and the eigenvectors as columns of `Q`.
pub fn sym_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return Err(dim_err!("{} entries for a {n}x{n} matrix", a.len()));
    }
    let mut m = a.to_vec();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for r in p + 1..n {
                let apr = m[p * n + r];
                if apr == 0.0 {
                    continue;
                }
                let theta = (m[r * n + r] - m[p * n + p]) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkr = m[k * n + r];
                    m[k * n + p] = c * mkp - s * mkr;
                    m[k * n + r] = s * mkp + c * mkr;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mrk = m[r * n + k];
                    m[p * n + k] = c * mpk - s * mrk;
                    m[r * n + k] = s * mpk + c * mrk;
                }
                for k in 0..n {
                    let qkp = q[k * n + p];
                    let qkr = q[k * n + r];
                    q[k * n + p] = c * qkp - s * qkr;
                    q[k * n + r] = s * qkp + c * qkr;
                }
            }
        }
    }
    Ok(((0..n).map(|i| m[i * n + i]).collect(), q))
}

/// `Q f(Λ) Qᵀ` with eigenvalues clamped at zero before `f`.
fn sym_apply(a: &[f64], n: usize, f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    let (vals, q) = sym_eigen(a, n)?;
    let fv: Vec<f64> = vals.iter().map(|&l| f(l.max(0.0))).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| q[i * n + k] * fv[k] * q[j * n + k]).sum();
        }
    }
    Ok(out)
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Squared 2-Wasserstein (Fréchet) distance between two Gaussians:
/// `|μa - μb|² + tr(Ca + Cb - 2 (Cb^½ Ca Cb^½)^½)`.
pub fn frechet_w2(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    let n = a.dim();
    if b.dim() != n || a.cov.len() != n * n || b.cov.len() != n * n {
        return Err(dim_err!("fits of dimension {} and {}", a.dim(), b.dim()));
    }
    let dm: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let sb = sym_apply(&b.cov, n, libm::sqrt)?;
    let mut inner = matmul(&matmul(&sb, &a.cov, n), &sb, n);
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (inner[i * n + j] + inner[j * n + i]);
            inner[i * n + j] = s;
            inner[j * n + i] = s;
        }
    }
    let (vals, _) = sym_eigen(&inner, n)?;
    let cross: f64 = vals.iter().map(|&l| libm::sqrt(l.max(0.0))).sum();
    let tr: f64 = (0..n).map(|i| a.cov[i * n + i] + b.cov[i * n + i]).sum();
    Ok((dm + tr - 2.0 * cross).max(0.0))
}

/// `frechet_w2` between Gaussian fits of two latent batches.
pub fn w2_between(a: &[LatentSeq], b: &[LatentSeq]) -> Result<f64> {
    frechet_w2(&fit_gaussian(&flatten(a))?, &fit_gaussian(&flatten(b))?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentReport {
    /// Fraction of planted events detected at their own block.
    pub accuracy: f64,
    /// Expected accuracy of a detector that picks a candidate block uniformly.
    pub chance: f64,
    pub events: usize,
}

impl AlignmentReport {
    /// Binomial standard deviation of the accuracy under chance.
    pub fn chance_sigma(&self) -> f64 {
        if self.events == 0 {
            return 0.0;
        }
        libm::sqrt(self.chance * (1.0 - self.chance) / self.events as f64)
    }
}

/// Scores generated latents against the events planted in their conditions.
pub fn alignment_accuracy(
    generated: &[LatentSeq],
    conditions: &[ConditionSeq],
    spec: &EventTaskSpec,
) -> Result<AlignmentReport> {
    if generated.len() != conditions.len() {
        return Err(dim_err!(
            "{} sequences for {} conditions",
            generated.len(),
            conditions.len()
        ));
    }
    let templates = spec.templates();
    let (mut hits, mut events, mut chance) = (0usize, 0usize, 0.0f64);
    for (x, c) in generated.iter().zip(conditions) {
        if x.shape() != [spec.latent_len(), spec.dim] {
            return Err(dim_err!(
                "generated {:?} does not match [{}, {}]",
                x.shape(),
                spec.latent_len(),
                spec.dim
            ));
        }
        let ev = spec.events_of(c)?;
        for j in 0..ev.len() {
            if ev[j].is_some() {
                let (hit, cands) = detect_event(x, &ev, &templates, j);
                hits += hit as usize;
                events += 1;
                chance += 1.0 / cands as f64;
            }
        }
    }
    if events == 0 {
        return Ok(AlignmentReport {
            accuracy: 0.0,
            chance: 0.0,
            events: 0,
        });
    }
    Ok(AlignmentReport {
        accuracy: hits as f64 / events as f64,
        chance: chance / events as f64,
        events,
    })
}

/// Scores sequence `i` against condition `i + 1` (cyclically). Applied to
/// clean data this gives the score of a sequence that is unrelated to its
/// condition but otherwise realistic; applied to model samples it is the
/// condition-shuffled control.
pub fn mismatched_alignment(
    generated: &[LatentSeq],
    conditions: &[ConditionSeq],
    spec: &EventTaskSpec,
) -> Result<AlignmentReport> {
    if conditions.is_empty() {
        return alignment_accuracy(generated, conditions, spec);
    }
    let mut shifted = conditions.to_vec();
    shifted.rotate_left(1);
    alignment_accuracy(generated, &shifted, spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fit1(mean: f64, var: f64) -> GaussianFit {
        GaussianFit {
            mean: vec![mean],
            cov: vec![var],
        }
    }

    #[test]
    fn unbiased_two_point_fit() {
        let f = fit_gaussian(&[vec![-1.0], vec![1.0]]).unwrap();
        assert_eq!(f.mean, vec![0.0]);
        assert_eq!(f.cov, vec![2.0]);
        assert!(matches!(fit_gaussian(&[vec![1.0]]), Err(Error::Usage(_))));
    }

    #[test]
    fn constant_samples_have_zero_covariance() {
        let s = vec![vec![1.5, -2.0]; 7];
        let f = fit_gaussian(&s).unwrap();
        assert_eq!(f.mean, vec![1.5, -2.0]);
        assert!(f.cov.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_dimensional_closed_form() {
        assert!((frechet_w2(&fit1(0.0, 1.0), &fit1(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        let w = frechet_w2(&fit1(0.5, 4.0), &fit1(-1.0, 0.25)).unwrap();
        assert!((w - (2.25 + 1.5 * 1.5)).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let b = GaussianFit {
            mean: vec![0.0, 0.0],
            cov: vec![1.0, 0.0, 0.0, 1.0],
        };
        assert!(matches!(frechet_w2(&fit1(0.0, 1.0), &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn eigen_reconstruction() {
        let a = [4.0, 1.0, -2.0, 1.0, 2.0, 0.5, -2.0, 0.5, 3.0];
        let (vals, q) = sym_eigen(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|k| q[i * 3 + k] * vals[k] * q[j * 3 + k]).sum();
                assert!((r - a[i * 3 + j]).abs() < 1e-10);
            }
        }
    }
}
