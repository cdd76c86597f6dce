use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::autodiff::Var;
use crate::error::{shape_err, Error, Result};

/// Diagonal Gaussian parameterized by mean and log-variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        let g = DiagGaussian { mean, logvar };
        g.validate()?;
        Ok(g)
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            logvar: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.is_empty() || self.mean.len() != self.logvar.len() {
            return Err(Error::InvalidDistribution(format!(
                "mean has {} entries, logvar has {}",
                self.mean.len(),
                self.logvar.len()
            )));
        }
        let finite = self.mean.iter().all(|v| v.is_finite())
            && self
                .logvar
                .iter()
                .all(|v| v.is_finite() && v.exp() > 0.0 && v.exp().is_finite());
        if !finite {
            return Err(Error::InvalidDistribution(
                "non-finite mean or variance".into(),
            ));
        }
        Ok(())
    }

    pub fn variance(&self) -> Vec<f64> {
        self.logvar.iter().map(|v| v.exp()).collect()
    }

    /// `mean + exp(logvar / 2) * eps` with `eps ~ N(0, I)`.
    pub fn reparam_sample<R: Rng>(&self, rng: &mut R) -> Result<Vec<f64>> {
        self.validate()?;
        let eps: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        Ok(self.sample_with(&eps))
    }

    /// Deterministic half of the reparameterization, given the noise.
    pub fn sample_with(&self, eps: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.logvar)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        self.mean
            .iter()
            .zip(&self.logvar)
            .zip(x)
            .map(|((m, lv), v)| -0.5 * (ln2pi + lv + (v - m) * (v - m) / lv.exp()))
            .sum()
    }
}

/// Closed-form `KL(q || p)` between diagonal Gaussians.
pub fn kl_diag_gaussians(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return shape_err(format!("KL between dims {} and {}", q.dim(), p.dim()));
    }
    let mut kl = 0.0;
    for d in 0..q.dim() {
        let (mq, lq, mp, lp) = (q.mean[d], q.logvar[d], p.mean[d], p.logvar[d]);
        kl += 0.5 * ((lp - lq) + ((lq.exp() + (mq - mp) * (mq - mp)) / lp.exp()) - 1.0);
    }
    Ok(kl)
}

/// Per-row KL on the tape. All four arguments are `rows x d`; the result
/// is `rows x 1`.
pub fn kl_diag_rows<'t>(
    q_mean: Var<'t>,
    q_logvar: Var<'t>,
    p_mean: Var<'t>,
    p_logvar: Var<'t>,
) -> Var<'t> {
    let diff = q_mean.sub(p_mean).square();
    let ratio = q_logvar.exp().add(diff).div(p_logvar.exp());
    p_logvar
        .sub(q_logvar)
        .add(ratio)
        .add_const(-1.0)
        .scale(0.5)
        .sum_rows()
}

/// KL of a diagonal Gaussian (single row) against `N(0, I)`, on the tape.
pub fn kl_standard_normal<'t>(mean: Var<'t>, logvar: Var<'t>) -> Var<'t> {
    logvar
        .exp()
        .add(mean.square())
        .sub(logvar)
        .add_const(-1.0)
        .scale(0.5)
        .sum()
}

/// Reparameterized draw on the tape: `mean + exp(logvar / 2) * eps`.
pub fn reparam_rows<'t>(mean: Var<'t>, logvar: Var<'t>, eps: Var<'t>) -> Var<'t> {
    mean.add(logvar.scale(0.5).exp().mul(eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_variance_returns_mean() {
        let g = DiagGaussian::new(vec![1.5, -2.0], vec![-50.0, -50.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = g.reparam_sample(&mut rng).unwrap();
        assert!((s[0] - 1.5).abs() < 1e-8 && (s[1] + 2.0).abs() < 1e-8);
    }

    #[test]
    fn standard_normal_moments() {
        let g = DiagGaussian::standard(1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| g.reparam_sample(&mut rng).unwrap()[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn same_seed_same_draw() {
        let g = DiagGaussian::new(vec![0.1, 0.2, 0.3], vec![0.0, -1.0, 1.0]).unwrap();
        let a = g.reparam_sample(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = g.reparam_sample(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_parameters_rejected() {
        let g = DiagGaussian {
            mean: vec![f64::NAN],
            logvar: vec![0.0],
        };
        let err = g.reparam_sample(&mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(err, Error::InvalidDistribution(_)));
        assert!(DiagGaussian::new(vec![0.0], vec![1000.0]).is_err());
    }

    #[test]
    fn kl_known_values() {
        let q = DiagGaussian::new(vec![0.3, -0.7], vec![0.2, -0.4]).unwrap();
        assert!(kl_diag_gaussians(&q, &q).unwrap().abs() < 1e-12);
        let n01 = DiagGaussian::new(vec![0.0], vec![0.0]).unwrap();
        let n11 = DiagGaussian::new(vec![1.0], vec![0.0]).unwrap();
        assert!((kl_diag_gaussians(&n01, &n11).unwrap() - 0.5).abs() < 1e-12);
        let n04 = DiagGaussian::new(vec![0.0], vec![4f64.ln()]).unwrap();
        let v = kl_diag_gaussians(&n04, &n01).unwrap();
        assert!((v - 0.806853).abs() < 1e-6, "{v}");
    }

    #[test]
    fn kl_dimension_mismatch() {
        let a = DiagGaussian::standard(2);
        let b = DiagGaussian::standard(3);
        assert!(matches!(kl_diag_gaussians(&a, &b), Err(Error::Shape(_))));
    }
}
