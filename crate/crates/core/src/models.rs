//! Closed-form predictors: noise prediction ε(x, t) and data prediction μ(x, t).

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::schedule::NoiseLevel;
use crate::{Error, Result};

/// A model exposing ε(x, t) and μ(x, t) = (x − σ_t ε)/α_t.
///
/// Evaluations take a [`NoiseLevel`] rather than a bare time so that step
/// code never re-derives α, σ or λ.
pub trait Predictor {
    fn dim(&self) -> usize;

    fn eval_noise(&self, x: &Array1<f64>, level: &NoiseLevel) -> Result<Array1<f64>>;

    fn eval_data(&self, x: &Array1<f64>, level: &NoiseLevel) -> Result<Array1<f64>> {
        let eps = self.eval_noise(x, level)?;
        data_from_noise(x, level, &eps)
    }

    /// Scalar g with μ(x, t) = g·x, for models whose data prediction is linear in x.
    fn linear_data_gain(&self, _level: &NoiseLevel) -> Option<f64> {
        None
    }

    fn as_gaussian(&self) -> Option<&IsotropicGaussianModel> {
        None
    }
}

fn check_dim(expected: usize, x: &Array1<f64>) -> Result<()> {
    if x.len() == expected {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected,
            got: x.len(),
        })
    }
}

/// μ = (x − σ ε)/α.
pub fn data_from_noise(x: &Array1<f64>, level: &NoiseLevel, eps: &Array1<f64>) -> Result<Array1<f64>> {
    check_dim(x.len(), eps)?;
    if !(level.alpha > 0.0) {
        return Err(Error::Degenerate(format!("alpha = {} at t = {}", level.alpha, level.t)));
    }
    if level.sigma == 0.0 {
        return Ok(x / level.alpha);
    }
    Ok((x - &(eps * level.sigma)) / level.alpha)
}

/// ε = (x − α μ)/σ.
pub fn noise_from_data(x: &Array1<f64>, level: &NoiseLevel, mu: &Array1<f64>) -> Result<Array1<f64>> {
    check_dim(x.len(), mu)?;
    if !(level.sigma > 0.0) {
        return Err(Error::Degenerate(format!(
            "noise is undetermined by data prediction at sigma = 0 (t = {})",
            level.t
        )));
    }
    Ok((x - &(mu * level.alpha)) / level.sigma)
}

/// Target N(0, γ² I_d).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotropicGaussianModel {
    pub gamma: f64,
    pub dim: usize,
}

impl IsotropicGaussianModel {
    pub fn new(gamma: f64, dim: usize) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidModel(format!("gamma must be finite and >= 0, got {gamma}")));
        }
        if dim == 0 {
            return Err(Error::InvalidModel("dim must be at least 1".into()));
        }
        Ok(IsotropicGaussianModel { gamma, dim })
    }

    fn marginal_variance(&self, level: &NoiseLevel) -> f64 {
        let ag = level.alpha * self.gamma;
        ag * ag + level.sigma * level.sigma
    }

    /// c with ε(x, t) = c·x.
    pub fn noise_gain(&self, level: &NoiseLevel) -> Result<f64> {
        let v = self.marginal_variance(level);
        if v == 0.0 {
            return Err(Error::Degenerate("gamma = 0 and sigma = 0".into()));
        }
        Ok(level.sigma / v)
    }

    /// g with μ(x, t) = g·x.
    pub fn data_gain(&self, level: &NoiseLevel) -> Result<f64> {
        let v = self.marginal_variance(level);
        if v == 0.0 {
            return Err(Error::Degenerate("gamma = 0 and sigma = 0".into()));
        }
        if self.gamma == 0.0 {
            return Ok(0.0);
        }
        Ok(level.alpha * self.gamma * self.gamma / v)
    }
}

impl Predictor for IsotropicGaussianModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_noise(&self, x: &Array1<f64>, level: &NoiseLevel) -> Result<Array1<f64>> {
        check_dim(self.dim, x)?;
        Ok(x * self.noise_gain(level)?)
    }

    fn eval_data(&self, x: &Array1<f64>, level: &NoiseLevel) -> Result<Array1<f64>> {
        check_dim(self.dim, x)?;
        Ok(x * self.data_gain(level)?)
    }

    fn linear_data_gain(&self, level: &NoiseLevel) -> Option<f64> {
        self.data_gain(level).ok()
    }

    fn as_gaussian(&self) -> Option<&IsotropicGaussianModel> {
        Some(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub w: f64,
    pub mean: Vec<f64>,
    pub s: f64,
}

/// Target Σ_k w_k N(m_k, s_k² I_d).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureModel {
    weights: Vec<f64>,
    means: Vec<Array1<f64>>,
    scales: Vec<f64>,
    dim: usize,
}

impl GaussianMixtureModel {
    pub fn new(components: &[MixtureComponent]) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidModel("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidModel("component means must be non-empty".into()));
        }
        let mut total = 0.0;
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(Error::InvalidModel(format!(
                    "component {k} has dimension {}, expected {dim}",
                    c.mean.len()
                )));
            }
            if !(c.w > 0.0 && c.w.is_finite()) || !(c.s > 0.0 && c.s.is_finite()) {
                return Err(Error::InvalidModel(format!(
                    "component {k} needs w > 0 and s > 0, got w = {}, s = {}",
                    c.w, c.s
                )));
            }
            total += c.w;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidModel(format!("weights sum to {total}, expected 1")));
        }
        Ok(GaussianMixtureModel {
            weights: components.iter().map(|c| c.w).collect(),
            means: components.iter().map(|c| Array1::from(c.mean.clone())).collect(),
            scales: components.iter().map(|c| c.s).collect(),
            dim,
        })
    }

    pub fn components(&self) -> Vec<MixtureComponent> {
        (0..self.weights.len())
            .map(|k| MixtureComponent {
                w: self.weights[k],
                mean: self.means[k].to_vec(),
                s: self.scales[k],
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Per-component (log w_k + log N(x; α m_k, v_k I), v_k).
    fn log_terms(&self, x: &Array1<f64>, level: &NoiseLevel) -> Vec<(f64, f64)> {
        let d = self.dim as f64;
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        (0..self.len())
            .map(|k| {
                let as_ = level.alpha * self.scales[k];
                let v = as_ * as_ + level.sigma * level.sigma;
                let r2: f64 = x
                    .iter()
                    .zip(self.means[k].iter())
                    .map(|(xi, mi)| {
                        let u = xi - level.alpha * mi;
                        u * u
                    })
                    .sum();
                let lw = self.weights[k].ln() - 0.5 * d * (ln2pi + v.ln()) - 0.5 * r2 / v;
                (lw, v)
            })
            .collect()
    }

    /// Posterior component probabilities at (x, t).
    pub fn responsibilities(&self, x: &Array1<f64>, level: &NoiseLevel) -> Result<Vec<f64>> {
        check_dim(self.dim, x)?;
        let terms = self.log_terms(x, level);
        Ok(normalise(&terms))
    }

    /// log q_t(x).
    pub fn log_density(&self, x: &Array1<f64>, level: &NoiseLevel) -> Result<f64> {
        check_dim(self.dim, x)?;
        let terms = self.log_terms(x, level);
        let m = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        Ok(m + terms.iter().map(|t| (t.0 - m).exp()).sum::<f64>().ln())
    }

    /// A draw from q_t given a uniform variate and standard normals.
    pub fn sample_marginal(&self, level: &NoiseLevel, u: f64, z: &Array1<f64>) -> Array1<f64> {
        let mut acc = 0.0;
        let mut k = self.len() - 1;
        for (j, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = j;
                break;
            }
        }
        let as_ = level.alpha * self.scales[k];
        let sd = (as_ * as_ + level.sigma * level.sigma).sqrt();
        &self.means[k] * level.alpha + z * sd
    }
}

fn normalise(terms: &[(f64, f64)]) -> Vec<f64> {
    let m = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = terms.iter().map(|t| (t.0 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl Predictor for GaussianMixtureModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_noise(&self, x: &Array1<f64>, level: &NoiseLevel) -> Result<Array1<f64>> {
        check_dim(self.dim, x)?;
        let terms = self.log_terms(x, level);
        let resp = normalise(&terms);
        // ε = σ Σ_k r_k (x − α m_k)/v_k
        let mut eps = Array1::zeros(self.dim);
        for k in 0..self.len() {
            let c = resp[k] / terms[k].1;
            if c == 0.0 {
                continue;
            }
            eps.scaled_add(c, x);
            eps.scaled_add(-c * level.alpha, &self.means[k]);
        }
        Ok(eps * level.sigma)
    }

    fn eval_data(&self, x: &Array1<f64>, level: &NoiseLevel) -> Result<Array1<f64>> {
        let eps = self.eval_noise(x, level)?;
        data_from_noise(x, level, &eps)
    }
}

/// ε(x, t(λ)) = Σ_k c_k λ^k, independent of x.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyLambdaModel {
    coeffs: Vec<Array1<f64>>,
}

impl PolyLambdaModel {
    pub fn new(coeffs: Vec<Vec<f64>>) -> Result<Self> {
        let dim = coeffs
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidModel("poly model needs at least one coefficient".into()))?;
        if dim == 0 || coeffs.iter().any(|c| c.len() != dim) {
            return Err(Error::InvalidModel(
                "poly coefficients must be non-empty vectors of equal length".into(),
            ));
        }
        Ok(PolyLambdaModel {
            coeffs: coeffs.into_iter().map(Array1::from).collect(),
        })
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[Array1<f64>] {
        &self.coeffs
    }

    pub fn eval_at_lambda(&self, lam: f64) -> Array1<f64> {
        let mut acc = self.coeffs[self.degree()].clone();
        for c in self.coeffs.iter().rev().skip(1) {
            acc *= lam;
            acc += c;
        }
        acc
    }
}

impl Predictor for PolyLambdaModel {
    fn dim(&self) -> usize {
        self.coeffs[0].len()
    }

    fn eval_noise(&self, x: &Array1<f64>, level: &NoiseLevel) -> Result<Array1<f64>> {
        check_dim(self.dim(), x)?;
        if !level.lambda.is_finite() {
            if self.degree() == 0 {
                return Ok(self.coeffs[0].clone());
            }
            return Err(Error::Degenerate("polynomial in lambda at sigma = 0".into()));
        }
        Ok(self.eval_at_lambda(level.lambda))
    }
}

/// Model description as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    Gaussian { gamma: f64, dim: usize },
    Mixture { components: Vec<MixtureComponent> },
    Poly { coeffs: Vec<Vec<f64>> },
}

impl ModelSpec {
    pub fn build(&self) -> Result<Model> {
        Ok(match self {
            ModelSpec::Gaussian { gamma, dim } => Model::Gaussian(IsotropicGaussianModel::new(*gamma, *dim)?),
            ModelSpec::Mixture { components } => Model::Mixture(GaussianMixtureModel::new(components)?),
            ModelSpec::Poly { coeffs } => Model::Poly(PolyLambdaModel::new(coeffs.clone())?),
        })
    }

    /// Two equal-weight components at ±(1, 0, …, 0) with scale 0.5.
    pub fn symmetric_pair(dim: usize) -> Self {
        let mut m = vec![0.0; dim];
        m[0] = 1.0;
        let neg: Vec<f64> = m.iter().map(|v| -v).collect();
        ModelSpec::Mixture {
            components: vec![
                MixtureComponent { w: 0.5, mean: m, s: 0.5 },
                MixtureComponent { w: 0.5, mean: neg, s: 0.5 },
            ],
        }
    }
}

/// Any of the built-in models.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Gaussian(IsotropicGaussianModel),
    Mixture(GaussianMixtureModel),
    Poly(PolyLambdaModel),
}

impl Model {
    fn inner(&self) -> &dyn Predictor {
        match self {
            Model::Gaussian(m) => m,
            Model::Mixture(m) => m,
            Model::Poly(m) => m,
        }
    }
}

impl Predictor for Model {
    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn eval_noise(&self, x: &Array1<f64>, level: &NoiseLevel) -> Result<Array1<f64>> {
        self.inner().eval_noise(x, level)
    }

    fn eval_data(&self, x: &Array1<f64>, level: &NoiseLevel) -> Result<Array1<f64>> {
        self.inner().eval_data(x, level)
    }

    fn linear_data_gain(&self, level: &NoiseLevel) -> Option<f64> {
        self.inner().linear_data_gain(level)
    }

    fn as_gaussian(&self) -> Option<&IsotropicGaussianModel> {
        self.inner().as_gaussian()
    }
}
