//! Regularized least squares over vectorized bilinear features with rank-1
//! updates, confidence radii, optimistic indices and the rarely switching
//! refresh rule.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::dot;

const RESYMMETRIZE_EVERY: u64 = 10_000;

/// Running state `Λ = ζI + Σ w wᵀ`, `b = Σ w ξ`.
///
/// `Λ⁻¹` is kept by Sherman–Morrison updates and `log det Λ` by the matrix
/// determinant lemma. `Λ` itself is kept as well for ellipsoid norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizedDesign {
    dim: usize,
    zeta: f64,
    inv_lambda: Vec<f64>,
    lambda: Vec<f64>,
    b: Vec<f64>,
    log_det: f64,
    update_count: u64,
}

impl RegularizedDesign {
    /// Fresh design of dimension `dim` (the length of `w`, i.e. `d²`).
    pub fn new(dim: usize, zeta: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("design dimension must be positive".into()));
        }
        if !(zeta > 0.0) || !zeta.is_finite() {
            return Err(Error::InvalidConfig(format!("zeta = {zeta} must be > 0")));
        }
        let mut inv_lambda = vec![0.0; dim * dim];
        let mut lambda = vec![0.0; dim * dim];
        for k in 0..dim {
            inv_lambda[k * dim + k] = 1.0 / zeta;
            lambda[k * dim + k] = zeta;
        }
        Ok(Self {
            dim,
            zeta,
            inv_lambda,
            lambda,
            b: vec![0.0; dim],
            log_det: dim as f64 * zeta.ln(),
            update_count: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    /// Row-major `Λ⁻¹`.
    pub fn inv_lambda(&self) -> &[f64] {
        &self.inv_lambda
    }

    /// Row-major `Λ`.
    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn det(&self) -> f64 {
        self.log_det.exp()
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    fn inv_times(&self, w: &[f64]) -> Vec<f64> {
        self.inv_lambda.chunks_exact(self.dim).map(|row| dot(row, w)).collect()
    }

    /// `wᵀ Λ⁻¹ w`.
    pub fn inv_quadratic(&self, w: &[f64]) -> f64 {
        dot(w, &self.inv_times(w)).max(0.0)
    }

    /// `sqrt(xᵀ Λ x)`.
    pub fn lambda_norm(&self, x: &[f64]) -> f64 {
        let lx: Vec<f64> = self.lambda.chunks_exact(self.dim).map(|row| dot(row, x)).collect();
        dot(x, &lx).max(0.0).sqrt()
    }

    fn check_vector(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: w.len(),
            });
        }
        Ok(())
    }

    /// Rank-1 update with feature `w` and observed reward `xi`.
    pub fn update(&mut self, w: &[f64], xi: f64) -> Result<()> {
        self.check_vector(w)?;
        if !xi.is_finite() || w.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("bandit update"));
        }
        let p = self.dim;
        let u = self.inv_times(w);
        let denom = 1.0 + dot(w, &u);
        for r in 0..p {
            let ur = u[r] / denom;
            let row = &mut self.inv_lambda[r * p..(r + 1) * p];
            for (c, x) in row.iter_mut().enumerate() {
                *x -= ur * u[c];
            }
        }
        for r in 0..p {
            for c in 0..p {
                self.lambda[r * p + c] += w[r] * w[c];
            }
            self.b[r] += w[r] * xi;
        }
        self.log_det += denom.ln();
        self.update_count += 1;
        if self.update_count % RESYMMETRIZE_EVERY == 0 {
            self.resymmetrize();
        }
        Ok(())
    }

    fn resymmetrize(&mut self) {
        let p = self.dim;
        for r in 0..p {
            for c in r + 1..p {
                let m = 0.5 * (self.inv_lambda[r * p + c] + self.inv_lambda[c * p + r]);
                self.inv_lambda[r * p + c] = m;
                self.inv_lambda[c * p + r] = m;
            }
        }
    }

    /// Ridge estimate `Λ⁻¹ b`.
    pub fn theta_hat(&self) -> Vec<f64> {
        self.inv_times(&self.b)
    }

    /// Whether `‖θ̂ − θ‖_Λ ≤ √β(t)`.
    pub fn covers(&self, theta: &[f64], params: &ConfidenceParams, t: usize) -> Result<bool> {
        self.check_vector(theta)?;
        let diff: Vec<f64> = self.theta_hat().iter().zip(theta).map(|(a, b)| a - b).collect();
        Ok(self.lambda_norm(&diff) <= params.sqrt_beta(t)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let design: Self = serde_json::from_reader(std::io::BufReader::new(file))?;
        let p = design.dim;
        if design.inv_lambda.len() != p * p || design.lambda.len() != p * p || design.b.len() != p {
            return Err(Error::InvalidInput("checkpoint has inconsistent dimensions".into()));
        }
        Ok(design)
    }
}

/// Parameters of the confidence radius `√β(t) = κ √(d² log(tT)) + √ζ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceParams {
    pub kappa: f64,
    pub horizon: usize,
    pub zeta: f64,
    /// Feature dimension `d`; the design has dimension `d²`.
    pub feature_dim: usize,
}

impl ConfidenceParams {
    pub fn sqrt_beta(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.horizon {
            return Err(Error::OutOfRange {
                what: "t",
                value: t as f64,
                low: 1.0,
                high: self.horizon as f64,
            });
        }
        let d2 = (self.feature_dim * self.feature_dim) as f64;
        let log_term = (t as f64 * self.horizon as f64).ln();
        Ok(self.kappa * (d2 * log_term).sqrt() + self.zeta.sqrt())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.sqrt_beta(t).map(|s| s * s)
    }
}

/// Optimistic index `wᵀθ̂ + ‖w‖_{Λ⁻¹} √β` for a precomputed `θ̂`.
pub fn optimistic_index(design: &RegularizedDesign, theta_hat: &[f64], w: &[f64], sqrt_beta: f64) -> f64 {
    dot(w, theta_hat) + design.inv_quadratic(w).sqrt() * sqrt_beta
}

pub fn ucb_index(design: &RegularizedDesign, params: &ConfidenceParams, w: &[f64], t: usize) -> Result<f64> {
    design.check_vector(w)?;
    Ok(optimistic_index(design, &design.theta_hat(), w, params.sqrt_beta(t)?))
}

/// Indices for a batch of features sharing one `θ̂`.
pub fn ucb_indices(
    design: &RegularizedDesign,
    params: &ConfidenceParams,
    features: &[&[f64]],
    t: usize,
) -> Result<Vec<f64>> {
    let theta = design.theta_hat();
    let radius = params.sqrt_beta(t)?;
    features
        .iter()
        .map(|w| {
            design.check_vector(w)?;
            Ok(optimistic_index(design, &theta, w, radius))
        })
        .collect()
}

pub fn truncated_estimate(index: f64, bound: f64) -> f64 {
    index.clamp(-bound, bound)
}

/// Cached indices for the rarely switching variant.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchState {
    threshold: f64,
    log_det_at_refresh: Option<f64>,
    cached: Vec<f64>,
    refresh_count: usize,
}

impl SwitchState {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(threshold >= 0.0) || !threshold.is_finite() {
            return Err(Error::InvalidConfig(format!("switch threshold {threshold} must be >= 0")));
        }
        Ok(Self {
            threshold,
            log_det_at_refresh: None,
            cached: Vec::new(),
            refresh_count: 0,
        })
    }

    pub fn refresh_count(&self) -> usize {
        self.refresh_count
    }

    pub fn cached(&self) -> &[f64] {
        &self.cached
    }

    /// Recompute all indices when `t = 1` or `det Λ > (1 + C) D*`; returns
    /// whether a refresh happened. Cached indices are in [`Self::cached`].
    pub fn maybe_refresh(
        &mut self,
        design: &RegularizedDesign,
        params: &ConfidenceParams,
        all_w: &[&[f64]],
        t: usize,
    ) -> Result<bool> {
        let due = match self.log_det_at_refresh {
            None => true,
            Some(d_star) => t == 1 || design.log_det() > d_star + self.threshold.ln_1p(),
        };
        if due {
            self.cached = ucb_indices(design, params, all_w, t)?;
            self.log_det_at_refresh = Some(design.log_det());
            self.refresh_count += 1;
        }
        Ok(due)
    }
}
