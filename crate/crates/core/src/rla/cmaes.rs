//! (μ/μ_w, λ)-CMA-ES with cumulative step-size adaptation, rank-one and
//! rank-μ covariance updates, following Hansen's tutorial defaults.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

pub const DEFAULT_SIGMA0: f64 = 0.7;
pub const DEFAULT_MAX_ITERATIONS: usize = 20;

/// Covariance condition number above which the matrix is regularised.
const MAX_CONDITION: f64 = 1e14;

/// `λ = 4 + ⌊3·ln K⌋`.
pub fn default_population(dimension: usize) -> Result<usize> {
    if dimension < 1 {
        return Err(Error::config("dimension", "K must be at least 1"));
    }
    Ok(4 + (3.0 * (dimension as f64).ln()).floor() as usize)
}

/// `μ = ⌊λ/2⌋`.
pub fn default_parents(population: usize) -> usize {
    population / 2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmaesConfig {
    pub dimension: usize,
    pub population: usize,
    pub parents: usize,
    pub sigma0: f64,
    pub max_iterations: usize,
    pub initial_mean: Vec<f64>,
}

impl CmaesConfig {
    /// Defaults for `K` coordinates with the mean at `(1/K, …, 1/K)`.
    pub fn for_dimension(dimension: usize) -> Result<Self> {
        let population = default_population(dimension)?;
        Ok(Self {
            dimension,
            population,
            parents: default_parents(population),
            sigma0: DEFAULT_SIGMA0,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            initial_mean: vec![1.0 / dimension as f64; dimension],
        })
    }

    pub fn with_mean(mut self, mean: Vec<f64>) -> Self {
        self.initial_mean = mean;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension < 1 {
            return Err(Error::config("cmaes.dimension", "must be at least 1"));
        }
        if self.population < 2 {
            return Err(Error::config("cmaes.population", "λ must be at least 2"));
        }
        if self.parents < 1 || self.parents > self.population {
            return Err(Error::config("cmaes.parents", "need 1 ≤ μ ≤ λ"));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::config("cmaes.sigma0", "must be a positive finite number"));
        }
        if self.initial_mean.len() != self.dimension {
            return Err(Error::config(
                "cmaes.initial_mean",
                format!("length {} != dimension {}", self.initial_mean.len(), self.dimension),
            ));
        }
        if self.initial_mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("cmaes.initial_mean", "entries must be finite"));
        }
        Ok(())
    }
}

/// Search distribution `N(m, σ²C)` plus evolution paths and strategy constants.
#[derive(Clone, Debug)]
pub struct CmaesState {
    pub mean: DVector<f64>,
    pub sigma: f64,
    pub cov: DMatrix<f64>,
    pub path_sigma: DVector<f64>,
    pub path_c: DVector<f64>,
    pub generation: usize,
    pub population: usize,
    pub weights: Vec<f64>,
    pub mu_eff: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub c_c: f64,
    pub c_1: f64,
    pub c_mu: f64,
    pub chi_n: f64,
    basis: DMatrix<f64>,
    scales: DVector<f64>,
    rng: ChaCha8Rng,
}

impl CmaesState {
    pub fn new(cfg: &CmaesConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.dimension as f64;
        let mu = cfg.parents;
        let raw: Vec<f64> = (1..=mu).map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln()).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff));
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));

        let d = cfg.dimension;
        Ok(Self {
            mean: DVector::from_vec(cfg.initial_mean.clone()),
            sigma: cfg.sigma0,
            cov: DMatrix::identity(d, d),
            path_sigma: DVector::zeros(d),
            path_c: DVector::zeros(d),
            generation: 0,
            population: cfg.population,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
            basis: DMatrix::identity(d, d),
            scales: DVector::from_element(d, 1.0),
            rng: seeds::rng(seed),
        })
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    pub fn parents(&self) -> usize {
        self.weights.len()
    }

    /// Draws `λ` candidates `m + σ·C^{1/2}·z`, `z ~ N(0, I)`.
    pub fn ask(&mut self) -> Result<Vec<Vec<f64>>> {
        let n = self.dimension();
        let mut out = Vec::with_capacity(self.population);
        for _ in 0..self.population {
            let z = DVector::from_fn(n, |_, _| self.rng.sample::<f64, _>(StandardNormal));
            let y = &self.basis * z.component_mul(&self.scales);
            let x = &self.mean + y * self.sigma;
            out.push(x.iter().copied().collect());
        }
        Ok(out)
    }

    /// Rank-based update from one generation of evaluated candidates
    /// (lower fitness is better; ties keep candidate order).
    pub fn tell(&mut self, candidates: &[Vec<f64>], fitnesses: &[f64]) -> Result<()> {
        let n = self.dimension();
        if candidates.len() != self.population || fitnesses.len() != self.population {
            return Err(Error::dim(
                "cmaes_tell",
                &[self.population],
                &[candidates.len(), fitnesses.len()],
            ));
        }
        if let Some(i) = fitnesses.iter().position(|f| f.is_nan()) {
            return Err(Error::Optimizer(format!("candidate {i} has NaN fitness")));
        }
        if let Some(i) = candidates.iter().position(|c| c.len() != n) {
            return Err(Error::dim("cmaes_tell", &[n], &[candidates[i].len()]));
        }
        let mut order: Vec<usize> = (0..self.population).collect();
        order.sort_by(|&a, &b| fitnesses[a].total_cmp(&fitnesses[b]));

        let old_mean = self.mean.clone();
        let steps: Vec<DVector<f64>> = order[..self.parents()]
            .iter()
            .map(|&i| (DVector::from_column_slice(&candidates[i]) - &old_mean) / self.sigma)
            .collect();
        let mut y_w = DVector::zeros(n);
        for (w, y) in self.weights.iter().zip(&steps) {
            y_w += y * *w;
        }
        self.mean = &old_mean + &y_w * self.sigma;
        self.generation += 1;

        // C^{-1/2} y_w = B D^{-1} Bᵀ y_w
        let inv_sqrt_y = &self.basis * (self.basis.transpose() * &y_w).component_div(&self.scales);
        self.path_sigma = &self.path_sigma * (1.0 - self.c_sigma)
            + inv_sqrt_y * (self.c_sigma * (2.0 - self.c_sigma) * self.mu_eff).sqrt();

        let ps_norm = self.path_sigma.norm();
        let decay = 1.0 - (1.0 - self.c_sigma).powi(2 * self.generation as i32);
        let h_sigma = ps_norm / decay.sqrt() < (1.4 + 2.0 / (n as f64 + 1.0)) * self.chi_n;
        let h = if h_sigma { 1.0 } else { 0.0 };

        self.path_c = &self.path_c * (1.0 - self.c_c) + &y_w * (h * (self.c_c * (2.0 - self.c_c) * self.mu_eff).sqrt());

        let delta_h = (1.0 - h) * self.c_c * (2.0 - self.c_c);
        let weight_sum: f64 = self.weights.iter().sum();
        let mut cov = &self.cov * (1.0 + self.c_1 * delta_h - self.c_1 - self.c_mu * weight_sum);
        cov += &self.path_c * self.path_c.transpose() * self.c_1;
        for (w, y) in self.weights.iter().zip(&steps) {
            cov += y * y.transpose() * (self.c_mu * w);
        }
        self.cov = cov;

        self.sigma *= ((self.c_sigma / self.d_sigma) * (ps_norm / self.chi_n - 1.0)).exp();
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Optimizer(format!("step size became {}", self.sigma)));
        }
        self.refresh_eigen()
    }

    /// Symmetrises `C`, regularises it when ill-conditioned and caches its
    /// eigendecomposition for sampling.
    fn refresh_eigen(&mut self) -> Result<()> {
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        let mut eig = SymmetricEigen::new(sym.clone());
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(max > 0.0) || !max.is_finite() {
            return Err(Error::Optimizer("covariance lost positive definiteness".into()));
        }
        if min <= 0.0 || max / min > MAX_CONDITION {
            let jitter = max / MAX_CONDITION - min.min(0.0);
            let repaired = sym + DMatrix::identity(self.dimension(), self.dimension()) * jitter;
            eig = SymmetricEigen::new(repaired.clone());
            if !(eig.eigenvalues.min() > 0.0) {
                return Err(Error::Optimizer("covariance not positive definite after repair".into()));
            }
            self.cov = repaired;
        } else {
            self.cov = sym;
        }
        self.scales = eig.eigenvalues.map(f64::sqrt);
        self.basis = eig.eigenvectors;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best: f64,
    pub mean: f64,
    pub best_so_far: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmaesRun {
    pub best_x: Vec<f64>,
    pub best_fitness: f64,
    pub final_mean: Vec<f64>,
    pub evaluations: usize,
    pub history: Vec<GenerationStats>,
}

/// Minimises `f` for `cfg.max_iterations` generations, returning the best
/// candidate ever evaluated.
pub fn minimize<F>(mut f: F, cfg: &CmaesConfig, seed: u64) -> Result<CmaesRun>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut state = CmaesState::new(cfg, seed)?;
    let mut best_x = cfg.initial_mean.clone();
    let mut best_fitness = f64::INFINITY;
    let mut evaluations = 0;
    let mut history = Vec::with_capacity(cfg.max_iterations);
    for _ in 0..cfg.max_iterations {
        let candidates = state.ask()?;
        let mut fitnesses = Vec::with_capacity(candidates.len());
        for c in &candidates {
            fitnesses.push(f(c)?);
            evaluations += 1;
        }
        let (gen_best_idx, gen_best) = fitnesses
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
        if gen_best < best_fitness {
            best_fitness = gen_best;
            best_x = candidates[gen_best_idx].clone();
        }
        state.tell(&candidates, &fitnesses)?;
        history.push(GenerationStats {
            generation: state.generation,
            best: gen_best,
            mean: fitnesses.iter().sum::<f64>() / fitnesses.len() as f64,
            best_so_far: best_fitness,
            sigma: state.sigma,
        });
    }
    Ok(CmaesRun {
        best_x,
        best_fitness,
        final_mean: state.mean.iter().copied().collect(),
        evaluations,
        history,
    })
}
