//! Gaussian mixtures: density evaluation, sampling support and EM fitting.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{KqtError, Result};
use crate::linalg::{self, Whitener};
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Mixture of `M` multivariate Gaussians with full covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureRepr", into = "MixtureRepr")]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    // derived
    whiteners: Vec<Whitener>,
    log_norms: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MixtureRepr {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<MixtureRepr> for GaussianMixture {
    type Error = KqtError;

    fn try_from(r: MixtureRepr) -> Result<Self> {
        let d = r.means.first().map(Vec::len).unwrap_or(0);
        let means = r
            .means
            .iter()
            .map(|m| DVector::from_column_slice(m))
            .collect();
        let mut covs = Vec::with_capacity(r.covariances.len());
        for c in &r.covariances {
            if c.len() != d || c.iter().any(|row| row.len() != d) {
                return Err(KqtError::InvalidArtifact(
                    "mixture covariance has wrong shape".into(),
                ));
            }
            covs.push(DMatrix::from_fn(d, d, |i, j| c[i][j]));
        }
        GaussianMixture::new(r.weights, means, covs)
    }
}

impl From<GaussianMixture> for MixtureRepr {
    fn from(g: GaussianMixture) -> Self {
        let d = g.dim();
        MixtureRepr {
            weights: g.weights,
            means: g
                .means
                .iter()
                .map(|m| m.iter().copied().collect())
                .collect(),
            covariances: g
                .covariances
                .iter()
                .map(|c| {
                    (0..d)
                        .map(|i| (0..d).map(|j| c[(i, j)]).collect())
                        .collect()
                })
                .collect(),
        }
    }
}

impl GaussianMixture {
    /// Validates and precomputes per-component factors.
    ///
    /// Weights must be non-negative and sum to one within `1e-12`; each
    /// covariance must be symmetric and positive-definite.
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let m = weights.len();
        if m == 0 || means.len() != m || covariances.len() != m {
            return Err(KqtError::InvalidParameter(
                "mixture needs matching, non-empty weights/means/covariances".into(),
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(KqtError::InvalidParameter(
                "mixture weights must be finite and >= 0".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(KqtError::InvalidParameter(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(KqtError::InvalidParameter(
                "zero-dimensional mixture".into(),
            ));
        }
        let mut whiteners = Vec::with_capacity(m);
        let mut log_norms = Vec::with_capacity(m);
        for (k, (mu, cov)) in means.iter().zip(&covariances).enumerate() {
            if mu.len() != d || cov.nrows() != d || cov.ncols() != d {
                return Err(KqtError::DimensionMismatch {
                    expected: d,
                    got: mu.len().max(cov.nrows()),
                });
            }
            if !linalg::is_symmetric(cov, 1e-9) {
                return Err(KqtError::NotPositiveDefinite(format!(
                    "covariance of component {k} is not symmetric"
                )));
            }
            let log_det = linalg::log_det_spd(cov)?;
            whiteners.push(Whitener::from_covariance(cov)?);
            log_norms.push(weights[k].ln() - 0.5 * (d as f64 * LN_2PI + log_det));
        }
        Ok(GaussianMixture {
            weights,
            means,
            covariances,
            whiteners,
            log_norms,
        })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    pub fn whiteners(&self) -> &[Whitener] {
        &self.whiteners
    }

    /// `log(w_m) + log N(x | mu_m, Sigma_m)` for every component.
    pub fn component_log_densities(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut diff = vec![0.0; d];
        let mut u = vec![0.0; d];
        self.means
            .iter()
            .zip(&self.whiteners)
            .zip(&self.log_norms)
            .map(|((mu, w), ln)| {
                for k in 0..d {
                    diff[k] = x[k] - mu[k];
                }
                w.apply(&diff, &mut u);
                ln - 0.5 * u.iter().map(|v| v * v).sum::<f64>()
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.component_log_densities(x))
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let mut lp = self.component_log_densities(x);
        let lse = log_sum_exp(&lp);
        for v in &mut lp {
            *v = (*v - lse).exp();
        }
        lp
    }

    /// Mean and covariance of the moment-matched single Gaussian.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        let mut mean = DVector::zeros(d);
        for (w, mu) in self.weights.iter().zip(&self.means) {
            mean += mu * *w;
        }
        let mut cov = DMatrix::zeros(d, d);
        for ((w, mu), c) in self.weights.iter().zip(&self.means).zip(&self.covariances) {
            let dm = mu - &mean;
            cov += (c + &dm * dm.transpose()) * *w;
        }
        (mean, cov)
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// EM settings.
#[derive(Debug, Clone)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop once `|ΔLL| < tol * |LL|`.
    pub tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iter: 200,
            tol: 1e-7,
        }
    }
}

/// Result of an EM run, with the log-likelihood after every E-step.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub mixture: GaussianMixture,
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Fits an `m`-component mixture by EM with k-means++ seeding.
pub fn fit_gmm(data: &Dataset, m: usize, seed: u64) -> Result<GaussianMixture> {
    fit_gmm_with(data, m, seed, &EmOptions::default()).map(|f| f.mixture)
}

pub fn fit_gmm_with(data: &Dataset, m: usize, seed: u64, opts: &EmOptions) -> Result<EmFit> {
    let n = data.len();
    let d = data.dim();
    if m == 0 {
        return Err(KqtError::InvalidParameter(
            "need at least one component".into(),
        ));
    }
    let needed = m * (d + 1);
    if n < needed {
        return Err(KqtError::TooFewPoints { needed, got: n });
    }
    let mut rng = rng::rng(seed, "gmm-init", 0);

    let mut global = data.covariance(0);
    linalg::regularize(&mut global);

    // k-means++ seeding followed by one hard assignment.
    let centers = kmeans_pp(data, m, &mut rng);
    let mut resp = vec![0.0; n * m];
    for (i, x) in data.rows().enumerate() {
        let best = (0..m)
            .min_by(|&a, &b| {
                sq_dist(x, &centers[a])
                    .partial_cmp(&sq_dist(x, &centers[b]))
                    .unwrap()
            })
            .unwrap();
        resp[i * m + best] = 1.0;
    }
    let mut reseeded = false;
    let mut mixture = m_step(data, &resp, m, &global, &mut reseeded)?;

    let mut ll_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut lp = vec![0.0; m];
    for _ in 0..opts.max_iter {
        iterations += 1;
        let mut ll = 0.0;
        for (i, x) in data.rows().enumerate() {
            lp.copy_from_slice(&mixture.component_log_densities(x));
            let lse = log_sum_exp(&lp);
            ll += lse;
            for k in 0..m {
                resp[i * m + k] = (lp[k] - lse).exp();
            }
        }
        if let Some(&prev) = ll_trace.last() {
            let prev: f64 = prev;
            if (ll - prev).abs() < opts.tol * prev.abs() {
                ll_trace.push(ll);
                converged = true;
                break;
            }
        }
        ll_trace.push(ll);
        mixture = m_step(data, &resp, m, &global, &mut reseeded)?;
    }
    Ok(EmFit {
        mixture,
        log_likelihood: ll_trace,
        iterations,
        converged,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp(data: &Dataset, m: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut centers = vec![data.row(rng.random_range(0..n)).to_vec()];
    let mut best: Vec<f64> = data.rows().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < m {
        let total: f64 = best.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, b) in best.iter().enumerate() {
                if target < *b {
                    chosen = i;
                    break;
                }
                target -= b;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = data.row(idx).to_vec();
        for (b, x) in best.iter_mut().zip(data.rows()) {
            *b = b.min(sq_dist(x, &c));
        }
        centers.push(c);
    }
    centers
}

/// Responsibility mass below which a component counts as empty.
const EMPTY_MASS: f64 = 1e-3;

fn m_step(
    data: &Dataset,
    resp: &[f64],
    m: usize,
    global: &DMatrix<f64>,
    reseeded: &mut bool,
) -> Result<GaussianMixture> {
    let n = data.len();
    let d = data.dim();
    let mass: Vec<f64> = (0..m)
        .map(|k| (0..n).map(|i| resp[i * m + k]).sum())
        .collect();

    let mut means = Vec::with_capacity(m);
    let mut covs = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    let mut empty = Vec::new();
    for k in 0..m {
        if mass[k] < EMPTY_MASS {
            empty.push(k);
            means.push(DVector::zeros(d));
            covs.push(global.clone());
            weights.push(0.0);
            continue;
        }
        let mut mu = DVector::zeros(d);
        for (i, x) in data.rows().enumerate() {
            let r = resp[i * m + k];
            for j in 0..d {
                mu[j] += r * x[j];
            }
        }
        mu /= mass[k];
        let mut cov = DMatrix::zeros(d, d);
        let mut c = vec![0.0; d];
        for (i, x) in data.rows().enumerate() {
            let r = resp[i * m + k];
            if r == 0.0 {
                continue;
            }
            for j in 0..d {
                c[j] = x[j] - mu[j];
            }
            for a in 0..d {
                let ra = r * c[a];
                for b in a..d {
                    cov[(a, b)] += ra * c[b];
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[(a, b)] / mass[k];
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        linalg::regularize(&mut cov);
        means.push(mu);
        covs.push(cov);
        weights.push(mass[k] / n as f64);
    }

    if !empty.is_empty() {
        if *reseeded {
            return Err(KqtError::EmDegenerate(format!(
                "component {} emptied again after re-seeding",
                empty[0]
            )));
        }
        *reseeded = true;
        // Re-seed each empty component at the point farthest from every
        // populated mean.
        let populated: Vec<usize> = (0..m).filter(|k| !empty.contains(k)).collect();
        let mut taken: Vec<usize> = Vec::new();
        for &k in &empty {
            let far = (0..n)
                .filter(|i| !taken.contains(i))
                .max_by(|&a, &b| {
                    let da = nearest(data.row(a), &populated, &means);
                    let db = nearest(data.row(b), &populated, &means);
                    da.partial_cmp(&db).unwrap()
                })
                .ok_or_else(|| KqtError::EmDegenerate("no point left to re-seed".into()))?;
            taken.push(far);
            means[k] = DVector::from_column_slice(data.row(far));
            weights[k] = 1.0 / n as f64;
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
    }
    normalize_weights(&mut weights);
    GaussianMixture::new(weights, means, covs)
}

fn nearest(x: &[f64], populated: &[usize], means: &[DVector<f64>]) -> f64 {
    populated
        .iter()
        .map(|&k| sq_dist(x, means[k].as_slice()))
        .fold(f64::INFINITY, f64::min)
}

/// Renormalises so the weights sum to one to the last ulp we can manage.
pub(crate) fn normalize_weights(w: &mut [f64]) {
    let total: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= total;
    }
    // Push the residual floating-point error onto the largest weight.
    let total: f64 = w.iter().sum();
    if let Some(big) = (0..w.len()).max_by(|&a, &b| w[a].partial_cmp(&w[b]).unwrap()) {
        w[big] += 1.0 - total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn two_clusters(seed: u64) -> Dataset {
        let mut rng = rng::from_seed(seed);
        let mut v = Vec::new();
        for i in 0..1000 {
            let cx = if i < 500 { -10.0 } else { 10.0 };
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            v.push(cx + a);
            v.push(b);
        }
        Dataset::new(2, v).unwrap()
    }

    #[test]
    fn single_component_is_sample_moments() {
        let data = two_clusters(1);
        let g = fit_gmm(&data, 1, 3).unwrap();
        let mean = data.mean();
        let mut cov = data.covariance(0);
        linalg::regularize(&mut cov);
        assert!((&g.means()[0] - &mean).amax() < 1e-10);
        assert!((&g.covariances()[0] - &cov).amax() < 1e-8);
        assert_eq!(g.weights(), &[1.0]);
    }

    #[test]
    fn recovers_two_separated_clusters() {
        let data = two_clusters(2);
        let g = fit_gmm(&data, 2, 11).unwrap();
        let mut xs: Vec<f64> = g.means().iter().map(|m| m[0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((xs[0] + 10.0).abs() < 0.5, "{xs:?}");
        assert!((xs[1] - 10.0).abs() < 0.5, "{xs:?}");
        for m in g.means() {
            assert!(m[1].abs() < 0.5);
        }
    }

    #[test]
    fn log_likelihood_is_monotone() {
        let data = two_clusters(5);
        let fit = fit_gmm_with(&data, 3, 9, &EmOptions::default()).unwrap();
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn responsibilities_sum_to_one() {
        let data = two_clusters(6);
        let g = fit_gmm(&data, 4, 1).unwrap();
        for x in data.rows().take(200) {
            let s: f64 = g.responsibilities(x).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let s: f64 = g.weights().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_points() {
        let data = Dataset::new(2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!(matches!(
            fit_gmm(&data, 2, 0),
            Err(KqtError::TooFewPoints { needed: 6, got: 3 })
        ));
    }

    #[test]
    fn serde_round_trip() {
        let data = two_clusters(7);
        let g = fit_gmm(&data, 2, 4).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        let back: GaussianMixture = serde_json::from_str(&s).unwrap();
        assert_eq!(g, back);
        assert_eq!(s, serde_json::to_string(&back).unwrap());
    }
}
