//! Synthetic stationary and changing streams.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Exp1, StandardNormal};

use crate::data::Dataset;
use crate::error::{KqtError, Result};
use crate::gmm::GaussianMixture;
use crate::linalg;
use crate::rng::Rng;

/// Tolerance on the achieved divergence of a generated change.
pub const SKL_TOL: f64 = 1e-4;
const MAX_BISECTIONS: usize = 200;

/// Multivariate normal with a cached Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl GaussianSpec {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
            return Err(KqtError::DimensionMismatch {
                expected: mean.len(),
                got: covariance.nrows(),
            });
        }
        if !linalg::is_symmetric(&covariance, 1e-9) {
            return Err(KqtError::NotPositiveDefinite(
                "covariance is not symmetric".into(),
            ));
        }
        let chol = linalg::cholesky_lower(&covariance)?;
        Ok(GaussianSpec {
            mean,
            covariance,
            chol,
        })
    }

    /// Zero-mean Gaussian with `random_covariance(d)`.
    pub fn random(d: usize, rng: &mut Rng) -> Result<Self> {
        GaussianSpec::new(DVector::zeros(d), random_covariance(d, rng))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn sample_into(&self, rng: &mut Rng, out: &mut [f64]) {
        let d = self.dim();
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for (i, o) in out.iter_mut().enumerate().take(d) {
            let mut acc = self.mean[i];
            for (j, zj) in z.iter().enumerate().take(i + 1) {
                acc += self.chol[(i, j)] * zj;
            }
            *o = acc;
        }
    }
}

/// `A A^T / d + 0.1 I` with standard normal `A`.
pub fn random_covariance(d: usize, rng: &mut Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut c = &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.1;
    c = (&c + c.transpose()) * 0.5;
    c
}

/// Uniformly distributed rotation (orthogonal, determinant +1).
pub fn random_orthogonal(d: usize, rng: &mut Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    q
}

/// Symmetric Kullback-Leibler divergence between two Gaussians.
pub fn skl_gaussian(a: &GaussianSpec, b: &GaussianSpec) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(KqtError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let d = a.dim() as f64;
    let ia = spd_inverse(&a.covariance)?;
    let ib = spd_inverse(&b.covariance)?;
    let dm = &a.mean - &b.mean;
    let tr = (&ib * &a.covariance).trace() + (&ia * &b.covariance).trace();
    let quad = dm.dot(&((&ia + &ib) * &dm));
    Ok((0.5 * (tr + quad - 2.0 * d)).max(0.0))
}

fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| KqtError::NotPositiveDefinite("covariance is not SPD".into()))
}

/// Roto-translation `x -> Q (x - c) + c + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeSpec {
    pub rotation: DMatrix<f64>,
    pub translation: DVector<f64>,
    pub center: DVector<f64>,
    pub target_skl: f64,
    /// Divergence of the changed Gaussian (or surrogate) from the original.
    pub achieved_skl: f64,
}

impl ChangeSpec {
    pub fn identity(d: usize) -> Self {
        ChangeSpec {
            rotation: DMatrix::identity(d, d),
            translation: DVector::zeros(d),
            center: DVector::zeros(d),
            target_skl: 0.0,
            achieved_skl: 0.0,
        }
    }

    pub fn apply_in_place(&self, x: &mut [f64]) {
        let d = x.len();
        let shifted: Vec<f64> = (0..d).map(|i| x[i] - self.center[i]).collect();
        for (i, xi) in x.iter_mut().enumerate() {
            let mut acc = self.center[i] + self.translation[i];
            for (j, s) in shifted.iter().enumerate() {
                acc += self.rotation[(i, j)] * s;
            }
            *xi = acc;
        }
    }

    /// Image of a Gaussian under the change.
    pub fn apply_gaussian(&self, g: &GaussianSpec) -> Result<GaussianSpec> {
        let q = &self.rotation;
        let mean = q * (g.mean() - &self.center) + &self.center + &self.translation;
        let cov = q * g.covariance() * q.transpose();
        GaussianSpec::new(mean, (&cov + cov.transpose()) * 0.5)
    }

    /// Image of a mixture: every component moves with the same `(Q, v)`.
    pub fn apply_mixture(&self, m: &GaussianMixture) -> Result<GaussianMixture> {
        let q = &self.rotation;
        let means = m
            .means()
            .iter()
            .map(|mu| q * (mu - &self.center) + &self.center + &self.translation)
            .collect();
        let covs = m
            .covariances()
            .iter()
            .map(|c| {
                let r = q * c * q.transpose();
                (&r + r.transpose()) * 0.5
            })
            .collect();
        GaussianMixture::new(m.weights().to_vec(), means, covs)
    }
}

fn cayley_blend(s_mat: &DMatrix<f64>, s: f64) -> Result<DMatrix<f64>> {
    let d = s_mat.nrows();
    let id = DMatrix::<f64>::identity(d, d);
    let inv = (&id + s_mat * s)
        .try_inverse()
        .ok_or_else(|| KqtError::NoConvergence("Cayley transform is singular".into()))?;
    Ok((&id - s_mat * s) * inv)
}

/// Draws a random roto-translation whose image of `g` lies at sKL `target`.
///
/// The rotation is a random rotation pulled toward the identity along its
/// Cayley parameter until its own divergence is at most `target`; a
/// translation along a random direction then closes the gap by bisection.
pub fn make_change(g: &GaussianSpec, target: f64, rng: &mut Rng) -> Result<ChangeSpec> {
    if !(target.is_finite() && target >= 0.0) {
        return Err(KqtError::InvalidParameter(format!(
            "target divergence must be finite and >= 0, got {target}"
        )));
    }
    let d = g.dim();
    let mut change = ChangeSpec::identity(d);
    change.center = g.mean().clone();
    change.target_skl = target;
    if target == 0.0 {
        return Ok(change);
    }

    let q_star = random_orthogonal(d, rng);
    let id = DMatrix::<f64>::identity(d, d);
    let skew = (&id - &q_star)
        * (&id + &q_star)
            .try_inverse()
            .ok_or_else(|| KqtError::NoConvergence("rotation has eigenvalue -1".into()))?;
    let mut s = 1.0;
    loop {
        change.rotation = cayley_blend(&skew, s)?;
        let rot_only = skl_gaussian(g, &change.apply_gaussian(g)?)?;
        if rot_only <= target {
            break;
        }
        s *= 0.5;
        if s < 1e-300 {
            return Err(KqtError::NoConvergence("rotation blend underflow".into()));
        }
    }

    let dir = loop {
        let u = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = u.norm();
        if n > 1e-12 {
            break u / n;
        }
    };
    let skl_at = |r: f64, change: &mut ChangeSpec| -> Result<f64> {
        change.translation = &dir * r;
        skl_gaussian(g, &change.apply_gaussian(g)?)
    };

    let mut achieved = skl_at(0.0, &mut change)?;
    if (achieved - target).abs() <= SKL_TOL {
        change.achieved_skl = achieved;
        return Ok(change);
    }
    let mut hi = g.covariance().trace().sqrt().max(1e-3);
    let mut iters = 0;
    while skl_at(hi, &mut change)? < target {
        hi *= 2.0;
        iters += 1;
        if iters > MAX_BISECTIONS {
            return Err(KqtError::NoConvergence("translation bracket".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        achieved = skl_at(mid, &mut change)?;
        if (achieved - target).abs() <= SKL_TOL {
            change.achieved_skl = achieved;
            return Ok(change);
        }
        if achieved < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(KqtError::NoConvergence(format!(
        "translation bisection stopped at sKL {achieved} for target {target}"
    )))
}

/// Moment-matched Gaussian of a mixture.
pub fn surrogate(m: &GaussianMixture) -> Result<GaussianSpec> {
    let (mu, cov) = m.moments();
    GaussianSpec::new(mu, (&cov + cov.transpose()) * 0.5)
}

/// Equal-weight mixture of `modes` Gaussians with means spread by `spread`.
pub fn random_mixture(
    d: usize,
    modes: usize,
    spread: f64,
    rng: &mut Rng,
) -> Result<GaussianMixture> {
    if modes == 0 {
        return Err(KqtError::InvalidParameter(
            "a mixture needs a component".into(),
        ));
    }
    let means = (0..modes)
        .map(|_| DVector::from_fn(d, |_, _| spread * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let covs = (0..modes).map(|_| random_covariance(d, rng)).collect();
    GaussianMixture::new(vec![1.0 / modes as f64; modes], means, covs)
}

/// Per-sample generator for a [`Source`].
#[derive(Debug, Clone)]
pub struct Sampler {
    dim: usize,
    kind: SamplerKind,
}

#[derive(Debug, Clone)]
enum SamplerKind {
    Gaussians {
        comps: Vec<GaussianSpec>,
        cdf: Vec<f64>,
    },
    Uniform,
    Exponential,
}

impl Sampler {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Writes one draw into `out` and returns its mixture component (0
    /// for non-mixture sources).
    pub fn draw(&self, rng: &mut Rng, out: &mut [f64]) -> usize {
        match &self.kind {
            SamplerKind::Gaussians { comps, cdf } => {
                let k = if comps.len() == 1 {
                    0
                } else {
                    crate::calibration::draw_bin(cdf, rng)
                };
                comps[k].sample_into(rng, out);
                k
            }
            SamplerKind::Uniform => {
                out.iter_mut().for_each(|v| *v = rng.random());
                0
            }
            SamplerKind::Exponential => {
                out.iter_mut().for_each(|v| *v = rng.sample(Exp1));
                0
            }
        }
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Dataset {
        let mut values = vec![0.0; n * self.dim];
        for row in values.chunks_exact_mut(self.dim) {
            self.draw(rng, row);
        }
        Dataset::new(self.dim, values).expect("finite samples")
    }
}

/// Draws `n` points from a mixture, with the component of each draw.
pub fn sample_mixture_labeled(
    m: &GaussianMixture,
    n: usize,
    rng: &mut Rng,
) -> (Dataset, Vec<usize>) {
    let sampler = Source::Mixture(m.clone()).sampler();
    let d = m.dim();
    let mut values = vec![0.0; n * d];
    let mut labels = Vec::with_capacity(n);
    for row in values.chunks_exact_mut(d) {
        labels.push(sampler.draw(rng, row));
    }
    (Dataset::new(d, values).expect("finite samples"), labels)
}

pub fn sample_mixture(m: &GaussianMixture, n: usize, rng: &mut Rng) -> Dataset {
    sample_mixture_labeled(m, n, rng).0
}

/// A stationary data source.
#[derive(Debug, Clone)]
pub enum Source {
    Gaussian(GaussianSpec),
    Mixture(GaussianMixture),
    /// Independent `U(0, 1)` coordinates.
    Uniform {
        dim: usize,
    },
    /// Independent `Exp(1)` coordinates.
    Exponential {
        dim: usize,
    },
}

impl Source {
    pub fn dim(&self) -> usize {
        match self {
            Source::Gaussian(g) => g.dim(),
            Source::Mixture(m) => m.dim(),
            Source::Uniform { dim } | Source::Exponential { dim } => *dim,
        }
    }

    pub fn sampler(&self) -> Sampler {
        let kind = match self {
            Source::Gaussian(g) => SamplerKind::Gaussians {
                comps: vec![g.clone()],
                cdf: vec![1.0],
            },
            Source::Mixture(m) => SamplerKind::Gaussians {
                comps: m
                    .means()
                    .iter()
                    .zip(m.covariances())
                    .map(|(mu, c)| {
                        GaussianSpec::new(mu.clone(), c.clone()).expect("validated mixture")
                    })
                    .collect(),
                cdf: crate::calibration::cumulative(m.weights()),
            },
            Source::Uniform { .. } => SamplerKind::Uniform,
            Source::Exponential { .. } => SamplerKind::Exponential,
        };
        Sampler {
            dim: self.dim(),
            kind,
        }
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Dataset {
        self.sampler().sample(n, rng)
    }

    /// Gaussian with the source's mean and covariance, used to size changes.
    pub fn moment_gaussian(&self) -> Result<GaussianSpec> {
        let d = self.dim();
        match self {
            Source::Gaussian(g) => Ok(g.clone()),
            Source::Mixture(m) => surrogate(m),
            Source::Uniform { .. } => GaussianSpec::new(
                DVector::from_element(d, 0.5),
                DMatrix::identity(d, d) / 12.0,
            ),
            Source::Exponential { .. } => {
                GaussianSpec::new(DVector::from_element(d, 1.0), DMatrix::identity(d, d))
            }
        }
    }
}

/// A stream of `length` samples from `source`. When `change` is given,
/// samples at 1-based positions `t >= tau` are changed.
#[derive(Debug, Clone)]
pub struct StreamSpec {
    pub source: Source,
    pub change: Option<ChangeSpec>,
    pub tau: usize,
    pub length: usize,
}

pub fn sample_stream(spec: &StreamSpec, rng: &mut Rng) -> Result<Dataset> {
    if spec.change.is_some() && !(1..=spec.length).contains(&spec.tau) {
        return Err(KqtError::InvalidParameter(format!(
            "change point {} outside 1..={}",
            spec.tau, spec.length
        )));
    }
    let data = spec.source.sample(spec.length, rng);
    let Some(change) = &spec.change else {
        return Ok(data);
    };
    let d = data.dim();
    let mut values = data.into_values();
    for row in values[(spec.tau - 1) * d..].chunks_exact_mut(d) {
        change.apply_in_place(row);
    }
    Dataset::new(d, values)
}
