//! Gaussian mixture discretization of pairwise spatial features.
//!
//! Features are z-scored per dimension before fitting; the standardization
//! is part of the model so scoring applies the same transform. EM uses a
//! k-means++ style seeding and stops when the log-likelihood gain drops
//! below [`GmmOptions::tolerance`] or after [`GmmOptions::max_iters`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{SpatialFeature, SPATIAL_DIM};
use crate::tensor::{Checkpoint, DType, Tensor};

const D: usize = SPATIAL_DIM;
pub const GMM_SECTION: &str = "gmm";
pub const VARIANCE_FLOOR: f64 = 1e-6;
const COLLAPSE_WEIGHT: f64 = 1e-8;
const MAX_RESTARTS: u64 = 5;

type Mat = [[f64; D]; D];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CovarianceKind {
    Diagonal,
    Full,
}

impl CovarianceKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "diagonal" => Ok(Self::Diagonal),
            "full" => Ok(Self::Full),
            _ => Err(Error::validation(format!("unknown covariance kind {s}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Diagonal => "diagonal",
            Self::Full => "full",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GmmOptions {
    pub components: usize,
    pub covariance: CovarianceKind,
    pub max_iters: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            components: 8,
            covariance: CovarianceKind::Diagonal,
            max_iters: 200,
            tolerance: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    pub kind: CovarianceKind,
    pub weights: Vec<f64>,
    /// Component means in standardized coordinates.
    pub means: Vec<[f64; D]>,
    /// Component covariances in standardized coordinates.
    pub covariances: Vec<Mat>,
    pub center: [f64; D],
    pub scale: [f64; D],
    /// Log-likelihood of the training data before each M-step; the last
    /// entry belongs to the returned parameters.
    pub log_likelihood: Vec<f64>,
    pub seed: u64,
}

fn cholesky(a: &Mat) -> Option<Mat> {
    let mut l = [[0.0; D]; D];
    for i in 0..D {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

/// Per-component precomputation for log-density evaluation.
struct Component {
    log_weight: f64,
    mean: [f64; D],
    chol: Mat,
    log_norm: f64,
}

impl Component {
    fn new(weight: f64, mean: [f64; D], cov: &Mat) -> Result<Self> {
        let chol = cholesky(cov)
            .ok_or_else(|| Error::numerical("mixture covariance is not positive definite"))?;
        let log_det: f64 = (0..D).map(|i| 2.0 * chol[i][i].ln()).sum();
        Ok(Self {
            log_weight: weight.ln(),
            mean,
            chol,
            log_norm: -0.5 * (D as f64 * (2.0 * std::f64::consts::PI).ln() + log_det),
        })
    }

    fn log_joint(&self, x: &[f64; D]) -> f64 {
        // Forward substitution: L z = x - mean.
        let mut z = [0.0; D];
        for i in 0..D {
            let mut s = x[i] - self.mean[i];
            for k in 0..i {
                s -= self.chol[i][k] * z[k];
            }
            z[i] = s / self.chol[i][i];
        }
        let maha: f64 = z.iter().map(|v| v * v).sum();
        self.log_weight + self.log_norm - 0.5 * maha
    }
}

fn standardization(data: &[[f64; D]]) -> ([f64; D], [f64; D]) {
    let n = data.len() as f64;
    let mut center = [0.0; D];
    let mut scale = [0.0; D];
    for d in 0..D {
        center[d] = data.iter().map(|x| x[d]).sum::<f64>() / n;
        let var = data.iter().map(|x| (x[d] - center[d]).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        // A constant dimension carries no information; leave it unscaled.
        scale[d] = if sd > 1e-12 { sd } else { 1.0 };
    }
    (center, scale)
}

fn sq_dist(a: &[f64; D], b: &[f64; D]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn seed_means(data: &[[f64; D]], m: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; D]> {
    let mut means = vec![data[rng.random_range(0..data.len())]];
    while means.len() < m {
        let d2: Vec<f64> = data
            .iter()
            .map(|x| means.iter().map(|c| sq_dist(x, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = data.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if r < *w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.random_range(0..data.len())
        };
        means.push(data[pick]);
    }
    means
}

enum Attempt {
    Done(GmmModel),
    Collapsed,
}

fn em_attempt(data: &[[f64; D]], opts: &GmmOptions, seed: u64, center: [f64; D], scale: [f64; D]) -> Result<Attempt> {
    let m = opts.components;
    let n = data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = seed_means(data, m, &mut rng);
    let mut identity = [[0.0; D]; D];
    for (i, row) in identity.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let mut covs = vec![identity; m];
    let mut weights = vec![1.0 / m as f64; m];
    let mut trace: Vec<f64> = Vec::new();
    let mut resp = vec![0.0; n * m];

    for _ in 0..opts.max_iters {
        let comps = weights
            .iter()
            .zip(&means)
            .zip(&covs)
            .map(|((w, mu), c)| Component::new(*w, *mu, c))
            .collect::<Result<Vec<_>>>()?;
        let mut ll = 0.0;
        for (x, r) in data.iter().zip(resp.chunks_mut(m)) {
            for (rk, c) in r.iter_mut().zip(&comps) {
                *rk = c.log_joint(x);
            }
            let lse = crate::tensor::kernels::log_sum_exp(r);
            ll += lse;
            r.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        if !ll.is_finite() {
            return Err(Error::numerical("mixture log-likelihood is not finite"));
        }
        let converged = trace.last().is_some_and(|prev| ll - prev < opts.tolerance);
        trace.push(ll);
        if converged {
            break;
        }

        // M-step.
        for k in 0..m {
            let nk: f64 = (0..n).map(|i| resp[i * m + k]).sum();
            weights[k] = nk / n as f64;
            if weights[k] < COLLAPSE_WEIGHT {
                return Ok(Attempt::Collapsed);
            }
            let mut mu = [0.0; D];
            for (i, x) in data.iter().enumerate() {
                let r = resp[i * m + k];
                for d in 0..D {
                    mu[d] += r * x[d];
                }
            }
            mu.iter_mut().for_each(|v| *v /= nk);
            let mut cov = [[0.0; D]; D];
            for (i, x) in data.iter().enumerate() {
                let r = resp[i * m + k];
                for a in 0..D {
                    let da = x[a] - mu[a];
                    match opts.covariance {
                        CovarianceKind::Diagonal => cov[a][a] += r * da * da,
                        CovarianceKind::Full => {
                            for b in 0..=a {
                                cov[a][b] += r * da * (x[b] - mu[b]);
                            }
                        }
                    }
                }
            }
            for a in 0..D {
                for b in 0..=a {
                    cov[a][b] /= nk;
                    cov[b][a] = cov[a][b];
                }
            }
            match opts.covariance {
                CovarianceKind::Diagonal => {
                    for (a, row) in cov.iter_mut().enumerate() {
                        row[a] = row[a].max(VARIANCE_FLOOR);
                    }
                }
                CovarianceKind::Full => {
                    for (a, row) in cov.iter_mut().enumerate() {
                        row[a] += VARIANCE_FLOOR;
                    }
                }
            }
            means[k] = mu;
            covs[k] = cov;
        }
    }

    Ok(Attempt::Done(GmmModel {
        kind: opts.covariance,
        weights,
        means,
        covariances: covs,
        center,
        scale,
        log_likelihood: trace,
        seed,
    }))
}

pub fn fit_gmm(features: &[SpatialFeature], opts: &GmmOptions) -> Result<GmmModel> {
    let m = opts.components;
    if m == 0 {
        return Err(Error::validation("mixture needs at least one component"));
    }
    if features.len() < 10 * m {
        return Err(Error::validation(format!(
            "{} samples are too few for {m} components (need {})",
            features.len(),
            10 * m
        )));
    }
    let raw: Vec<[f64; D]> = features.iter().map(|f| f.0).collect();
    if raw.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite spatial feature"));
    }
    let (center, scale) = standardization(&raw);
    let data: Vec<[f64; D]> = raw
        .iter()
        .map(|x| std::array::from_fn(|d| (x[d] - center[d]) / scale[d]))
        .collect();
    for restart in 0..=MAX_RESTARTS {
        let seed = opts.seed.wrapping_add(restart);
        match em_attempt(&data, opts, seed, center, scale)? {
            Attempt::Done(model) => return Ok(model),
            Attempt::Collapsed => {
                log::warn!("mixture component collapsed (seed {seed}); restarting");
            }
        }
    }
    Err(Error::numerical(format!(
        "mixture fit collapsed after {MAX_RESTARTS} restarts"
    )))
}

impl GmmModel {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    fn standardize(&self, f: &SpatialFeature) -> [f64; D] {
        std::array::from_fn(|d| (f.0[d] - self.center[d]) / self.scale[d])
    }

    /// Component means mapped back to raw feature units.
    pub fn raw_means(&self) -> Vec<[f64; D]> {
        self.means
            .iter()
            .map(|mu| std::array::from_fn(|d| mu[d] * self.scale[d] + self.center[d]))
            .collect()
    }

    /// Posterior responsibility of each component for `f`.
    pub fn assign_scores(&self, f: &SpatialFeature) -> Vec<f64> {
        let x = self.standardize(f);
        let mut scores: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.covariances)
            .map(|((w, mu), c)| {
                Component::new(*w, *mu, c)
                    .map(|comp| comp.log_joint(&x))
                    .unwrap_or(f64::NEG_INFINITY)
            })
            .collect();
        if scores.iter().all(|s| !s.is_finite()) {
            // Only reachable for non-finite input features.
            return vec![1.0 / scores.len() as f64; scores.len()];
        }
        crate::tensor::kernels::softmax_in_place(&mut scores);
        scores
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) -> Result<()> {
        let m = self.components();
        let s = GMM_SECTION;
        ckpt.set_meta("gmm.kind", self.kind.as_str())?;
        ckpt.set_meta("gmm.seed", self.seed.to_string())?;
        ckpt.push(s, "weights", &Tensor::vector(self.weights.clone()), DType::F64)?;
        let means = Tensor::new(vec![m, D], self.means.iter().flatten().copied().collect())?;
        ckpt.push(s, "means", &means, DType::F64)?;
        let covs = Tensor::new(
            vec![m, D, D],
            self.covariances.iter().flatten().flatten().copied().collect(),
        )?;
        ckpt.push(s, "covariances", &covs, DType::F64)?;
        ckpt.push(s, "center", &Tensor::vector(self.center.to_vec()), DType::F64)?;
        ckpt.push(s, "scale", &Tensor::vector(self.scale.to_vec()), DType::F64)?;
        ckpt.push(s, "log_likelihood", &Tensor::vector(self.log_likelihood.clone()), DType::F64)?;
        Ok(())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let s = GMM_SECTION;
        let weights = ckpt.require(s, "weights")?.data().to_vec();
        let m = weights.len();
        let means_t = ckpt.require(s, "means")?;
        let covs_t = ckpt.require(s, "covariances")?;
        if means_t.numel() != m * D || covs_t.numel() != m * D * D {
            return Err(Error::validation("mixture checkpoint has inconsistent shapes"));
        }
        let arr6 = |t: &Tensor| -> Result<[f64; D]> {
            t.data()
                .try_into()
                .map_err(|_| Error::validation("mixture standardization must have 6 entries"))
        };
        let means = means_t
            .data()
            .chunks(D)
            .map(|c| std::array::from_fn(|d| c[d]))
            .collect();
        let covariances = covs_t
            .data()
            .chunks(D * D)
            .map(|c| std::array::from_fn(|a| std::array::from_fn(|b| c[a * D + b])))
            .collect();
        Ok(Self {
            kind: CovarianceKind::parse(ckpt.require_meta("gmm.kind")?)?,
            weights,
            means,
            covariances,
            center: arr6(ckpt.require(s, "center")?)?,
            scale: arr6(ckpt.require(s, "scale")?)?,
            log_likelihood: ckpt.require(s, "log_likelihood")?.data().to_vec(),
            seed: ckpt
                .require_meta("gmm.seed")?
                .parse()
                .map_err(|_| Error::validation("bad gmm.seed"))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn gaussian_blob(center: [f64; D], sd: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<SpatialFeature> {
        let noise = Normal::new(0.0, sd).unwrap();
        (0..n)
            .map(|_| SpatialFeature(std::array::from_fn(|d| center[d] + noise.sample(rng))))
            .collect()
    }

    #[test]
    fn single_component_mean_is_sample_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = gaussian_blob([1.0, -2.0, 0.5, 0.1, 3.0, 0.7], 0.4, 50, &mut rng);
        let model = fit_gmm(&data, &GmmOptions { components: 1, ..Default::default() }).unwrap();
        let mu = model.raw_means()[0];
        for d in 0..D {
            let sample_mean = data.iter().map(|f| f.0[d]).sum::<f64>() / data.len() as f64;
            assert!((mu[d] - sample_mean).abs() < 1e-9);
        }
        assert_eq!(model.assign_scores(&data[0]), vec![1.0]);
    }

    #[test]
    fn too_few_samples() {
        let data = vec![SpatialFeature([0.0; D]); 19];
        let err = fit_gmm(&data, &GmmOptions { components: 2, ..Default::default() });
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn extreme_features_still_score_as_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut data = gaussian_blob([0.0; D], 1.0, 60, &mut rng);
        data.extend(gaussian_blob([5.0; D], 1.0, 60, &mut rng));
        let model = fit_gmm(&data, &GmmOptions { components: 3, ..Default::default() }).unwrap();
        for f in [SpatialFeature([1e6; D]), SpatialFeature([-1e9, 0.0, 1e9, 0.0, 0.0, 0.0])] {
            let s = model.assign_scores(&f);
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn full_covariance_fit_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut data = gaussian_blob([0.0; D], 0.3, 80, &mut rng);
        data.extend(gaussian_blob([2.0; D], 0.3, 80, &mut rng));
        let opts = GmmOptions {
            components: 2,
            covariance: CovarianceKind::Full,
            ..Default::default()
        };
        let model = fit_gmm(&data, &opts).unwrap();
        let s = model.assign_scores(&data[0]);
        assert!(s.iter().copied().fold(0.0, f64::max) > 0.99);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = gaussian_blob([0.0; D], 1.0, 40, &mut rng);
        let model = fit_gmm(&data, &GmmOptions { components: 2, ..Default::default() }).unwrap();
        let mut ckpt = Checkpoint::new();
        model.to_checkpoint(&mut ckpt).unwrap();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        assert_eq!(GmmModel::from_checkpoint(&back).unwrap(), model);
    }
}
