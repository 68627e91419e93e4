//! Gaussian-process regression with a squared-exponential kernel, exact or
//! with the FITC inducing-point approximation.
//!
//! Both posteriors are kept in the form
//!
//! ```text
//! mean(x) = m + k(x, P) w
//! var(x)  = sf2 - k(x, P) C k(P, x)
//! ```
//!
//! where `P` are the training inputs (exact) or inducing inputs (FITC), so
//! prediction and pseudo-observation updates share one code path.

use nalgebra::{DMatrix, DVector};

use super::linalg::Factor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("need at least two observations, got {0}")]
    TooFewPoints(usize),
    #[error("{inputs} inputs but {targets} targets")]
    LengthMismatch { inputs: usize, targets: usize },
    #[error("inputs have inconsistent dimensions")]
    Ragged,
    #[error("non-finite training data")]
    NonFiniteData,
    #[error("kernel matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("log marginal likelihood is not finite for any start")]
    NonFiniteLikelihood,
}

/// Log-space kernel hyperparameters. One lengthscale is shared across
/// dimensions; otherwise there is one per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub log_signal_var: f64,
    pub log_lengthscales: Vec<f64>,
    pub log_noise_var: f64,
}

impl Hyper {
    pub fn signal_var(&self) -> f64 {
        self.log_signal_var.exp()
    }

    pub fn noise_var(&self) -> f64 {
        self.log_noise_var.exp()
    }

    fn lengthscale(&self, j: usize) -> f64 {
        let i = if self.log_lengthscales.len() == 1 {
            0
        } else {
            j
        };
        self.log_lengthscales[i].exp()
    }

    pub(crate) fn pack(&self) -> Vec<f64> {
        let mut v = vec![self.log_signal_var];
        v.extend(&self.log_lengthscales);
        v.push(self.log_noise_var);
        v
    }

    pub(crate) fn unpack(v: &[f64]) -> Hyper {
        Hyper {
            log_signal_var: v[0],
            log_lengthscales: v[1..v.len() - 1].to_vec(),
            log_noise_var: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    /// Exact up to `exact_threshold` points, FITC above.
    Auto,
    Exact,
    Fitc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    pub method: MethodChoice,
    pub exact_threshold: usize,
    /// Inducing points for FITC; at least N means the training inputs themselves.
    pub inducing: usize,
    /// One lengthscale per input dimension.
    pub ard: bool,
    pub restarts: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Lower bound on the noise variance, relative to the target variance.
    pub noise_floor: f64,
    /// Single optimizer start from these values instead of heuristics.
    pub warm_start: Option<Hyper>,
    pub seed: u64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            method: MethodChoice::Auto,
            exact_threshold: 2000,
            inducing: 500,
            ard: true,
            restarts: 3,
            iterations: 100,
            learning_rate: 0.05,
            noise_floor: 1e-6,
            warm_start: None,
            seed: 0,
        }
    }
}

/// Exact posterior, or FITC with these inducing inputs (rows).
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Exact,
    Fitc(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
enum Posterior {
    Exact {
        kinv: DMatrix<f64>,
        resid: DVector<f64>,
    },
    // Whitened coordinates: features are Luu^-1 k(U, x).
    Fitc {
        luu_inv: DMatrix<f64>,
        a_inv: DMatrix<f64>,
        b: DVector<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpModel {
    pub hyper: Hyper,
    /// Constant prior mean.
    pub mean: f64,
    pub log_marginal_likelihood: f64,
    x: DMatrix<f64>,
    y: Vec<f64>,
    basis: DMatrix<f64>,
    weights: DVector<f64>,
    cov: DMatrix<f64>,
    post: Posterior,
}

pub(crate) fn to_matrix(z: &[Vec<f64>]) -> Result<DMatrix<f64>, GpError> {
    let d = z.first().map_or(0, Vec::len);
    if z.iter().any(|r| r.len() != d) {
        return Err(GpError::Ragged);
    }
    Ok(DMatrix::from_fn(z.len(), d, |i, j| z[i][j]))
}

fn scaled(x: &DMatrix<f64>, h: &Hyper) -> DMatrix<f64> {
    let mut s = x.clone();
    for j in 0..s.ncols() {
        let l = h.lengthscale(j);
        s.column_mut(j).iter_mut().for_each(|v| *v /= l);
    }
    s
}

/// `sf2 * exp(-|a - b|^2 / 2)` on inputs already divided by the lengthscales.
fn kernel_scaled(a: &DMatrix<f64>, b: &DMatrix<f64>, sf2: f64) -> DMatrix<f64> {
    let na: Vec<f64> = a.row_iter().map(|r| r.norm_squared()).collect();
    let nb: Vec<f64> = b.row_iter().map(|r| r.norm_squared()).collect();
    let mut k = a * b.transpose();
    for i in 0..k.nrows() {
        for j in 0..k.ncols() {
            let d2 = (na[i] + nb[j] - 2.0 * k[(i, j)]).max(0.0);
            k[(i, j)] = sf2 * (-0.5 * d2).exp();
        }
    }
    k
}

/// Squared-exponential kernel matrix between the rows of `a` and `b`.
pub fn kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, h: &Hyper) -> DMatrix<f64> {
    kernel_scaled(&scaled(a, h), &scaled(b, h), h.signal_var())
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative diagonal jitter on the inducing kernel matrix.
const INDUCING_JITTER: f64 = 1e-10;

/// Gradient of `sum_ab H_ab (x_aj - y_bj)^2 / l_j^2` with respect to
/// `log l_j`, divided by -1 (i.e. the positive weighted squared distance
/// per dimension). `H` is `|x| x |y|`.
fn weighted_sq_dist(h: &DMatrix<f64>, x: &DMatrix<f64>, y: &DMatrix<f64>, hyp: &Hyper) -> Vec<f64> {
    let rows = h.column_sum();
    let cols = h.row_sum();
    let hy = h * y;
    (0..x.ncols())
        .map(|j| {
            let l2 = hyp.lengthscale(j).powi(2);
            let mut s = 0.0;
            for a in 0..x.nrows() {
                s += x[(a, j)] * x[(a, j)] * rows[a] - 2.0 * x[(a, j)] * hy[(a, j)];
            }
            for b in 0..y.nrows() {
                s += y[(b, j)] * y[(b, j)] * cols[b];
            }
            s / l2
        })
        .collect()
}

fn fold_lengthscale_grad(per_dim: Vec<f64>, h: &Hyper) -> Vec<f64> {
    if h.log_lengthscales.len() == 1 {
        vec![per_dim.iter().sum()]
    } else {
        per_dim
    }
}

/// Log marginal likelihood of centered targets `f` and its gradient with
/// respect to the packed log hyperparameters `[signal, lengthscales.., noise]`.
pub fn log_marginal_likelihood(
    x: &DMatrix<f64>,
    f: &DVector<f64>,
    h: &Hyper,
    method: &Method,
) -> Result<(f64, Vec<f64>), GpError> {
    match method {
        Method::Exact => exact_lml(x, f, h),
        Method::Fitc(u) => fitc_lml(x, u, f, h),
    }
}

fn exact_lml(x: &DMatrix<f64>, f: &DVector<f64>, h: &Hyper) -> Result<(f64, Vec<f64>), GpError> {
    let n = x.nrows();
    let kf = kernel(x, x, h);
    let mut k = kf.clone();
    for i in 0..n {
        k[(i, i)] += h.noise_var();
    }
    let chol = Factor::new(&k)?;
    let kinv = chol.inverse();
    let alpha = &kinv * f;
    let lml = -0.5 * f.dot(&alpha) - 0.5 * chol.log_det() - 0.5 * n as f64 * LN_2PI;
    let w = &alpha * alpha.transpose() - kinv;
    let hm = w.component_mul(&kf);
    let g_signal = 0.5 * hm.sum();
    // d/dlog l_j of k_ab = k_ab (x_aj - x_bj)^2 / l_j^2
    let per_dim: Vec<f64> = weighted_sq_dist(&hm, x, x, h)
        .iter()
        .map(|v| 0.5 * v)
        .collect();
    let g_noise = 0.5 * h.noise_var() * w.trace();
    let mut grad = vec![g_signal];
    grad.extend(fold_lengthscale_grad(per_dim, h));
    grad.push(g_noise);
    Ok((lml, grad))
}

struct FitcParts {
    luu: Factor,
    kuf: DMatrix<f64>,
    v: DMatrix<f64>,
    lambda: DVector<f64>,
    la: Factor,
}

fn fitc_parts(
    x: &DMatrix<f64>,
    u: &DMatrix<f64>,
    h: &Hyper,
) -> Result<(FitcParts, DMatrix<f64>), GpError> {
    let sf2 = h.signal_var();
    let mut kuu = kernel(u, u, h);
    for i in 0..u.nrows() {
        kuu[(i, i)] += INDUCING_JITTER * sf2;
    }
    let kuf = kernel(u, x, h);
    let luu = Factor::new(&kuu)?;
    let v = luu.half_solve(&kuf);
    let qdiag = v.row_iter().fold(DVector::zeros(x.nrows()), |acc, r| {
        acc + r.transpose().map(|e| e * e)
    });
    let lambda = qdiag.map(|q| (sf2 - q).max(0.0) + h.noise_var());
    let mut vl = v.clone();
    for (i, mut c) in vl.column_iter_mut().enumerate() {
        c /= lambda[i].sqrt();
    }
    let mut a = &vl * vl.transpose();
    for i in 0..a.nrows() {
        a[(i, i)] += 1.0;
    }
    let la = Factor::new(&a)?;
    Ok((
        FitcParts {
            luu,
            kuf,
            v,
            lambda,
            la,
        },
        kuu,
    ))
}

fn fitc_lml(
    x: &DMatrix<f64>,
    u: &DMatrix<f64>,
    f: &DVector<f64>,
    h: &Hyper,
) -> Result<(f64, Vec<f64>), GpError> {
    let n = x.nrows();
    let sf2 = h.signal_var();
    let (p, kuu) = fitc_parts(x, u, h)?;
    let lam_inv = p.lambda.map(|l| 1.0 / l);
    // alpha = (Q + Lambda)^-1 f via Woodbury on A' = I + V Lambda^-1 V^T.
    let lf = f.component_mul(&lam_inv);
    let t = p.la.solve_vec(&(&p.v * &lf));
    let alpha = &lf - (p.v.transpose() * t).component_mul(&lam_inv);
    let logdet = p.la.log_det() + p.lambda.iter().map(|l| l.ln()).sum::<f64>();
    let lml = -0.5 * f.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * LN_2PI;

    // diag of Sigma^-1
    let z = p.la.half_solve(&p.v);
    let zz = z.row_iter().fold(DVector::zeros(n), |acc, r| {
        acc + r.transpose().map(|e| e * e)
    });
    let sinv_diag = DVector::from_fn(n, |i, _| lam_inv[i] - lam_inv[i] * lam_inv[i] * zz[i]);
    let w = DVector::from_fn(n, |i, _| alpha[i] * alpha[i] - sinv_diag[i]);

    // B = Kuu^-1 Kuf
    let b = p.luu.solve(&p.kuf);
    let mut b_lam = b.clone();
    for (i, mut c) in b_lam.column_iter_mut().enumerate() {
        c *= lam_inv[i];
    }
    // B Sigma^-1 = B Lambda^-1 - (B Lambda^-1 V^T) A'^-1 (V Lambda^-1)
    let mut v_lam = p.v.clone();
    for (i, mut c) in v_lam.column_iter_mut().enumerate() {
        c *= lam_inv[i];
    }
    let b_sinv = &b_lam - (&b_lam * p.v.transpose()) * p.la.solve(&v_lam);
    let b_alpha = &b * &alpha;
    let mut g = &b_alpha * alpha.transpose() - b_sinv;
    for (i, mut c) in g.column_iter_mut().enumerate() {
        c.axpy(-w[i], &b.column(i), 1.0);
    }
    let pm = &g * b.transpose();

    let hu = g.component_mul(&p.kuf);
    let huu = pm.component_mul(&kuu);
    let g_signal = hu.sum() - 0.5 * huu.sum() + 0.5 * sf2 * w.sum();
    let d_uf = weighted_sq_dist(&hu, u, x, h);
    let d_uu = weighted_sq_dist(&huu, u, u, h);
    let per_dim: Vec<f64> = d_uf.iter().zip(&d_uu).map(|(a, c)| a - 0.5 * c).collect();
    let g_noise = 0.5 * h.noise_var() * w.sum();
    let mut grad = vec![g_signal];
    grad.extend(fold_lengthscale_grad(per_dim, h));
    grad.push(g_noise);
    Ok((lml, grad))
}

/// Lloyd's k-means with k-means++ seeding; returns the centers as rows.
pub fn kmeans<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    k: usize,
    iterations: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    let n = x.nrows();
    if k >= n {
        return x.clone();
    }
    let dist2 = |a: usize, c: &DMatrix<f64>, j: usize| (x.row(a) - c.row(j)).norm_squared();
    let mut centers = DMatrix::zeros(k, x.ncols());
    centers.set_row(0, &x.row(rng.random_range(0..n)));
    let mut best = vec![f64::INFINITY; n];
    for c in 1..k {
        for (a, b) in best.iter_mut().enumerate() {
            *b = b.min(dist2(a, &centers, c - 1));
        }
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (a, &b) in best.iter().enumerate() {
                if u < b {
                    chosen = a;
                    break;
                }
                u -= b;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.set_row(c, &x.row(pick));
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..iterations {
        let mut changed = false;
        for (a, slot) in assign.iter_mut().enumerate() {
            let j = (0..k)
                .min_by(|&p, &q| dist2(a, &centers, p).total_cmp(&dist2(a, &centers, q)))
                .unwrap();
            changed |= *slot != j;
            *slot = j;
        }
        if !changed {
            break;
        }
        let mut sums = DMatrix::zeros(k, x.ncols());
        let mut counts = vec![0usize; k];
        for (a, &j) in assign.iter().enumerate() {
            let mut r = sums.row_mut(j);
            r += x.row(a);
            counts[j] += 1;
        }
        for (j, &c) in counts.iter().enumerate() {
            if c > 0 {
                centers.set_row(j, &(sums.row(j) / c as f64));
            }
        }
    }
    centers
}

fn median_distance(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows().min(200);
    let mut d = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            d.push((x.row(a) - x.row(b)).norm());
        }
    }
    d.sort_by(f64::total_cmp);
    match d.get(d.len() / 2) {
        Some(&m) if m > 0.0 => m,
        _ => 1.0,
    }
}

impl GpModel {
    /// Posterior with fixed hyperparameters; the prior mean is `mean(y)`.
    pub fn with_hyper(
        z: &[Vec<f64>],
        y: &[f64],
        hyper: Hyper,
        method: Method,
    ) -> Result<Self, GpError> {
        let x = check_data(z, y)?;
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        Self::build(x, y.to_vec(), mean, hyper, &method)
    }

    fn build(
        x: DMatrix<f64>,
        y: Vec<f64>,
        mean: f64,
        hyper: Hyper,
        method: &Method,
    ) -> Result<Self, GpError> {
        let f = DVector::from_iterator(y.len(), y.iter().map(|v| v - mean));
        let (lml, _) = log_marginal_likelihood(&x, &f, &hyper, method)?;
        let (basis, weights, cov, post) = match method {
            Method::Exact => {
                let mut k = kernel(&x, &x, &hyper);
                for i in 0..x.nrows() {
                    k[(i, i)] += hyper.noise_var();
                }
                let kinv = Factor::new(&k)?.inverse();
                let alpha = &kinv * &f;
                (
                    x.clone(),
                    alpha,
                    kinv.clone(),
                    Posterior::Exact { kinv, resid: f },
                )
            }
            Method::Fitc(u) => {
                let (p, _) = fitc_parts(&x, u, &hyper)?;
                let lam_inv = p.lambda.map(|l| 1.0 / l);
                let a_inv = p.la.inverse();
                let b = &p.v * f.component_mul(&lam_inv);
                let w = &a_inv * &b;
                let cov = DMatrix::identity(a_inv.nrows(), a_inv.nrows()) - &a_inv;
                let luu_inv = p.luu.linv;
                (u.clone(), w, cov, Posterior::Fitc { luu_inv, a_inv, b })
            }
        };
        Ok(GpModel {
            hyper,
            mean,
            log_marginal_likelihood: lml,
            x,
            y,
            basis,
            weights,
            cov,
            post,
        })
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.post, Posterior::Fitc { .. })
    }

    pub fn num_points(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    /// Latent-function mean and variance at each row of `xs`.
    pub fn predict_latent_batch(&self, xs: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
        let mut k = kernel(xs, &self.basis, &self.hyper);
        if let Posterior::Fitc { luu_inv, .. } = &self.post {
            k *= luu_inv.transpose();
        }
        let means = (&k * &self.weights).map(|v| v + self.mean);
        let kc = &k * &self.cov;
        let sf2 = self.hyper.signal_var();
        let vars = (0..xs.nrows())
            .map(|i| (sf2 - kc.row(i).dot(&k.row(i))).max(0.0))
            .collect();
        (means.iter().copied().collect(), vars)
    }

    pub fn predict_latent(&self, x: &[f64]) -> (f64, f64) {
        let (m, v) = self.predict_latent_batch(&DMatrix::from_row_slice(1, x.len(), x));
        (m[0], v[0])
    }

    /// Predictive mean and variance of a new noisy observation.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let (m, v) = self.predict_latent(x);
        (m, v + self.hyper.noise_var())
    }

    /// Conditions on `(x, y)` with the current hyperparameters and prior mean.
    pub fn add_observation(&mut self, x: &[f64], y: f64) {
        let xr = DMatrix::from_row_slice(1, x.len(), x);
        let h = &self.hyper;
        let resid = y - self.mean;
        match &mut self.post {
            Posterior::Exact { kinv, resid: r } => {
                let k = kernel(&self.x, &xr, h).column(0).into_owned();
                let kb = &*kinv * &k;
                let s = (h.signal_var() + h.noise_var() - k.dot(&kb)).max(1e-300);
                let n = kinv.nrows();
                let mut next = DMatrix::zeros(n + 1, n + 1);
                next.view_mut((0, 0), (n, n))
                    .copy_from(&(&*kinv + &kb * kb.transpose() / s));
                for i in 0..n {
                    next[(i, n)] = -kb[i] / s;
                    next[(n, i)] = -kb[i] / s;
                }
                next[(n, n)] = 1.0 / s;
                *kinv = next;
                *r = r.clone().insert_row(n, resid);
                self.weights = &*kinv * &*r;
                self.cov = kinv.clone();
                self.basis = self.basis.clone().insert_row(n, 0.0);
                self.basis.set_row(n, &xr.row(0));
            }
            Posterior::Fitc { luu_inv, a_inv, b } => {
                let k = kernel(&self.basis, &xr, h).column(0).into_owned();
                let k = &*luu_inv * k;
                let q = k.norm_squared();
                let lam = (h.signal_var() - q).max(0.0) + h.noise_var();
                let ak = &*a_inv * &k;
                let denom = lam + k.dot(&ak);
                *a_inv -= &ak * ak.transpose() / denom;
                *b += &k * (resid / lam);
                self.weights = &*a_inv * &*b;
                self.cov = DMatrix::identity(a_inv.nrows(), a_inv.nrows()) - &*a_inv;
            }
        }
        let n = self.x.nrows();
        self.x = self.x.clone().insert_row(n, 0.0);
        self.x.set_row(n, &xr.row(0));
        self.y.push(y);
    }
}

fn check_data(z: &[Vec<f64>], y: &[f64]) -> Result<DMatrix<f64>, GpError> {
    if z.len() != y.len() {
        return Err(GpError::LengthMismatch {
            inputs: z.len(),
            targets: y.len(),
        });
    }
    if z.len() < 2 {
        return Err(GpError::TooFewPoints(z.len()));
    }
    if y.iter().any(|v| !v.is_finite()) || z.iter().flatten().any(|v| !v.is_finite()) {
        return Err(GpError::NonFiniteData);
    }
    to_matrix(z)
}

/// Fits hyperparameters by multi-start gradient ascent (Adam in log space)
/// on the log marginal likelihood.
pub fn fit_gp(z: &[Vec<f64>], y: &[f64], cfg: &GpConfig) -> Result<GpModel, GpError> {
    let x = check_data(z, y)?;
    let n = x.nrows();
    let mean = y.iter().sum::<f64>() / n as f64;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let scale = if var > 0.0 { var } else { 1.0 };
    let log_noise_min = (cfg.noise_floor * scale).ln();
    let sparse = match cfg.method {
        MethodChoice::Exact => false,
        MethodChoice::Fitc => true,
        MethodChoice::Auto => n > cfg.exact_threshold,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let method = if sparse {
        Method::Fitc(kmeans(&x, cfg.inducing, 25, &mut rng))
    } else {
        Method::Exact
    };
    let f = DVector::from_iterator(n, y.iter().map(|v| v - mean));
    let nl = if cfg.ard { x.ncols().max(1) } else { 1 };

    let starts: Vec<Hyper> = match &cfg.warm_start {
        Some(h) if h.log_lengthscales.len() == nl => vec![h.clone()],
        _ => {
            let l0 = median_distance(&x).ln();
            let mut v = Vec::new();
            for r in 0..cfg.restarts.max(1) {
                let (dl, dn) = match r {
                    0 => (0.0, (0.1f64).ln()),
                    1 => ((0.5f64).ln(), (0.01f64).ln()),
                    2 => ((2.0f64).ln(), (0.3f64).ln()),
                    _ => (rng.random_range(-1.0..1.0), rng.random_range(-5.0..-1.0)),
                };
                v.push(Hyper {
                    log_signal_var: scale.ln(),
                    log_lengthscales: vec![l0 + dl; nl],
                    log_noise_var: (scale.ln() + dn).max(log_noise_min),
                });
            }
            v
        }
    };

    let mut best: Option<(f64, Hyper)> = None;
    for start in starts {
        let Some((lml, h)) = ascend(&x, &f, start, &method, cfg, log_noise_min) else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| lml > *b) {
            best = Some((lml, h));
        }
    }
    let (_, hyper) = best.ok_or(GpError::NonFiniteLikelihood)?;
    GpModel::build(x, y.to_vec(), mean, hyper, &method)
}

fn ascend(
    x: &DMatrix<f64>,
    f: &DVector<f64>,
    start: Hyper,
    method: &Method,
    cfg: &GpConfig,
    log_noise_min: f64,
) -> Option<(f64, Hyper)> {
    let mut p = start.pack();
    let last = p.len() - 1;
    let clamp = |p: &mut Vec<f64>| {
        for v in p.iter_mut() {
            *v = v.clamp(-20.0, 20.0);
        }
        p[last] = p[last].max(log_noise_min);
    };
    clamp(&mut p);
    let (mut m, mut s) = (vec![0.0; p.len()], vec![0.0; p.len()]);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let (b1, b2) = (0.9f64, 0.999f64);
    for t in 1..=cfg.iterations + 1 {
        let Ok((lml, grad)) = log_marginal_likelihood(x, f, &Hyper::unpack(&p), method) else {
            break;
        };
        if !lml.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            break;
        }
        if best.as_ref().is_none_or(|(b, _)| lml > *b) {
            best = Some((lml, p.clone()));
        }
        if t > cfg.iterations {
            break;
        }
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            s[i] = b2 * s[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = m[i] / (1.0 - b1.powi(t as i32));
            let sh = s[i] / (1.0 - b2.powi(t as i32));
            p[i] += cfg.learning_rate * mh / (sh.sqrt() + 1e-8);
        }
        clamp(&mut p);
    }
    best.map(|(l, p)| (l, Hyper::unpack(&p)))
}

/// Mean Gaussian predictive log density and root-mean-square error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub log_likelihood: f64,
    pub rmse: f64,
}

pub fn test_metrics(m: &GpModel, z: &[Vec<f64>], y: &[f64]) -> Result<TestMetrics, GpError> {
    if z.len() != y.len() {
        return Err(GpError::LengthMismatch {
            inputs: z.len(),
            targets: y.len(),
        });
    }
    let xs = to_matrix(z)?;
    let (means, vars) = m.predict_latent_batch(&xs);
    let noise = m.hyper.noise_var();
    let n = y.len().max(1) as f64;
    let mut ll = 0.0;
    let mut se = 0.0;
    for ((mu, v), t) in means.iter().zip(&vars).zip(y) {
        let var = v + noise;
        ll += -0.5 * (LN_2PI + var.ln()) - 0.5 * (t - mu).powi(2) / var;
        se += (t - mu).powi(2);
    }
    Ok(TestMetrics {
        log_likelihood: ll / n,
        rmse: (se / n).sqrt(),
    })
}

/// Shuffles and splits off `fraction` of the points as a test set.
pub fn train_test_split<R: Rng + ?Sized>(
    n: usize,
    fraction: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_test = ((n as f64) * fraction).round() as usize;
    let test = idx[..n_test].to_vec();
    let train = idx[n_test..].to_vec();
    (train, test)
}
