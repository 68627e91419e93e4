//! Batch Bayesian optimization over latent points.
//!
//! Scores are minimized internally; maximization problems flip the sign at
//! the boundary. Batches are chosen by Kriging Believer: after each
//! expected-improvement maximization the chosen point is added to a copy of
//! the GP as a pseudo-observation at its predictive mean.

mod gp;
mod linalg;

pub use gp::{
    fit_gp, kernel, kmeans, log_marginal_likelihood, test_metrics, train_test_split, GpConfig,
    GpError, GpModel, Hyper, Method, MethodChoice, TestMetrics,
};

use std::io::Write;

use log::warn;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grammar::Grammar;
use crate::latent::DecodeMode;
use crate::sampler::{argmax_sequence, sample_sequence};
use crate::vae::VaeModel;

fn normal_pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn normal_cdf(u: f64) -> f64 {
    0.5 * libm::erfc(-u / std::f64::consts::SQRT_2)
}

/// `E[max(0, best - f)]` for `f ~ N(mean, var)`.
pub fn expected_improvement(mean: f64, var: f64, best: f64) -> f64 {
    let sigma = var.max(0.0).sqrt();
    let gap = best - mean;
    if sigma < 1e-300 {
        return gap.max(0.0);
    }
    let u = gap / sigma;
    (gap * normal_cdf(u) + sigma * normal_pdf(u)).max(0.0)
}

/// Expected improvement of the latent function at `x`.
pub fn expected_improvement_at(m: &GpModel, x: &[f64], best: f64) -> f64 {
    let (mu, var) = m.predict_latent(x);
    expected_improvement(mu, var, best)
}

/// Axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    /// Per-dimension `[min, max]` of `points`, widened by `margin` times the
    /// range on each side.
    pub fn from_points(points: &[Vec<f64>], margin: f64) -> Bounds {
        let d = points.first().map_or(0, Vec::len);
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for p in points {
            for j in 0..d {
                lo[j] = lo[j].min(p[j]);
                hi[j] = hi[j].max(p[j]);
            }
        }
        for j in 0..d {
            let pad = margin * (hi[j] - lo[j]).max(1e-9);
            lo[j] -= pad;
            hi[j] += pad;
        }
        Bounds { lo, hi }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| if h > l { rng.random_range(*l..*h) } else { *l })
            .collect()
    }
}

/// Acquisition search settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    pub candidates: usize,
    /// Best random candidates refined by coordinate search.
    pub refine_starts: usize,
    pub refine_rounds: usize,
    /// Share of candidates drawn around the best observed inputs instead of
    /// uniformly in the box.
    pub local_fraction: f64,
    /// Standard deviation of local candidates, relative to each box side.
    pub local_scale: f64,
    /// Number of best observed inputs used as local centers.
    pub local_centers: usize,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            candidates: 1024,
            refine_starts: 3,
            refine_rounds: 8,
            local_fraction: 0.5,
            local_scale: 0.05,
            local_centers: 10,
        }
    }
}

fn ei_batch(m: &GpModel, pts: &[Vec<f64>], best: f64) -> Vec<f64> {
    let xs = DMatrix::from_fn(pts.len(), m.dim(), |i, j| pts[i][j]);
    let (mu, var) = m.predict_latent_batch(&xs);
    mu.iter()
        .zip(&var)
        .map(|(a, v)| expected_improvement(*a, *v, best))
        .collect()
}

/// Maximizes EI inside `bounds`: random candidates (uniform, plus Gaussian
/// perturbations of the best observed inputs), then coordinate search with
/// shrinking steps from the best few.
pub fn maximize_ei<R: Rng + ?Sized>(
    m: &GpModel,
    best: f64,
    bounds: &Bounds,
    cfg: &AcquisitionConfig,
    rng: &mut R,
) -> (Vec<f64>, f64) {
    let n = cfg.candidates.max(1);
    let n_local = if m.num_points() > 0 {
        (cfg.local_fraction.clamp(0.0, 1.0) * n as f64) as usize
    } else {
        0
    };
    let mut cands: Vec<Vec<f64>> = (0..n - n_local).map(|_| bounds.sample(rng)).collect();
    if n_local > 0 {
        let y = m.targets();
        let mut ranked: Vec<usize> = (0..y.len()).collect();
        ranked.sort_by(|&a, &b| y[a].total_cmp(&y[b]).then(a.cmp(&b)));
        let centers = &ranked[..cfg.local_centers.clamp(1, y.len())];
        let x = m.inputs();
        for i in 0..n_local {
            let c = centers[i % centers.len()];
            let p = (0..bounds.dim())
                .map(|j| {
                    let side = bounds.hi[j] - bounds.lo[j];
                    let e: f64 = rng.sample(StandardNormal);
                    (x[(c, j)] + cfg.local_scale * side * e).clamp(bounds.lo[j], bounds.hi[j])
                })
                .collect();
            cands.push(p);
        }
    }
    let scores = ei_batch(m, &cands, best);
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut best_x = cands[order[0]].clone();
    let mut best_v = scores[order[0]];
    for &start in order.iter().take(cfg.refine_starts) {
        let mut x = cands[start].clone();
        let mut v = scores[start];
        let mut frac = 0.1;
        for _ in 0..cfg.refine_rounds {
            let mut trial = Vec::with_capacity(2 * bounds.dim());
            for j in 0..bounds.dim() {
                let step = frac * (bounds.hi[j] - bounds.lo[j]);
                for s in [-step, step] {
                    let mut y = x.clone();
                    y[j] = (y[j] + s).clamp(bounds.lo[j], bounds.hi[j]);
                    trial.push(y);
                }
            }
            let tv = ei_batch(m, &trial, best);
            let (i, &bv) = tv
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .unwrap();
            if bv > v {
                x = trial[i].clone();
                v = bv;
            } else {
                frac *= 0.5;
            }
        }
        if v > best_v {
            best_x = x;
            best_v = v;
        }
    }
    (best_x, best_v)
}

/// Chooses `batch_size` points by repeated EI maximization, believing each
/// choice at the GP predictive mean before the next.
pub fn select_batch<R: Rng + ?Sized>(
    m: &GpModel,
    batch_size: usize,
    best: f64,
    bounds: &Bounds,
    cfg: &AcquisitionConfig,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let mut believed = m.clone();
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (x, _) = maximize_ei(&believed, best, bounds, cfg, rng);
        let (mu, _) = believed.predict_latent(&x);
        believed.add_observation(&x, mu);
        out.push(x);
    }
    out
}

/// What a proposed latent point turned into.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Whether the proposal decoded to a well-formed candidate.
    pub valid: bool,
    pub text: Option<String>,
    /// Raw score in the problem's own direction; `None` when invalid.
    pub score: Option<f64>,
}

/// Maps a latent point to a candidate and its score.
pub trait Objective: Sync {
    fn evaluate(&self, z: &[f64], rng: &mut ChaCha8Rng) -> Evaluation;
}

/// Decodes with a VAE and scores the decoded string.
pub struct DecoderObjective<'a, S> {
    pub model: &'a VaeModel,
    pub grammar: &'a Grammar,
    pub mode: DecodeMode,
    pub scorer: S,
}

impl<S: Fn(&str) -> Option<f64> + Sync> Objective for DecoderObjective<'_, S> {
    fn evaluate(&self, z: &[f64], rng: &mut ChaCha8Rng) -> Evaluation {
        let decoded = self.model.decode_logits(z).map(|f| match self.mode {
            DecodeMode::Argmax => argmax_sequence(&f, self.grammar),
            DecodeMode::Sample => sample_sequence(&f, self.grammar, rng),
        });
        let text = match decoded {
            Ok(Ok(d)) => d.text(self.grammar),
            Ok(Err(e)) => {
                warn!("decode failed: {e}");
                None
            }
            Err(e) => {
                warn!("decode failed: {e}");
                None
            }
        };
        let score = text.as_deref().and_then(|t| (self.scorer)(t));
        Evaluation {
            valid: text.is_some(),
            text,
            score,
        }
    }
}

/// Any closure over latent points.
pub struct FnObjective<F>(pub F);

impl<F: Fn(&[f64]) -> Option<f64> + Sync> Objective for FnObjective<F> {
    fn evaluate(&self, z: &[f64], _: &mut ChaCha8Rng) -> Evaluation {
        let score = (self.0)(z);
        Evaluation {
            valid: score.is_some(),
            text: None,
            score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoRecord {
    /// 0 for initial data.
    pub iteration: usize,
    pub z: Vec<f64>,
    pub text: Option<String>,
    pub valid: bool,
    pub raw_score: Option<f64>,
    /// Score used for fitting, in the problem's own direction.
    pub score: f64,
    pub imputed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub proposed: usize,
    pub fraction_valid: f64,
    /// Mean raw score of the valid proposals.
    pub mean_score: Option<f64>,
    pub best: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoState {
    pub maximize: bool,
    pub records: Vec<BoRecord>,
    pub summaries: Vec<IterationSummary>,
}

impl BoState {
    /// Initial observations; every one must carry a valid score.
    pub fn new(maximize: bool, init: Vec<(Vec<f64>, Option<String>, f64)>) -> Self {
        let records = init
            .into_iter()
            .map(|(z, text, s)| BoRecord {
                iteration: 0,
                z,
                text,
                valid: true,
                raw_score: Some(s),
                score: s,
                imputed: false,
            })
            .collect();
        BoState {
            maximize,
            records,
            summaries: Vec::new(),
        }
    }

    fn better(&self, a: f64, b: f64) -> bool {
        if self.maximize {
            a > b
        } else {
            a < b
        }
    }

    fn observed(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().filter_map(|r| r.raw_score)
    }

    /// Best truly observed score.
    pub fn best(&self) -> Option<f64> {
        self.observed()
            .reduce(|a, b| if self.better(b, a) { b } else { a })
    }

    /// Worst truly observed score, used to impute invalid proposals.
    pub fn worst(&self) -> Option<f64> {
        self.observed()
            .reduce(|a, b| if self.better(a, b) { b } else { a })
    }

    /// Best initial-data score.
    pub fn initial_best(&self) -> Option<f64> {
        self.records
            .iter()
            .filter(|r| r.iteration == 0)
            .filter_map(|r| r.raw_score)
            .reduce(|a, b| if self.better(b, a) { b } else { a })
    }

    pub fn iterations(&self) -> usize {
        self.summaries.len()
    }

    /// Up to `k` distinct valid proposals (iteration > 0), best first.
    pub fn top(&self, k: usize) -> Vec<&BoRecord> {
        let mut v: Vec<&BoRecord> = self
            .records
            .iter()
            .filter(|r| r.iteration > 0 && r.raw_score.is_some())
            .collect();
        v.sort_by(|a, b| {
            let (x, y) = (a.raw_score.unwrap(), b.raw_score.unwrap());
            if self.maximize {
                y.total_cmp(&x)
            } else {
                x.total_cmp(&y)
            }
        });
        let mut seen = std::collections::HashSet::new();
        v.retain(|r| seen.insert(r.text.clone().unwrap_or_else(|| format!("{:?}", r.z))));
        v.truncate(k);
        v
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "iteration,z,text,valid,raw_score,imputed,score")?;
        for r in &self.records {
            let z: Vec<String> = r.z.iter().map(|v| v.to_string()).collect();
            let text = r.text.as_deref().unwrap_or("");
            writeln!(
                w,
                "{},{},\"{}\",{},{},{},{}",
                r.iteration,
                z.join(";"),
                text.replace('"', "\"\""),
                r.valid,
                r.raw_score.map(|v| v.to_string()).unwrap_or_default(),
                r.imputed,
                r.score
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub gp: GpConfig,
    pub acquisition: AcquisitionConfig,
    /// Bounds margin on each side, as a fraction of the observed range.
    pub bounds_margin: f64,
    /// Reuse the previous iteration's hyperparameters as a single start.
    pub warm_start: bool,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            iterations: 5,
            batch_size: 50,
            seed: 0,
            gp: GpConfig::default(),
            acquisition: AcquisitionConfig::default(),
            bounds_margin: 0.1,
            warm_start: true,
        }
    }
}

/// Runs `cfg.iterations` rounds of fit, batch selection, evaluation and
/// imputation. Proposals are evaluated in parallel, each with its own
/// random stream.
pub fn bo_loop<O: Objective>(
    mut state: BoState,
    objective: &O,
    cfg: &BoConfig,
) -> Result<BoState, GpError> {
    let mut hyper: Option<Hyper> = None;
    for _ in 0..cfg.iterations {
        let iteration = state.iterations() + 1;
        let sign = if state.maximize { -1.0 } else { 1.0 };
        let z: Vec<Vec<f64>> = state.records.iter().map(|r| r.z.clone()).collect();
        let y: Vec<f64> = state.records.iter().map(|r| sign * r.score).collect();
        let mut gp_cfg = cfg.gp.clone();
        gp_cfg.seed = cfg.seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        if cfg.warm_start {
            gp_cfg.warm_start = hyper.clone();
        }
        let model = fit_gp(&z, &y, &gp_cfg)?;
        hyper = Some(model.hyper.clone());
        let bounds = Bounds::from_points(&z, cfg.bounds_margin);
        let best_internal = y.iter().copied().fold(f64::INFINITY, f64::min);
        let mut rng = crate::latent::stream_rng(cfg.seed, 2 * iteration as u64);
        let batch = select_batch(
            &model,
            cfg.batch_size,
            best_internal,
            &bounds,
            &cfg.acquisition,
            &mut rng,
        );
        let evals: Vec<Evaluation> = batch
            .par_iter()
            .enumerate()
            .map(|(i, z)| {
                let mut r = crate::latent::stream_rng(
                    cfg.seed,
                    (2 * iteration as u64 + 1) << 32 | i as u64,
                );
                objective.evaluate(z, &mut r)
            })
            .collect();
        let n_valid = evals.iter().filter(|e| e.valid).count();
        let scored: Vec<f64> = evals.iter().filter_map(|e| e.score).collect();
        let mean_score =
            (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
        for (z, e) in batch.into_iter().zip(evals) {
            let worst = state.worst().expect("initial data is non-empty");
            let (score, imputed) = match e.score {
                Some(s) => (s, false),
                None => (worst, true),
            };
            state.records.push(BoRecord {
                iteration,
                z,
                valid: e.valid,
                text: e.text,
                raw_score: e.score,
                score,
                imputed,
            });
        }
        let proposed = cfg.batch_size;
        state.summaries.push(IterationSummary {
            iteration,
            proposed,
            fraction_valid: if proposed == 0 {
                0.0
            } else {
                n_valid as f64 / proposed as f64
            },
            mean_score,
            best: state.best().unwrap_or(f64::NAN),
        });
    }
    Ok(state)
}
