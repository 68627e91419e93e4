use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{VaeConfig, VaeError, VaeModel};
use crate::grammar::{Grammar, OneHotMatrix};
use crate::nn::{
    read_container, write_container, AdamConfig, AdamState, Container, Gradients, Graph, NnError,
    Tensor, TensorEntry,
};

pub(super) const CHECKPOINT_KIND: &str = "gvae-checkpoint";

/// Examples per independently recorded graph. Fixed so that results do not
/// depend on the number of worker threads.
const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            lr: 1e-3,
            epochs: 30,
            batch: 64,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for key `{key}`")]
    BadValue { key: String, value: String },
    #[error("line {0}: expected key=value")]
    Syntax(usize),
}

impl TrainConfig {
    /// Applies a flat `key=value` file on top of `model` and `self`.
    ///
    /// Keys: seed, lr, epochs, batch, z_dim, t_max, kl_weight, encoder_hidden,
    /// decoder_hidden, gru_hidden, gru_layers, conv_widths, conv_channels
    /// (the last two comma separated). Blank lines and `#` comments are skipped.
    pub fn apply_kv(&mut self, model: &mut VaeConfig, text: &str) -> Result<(), ConfigError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax(n + 1))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
            };
            fn num<T: std::str::FromStr>(
                v: &str,
                bad: impl Fn() -> ConfigError,
            ) -> Result<T, ConfigError> {
                v.parse().map_err(|_| bad())
            }
            let list = |v: &str| -> Result<Vec<usize>, ConfigError> {
                v.split(',')
                    .map(|p| p.trim().parse().map_err(|_| bad()))
                    .collect()
            };
            match key {
                "seed" => self.seed = num(value, bad)?,
                "lr" => self.lr = num(value, bad)?,
                "epochs" => self.epochs = num(value, bad)?,
                "batch" => self.batch = num(value, bad)?,
                "z_dim" => model.z_dim = num(value, bad)?,
                "t_max" => model.t_max = num(value, bad)?,
                "kl_weight" => model.kl_weight = num(value, bad)?,
                "encoder_hidden" => model.arch.encoder_hidden = num(value, bad)?,
                "decoder_hidden" => model.arch.decoder_hidden = num(value, bad)?,
                "gru_hidden" => model.arch.gru_hidden = num(value, bad)?,
                "gru_layers" => model.arch.gru_layers = num(value, bad)?,
                "conv_widths" => model.arch.conv_widths = list(value)?,
                "conv_channels" => model.arch.conv_channels = list(value)?,
                other => return Err(ConfigError::UnknownKey(other.to_string())),
            }
        }
        Ok(())
    }
}

/// Per-epoch means over the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_elbo: f64,
    pub mean_recon: f64,
    pub mean_kl: f64,
}

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: VaeModel,
    pub adam: AdamState,
    pub epochs_done: usize,
    pub history: Vec<EpochStats>,
}

impl TrainState {
    pub fn new(model: VaeModel) -> Self {
        TrainState {
            adam: AdamState::new(model.params()),
            model,
            epochs_done: 0,
            history: Vec::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error("non-finite loss in epoch {epoch}; training aborted")]
    NonFinite {
        epoch: usize,
        last_good: Box<TrainState>,
    },
}

struct BatchSums {
    grads: Gradients,
    elbo: f64,
    recon: f64,
    kl: f64,
}

fn chunk_sums(
    model: &VaeModel,
    xs: &[&OneHotMatrix],
    eps: &[Vec<f64>],
    grammar: &Grammar,
) -> Result<BatchSums, VaeError> {
    let mut g = Graph::new();
    let nodes = model.elbo_graph(&mut g, model.params(), xs, eps, grammar)?;
    let grads = g.backward(nodes.elbo, model.params())?;
    Ok(BatchSums {
        grads,
        elbo: g.value(nodes.elbo).data()[0],
        recon: g.value(nodes.recon).data()[0],
        kl: g.value(nodes.kl).data()[0],
    })
}

/// Runs epochs `state.epochs_done + 1 ..= cfg.epochs` of minibatch Adam on
/// the negative ELBO. Epoch `e` shuffles and draws noise from a stream
/// derived from `(cfg.seed, e)`, so resuming from a checkpoint continues
/// exactly as an uninterrupted run would. `on_epoch` sees the state after
/// every completed epoch.
pub fn train(
    mut state: TrainState,
    data: &[OneHotMatrix],
    cfg: &TrainConfig,
    grammar: &Grammar,
    mut on_epoch: impl FnMut(&TrainState),
) -> Result<TrainState, TrainError> {
    if cfg.batch == 0 {
        return Err(VaeError::Config("batch must be positive".into()).into());
    }
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let z_dim = state.model.config().z_dim;
    while state.epochs_done < cfg.epochs && !data.is_empty() {
        let epoch = state.epochs_done + 1;
        let snapshot = state.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut elbo, mut recon, mut kl) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch) {
            let eps: Vec<Vec<f64>> = batch
                .iter()
                .map(|_| (0..z_dim).map(|_| rng.sample(StandardNormal)).collect())
                .collect();
            let xs: Vec<&OneHotMatrix> = batch.iter().map(|&i| &data[i]).collect();
            let model = &state.model;
            let parts: Vec<Result<BatchSums, VaeError>> = xs
                .par_chunks(CHUNK)
                .zip(eps.par_chunks(CHUNK))
                .map(|(x, e)| chunk_sums(model, x, e, grammar))
                .collect();
            let mut total = Gradients::zeros_like(model.params());
            let (mut b_elbo, mut b_recon, mut b_kl) = (0.0, 0.0, 0.0);
            for p in parts {
                let p = p?;
                total.add_assign(&p.grads);
                b_elbo += p.elbo;
                b_recon += p.recon;
                b_kl += p.kl;
            }
            if !b_elbo.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    last_good: Box::new(snapshot),
                });
            }
            // Ascend the mean ELBO by descending its negation.
            total.scale(-1.0 / batch.len() as f64);
            match state
                .adam
                .update(state.model.params_mut(), &total, &adam_cfg)
            {
                Ok(()) => {}
                Err(NnError::NonFiniteGradient(_)) => {
                    return Err(TrainError::NonFinite {
                        epoch,
                        last_good: Box::new(snapshot),
                    })
                }
                Err(e) => return Err(VaeError::from(e).into()),
            }
            elbo += b_elbo;
            recon += b_recon;
            kl += b_kl;
        }
        let n = data.len() as f64;
        let stats = EpochStats {
            epoch,
            mean_elbo: elbo / n,
            mean_recon: recon / n,
            mean_kl: kl / n,
        };
        info!(
            "epoch {epoch}: elbo {:.4} recon {:.4} kl {:.4}",
            stats.mean_elbo, stats.mean_recon, stats.mean_kl
        );
        state.history.push(stats);
        state.epochs_done = epoch;
        on_epoch(&state);
    }
    Ok(state)
}

/// Training state plus the settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub train: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: VaeConfig,
    train: TrainConfig,
    epochs_done: usize,
    adam_step: u64,
    history: Vec<EpochStats>,
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<(), VaeError> {
    let mut container = c.state.model.to_container();
    container.kind = CHECKPOINT_KIND.into();
    container.meta = serde_json::to_string(&CheckpointMeta {
        model: c.state.model.config().clone(),
        train: c.train.clone(),
        epochs_done: c.state.epochs_done,
        adam_step: c.state.adam.step,
        history: c.state.history.clone(),
    })
    .expect("checkpoint meta serializes");
    let names = c.state.model.params().names().to_vec();
    for (moment, tensors) in [("m", &c.state.adam.m), ("v", &c.state.adam.v)] {
        for (n, t) in names.iter().zip(tensors.iter()) {
            container.tensors.push(TensorEntry {
                name: format!("adam.{moment}.{n}"),
                tensor: t.clone(),
            });
        }
    }
    Ok(write_container(path, &container)?)
}

pub(super) fn checkpoint_from_container(c: &Container) -> Result<Checkpoint, VaeError> {
    let format = |m: String| VaeError::Nn(NnError::Format(m));
    if c.kind != CHECKPOINT_KIND {
        return Err(format(format!("expected a checkpoint, found `{}`", c.kind)));
    }
    let meta: CheckpointMeta =
        serde_json::from_str(&c.meta).map_err(|e| format(format!("checkpoint meta: {e}")))?;
    let model_container = Container {
        kind: super::MODEL_KIND.into(),
        meta: serde_json::to_string(&meta.model).expect("config serializes"),
        tensors: c.tensors.clone(),
    };
    let model = VaeModel::from_container(&model_container)?;
    let np = model.params().len();
    if c.tensors.len() != 3 * np {
        return Err(format(format!(
            "checkpoint has {} tensors, expected {}",
            c.tensors.len(),
            3 * np
        )));
    }
    let moments = |offset: usize, tag: &str| -> Result<Vec<Tensor>, VaeError> {
        (0..np)
            .map(|i| {
                let e = &c.tensors[offset + i];
                let want = format!("adam.{tag}.{}", model.params().name(i));
                if e.name != want || e.tensor.shape() != model.params().tensor(i).shape() {
                    return Err(format(format!("expected `{want}`, found `{}`", e.name)));
                }
                Ok(e.tensor.clone())
            })
            .collect()
    };
    let adam = AdamState {
        m: moments(np, "m")?,
        v: moments(2 * np, "v")?,
        step: meta.adam_step,
    };
    Ok(Checkpoint {
        state: TrainState {
            model,
            adam,
            epochs_done: meta.epochs_done,
            history: meta.history,
        },
        train: meta.train,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, VaeError> {
    checkpoint_from_container(&read_container(path)?)
}
