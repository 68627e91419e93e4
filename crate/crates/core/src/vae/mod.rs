//! Variational autoencoder over one-hot rule sequences.
//!
//! The encoder is a stack of valid 1-D convolutions over the `t_max x K`
//! one-hot matrix followed by a dense layer and two heads for the mean and
//! log-variance. The decoder maps `z` through a dense layer, feeds that
//! vector to a stack of GRUs at every timestep, and projects each top-layer
//! state to `K` logits.

mod train;

pub use train::{
    load_checkpoint, save_checkpoint, train, Checkpoint, ConfigError, EpochStats, TrainConfig,
    TrainError, TrainState,
};

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{
    encode_onehot, parse, tree_to_rules, DerivationError, Grammar, OneHotMatrix, ParseError,
};
use crate::nn::{
    read_container, write_container, Activation, Container, Conv1d, Dense, Graph, GruLayer,
    NnError, NodeId, ParamSet, Tensor, TensorEntry,
};

pub const MODEL_KIND: &str = "gvae-model";

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Derivation(#[from] DerivationError),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

/// Layer sizes. The conv lists must have equal length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub conv_widths: Vec<usize>,
    pub conv_channels: Vec<usize>,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            conv_widths: vec![2, 3, 4],
            conv_channels: vec![9, 9, 10],
            encoder_hidden: 100,
            decoder_hidden: 100,
            gru_hidden: 100,
            gru_layers: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub z_dim: usize,
    pub t_max: usize,
    pub k: usize,
    pub arch: ArchConfig,
    pub kl_weight: f64,
}

impl VaeConfig {
    pub fn new(z_dim: usize, t_max: usize, k: usize) -> Self {
        VaeConfig {
            z_dim,
            t_max,
            k,
            arch: ArchConfig::default(),
            kl_weight: 1.0,
        }
    }

    /// Expression defaults: 25 latent dimensions, 15 rule slots.
    pub fn equations(g: &Grammar) -> Self {
        Self::new(25, 15, g.num_rules())
    }

    /// Molecule defaults: 56 latent dimensions, 277 rule slots.
    pub fn smiles(g: &Grammar) -> Self {
        Self::new(56, 277, g.num_rules())
    }

    pub fn validate(&self) -> Result<(), VaeError> {
        let a = &self.arch;
        let err = |m: String| Err(VaeError::Config(m));
        if self.z_dim == 0 {
            return err("z_dim must be at least 1".into());
        }
        if self.k < 2 {
            return err(format!("K = {} is too small", self.k));
        }
        if a.conv_widths.len() != a.conv_channels.len() {
            return err("conv_widths and conv_channels differ in length".into());
        }
        if a.gru_layers == 0 || a.gru_hidden == 0 || a.encoder_hidden == 0 || a.decoder_hidden == 0
        {
            return err("layer sizes must be positive".into());
        }
        if a.conv_widths.contains(&0) || a.conv_channels.contains(&0) {
            return err("conv widths and channels must be positive".into());
        }
        if self.conv_out_len() == 0 {
            return err(format!(
                "t_max {} is too short for conv widths {:?}",
                self.t_max, a.conv_widths
            ));
        }
        if !(self.kl_weight.is_finite() && self.kl_weight >= 0.0) {
            return err(format!(
                "kl_weight {} must be finite and non-negative",
                self.kl_weight
            ));
        }
        Ok(())
    }

    fn conv_out_len(&self) -> usize {
        let shrink: usize = self.arch.conv_widths.iter().map(|w| w - 1).sum();
        self.t_max.saturating_sub(shrink)
    }

    fn flat_len(&self) -> usize {
        let ch = self.arch.conv_channels.last().copied().unwrap_or(self.k);
        self.conv_out_len() * ch
    }
}

/// Diagonal Gaussian `q(z | X)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLatent {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl GaussianLatent {
    pub fn standard(dim: usize) -> Self {
        GaussianLatent {
            mean: vec![0.0; dim],
            log_variance: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_variance.iter().map(|v| v.exp()).collect()
    }
}

/// Decoder output, one row of `K` logits per timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl LogitMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, VaeError> {
        if data.len() != rows * cols {
            return Err(VaeError::Shape(format!(
                "logit matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(LogitMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The first `rows` rows.
    pub fn truncated(&self, rows: usize) -> LogitMatrix {
        let rows = rows.min(self.rows);
        LogitMatrix {
            rows,
            cols: self.cols,
            data: self.data[..rows * self.cols].to_vec(),
        }
    }
}

/// `z = mu + exp(logvar / 2) * eps`.
pub fn reparameterize(g: &GaussianLatent, eps: &[f64]) -> Vec<f64> {
    g.mean
        .iter()
        .zip(&g.log_variance)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

/// Closed-form `KL(q || N(0, I))`.
pub fn kl_to_standard_normal(g: &GaussianLatent) -> f64 {
    0.5 * g
        .mean
        .iter()
        .zip(&g.log_variance)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Teacher-forced `log p(X | z)`: at each non-padding step the logits are
/// normalized over the rules sharing the true rule's left-hand side.
pub fn reconstruction_logprob(
    x: &OneHotMatrix,
    f: &LogitMatrix,
    g: &Grammar,
) -> Result<f64, VaeError> {
    if x.rows() != f.rows() || x.cols() != f.cols() || f.cols() != g.num_rules() {
        return Err(VaeError::Shape(format!(
            "one-hot {}x{}, logits {}x{}, grammar K = {}",
            x.rows(),
            x.cols(),
            f.rows(),
            f.cols(),
            g.num_rules()
        )));
    }
    let hot = x.hot_indices();
    let mut total = 0.0;
    for (t, &k) in hot.iter().enumerate().take(x.true_length()) {
        let mask = g.masks().mask(g.rule(k).lhs);
        let row = f.row(t);
        let max = row
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = row
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| (v - max).exp())
            .sum::<f64>()
            .ln();
        total += row[k] - max - lse;
    }
    Ok(total)
}

/// Parses `s` and one-hot encodes its derivation.
pub fn onehot_for(s: &str, g: &Grammar, t_max: usize) -> Result<OneHotMatrix, VaeError> {
    let rules = tree_to_rules(&parse(s, g)?);
    Ok(encode_onehot(&rules, g, t_max)?)
}

#[derive(Debug, Clone, PartialEq)]
struct Layers {
    convs: Vec<Conv1d>,
    enc_hidden: Dense,
    mu: Dense,
    logvar: Dense,
    dec_in: Dense,
    grus: Vec<GruLayer>,
    out: Dense,
}

/// Parameters plus the layer layout they follow.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    config: VaeConfig,
    params: ParamSet,
    layers: Layers,
}

/// Graph nodes of one ELBO evaluation; all terms are batch sums.
#[derive(Debug, Clone, Copy)]
pub struct ElboNodes {
    pub elbo: NodeId,
    pub recon: NodeId,
    pub kl: NodeId,
}

impl VaeModel {
    pub fn new<R: Rng + ?Sized>(config: VaeConfig, rng: &mut R) -> Result<Self, VaeError> {
        config.validate()?;
        let mut params = ParamSet::new();
        let layers = Self::build(&config, &mut params, rng);
        Ok(VaeModel {
            config,
            params,
            layers,
        })
    }

    fn build<R: Rng + ?Sized>(c: &VaeConfig, p: &mut ParamSet, rng: &mut R) -> Layers {
        let a = &c.arch;
        let mut convs = Vec::new();
        let mut ch_in = c.k;
        for (i, (&w, &ch)) in a.conv_widths.iter().zip(&a.conv_channels).enumerate() {
            convs.push(Conv1d::init(
                p,
                &format!("enc.conv{i}"),
                ch_in,
                ch,
                w,
                Activation::Relu,
                rng,
            ));
            ch_in = ch;
        }
        let enc_hidden = Dense::init(
            p,
            "enc.dense",
            c.flat_len(),
            a.encoder_hidden,
            Activation::Relu,
            rng,
        );
        let mu = Dense::init(
            p,
            "enc.mu",
            a.encoder_hidden,
            c.z_dim,
            Activation::Identity,
            rng,
        );
        let logvar = Dense::init(
            p,
            "enc.logvar",
            a.encoder_hidden,
            c.z_dim,
            Activation::Identity,
            rng,
        );
        let dec_in = Dense::init(
            p,
            "dec.dense",
            c.z_dim,
            a.decoder_hidden,
            Activation::Relu,
            rng,
        );
        let mut grus = Vec::new();
        let mut inp = a.decoder_hidden;
        for i in 0..a.gru_layers {
            grus.push(GruLayer::init(
                p,
                &format!("dec.gru{i}"),
                inp,
                a.gru_hidden,
                rng,
            ));
            inp = a.gru_hidden;
        }
        let out = Dense::init(p, "dec.out", a.gru_hidden, c.k, Activation::Identity, rng);
        Layers {
            convs,
            enc_hidden,
            mu,
            logvar,
            dec_in,
            grus,
            out,
        }
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces the parameters; names and shapes must match.
    pub fn set_params(&mut self, params: ParamSet) -> Result<(), VaeError> {
        let same = params.names() == self.params.names()
            && params
                .tensors()
                .iter()
                .zip(self.params.tensors())
                .all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(VaeError::Shape(
                "parameter layout differs from the model".into(),
            ));
        }
        self.params = params;
        Ok(())
    }

    /// Sets every encoder parameter (names prefixed `enc.`) to zero.
    pub fn zero_encoder(&mut self) {
        for i in 0..self.params.len() {
            if self.params.name(i).starts_with("enc.") {
                self.params
                    .tensor_mut(i)
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }
    }

    fn check_input(&self, x: &OneHotMatrix) -> Result<(), VaeError> {
        if x.rows() != self.config.t_max || x.cols() != self.config.k {
            return Err(VaeError::Shape(format!(
                "input is {}x{}, model expects {}x{}",
                x.rows(),
                x.cols(),
                self.config.t_max,
                self.config.k
            )));
        }
        Ok(())
    }

    /// Records the encoder; returns `(mu, logvar)` nodes of shape `[B, z_dim]`.
    pub fn encoder_graph(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        xs: &[&OneHotMatrix],
    ) -> Result<(NodeId, NodeId), VaeError> {
        let c = &self.config;
        let mut data = Vec::with_capacity(xs.len() * c.t_max * c.k);
        for x in xs {
            self.check_input(x)?;
            data.extend(x.to_f64());
        }
        let mut h = g.input(Tensor::new(vec![xs.len(), c.t_max, c.k], data)?);
        for conv in &self.layers.convs {
            h = conv.forward(g, params, h)?;
        }
        let h = g.reshape(h, vec![xs.len(), c.flat_len()])?;
        let h = self.layers.enc_hidden.forward(g, params, h)?;
        let mu = self.layers.mu.forward(g, params, h)?;
        let lv = self.layers.logvar.forward(g, params, h)?;
        Ok((mu, lv))
    }

    /// Records the decoder for a `[B, z_dim]` node; returns `[B * t_max, K]` logits.
    pub fn decoder_graph(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        z: NodeId,
    ) -> Result<NodeId, VaeError> {
        let c = &self.config;
        let bsz = g.value(z).rows();
        if g.value(z).cols() != c.z_dim {
            return Err(VaeError::Shape(format!(
                "latent has {} entries, model expects {}",
                g.value(z).cols(),
                c.z_dim
            )));
        }
        let x = self.layers.dec_in.forward(g, params, z)?;
        let bound: Vec<_> = self.layers.grus.iter().map(|l| l.bind(g, params)).collect();
        let mut hs: Vec<NodeId> = (0..bound.len())
            .map(|_| g.input(Tensor::zeros(&[bsz, c.arch.gru_hidden])))
            .collect();
        let mut tops = Vec::with_capacity(c.t_max);
        for _ in 0..c.t_max {
            let mut inp = x;
            for (l, gru) in bound.iter().enumerate() {
                hs[l] = gru.step(g, hs[l], inp)?;
                inp = hs[l];
            }
            tops.push(inp);
        }
        let stacked = g.stack_steps(&tops)?;
        let flat = g.reshape(stacked, vec![bsz * c.t_max, c.arch.gru_hidden])?;
        Ok(self.layers.out.forward(g, params, flat)?)
    }

    pub fn encode(&self, x: &OneHotMatrix) -> Result<GaussianLatent, VaeError> {
        Ok(self.encode_batch(&[x])?.pop().unwrap())
    }

    pub fn encode_batch(&self, xs: &[&OneHotMatrix]) -> Result<Vec<GaussianLatent>, VaeError> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let (mu, lv) = self.encoder_graph(&mut g, &self.params, xs)?;
        let (mu, lv) = (g.value(mu), g.value(lv));
        Ok((0..xs.len())
            .map(|i| GaussianLatent {
                mean: mu.row(i).to_vec(),
                log_variance: lv.row(i).to_vec(),
            })
            .collect())
    }

    pub fn decode_logits(&self, z: &[f64]) -> Result<LogitMatrix, VaeError> {
        Ok(self.decode_logits_batch(&[z.to_vec()])?.pop().unwrap())
    }

    pub fn decode_logits_batch(&self, zs: &[Vec<f64>]) -> Result<Vec<LogitMatrix>, VaeError> {
        let c = &self.config;
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let mut data = Vec::with_capacity(zs.len() * c.z_dim);
        for z in zs {
            if z.len() != c.z_dim {
                return Err(VaeError::Shape(format!(
                    "latent has {} entries, model expects {}",
                    z.len(),
                    c.z_dim
                )));
            }
            data.extend_from_slice(z);
        }
        let mut g = Graph::new();
        let zi = g.input(Tensor::matrix(zs.len(), c.z_dim, data)?);
        let out = self.decoder_graph(&mut g, &self.params, zi)?;
        let block = c.t_max * c.k;
        g.value(out)
            .data()
            .chunks(block)
            .map(|d| LogitMatrix::new(c.t_max, c.k, d.to_vec()))
            .collect()
    }

    /// Records the single-sample ELBO for a batch, with `eps[i]` the noise
    /// for example `i`, under `params` (which must follow this model's layout).
    pub fn elbo_graph(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        xs: &[&OneHotMatrix],
        eps: &[Vec<f64>],
        grammar: &Grammar,
    ) -> Result<ElboNodes, VaeError> {
        let c = &self.config;
        if eps.len() != xs.len() || eps.iter().any(|e| e.len() != c.z_dim) {
            return Err(VaeError::Shape(
                "one eps vector of length z_dim per example".into(),
            ));
        }
        if grammar.num_rules() != c.k {
            return Err(VaeError::Shape(format!(
                "grammar has {} rules, model expects {}",
                grammar.num_rules(),
                c.k
            )));
        }
        let (mu, lv) = self.encoder_graph(g, params, xs)?;
        let e = g.input(Tensor::matrix(xs.len(), c.z_dim, eps.concat())?);
        let half = g.scale(lv, 0.5);
        let std = g.exp(half);
        let noise = g.mul(std, e)?;
        let z = g.add(mu, noise)?;
        let logits = self.decoder_graph(g, params, z)?;

        let mut mask = Vec::with_capacity(xs.len() * c.t_max * c.k);
        let mut targets = Vec::with_capacity(xs.len() * c.t_max);
        for x in xs {
            let hot = x.hot_indices();
            for (t, &k) in hot.iter().enumerate() {
                if t < x.true_length() {
                    mask.extend_from_slice(grammar.masks().mask(grammar.rule(k).lhs));
                    targets.push(Some(k));
                } else {
                    mask.extend(std::iter::repeat_n(true, c.k));
                    targets.push(None);
                }
            }
        }
        let recon = g.masked_loglik(logits, mask, targets)?;
        let kl = g.kl_standard_normal(mu, lv)?;
        let neg = g.scale(kl, -c.kl_weight);
        let elbo = g.add(recon, neg)?;
        Ok(ElboNodes { elbo, recon, kl })
    }

    /// Single-sample ELBO value of one example.
    pub fn elbo(&self, x: &OneHotMatrix, eps: &[f64], grammar: &Grammar) -> Result<f64, VaeError> {
        let mut g = Graph::new();
        let n = self.elbo_graph(&mut g, &self.params, &[x], &[eps.to_vec()], grammar)?;
        Ok(g.value(n.elbo).data()[0])
    }

    pub fn to_container(&self) -> Container {
        Container {
            kind: MODEL_KIND.into(),
            meta: serde_json::to_string(&self.config).expect("config serializes"),
            tensors: self
                .params
                .names()
                .iter()
                .zip(self.params.tensors())
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    tensor: t.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds a model from a container written by [`VaeModel::to_container`].
    /// Leading entries must match the model layout; extra entries are ignored.
    pub fn from_container(c: &Container) -> Result<Self, VaeError> {
        let config: VaeConfig = serde_json::from_str(&c.meta)
            .map_err(|e| VaeError::Nn(NnError::Format(format!("config: {e}"))))?;
        config.validate()?;
        let mut params = ParamSet::new();
        // Layout only; values are overwritten below.
        let layers = Self::build(
            &config,
            &mut params,
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
        );
        if c.tensors.len() < params.len() {
            return Err(VaeError::Nn(NnError::Format(format!(
                "{} tensors, model needs {}",
                c.tensors.len(),
                params.len()
            ))));
        }
        for (i, e) in c.tensors.iter().take(params.len()).enumerate() {
            if e.name != params.name(i) || e.tensor.shape() != params.tensor(i).shape() {
                return Err(VaeError::Nn(NnError::Format(format!(
                    "tensor `{}` {:?} does not match `{}` {:?}",
                    e.name,
                    e.tensor.shape(),
                    params.name(i),
                    params.tensor(i).shape()
                ))));
            }
            *params.tensor_mut(i) = e.tensor.clone();
        }
        Ok(VaeModel {
            config,
            params,
            layers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), VaeError> {
        Ok(write_container(path, &self.to_container())?)
    }

    /// Loads a model file or the model inside a training checkpoint.
    pub fn load(path: &Path) -> Result<Self, VaeError> {
        let c = read_container(path)?;
        if c.kind == train::CHECKPOINT_KIND {
            return Ok(train::checkpoint_from_container(&c)?.state.model);
        }
        if c.kind != MODEL_KIND {
            return Err(VaeError::Nn(NnError::Format(format!(
                "unexpected kind `{}`",
                c.kind
            ))));
        }
        Self::from_container(&c)
    }
}
