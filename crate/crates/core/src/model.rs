//! The full model bundle: transformer and ON-LSTM sub-networks, the fusion
//! classifier and the parameter-free ensemble head, plus the joint
//! distillation training step.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{ensemble_logits_var, fusion_loss, sub_network_loss, Distillation, FusionMlp};
use crate::nn::{Forward, Mode, ParamStore};
use crate::onlstm::OnLstmNet;
use crate::optim::AdamW;
use crate::tensor::Tensor;
use crate::transformer::{AttentionConfig, TransformerNet};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub seq_len: usize,
    pub input_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub transformer_blocks: usize,
    pub lstm_hidden: usize,
    pub chunk_size: usize,
    pub head_width: usize,
    pub dropout: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    /// The full architecture: 64×66 windows, three 11-head blocks,
    /// two 660-unit ON-LSTM layers, 512-wide heads, 14 classes.
    pub fn full() -> Self {
        Self {
            num_classes: 14,
            seq_len: 64,
            input_dim: 66,
            heads: 11,
            ff_dim: 264,
            transformer_blocks: 3,
            lstm_hidden: 660,
            chunk_size: 33,
            head_width: 512,
            dropout: 0.5,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Reduced widths for the synthetic desk-scale profile.
    pub fn desk() -> Self {
        Self {
            num_classes: 4,
            seq_len: 16,
            input_dim: 66,
            heads: 11,
            ff_dim: 66,
            transformer_blocks: 2,
            lstm_hidden: 24,
            chunk_size: 6,
            head_width: 32,
            dropout: 0.5,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.input_dim,
            heads: self.heads,
            ff_dim: self.ff_dim,
            seq_len: self.seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        if self.num_classes < 2 || self.head_width == 0 || self.transformer_blocks == 0 {
            return Err(Error::InvalidArgument(format!("invalid model config {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Logits of the four classifiers for one batch.
#[derive(Clone, Copy, Debug)]
pub struct LogitSet<'t> {
    pub transformer: Var<'t>,
    pub onlstm: Var<'t>,
    pub fusion: Var<'t>,
    /// Mean of the transformer and ON-LSTM logits.
    pub ensemble: Var<'t>,
}

/// Per-batch losses of one joint training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub transformer: f64,
    pub onlstm: f64,
    pub fusion: f64,
}

impl StepLosses {
    pub fn total(&self) -> f64 {
        self.transformer + self.onlstm + self.fusion
    }
}

/// Parameters and structure of the whole model.
#[derive(Clone, Debug)]
pub struct GestureModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub transformer: TransformerNet,
    pub onlstm: OnLstmNet,
    pub fusion: FusionMlp,
}

impl GestureModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let transformer = TransformerNet::new(
            &mut store,
            "transformer",
            c.attention(),
            c.transformer_blocks,
            c.head_width,
            c.num_classes,
            c.dropout,
            c.bn_eps,
            c.bn_momentum,
            &mut rng,
        )?;
        let onlstm = OnLstmNet::new(
            &mut store,
            "onlstm",
            c.input_dim,
            c.lstm_hidden,
            c.chunk_size,
            c.head_width,
            c.num_classes,
            c.dropout,
            c.bn_eps,
            c.bn_momentum,
            &mut rng,
        )?;
        let fusion = FusionMlp::new(
            &mut store,
            "fusion",
            c.head_width,
            c.num_classes,
            c.dropout,
            c.bn_eps,
            c.bn_momentum,
            &mut rng,
        );
        Ok(Self {
            config,
            store,
            transformer,
            onlstm,
            fusion,
        })
    }

    /// Forward through all four classifiers for `[B, S, D]` windows.
    pub fn forward<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<LogitSet<'t>> {
        let t = self.transformer.forward(f, x)?;
        let o = self.onlstm.forward(f, x)?;
        let fusion = self.fusion.forward(f, t.feature, o.feature)?;
        Ok(LogitSet {
            transformer: t.logits,
            onlstm: o.logits,
            fusion,
            ensemble: ensemble_logits_var(t.logits, o.logits)?,
        })
    }

    /// Eval-mode logits `[transformer, onlstm, fusion, ensemble]`.
    pub fn predict_logits(&self, windows: &Tensor) -> Result<[Tensor; 4]> {
        let tape = Tape::new();
        let f = Forward::new(&tape, &self.store, Mode::Eval, 0);
        let l = self.forward(&f, tape.constant(windows.clone()))?;
        Ok([
            (*l.transformer.value()).clone(),
            (*l.onlstm.value()).clone(),
            (*l.fusion.value()).clone(),
            (*l.ensemble.value()).clone(),
        ])
    }

    /// Exact parameter count (trainable values plus batch-norm running
    /// statistics), grouped by layer.
    pub fn count_parameters(&self) -> ParameterCount {
        count_parameters(&self.store)
    }
}

/// Parameter totals broken down per layer (name minus its last component).
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ParameterCount {
    pub per_layer: Vec<(String, usize)>,
    pub total: usize,
}

impl ParameterCount {
    pub fn layer(&self, name: &str) -> Option<usize> {
        self.per_layer.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
    }

    /// Sum over every layer whose name starts with `prefix`.
    pub fn prefixed(&self, prefix: &str) -> usize {
        self.per_layer
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, c)| c)
            .sum()
    }
}

pub fn count_parameters(store: &ParamStore) -> ParameterCount {
    let mut per_layer: Vec<(String, usize)> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for p in store.params() {
        let layer = p.name.rsplit_once('.').map_or(p.name.as_str(), |(l, _)| l).to_string();
        match index.get(&layer) {
            Some(&i) => per_layer[i].1 += p.tensor.numel(),
            None => {
                index.insert(layer.clone(), per_layer.len());
                per_layer.push((layer, p.tensor.numel()));
            }
        }
    }
    let total = per_layer.iter().map(|(_, c)| c).sum();
    ParameterCount { per_layer, total }
}

/// The three distillation losses for one batch, as tape values.
pub fn joint_losses<'t>(
    logits: &LogitSet<'t>,
    labels: &[usize],
    kd: Distillation,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let lt = sub_network_loss(logits.transformer, logits.fusion, labels, kd)?;
    let lo = sub_network_loss(logits.onlstm, logits.fusion, labels, kd)?;
    let lf = fusion_loss(logits.fusion, logits.ensemble, labels, kd)?;
    Ok((lt, lo, lf))
}

/// One forward/backward/update over a batch in train mode.
///
/// `dropout_seed` fixes the dropout masks for the step.
pub fn joint_training_step(
    model: &mut GestureModel,
    optimizer: &mut AdamW,
    windows: &Tensor,
    labels: &[usize],
    kd: Distillation,
    lr: f64,
    dropout_seed: u64,
) -> Result<StepLosses> {
    let tape = Tape::new();
    let f = Forward::new(&tape, &model.store, Mode::Train, dropout_seed);
    let logits = model.forward(&f, tape.constant(windows.clone()))?;
    let (lt, lo, lf) = joint_losses(&logits, labels, kd)?;
    let losses = StepLosses {
        transformer: lt.value().item(),
        onlstm: lo.value().item(),
        fusion: lf.value().item(),
    };
    if !losses.total().is_finite() {
        return Err(Error::NonFinite {
            op: format!("joint loss {losses:?}"),
        });
    }
    let total = lt.add(lo)?.add(lf)?;
    let grads = tape.backward(total)?;
    let updates: Vec<_> = model
        .store
        .ids()
        .filter(|&id| model.store.get(id).kind.is_trainable())
        .map(|id| (id, grads.wrt(f.var(id))))
        .collect();
    let bn = f.take_bn_updates();
    drop(f);
    optimizer.step(&mut model.store, &updates, lr)?;
    model.store.apply_updates(bn);
    Ok(losses)
}
