//! Parameter storage, forward-pass context and the shared layer types.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Role of a stored tensor. Running statistics are stored and counted but
/// never trained; only `Weight` entries receive weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::NormScale => "norm_scale",
            ParamKind::NormShift => "norm_shift",
            ParamKind::RunningMean => "running_mean",
            ParamKind::RunningVar => "running_var",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "norm_scale" => ParamKind::NormScale,
            "norm_shift" => ParamKind::NormShift,
            "running_mean" => ParamKind::RunningMean,
            "running_var" => ParamKind::RunningVar,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// Named tensors of a model, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate {name}");
        self.params.push(Param { name, kind, tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    /// Replaces every tensor, keeping names and kinds. Shapes must match.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(shape_err(
                "set_tensors",
                format!("{} tensors for {} params", tensors.len(), self.params.len()),
            ));
        }
        for (p, t) in self.params.iter_mut().zip(tensors) {
            if p.tensor.shape() != t.shape() {
                return Err(shape_err(
                    "set_tensors",
                    format!("{}: {:?} vs {:?}", p.name, p.tensor.shape(), t.shape()),
                ));
            }
            p.tensor = t;
        }
        Ok(())
    }

    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor)>) {
        for (id, t) in updates {
            self.params[id.0].tensor = t;
        }
    }

    /// Total stored scalars (trainable values plus running statistics).
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a forward pass needs: the tape, the parameters bound onto it,
/// the dropout generator and the pending batch-norm statistics updates.
pub struct Forward<'t> {
    pub tape: &'t Tape,
    vars: Vec<Var<'t>>,
    running: Vec<Option<Tensor>>,
    mode: Mode,
    rng: RefCell<ChaCha8Rng>,
    bn_updates: RefCell<Vec<(ParamId, Tensor)>>,
}

impl<'t> Forward<'t> {
    /// Binds every parameter of `store` onto `tape`; trainable entries
    /// become gradient leaves.
    pub fn new(tape: &'t Tape, store: &ParamStore, mode: Mode, seed: u64) -> Self {
        let vars = store
            .params()
            .iter()
            .map(|p| {
                if p.kind.is_trainable() {
                    tape.param(p.tensor.clone())
                } else {
                    tape.constant(p.tensor.clone())
                }
            })
            .collect();
        Self::from_vars(tape, store, vars, mode, seed)
    }

    /// Uses caller-provided vars (one per store entry, in order).
    pub fn from_vars(
        tape: &'t Tape,
        store: &ParamStore,
        vars: Vec<Var<'t>>,
        mode: Mode,
        seed: u64,
    ) -> Self {
        assert_eq!(vars.len(), store.len());
        let running = store
            .params()
            .iter()
            .map(|p| (!p.kind.is_trainable()).then(|| p.tensor.clone()))
            .collect();
        Self {
            tape,
            vars,
            running,
            mode,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Inverted dropout: zeroes with probability `p` and rescales survivors
    /// by `1/(1-p)`. Identity in eval mode or when `p == 0`.
    pub fn dropout(&self, x: Var<'t>, p: f64) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout rate {p} outside [0, 1)")));
        }
        if !self.is_train() || p == 0.0 {
            return Ok(x);
        }
        let shape = x.shape();
        let keep = 1.0 - p;
        let mut rng = self.rng.borrow_mut();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        x.mul(self.tape.constant(Tensor::from_parts(shape, mask)))
    }

    fn running(&self, id: ParamId) -> &Tensor {
        self.running[id.0].as_ref().expect("running statistic")
    }

    fn push_bn_update(&self, id: ParamId, t: Tensor) {
        self.bn_updates.borrow_mut().push((id, t));
    }

    /// Batch-norm running statistics computed during a training forward.
    pub fn take_bn_updates(&self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }
}

/// Uniform `±sqrt(1/fan_in)` initialization.
pub fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, (1.0 / fan_in as f64).sqrt(), rng)
}

/// Affine map `x · W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{prefix}.weight"),
            ParamKind::Weight,
            init_uniform(&[in_dim, out_dim], in_dim, rng),
        );
        let bias = store.add(format!("{prefix}.bias"), ParamKind::Bias, Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Accepts `[.., in_dim]`; leading axes are flattened for the product.
    pub fn forward<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.last() != Some(&self.in_dim) {
            return Err(shape_err(
                "linear",
                format!("input {shape:?}, expected last dim {}", self.in_dim),
            ));
        }
        let rows = x.value().numel() / self.in_dim;
        let flat = if shape.len() == 2 { x } else { x.reshape(&[rows, self.in_dim])? };
        let y = flat.matmul(f.var(self.weight))?.add(f.var(self.bias))?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.out_dim;
            y.reshape(&out)
        }
    }
}

/// Batch normalization over `[N, F]` with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub features: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, features: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), ParamKind::NormScale, Tensor::ones(&[features])),
            beta: store.add(format!("{prefix}.beta"), ParamKind::NormShift, Tensor::zeros(&[features])),
            running_mean: store.add(
                format!("{prefix}.running_mean"),
                ParamKind::RunningMean,
                Tensor::zeros(&[features]),
            ),
            running_var: store.add(
                format!("{prefix}.running_var"),
                ParamKind::RunningVar,
                Tensor::ones(&[features]),
            ),
            features,
            eps,
            momentum,
        }
    }

    /// Train mode normalizes with batch statistics and queues a running
    /// statistics update; eval mode uses the stored running statistics.
    pub fn forward<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (gamma, beta) = (f.var(self.gamma), f.var(self.beta));
        match f.mode() {
            Mode::Train => {
                let (y, mean, var) = x.batch_norm_train(gamma, beta, self.eps)?;
                let m = self.momentum;
                let blend = |old: &Tensor, new: &[f64]| {
                    Tensor::vector(
                        old.data()
                            .iter()
                            .zip(new)
                            .map(|(o, n)| (1.0 - m) * o + m * n)
                            .collect(),
                    )
                };
                f.push_bn_update(self.running_mean, blend(f.running(self.running_mean), &mean));
                f.push_bn_update(self.running_var, blend(f.running(self.running_var), &var));
                Ok(y)
            }
            Mode::Eval => {
                let shape = x.shape();
                if shape.len() != 2 || shape[1] != self.features {
                    return Err(shape_err(
                        "batch_norm",
                        format!("input {shape:?}, expected [N, {}]", self.features),
                    ));
                }
                let mean = f.var(self.running_mean);
                let inv = f
                    .running(self.running_var)
                    .map(|v| 1.0 / (v + self.eps).sqrt());
                x.sub(mean)?
                    .mul(f.constant(inv))?
                    .mul(gamma)?
                    .add(beta)
            }
        }
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, features: usize, eps: f64) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), ParamKind::NormScale, Tensor::ones(&[features])),
            beta: store.add(format!("{prefix}.beta"), ParamKind::NormShift, Tensor::zeros(&[features])),
            eps,
        }
    }

    pub fn forward<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(f.var(self.gamma), f.var(self.beta), self.eps)
    }
}

/// Output of a sub-network classifier head.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput<'t> {
    /// Post-activation output of the second hidden block, before dropout.
    pub feature: Var<'t>,
    /// Post-batch-norm, pre-softmax class scores.
    pub logits: Var<'t>,
}

/// `[FC, BN, Mish, Dropout] × 2 → FC, BN`, shared by both sub-networks and
/// (with its own input width) by the fusion classifier.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub fc1: Linear,
    pub bn1: BatchNorm,
    pub fc2: Linear,
    pub bn2: BatchNorm,
    pub fc3: Linear,
    pub bn3: BatchNorm,
    pub dropout: f64,
}

impl ClassifierHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        width: usize,
        classes: usize,
        dropout: f64,
        bn_eps: f64,
        bn_momentum: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), in_dim, width, rng),
            bn1: BatchNorm::new(store, &format!("{prefix}.bn1"), width, bn_eps, bn_momentum),
            fc2: Linear::new(store, &format!("{prefix}.fc2"), width, width, rng),
            bn2: BatchNorm::new(store, &format!("{prefix}.bn2"), width, bn_eps, bn_momentum),
            fc3: Linear::new(store, &format!("{prefix}.fc3"), width, classes, rng),
            bn3: BatchNorm::new(store, &format!("{prefix}.bn3"), classes, bn_eps, bn_momentum),
            dropout,
        }
    }

    pub fn forward<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<HeadOutput<'t>> {
        let h = self.bn1.forward(f, self.fc1.forward(f, x)?)?.mish()?;
        let h = f.dropout(h, self.dropout)?;
        let feature = self.bn2.forward(f, self.fc2.forward(f, h)?)?.mish()?;
        let h = f.dropout(feature, self.dropout)?;
        let logits = self.bn3.forward(f, self.fc3.forward(f, h)?)?;
        Ok(HeadOutput { feature, logits })
    }
}
