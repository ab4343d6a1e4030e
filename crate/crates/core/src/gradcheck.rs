//! Central-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{cross_entropy, distillation_term, fusion_loss, sub_network_loss, Distillation, FusionMlp};
use crate::model::{GestureModel, ModelConfig};
use crate::nn::{Forward, Mode, ParamStore};
use crate::onlstm::OnLstmLayer;
use crate::tensor::Tensor;
use crate::transformer::{AttentionConfig, TransformerBlock};

/// Default perturbation for central differences.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Smallest derivative difference a central difference can resolve: the
/// rounding error of `f(x+h) - f(x-h)` divided by `2h`. Structurally zero
/// gradients (a bias feeding a normalisation, say) show up numerically as
/// noise of this size.
pub fn resolution(plus: f64, minus: f64, eps: f64) -> f64 {
    4.0 * f64::EPSILON * (plus.abs() + minus.abs()) / (2.0 * eps)
}

/// Checks the gradient of a scalar function of one tensor.
///
/// Returns the maximum relative error over all coordinates of `x`, after
/// discounting differences below [`resolution`].
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// Checks the gradient of a scalar function of several tensors at once.
///
/// `f` is re-evaluated on a fresh tape for every perturbation, so it must be
/// a pure function of its inputs (seed any dropout masks inside `f`).
pub fn check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    Ok(check_many_detailed(f, inputs, eps)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Per-input maximum relative error.
pub fn check_many_detailed<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let v = f(&tape, &vars)?.value().item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                op: "finite_difference_check".into(),
            })
        }
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut errs = Vec::with_capacity(inputs.len());
    for (k, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let excess = ((a - numeric).abs() - resolution(plus, minus, eps)).max(0.0);
            worst = worst.max(excess / a.abs().max(numeric.abs()).max(1e-8));
        }
        errs.push(worst);
    }
    Ok(errs)
}

/// Acceptance threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-5;

fn fixed(shape: &[usize], seed: u64, bound: f64) -> Tensor {
    Tensor::uniform(shape, bound, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Contracts an arbitrary-shaped output with fixed weights so every output
/// coordinate contributes with a distinct sensitivity.
fn weighted<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = tape.constant(fixed(&y.shape(), seed ^ 0x5EED, 1.0));
    y.mul(w)?.sum()
}

type Named = (String, f64);

/// Dropout seed shared by every composite check.
const JOINT_SEED: u64 = 0xD0;

/// Every differentiable primitive, each checked with respect to all its
/// inputs at a fixed random point.
pub fn primitive_suite() -> Result<Vec<Named>> {
    let eps = DEFAULT_EPS;
    let a = fixed(&[2, 3, 4], 1, 1.0);
    let b = fixed(&[2, 3, 4], 2, 1.0);
    let row = fixed(&[4], 3, 1.0);
    let pos = a.map(|v| v.abs() + 0.5);
    let mut out: Vec<Named> = Vec::new();
    let mut push = |name: &str, r: Result<f64>| -> Result<()> {
        out.push((name.to_string(), r?));
        Ok(())
    };
    push("add (broadcast)", check_many(|t, v| weighted(t, v[0].add(v[1])?, 1), &[a.clone(), row.clone()], eps))?;
    push("sub", check_many(|t, v| weighted(t, v[0].sub(v[1])?, 2), &[a.clone(), b.clone()], eps))?;
    push("mul (broadcast)", check_many(|t, v| weighted(t, v[0].mul(v[1])?, 3), &[a.clone(), row.clone()], eps))?;
    push("div", check_many(|t, v| weighted(t, v[0].div(v[1])?, 4), &[a.clone(), pos.clone()], eps))?;
    push("exp", finite_difference_check(|t, x| weighted(t, x.exp()?, 5), &a, eps))?;
    push("ln", finite_difference_check(|t, x| weighted(t, x.ln()?, 6), &pos, eps))?;
    push("tanh", finite_difference_check(|t, x| weighted(t, x.tanh()?, 7), &a, eps))?;
    push("sigmoid", finite_difference_check(|t, x| weighted(t, x.sigmoid()?, 8), &a, eps))?;
    push("mish", finite_difference_check(|t, x| weighted(t, x.mish()?, 9), &a.map(|v| 3.0 * v), eps))?;
    push("neg", finite_difference_check(|t, x| weighted(t, x.neg()?, 10), &a, eps))?;
    push("mul_scalar", finite_difference_check(|t, x| weighted(t, x.mul_scalar(-2.5)?, 11), &a, eps))?;
    push("add_scalar", finite_difference_check(|t, x| weighted(t, x.add_scalar(0.7)?, 12), &a, eps))?;
    push("rsub_scalar", finite_difference_check(|t, x| weighted(t, x.rsub_scalar(1.0)?, 13), &a, eps))?;
    push("sum", finite_difference_check(|_, x| x.mul(x)?.sum(), &a, eps))?;
    push("mean", finite_difference_check(|_, x| x.mul(x)?.mean(), &a, eps))?;
    push("reshape", finite_difference_check(|t, x| weighted(t, x.reshape(&[6, 4])?.exp()?, 14), &a, eps))?;
    let m = fixed(&[3, 4], 15, 1.0);
    let n = fixed(&[4, 5], 16, 1.0);
    push("matmul", check_many(|t, v| weighted(t, v[0].matmul(v[1])?, 17), &[m, n], eps))?;
    let c = fixed(&[2, 4, 3], 18, 1.0);
    push("bmm", check_many(|t, v| weighted(t, v[0].bmm(v[1], false)?, 19), &[a.clone(), c], eps))?;
    push("bmm (transposed rhs)", check_many(|t, v| weighted(t, v[0].bmm(v[1], true)?, 20), &[a.clone(), b.clone()], eps))?;
    push("permute", finite_difference_check(|t, x| weighted(t, x.permute(&[2, 0, 1])?.exp()?, 21), &a, eps))?;
    push("transpose", finite_difference_check(|t, x| weighted(t, x.reshape(&[6, 4])?.transpose()?.exp()?, 22), &a, eps))?;
    push("slice", finite_difference_check(|t, x| weighted(t, x.slice(2, 1, 2)?.exp()?, 23), &a, eps))?;
    push("concat", check_many(|t, v| weighted(t, Var::concat(&[v[0], v[1]], 1)?.exp()?, 24), &[a.clone(), b.clone()], eps))?;
    push("softmax", finite_difference_check(|t, x| weighted(t, x.softmax(2)?, 25), &a, eps))?;
    push("log_softmax", finite_difference_check(|t, x| weighted(t, x.log_softmax(1)?, 26), &a, eps))?;
    push("cumsum", finite_difference_check(|t, x| weighted(t, x.cumsum(2)?.tanh()?, 27), &a, eps))?;
    push("cumax", finite_difference_check(|t, x| weighted(t, x.cumax(2)?, 28), &a, eps))?;
    let g = fixed(&[4], 29, 1.0).map(|v| v + 1.5);
    push(
        "layer_norm",
        check_many(|t, v| weighted(t, v[0].layer_norm(v[1], v[2], 1e-6)?, 30), &[a.clone(), g.clone(), row.clone()], eps),
    )?;
    let flat = fixed(&[5, 4], 31, 1.0);
    push(
        "batch_norm (train)",
        check_many(|t, v| weighted(t, v[0].batch_norm_train(v[1], v[2], 1e-5)?.0, 32), &[flat, g, row.clone()], eps),
    )?;
    push("repeat_interleave", finite_difference_check(|t, x| weighted(t, x.repeat_interleave(3)?.exp()?, 33), &a, eps))?;
    Ok(out)
}

/// Checks `loss` with respect to `extra` tensors and every entry of `store`.
fn check_with_store<F>(store: &ParamStore, extra: &[Tensor], mode: Mode, loss: F) -> Result<f64>
where
    F: for<'t> Fn(&Forward<'t>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut inputs = extra.to_vec();
    inputs.extend(store.tensors());
    let k = extra.len();
    check_many(
        |tape, vars| {
            let f = Forward::from_vars(tape, store, vars[k..].to_vec(), mode, JOINT_SEED);
            loss(&f, &vars[..k])
        },
        &inputs,
        DEFAULT_EPS,
    )
}

/// Transformer block with sequence 8, width 6 and 2 heads.
pub fn transformer_block_check() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut store = ParamStore::new();
    let cfg = AttentionConfig { d_model: 6, heads: 2, ff_dim: 12, seq_len: 8 };
    let block = TransformerBlock::new(&mut store, "block", cfg, &mut rng);
    let x = fixed(&[2, 8, 6], 41, 1.0);
    check_with_store(&store, &[x], Mode::Eval, |f, v| weighted(f.tape, block.forward(f, v[0])?, 42))
}

/// Three steps of an ON-LSTM cell with input 4, hidden 6, chunk 3.
pub fn onlstm_cell_check() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut store = ParamStore::new();
    let layer = OnLstmLayer::new(&mut store, "cell", 4, 6, 3, &mut rng)?;
    let x = fixed(&[2, 3, 4], 51, 1.0);
    check_with_store(&store, &[x], Mode::Eval, |f, v| {
        let states = layer.forward_sequence(f, v[0])?;
        let last = states.last().expect("3 steps");
        weighted(f.tape, last.hidden, 52)?.add(weighted(f.tape, last.cell, 53)?)
    })
}

/// Fusion MLP in train mode: batch-norm on batch statistics, fixed dropout.
pub fn fusion_mlp_check() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut store = ParamStore::new();
    let mlp = FusionMlp::new(&mut store, "fusion", 4, 3, 0.5, 1e-5, 0.1, &mut rng);
    let ft = fixed(&[6, 4], 61, 1.0);
    let fo = fixed(&[6, 4], 62, 1.0);
    check_with_store(&store, &[ft, fo], Mode::Train, |f, v| weighted(f.tape, mlp.forward(f, v[0], v[1])?, 63))
}

/// Each loss with respect to its student logits. Teachers enter as
/// constants, matching the stop-gradient in the losses.
pub fn loss_suite() -> Result<Vec<Named>> {
    let labels = [0usize, 2, 1, 2];
    let kd = Distillation::new(3.0);
    let lt = fixed(&[4, 3], 70, 2.0);
    let lo = fixed(&[4, 3], 71, 2.0);
    let lf = fixed(&[4, 3], 72, 2.0);
    let le = lt.zip_map(&lo, |a, b| 0.5 * (a + b));
    let eps = DEFAULT_EPS;
    Ok(vec![
        ("cross_entropy".into(), finite_difference_check(|_, x| cross_entropy(x, &labels), &lt, eps)?),
        (
            "distillation term".into(),
            finite_difference_check(|t, x| distillation_term(t.constant(lf.clone()), x, kd), &lt, eps)?,
        ),
        (
            "sub-network loss".into(),
            finite_difference_check(|t, x| sub_network_loss(x, t.constant(lf.clone()), &labels, kd), &lo, eps)?,
        ),
        (
            "fusion loss".into(),
            finite_difference_check(|t, x| fusion_loss(x, t.constant(le.clone()), &labels, kd), &lf, eps)?,
        ),
    ])
}

/// Configuration used by [`joint_check`].
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        num_classes: 3,
        seq_len: 4,
        input_dim: 6,
        heads: 2,
        ff_dim: 8,
        transformer_blocks: 1,
        lstm_hidden: 4,
        chunk_size: 2,
        head_width: 4,
        dropout: 0.5,
        bn_eps: 1e-5,
        bn_momentum: 0.1,
    }
}

/// Summed joint loss of the whole model (train mode, fixed dropout masks)
/// with respect to every parameter. Teacher logits are frozen at the base
/// point, which is what the stop-gradient differentiates.
pub fn joint_check() -> Result<f64> {
    let model = GestureModel::new(tiny_model_config(), 80)?;
    let x = fixed(&[5, 4, 6], 81, 1.0);
    let labels = [0usize, 1, 2, 1, 0];
    let kd = Distillation::new(3.0);
    let (teacher_f, teacher_e) = {
        let tape = Tape::new();
        let f = Forward::new(&tape, &model.store, Mode::Train, JOINT_SEED);
        let l = model.forward(&f, tape.constant(x.clone()))?;
        ((*l.fusion.value()).clone(), (*l.ensemble.value()).clone())
    };
    check_with_store(&model.store, &[], Mode::Train, |f, _| {
        let l = model.forward(f, f.constant(x.clone()))?;
        let tf = f.constant(teacher_f.clone());
        let te = f.constant(teacher_e.clone());
        sub_network_loss(l.transformer, tf, &labels, kd)?
            .add(sub_network_loss(l.onlstm, tf, &labels, kd)?)?
            .add(fusion_loss(l.fusion, te, &labels, kd)?)
    })
}

/// Everything above, as `(component, max relative error)` pairs.
pub fn reduced_suite() -> Result<Vec<Named>> {
    let mut out = primitive_suite()?;
    out.push(("transformer block".into(), transformer_block_check()?));
    out.push(("on-lstm cell (3 steps)".into(), onlstm_cell_check()?));
    out.push(("fusion mlp".into(), fusion_mlp_check()?));
    out.extend(loss_suite()?);
    out.push(("joint model loss".into(), joint_check()?));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(&[4], vec![0.3, -1.7, 2.2, 5.0]).unwrap();
        let err = finite_difference_check(|_, x| x.mul(x)?.sum(), &x, DEFAULT_EPS).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // detach() hides the second factor from the tape, so the analytic
        // gradient of x*x is off by a factor of two.
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let err = finite_difference_check(|_, x| x.mul(x.detach())?.sum(), &x, DEFAULT_EPS).unwrap();
        assert!(err > 0.4, "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
    }
}
