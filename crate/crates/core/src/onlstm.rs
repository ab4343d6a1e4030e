//! Ordered-neuron LSTM layers and the ON-LSTM sub-network.
//!
//! Each layer carries the four standard LSTM gates plus master forget and
//! master input gates computed at a coarser "chunk" resolution with cumax.
//! Master gates impose an ordering on the hidden units: high-ranked chunks
//! keep long-term information, low-ranked chunks are overwritten.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::nn::{init_uniform, ClassifierHead, Forward, HeadOutput, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct OnLstmState<'t> {
    pub hidden: Var<'t>,
    pub cell: Var<'t>,
}

/// Intermediate gate values of one step, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct StepGates<'t> {
    /// Master forget gate before chunk expansion, `[B, M]`.
    pub master_forget: Var<'t>,
    /// Master input gate before chunk expansion, `[B, M]`.
    pub master_input: Var<'t>,
    pub overlap: Var<'t>,
    pub forget: Var<'t>,
    pub input: Var<'t>,
}

/// One ON-LSTM layer. Gate pre-activations are laid out as
/// `[forget | input | output | candidate | master_forget | master_input]`.
#[derive(Clone, Debug)]
pub struct OnLstmLayer {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
    pub chunk_size: usize,
}

impl OnLstmLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        chunk_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if chunk_size == 0 || hidden % chunk_size != 0 {
            return Err(Error::InvalidArgument(format!(
                "chunk size {chunk_size} does not divide hidden size {hidden}"
            )));
        }
        let g = Self::gate_width(hidden, chunk_size);
        Ok(Self {
            w_input: store.add(
                format!("{prefix}.w_input"),
                ParamKind::Weight,
                init_uniform(&[input_dim, g], input_dim, rng),
            ),
            w_hidden: store.add(
                format!("{prefix}.w_hidden"),
                ParamKind::Weight,
                init_uniform(&[hidden, g], hidden, rng),
            ),
            bias: store.add(format!("{prefix}.bias"), ParamKind::Bias, Tensor::zeros(&[g])),
            input_dim,
            hidden,
            chunk_size,
        })
    }

    fn gate_width(hidden: usize, chunk: usize) -> usize {
        4 * hidden + 2 * (hidden / chunk)
    }

    pub fn master_dim(&self) -> usize {
        self.hidden / self.chunk_size
    }

    pub fn zero_state<'t>(&self, f: &Forward<'t>, batch: usize) -> OnLstmState<'t> {
        let z = f.constant(Tensor::zeros(&[batch, self.hidden]));
        OnLstmState { hidden: z, cell: z }
    }

    /// One step from raw input `x_t: [B, input_dim]`.
    pub fn step<'t>(
        &self,
        f: &Forward<'t>,
        x_t: Var<'t>,
        state: OnLstmState<'t>,
    ) -> Result<(OnLstmState<'t>, StepGates<'t>)> {
        let shape = x_t.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(shape_err(
                "onlstm_step",
                format!("input {shape:?}, expected [B, {}]", self.input_dim),
            ));
        }
        let projected = x_t.matmul(f.var(self.w_input))?;
        self.step_projected(f, projected, state)
    }

    /// One step from the already projected input `x_t · W_input`.
    fn step_projected<'t>(
        &self,
        f: &Forward<'t>,
        projected: Var<'t>,
        state: OnLstmState<'t>,
    ) -> Result<(OnLstmState<'t>, StepGates<'t>)> {
        let h = self.hidden;
        let m = self.master_dim();
        if state.hidden.shape().get(1) != Some(&h) || state.cell.shape().get(1) != Some(&h) {
            return Err(shape_err(
                "onlstm_step",
                format!("state {:?}, expected [B, {h}]", state.hidden.shape()),
            ));
        }
        let gates = projected
            .add(state.hidden.matmul(f.var(self.w_hidden))?)?
            .add(f.var(self.bias))?;
        let forget = gates.slice(1, 0, h)?.sigmoid()?;
        let input = gates.slice(1, h, h)?.sigmoid()?;
        let output = gates.slice(1, 2 * h, h)?.sigmoid()?;
        let candidate = gates.slice(1, 3 * h, h)?.tanh()?;
        let master_forget = gates.slice(1, 4 * h, m)?.cumax(1)?;
        let master_input = gates.slice(1, 4 * h + m, m)?.cumax(1)?.rsub_scalar(1.0)?;

        let mf = master_forget.repeat_interleave(self.chunk_size)?;
        let mi = master_input.repeat_interleave(self.chunk_size)?;
        let overlap = mf.mul(mi)?;
        let eff_forget = forget.mul(overlap)?.add(mf.sub(overlap)?)?;
        let eff_input = input.mul(overlap)?.add(mi.sub(overlap)?)?;
        let cell = eff_forget.mul(state.cell)?.add(eff_input.mul(candidate)?)?;
        let hidden = output.mul(cell.tanh()?)?;
        Ok((
            OnLstmState { hidden, cell },
            StepGates {
                master_forget,
                master_input,
                overlap,
                forget: eff_forget,
                input: eff_input,
            },
        ))
    }

    /// Runs the layer over `[B, S, input_dim]` from a zero state and returns
    /// the state after every step.
    pub fn forward_sequence<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<Vec<OnLstmState<'t>>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.input_dim {
            return Err(shape_err(
                "onlstm",
                format!("input {shape:?}, expected [B, S, {}]", self.input_dim),
            ));
        }
        let (b, s) = (shape[0], shape[1]);
        let g = Self::gate_width(self.hidden, self.chunk_size);
        let projected = x
            .reshape(&[b * s, self.input_dim])?
            .matmul(f.var(self.w_input))?
            .reshape(&[b, s * g])?;
        let mut state = self.zero_state(f, b);
        let mut states = Vec::with_capacity(s);
        for t in 0..s {
            let p_t = projected.slice(1, t * g, g)?;
            state = self.step_projected(f, p_t, state)?.0;
            states.push(state);
        }
        Ok(states)
    }
}

/// Two stacked ON-LSTM layers (full sequence, then last state) and the
/// classifier head.
#[derive(Clone, Debug)]
pub struct OnLstmNet {
    pub layer1: OnLstmLayer,
    pub layer2: OnLstmLayer,
    pub head: ClassifierHead,
}

impl OnLstmNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        chunk_size: usize,
        head_width: usize,
        classes: usize,
        dropout: f64,
        bn_eps: f64,
        bn_momentum: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let layer1 = OnLstmLayer::new(store, &format!("{prefix}.layer1"), input_dim, hidden, chunk_size, rng)?;
        let layer2 = OnLstmLayer::new(store, &format!("{prefix}.layer2"), hidden, hidden, chunk_size, rng)?;
        let head = ClassifierHead::new(
            store,
            &format!("{prefix}.head"),
            hidden,
            head_width,
            classes,
            dropout,
            bn_eps,
            bn_momentum,
            rng,
        );
        Ok(Self { layer1, layer2, head })
    }

    /// Layer-1 hidden sequence `[B, S, H]`.
    pub fn first_layer_sequence<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let states = self.layer1.forward_sequence(f, x)?;
        let (b, h) = (x.shape()[0], self.layer1.hidden);
        let steps = states
            .iter()
            .map(|s| s.hidden.reshape(&[b, 1, h]))
            .collect::<Result<Vec<_>>>()?;
        Var::concat(&steps, 1)
    }

    pub fn forward<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<HeadOutput<'t>> {
        let seq = self.first_layer_sequence(f, x)?;
        let last = *self
            .layer2
            .forward_sequence(f, seq)?
            .last()
            .ok_or_else(|| shape_err("onlstm", "empty sequence"))?;
        self.head.forward(f, last.hidden)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(input: usize, hidden: usize, chunk: usize, seed: u64) -> (ParamStore, OnLstmLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = OnLstmLayer::new(&mut store, "l", input, hidden, chunk, &mut rng).unwrap();
        (store, l)
    }

    #[test]
    fn full_scale_layer_counts() {
        let (s1, _) = layer(66, 660, 33, 0);
        assert_eq!(s1.count(), 1_948_360);
        let (s2, _) = layer(660, 660, 33, 0);
        assert_eq!(s2.count(), 3_540_280);
    }

    #[test]
    fn chunk_must_divide_hidden() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(OnLstmLayer::new(&mut store, "l", 4, 6, 4, &mut rng).is_err());
    }

    #[test]
    fn zero_everything_gives_zero_state() {
        let (mut store, l) = layer(3, 4, 2, 1);
        for id in [l.w_input, l.w_hidden] {
            let shape = store.get(id).tensor.shape().to_vec();
            *store.tensor_mut(id) = Tensor::zeros(&shape);
        }
        let tape = Tape::new();
        let f = Forward::new(&tape, &store, Mode::Eval, 0);
        let (s, _) = l
            .step(&f, tape.constant(Tensor::zeros(&[2, 3])), l.zero_state(&f, 2))
            .unwrap();
        assert!(s.cell.value().data().iter().all(|&v| v == 0.0));
        assert!(s.hidden.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_ranges_and_master_monotonicity() {
        let (store, l) = layer(4, 12, 3, 2);
        let tape = Tape::new();
        let f = Forward::new(&tape, &store, Mode::Eval, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut state = l.zero_state(&f, 5);
        for _ in 0..4 {
            let x = tape.constant(Tensor::uniform(&[5, 4], 3.0, &mut rng));
            let (next, g) = l.step(&f, x, state).unwrap();
            for v in [g.overlap, g.forget, g.input] {
                assert!(v.value().data().iter().all(|x| (-1e-12..=1.0 + 1e-12).contains(x)));
            }
            for row in g.master_forget.value().data().chunks(4) {
                assert!(row.windows(2).all(|w| w[0] <= w[1] + 1e-15));
                assert!((row[3] - 1.0).abs() < 1e-12);
            }
            for row in g.master_input.value().data().chunks(4) {
                assert!(row.windows(2).all(|w| w[0] + 1e-15 >= w[1]));
            }
            assert!(next.hidden.value().data().iter().all(|h| h.abs() < 1.0));
            state = next;
        }
    }

    /// Scalar re-derivation of one step at hidden 2, chunk 1 (master dim 2).
    #[test]
    fn single_step_matches_scalar_oracle() {
        let (store, l) = layer(3, 2, 1, 5);
        let x = [0.4, -1.2, 0.7];
        let h0 = [0.3, -0.6];
        let c0 = [0.5, -0.25];
        let tape = Tape::new();
        let f = Forward::new(&tape, &store, Mode::Eval, 0);
        let state = OnLstmState {
            hidden: tape.constant(Tensor::new(&[1, 2], h0.to_vec()).unwrap()),
            cell: tape.constant(Tensor::new(&[1, 2], c0.to_vec()).unwrap()),
        };
        let (next, _) = l
            .step(&f, tape.constant(Tensor::new(&[1, 3], x.to_vec()).unwrap()), state)
            .unwrap();

        let wi = &store.get(l.w_input).tensor;
        let wh = &store.get(l.w_hidden).tensor;
        let g = |col: usize| {
            (0..3).map(|r| x[r] * wi.get(&[r, col])).sum::<f64>()
                + (0..2).map(|r| h0[r] * wh.get(&[r, col])).sum::<f64>()
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        // master pre-activations occupy columns 8..10 and 10..12
        let sm = |a: f64, b: f64| {
            let (ea, eb) = (a.exp(), b.exp());
            (ea / (ea + eb), 1.0)
        };
        let (mf0, mf1) = sm(g(8), g(9));
        let (ci0, _) = sm(g(10), g(11));
        let mi = [1.0 - ci0, 0.0];
        let mf = [mf0, mf1];
        for j in 0..2 {
            let fg = sig(g(j));
            let ig = sig(g(2 + j));
            let og = sig(g(4 + j));
            let cand = g(6 + j).tanh();
            let w = mf[j] * mi[j];
            let fhat = fg * w + (mf[j] - w);
            let ihat = ig * w + (mi[j] - w);
            let c = fhat * c0[j] + ihat * cand;
            let h = og * c.tanh();
            assert!((next.cell.value().data()[j] - c).abs() < 1e-14);
            assert!((next.hidden.value().data()[j] - h).abs() < 1e-14);
        }
    }

    #[test]
    fn single_master_chunk_keeps_cell() {
        // chunk == hidden: master forget is 1 and master input is 0, so c' = c.
        let (store, l) = layer(2, 2, 2, 8);
        let tape = Tape::new();
        let f = Forward::new(&tape, &store, Mode::Eval, 0);
        let c0 = Tensor::new(&[1, 2], vec![0.7, -0.4]).unwrap();
        let state = OnLstmState {
            hidden: tape.constant(Tensor::zeros(&[1, 2])),
            cell: tape.constant(c0.clone()),
        };
        let (next, _) = l
            .step(&f, tape.constant(Tensor::new(&[1, 2], vec![1.0, -2.0]).unwrap()), state)
            .unwrap();
        assert!(next.cell.value().max_abs_diff(&c0) < 1e-15);
    }

    #[test]
    fn sequence_matches_stepwise() {
        let (store, l) = layer(3, 6, 3, 11);
        let tape = Tape::new();
        let f = Forward::new(&tape, &store, Mode::Eval, 0);
        let x = Tensor::uniform(&[2, 5, 3], 1.5, &mut ChaCha8Rng::seed_from_u64(12));
        let xv = tape.constant(x.clone());
        let seq = l.forward_sequence(&f, xv).unwrap();
        let mut state = l.zero_state(&f, 2);
        for (t, s) in seq.iter().enumerate() {
            let x_t = xv.slice(1, t, 1).unwrap().reshape(&[2, 3]).unwrap();
            state = l.step(&f, x_t, state).unwrap().0;
            assert!(state.hidden.value().max_abs_diff(&s.hidden.value()) < 1e-14);
            assert!(state.cell.value().max_abs_diff(&s.cell.value()) < 1e-14);
            // |c_t| <= t + |c_0| with c_0 = 0
            assert!(s.cell.value().data().iter().all(|c| c.abs() <= (t + 1) as f64));
        }
    }
}
