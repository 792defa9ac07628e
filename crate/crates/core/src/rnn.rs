//! Multi-layer LSTM with hand-written backpropagation through time.
//!
//! Cell equations (no peepholes):
//!
//! ```text
//! z  = W_x x + W_h h_prev + b          (4H, gate blocks ordered i, f, g, o)
//! i  = sigmoid(z_i)   f = sigmoid(z_f)   g = tanh(z_g)   o = sigmoid(z_o)
//! c  = f * c_prev + i * g
//! h  = o * tanh(c)
//! ```
//!
//! The gate order is part of the checkpoint format.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{gemm_acc, sigmoid, Matrix, Op, ParamSet, Vector};

/// Weights of one LSTM layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayerParams {
    /// `4H x D_in`
    pub w_input: Matrix,
    /// `4H x H`
    pub w_hidden: Matrix,
    /// `4H`
    pub bias: Vector,
}

impl LstmLayerParams {
    pub fn new(w_input: Matrix, w_hidden: Matrix, bias: Vector) -> Result<Self> {
        let four_h = w_hidden.rows();
        if !four_h.is_multiple_of(4) || w_hidden.cols() * 4 != four_h {
            return Err(dim_err!(
                "hidden weights must be 4H x H, got {}x{}",
                w_hidden.rows(),
                w_hidden.cols()
            ));
        }
        if w_input.rows() != four_h || bias.len() != four_h {
            return Err(dim_err!(
                "input weights {}x{} and bias {} inconsistent with hidden size {}",
                w_input.rows(),
                w_input.cols(),
                bias.len(),
                four_h / 4
            ));
        }
        Ok(Self {
            w_input,
            w_hidden,
            bias,
        })
    }

    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        Self {
            w_input: Matrix::zeros(4 * hidden_size, input_size),
            w_hidden: Matrix::zeros(4 * hidden_size, hidden_size),
            bias: Vector::zeros(4 * hidden_size),
        }
    }

    /// Uniform weights in `[-1/sqrt(H), 1/sqrt(H)]`, forget-gate bias 1, other biases 0.
    pub fn init<R: Rng + ?Sized>(input_size: usize, hidden_size: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input_size, hidden_size);
        let k = 1.0 / (hidden_size as f64).sqrt();
        for w in p.w_input.as_mut_slice() {
            *w = rng.random_range(-k..=k);
        }
        for w in p.w_hidden.as_mut_slice() {
            *w = rng.random_range(-k..=k);
        }
        p.bias[hidden_size..2 * hidden_size].fill(1.0);
        p
    }

    pub fn input_size(&self) -> usize {
        self.w_input.cols()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hidden.cols()
    }
}

impl ParamSet for LstmLayerParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        self.w_input.visit(f);
        self.w_hidden.visit(f);
        self.bias.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.w_input.visit_mut(f);
        self.w_hidden.visit_mut(f);
        self.bias.visit_mut(f);
    }
}

/// Recurrent state of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vector,
    pub c: Vector,
}

impl LstmState {
    pub fn zeros(hidden_size: usize) -> Self {
        Self {
            h: Vector::zeros(hidden_size),
            c: Vector::zeros(hidden_size),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.h.len()
    }
}

/// Non-empty stack of layers; layer `l > 0` reads layer `l - 1`'s hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmStack {
    layers: Vec<LstmLayerParams>,
}

impl LstmStack {
    pub fn new(layers: Vec<LstmLayerParams>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Argument("an LSTM stack needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[1].input_size() != pair[0].hidden_size() {
                return Err(dim_err!(
                    "layer {} reads {} inputs but layer {l} emits {}",
                    l + 1,
                    pair[1].input_size(),
                    pair[0].hidden_size()
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn init<R: Rng + ?Sized>(
        input_size: usize,
        hidden_size: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|l| {
                let d = if l == 0 { input_size } else { hidden_size };
                LstmLayerParams::init(d, hidden_size, rng)
            })
            .collect();
        Self::new(layers)
    }

    pub fn zeros(input_size: usize, hidden_size: usize, num_layers: usize) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|l| {
                let d = if l == 0 { input_size } else { hidden_size };
                LstmLayerParams::zeros(d, hidden_size)
            })
            .collect();
        Self::new(layers)
    }

    /// Same shapes, all zeros (a gradient buffer).
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LstmLayerParams::zeros(l.input_size(), l.hidden_size()))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[LstmLayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LstmLayerParams] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size()
    }

    /// Hidden size of the top layer.
    pub fn hidden_size(&self) -> usize {
        self.layers[self.layers.len() - 1].hidden_size()
    }

    pub fn zero_states(&self) -> Vec<LstmState> {
        self.layers
            .iter()
            .map(|l| LstmState::zeros(l.hidden_size()))
            .collect()
    }

    fn check_states(&self, states: &[LstmState], what: &str) -> Result<()> {
        if states.len() != self.layers.len() {
            return Err(dim_err!(
                "{what}: {} states for {} layers",
                states.len(),
                self.layers.len()
            ));
        }
        for (l, (s, p)) in states.iter().zip(&self.layers).enumerate() {
            if s.h.len() != p.hidden_size() || s.c.len() != p.hidden_size() {
                return Err(dim_err!(
                    "{what}: layer {l} state has sizes ({}, {}), expected {}",
                    s.h.len(),
                    s.c.len(),
                    p.hidden_size()
                ));
            }
        }
        Ok(())
    }
}

impl ParamSet for LstmStack {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        self.layers.iter().for_each(|l| l.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

/// One cell update. `gates` receives the activated (i, f, g, o) blocks.
#[inline]
#[allow(clippy::too_many_arguments)]
fn cell_forward(
    p: &LstmLayerParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    gates: &mut [f64],
    c: &mut [f64],
    tanh_c: &mut [f64],
    h: &mut [f64],
) {
    let hs = p.hidden_size();
    gates.copy_from_slice(&p.bias);
    p.w_input.mul_vec_acc(x, gates);
    p.w_hidden.mul_vec_acc(h_prev, gates);
    let (ifg, o) = gates.split_at_mut(3 * hs);
    let (i_f, g) = ifg.split_at_mut(2 * hs);
    let (i, f) = i_f.split_at_mut(hs);
    for k in 0..hs {
        i[k] = sigmoid(i[k]);
        f[k] = sigmoid(f[k]);
        g[k] = g[k].tanh();
        o[k] = sigmoid(o[k]);
        c[k] = f[k] * c_prev[k] + i[k] * g[k];
        tanh_c[k] = c[k].tanh();
        h[k] = o[k] * tanh_c[k];
    }
}

/// Advances one layer by a single time step.
pub fn lstm_step(params: &LstmLayerParams, x: &[f64], prev: &LstmState) -> Result<LstmState> {
    let hs = params.hidden_size();
    if x.len() != params.input_size() {
        return Err(dim_err!(
            "lstm_step input has length {}, layer expects {}",
            x.len(),
            params.input_size()
        ));
    }
    if prev.h.len() != hs || prev.c.len() != hs {
        return Err(dim_err!(
            "lstm_step state sizes ({}, {}) for hidden size {hs}",
            prev.h.len(),
            prev.c.len()
        ));
    }
    let mut gates = vec![0.0; 4 * hs];
    let mut next = LstmState::zeros(hs);
    let mut tanh_c = vec![0.0; hs];
    cell_forward(
        params,
        x,
        &prev.h,
        &prev.c,
        &mut gates,
        &mut next.c,
        &mut tanh_c,
        &mut next.h,
    );
    Ok(next)
}

#[derive(Clone, Debug)]
struct LayerTape {
    input: Matrix,
    h_prev: Matrix,
    c_prev: Matrix,
    gates: Matrix,
    tanh_c: Matrix,
}

/// Activations recorded by [`lstm_forward`], consumed by [`lstm_backward`].
#[derive(Clone, Debug)]
pub struct LstmTape {
    layers: Vec<LayerTape>,
}

impl LstmTape {
    pub fn steps(&self) -> usize {
        self.layers[0].input.rows()
    }
}

/// Result of running a stack over a sequence.
#[derive(Clone, Debug)]
pub struct LstmOutput {
    /// `T x H` top-layer hidden states, one row per step.
    pub top_hidden: Matrix,
    /// Final `(h, c)` per layer, bottom first.
    pub final_states: Vec<LstmState>,
    pub tape: LstmTape,
}

/// Runs the stack over `inputs` (`T x D`, one row per step).
///
/// Layers are processed one whole sequence at a time; this is the same
/// arithmetic as time-major stepping.
pub fn lstm_forward(stack: &LstmStack, inputs: &Matrix, init: &[LstmState]) -> Result<LstmOutput> {
    if inputs.cols() != stack.input_size() {
        return Err(dim_err!(
            "sequence has {} features, stack expects {}",
            inputs.cols(),
            stack.input_size()
        ));
    }
    stack.check_states(init, "lstm_forward initial states")?;
    let steps = inputs.rows();
    let mut layer_input = inputs.clone();
    let mut tapes = Vec::with_capacity(stack.num_layers());
    let mut finals = Vec::with_capacity(stack.num_layers());
    for (p, s0) in stack.layers.iter().zip(init) {
        let hs = p.hidden_size();
        let mut h_prev = Matrix::zeros(steps, hs);
        let mut c_prev = Matrix::zeros(steps, hs);
        let mut gates = Matrix::zeros(steps, 4 * hs);
        let mut tanh_c = Matrix::zeros(steps, hs);
        let mut out = Matrix::zeros(steps, hs);
        let mut h = s0.h.to_vec();
        let mut c = s0.c.to_vec();
        let mut c_next = vec![0.0; hs];
        for t in 0..steps {
            h_prev.row_mut(t).copy_from_slice(&h);
            c_prev.row_mut(t).copy_from_slice(&c);
            cell_forward(
                p,
                layer_input.row(t),
                &h,
                &c,
                gates.row_mut(t),
                &mut c_next,
                tanh_c.row_mut(t),
                out.row_mut(t),
            );
            std::mem::swap(&mut c, &mut c_next);
            h.copy_from_slice(out.row(t));
        }
        finals.push(LstmState {
            h: Vector::new(h)?,
            c: Vector::new(c)?,
        });
        let input = std::mem::replace(&mut layer_input, out);
        tapes.push(LayerTape {
            input,
            h_prev,
            c_prev,
            gates,
            tanh_c,
        });
    }
    Ok(LstmOutput {
        top_hidden: layer_input,
        final_states: finals,
        tape: LstmTape { layers: tapes },
    })
}

/// Gradients produced by [`lstm_backward`].
#[derive(Clone, Debug)]
pub struct LstmGradients {
    pub params: LstmStack,
    /// `T x D_in`
    pub inputs: Matrix,
    pub init_states: Vec<LstmState>,
}

/// Exact BPTT for a loss whose partials w.r.t. the top hidden states and the
/// final per-layer states are given.
pub fn lstm_backward(
    stack: &LstmStack,
    tape: &LstmTape,
    grad_top_hidden: &Matrix,
    grad_final: &[LstmState],
) -> Result<LstmGradients> {
    let mut params = stack.zeros_like();
    let (inputs, init_states) =
        lstm_backward_acc(stack, tape, grad_top_hidden, grad_final, &mut params)?;
    Ok(LstmGradients {
        params,
        inputs,
        init_states,
    })
}

/// Like [`lstm_backward`] but adds parameter gradients into `grads`.
/// Returns the input and initial-state gradients.
pub fn lstm_backward_acc(
    stack: &LstmStack,
    tape: &LstmTape,
    grad_top_hidden: &Matrix,
    grad_final: &[LstmState],
    grads: &mut LstmStack,
) -> Result<(Matrix, Vec<LstmState>)> {
    if tape.layers.len() != stack.num_layers() || grads.num_layers() != stack.num_layers() {
        return Err(Error::Contract(format!(
            "tape has {} layers, gradient buffer {}, stack {}",
            tape.layers.len(),
            grads.num_layers(),
            stack.num_layers()
        )));
    }
    let steps = tape.steps();
    if grad_top_hidden.shape() != (steps, stack.hidden_size()) {
        return Err(Error::Contract(format!(
            "top-hidden gradient is {}x{}, tape is {}x{}",
            grad_top_hidden.rows(),
            grad_top_hidden.cols(),
            steps,
            stack.hidden_size()
        )));
    }
    stack
        .check_states(grad_final, "lstm_backward final-state gradients")
        .map_err(|e| Error::Contract(e.to_string()))?;

    let mut d_out = grad_top_hidden.clone();
    let mut init_grads = vec![None; stack.num_layers()];
    for l in (0..stack.num_layers()).rev() {
        let p = &stack.layers[l];
        let lt = &tape.layers[l];
        let g = &mut grads.layers[l];
        let hs = p.hidden_size();
        let mut dz = Matrix::zeros(steps, 4 * hs);
        let mut dh_next = grad_final[l].h.to_vec();
        let mut dc_next = grad_final[l].c.to_vec();
        for t in (0..steps).rev() {
            let gates = lt.gates.row(t);
            let (i, rest) = gates.split_at(hs);
            let (f, rest) = rest.split_at(hs);
            let (gg, o) = rest.split_at(hs);
            let tc = lt.tanh_c.row(t);
            let cp = lt.c_prev.row(t);
            let dout = d_out.row(t);
            let dzt = dz.row_mut(t);
            for k in 0..hs {
                let dh = dout[k] + dh_next[k];
                let d_o = dh * tc[k];
                let dc = dc_next[k] + dh * o[k] * (1.0 - tc[k] * tc[k]);
                dzt[k] = dc * gg[k] * i[k] * (1.0 - i[k]);
                dzt[hs + k] = dc * cp[k] * f[k] * (1.0 - f[k]);
                dzt[2 * hs + k] = dc * i[k] * (1.0 - gg[k] * gg[k]);
                dzt[3 * hs + k] = d_o * o[k] * (1.0 - o[k]);
                dc_next[k] = dc * f[k];
            }
            dh_next.fill(0.0);
            p.w_hidden.mul_vec_t_acc(dz.row(t), &mut dh_next);
        }
        gemm_acc(&dz, Op::T, &lt.input, Op::N, &mut g.w_input)?;
        gemm_acc(&dz, Op::T, &lt.h_prev, Op::N, &mut g.w_hidden)?;
        for row in dz.row_iter() {
            crate::tensor::add_assign(&mut g.bias, row);
        }
        let mut dx = Matrix::zeros(steps, p.input_size());
        gemm_acc(&dz, Op::N, &p.w_input, Op::N, &mut dx)?;
        init_grads[l] = Some(LstmState {
            h: Vector::new(dh_next)?,
            c: Vector::new(dc_next)?,
        });
        d_out = dx;
    }
    Ok((d_out, init_grads.into_iter().map(Option::unwrap).collect()))
}
