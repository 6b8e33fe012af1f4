//! Peephole LSTM with full peephole matrices, plus uni- and bidirectional
//! sequence drivers.
//!
//! One step computes
//!
//! ```text
//! i = σ(W_i v + U_i h + H_i c_prev + b_i)
//! f = σ(W_f v + U_f h + H_f c_prev + b_f)
//! c = f ⊗ c_prev + i ⊗ tanh(W_c v + U_c h + b_c)
//! o = σ(W_o v + U_o h + H_o c + b_o)        // peeks at the new cell
//! h = o ⊗ tanh(c)
//! ```

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::Parameterized;
use crate::tensor::Tensor;

/// The fifteen parameter arrays of one LSTM direction.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_i: Tensor,
    pub w_f: Tensor,
    pub w_c: Tensor,
    pub w_o: Tensor,
    pub u_i: Tensor,
    pub u_f: Tensor,
    pub u_c: Tensor,
    pub u_o: Tensor,
    pub h_i: Tensor,
    pub h_f: Tensor,
    pub h_o: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_c: Tensor,
    pub b_o: Tensor,
}

pub const LSTM_PARAM_NAMES: [&str; 15] = [
    "w_i", "w_f", "w_c", "w_o", "u_i", "u_f", "u_c", "u_o", "h_i", "h_f", "h_o", "b_i", "b_f",
    "b_c", "b_o",
];

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let w = || Tensor::zeros(&[hidden_dim, input_dim]);
        let u = || Tensor::zeros(&[hidden_dim, hidden_dim]);
        let b = || Tensor::zeros(&[hidden_dim]);
        LstmParams {
            w_i: w(),
            w_f: w(),
            w_c: w(),
            w_o: w(),
            u_i: u(),
            u_f: u(),
            u_c: u(),
            u_o: u(),
            h_i: u(),
            h_f: u(),
            h_o: u(),
            b_i: b(),
            b_f: b(),
            b_c: b(),
            b_o: b(),
        }
    }

    /// Glorot-uniform projections, zero peepholes and biases.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let mut p = LstmParams::zeros(input_dim, hidden_dim);
        for w in [&mut p.w_i, &mut p.w_f, &mut p.w_c, &mut p.w_o] {
            *w = Tensor::glorot(&[hidden_dim, input_dim], input_dim, hidden_dim, rng);
        }
        for u in [&mut p.u_i, &mut p.u_f, &mut p.u_c, &mut p.u_o] {
            *u = Tensor::glorot(&[hidden_dim, hidden_dim], hidden_dim, hidden_dim, rng);
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w_i.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_i.shape()[0]
    }

    /// Checks that all fifteen arrays agree on one `(d_in, d_h)` pair.
    pub fn validate(&self) -> Result<()> {
        let (d_h, d_in) = (self.hidden_dim(), self.input_dim());
        for (name, t) in self.named_params() {
            let expected: Vec<usize> = match name.as_bytes()[0] {
                b'w' => vec![d_h, d_in],
                b'u' | b'h' => vec![d_h, d_h],
                _ => vec![d_h],
            };
            if t.shape() != expected.as_slice() {
                return Err(shape_err!("lstm {name}: shape {:?}, expected {expected:?}", t.shape()));
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph) -> LstmVars {
        LstmVars::from_bound(&self.bind_all(g), self.input_dim(), self.hidden_dim())
    }
}

impl Parameterized for LstmParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let all = [
            &self.w_i, &self.w_f, &self.w_c, &self.w_o, &self.u_i, &self.u_f, &self.u_c,
            &self.u_o, &self.h_i, &self.h_f, &self.h_o, &self.b_i, &self.b_f, &self.b_c,
            &self.b_o,
        ];
        LSTM_PARAM_NAMES.iter().map(|n| n.to_string()).zip(all).collect()
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let all = [
            &mut self.w_i, &mut self.w_f, &mut self.w_c, &mut self.w_o, &mut self.u_i,
            &mut self.u_f, &mut self.u_c, &mut self.u_o, &mut self.h_i, &mut self.h_f,
            &mut self.h_o, &mut self.b_i, &mut self.b_f, &mut self.b_c, &mut self.b_o,
        ];
        LSTM_PARAM_NAMES.iter().map(|n| n.to_string()).zip(all).collect()
    }
}

/// [`LstmParams`] placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    vars: [Var; 15],
    input_dim: usize,
    hidden_dim: usize,
}

/// `(h, c)` as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub h: Var,
    pub c: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub i: Var,
    pub f: Var,
    pub o: Var,
}

impl LstmVars {
    /// Wraps 15 vars bound in [`Parameterized`] order.
    pub fn from_bound(vars: &[Var], input_dim: usize, hidden_dim: usize) -> Self {
        LstmVars {
            vars: vars.try_into().expect("lstm binds 15 arrays"),
            input_dim,
            hidden_dim,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn zero_state(&self, g: &mut Graph) -> StateVars {
        let h = g.constant(Tensor::zeros(&[self.hidden_dim]));
        let c = g.constant(Tensor::zeros(&[self.hidden_dim]));
        StateVars { h, c }
    }

    pub fn step(&self, g: &mut Graph, x: Var, prev: StateVars) -> Result<(StateVars, GateVars)> {
        if g.shape(x) != [self.input_dim] {
            return Err(shape_err!(
                "lstm input {:?}, expected [{}]",
                g.shape(x),
                self.input_dim
            ));
        }
        let [w_i, w_f, w_c, w_o, u_i, u_f, u_c, u_o, h_i, h_f, h_o, b_i, b_f, b_c, b_o] = self.vars;

        let gate = |g: &mut Graph, w: Var, u: Var, peep: Option<(Var, Var)>, b: Var| -> Result<Var> {
            let wx = g.matvec(w, x)?;
            let uh = g.matvec(u, prev.h)?;
            let mut acc = g.add(wx, uh)?;
            if let Some((hm, cell)) = peep {
                let hc = g.matvec(hm, cell)?;
                acc = g.add(acc, hc)?;
            }
            g.add(acc, b)
        };

        let i_pre = gate(g, w_i, u_i, Some((h_i, prev.c)), b_i)?;
        let i = g.sigmoid(i_pre)?;
        let f_pre = gate(g, w_f, u_f, Some((h_f, prev.c)), b_f)?;
        let f = g.sigmoid(f_pre)?;
        let cand_pre = gate(g, w_c, u_c, None, b_c)?;
        let cand = g.tanh(cand_pre)?;
        let keep = g.hadamard(f, prev.c)?;
        let write = g.hadamard(i, cand)?;
        let c = g.add(keep, write)?;
        let o_pre = gate(g, w_o, u_o, Some((h_o, c)), b_o)?;
        let o = g.sigmoid(o_pre)?;
        let tc = g.tanh(c)?;
        let h = g.hadamard(o, tc)?;
        Ok((StateVars { h, c }, GateVars { i, f, o }))
    }

    /// Left-to-right fold; returns every per-step state.
    pub fn run(&self, g: &mut Graph, inputs: &[Var], init: StateVars) -> Result<Vec<StateVars>> {
        if inputs.is_empty() {
            return Err(Error::Argument("lstm_run: empty input sequence".into()));
        }
        let mut state = init;
        let mut out = Vec::with_capacity(inputs.len());
        for &x in inputs {
            state = self.step(g, x, state)?.0;
            out.push(state);
        }
        Ok(out)
    }
}

/// Runs `fwd` over the inputs and `bwd` over them reversed; step `t` yields
/// `concat(h_fwd[t], h_bwd[t])` where `h_bwd[t]` has seen `inputs[t..]`.
pub fn bilstm_vars(g: &mut Graph, fwd: &LstmVars, bwd: &LstmVars, inputs: &[Var]) -> Result<Vec<Var>> {
    if inputs.is_empty() {
        return Err(Error::Argument("bilstm_run: empty input sequence".into()));
    }
    let init_f = fwd.zero_state(g);
    let forward = fwd.run(g, inputs, init_f)?;
    let reversed: Vec<Var> = inputs.iter().rev().copied().collect();
    let init_b = bwd.zero_state(g);
    let mut backward = bwd.run(g, &reversed, init_b)?;
    backward.reverse();
    forward
        .iter()
        .zip(&backward)
        .map(|(f, b)| g.concat(f.h, b.h, 0))
        .collect()
}

/// Hidden and cell vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(hidden_dim: usize) -> Self {
        LstmState {
            h: Tensor::zeros(&[hidden_dim]),
            c: Tensor::zeros(&[hidden_dim]),
        }
    }
}

/// Gate values of one step; every entry lies in (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct GateActivations {
    pub i: Tensor,
    pub f: Tensor,
    pub o: Tensor,
}

pub fn lstm_cell_step(
    params: &LstmParams,
    input: &Tensor,
    prev: &LstmState,
) -> Result<(LstmState, GateActivations)> {
    let mut g = Graph::inference();
    let p = params.bind(&mut g);
    let x = g.constant(input.clone());
    let h = g.constant(prev.h.clone());
    let c = g.constant(prev.c.clone());
    let (s, gates) = p.step(&mut g, x, StateVars { h, c })?;
    Ok((
        LstmState {
            h: g.value(s.h).clone(),
            c: g.value(s.c).clone(),
        },
        GateActivations {
            i: g.value(gates.i).clone(),
            f: g.value(gates.f).clone(),
            o: g.value(gates.o).clone(),
        },
    ))
}

pub fn lstm_run(params: &LstmParams, inputs: &[Tensor], init: &LstmState) -> Result<Vec<LstmState>> {
    let mut g = Graph::inference();
    let p = params.bind(&mut g);
    let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let h = g.constant(init.h.clone());
    let c = g.constant(init.c.clone());
    let states = p.run(&mut g, &xs, StateVars { h, c })?;
    Ok(states
        .into_iter()
        .map(|s| LstmState {
            h: g.value(s.h).clone(),
            c: g.value(s.c).clone(),
        })
        .collect())
}

/// Per-step outputs of dimension `2·d_h`.
pub fn bilstm_run(fwd: &LstmParams, bwd: &LstmParams, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut g = Graph::inference();
    let f = fwd.bind(&mut g);
    let b = bwd.bind(&mut g);
    let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let outs = bilstm_vars(&mut g, &f, &b, &xs)?;
    Ok(outs.into_iter().map(|v| g.value(v).clone()).collect())
}
