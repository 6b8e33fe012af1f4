//! Regional attention: a softmax confidence map over the spatial locations of
//! a view's middle representation, keyed by the first-level LSTM output, and
//! the confidence-weighted part feature it produces.
//!
//! ```text
//! s_i     = (W_hᵀ o)·(W_rᵀ m_i) / √d_k
//! conf    = softmax(s)
//! attPart = Σ_i conf_i · W_gᵀ m_i
//! ```

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::params::Parameterized;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct RauParams {
    /// `C_o × d_k`
    pub w_h: Tensor,
    /// `C_m × d_k`
    pub w_r: Tensor,
    /// `C_m × d_k`
    pub w_g: Tensor,
}

impl RauParams {
    pub fn init<R: Rng + ?Sized>(c_o: usize, c_m: usize, d_k: usize, rng: &mut R) -> Self {
        RauParams {
            w_h: Tensor::glorot(&[c_o, d_k], c_o, d_k, rng),
            w_r: Tensor::glorot(&[c_m, d_k], c_m, d_k, rng),
            w_g: Tensor::glorot(&[c_m, d_k], c_m, d_k, rng),
        }
    }

    pub fn zeros(c_o: usize, c_m: usize, d_k: usize) -> Self {
        RauParams {
            w_h: Tensor::zeros(&[c_o, d_k]),
            w_r: Tensor::zeros(&[c_m, d_k]),
            w_g: Tensor::zeros(&[c_m, d_k]),
        }
    }

    pub fn d_k(&self) -> usize {
        self.w_h.shape()[1]
    }

    pub fn query_dim(&self) -> usize {
        self.w_h.shape()[0]
    }

    pub fn middle_channels(&self) -> usize {
        self.w_r.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let d_k = self.d_k();
        if self.w_r.shape()[1] != d_k || self.w_g.shape()[1] != d_k {
            return Err(shape_err!(
                "rau projections disagree on d_k: {:?} {:?} {:?}",
                self.w_h.shape(),
                self.w_r.shape(),
                self.w_g.shape()
            ));
        }
        if self.w_r.shape()[0] != self.w_g.shape()[0] {
            return Err(shape_err!("rau W_r and W_g must share C_m"));
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph) -> RauVars {
        let v = self.bind_all(g);
        self.vars_from(&v)
    }

    /// Wraps `[w_h, w_r, w_g]` vars bound elsewhere.
    pub fn vars_from(&self, v: &[Var]) -> RauVars {
        RauVars {
            w_h: v[0],
            w_r: v[1],
            w_g: v[2],
            d_k: self.d_k(),
        }
    }
}

impl Parameterized for RauParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("w_h".into(), &self.w_h),
            ("w_r".into(), &self.w_r),
            ("w_g".into(), &self.w_g),
        ]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("w_h".into(), &mut self.w_h),
            ("w_r".into(), &mut self.w_r),
            ("w_g".into(), &mut self.w_g),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RauVars {
    w_h: Var,
    w_r: Var,
    w_g: Var,
    d_k: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct RauOutputVars {
    pub att_part: Var,
    pub conf: Var,
    pub scores: Var,
}

impl RauVars {
    /// `o1` is `[C_o]`, `m` is `[C_m × N]`.
    pub fn forward(&self, g: &mut Graph, o1: Var, m: Var) -> Result<RauOutputVars> {
        let wh_t = g.transpose(self.w_h)?;
        let query = g.matvec(wh_t, o1)?;
        let wr_t = g.transpose(self.w_r)?;
        let keys = g.matmul(wr_t, m)?;
        let keys_t = g.transpose(keys)?;
        let raw = g.matvec(keys_t, query)?;
        let scores = g.scale(raw, 1.0 / (self.d_k as f64).sqrt())?;
        let conf = g.softmax(scores)?;
        let wg_t = g.transpose(self.w_g)?;
        let values = g.matmul(wg_t, m)?;
        let att_part = g.weighted_columns(values, conf)?;
        Ok(RauOutputVars {
            att_part,
            conf,
            scores,
        })
    }
}

/// Per-location confidences (summing to one) and the raw scores behind them.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    pub conf: Tensor,
    pub scores: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentivePart {
    pub att_part: Tensor,
}

pub fn rau_forward(params: &RauParams, o1: &Tensor, m: &Tensor) -> Result<(AttentivePart, ConfidenceMap)> {
    params.validate()?;
    let mut g = Graph::inference();
    let r = params.bind(&mut g);
    let o = g.constant(o1.clone());
    let mv = g.constant(m.clone());
    let out = r.forward(&mut g, o, mv)?;
    Ok((
        AttentivePart {
            att_part: g.value(out.att_part).clone(),
        },
        ConfidenceMap {
            conf: g.value(out.conf).clone(),
            scores: g.value(out.scores).clone(),
        },
    ))
}
