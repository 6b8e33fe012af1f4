//! Named parameter collections shared by every model component.

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// A fixed, ordered set of named parameter tensors.
///
/// `named_params` and `named_params_mut` must yield the same names in the
/// same order; binding and gradient write-back rely on it.
pub trait Parameterized {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.named_params_mut().into_iter().map(|(_, t)| t).collect()
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Turn gradient accumulation on for every parameter.
    fn enable_grads(&mut self) {
        for p in self.params_mut() {
            if !p.requires_grad() {
                p.set_requires_grad(true);
            }
        }
    }

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Copy every parameter onto `g`, in declaration order.
    fn bind_all(&self, g: &mut Graph) -> Vec<Var> {
        self.named_params().into_iter().map(|(_, t)| g.param(t)).collect()
    }

    /// Add gradients for vars produced by [`Parameterized::bind_all`].
    fn accumulate(&mut self, vars: &[Var], grads: &Gradients) -> Result<()> {
        let params = self.params_mut();
        if params.len() != vars.len() {
            return Err(Error::Argument(format!(
                "{} bound vars for {} parameters",
                vars.len(),
                params.len()
            )));
        }
        for (p, &v) in params.into_iter().zip(vars) {
            if !p.requires_grad() {
                p.set_requires_grad(true);
            }
            if let Some(g) = grads.get(v) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, items: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

pub(crate) fn prefixed_mut<'a>(
    prefix: &str,
    items: Vec<(String, &'a mut Tensor)>,
) -> Vec<(String, &'a mut Tensor)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}
