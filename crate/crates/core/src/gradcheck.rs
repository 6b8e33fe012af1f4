//! Central finite-difference checks of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::Parameterized;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// An entry passes when `|analytic − fd| ≤ tol · max(1, |fd|)`.
    pub tol: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-6, tol: 1e-5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArrayReport {
    pub name: String,
    pub entries: usize,
    /// Largest `|analytic − fd| / max(1, |fd|)` over the array.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct GradCheckReport {
    pub arrays: Vec<ArrayReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.arrays.iter().all(|a| a.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.arrays.iter().map(|a| a.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&ArrayReport> {
        self.arrays.iter().filter(|a| !a.passed).collect()
    }
}

fn scalar_loss(g: &Graph, loss: Var) -> Result<f64> {
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(Error::Shape(format!("loss must be scalar, got {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

fn compare(
    name: String,
    analytic: &[f64],
    mut fd_at: impl FnMut(usize) -> Result<f64>,
    opts: GradCheckOptions,
) -> Result<ArrayReport> {
    let mut worst = (0.0, 0);
    for (i, &a) in analytic.iter().enumerate() {
        let fd = fd_at(i)?;
        let err = (a - fd).abs() / fd.abs().max(1.0);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    Ok(ArrayReport {
        name,
        entries: analytic.len(),
        max_rel_err: worst.0,
        worst_index: worst.1,
        passed: worst.0 <= opts.tol,
    })
}

/// Checks `f` with respect to each named input array. `f` receives the
/// inputs bound as trainable leaves, in order, and returns a scalar.
pub fn check_inputs<F>(inputs: &[(String, Tensor)], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.param(t)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t)).collect();
        let loss = f(&mut g, &vars)?;
        scalar_loss(&g, loss)
    };

    let mut work: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport::default();
    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], t.numel());
        let arr = compare(
            name.clone(),
            &analytic,
            |i| {
                let x = work[k].data()[i];
                work[k].data_mut()[i] = x + opts.eps;
                let up = eval(&work)?;
                work[k].data_mut()[i] = x - opts.eps;
                let down = eval(&work)?;
                work[k].data_mut()[i] = x;
                Ok((up - down) / (2.0 * opts.eps))
            },
            opts,
        )?;
        report.arrays.push(arr);
    }
    Ok(report)
}

/// Checks a model loss with respect to every parameter array of `params`.
///
/// `f` must bind `params` on the given graph and return the loss together
/// with the bound vars in [`Parameterized`] order.
pub fn check_params<P, F>(params: &P, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    P: Parameterized + Clone,
    F: Fn(&P, &mut Graph) -> Result<(Var, Vec<Var>)>,
{
    let mut g = Graph::new();
    let (loss, vars) = f(params, &mut g)?;
    let grads = g.backward(loss)?;
    let named = params.named_params();
    if vars.len() != named.len() {
        return Err(Error::Argument(format!(
            "{} vars returned for {} parameter arrays",
            vars.len(),
            named.len()
        )));
    }
    let analytic: Vec<(String, Vec<f64>)> = named
        .iter()
        .zip(&vars)
        .map(|((n, t), &v)| (n.clone(), grads.get_or_zeros(v, t.numel())))
        .collect();

    let eval = |p: &P| -> Result<f64> {
        let mut g = Graph::inference();
        let (loss, _) = f(p, &mut g)?;
        scalar_loss(&g, loss)
    };

    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    for (k, (name, an)) in analytic.into_iter().enumerate() {
        let arr = compare(
            name,
            &an,
            |i| {
                let x = work.params_mut()[k].data()[i];
                work.params_mut()[k].data_mut()[i] = x + opts.eps;
                let up = eval(&work)?;
                work.params_mut()[k].data_mut()[i] = x - opts.eps;
                let down = eval(&work)?;
                work.params_mut()[k].data_mut()[i] = x;
                Ok((up - down) / (2.0 * opts.eps))
            },
            opts,
        )?;
        report.arrays.push(arr);
    }
    Ok(report)
}
