//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Coordinates sampled per tensor; `None` checks every element.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Added to every analytic gradient. Debug hook for negative controls.
    pub perturb: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
            perturb: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(tensor, index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((name.to_string(), index, analytic, numeric));
        }
    }
}

fn coords(n: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(k) = opts.max_coords {
        if k < n {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9e37_79b9));
            idx.shuffle(&mut rng);
            idx.truncate(k);
            idx.sort_unstable();
        }
    }
    idx
}

/// Checks gradients of a scalar function with respect to each input tensor.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|x| g.input(x.clone())).collect();
        Ok(f(&g, &vars)?.value().item())
    };
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let root = f(&g, &vars)?;
    let grads = g.backward(root)?;
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[ti].shape().to_vec());
        let analytic = grads.wrt(v).unwrap_or(&zeros).clone();
        for i in coords(inputs[ti].numel(), opts, ti as u64) {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + opts.step;
            let plus = eval(&work)?;
            work[ti].data_mut()[i] = orig - opts.step;
            let minus = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            report.record(&format!("input{ti}"), i, analytic.data()[i] + opts.perturb, numeric, opts.floor);
        }
    }
    Ok(report)
}

/// Checks gradients of a scalar function with respect to every trainable parameter.
pub fn check_params<F>(store: &ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &ParamStore<f64>) -> Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let root = f(&g, store)?;
    let grads = g.backward(root)?;
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.get(id).value.numel();
        let zeros = Tensor::zeros(store.get(id).value.shape().to_vec());
        let analytic = grads.param(id).unwrap_or(&zeros).clone();
        for i in coords(n, opts, id.index() as u64) {
            let orig = work.get(id).value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + opts.step;
            let plus = {
                let g = Graph::new();
                f(&g, &work)?.value().item()
            };
            work.get_mut(id).value.data_mut()[i] = orig - opts.step;
            let minus = {
                let g = Graph::new();
                f(&g, &work)?.value().item()
            };
            work.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            report.record(&store.get(id).name, i, analytic.data()[i] + opts.perturb, numeric, opts.floor);
        }
    }
    Ok(report)
}
