use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Finite-difference settings.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many elements per input, evenly strided.
    pub max_elements: Option<usize>,
    /// Extra steps tried per element, each a tenth of the previous; the
    /// element scores its best agreement. Networks with many ReLU and max
    /// units need this: a large step crosses kinks, a small one drowns
    /// tiny gradients in rounding noise, while a wrong derivative
    /// disagrees at every scale.
    pub refinements: u32,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-3, max_elements: None, refinements: 0 }
    }
}

/// Smallest relative error between `analytic` and the central difference
/// of `f(delta)` over the step ladder of `opts`.
pub(crate) fn element_error(analytic: f64, opts: &GradCheckOptions, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let mut best = f64::INFINITY;
    let mut h = opts.step;
    for _ in 0..=opts.refinements {
        let numeric = (f(h)? - f(-h)?) / (2.0 * h);
        best = best.min(relative_error(analytic, numeric));
        h /= 10.0;
    }
    Ok(best)
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Largest relative error between backward gradients of the scalar `f(x)`
/// and central differences, all in `f64`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let opts = GradCheckOptions { step, ..GradCheckOptions::default() };
    grad_check_inputs(|g, vs| f(g, vs[0]), std::slice::from_ref(x), opts)
}

/// Multi-input variant of [`grad_check`]; every input is perturbed.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>], track: bool| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = track;
                g.leaf(t)
            })
            .collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };

    let (mut g, vars, out) = eval(inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or(vec![0.0; t.numel()], |d| d.to_vec()))
        .collect();

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for e in sampled(t.numel(), opts.max_elements) {
            let orig = t.data()[e];
            let err = element_error(analytic[ti][e], &opts, |d| {
                work[ti].data_mut()[e] = orig + d;
                let (g, _, o) = eval(&work, false)?;
                Ok(g.value(o).item())
            })?;
            work[ti].data_mut()[e] = orig;
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

pub(crate) fn sampled(n: usize, max: Option<usize>) -> impl Iterator<Item = usize> {
    let stride = match max {
        Some(m) if m > 0 && n > m => n.div_ceil(m),
        _ => 1,
    };
    (0..n).step_by(stride)
}
