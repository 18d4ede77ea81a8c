//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Rounding error budget of one central difference, in units of `eps * |f|`.
const NOISE_ULPS: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    pub tol: f64,
    /// Inputs longer than this are checked on a seeded subset of coordinates.
    pub max_coords_per_input: usize,
    /// Sampled points closer than this to a kink are redrawn.
    pub kink_threshold: f64,
    pub max_resamples: usize,
    /// Multiplies the analytic gradient before comparison. Anything other
    /// than 1.0 is a negative control.
    pub analytic_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-4,
            max_coords_per_input: 32,
            kink_threshold: 1e-3,
            max_resamples: 50,
            analytic_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub index: usize,
    pub shape: Vec<usize>,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±step evaluations crossed a kink.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub tol: f64,
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(|i| i.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.inputs.is_empty()
            && self
                .inputs
                .iter()
                .all(|i| i.checked > 0 && i.max_rel_error < self.tol)
    }
}

struct Evaluation {
    graph: Graph,
    vars: Vec<Var>,
    out: Var,
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<Evaluation>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let out = f(&mut graph, &vars)?;
    Ok(Evaluation { graph, vars, out })
}

fn reduced(f: &impl Fn(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor], weights: &Tensor) -> Result<(f64, Vec<u64>)> {
    let mut e = evaluate(f, inputs)?;
    let loss = e.graph.weighted_sum(e.out, weights)?;
    Ok((e.graph.value(loss).item()?, e.graph.activation_pattern()))
}

/// Compares analytic gradients of `f` at `inputs` against central
/// differences. The output of `f` is reduced to a scalar with fixed
/// seeded random weights.
///
/// The error reported per input is `max |analytic - numeric|` over the
/// checked coordinates divided by the largest gradient magnitude of that
/// input, so it is insensitive to coordinates whose true gradient is ~0.
/// An input whose analytic and numeric gradients both stay within the
/// rounding noise of a central difference, `NOISE_ULPS * eps * max(|f+|,
/// |f-|, 1) / step`, has a vanishing gradient on both sides and reports zero
/// error rather than noise over noise.
pub fn check_gradients<F>(
    name: &str,
    inputs: &[Tensor],
    f: F,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let Evaluation {
        mut graph,
        vars,
        out,
    } = evaluate(&f, inputs)?;
    let weights = Tensor::from_fn(graph.shape(out), |_| StandardNormal.sample(&mut rng));
    let loss = graph.weighted_sum(out, &weights)?;
    let grads = graph.backward(loss)?;
    let base_pattern = graph.activation_pattern();

    let mut report = GradCheckReport {
        name: name.to_string(),
        tol: opts.tol,
        inputs: Vec::with_capacity(inputs.len()),
    };
    for (idx, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic: Vec<f64> = match grads.get(*var) {
            Some(t) => t.data().iter().map(|v| v * opts.analytic_scale).collect(),
            None => vec![0.0; input.len()],
        };
        let coords: Vec<usize> = if input.len() <= opts.max_coords_per_input {
            (0..input.len()).collect()
        } else {
            let mut c = sample(&mut rng, input.len(), opts.max_coords_per_input).into_vec();
            c.sort_unstable();
            c
        };
        let mut scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut diffs = Vec::with_capacity(coords.len());
        let mut skipped = 0;
        let mut vanishing = true;
        for &c in &coords {
            let mut plus = inputs.to_vec();
            plus[idx].data_mut()[c] += opts.step;
            let mut minus = inputs.to_vec();
            minus[idx].data_mut()[c] -= opts.step;
            let (fp, pattern_p) = reduced(&f, &plus, &weights)?;
            let (fm, pattern_m) = reduced(&f, &minus, &weights)?;
            if pattern_p != base_pattern || pattern_m != base_pattern {
                skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let noise = NOISE_ULPS * f64::EPSILON * fp.abs().max(fm.abs()).max(1.0) / opts.step;
            vanishing &= analytic[c].abs() <= noise && numeric.abs() <= noise;
            scale = scale.max(numeric.abs());
            diffs.push((analytic[c] - numeric).abs());
        }
        let scale = scale.max(1e-12);
        let max_rel_error = if vanishing {
            0.0
        } else {
            diffs.iter().fold(0.0f64, |m, d| m.max(d / scale))
        };
        report.inputs.push(InputCheck {
            index: idx,
            shape: input.shape().to_vec(),
            max_rel_error,
            checked: diffs.len(),
            skipped,
        });
    }
    Ok(report)
}

/// Samples standard-normal inputs of the given shapes from `seed`, redrawing
/// while any kink-bearing op sits within `opts.kink_threshold` of its kink,
/// then runs [`check_gradients`].
pub fn grad_check<F>(
    name: &str,
    shapes: &[Vec<usize>],
    f: F,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..=opts.max_resamples {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| Tensor::from_fn(s, |_| StandardNormal.sample(&mut rng)))
            .collect();
        if evaluate(&f, &inputs)?.graph.min_kink_distance() >= opts.kink_threshold {
            return check_gradients(name, &inputs, f, seed, opts);
        }
    }
    Err(Error::Numerical(format!(
        "{name}: no sample point found at least {} away from a kink",
        opts.kink_threshold
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(g: &mut Graph, v: &[Var]) -> Result<Var> {
        g.conv3d(v[0], v[1], v[2], 1, 1)
    }

    fn conv_shapes() -> Vec<Vec<usize>> {
        vec![vec![1, 2, 4, 4, 4], vec![3, 2, 3, 3, 3], vec![3]]
    }

    #[test]
    fn conv3d_passes() {
        let r = grad_check("conv3d", &conv_shapes(), conv, 7, &GradCheckOptions::default()).unwrap();
        assert!(r.passed(), "{:?}", r.inputs);
        assert!(r.max_rel_error() < 1e-6);
    }

    #[test]
    fn adain_passes() {
        let shapes = vec![vec![2, 3, 4, 4, 4], vec![2, 3], vec![2, 3]];
        let r = grad_check("adain", &shapes, |g, v| g.adain(v[0], v[1], v[2]), 7, &GradCheckOptions::default()).unwrap();
        assert!(r.passed(), "{:?}", r.inputs);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let opts = GradCheckOptions {
            analytic_scale: 1.01,
            ..GradCheckOptions::default()
        };
        let r = grad_check("conv3d", &conv_shapes(), conv, 7, &opts).unwrap();
        assert!(!r.passed());
        assert!(r.max_rel_error() > 5e-3);
    }

    #[test]
    fn tolerance_below_difference_noise_fails() {
        let opts = GradCheckOptions {
            tol: 1e-12,
            ..GradCheckOptions::default()
        };
        let shapes = vec![vec![2, 3, 4, 4, 4], vec![2, 3], vec![2, 3]];
        let r = grad_check("adain", &shapes, |g, v| g.adain(v[0], v[1], v[2]), 7, &opts).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn kinks_are_avoided_or_skipped() {
        let r = grad_check("relu", &[vec![64]], |g, v| Ok(g.relu(v[0])), 1, &GradCheckOptions::default()).unwrap();
        assert!(r.passed());
        // Exactly at a kink the sample point is rejected.
        let at_kink = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let r = check_gradients("relu", &[at_kink], |g, v| Ok(g.relu(v[0])), 1, &GradCheckOptions::default()).unwrap();
        assert_eq!(r.inputs[0].skipped, 1);
        assert_eq!(r.inputs[0].checked, 1);
    }
}
