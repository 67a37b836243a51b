//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::par;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Floor on the denominator of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per input, chosen at random.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

/// Worst coordinate found by a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct Discrepancy {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst: Option<Discrepancy>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Max relative error between tape and finite-difference gradients of the
/// scalar `f` at `inputs`, over every coordinate.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
{
    let opts = GradCheckOptions {
        step,
        ..Default::default()
    };
    Ok(grad_check_with(f, inputs, &opts)?.max_rel_error)
}

pub fn grad_check_with<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
{
    let all = finite_differences(f, inputs, opts)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: all.len(),
        worst: None,
    };
    for d in all {
        let err = relative_error(d.analytic, d.numeric);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite difference at input {} coord {}",
                d.input, d.coord
            )));
        }
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(d);
        }
    }
    Ok(report)
}

/// Analytic and central-difference gradients of every checked coordinate,
/// in input then coordinate order.
pub fn finite_differences<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<Vec<Discrepancy>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
{
    if !(opts.step > 0.0 && opts.step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {}", opts.step)));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("function must return a scalar, got shape {:?}", g.shape(out)),
        ));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_tensor(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        match opts.max_coords_per_input {
            Some(m) if m < t.numel() => {
                let mut picked = sample(&mut rng, t.numel(), m).into_vec();
                picked.sort_unstable();
                coords.extend(picked.into_iter().map(|c| (i, c)));
            }
            _ => coords.extend((0..t.numel()).map(|c| (i, c))),
        }
    }

    let eval = |input: usize, coord: usize, delta: f64| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == input {
                    t.data_mut()[coord] += delta;
                }
                g.constant(t)
            })
            .collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    par::map(&coords, |&(input, coord)| -> Result<Discrepancy> {
        let plus = eval(input, coord, opts.step)?;
        let minus = eval(input, coord, -opts.step)?;
        Ok(Discrepancy {
            input,
            coord,
            analytic: analytic[input].data()[coord],
            numeric: (plus - minus) / (2.0 * opts.step),
        })
    })
    .into_iter()
    .collect()
}
