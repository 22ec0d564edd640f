use super::rng::Rng;
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct FdOptions {
    /// Central-difference step, must lie in `[1e-7, 1e-3]`.
    pub h: f64,
    /// Check only a random subset of entries per parameter tensor.
    pub max_entries_per_param: Option<usize>,
    /// Seeds the subset selection.
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-6,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per parameter tensor.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    pub entries_checked: usize,
    pub loss: f64,
}

/// `|a - n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
    }
    Ok(tape.item(out))
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences `(f(x+h) - f(x-h)) / 2h` for every (or a sampled subset of)
/// parameter entries.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], opts: &FdOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.h) {
        return Err(Error::Config(format!("finite-difference step {} outside [1e-7, 1e-3]", opts.h)));
    }
    let mut tape = Tape::verifying();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            let mut t = p.clone();
            t.requires_grad = true;
            tape.leaf(&t)
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    let loss = tape.item(out);
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.wrt_or_zeros(&tape, v)).collect();
    drop(tape);

    let again = evaluate(&f, params)?;
    if again.to_bits() != loss.to_bits() {
        return Err(Error::NonDeterministic {
            first: loss,
            second: again,
        });
    }

    let mut rng = Rng::new(opts.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut checked = 0;
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(m) if m < n => {
                let mut all: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut all);
                all.truncate(m);
                all
            }
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for e in entries {
            let orig = p.data()[e];
            work[pi].data_mut()[e] = orig + opts.h;
            let fp = evaluate(&f, &work)?;
            work[pi].data_mut()[e] = orig - opts.h;
            let fm = evaluate(&f, &work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * opts.h);
            worst = worst.max(relative_error(analytic[pi][e], numeric));
            checked += 1;
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        entries_checked: checked,
        loss,
    })
}
