use rand::seq::index;

use crate::error::{Error, Result};
use crate::nn::{NodeId, ParamSet, Tape};
use crate::rng::{stage_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|g - g_fd| / max(1e-8, |g| + |g_fd|)`
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates_checked: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per parameter tensor; `None` checks all of them.
    pub per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            per_param: Some(8),
            seed: 0,
        }
    }
}

/// Compares reverse-mode gradients of `forward`'s scalar output with central
/// differences. `forward` records the loss on the given tape and returns its node.
pub fn grad_check<F>(params: &ParamSet, opts: GradCheckOptions, forward: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet, &mut Tape) -> Result<NodeId>,
{
    let eval = |p: &ParamSet| -> Result<(Tape, NodeId)> {
        let mut tape = Tape::new();
        let loss = forward(p, &mut tape)?;
        Ok((tape, loss))
    };
    let scalar = |p: &ParamSet| -> Result<f64> {
        let (tape, loss) = eval(p)?;
        Ok(tape.value(loss).get(0, 0))
    };

    let (tape, loss) = eval(params)?;
    let first = tape.value(loss).get(0, 0);
    let second = scalar(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(format!("loss {first} then {second}")));
    }
    let grads = tape.backward(loss)?;

    let mut rng = stage_rng(opts.seed, Stream::GradCheck);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates_checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let len = params.value(&name)?.len();
        let coords: Vec<usize> = match opts.per_param {
            Some(k) if k < len => {
                let mut c = index::sample(&mut rng, len, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        for idx in coords {
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[idx]);
            let orig = probe.value(&name)?.data()[idx];
            probe.value_mut(&name)?.data_mut()[idx] = orig + opts.eps;
            let plus = scalar(&probe)?;
            probe.value_mut(&name)?.data_mut()[idx] = orig - opts.eps;
            let minus = scalar(&probe)?;
            probe.value_mut(&name)?.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            report.coordinates_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}
