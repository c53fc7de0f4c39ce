use rand::seq::index::sample;

use super::{seeded_rng, BlockId, ParameterStore, Real, Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: Real,
    pub worst: Option<(BlockId, usize)>,
    pub coordinates: usize,
}

/// Compares tape gradients with central differences.
///
/// `loss` records a scalar on a fresh tape over whatever store it is handed.
/// At most `per_block` coordinates of each trainable block are probed,
/// chosen with `seed`; `None` probes all of them.
pub fn grad_check<F>(
    params: &ParameterStore,
    loss: F,
    eps: Real,
    per_block: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let analytic = {
        let mut tape = Tape::new(params);
        let l = loss(&mut tape)?;
        tape.backward(l)?.params
    };
    let eval = |store: &ParameterStore| -> Result<Real> {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        Ok(tape.value(l).data[0])
    };

    let mut rng = seeded_rng(seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: 0 };
    for id in params.ids() {
        if !params.block(id).trainable {
            continue;
        }
        let len = params.value(id).len();
        let coords: Vec<usize> = match per_block {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        let grad = analytic.dense(params, id);
        for c in coords {
            let orig = params.value(id).data[c];
            probe.value_mut(id).data[c] = orig + eps;
            let plus = eval(&probe)?;
            probe.value_mut(id).data[c] = orig - eps;
            let minus = eval(&probe)?;
            probe.value_mut(id).data[c] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data[c];
            let rel = (a - numeric).abs() / (1e-12 as Real).max(a.abs() + numeric.abs());
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((id, c));
            }
        }
    }
    Ok(report)
}
