use crate::error::{Error, Result};
use crate::numerics::{ParamSet, RngStream, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates sampled per parameter; parameters smaller than this are checked exhaustively.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            coords_per_param: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(parameter, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

fn eval_loss<M, F>(model: &M, loss_fn: &mut F) -> Result<f64>
where
    M: ParamSet,
    F: FnMut(&mut Tape, &M) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, model)?;
    let v = tape.scalar(loss)?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!(
            "gradient check: loss evaluated to {v}"
        )));
    }
    Ok(v)
}

/// Compares tape gradients against central differences.
///
/// `loss_fn` must build the same deterministic graph each call, binding the
/// model's parameters through [`Tape::param`]. Returns the max over checked
/// coordinates of `|a − n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<M, F>(
    model: &mut M,
    mut loss_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    M: ParamSet,
    F: FnMut(&mut Tape, &M) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, model)?;
    let base = tape.scalar(loss)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!(
            "gradient check: loss evaluated to {base}"
        )));
    }
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut rng = RngStream::new(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    let n_params = model.params().len();
    for pi in 0..n_params {
        let (name, len) = {
            let p = model.params()[pi];
            (p.name.clone(), p.value.len())
        };
        let analytic = grads.get(&name).map(|g| g.data().to_vec());
        let coords: Vec<usize> = if len <= opts.coords_per_param {
            (0..len).collect()
        } else {
            (0..opts.coords_per_param).map(|_| rng.below(len)).collect()
        };
        for idx in coords {
            let orig = model.params()[pi].value.data()[idx];
            model.params_mut()[pi].value.data_mut()[idx] = orig + opts.eps;
            let plus = eval_loss(model, &mut loss_fn);
            model.params_mut()[pi].value.data_mut()[idx] = orig - opts.eps;
            let minus = eval_loss(model, &mut loss_fn);
            model.params_mut()[pi].value.data_mut()[idx] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let a = analytic.as_ref().map(|g| g[idx]).unwrap_or(0.0);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}
