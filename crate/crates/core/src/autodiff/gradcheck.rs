use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Array, AutodiffError, Tape, Var};

/// Denominator floor for relative errors; below it the comparison is absolute.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Array<f64>]) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(AutodiffError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of `f` against central differences at
/// every coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &[Array<f64>], epsilon: f64) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let coords: Vec<(usize, usize)> =
        params.iter().enumerate().flat_map(|(p, a)| (0..a.len()).map(move |i| (p, i))).collect();
    check_coordinates(&f, params, epsilon, &coords)
}

/// Like [`grad_check`] but over `count` coordinates drawn without replacement.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Array<f64>],
    epsilon: f64,
    count: usize,
    seed: u64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let all: Vec<(usize, usize)> =
        params.iter().enumerate().flat_map(|(p, a)| (0..a.len()).map(move |i| (p, i))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample(&mut rng, all.len(), count.min(all.len()));
    let coords: Vec<_> = picked.into_iter().map(|i| all[i]).collect();
    check_coordinates(&f, params, epsilon, &coords)
}

fn check_coordinates<F>(
    f: &F,
    params: &[Array<f64>],
    epsilon: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(AutodiffError::BadEpsilon(epsilon));
    }
    for (p, a) in params.iter().enumerate() {
        if let Some(i) = a.data().iter().position(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { param: p, index: i });
        }
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut work = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: coords.len() };
    for &(p, i) in coords {
        let analytic = grads.get(vars[p]).map(|g| g.data()[i]).unwrap_or(0.0);
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + epsilon;
        let plus = evaluate(f, &work)?;
        work[p].data_mut()[i] = orig - epsilon;
        let minus = evaluate(f, &work)?;
        work[p].data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() || !analytic.is_finite() {
            return Err(AutodiffError::NonFinite { param: p, index: i });
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = relative_error(analytic, numeric);
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((p, i));
        }
    }
    Ok(report)
}
