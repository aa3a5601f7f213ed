use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Flat coordinate (across all parameters, in order) of the worst error.
    pub worst_coordinate: usize,
    pub coordinates: usize,
    /// Tape and finite-difference values at the worst coordinate.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub max_abs_error: f64,
    /// Denominator floor used for the relative error.
    pub floor: f64,
}

/// Compares tape gradients of `f` against central differences with step
/// `delta`, coordinate by coordinate over every entry of `params`.
///
/// `f` rebuilds the scalar objective from leaf handles, one per parameter in
/// the order given. The per-coordinate error is
/// `|analytic - numeric| / max(|analytic| + |numeric|, floor)` where
/// `floor = max(1e-8, 1e-4 · max|analytic|)`. Below the floor, central
/// differences are dominated by rounding in the objective (about one ulp of
/// the loss over `2·delta`), so those coordinates are held to an absolute
/// tolerance tied to the gradient's overall scale.
pub fn gradcheck<F>(params: &[Tensor], delta: f64, mut f: F) -> GradcheckReport
where
    F: FnMut(&mut Tape, &[Var]) -> Var,
{
    let eval = |f: &mut F, params: &[Tensor], with_grad: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .iter()
            .map(|p| {
                let mut t = p.detached();
                t.set_requires_grad(with_grad);
                tape.leaf(t)
            })
            .collect();
        let out = f(&mut tape, &vars);
        (tape, vars, out)
    };

    let (tape, vars, out) = eval(&mut f, params, true);
    assert_eq!(tape.value(out).len(), 1, "gradcheck objective must be scalar");
    let grads = tape.backward(out);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.len()))
        .collect();
    drop(tape);

    let scale = analytic.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (1e-4 * scale).max(1e-8);

    let mut work: Vec<Tensor> = params.iter().map(Tensor::detached).collect();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        coordinates: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        max_abs_error: 0.0,
        floor,
    };
    #[allow(clippy::needless_range_loop)]
    for p in 0..work.len() {
        for c in 0..work[p].len() {
            let orig = work[p].data()[c];
            work[p].data_mut()[c] = orig + delta;
            let (t, _, o) = eval(&mut f, &work, false);
            let plus = t.value(o).item();
            work[p].data_mut()[c] = orig - delta;
            let (t, _, o) = eval(&mut f, &work, false);
            let minus = t.value(o).item();
            work[p].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * delta);
            let a = analytic[p][c];
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_coordinate = report.coordinates;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
            report.coordinates += 1;
        }
    }
    report
}
