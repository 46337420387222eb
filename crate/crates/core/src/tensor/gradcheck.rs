use super::{SeededRng, Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic − numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)
    pub max_relative_error: f64,
    /// (input index, element index) of the worst coordinate
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Below this magnitude a derivative is indistinguishable from zero at the
/// usual step sizes, so such coordinates are judged on absolute error.
pub const GRAD_FLOOR: f64 = 1e-6;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Builds the graph `f` over `inputs` and returns a scalar. Non-scalar
/// outputs are reduced by a fixed pseudo-random projection so that every
/// output element carries a distinct weight.
fn scalar_output<F>(f: &F, tape: &mut Tape<f64>, vars: &[Var]) -> Result<Var>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let out = f(tape, vars)?;
    if tape.value(out).is_scalar() {
        return Ok(out);
    }
    let shape = tape.value(out).shape().to_vec();
    let mut rng = SeededRng::new(0x9e37_79b9);
    let weights = Tensor::from_fn(&shape, |_| rng.uniform(0.5, 1.5));
    let w = tape.constant(weights);
    tape.dot(out, w)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = scalar_output(f, &mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares reverse-mode gradients of `f` against central differences with
/// the given `step`, in double precision. `coordinates` restricts the check
/// to the listed (input, element) pairs; `None` checks every element.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    step: f64,
    coordinates: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = scalar_output(&f, &mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let all: Vec<(usize, usize)>;
    let coords = match coordinates {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
                .collect();
            &all
        }
    };

    let mut report = GradCheckReport::default();
    let mut perturbed = inputs.to_vec();
    for &(i, e) in coords {
        let orig = perturbed[i].data()[e];
        perturbed[i].data_mut()[e] = orig + step;
        let plus = evaluate(&f, &perturbed)?;
        perturbed[i].data_mut()[e] = orig - step;
        let minus = evaluate(&f, &perturbed)?;
        perturbed[i].data_mut()[e] = orig;

        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i].data()[e];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err >= report.max_relative_error {
            report.max_relative_error = err;
            report.worst = (i, e);
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
