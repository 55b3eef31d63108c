use super::{EngineError, Tape, Tensor, Var};

fn evaluate<F>(graph: &F, point: &[Tensor]) -> Result<f64, EngineError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, EngineError>,
{
    let mut tape = Tape::new();
    let vars = point.iter().map(|t| tape.constant(t.clone())).collect::<Result<Vec<_>, _>>()?;
    let out = graph(&mut tape, &vars)?;
    let v = tape.value(out).sum();
    if !v.is_finite() {
        return Err(EngineError::NonFinite("graph output during finite differencing".into()));
    }
    Ok(v)
}

/// Central-difference gradient of `sum(graph(point))` for every input coordinate.
pub fn numeric_gradient<F>(graph: &F, point: &[Tensor], h: f64) -> Result<Vec<Tensor>, EngineError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, EngineError>,
{
    let mut work = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut g = Tensor::zeros(point[i].shape());
        for j in 0..point[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = evaluate(graph, &work)?;
            work[i].data_mut()[j] = orig - h;
            let fm = evaluate(graph, &work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (fp - fm) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest relative disagreement between backward and central differences.
///
/// The graph output is reduced by summation (seed of ones). The error is
/// normwise over the gradient of every input taken as one vector,
/// `‖a − b‖₂ / max(1e−12, ‖a‖₂, ‖b‖₂)`.
pub fn check_gradient<F>(graph: F, point: &[Tensor], h: f64) -> Result<f64, EngineError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, EngineError>,
{
    if h <= 0.0 {
        return Err(EngineError::invalid("check_gradient", format!("step {h} must be positive")));
    }
    let mut tape = Tape::new();
    let vars = point.iter().map(|t| tape.input(t.clone())).collect::<Result<Vec<_>, _>>()?;
    let out = graph(&mut tape, &vars)?;
    if !tape.value(out).is_finite() {
        return Err(EngineError::NonFinite("graph output".into()));
    }
    let grads = tape.backward_scalar(out)?;
    let numeric = numeric_gradient(&graph, point, h)?;
    let (mut diff, mut ana_sq, mut num_sq) = (0.0, 0.0, 0.0);
    for (v, num) in vars.iter().zip(&numeric) {
        let ana = grads.get_or_zeros(*v, num.shape());
        for (a, b) in ana.data().iter().zip(num.data()) {
            diff += (a - b) * (a - b);
            ana_sq += a * a;
            num_sq += b * b;
        }
    }
    Ok(diff.sqrt() / 1e-12_f64.max(ana_sq.sqrt()).max(num_sq.sqrt()))
}
