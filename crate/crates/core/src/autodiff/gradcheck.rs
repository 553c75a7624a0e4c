//! Central-difference gradient verification.

use std::collections::BTreeMap;

use super::{AutogradError, Graph, NdArray, Var};

/// Relative error with denominator `max(|analytic|, |numeric|, 1e-8)`.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn check_step(step: f64) -> Result<(), AutogradError> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(AutogradError::Contract(format!(
            "finite-difference step {step} outside [1e-7, 1e-3]"
        )));
    }
    Ok(())
}

/// Compares reverse-mode gradients of a scalar function `f` at `point` with
/// central differences and returns the largest relative error.
pub fn finite_difference_check<F>(mut f: F, point: &NdArray, step: f64) -> Result<f64, AutogradError>
where
    F: FnMut(&mut Graph, Var) -> Result<Var, AutogradError>,
{
    let mut params = BTreeMap::new();
    params.insert(String::new(), point.clone());
    let errors = check_gradients(&params, |g, vars| f(g, vars[""]), step)?;
    Ok(errors[""])
}

/// Per-array variant of [`finite_difference_check`]: every array in
/// `params` becomes a leaf and the returned map holds the largest
/// relative error found within each array.
pub fn check_gradients<F>(
    params: &BTreeMap<String, NdArray>,
    mut f: F,
    step: f64,
) -> Result<BTreeMap<String, f64>, AutogradError>
where
    F: FnMut(&mut Graph, &BTreeMap<String, Var>) -> Result<Var, AutogradError>,
{
    check_step(step)?;
    let mut eval = |values: &BTreeMap<String, NdArray>| -> Result<(Graph, BTreeMap<String, Var>, Var), AutogradError> {
        let mut g = Graph::new();
        let vars = values
            .iter()
            .map(|(name, v)| (name.clone(), g.leaf(v.clone())))
            .collect::<BTreeMap<_, _>>();
        let root = f(&mut g, &vars)?;
        let value = g.value(root);
        if value.len() != 1 {
            return Err(AutogradError::Contract("checked function must be scalar".into()));
        }
        if !value.is_finite() {
            return Err(AutogradError::NonFinite {
                op: "finite_difference_check",
            });
        }
        Ok((g, vars, root))
    };

    let (g, vars, root) = eval(params)?;
    let grads = g.backward(root)?;
    let analytic: BTreeMap<String, NdArray> = vars
        .iter()
        .map(|(name, &v)| (name.clone(), grads.get_or_zeros(&g, v)))
        .collect();
    drop(g);

    let mut shifted = params.clone();
    let mut errors = BTreeMap::new();
    for (name, base) in params {
        let mut worst = 0.0_f64;
        for i in 0..base.len() {
            let orig = base.data()[i];
            shifted.get_mut(name).expect("present").data_mut()[i] = orig + step;
            let (gp, _, rp) = eval(&shifted)?;
            let fp = gp.value(rp).item();
            shifted.get_mut(name).expect("present").data_mut()[i] = orig - step;
            let (gm, _, rm) = eval(&shifted)?;
            let fm = gm.value(rm).item();
            shifted.get_mut(name).expect("present").data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            worst = worst.max(relative_error(analytic[name].data()[i], numeric));
        }
        errors.insert(name.clone(), worst);
    }
    Ok(errors)
}
