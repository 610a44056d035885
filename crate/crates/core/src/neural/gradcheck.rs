use super::Parameterized;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares accumulated gradients against central differences for every
/// coordinate of every parameter.
///
/// `loss` must return the scalar loss and add its gradient into the
/// parameters' `grad` buffers. Gradients are zeroed before and after.
pub fn grad_check<M, F>(model: &mut M, mut loss: F, h: f64) -> GradCheckReport
where
    M: Parameterized,
    F: FnMut(&mut M) -> f64,
{
    model.zero_grads();
    loss(model);
    let analytic = gradients(model);
    run_check(model, &analytic, None, |m, pi, k, original| {
        let plus = perturbed(m, pi, k, original + h, &mut loss);
        let minus = perturbed(m, pi, k, original - h, &mut loss);
        (plus - minus) / (2.0 * h)
    })
}

/// Central differences for piecewise-smooth losses (ReLU, max-pool).
///
/// `backward` runs once and accumulates the analytic gradient. `loss`
/// evaluates the loss together with a pattern that identifies the smooth
/// piece, such as the ReLU on/off states. Each coordinate combines the central differences
/// at `h` and `h/2` by one Richardson step, starting at `h = h_max` and
/// shrinking tenfold (down to `h_min`) while the pattern at any endpoint
/// differs from the pattern at the current point. The large step keeps
/// roundoff below tiny gradients; the pattern test keeps it off kinks.
///
/// `coords` restricts the check to `(param index, flat index)` pairs.
pub fn grad_check_piecewise<M, B, F, P>(
    model: &mut M,
    backward: B,
    mut loss: F,
    coords: Option<&[(usize, usize)]>,
    h_max: f64,
    h_min: f64,
) -> GradCheckReport
where
    M: Parameterized,
    B: FnOnce(&mut M),
    F: FnMut(&mut M) -> (f64, P),
    P: PartialEq,
{
    model.zero_grads();
    backward(model);
    let analytic = gradients(model);
    let centre = loss(model).1;
    run_check(model, &analytic, coords, |m, pi, k, original| {
        let mut h = h_max;
        loop {
            let mut smooth = true;
            let mut central = |step: f64| {
                let (plus, pp) = perturbed(m, pi, k, original + step, &mut loss);
                let (minus, pm) = perturbed(m, pi, k, original - step, &mut loss);
                smooth &= pp == centre && pm == centre;
                (plus - minus) / (2.0 * step)
            };
            let coarse = central(h);
            let fine = central(h / 2.0);
            if smooth || h <= h_min {
                // one Richardson step cancels the O(h^2) term
                return (4.0 * fine - coarse) / 3.0;
            }
            h = (h / 10.0).max(h_min);
        }
    })
}

fn gradients<M: Parameterized>(model: &M) -> Vec<Vec<f64>> {
    model
        .params()
        .iter()
        .map(|p| p.grad.as_slice().to_vec())
        .collect()
}

fn perturbed<M: Parameterized, T>(
    m: &mut M,
    pi: usize,
    k: usize,
    v: f64,
    loss: &mut impl FnMut(&mut M) -> T,
) -> T {
    m.params_mut()[pi].value.as_mut_slice()[k] = v;
    loss(m)
}

fn run_check<M, N>(
    model: &mut M,
    analytic: &[Vec<f64>],
    coords: Option<&[(usize, usize)]>,
    mut numeric: N,
) -> GradCheckReport
where
    M: Parameterized,
    N: FnMut(&mut M, usize, usize, f64) -> f64,
{
    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = analytic
                .iter()
                .enumerate()
                .flat_map(|(pi, g)| (0..g.len()).map(move |k| (pi, k)))
                .collect();
            &all
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for &(pi, k) in coords {
        let a = analytic[pi][k];
        let original = model.params()[pi].value.as_slice()[k];
        let n = numeric(model, pi, k, original);
        model.params_mut()[pi].value.as_mut_slice()[k] = original;
        let err = relative_error(a, n);
        report.coordinates += 1;
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst = Some((model.params()[pi].name.clone(), k));
        }
    }
    model.zero_grads();
    report
}
