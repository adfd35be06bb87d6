use super::{F64x2, Gradients, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Floor added to the finite-difference magnitude in the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `max |autodiff − central| / (|central| + 1e-8)` over every entry.
    pub max_rel_err: f64,
    /// `(parameter index, flat entry index)` of the worst entry.
    pub worst: (usize, usize),
    pub autodiff: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    /// Entries whose difference was re-evaluated in double-double arithmetic.
    pub refined: usize,
}

/// A scalar computation that can be traced at any element precision.
///
/// [`grad_check_extended`] differentiates it in `f64` and evaluates its
/// finite differences in double-double arithmetic.
pub trait Objective {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var>;
}

fn evaluate<T: Real>(
    f: &dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    params: &[Tensor<T>],
) -> Result<(Tape<T>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let v = tape.value(root);
    if v.numel() != 1 {
        return Err(Error::dim("grad_check", "function must return a scalar"));
    }
    if !v.data()[0].is_finite() {
        return Err(Error::Evaluation("grad_check objective".into()));
    }
    Ok((tape, vars, root))
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Input(format!("finite-difference step {h} outside [1e-6, 1e-4]")));
    }
    Ok(())
}

fn autodiff(f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>, params: &[Tensor]) -> Result<Vec<Tensor>> {
    let (tape, vars, root) = evaluate(f, params)?;
    let grads: Gradients = tape.backward(root)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect())
}

/// Central differences of `f` at `params` in precision `T`, compared entry by
/// entry against `autodiff`.
fn compare<T: Real>(
    f: &dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    params: &[Tensor<T>],
    autodiff: Vec<Tensor>,
    h: f64,
) -> Result<GradCheck> {
    let value_at = |ps: &[Tensor<T>]| -> Result<T> {
        let (tape, _, root) = evaluate(f, ps)?;
        Ok(tape.value(root).data()[0])
    };
    let step = T::of(h);
    let mut perturbed = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_err = 0.0;
    let mut worst = (0, 0);
    for (pi, p) in params.iter().enumerate() {
        let mut num = Tensor::zeros(p.shape().to_vec());
        for k in 0..p.numel() {
            let orig = p.data()[k];
            perturbed[pi].data_mut()[k] = orig + step;
            let plus = value_at(&perturbed)?;
            perturbed[pi].data_mut()[k] = orig - step;
            let minus = value_at(&perturbed)?;
            perturbed[pi].data_mut()[k] = orig;

            let central = ((plus - minus) / (step + step)).as_f64();
            num.data_mut()[k] = central;
            let rel = rel_err(autodiff[pi].data()[k], central);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = (pi, k);
            }
        }
        numeric.push(num);
    }
    Ok(GradCheck {
        max_rel_err,
        worst,
        autodiff,
        numeric,
        refined: 0,
    })
}

/// Compares reverse-mode gradients of a scalar computation against central
/// differences with step `h`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_step(h)?;
    let grads = autodiff(&f, params)?;
    compare(&f, params, grads, h)
}

/// Entries whose `f64` difference agrees with autodiff to this relative
/// error are accepted without refinement.
pub const REFINE_ABOVE: f64 = 1e-6;

fn rel_err(autodiff: f64, numeric: f64) -> f64 {
    (autodiff - numeric).abs() / (numeric.abs() + REL_ERR_FLOOR)
}

/// [`grad_check`] whose unresolved entries are re-evaluated in double-double
/// arithmetic with a five-point central stencil.
///
/// In `f64` the central difference of a loss near `c` carries rounding noise
/// of about `ulp(c)/2h` plus `O(h²)` truncation, which together swamp gradient
/// entries below roughly `1e-7` in a full model. Every entry is first
/// differenced in `f64`; those that disagree with autodiff by more than
/// [`REFINE_ABOVE`] are differenced again at about 32 significant digits with
/// `O(h⁴)` truncation, and that value replaces the `f64` one.
pub fn grad_check_extended<O: Objective>(objective: &O, params: &[Tensor], h: f64) -> Result<GradCheck> {
    check_step(h)?;
    let narrow = |t: &mut Tape, v: &[Var]| objective.eval(t, v);
    let grads = autodiff(&narrow, params)?;
    let mut check = compare(&narrow, params, grads, h)?;

    let wide_eval = |t: &mut Tape<F64x2>, v: &[Var]| objective.eval(t, v);
    let mut wide: Vec<Tensor<F64x2>> = params.iter().map(Tensor::cast).collect();
    let mut value_at = |pi: usize, k: usize, offset: F64x2| -> Result<F64x2> {
        let orig = wide[pi].data()[k];
        wide[pi].data_mut()[k] = orig + offset;
        let out = evaluate(&wide_eval, &wide).map(|(tape, _, root)| tape.value(root).data()[0]);
        wide[pi].data_mut()[k] = orig;
        out
    };
    let step = F64x2::of(h);
    let two_steps = F64x2::of(2.0 * h);
    check.max_rel_err = 0.0;
    for pi in 0..params.len() {
        for k in 0..params[pi].numel() {
            let a = check.autodiff[pi].data()[k];
            let mut numeric = check.numeric[pi].data()[k];
            if rel_err(a, numeric) > REFINE_ABOVE {
                let near = value_at(pi, k, step)? - value_at(pi, k, -step)?;
                let far = value_at(pi, k, two_steps)? - value_at(pi, k, -two_steps)?;
                numeric = ((F64x2::of(8.0) * near - far) / (F64x2::of(12.0) * step)).as_f64();
                check.numeric[pi].data_mut()[k] = numeric;
                check.refined += 1;
            }
            let rel = rel_err(a, numeric);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst = (pi, k);
            }
        }
    }
    Ok(check)
}
