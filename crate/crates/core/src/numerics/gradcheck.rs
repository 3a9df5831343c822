use super::graph::{Graph, Var};
use super::params::{ParamStore, Session};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this in magnitude are compared against it instead
/// of their own size, so that coordinates with a vanishing gradient do not
/// blow up the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Worst relative error between the tape gradient of `f` at `x` and central
/// finite differences with step `eps`.
///
/// `f` receives a fresh graph and the differentiable input and must return a
/// single-element output.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::Contract(format!("grad_check eps {eps} outside [1e-5, 1e-2]")));
    }
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let y = f(&mut g, xv)?;
    if g.value(y).len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got dims {:?}",
            g.dims(y)
        )));
    }
    let analytic = g.backward(y)?.get_or_zeros(xv);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let y = f(&mut g, v)?;
        Ok(g.value(y).data()[0])
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Worst relative error between tape and finite-difference gradients of a
/// scalar `f` with respect to every entry of the named parameters.
pub fn grad_check_params<F>(f: F, store: &ParamStore, names: &[&str], eps: f64) -> Result<f64>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::Contract(format!("grad_check eps {eps} outside [1e-5, 1e-2]")));
    }
    let mut s = Session::new(store);
    let y = f(&mut s)?;
    if s.g.value(y).len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got dims {:?}",
            s.g.dims(y)
        )));
    }
    let analytic = s.backward(y)?;
    let eval = |st: &ParamStore| -> Result<f64> {
        let mut s = Session::new(st);
        let y = f(&mut s)?;
        Ok(s.g.value(y).data()[0])
    };
    let mut worst: f64 = 0.0;
    let mut work = store.clone();
    for name in names {
        let grad = analytic
            .get(*name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(name).map(|t| t.dims().to_vec()).unwrap_or_default()));
        let n = store.get(name)?.len();
        for i in 0..n {
            let orig = store.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0, 4.5]);
        let err = grad_check(|g, x| Ok(g.sum_all(x)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn quadratic() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let f = |g: &mut Graph, x: Var| {
            let sq = g.mul(x, x)?;
            Ok(g.sum_all(sq))
        };
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let y = f(&mut g, xv).unwrap();
        assert_eq!(g.backward(y).unwrap().get(xv).unwrap().data(), &[2.0, 4.0]);
        assert!(grad_check(f, &x, 1e-4).unwrap() < 1e-7);
    }

    #[test]
    fn rejects_non_scalar_and_bad_eps() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let e = grad_check(|_, x| Ok(x), &x, 1e-3).unwrap_err();
        assert!(matches!(e, Error::Contract(_)));
        assert!(grad_check(|g, x| Ok(g.sum_all(x)), &x, 1.0).is_err());
    }

    #[test]
    fn parameter_check_on_linear_layer() {
        use crate::numerics::ops::linear;
        use crate::numerics::ParamPlan;
        use rand::SeedableRng;
        let mut plan = ParamPlan::new();
        plan.linear("l", 3, 2, true);
        let store = plan.build(&mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::new([2, 3], vec![0.5, -1.0, 2.0, 1.0, 0.0, -0.5]).unwrap();
        let f = |s: &mut Session| {
            let xv = s.g.constant(x.clone());
            let y = linear(s, "l", xv)?;
            let y = s.g.sigmoid(y);
            Ok(s.g.sum_all(y))
        };
        let err = grad_check_params(f, &store, &["l.weight", "l.bias"], 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }
}
