use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over parameter tensors of `per_param`.
    pub max_rel_err: f64,
    /// `|g_tape - g_fd|_2 / max(|g_tape|_2, |g_fd|_2)` for each parameter tensor.
    pub per_param: Vec<f64>,
}

/// Compares the tape gradient of the scalar `f` at `params` with central
/// finite differences of step `h`, element by element.
///
/// `f` receives a fresh tape and one [`Var`] per parameter tensor (registered
/// with ids `0..params.len()`) and must return a scalar.
pub fn grad_check<T, F>(f: F, params: &[Tensor<T>], h: f64) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, p.clone()))
            .collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item().as_f64();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check objective".into()))
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(i, p.clone()))
        .collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().as_f64().is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let analytic = grads.get(i).expect("every param registered");
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for j in 0..params[i].numel() {
            let orig = params[i].data()[j];
            work[i].data_mut()[j] = T::of(orig.as_f64() + h);
            let plus = eval(&work)?;
            work[i].data_mut()[j] = T::of(orig.as_f64() - h);
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let an = analytic.data()[j].as_f64();
            diff2 += (an - fd) * (an - fd);
            a2 += an * an;
            n2 += fd * fd;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        per_param.push(if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom });
    }
    let max_rel_err = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        per_param,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::new([1], vec![3.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let y = t.mul(v[0], v[0])?;
                t.sum(y)
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
    }

    #[test]
    fn builtin_kernels_f64() {
        let mut rng = SeededRng::new(5, 0);
        let x = Tensor::<f64>::randn([3, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::randn([4, 5], 0.5, &mut rng);
        let b = Tensor::<f64>::randn([5], 0.5, &mut rng);
        let g = Tensor::<f64>::uniform([5], 0.5, 1.5, &mut rng);
        let table = Tensor::<f64>::randn([6, 4], 1.0, &mut rng);
        let probe = Tensor::<f64>::randn([3, 5], 1.0, &mut rng);
        let r = grad_check(
            |t, v| {
                let e = t.embedding(v[4], &[1, 3, 1])?;
                let x = t.add(v[0], e)?;
                let y = t.matmul(x, v[1])?;
                let y = t.add_row(y, v[2])?;
                let y = t.rmsnorm(y, v[3], 1e-6)?;
                let a = t.silu(y)?;
                let s = t.softplus(y)?;
                let m = t.mul(a, s)?;
                let m = t.scale(m, 0.7)?;
                let e2 = t.exp(m)?;
                t.dot_const(e2, probe.clone())
            },
            &[x, w, b, g, table],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn non_finite_objective_errors() {
        let x = Tensor::<f64>::new([1], vec![1000.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let y = t.mul(v[0], v[0])?;
                let y = t.mul(y, y)?;
                let y = t.mul(y, y)?;
                let y = t.mul(y, y)?;
                let y = t.mul(y, y)?;
                let y = t.mul(y, y)?;
                let y = t.mul(y, y)?;
                t.sum(y)
            },
            &[x],
            1e-3,
        );
        assert!(r.is_err());
    }
}
