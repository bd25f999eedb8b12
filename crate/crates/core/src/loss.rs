//! Token-level objectives over logits `[rows, V]` with per-row weights.
//! Each loss is the weighted mean over rows with non-zero weight.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::ops::{log_softmax_slice, softmax_slice};
use crate::tensor::tape::CustomOp;
use crate::tensor::{Element, Tape, Tensor, Var};

fn check_rows<T: Element>(op: &'static str, logits: &Tensor<T>, weights: &[f64]) -> Result<(usize, f64)> {
    if logits.rank() != 2 || logits.shape()[0] != weights.len() || logits.shape()[1] == 0 {
        return Err(shape_err(
            op,
            format!("logits {:?} vs {} weights", logits.shape(), weights.len()),
        ));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(invalid(format!("{op}: mask selects no positions")));
    }
    Ok((logits.shape()[1], total))
}

fn log_probs<T: Element>(row: &[T]) -> Vec<f64> {
    let mut lp: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
    log_softmax_slice(&mut lp);
    lp
}

struct CrossEntropyOp {
    targets: Vec<u32>,
    weights: Vec<f64>,
    total: f64,
}

impl<T: Element> CustomOp<T> for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "masked_cross_entropy"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let v = x.last_dim();
        let g = grad_out.item().as_f64();
        let mut dx = vec![T::zero(); x.numel()];
        for (r, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let mut p: Vec<f64> = x.row(r).iter().map(|v| v.as_f64()).collect();
            softmax_slice(&mut p);
            p[self.targets[r] as usize] -= 1.0;
            let s = g * w / self.total;
            for (d, pv) in dx[r * v..(r + 1) * v].iter_mut().zip(&p) {
                *d = T::of(pv * s);
            }
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), dx)?)])
    }
}

/// Weighted mean of `-log softmax(logits)[target]`.
pub fn masked_ce<T: Element>(tape: &mut Tape<T>, logits: Var, targets: &[u32], weights: &[f64]) -> Result<Var> {
    let x = tape.value(logits);
    let (v, total) = check_rows("masked_ce", x, weights)?;
    if targets.len() != weights.len() {
        return Err(shape_err("masked_ce", "targets and weights differ in length"));
    }
    let mut loss = 0.0;
    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        if t as usize >= v {
            return Err(invalid(format!("target {t} out of range for vocab {v}")));
        }
        loss -= w * log_probs(x.row(r))[t as usize];
    }
    let value = Tensor::scalar(T::of(loss / total));
    tape.custom(
        &[logits],
        value,
        Box::new(CrossEntropyOp {
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            total,
        }),
    )
}

/// Which divergence a [`KlOp`] computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlDirection {
    /// `KL(student || teacher)`, mode seeking.
    Reverse,
    /// `KL(teacher || student)`, mode covering.
    Forward,
}

struct KlOp<T: Element> {
    teacher: Tensor<T>,
    weights: Vec<f64>,
    total: f64,
    dir: KlDirection,
}

fn row_kl(s: &[f64], t: &[f64], dir: KlDirection) -> f64 {
    s.iter()
        .zip(t)
        .map(|(&ls, &lt)| match dir {
            KlDirection::Reverse => ls.exp() * (ls - lt),
            KlDirection::Forward => lt.exp() * (lt - ls),
        })
        .sum()
}

impl<T: Element> CustomOp<T> for KlOp<T> {
    fn name(&self) -> &'static str {
        "kl_divergence"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let v = x.last_dim();
        let g = grad_out.item().as_f64();
        let mut dx = vec![T::zero(); x.numel()];
        for (r, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let ls = log_probs(x.row(r));
            let lt = log_probs(self.teacher.row(r));
            let s = g * w / self.total;
            let out = &mut dx[r * v..(r + 1) * v];
            match self.dir {
                KlDirection::Reverse => {
                    // d/dz_j sum p (log p - log q) = p_j (log p_j - log q_j - KL)
                    let kl = row_kl(&ls, &lt, KlDirection::Reverse);
                    for j in 0..v {
                        out[j] = T::of(s * ls[j].exp() * (ls[j] - lt[j] - kl));
                    }
                }
                KlDirection::Forward => {
                    for j in 0..v {
                        out[j] = T::of(s * (ls[j].exp() - lt[j].exp()));
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), dx)?)])
    }
}

/// Weighted mean per-position KL between student logits (on the tape) and
/// fixed teacher logits, both `[rows, V]`.
pub fn kl_loss<T: Element>(
    tape: &mut Tape<T>,
    student: Var,
    teacher: &Tensor<T>,
    weights: &[f64],
    dir: KlDirection,
) -> Result<Var> {
    let value = kl_value(tape.value(student), teacher, weights, dir)?;
    let total = weights.iter().sum();
    tape.custom(
        &[student],
        Tensor::scalar(T::of(value)),
        Box::new(KlOp {
            teacher: teacher.clone(),
            weights: weights.to_vec(),
            total,
            dir,
        }),
    )
}

/// `D_KL(p_student || p_teacher)`, averaged over masked positions.
pub fn reverse_kl_loss<T: Element>(tape: &mut Tape<T>, student: Var, teacher: &Tensor<T>, weights: &[f64]) -> Result<Var> {
    kl_loss(tape, student, teacher, weights, KlDirection::Reverse)
}

/// Plain evaluation of the weighted mean KL.
pub fn kl_value<T: Element>(student: &Tensor<T>, teacher: &Tensor<T>, weights: &[f64], dir: KlDirection) -> Result<f64> {
    let (_, total) = check_rows("kl_loss", student, weights)?;
    if teacher.shape() != student.shape() {
        return Err(shape_err(
            "kl_loss",
            format!("student {:?} vs teacher {:?}", student.shape(), teacher.shape()),
        ));
    }
    let mut sum = 0.0;
    for (r, &w) in weights.iter().enumerate() {
        if w != 0.0 {
            sum += w * row_kl(&log_probs(student.row(r)), &log_probs(teacher.row(r)), dir);
        }
    }
    let v = sum / total;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(crate::Error::NonFinite("kl_loss".into()))
    }
}

pub fn reverse_kl<T: Element>(student: &Tensor<T>, teacher: &Tensor<T>, weights: &[f64]) -> Result<f64> {
    kl_value(student, teacher, weights, KlDirection::Reverse)
}

/// Mean entropy of `softmax(logits)` over weighted rows.
pub fn mean_entropy<T: Element>(logits: &Tensor<T>, weights: &[f64]) -> Result<f64> {
    let (_, total) = check_rows("mean_entropy", logits, weights)?;
    let mut sum = 0.0;
    for (r, &w) in weights.iter().enumerate() {
        if w != 0.0 {
            sum -= w * log_probs(logits.row(r)).iter().map(|l| l.exp() * l).sum::<f64>();
        }
    }
    Ok(sum / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, SeededRng};

    #[test]
    fn reverse_kl_hand_value() {
        let s = Tensor::<f64>::new([1, 2], vec![0.0, 0.0]).unwrap();
        let t = Tensor::<f64>::new([1, 2], vec![0.25f64.ln(), 0.75f64.ln()]).unwrap();
        let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((reverse_kl(&s, &t, &[1.0]).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.143841).abs() < 1e-6);
    }

    #[test]
    fn identical_logits_give_zero_and_mask_ignores() {
        let mut rng = SeededRng::new(1, 0);
        let s = Tensor::<f32>::randn([3, 5], 2.0, &mut rng);
        assert!(reverse_kl(&s, &s, &[1.0, 1.0, 1.0]).unwrap().abs() < 1e-7);
        let mut t = s.clone();
        t.data_mut()[7] += 3.0;
        assert!(reverse_kl(&s, &t, &[1.0, 0.0, 1.0]).unwrap().abs() < 1e-7);
        assert!(reverse_kl(&s, &t, &[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SeededRng::new(2, 0);
        let x = Tensor::<f64>::randn([4, 6], 1.0, &mut rng);
        let t = Tensor::<f64>::randn([4, 6], 1.0, &mut rng);
        let w = [1.0, 0.0, 2.0, 0.5];
        for dir in [KlDirection::Reverse, KlDirection::Forward] {
            let r = grad_check(|tp, v| kl_loss(tp, v[0], &t, &w, dir), &[x.clone()], 1e-5).unwrap();
            assert!(r.max_rel_err < 1e-7, "{dir:?} {r:?}");
        }
        let r = grad_check(|tp, v| masked_ce(tp, v[0], &[1, 2, 3, 5], &w), &[x], 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-7, "{r:?}");
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let x = Tensor::<f32>::zeros([2, 8]);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let l = masked_ce(&mut tape, v, &[0, 3], &[1.0, 1.0]).unwrap();
        assert!((tape.value(l).item() as f64 - 8f64.ln()).abs() < 1e-6);
    }
}
