//! Training losses. Each returns a scalar [`Var`] on the caller's tape; the
//! heavier ones (cross-entropy, KL, CRF) are computed directly and recorded
//! as fused nodes carrying their analytic gradients.

pub mod crf;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{logsumexp, Float};
use crate::text::pack::IGNORE_TAG;

pub use crf::CrfParams;

fn rows_of<T: Float>(tape: &Tape<T>, x: Var) -> Result<(usize, usize)> {
    let shape = tape.shape(x);
    let c = *shape.last().ok_or_else(|| Error::contract("logits need at least one axis"))?;
    if c == 0 {
        return Err(Error::contract("logits have an empty class axis"));
    }
    Ok((tape.value(x).len() / c, c))
}

/// Mean cross-entropy over the rows that have a target.
fn cross_entropy<T: Float>(tape: &mut Tape<T>, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    let (rows, c) = rows_of(tape, logits)?;
    if targets.len() != rows {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: tape.shape(logits).to_vec(),
            right: vec![targets.len()],
        });
    }
    if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= c) {
        return Err(Error::Index {
            what: "class",
            index: bad,
            size: c,
        });
    }
    let count = targets.iter().flatten().count();
    let x = tape.value(logits);
    let mut grad = vec![T::zero(); x.len()];
    let mut total = T::zero();
    if count > 0 {
        let inv = T::one() / T::lit(count as f64);
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            let row = &x[r * c..(r + 1) * c];
            let lse = logsumexp(row);
            total += lse - row[t];
            let g = &mut grad[r * c..(r + 1) * c];
            for (gi, &xi) in g.iter_mut().zip(row) {
                *gi = (xi - lse).exp() * inv;
            }
            g[t] -= inv;
        }
        total *= inv;
    }
    tape.fused_scalar(total, vec![(logits, grad)])
}

/// Masked-LM loss: mean cross-entropy over positions whose label is not
/// [`crate::text::mask::NO_LABEL`]. With no such positions the loss is zero
/// and contributes no gradient.
pub fn mlm_loss<T: Float>(tape: &mut Tape<T>, logits: Var, labels: &[i64]) -> Result<Var> {
    let targets = labels
        .iter()
        .map(|&l| match l {
            IGNORE_TAG => Ok(None),
            l if l >= 0 => Ok(Some(l as usize)),
            l => Err(Error::contract(format!("MLM label {l} is neither a token id nor the ignore value"))),
        })
        .collect::<Result<Vec<_>>>()?;
    cross_entropy(tape, logits, &targets)
}

/// Sequence classification: `logits[B, C]`, one label per row.
pub fn classification_ce_loss<T: Float>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let targets: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    cross_entropy(tape, logits, &targets)
}

/// Per-token cross-entropy for tagging heads without a CRF.
pub fn token_ce_loss<T: Float>(tape: &mut Tape<T>, logits: Var, tags: &[i64]) -> Result<Var> {
    mlm_loss(tape, logits, tags)
}

fn log_softmax<T: Float>(row: &[T], temperature: T) -> Vec<T> {
    let scaled: Vec<T> = row.iter().map(|&x| x / temperature).collect();
    let lse = logsumexp(&scaled);
    scaled.into_iter().map(|x| x - lse).collect()
}

/// `Σ_rows w_r KL(softmax(t_r/T) ‖ softmax(s_r/T)) / Σ w_r`.
fn weighted_kl<T: Float>(tape: &mut Tape<T>, teacher: &[T], student: Var, weights: &[u8], temperature: f64) -> Result<Var> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    let (rows, c) = rows_of(tape, student)?;
    let s = tape.value(student);
    if teacher.len() != s.len() || weights.len() != rows {
        return Err(Error::Shape {
            op: "kl",
            left: tape.shape(student).to_vec(),
            right: vec![teacher.len(), weights.len()],
        });
    }
    let temp = T::lit(temperature);
    let count = weights.iter().filter(|&&w| w != 0).count();
    let mut grad = vec![T::zero(); s.len()];
    let mut total = T::zero();
    if count > 0 {
        let inv = T::one() / T::lit(count as f64);
        for r in (0..rows).filter(|&r| weights[r] != 0) {
            let lp = log_softmax(&teacher[r * c..(r + 1) * c], temp);
            let lq = log_softmax(&s[r * c..(r + 1) * c], temp);
            let g = &mut grad[r * c..(r + 1) * c];
            for j in 0..c {
                let p = lp[j].exp();
                if p > T::zero() {
                    total += p * (lp[j] - lq[j]);
                }
                g[j] = (lq[j].exp() - p) / temp * inv;
            }
        }
        total *= inv;
    }
    tape.fused_scalar(total, vec![(student, grad)])
}

/// Soft-target distillation for sequence outputs: mean over rows of
/// `KL(softmax(teacher/T) ‖ softmax(student/T))`. Teacher logits are
/// constants.
pub fn kl_logits_loss<T: Float>(tape: &mut Tape<T>, teacher: &[T], student: Var, temperature: f64) -> Result<Var> {
    let (rows, _) = rows_of(tape, student)?;
    weighted_kl(tape, teacher, student, &vec![1; rows], temperature)
}

/// Token-level KL averaged over positions where `mask` is non-zero.
pub fn token_kl_loss<T: Float>(
    tape: &mut Tape<T>,
    teacher: &[T],
    student: Var,
    mask: &[u8],
    temperature: f64,
) -> Result<Var> {
    weighted_kl(tape, teacher, student, mask, temperature)
}

/// Mean CRF negative log-likelihood over a batch.
///
/// `emissions` is `[B, S, K]`; `mask` (`B*S`) selects the scored positions of
/// each sequence and `tags` gives their gold tags. Every sequence must have
/// at least one scored position.
pub fn crf_nll<T: Float>(
    tape: &mut Tape<T>,
    emissions: Var,
    crf_vars: (Var, Var, Var),
    tags: &[i64],
    mask: &[u8],
) -> Result<Var> {
    let shape = tape.shape(emissions).to_vec();
    if shape.len() != 3 || tags.len() != shape[0] * shape[1] || mask.len() != tags.len() {
        return Err(Error::Shape {
            op: "crf_nll",
            left: shape,
            right: vec![tags.len(), mask.len()],
        });
    }
    let (b, s, k) = (shape[0], shape[1], shape[2]);
    let (tv, sv, ev) = crf_vars;
    let trans = tape.value(tv).to_vec();
    let start = tape.value(sv).to_vec();
    let end = tape.value(ev).to_vec();
    let crf = CrfParams::new(&trans, &start, &end)?;
    if crf.k != k {
        return Err(Error::Shape {
            op: "crf_nll",
            left: shape,
            right: vec![crf.k],
        });
    }
    let em = tape.value(emissions);
    let inv = T::one() / T::lit(b as f64);
    let mut g_em = vec![T::zero(); em.len()];
    let mut g_trans = vec![T::zero(); k * k];
    let mut g_start = vec![T::zero(); k];
    let mut g_end = vec![T::zero(); k];
    let mut total = T::zero();
    for bi in 0..b {
        let span = bi * s..(bi + 1) * s;
        let positions: Vec<usize> = span.clone().filter(|&p| mask[p] != 0).collect();
        if positions.is_empty() {
            return Err(Error::contract(format!("sequence {bi} has no scored positions")));
        }
        let gold = positions
            .iter()
            .map(|&p| {
                usize::try_from(tags[p]).ok().filter(|&t| t < k).ok_or(Error::Index {
                    what: "tag",
                    index: tags[p].max(0) as usize,
                    size: k,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let seq_em: Vec<T> = positions.iter().flat_map(|&p| em[p * k..(p + 1) * k].iter().copied()).collect();
        let m = crf::marginals(&seq_em, &crf)?;
        total += m.log_z - crf::path_score(&seq_em, &gold, &crf)?;
        for (i, &p) in positions.iter().enumerate() {
            for j in 0..k {
                g_em[p * k + j] += m.unary[i * k + j] * inv;
            }
            g_em[p * k + gold[i]] -= inv;
        }
        for (g, &pm) in g_trans.iter_mut().zip(&m.pairwise) {
            *g += pm * inv;
        }
        for w in gold.windows(2) {
            g_trans[w[0] * k + w[1]] -= inv;
        }
        let n = positions.len();
        for j in 0..k {
            g_start[j] += m.unary[j] * inv;
            g_end[j] += m.unary[(n - 1) * k + j] * inv;
        }
        g_start[gold[0]] -= inv;
        g_end[gold[n - 1]] -= inv;
    }
    tape.fused_scalar(
        total * inv,
        vec![(emissions, g_em), (tv, g_trans), (sv, g_start), (ev, g_end)],
    )
}

/// Which target the self-training stage learns from and whether the masked-LM
/// term is added.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossVariant {
    #[serde(rename = "LabelCE_plus_MLM")]
    LabelCePlusMlm,
    #[serde(rename = "LabelCE_only")]
    LabelCeOnly,
    #[serde(rename = "LogitsKL_plus_MLM")]
    LogitsKlPlusMlm,
    #[serde(rename = "LogitsKL_only")]
    LogitsKlOnly,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::LabelCePlusMlm,
        LossVariant::LabelCeOnly,
        LossVariant::LogitsKlPlusMlm,
        LossVariant::LogitsKlOnly,
    ];

    pub fn uses_mlm(self) -> bool {
        matches!(self, LossVariant::LabelCePlusMlm | LossVariant::LogitsKlPlusMlm)
    }

    pub fn uses_logits(self) -> bool {
        matches!(self, LossVariant::LogitsKlPlusMlm | LossVariant::LogitsKlOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::LabelCePlusMlm => "LabelCE_plus_MLM",
            LossVariant::LabelCeOnly => "LabelCE_only",
            LossVariant::LogitsKlPlusMlm => "LogitsKL_plus_MLM",
            LossVariant::LogitsKlOnly => "LogitsKL_only",
        }
    }
}

/// Task term plus, for the `_plus_MLM` variants, the masked-LM term with
/// equal weight.
pub fn combined_loss<T: Float>(tape: &mut Tape<T>, variant: LossVariant, task: Var, mlm: Option<Var>) -> Result<Var> {
    match (variant.uses_mlm(), mlm) {
        (true, Some(m)) => tape.add(task, m),
        (true, None) => Err(Error::contract(format!("{} needs an MLM loss term", variant.name()))),
        (false, _) => Ok(task),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], data: &[f64]) -> Var {
        tape.leaf(&Tensor::new(shape.to_vec(), data.to_vec()).unwrap().with_grad())
    }

    /// Central finite differences of `f` around `x`.
    fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn ce_matches_hand_value_and_gradient() {
        let x = [1.0, 2.0, 0.5, -1.0, 0.0, 3.0];
        let eval = |x: &[f64]| {
            let mut t = Tape::new();
            let v = leaf(&mut t, &[2, 3], x);
            let l = classification_ce_loss(&mut t, v, &[1, 2]).unwrap();
            t.scalar(l)
        };
        let row = |r: &[f64], y: usize| logsumexp(r) - r[y];
        let expected = (row(&x[..3], 1) + row(&x[3..], 2)) / 2.0;
        assert!((eval(&x) - expected).abs() < 1e-12);
        let mut t = Tape::new();
        let v = leaf(&mut t, &[2, 3], &x);
        let l = classification_ce_loss(&mut t, v, &[1, 2]).unwrap();
        t.backward(l).unwrap();
        close(t.grad(v).unwrap(), &numeric_grad(&x, eval), 1e-6);
    }

    #[test]
    fn ce_out_of_range_label() {
        let mut t = Tape::<f64>::new();
        let v = leaf(&mut t, &[1, 3], &[0.0; 3]);
        assert!(classification_ce_loss(&mut t, v, &[3]).is_err());
    }

    #[test]
    fn mlm_ignores_unlabelled_positions() {
        let x = [0.3, -0.2, 1.5, 0.0, 2.0, -1.0];
        let mut t = Tape::new();
        let v = leaf(&mut t, &[1, 2, 3], &x);
        let l = mlm_loss(&mut t, v, &[-1, 2]).unwrap();
        assert!((t.scalar(l) - (logsumexp(&x[3..]) - x[5])).abs() < 1e-12);
        t.backward(l).unwrap();
        assert!(t.grad(v).unwrap()[..3].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mlm_without_targets_is_zero() {
        let mut t = Tape::new();
        let v = leaf(&mut t, &[2, 4], &[1.0; 8]);
        let l = mlm_loss(&mut t, v, &[-1, -1]).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        t.backward(l).unwrap();
        assert!(t.grad(v).unwrap().iter().all(|&g| g == 0.0));
        assert!(mlm_loss(&mut t, v, &[-2, 0]).is_err());
    }

    #[test]
    fn kl_hand_value() {
        // teacher (0, ln 3) -> (1/4, 3/4); student (0, 0) -> (1/2, 1/2)
        let teacher = [0.0, 3f64.ln()];
        let mut t = Tape::new();
        let v = leaf(&mut t, &[1, 2], &[0.0, 0.0]);
        let l = kl_logits_loss(&mut t, &teacher, v, 1.0).unwrap();
        let expected = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
        assert!((t.scalar(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_of_identical_logits_is_exactly_zero() {
        let z = [0.3, -1.2, 4.0, 0.0, 0.1, 0.2];
        let mut t = Tape::new();
        let v = leaf(&mut t, &[2, 3], &z);
        let l = kl_logits_loss(&mut t, &z, v, 1.0).unwrap();
        assert_eq!(t.scalar(l), 0.0);
    }

    #[test]
    fn kl_gradient_with_temperature() {
        let teacher = [0.5, -0.3, 1.0, 2.0, 0.0, -2.0];
        let x = [0.1, 0.2, -0.4, 1.0, 1.5, 0.0];
        for temp in [1.0, 2.5] {
            let eval = |x: &[f64]| {
                let mut t = Tape::new();
                let v = leaf(&mut t, &[2, 3], x);
                let l = kl_logits_loss(&mut t, &teacher, v, temp).unwrap();
                t.scalar(l)
            };
            let mut t = Tape::new();
            let v = leaf(&mut t, &[2, 3], &x);
            let l = kl_logits_loss(&mut t, &teacher, v, temp).unwrap();
            t.backward(l).unwrap();
            close(t.grad(v).unwrap(), &numeric_grad(&x, eval), 1e-6);
        }
        let mut t = Tape::new();
        let v = leaf(&mut t, &[2, 3], &x);
        assert!(kl_logits_loss(&mut t, &teacher, v, 0.0).is_err());
    }

    #[test]
    fn token_kl_averages_unmasked_rows() {
        let teacher = [0.0, 3f64.ln(), 5.0, -5.0];
        let mut t = Tape::new();
        let v = leaf(&mut t, &[1, 2, 2], &[0.0; 4]);
        let l = token_kl_loss(&mut t, &teacher, v, &[1, 0], 1.0).unwrap();
        let expected = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
        assert!((t.scalar(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn crf_nll_gradient_matches_finite_differences() {
        let (b, s, k) = (2, 4, 3);
        let em: Vec<f64> = (0..b * s * k).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.2).collect();
        let trans: Vec<f64> = (0..k * k).map(|i| ((i * 5 % 7) as f64 - 3.0) * 0.3).collect();
        let start = vec![0.1, -0.2, 0.3];
        let end = vec![-0.3, 0.0, 0.2];
        let tags = [-1, 0, 2, -1, -1, 1, 1, 0];
        let mask = [0, 1, 1, 0, 0, 1, 1, 1];
        let all: Vec<f64> = [em.clone(), trans.clone(), start.clone(), end.clone()].concat();
        let eval = |x: &[f64]| {
            let mut t = Tape::new();
            let e = leaf(&mut t, &[b, s, k], &x[..24]);
            let tr = leaf(&mut t, &[k, k], &x[24..33]);
            let st = leaf(&mut t, &[k], &x[33..36]);
            let en = leaf(&mut t, &[k], &x[36..]);
            let l = crf_nll(&mut t, e, (tr, st, en), &tags, &mask).unwrap();
            t.scalar(l)
        };
        let mut t = Tape::new();
        let e = leaf(&mut t, &[b, s, k], &em);
        let tr = leaf(&mut t, &[k, k], &trans);
        let st = leaf(&mut t, &[k], &start);
        let en = leaf(&mut t, &[k], &end);
        let l = crf_nll(&mut t, e, (tr, st, en), &tags, &mask).unwrap();
        t.backward(l).unwrap();
        let analytic: Vec<f64> = [e, tr, st, en].iter().flat_map(|&v| t.grad(v).unwrap().to_vec()).collect();
        close(&analytic, &numeric_grad(&all, eval), 1e-6);
        // padding positions get no gradient
        assert!(t.grad(e).unwrap()[..3].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn crf_nll_rejects_empty_sequences() {
        let mut t = Tape::<f64>::new();
        let e = leaf(&mut t, &[1, 2, 2], &[0.0; 4]);
        let tr = leaf(&mut t, &[2, 2], &[0.0; 4]);
        let st = leaf(&mut t, &[2], &[0.0; 2]);
        let en = leaf(&mut t, &[2], &[0.0; 2]);
        assert!(crf_nll(&mut t, e, (tr, st, en), &[-1, -1], &[0, 0]).is_err());
        assert!(crf_nll(&mut t, e, (tr, st, en), &[5, 0], &[1, 1]).is_err());
    }

    #[test]
    fn combined_needs_mlm_only_when_asked() {
        let mut t = Tape::<f64>::new();
        let a = leaf(&mut t, &[1], &[2.0]);
        let m = leaf(&mut t, &[1], &[0.5]);
        let c = combined_loss(&mut t, LossVariant::LabelCePlusMlm, a, Some(m)).unwrap();
        assert_eq!(t.scalar(c), 2.5);
        assert!(combined_loss(&mut t, LossVariant::LogitsKlPlusMlm, a, None).is_err());
        let c = combined_loss(&mut t, LossVariant::LogitsKlOnly, a, Some(m)).unwrap();
        assert_eq!(t.scalar(c), 2.0);
        assert_eq!(
            serde_json::to_string(&LossVariant::LogitsKlPlusMlm).unwrap(),
            "\"LogitsKL_plus_MLM\""
        );
    }
}
