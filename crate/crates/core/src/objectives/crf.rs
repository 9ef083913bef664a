//! Linear-chain CRF: log-partition by the forward recursion, exact marginals
//! by forward-backward, and Viterbi decoding.
//!
//! A path `y` over `n` positions scores
//! `start[y0] + Σ em[t][yt] + Σ trans[y(t-1)][yt] + end[y(n-1)]`.

use crate::error::{Error, Result};
use crate::tensor::{logsumexp, Float};

/// Borrowed CRF parameters for `k` tags; `trans` is row-major `[from, to]`.
#[derive(Clone, Copy, Debug)]
pub struct CrfParams<'a, T> {
    pub trans: &'a [T],
    pub start: &'a [T],
    pub end: &'a [T],
    pub k: usize,
}

impl<'a, T: Float> CrfParams<'a, T> {
    pub fn new(trans: &'a [T], start: &'a [T], end: &'a [T]) -> Result<Self> {
        let k = start.len();
        if k == 0 || end.len() != k || trans.len() != k * k {
            return Err(Error::Shape {
                op: "crf params",
                left: vec![trans.len()],
                right: vec![start.len(), end.len()],
            });
        }
        Ok(Self { trans, start, end, k })
    }

    fn t(&self, from: usize, to: usize) -> T {
        self.trans[from * self.k + to]
    }
}

fn check_emissions<T: Float>(em: &[T], crf: &CrfParams<T>) -> Result<usize> {
    if em.is_empty() || em.len() % crf.k != 0 {
        return Err(Error::contract(format!(
            "CRF needs at least one unmasked position with {} scores each, got {} values",
            crf.k,
            em.len()
        )));
    }
    Ok(em.len() / crf.k)
}

/// Keeps the rows of `em[seq, k]` whose mask entry is non-zero.
pub fn select_positions<T: Float>(em: &[T], mask: &[u8], k: usize) -> Vec<T> {
    em.chunks(k)
        .zip(mask)
        .filter(|(_, &m)| m != 0)
        .flat_map(|(row, _)| row.iter().copied())
        .collect()
}

pub fn path_score<T: Float>(em: &[T], tags: &[usize], crf: &CrfParams<T>) -> Result<T> {
    let n = check_emissions(em, crf)?;
    if tags.len() != n {
        return Err(Error::contract(format!("{} tags for {n} positions", tags.len())));
    }
    if let Some(&bad) = tags.iter().find(|&&t| t >= crf.k) {
        return Err(Error::Index {
            what: "tag set",
            index: bad,
            size: crf.k,
        });
    }
    let k = crf.k;
    let mut s = crf.start[tags[0]] + crf.end[tags[n - 1]];
    for t in 0..n {
        s += em[t * k + tags[t]];
        if t > 0 {
            s += crf.t(tags[t - 1], tags[t]);
        }
    }
    Ok(s)
}

/// Forward scores `alpha[t][j]`.
fn forward<T: Float>(em: &[T], n: usize, crf: &CrfParams<T>) -> Vec<T> {
    let k = crf.k;
    let mut alpha = vec![T::zero(); n * k];
    for j in 0..k {
        alpha[j] = crf.start[j] + em[j];
    }
    let mut buf = vec![T::zero(); k];
    for t in 1..n {
        for j in 0..k {
            for i in 0..k {
                buf[i] = alpha[(t - 1) * k + i] + crf.t(i, j);
            }
            alpha[t * k + j] = logsumexp(&buf) + em[t * k + j];
        }
    }
    alpha
}

/// `log Σ_paths exp(score)` over the positions of `em[n, k]`.
pub fn log_partition<T: Float>(em: &[T], crf: &CrfParams<T>) -> Result<T> {
    let n = check_emissions(em, crf)?;
    let alpha = forward(em, n, crf);
    let k = crf.k;
    let last: Vec<T> = (0..k).map(|j| alpha[(n - 1) * k + j] + crf.end[j]).collect();
    Ok(logsumexp(&last))
}

/// Masked variant: only positions with a non-zero mask take part.
pub fn log_partition_masked<T: Float>(em: &[T], mask: &[u8], crf: &CrfParams<T>) -> Result<T> {
    if em.len() != mask.len() * crf.k {
        return Err(Error::contract("emission rows and mask differ in length"));
    }
    log_partition(&select_positions(em, mask, crf.k), crf)
}

/// Posterior quantities needed for the NLL gradient.
#[derive(Clone, Debug)]
pub struct Marginals<T> {
    pub log_z: T,
    /// `p(y_t = j)`, `[n, k]`.
    pub unary: Vec<T>,
    /// `Σ_t p(y_{t-1} = i, y_t = j)`, `[k, k]`.
    pub pairwise: Vec<T>,
}

pub fn marginals<T: Float>(em: &[T], crf: &CrfParams<T>) -> Result<Marginals<T>> {
    let n = check_emissions(em, crf)?;
    let k = crf.k;
    let alpha = forward(em, n, crf);
    let mut beta = vec![T::zero(); n * k];
    beta[(n - 1) * k..].copy_from_slice(crf.end);
    let mut buf = vec![T::zero(); k];
    for t in (0..n - 1).rev() {
        for i in 0..k {
            for j in 0..k {
                buf[j] = crf.t(i, j) + em[(t + 1) * k + j] + beta[(t + 1) * k + j];
            }
            beta[t * k + i] = logsumexp(&buf);
        }
    }
    let last: Vec<T> = (0..k).map(|j| alpha[(n - 1) * k + j] + crf.end[j]).collect();
    let log_z = logsumexp(&last);
    let unary = alpha.iter().zip(&beta).map(|(&a, &b)| (a + b - log_z).exp()).collect();
    let mut pairwise = vec![T::zero(); k * k];
    for t in 1..n {
        for i in 0..k {
            for j in 0..k {
                pairwise[i * k + j] +=
                    (alpha[(t - 1) * k + i] + crf.t(i, j) + em[t * k + j] + beta[t * k + j] - log_z).exp();
            }
        }
    }
    Ok(Marginals { log_z, unary, pairwise })
}

/// Highest-scoring path; among equal-scoring paths the lexicographically
/// smallest (lowest tag ids first) wins.
pub fn viterbi<T: Float>(em: &[T], crf: &CrfParams<T>) -> Result<Vec<usize>> {
    let n = check_emissions(em, crf)?;
    let k = crf.k;
    // best[t][i]: best score of positions t.. given y_t = i
    let mut best = vec![T::zero(); n * k];
    for i in 0..k {
        best[(n - 1) * k + i] = em[(n - 1) * k + i] + crf.end[i];
    }
    for t in (0..n - 1).rev() {
        for i in 0..k {
            let m = (0..k)
                .map(|j| crf.t(i, j) + best[(t + 1) * k + j])
                .fold(T::neg_infinity(), T::max);
            best[t * k + i] = em[t * k + i] + m;
        }
    }
    let first_max = |vals: &mut dyn Iterator<Item = T>| {
        let mut arg = 0;
        let mut top = T::neg_infinity();
        for (i, v) in vals.enumerate() {
            if v > top {
                top = v;
                arg = i;
            }
        }
        arg
    };
    let mut path = Vec::with_capacity(n);
    path.push(first_max(&mut (0..k).map(|i| crf.start[i] + best[i])));
    for t in 1..n {
        let prev = path[t - 1];
        path.push(first_max(&mut (0..k).map(|j| crf.t(prev, j) + best[t * k + j])));
    }
    Ok(path)
}

pub fn viterbi_masked<T: Float>(em: &[T], mask: &[u8], crf: &CrfParams<T>) -> Result<Vec<usize>> {
    if em.len() != mask.len() * crf.k {
        return Err(Error::contract("emission rows and mask differ in length"));
    }
    viterbi(&select_positions(em, mask, crf.k), crf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(k: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (vec![0.0; k * k], vec![0.0; k], vec![0.0; k])
    }

    #[test]
    fn single_position_is_logsumexp_of_unaries() {
        let (tr, _, _) = uniform(3);
        let start = [0.1, -0.3, 0.7];
        let end = [0.2, 0.0, -1.0];
        let em = [1.0, 2.0, 0.5];
        let crf = CrfParams::new(&tr, &start, &end).unwrap();
        let expected = logsumexp(&[0.1 + 1.0 + 0.2, -0.3 + 2.0, 0.7 + 0.5 - 1.0]);
        assert!((log_partition(&em, &crf).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn all_zero_scores_count_paths() {
        let (tr, s, e) = uniform(3);
        let crf = CrfParams::new(&tr, &s, &e).unwrap();
        let em = vec![0.0; 5 * 3];
        assert!((log_partition(&em, &crf).unwrap() - 5.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mask_selects_positions_and_rejects_empty() {
        let (tr, s, e) = uniform(2);
        let crf = CrfParams::new(&tr, &s, &e).unwrap();
        let em = [9.0, 9.0, 0.0, 0.0, 0.0, 0.0];
        let z = log_partition_masked(&em, &[0, 1, 1], &crf).unwrap();
        assert!((z - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(log_partition_masked(&em, &[0, 0, 0], &crf).is_err());
    }

    #[test]
    fn single_tag_and_dominant_emissions() {
        let (tr, s, e) = uniform(1);
        let crf = CrfParams::new(&tr, &s, &e).unwrap();
        assert_eq!(viterbi(&[0.3, -1.0, 2.0], &crf).unwrap(), vec![0, 0, 0]);
        let (tr, s, e) = uniform(3);
        let crf = CrfParams::new(&tr, &s, &e).unwrap();
        let em = [0.0, 1.0, 0.5, 2.0, 0.0, 0.1, -1.0, -2.0, 3.0];
        assert_eq!(viterbi(&em, &crf).unwrap(), vec![1, 0, 2]);
    }

    #[test]
    fn marginals_are_distributions() {
        let tr = [0.3, -0.2, 0.5, 0.1];
        let s = [0.0, 0.4];
        let e = [-0.1, 0.2];
        let crf = CrfParams::new(&tr, &s, &e).unwrap();
        let em = [0.1, 0.9, -0.3, 0.2, 0.4, 0.4];
        let m = marginals(&em, &crf).unwrap();
        for row in m.unary.chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((m.pairwise.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert!((m.log_z - log_partition(&em, &crf).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn bad_tags_rejected() {
        let (tr, s, e) = uniform(2);
        let crf = CrfParams::new(&tr, &s, &e).unwrap();
        assert!(path_score(&[0.0, 0.0], &[2], &crf).is_err());
        assert!(path_score(&[0.0, 0.0], &[0, 1], &crf).is_err());
    }
}
