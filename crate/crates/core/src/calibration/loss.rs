//! Distribution-correction losses on block outputs and attention maps.

use crate::error::{AbqError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Lower clamp for per-token cosines.
pub const COS_EPS: f64 = 1e-8;
/// Probability floor applied before renormalizing attention rows.
pub const PROB_EPS: f64 = 1e-10;
/// Allowed deviation of an attention row sum from 1.
pub const STOCHASTIC_TOL: f64 = 1e-6;

/// Quantized and full-precision outputs of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockOutputs<T> {
    pub d_q: Matrix<T>,
    pub d_fp: Matrix<T>,
    /// Full-precision block fed the quantized input.
    pub d_fp_star: Matrix<T>,
    /// One `tokens × tokens` map per head.
    pub attn_q: Vec<Matrix<T>>,
    pub attn_fp: Vec<Matrix<T>>,
}

fn same_shape<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AbqError::Shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Cosine of two rows, or `None` if either has zero norm.
///
/// `dot / sqrt(|a|²·|b|²)` makes identical rows come out exactly 1.
fn raw_cosine<T: Scalar>(a: &[T], b: &[T]) -> Option<T> {
    let denom = (dot(a, a) * dot(b, b)).sqrt();
    if denom > T::zero() && denom.is_finite() {
        Some(dot(a, b) / denom)
    } else {
        None
    }
}

/// Per-row cosine clamped to `[COS_EPS, 1]`; zero-norm rows give `COS_EPS`.
pub fn token_cosines<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Vec<T> {
    let eps = T::of(COS_EPS);
    (0..a.rows())
        .map(|i| match raw_cosine(a.row(i), b.row(i)) {
            Some(c) => c.max(eps).min(T::one()),
            None => {
                log::warn!("zero-norm token row {i} in cosine loss");
                eps
            }
        })
        .collect()
}

/// Mean over tokens of `−log cos(d_q, d_fp) − log cos(d_q, d_fp*)`.
pub fn dlc_loss<T: Scalar>(d_q: &Matrix<T>, d_fp: &Matrix<T>, d_fp_star: &Matrix<T>) -> Result<T> {
    same_shape(d_q, d_fp, "dlc d_fp")?;
    same_shape(d_q, d_fp_star, "dlc d_fp*")?;
    if d_q.rows() == 0 {
        return Err(AbqError::Shape("dlc on zero tokens".into()));
    }
    let c1 = token_cosines(d_q, d_fp);
    let c2 = token_cosines(d_q, d_fp_star);
    let total: T = c1.iter().zip(&c2).map(|(&a, &b)| -a.ln() - b.ln()).sum();
    Ok(total / T::of(d_q.rows() as f64))
}

/// Gradient of [`dlc_loss`] with respect to `d_q`.
pub fn dlc_grad<T: Scalar>(d_q: &Matrix<T>, d_fp: &Matrix<T>, d_fp_star: &Matrix<T>) -> Matrix<T> {
    let n = T::of(d_q.rows() as f64);
    let eps = T::of(COS_EPS);
    let mut g = Matrix::zeros(d_q.rows(), d_q.cols());
    for i in 0..d_q.rows() {
        let q = d_q.row(i);
        let qq = dot(q, q);
        for r in [d_fp.row(i), d_fp_star.row(i)] {
            let Some(c) = raw_cosine(q, r) else { continue };
            if c <= eps || c >= T::one() {
                continue;
            }
            let rr = dot(r, r);
            let norms = (qq * rr).sqrt();
            // d(−log c)/dq = −(1/c)·(r/(|q||r|) − c·q/|q|²)
            for (j, gj) in g.row_mut(i).iter_mut().enumerate() {
                *gj -= (r[j] / norms - c * q[j] / qq) / (c * n);
            }
        }
    }
    g
}

fn check_stochastic<T: Scalar>(maps: &[Matrix<T>], what: &str) -> Result<()> {
    for (h, m) in maps.iter().enumerate() {
        for i in 0..m.rows() {
            let row = m.row(i);
            let s: f64 = row.iter().map(|v| v.as_f64()).sum();
            if (s - 1.0).abs() > STOCHASTIC_TOL
                || row.iter().any(|&v| v < T::zero() || !v.is_finite())
            {
                return Err(AbqError::NotStochastic(format!(
                    "{what} head {h} row {i} sums to {s}"
                )));
            }
        }
    }
    Ok(())
}

/// Floor at `PROB_EPS`, then renormalize.
fn floored<T: Scalar>(row: &[T]) -> (Vec<T>, T) {
    let eps = T::of(PROB_EPS);
    let f: Vec<T> = row.iter().map(|&v| v.max(eps)).collect();
    let s: T = f.iter().copied().sum();
    (f.iter().map(|&v| v / s).collect(), s)
}

/// `Σ (p − r)(log p − log r)`, i.e. `KL(p‖r) + KL(r‖p)`, on floored rows.
pub fn symmetric_kl<T: Scalar>(p: &[T], r: &[T]) -> T {
    let (p, _) = floored(p);
    let (r, _) = floored(r);
    p.iter()
        .zip(&r)
        .map(|(&a, &b)| (a - b) * (a.ln() - b.ln()))
        .sum()
}

fn check_maps<T: Scalar>(attn_q: &[Matrix<T>], attn_fp: &[Matrix<T>]) -> Result<()> {
    if attn_q.len() != attn_fp.len() {
        return Err(AbqError::Shape(format!(
            "{} quantized heads vs {} reference heads",
            attn_q.len(),
            attn_fp.len()
        )));
    }
    for (a, b) in attn_q.iter().zip(attn_fp) {
        same_shape(a, b, "akl head")?;
    }
    check_stochastic(attn_q, "quantized attention")?;
    check_stochastic(attn_fp, "reference attention")
}

/// Symmetric KL averaged over heads and query rows.
pub fn akl_loss<T: Scalar>(attn_q: &[Matrix<T>], attn_fp: &[Matrix<T>]) -> Result<T> {
    check_maps(attn_q, attn_fp)?;
    let rows: usize = attn_q.iter().map(|m| m.rows()).sum();
    if rows == 0 {
        return Ok(T::zero());
    }
    let total: T = attn_q
        .iter()
        .zip(attn_fp)
        .flat_map(|(a, b)| (0..a.rows()).map(move |i| symmetric_kl(a.row(i), b.row(i))))
        .sum();
    Ok(total / T::of(rows as f64))
}

/// Gradient of [`akl_loss`] with respect to each quantized map.
pub fn akl_grad<T: Scalar>(attn_q: &[Matrix<T>], attn_fp: &[Matrix<T>]) -> Vec<Matrix<T>> {
    let rows: usize = attn_q.iter().map(|m| m.rows()).sum();
    let n = T::of(rows.max(1) as f64);
    let eps = T::of(PROB_EPS);
    attn_q
        .iter()
        .zip(attn_fp)
        .map(|(a, b)| {
            let mut g = Matrix::zeros(a.rows(), a.cols());
            for i in 0..a.rows() {
                let (p, s) = floored(a.row(i));
                let (r, _) = floored(b.row(i));
                // d/dP_j of Σ (P − R)(ln P − ln R)
                let dp: Vec<T> = p
                    .iter()
                    .zip(&r)
                    .map(|(&pj, &rj)| pj.ln() - rj.ln() + T::one() - rj / pj)
                    .collect();
                let mean = dot(&dp, &p);
                for (j, gj) in g.row_mut(i).iter_mut().enumerate() {
                    if a[(i, j)] > eps {
                        *gj = (dp[j] - mean) / (s * n);
                    }
                }
            }
            g
        })
        .collect()
}

/// `dlc + akl`, each with unit weight.
pub fn total_loss<T: Scalar>(out: &BlockOutputs<T>) -> Result<T> {
    Ok(dlc_loss(&out.d_q, &out.d_fp, &out.d_fp_star)? + akl_loss(&out.attn_q, &out.attn_fp)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn dlc_is_zero_at_equality() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Matrix::<f64>::randn(7, 5, 1.0, &mut rng);
        assert_eq!(dlc_loss(&d, &d, &d).unwrap(), 0.0);
    }

    #[test]
    fn dlc_orthogonal_hits_the_floor() {
        let q = m(&[&[1.0, 0.0]]);
        let r = m(&[&[0.0, 1.0]]);
        let l = dlc_loss(&q, &r, &r).unwrap();
        assert!((l + 2.0 * COS_EPS.ln()).abs() < 1e-12);
    }

    #[test]
    fn dlc_zero_row_is_not_fatal() {
        let q = m(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let l = dlc_loss(&q, &q, &q).unwrap();
        assert!((l + COS_EPS.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_bin_kl_with_floor() {
        let q = vec![m(&[&[1.0, 0.0]])];
        let fp = vec![m(&[&[0.5, 0.5]])];
        let eps: f64 = 1e-10;
        let p = [1.0 / (1.0 + eps), eps / (1.0 + eps)];
        let expected: f64 =
            (p[0] - 0.5) * (p[0].ln() - 0.5f64.ln()) + (p[1] - 0.5) * (p[1].ln() - 0.5f64.ln());
        assert!((akl_loss(&q, &fp).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn akl_rejects_unnormalized_rows() {
        let q = vec![m(&[&[0.7, 0.7]])];
        assert!(matches!(akl_loss(&q, &q), Err(AbqError::NotStochastic(_))));
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Matrix::<f64>::randn(3, 4, 1.0, &mut rng);
        let fp = Matrix::<f64>::randn(3, 4, 1.0, &mut rng);
        let fs = q.add(&Matrix::randn(3, 4, 0.3, &mut rng));
        let g = dlc_grad(&q, &fp, &fs);
        let h = 1e-6;
        for e in 0..12 {
            let mut up = q.clone();
            up.as_mut_slice()[e] += h;
            let mut dn = q.clone();
            dn.as_mut_slice()[e] -= h;
            let fd =
                (dlc_loss(&up, &fp, &fs).unwrap() - dlc_loss(&dn, &fp, &fs).unwrap()) / (2.0 * h);
            let a = g.as_slice()[e];
            // cosines below the floor have zero gradient on both sides
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + a.abs()),
                "e={e} fd={fd} a={a}"
            );
        }

        let p = vec![m(&[&[0.2, 0.5, 0.3]])];
        let r = vec![m(&[&[0.6, 0.1, 0.3]])];
        let g = akl_grad(&p, &r);
        for j in 0..3 {
            let mut up = p[0].clone();
            up[(0, j)] += h;
            let mut dn = p[0].clone();
            dn[(0, j)] -= h;
            // off the simplex, so evaluate the unchecked sum directly
            let f = |x: &Matrix<f64>| symmetric_kl(x.row(0), r[0].row(0));
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - g[0][(0, j)]).abs() < 1e-6, "j={j}");
        }
    }
}
