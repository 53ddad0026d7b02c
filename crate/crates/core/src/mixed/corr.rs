//! Cholesky factors of 4×4 correlation matrices from six unconstrained
//! reals via canonical partial correlations, and the LKJ density.

use nalgebra::Matrix4;

use super::dual::Real;
use crate::error::{Error, Result};

/// Dimension of the correlation matrix.
pub const K: usize = 4;
/// Free coordinates of a `K × K` correlation Cholesky factor.
pub const N_CORR: usize = K * (K - 1) / 2;

/// Strictly lower entries in row-major order: `(1,0), (2,0), (2,1), (3,0), …`.
pub fn lower_pairs() -> [(usize, usize); N_CORR] {
    let mut out = [(0, 0); N_CORR];
    let mut k = 0;
    for i in 1..K {
        for j in 0..i {
            out[k] = (i, j);
            k += 1;
        }
    }
    out
}

/// `ln(1 − tanh² z) = 2 (ln 2 − |z| − ln(1 + e^{−2|z|}))`.
fn log_one_minus_tanh_sq<T: Real>(z: T) -> T {
    let a = z.abs();
    let e = (a.scale(-2.0)).exp();
    (T::from_f64(std::f64::consts::LN_2) - a - (T::from_f64(1.0) + e).ln()).scale(2.0)
}

/// Maps `z ∈ ℝ⁶` to a lower Cholesky factor `L` with unit-norm rows and
/// positive diagonal; returns `L` and `ln |∂ vec L / ∂ z|` over the
/// strictly lower entries.
pub fn cpc_cholesky<T: Real>(z: &[T]) -> ([[T; K]; K], T) {
    debug_assert_eq!(z.len(), N_CORR);
    let zero = T::from_f64(0.0);
    let one = T::from_f64(1.0);
    let mut l = [[zero; K]; K];
    l[0][0] = one;
    let mut log_jac = zero;
    let mut k = 0;
    for i in 1..K {
        // ln of the squared norm still available to row i.
        let mut log_rem = zero;
        for j in 0..i {
            let y = z[k].tanh();
            let log_one_minus_y2 = log_one_minus_tanh_sq(z[k]);
            log_jac = log_jac + log_one_minus_y2 + log_rem.scale(0.5);
            l[i][j] = y * log_rem.scale(0.5).exp();
            log_rem = log_rem + log_one_minus_y2;
            k += 1;
        }
        l[i][i] = log_rem.scale(0.5).exp();
    }
    (l, log_jac)
}

/// Inverse of [`cpc_cholesky`].
pub fn cholesky_to_cpc(l: &Matrix4<f64>) -> Result<[f64; N_CORR]> {
    validate_corr_cholesky(l)?;
    let mut z = [0.0; N_CORR];
    for (k, (i, j)) in lower_pairs().into_iter().enumerate() {
        let used: f64 = (0..j).map(|m| l[(i, m)] * l[(i, m)]).sum();
        let y = l[(i, j)] / (1.0 - used).sqrt();
        z[k] = y.atanh();
    }
    Ok(z)
}

/// `log LKJ(L; η)` for a Cholesky factor, up to its normalising constant:
/// `Σ_{i≥1} (K − i − 1 + 2(η − 1)) ln L_ii` (0-based `i`).
pub fn lkj_cholesky_log_density<T: Real>(l: &[[T; K]; K], eta: f64) -> T {
    let mut out = T::from_f64(0.0);
    for (i, row) in l.iter().enumerate().skip(1) {
        let power = (K - i - 1) as f64 + 2.0 * (eta - 1.0);
        out = out + row[i].ln().scale(power);
    }
    out
}

/// `log LKJ(C; η) = (η − 1) ln det C`, up to its normalising constant.
pub fn lkj_corr_log_density(corr: &Matrix4<f64>, eta: f64) -> f64 {
    (eta - 1.0) * corr.determinant().ln()
}

pub fn to_matrix(l: &[[f64; K]; K]) -> Matrix4<f64> {
    Matrix4::from_fn(|i, j| l[i][j])
}

/// Checks that `l` is lower triangular with positive diagonal and unit rows.
pub fn validate_corr_cholesky(l: &Matrix4<f64>) -> Result<()> {
    for i in 0..K {
        if l[(i, i)].partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::domain(format!("correlation factor diagonal {i} is not positive")));
        }
        for j in i + 1..K {
            if l[(i, j)] != 0.0 {
                return Err(Error::domain("correlation factor is not lower triangular"));
            }
        }
        let norm: f64 = l.row(i).iter().map(|v| v * v).sum();
        if (norm - 1.0).abs() > 1e-8 {
            return Err(Error::domain(format!("correlation factor row {i} has squared norm {norm}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use nalgebra::SMatrix;

    use super::*;
    use crate::samplers::{rwm_gibbs, FnTarget, GibbsBlock, GibbsBlockSpec, RwmConfig};

    const Z: [f64; N_CORR] = [0.3, -1.2, 0.5, 2.0, -0.1, 0.8];

    #[test]
    fn rows_have_unit_norm_and_roundtrip() {
        let (l, _) = cpc_cholesky(&Z);
        let m = to_matrix(&l);
        validate_corr_cholesky(&m).unwrap();
        let c = m * m.transpose();
        for i in 0..K {
            assert_relative_eq!(c[(i, i)], 1.0, epsilon = 1e-14);
        }
        let back = cholesky_to_cpc(&m).unwrap();
        for (a, b) in back.iter().zip(&Z) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_gives_identity() {
        let (l, lj) = cpc_cholesky(&[0.0; N_CORR]);
        assert_eq!(to_matrix(&l), Matrix4::identity());
        assert_eq!(lj, 0.0);
    }

    #[test]
    fn log_jacobian_matches_numerical_determinant() {
        let (_, lj) = cpc_cholesky(&Z);
        let pairs = lower_pairs();
        let h = 1e-6;
        let mut jac = SMatrix::<f64, N_CORR, N_CORR>::zeros();
        for c in 0..N_CORR {
            let mut up = Z;
            let mut dn = Z;
            up[c] += h;
            dn[c] -= h;
            let (lu, _) = cpc_cholesky(&up);
            let (ld, _) = cpc_cholesky(&dn);
            for (r, (i, j)) in pairs.iter().enumerate() {
                jac[(r, c)] = (lu[*i][*j] - ld[*i][*j]) / (2.0 * h);
            }
        }
        assert_relative_eq!(lj, jac.determinant().abs().ln(), epsilon = 1e-7);
    }

    #[test]
    fn log_jacobian_is_finite_for_large_inputs() {
        let (_, lj) = cpc_cholesky(&[30.0, -30.0, 0.0, 0.0, 25.0, 0.0]);
        assert!(lj.is_finite());
    }

    #[test]
    fn lkj_one_is_flat_on_correlations() {
        let (a, _) = cpc_cholesky(&Z);
        let (b, _) = cpc_cholesky(&[0.0; N_CORR]);
        let ca = to_matrix(&a) * to_matrix(&a).transpose();
        let cb = to_matrix(&b) * to_matrix(&b).transpose();
        assert_eq!(lkj_corr_log_density(&ca, 1.0), lkj_corr_log_density(&cb, 1.0));
        assert!(lkj_corr_log_density(&ca, 2.0) < lkj_corr_log_density(&cb, 2.0));
    }

    #[test]
    fn lkj_one_marginals_match_beta() {
        // Under LKJ(1) in four dimensions each correlation is 2·Beta(2, 2) − 1,
        // whose variance is 1/5.
        let target = FnTarget::new(N_CORR, |z: &[f64]| {
            let (l, lj) = cpc_cholesky(z);
            lkj_cholesky_log_density(&l, 1.0) + lj
        });
        let spec = GibbsBlockSpec::new(vec![GibbsBlock::new((0..N_CORR).collect(), 0.5).adaptive()]);
        let config = RwmConfig {
            chains: 3,
            burn_in: 5_000,
            iterations: 60_000,
            thin: 1,
            seed: 11,
            target_accept: 0.234,
        };
        let chains = rwm_gibbs(&target, &spec, &config, &vec![vec![0.0; N_CORR]; 3]).unwrap();
        let mut sum = [0.0; N_CORR];
        let mut count = 0.0;
        for c in &chains {
            for z in &c.draws {
                let (l, _) = cpc_cholesky(z);
                let m = to_matrix(&l);
                let corr = m * m.transpose();
                for (k, (i, j)) in lower_pairs().into_iter().enumerate() {
                    sum[k] += corr[(i, j)] * corr[(i, j)];
                }
                count += 1.0;
            }
        }
        for s in sum {
            assert!((s / count - 0.2).abs() < 0.015, "{}", s / count);
        }
    }
}
