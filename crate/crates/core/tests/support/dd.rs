//! Double-double reference for the Fréchet distance between Gaussians.
//!
//! Independent of the library route: the cross term uses a Cholesky factor
//! `A = L L^T` and the eigenvalues of `L^T B L` (similar to `A B`), found by
//! cyclic Jacobi rotations in ~106-bit arithmetic.

#![allow(dead_code)]

use twofloat::TwoFloat;

type M = Vec<Vec<TwoFloat>>;

fn tf(v: f64) -> TwoFloat {
    TwoFloat::from(v)
}

fn lift(a: &[Vec<f64>]) -> M {
    a.iter().map(|r| r.iter().map(|&v| tf(v)).collect()).collect()
}

fn cholesky(a: &M) -> M {
    let n = a.len();
    let mut l = vec![vec![tf(0.0); n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                assert!(s.hi() > 0.0, "matrix is not positive definite");
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    l
}

/// Eigenvalues of a symmetric matrix.
pub fn jacobi_eigenvalues(mut a: M) -> Vec<TwoFloat> {
    let n = a.len();
    let one = tf(1.0);
    for _ in 0..100 {
        let mut off = tf(0.0);
        let mut total = tf(0.0);
        for i in 0..n {
            for j in 0..n {
                let sq = a[i][j] * a[i][j];
                total += sq;
                if i != j {
                    off += sq;
                }
            }
        }
        if off.hi() <= 1e-60 * total.hi() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].hi() == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (tf(2.0) * a[p][q]);
                let t = one / (theta.abs() + (theta * theta + one).sqrt());
                let t = if theta.hi() < 0.0 { -t } else { t };
                let c = one / (t * t + one).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// `|mu_a - mu_b|^2 + tr A + tr B - 2 tr (A B)^{1/2}` with `A` positive definite.
pub fn frechet_oracle(mu_a: &[f64], cov_a: &[Vec<f64>], mu_b: &[f64], cov_b: &[Vec<f64>]) -> f64 {
    let n = mu_a.len();
    let (a, b) = (lift(cov_a), lift(cov_b));
    let l = cholesky(&a);
    // L^T B L
    let mut bl = vec![vec![tf(0.0); n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut s = tf(0.0);
            for k in 0..n {
                s += b[i][k] * l[k][j];
            }
            bl[i][j] = s;
        }
    }
    let mut m = vec![vec![tf(0.0); n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = tf(0.0);
            for k in 0..n {
                s += l[k][i] * bl[k][j];
            }
            m[i][j] = s;
            m[j][i] = s;
        }
    }
    let mut d = tf(0.0);
    for i in 0..n {
        let diff = tf(mu_a[i]) - tf(mu_b[i]);
        d += diff * diff + a[i][i] + b[i][i];
    }
    for ev in jacobi_eigenvalues(m) {
        if ev.hi() > 0.0 {
            d -= tf(2.0) * ev.sqrt();
        }
    }
    d.hi()
}
