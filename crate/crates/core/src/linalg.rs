//! Small dense helpers for the invertible 1x1 mixing layers.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::real::Real;

/// Random orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Array2<f64> {
    loop {
        let a = Array2::from_shape_fn((c, c), |_| rng.sample::<f64, _>(StandardNormal));
        let mut q = Array2::<f64>::zeros((c, c));
        let mut ok = true;
        for j in 0..c {
            let mut v = a.column(j).to_owned();
            for k in 0..j {
                let qk = q.column(k);
                let d = qk.dot(&v);
                v.scaled_add(-d, &qk);
            }
            let norm = v.dot(&v).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            q.column_mut(j).assign(&(v / norm));
        }
        if ok {
            return q;
        }
    }
}

/// LU decomposition with partial pivoting: returns `(perm, l, u)` with
/// `a = P l u`, where row `i` of `P m` is row `perm[i]` of `m`.
pub fn plu(a: &Array2<f64>) -> (Vec<usize>, Array2<f64>, Array2<f64>) {
    let c = a.nrows();
    let mut u = a.clone();
    let mut order: Vec<usize> = (0..c).collect();
    let mut l = Array2::<f64>::eye(c);
    for k in 0..c {
        let pivot = (k..c)
            .max_by(|&i, &j| u[[i, k]].abs().total_cmp(&u[[j, k]].abs()))
            .expect("non-empty");
        if pivot != k {
            for j in 0..c {
                u.swap([k, j], [pivot, j]);
            }
            for j in 0..k {
                l.swap([k, j], [pivot, j]);
            }
            order.swap(k, pivot);
        }
        for i in k + 1..c {
            let f = u[[i, k]] / u[[k, k]];
            l[[i, k]] = f;
            for j in k..c {
                u[[i, j]] -= f * u[[k, j]];
            }
        }
    }
    // `order[i]` is the row of `a` that ended up at row `i` of `l u`, so
    // `a[order[i]] = (l u)[i]`; invert to express a = P (l u).
    let mut perm = vec![0; c];
    for (i, &r) in order.iter().enumerate() {
        perm[r] = i;
    }
    (perm, l, u)
}

/// Inverse of a lower-triangular matrix with unit diagonal.
pub fn inv_unit_lower<T: Real>(l: &Array2<T>) -> Array2<T> {
    let c = l.nrows();
    let mut inv = Array2::<T>::eye(c);
    for col in 0..c {
        for i in col + 1..c {
            let mut s = T::zero();
            for k in col..i {
                s += l[[i, k]] * inv[[k, col]];
            }
            inv[[i, col]] = -s;
        }
    }
    inv
}

/// Inverse of an upper-triangular matrix with nonzero diagonal.
pub fn inv_upper<T: Real>(u: &Array2<T>) -> Array2<T> {
    let c = u.nrows();
    let mut inv = Array2::<T>::zeros((c, c));
    for col in 0..c {
        inv[[col, col]] = T::one() / u[[col, col]];
        for i in (0..col).rev() {
            let mut s = T::zero();
            for k in i + 1..=col {
                s += u[[i, k]] * inv[[k, col]];
            }
            inv[[i, col]] = -s / u[[i, i]];
        }
    }
    inv
}
