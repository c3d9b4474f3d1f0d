//! Small dense linear-algebra helpers shared by the solver, hypergradient and
//! diagnostics code. Everything here works on K×K or d×K problems with K in
//! the single digits, so clarity wins over blocking or BLAS calls.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Solves `A X = B` for symmetric positive definite `A`.
pub fn cholesky_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("matrix is not positive definite".into()))?;
    Ok(chol.solve(b))
}

/// Solves `A x = b` for symmetric positive definite `A`.
pub fn cholesky_solve_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("matrix is not positive definite".into()))?;
    Ok(chol.solve(b))
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn symmetric_eigen_range(a: &DMatrix<f64>) -> (f64, f64) {
    let eig = a.clone().symmetric_eigen();
    let min = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let max = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// Smallest singular value of a d×K matrix. Zero whenever d < K.
pub fn smallest_singular_value(g: &DMatrix<f64>) -> f64 {
    if g.nrows() < g.ncols() {
        return 0.0;
    }
    let sv = g.clone().singular_values();
    sv.iter().copied().fold(f64::INFINITY, f64::min).max(0.0)
}

/// Estimates the spectral norm of a symmetric linear operator by power
/// iteration from a seeded Gaussian start vector.
pub fn power_iteration<F>(mut op: F, dim: usize, iters: usize, seed: u64) -> Result<f64>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    if dim == 0 {
        return Err(Error::Empty("operator dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..iters.max(1) {
        let hv = op(&v)?;
        if !hv.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("power iteration"));
        }
        let norm = hv.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        estimate = norm;
        v = hv / norm;
    }
    Ok(estimate)
}

/// Angle in radians between two vectors, stable for nearly parallel inputs.
pub fn angle_between(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return if na == nb {
            0.0
        } else {
            std::f64::consts::FRAC_PI_2
        };
    }
    let ua = a / na;
    let ub = b / nb;
    2.0 * (&ua - &ub).norm().atan2((&ua + &ub).norm())
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    project_capped_simplex(v, 1.0)
}

/// Projection onto `{w : w_i ≥ floor, Σ w_i = 1}`.
pub fn project_simplex_with_floor(v: &DVector<f64>, floor: f64) -> Result<DVector<f64>> {
    let k = v.len() as f64;
    if floor < 0.0 || floor * k >= 1.0 {
        return Err(Error::InvalidConfig(format!(
            "simplex floor {floor} infeasible for {} coordinates",
            v.len()
        )));
    }
    let shifted = v.map(|x| x - floor);
    let w = project_capped_simplex(&shifted, 1.0 - floor * k);
    Ok(w.map(|x| x + floor))
}

fn project_capped_simplex(v: &DVector<f64>, total: f64) -> DVector<f64> {
    let mut sorted: Vec<f64> = v.iter().copied().collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, &x) in sorted.iter().enumerate() {
        cumsum += x;
        let t = (cumsum - total) / (j as f64 + 1.0);
        if x - t > 0.0 {
            tau = t;
        }
    }
    v.map(|x| (x - tau).max(0.0))
}

/// The minimum-norm point of the convex hull of the columns of `G`,
/// described through the Gram matrix `GᵀG`.
#[derive(Debug, Clone)]
pub struct MinNormPoint {
    pub weights: DVector<f64>,
    pub norm: f64,
}

/// Minimises `‖Gw‖` over the probability simplex given `gram = GᵀG`.
///
/// Accelerated projected gradient identifies the support. The equality
/// constrained problem on that support is then solved exactly from its KKT
/// system and accepted once it is feasible and optimal, i.e.
/// `(GᵀGw)_i ≥ wᵀGᵀGw` for every `i` within `tolerance`. Small problems whose
/// support is never confirmed fall back to enumerating supports.
pub fn min_norm_simplex(gram: &DMatrix<f64>, tolerance: f64) -> MinNormPoint {
    let k = gram.nrows();
    let quad = |w: &DVector<f64>| w.dot(&(gram * w)).max(0.0);
    let finish = |w: DVector<f64>| {
        let norm = quad(&w).sqrt();
        MinNormPoint { weights: w, norm }
    };
    if k == 1 {
        return finish(DVector::from_element(1, 1.0));
    }
    let (_, lmax) = symmetric_eigen_range(gram);
    if lmax <= 0.0 {
        return MinNormPoint {
            weights: DVector::from_element(k, 1.0 / k as f64),
            norm: 0.0,
        };
    }
    let scale = gram.amax();
    let is_optimal = |w: &DVector<f64>| {
        let mw = gram * w;
        let value = w.dot(&mw);
        mw.iter().all(|&g| g >= value - tolerance * scale)
    };
    let step = 1.0 / (2.0 * lmax);

    let mut w = DVector::from_element(k, 1.0 / k as f64);
    let mut y = w.clone();
    let mut t = 1.0_f64;
    let mut best = quad(&w);
    for iter in 0..20_000 {
        let grad = 2.0 * (gram * &y);
        let w_next = project_simplex(&(&y - step * grad));
        let value = quad(&w_next);
        // adaptive restart keeps the accelerated iteration monotone
        if value > best {
            t = 1.0;
            y = w.clone();
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &w_next + ((t - 1.0) / t_next) * (&w_next - &w);
        w = w_next;
        best = value;
        t = t_next;
        if iter % 25 == 24 {
            if let Some(polished) = polish_support(gram, &w) {
                if is_optimal(&polished) {
                    return finish(polished);
                }
            }
        }
    }
    if let Some(polished) = polish_support(gram, &w) {
        if quad(&polished) <= best {
            w = polished;
        }
    }
    if !is_optimal(&w) && k <= 12 {
        if let Some(exact) = enumerate_supports(gram) {
            if quad(&exact) <= quad(&w) {
                w = exact;
            }
        }
    }
    finish(w)
}

fn enumerate_supports(gram: &DMatrix<f64>) -> Option<DVector<f64>> {
    let k = gram.nrows();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 1u32..(1 << k) {
        let seed = DVector::from_fn(k, |i, _| if mask & (1 << i) != 0 { 1.0 } else { 0.0 });
        if let Some(w) = polish_support(gram, &seed) {
            let value = w.dot(&(gram * &w));
            if best.as_ref().is_none_or(|(b, _)| value < *b) {
                best = Some((value, w));
            }
        }
    }
    best.map(|(_, w)| w)
}

fn polish_support(gram: &DMatrix<f64>, w: &DVector<f64>) -> Option<DVector<f64>> {
    let support: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 1e-12).collect();
    let s = support.len();
    if s == 0 {
        return None;
    }
    let mut kkt = DMatrix::zeros(s + 1, s + 1);
    for (a, &i) in support.iter().enumerate() {
        for (b, &j) in support.iter().enumerate() {
            kkt[(a, b)] = 2.0 * gram[(i, j)];
        }
        kkt[(a, s)] = 1.0;
        kkt[(s, a)] = 1.0;
    }
    let mut rhs = DVector::zeros(s + 1);
    rhs[s] = 1.0;
    let sol = kkt.lu().solve(&rhs)?;
    if sol.iter().any(|x| !x.is_finite()) || sol.rows(0, s).iter().any(|&x| x < 0.0) {
        return None;
    }
    let mut out = DVector::zeros(w.len());
    for (a, &i) in support.iter().enumerate() {
        out[i] = sol[a];
    }
    Some(out)
}
