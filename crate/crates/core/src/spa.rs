//! Seniority-zero (hardcore-boson) Hamiltonian and the separable pair
//! product state.
//!
//! Every spatial orbital is either doubly occupied or empty. The pair
//! ansatz puts exactly one boson in each orbital pair `(b, a)` with
//! amplitudes `(cos(θ/2), −sin(θ/2))`, so its energy is a closed-form
//! trigonometric polynomial in the angles.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chem::IntegralSet;
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;

/// Gradient norm at which the angle optimizer stops.
pub const THETA_GRAD_TOL: f64 = 1e-10;
pub const THETA_MAX_ITER: usize = 500;
/// Largest orbital count accepted by the dense oracle (C(12, 6) = 924).
pub const DOCI_MAX_ORBITALS: usize = 12;

/// Seniority-zero Hamiltonian coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct HcbCoefficients {
    /// `eps[p] = 2 h_pp + (pp|pp)`
    pub eps: Vec<f64>,
    /// `w[p][q] = 4 (pp|qq) − 2 (pq|pq)`, zero diagonal.
    pub w: DMatrix<f64>,
    /// `k[p][q] = (pq|pq)`, zero diagonal.
    pub k: DMatrix<f64>,
    pub e_nn: f64,
}

impl HcbCoefficients {
    pub fn n(&self) -> usize {
        self.eps.len()
    }
}

pub fn hcb_coefficients(ints: &IntegralSet) -> HcbCoefficients {
    let n = ints.n();
    let g = &ints.g;
    let eps = (0..n)
        .map(|p| 2.0 * ints.h[(p, p)] + g.get(p, p, p, p))
        .collect();
    let mut w = DMatrix::zeros(n, n);
    let mut k = DMatrix::zeros(n, n);
    for p in 0..n {
        for q in (p + 1)..n {
            let exch = g.get(p, q, p, q);
            let coul = g.get(p, p, q, q);
            let wv = 4.0 * coul - 2.0 * exch;
            w[(p, q)] = wv;
            w[(q, p)] = wv;
            k[(p, q)] = exch;
            k[(q, p)] = exch;
        }
    }
    HcbCoefficients {
        eps,
        w,
        k,
        e_nn: ints.e_nn,
    }
}

/// Orbital pairs `(bonding, antibonding)`, one per matched edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairStructure {
    pairs: Vec<(usize, usize)>,
}

impl PairStructure {
    /// Pairs must partition `0..n` with `bonding < antibonding`.
    pub fn try_new(n: usize, pairs: Vec<(usize, usize)>) -> Result<Self> {
        if n % 2 != 0 || pairs.len() != n / 2 {
            return Err(Error::invalid(format!(
                "{} pairs cannot partition {n} orbitals",
                pairs.len()
            )));
        }
        let mut seen = vec![false; n];
        for &(b, a) in &pairs {
            if b >= a || a >= n {
                return Err(Error::invalid(format!("bad pair ({b}, {a})")));
            }
            for x in [b, a] {
                if std::mem::replace(&mut seen[x], true) {
                    return Err(Error::invalid(format!("orbital {x} appears twice")));
                }
            }
        }
        Ok(PairStructure { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn n_orbitals(&self) -> usize {
        2 * self.pairs.len()
    }

    /// `owner[p]` is the index of the pair containing orbital `p`.
    fn owners(&self) -> Vec<usize> {
        let mut owner = vec![0; self.n_orbitals()];
        for (k, &(b, a)) in self.pairs.iter().enumerate() {
            owner[b] = k;
            owner[a] = k;
        }
        owner
    }
}

/// Pair-ansatz angles in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpaAngles(pub Vec<f64>);

impl SpaAngles {
    pub fn zeros(n_pairs: usize) -> Self {
        SpaAngles(vec![0.0; n_pairs])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Maps every angle into `[−π, π)`.
    pub fn canonical(&self) -> Self {
        SpaAngles(self.0.iter().map(|&t| wrap_angle(t)).collect())
    }
}

pub(crate) fn wrap_angle(t: f64) -> f64 {
    let w = (t + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Orbital occupations `⟨n_p⟩` of the product state.
fn occupations(ps: &PairStructure, theta: &[f64]) -> Vec<f64> {
    let mut occ = vec![0.0; ps.n_orbitals()];
    for (&(b, a), &t) in ps.pairs.iter().zip(theta) {
        let c = libm::cos(t);
        occ[b] = 0.5 * (1.0 + c);
        occ[a] = 0.5 * (1.0 - c);
    }
    occ
}

fn check_dims(c: &HcbCoefficients, ps: &PairStructure, theta: &[f64]) {
    assert_eq!(c.n(), ps.n_orbitals(), "coefficients vs pair structure");
    assert_eq!(theta.len(), ps.pairs.len(), "angle count vs pairs");
}

/// `⟨Ψ(θ)|H|Ψ(θ)⟩` including nuclear repulsion.
pub fn spa_energy(c: &HcbCoefficients, ps: &PairStructure, th: &SpaAngles) -> f64 {
    energy_and_gradient(c, ps, &th.0).0
}

/// Energy and analytic gradient with respect to the angles.
pub fn spa_energy_gradient(
    c: &HcbCoefficients,
    ps: &PairStructure,
    th: &SpaAngles,
) -> (f64, Vec<f64>) {
    energy_and_gradient(c, ps, &th.0)
}

/// `field[p] = eps_p + Σ_{q in other pairs} occ_q w_pq`
fn mean_field(c: &HcbCoefficients, owner: &[usize], occ: &[f64]) -> Vec<f64> {
    let n = c.n();
    let mut field = c.eps.clone();
    for p in 0..n {
        for q in 0..n {
            if owner[p] != owner[q] {
                field[p] += occ[q] * c.w[(p, q)];
            }
        }
    }
    field
}

fn energy_and_gradient(c: &HcbCoefficients, ps: &PairStructure, theta: &[f64]) -> (f64, Vec<f64>) {
    check_dims(c, ps, theta);
    let n = c.n();
    let occ = occupations(ps, theta);
    let owner = ps.owners();

    let field = mean_field(c, &owner, &occ);
    let mut energy = c.e_nn;
    for p in 0..n {
        energy += occ[p] * c.eps[p];
        for q in (p + 1)..n {
            if owner[p] != owner[q] {
                energy += occ[p] * occ[q] * c.w[(p, q)];
            }
        }
    }
    let mut grad = vec![0.0; theta.len()];
    for (k, (&(b, a), &t)) in ps.pairs.iter().zip(theta).enumerate() {
        // libm, not std: the platform sincos that LLVM may fuse sin/cos into
        // differs from sin/cos in the last bit, which made results build-dependent
        let (s, co) = libm::sincos(t);
        let hop = c.k[(b, a)];
        energy -= hop * s;
        grad[k] = -0.5 * s * (field[b] - field[a]) - hop * co;
    }
    (energy, grad)
}

/// Exact Hessian of the pair-ansatz energy in the angles.
pub fn spa_energy_hessian(c: &HcbCoefficients, ps: &PairStructure, th: &SpaAngles) -> DMatrix<f64> {
    let theta = &th.0;
    check_dims(c, ps, theta);
    let occ = occupations(ps, theta);
    let field = mean_field(c, &ps.owners(), &occ);
    let m = theta.len();
    let mut hess = DMatrix::zeros(m, m);
    for (k, &(bk, ak)) in ps.pairs.iter().enumerate() {
        let (sk, ck) = libm::sincos(theta[k]);
        hess[(k, k)] = -0.5 * ck * (field[bk] - field[ak]) + c.k[(bk, ak)] * sk;
        for (l, &(bl, al)) in ps.pairs.iter().enumerate() {
            if l == k {
                continue;
            }
            let coupling =
                (c.w[(bk, bl)] - c.w[(bk, al)]) - (c.w[(ak, bl)] - c.w[(ak, al)]);
            hess[(k, l)] = 0.25 * sk * libm::sin(theta[l]) * coupling;
        }
    }
    hess
}

/// Newton steps with the exact Hessian, accepted while the gradient shrinks
/// and the energy does not rise above rounding level.
fn newton_polish(
    c: &HcbCoefficients,
    ps: &PairStructure,
    theta: &mut Vec<f64>,
    energy: &mut f64,
    grad: &mut Vec<f64>,
) {
    for _ in 0..20 {
        if norm(grad) < 0.1 * THETA_GRAD_TOL {
            return;
        }
        let hess = spa_energy_hessian(c, ps, &SpaAngles(theta.clone()));
        let Some(chol) = hess.cholesky() else {
            return;
        };
        let step = chol.solve(&DVector::from_column_slice(grad));
        let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, d)| t - d).collect();
        let (e, g) = energy_and_gradient(c, ps, &trial);
        // the Hessian is positive definite, so only evaluation noise can raise E
        let floor = 1e-12 * energy.abs().max(1.0);
        if norm(&g) >= norm(grad) || e > *energy + floor {
            return;
        }
        *theta = trial;
        *energy = e.min(*energy);
        *grad = g;
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Exact minimization over one angle with the others held fixed.
fn coordinate_sweep(c: &HcbCoefficients, ps: &PairStructure, theta: &mut [f64]) {
    let n = c.n();
    let owner = ps.owners();
    for k in 0..ps.pairs.len() {
        let (b, a) = ps.pairs[k];
        let occ = occupations(ps, theta);
        let mut fb = c.eps[b];
        let mut fa = c.eps[a];
        for q in 0..n {
            if owner[q] != k {
                fb += occ[q] * c.w[(b, q)];
                fa += occ[q] * c.w[(a, q)];
            }
        }
        // E(θ) = const + ½(fb − fa) cos θ − k_ba sin θ
        let cos_coef = 0.5 * (fb - fa);
        let sin_coef = -c.k[(b, a)];
        if cos_coef.hypot(sin_coef) > 0.0 {
            theta[k] = f64::atan2(-sin_coef, -cos_coef);
        }
    }
}

/// Minimizes the pair-ansatz energy over the angles.
///
/// Exact coordinate sweeps bring the iterate into the basin, then BFGS with
/// the analytic gradient polishes it. The result never has higher energy
/// than `th0`.
pub fn minimize_theta(
    c: &HcbCoefficients,
    ps: &PairStructure,
    th0: &SpaAngles,
) -> Result<(SpaAngles, f64)> {
    check_dims(c, ps, &th0.0);
    if th0.0.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("non-finite starting angle"));
    }
    let m = th0.0.len();
    let mut theta = th0.0.clone();
    let (mut energy, mut grad) = energy_and_gradient(c, ps, &theta);
    if norm(&grad) < THETA_GRAD_TOL || m == 0 {
        return Ok((SpaAngles(theta), energy));
    }

    let mut iter = 0;
    while iter < 60 && norm(&grad) > 1e-6 {
        let mut trial = theta.clone();
        coordinate_sweep(c, ps, &mut trial);
        let (e, g) = energy_and_gradient(c, ps, &trial);
        if e > energy {
            break;
        }
        theta = trial;
        energy = e;
        grad = g;
        iter += 1;
    }

    // BFGS on the inverse Hessian
    let mut inv_h = DMatrix::<f64>::identity(m, m);
    while iter < THETA_MAX_ITER {
        let gnorm = norm(&grad);
        if gnorm < THETA_GRAD_TOL {
            break;
        }
        let g = DVector::from_column_slice(&grad);
        let mut dir = -(&inv_h * &g);
        let mut slope = dir.dot(&g);
        if slope >= 0.0 {
            inv_h = DMatrix::identity(m, m);
            dir = -g.clone();
            slope = dir.dot(&g);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = theta.iter().zip(dir.iter()).map(|(t, d)| t + alpha * d).collect();
            let (e, gt) = energy_and_gradient(c, ps, &trial);
            let armijo = e <= energy + 1e-4 * alpha * slope;
            // below the energy rounding floor, accept a step that shrinks the gradient
            let flat = (e - energy).abs() <= 4.0 * f64::EPSILON * energy.abs().max(1.0)
                && norm(&gt) < gnorm;
            if armijo || flat {
                accepted = Some((trial, e, gt));
                break;
            }
            alpha *= 0.5;
        }
        iter += 1;
        let Some((trial, e, gt)) = accepted else {
            break;
        };
        let s = DVector::from_iterator(m, trial.iter().zip(&theta).map(|(a, b)| a - b));
        let y = DVector::from_iterator(m, gt.iter().zip(&grad).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let ident = DMatrix::<f64>::identity(m, m);
            let left = &ident - &s * y.transpose() * rho;
            let right = &ident - &y * s.transpose() * rho;
            inv_h = &left * &inv_h * &right + &s * s.transpose() * rho;
        }
        theta = trial;
        energy = e.min(energy);
        grad = gt;
    }

    newton_polish(c, ps, &mut theta, &mut energy, &mut grad);
    let gnorm = norm(&grad);
    let best = SpaAngles(theta).canonical();
    if gnorm < 1e-9 {
        Ok((best, energy))
    } else {
        Err(Error::ThetaConvergence {
            best,
            energy,
            grad_norm: gnorm,
        })
    }
}

/// Lowest pair-ansatz energy from two deterministic starts (all bonding,
/// all antibonding).
pub fn spa_min_energy(c: &HcbCoefficients, ps: &PairStructure) -> Result<(SpaAngles, f64)> {
    let m = ps.pairs().len();
    let a = minimize_theta(c, ps, &SpaAngles::zeros(m))?;
    let b = minimize_theta(c, ps, &SpaAngles(vec![PI - 1e-3; m]))?;
    Ok(if b.1 < a.1 - 1e-12 { b } else { a })
}

/// Occupation bitstrings with `n_pairs` bosons in `n` orbitals, ascending.
pub fn seniority_zero_basis(n: usize, n_pairs: usize) -> Vec<u32> {
    (0u32..(1u32 << n))
        .filter(|b| b.count_ones() as usize == n_pairs)
        .collect()
}

/// Dense seniority-zero Hamiltonian over [`seniority_zero_basis`], without
/// nuclear repulsion.
pub fn doci_hamiltonian(c: &HcbCoefficients, n_pairs: usize) -> Result<(Vec<u32>, DMatrix<f64>)> {
    let n = c.n();
    if n > DOCI_MAX_ORBITALS || n_pairs > n {
        return Err(Error::invalid(format!(
            "dense seniority-zero space for {n} orbitals exceeds the supported size"
        )));
    }
    let basis = seniority_zero_basis(n, n_pairs);
    let index: std::collections::HashMap<u32, usize> =
        basis.iter().enumerate().map(|(i, &b)| (b, i)).collect();
    let dim = basis.len();
    let mut h = DMatrix::zeros(dim, dim);
    for (col, &bits) in basis.iter().enumerate() {
        let occ: Vec<usize> = (0..n).filter(|&p| bits >> p & 1 == 1).collect();
        let mut diag = 0.0;
        for (i, &p) in occ.iter().enumerate() {
            diag += c.eps[p];
            for &q in &occ[i + 1..] {
                diag += c.w[(p, q)];
            }
        }
        h[(col, col)] = diag;
        for &p in &occ {
            for q in (0..n).filter(|&q| bits >> q & 1 == 0) {
                let moved = bits & !(1 << p) | (1 << q);
                h[(index[&moved], col)] = c.k[(p, q)];
            }
        }
    }
    Ok((basis, h))
}

/// Ground state of the dense seniority-zero Hamiltonian: energy (with
/// nuclear repulsion) and eigenvector over [`seniority_zero_basis`].
pub fn doci_ground_energy(c: &HcbCoefficients, n_pairs: usize) -> Result<(f64, DVector<f64>)> {
    let (_, h) = doci_hamiltonian(c, n_pairs)?;
    let (values, vectors) = symmetric_eigen(&h);
    Ok((values[0] + c.e_nn, vectors.column(0).into_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::{Eri, Geometry, IntegralSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain(n: usize, d: f64) -> IntegralSet {
        IntegralSet::native(&Geometry::hydrogen(
            (0..n).map(|i| [i as f64 * d, 0.0, 0.0]).collect(),
        ))
        .unwrap()
    }

    fn random_ints(rng: &mut ChaCha8Rng, n: usize) -> IntegralSet {
        let mut coords: Vec<[f64; 3]> = Vec::new();
        while coords.len() < n {
            let p = [0, 1, 2].map(|_| rng.random_range(-1.5..1.5));
            if coords.iter().all(|q| crate::chem::distance(&p, q) > 0.6) {
                coords.push(p);
            }
        }
        IntegralSet::native(&Geometry::hydrogen(coords)).unwrap()
    }

    fn adjacent_pairs(n: usize) -> PairStructure {
        PairStructure::try_new(n, (0..n / 2).map(|k| (2 * k, 2 * k + 1)).collect()).unwrap()
    }

    /// Embeds the product state in the dense seniority-zero basis.
    fn dense_state(ps: &PairStructure, theta: &[f64], basis: &[u32]) -> DVector<f64> {
        DVector::from_iterator(
            basis.len(),
            basis.iter().map(|&bits| {
                let mut amp = 1.0;
                for (&(b, a), &t) in ps.pairs().iter().zip(theta) {
                    match (bits >> b & 1, bits >> a & 1) {
                        (1, 0) => amp *= libm::cos(t / 2.0),
                        (0, 1) => amp *= -libm::sin(t / 2.0),
                        _ => return 0.0,
                    }
                }
                amp
            }),
        )
    }

    #[test]
    fn coefficients_of_diagonal_hamiltonian() {
        let ints = IntegralSet {
            e_nn: 0.0,
            h: DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 0.5])),
            g: Eri::zeros(2),
            basis: crate::chem::BasisLabel::Native,
        };
        let c = hcb_coefficients(&ints);
        assert_eq!(c.eps, vec![-2.0, 1.0]);
        assert!(c.w.iter().all(|&v| v == 0.0));
        assert!(c.k.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coefficient_matrices_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = hcb_coefficients(&random_ints(&mut rng, 6));
        assert_eq!(c.k, c.k.transpose());
        assert_eq!(c.w, c.w.transpose());
    }

    #[test]
    fn single_pair_reference_states() {
        let c = hcb_coefficients(&chain(2, 0.74));
        let ps = adjacent_pairs(2);
        let e0 = spa_energy(&c, &ps, &SpaAngles(vec![0.0]));
        assert!((e0 - (c.e_nn + c.eps[0])).abs() < 1e-14);
        let epi = spa_energy(&c, &ps, &SpaAngles(vec![PI]));
        assert!((epi - (c.e_nn + c.eps[1])).abs() < 1e-12);
    }

    #[test]
    fn energy_matches_dense_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [4, 6] {
            let c = hcb_coefficients(&random_ints(&mut rng, n));
            let ps = PairStructure::try_new(n, if n == 4 {
                vec![(0, 2), (1, 3)]
            } else {
                vec![(0, 5), (1, 2), (3, 4)]
            })
            .unwrap();
            let (basis, h) = doci_hamiltonian(&c, n / 2).unwrap();
            for _ in 0..5 {
                let theta: Vec<f64> = (0..n / 2).map(|_| rng.random_range(-PI..PI)).collect();
                let psi = dense_state(&ps, &theta, &basis);
                assert!((psi.norm() - 1.0).abs() < 1e-12);
                let dense = psi.dot(&(&h * &psi)) + c.e_nn;
                let e = spa_energy(&c, &ps, &SpaAngles(theta));
                assert!((dense - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = hcb_coefficients(&random_ints(&mut rng, 6));
        let ps = adjacent_pairs(6);
        let theta: Vec<f64> = (0..3).map(|_| rng.random_range(-PI..PI)).collect();
        let (_, g) = spa_energy_gradient(&c, &ps, &SpaAngles(theta.clone()));
        let h = 1e-6;
        for k in 0..3 {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (spa_energy(&c, &ps, &SpaAngles(up)) - spa_energy(&c, &ps, &SpaAngles(dn)))
                / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-6 * g[k].abs().max(1e-3));
        }
    }

    #[test]
    fn energy_periodic_and_pair_swap_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = hcb_coefficients(&random_ints(&mut rng, 4));
        let ps = adjacent_pairs(4);
        let theta = vec![0.4, -1.3];
        let e = spa_energy(&c, &ps, &SpaAngles(theta.clone()));
        let shifted = spa_energy(&c, &ps, &SpaAngles(vec![0.4 + 2.0 * PI, -1.3]));
        assert!((e - shifted).abs() < 1e-12);

        // swap the orbitals of pair 0 by relabeling the integrals
        let perm = [1usize, 0, 2, 3];
        let mut cp = c.clone();
        for p in 0..4 {
            cp.eps[p] = c.eps[perm[p]];
            for q in 0..4 {
                cp.w[(p, q)] = c.w[(perm[p], perm[q])];
                cp.k[(p, q)] = c.k[(perm[p], perm[q])];
            }
        }
        let swapped = spa_energy(&cp, &ps, &SpaAngles(vec![PI - 0.4, -1.3]));
        assert!((e - swapped).abs() < 1e-12);
    }

    #[test]
    fn single_pair_minimum_is_two_level_ground_state() {
        for d in [0.5, 0.74, 1.5, 3.0] {
            let c = hcb_coefficients(&chain(2, d));
            let ps = adjacent_pairs(2);
            let (th, e) = minimize_theta(&c, &ps, &SpaAngles::zeros(1)).unwrap();
            let two = DMatrix::from_row_slice(2, 2, &[c.eps[0], c.k[(0, 1)], c.k[(0, 1)], c.eps[1]]);
            let (vals, _) = symmetric_eigen(&two);
            assert!((e - (vals[0] + c.e_nn)).abs() < 1e-10, "d={d}");
            let (_, g) = spa_energy_gradient(&c, &ps, &th);
            assert!(norm(&g) < 1e-9);
            assert!((-PI..PI).contains(&th.0[0]));
        }
    }

    #[test]
    fn optimum_is_fixed_point() {
        let c = hcb_coefficients(&chain(4, 1.0));
        let ps = adjacent_pairs(4);
        let (th, e) = minimize_theta(&c, &ps, &SpaAngles::zeros(2)).unwrap();
        let (th2, e2) = minimize_theta(&c, &ps, &th).unwrap();
        assert!((e - e2).abs() < 1e-14);
        for (a, b) in th.0.iter().zip(&th2.0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn minimization_lowers_energy_and_respects_variational_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let c = hcb_coefficients(&random_ints(&mut rng, 4));
            let ps = PairStructure::try_new(4, vec![(0, 3), (1, 2)]).unwrap();
            let start = spa_energy(&c, &ps, &SpaAngles::zeros(2));
            let (_, e) = minimize_theta(&c, &ps, &SpaAngles::zeros(2)).unwrap();
            assert!(e <= start);
            let (ground, _) = doci_ground_energy(&c, 2).unwrap();
            assert!(e >= ground - 1e-9);
        }
    }

    /// Givens-rotated orbitals with nearest-neighbour pairs, as used for
    /// reference data.
    fn paired_system(rng: &mut ChaCha8Rng, n: usize) -> (HcbCoefficients, PairStructure) {
        let side = 2.0 * (n as f64).cbrt();
        let mut coords: Vec<[f64; 3]> = Vec::new();
        while coords.len() < n {
            let p = [0, 1, 2].map(|_| rng.random_range(0.0..side));
            if coords.iter().all(|q| crate::chem::distance(&p, q) > 0.5) {
                coords.push(p);
            }
        }
        let mut left: Vec<usize> = (0..n).collect();
        let mut pairs = Vec::new();
        while !left.is_empty() {
            let i = left.remove(0);
            let k = (0..left.len())
                .min_by(|&x, &y| {
                    let dx = crate::chem::distance(&coords[i], &coords[left[x]]);
                    let dy = crate::chem::distance(&coords[i], &coords[left[y]]);
                    dx.total_cmp(&dy)
                })
                .unwrap();
            pairs.push((i, left.remove(k)));
        }
        let mut m = DMatrix::identity(n, n);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        for &(i, j) in &pairs {
            m[(i, i)] = r;
            m[(j, j)] = r;
            m[(i, j)] = r;
            m[(j, i)] = -r;
        }
        let ints = IntegralSet::native(&Geometry::hydrogen(coords)).unwrap();
        let rotated = crate::chem::transform_integrals(&ints, &m).unwrap();
        (hcb_coefficients(&rotated), PairStructure::try_new(n, pairs).unwrap())
    }

    #[test]
    fn random_restarts_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for n in [4, 6, 8] {
            for _ in 0..4 {
                let (c, ps) = paired_system(&mut rng, n);
                let (_, best) = spa_min_energy(&c, &ps).unwrap();
                for _ in 0..8 {
                    let start: Vec<f64> = (0..n / 2).map(|_| rng.random_range(-PI..PI)).collect();
                    let (_, e) = minimize_theta(&c, &ps, &SpaAngles(start)).unwrap();
                    assert!((e - best).abs() < 1e-9, "n={n}: {e} vs {best}");
                }
            }
        }
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = hcb_coefficients(&random_ints(&mut rng, 8));
        let ps = PairStructure::try_new(8, vec![(0, 5), (1, 2), (3, 7), (4, 6)]).unwrap();
        let th: Vec<f64> = (0..4).map(|_| rng.random_range(-PI..PI)).collect();
        let hess = spa_energy_hessian(&c, &ps, &SpaAngles(th.clone()));
        let h = 1e-5;
        for l in 0..4 {
            let mut up = th.clone();
            let mut down = th.clone();
            up[l] += h;
            down[l] -= h;
            let gu = spa_energy_gradient(&c, &ps, &SpaAngles(up)).1;
            let gd = spa_energy_gradient(&c, &ps, &SpaAngles(down)).1;
            for k in 0..4 {
                let fd = (gu[k] - gd[k]) / (2.0 * h);
                assert!((fd - hess[(k, l)]).abs() < 1e-8, "({k},{l}) {fd} vs {}", hess[(k, l)]);
            }
        }
    }

    #[test]
    fn dense_basis_sizes() {
        let c = hcb_coefficients(&chain(2, 0.74));
        assert_eq!(doci_hamiltonian(&c, 1).unwrap().0.len(), 2);
        let c = hcb_coefficients(&chain(4, 0.9));
        assert_eq!(doci_hamiltonian(&c, 2).unwrap().0.len(), 6);
        let big = HcbCoefficients {
            eps: vec![0.0; 14],
            w: DMatrix::zeros(14, 14),
            k: DMatrix::zeros(14, 14),
            e_nn: 0.0,
        };
        assert!(doci_ground_energy(&big, 7).is_err());
    }

    #[test]
    fn pair_structure_validation() {
        assert!(PairStructure::try_new(4, vec![(0, 1), (1, 2)]).is_err());
        assert!(PairStructure::try_new(4, vec![(1, 0), (2, 3)]).is_err());
        assert!(PairStructure::try_new(4, vec![(0, 1)]).is_err());
        assert!(PairStructure::try_new(4, vec![(0, 3), (1, 2)]).is_ok());
    }

    #[test]
    fn wrap_angle_range() {
        for t in [-7.0, -PI, 0.0, PI, 3.5 * PI, 1e3] {
            let w = wrap_angle(t);
            assert!((-PI..PI).contains(&w));
            assert!(((w - t) / (2.0 * PI)).fract().abs() < 1e-9 || ((w - t) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
    }
}
