//! Orbital optimization on the special-orthogonal manifold.
//!
//! The outer variable is the generator `A` (its strict upper triangle), with
//! orbitals `M = exp(A)`. For every trial `A` the pair-ansatz angles are
//! re-minimized, so the outer objective is
//! `f(A) = min_θ E(θ; rotate(ints, exp(A)))`.

use nalgebra::{DMatrix, DVector};

use crate::chem::{transform_integrals, IntegralSet};
use crate::error::{Error, Result};
use crate::linalg::{
    expm_antisymmetric, logm_special_orthogonal, SkewSymmetric, SpecialOrthogonal,
    UpperTriangular,
};
use crate::spa::{hcb_coefficients, minimize_theta, spa_min_energy, PairStructure, SpaAngles};

pub const OUTER_MAX_ITER: usize = 200;
pub const OUTER_GRAD_TOL: f64 = 1e-6;
pub const OUTER_ENERGY_TOL: f64 = 1e-8;
/// Central finite-difference step on generator entries.
pub const FD_STEP: f64 = 1e-5;
/// Largest generator change (max-norm) accepted in one outer step.
const MAX_STEP: f64 = 0.5;
/// Gradient level treated as converged when no descent step can be found.
const STALL_GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct OrbitalOptResult {
    pub m_oo: SpecialOrthogonal,
    pub theta_opt: SpaAngles,
    pub e_spa: f64,
    pub outer_iterations: usize,
    pub energy_trace: Vec<f64>,
}

/// Pair-ansatz energy minimized over the angles for fixed orbitals `m`.
pub fn energy_with_orbitals(
    ints: &IntegralSet,
    ps: &PairStructure,
    m: &SpecialOrthogonal,
) -> Result<(SpaAngles, f64)> {
    let rotated = transform_integrals(ints, m.matrix())?;
    spa_min_energy(&hcb_coefficients(&rotated), ps)
}

struct Objective<'a> {
    ints: &'a IntegralSet,
    ps: &'a PairStructure,
    n: usize,
}

impl Objective<'_> {
    fn orbitals(&self, x: &[f64]) -> Result<SpecialOrthogonal> {
        let upper = UpperTriangular::new(self.n, x.to_vec())?;
        expm_antisymmetric(&SkewSymmetric::from_upper(&upper))
    }

    fn eval(&self, x: &[f64], warm: &SpaAngles) -> Result<(f64, SpaAngles)> {
        let m = self.orbitals(x)?;
        let rotated = transform_integrals(self.ints, m.matrix())?;
        let coeffs = hcb_coefficients(&rotated);
        let (theta, e) = match minimize_theta(&coeffs, self.ps, warm) {
            Ok(r) => r,
            Err(Error::ThetaConvergence { best, energy, .. }) => (best, energy),
            Err(e) => return Err(e),
        };
        Ok((e, theta))
    }

    fn gradient(&self, x: &[f64], warm: &SpaAngles) -> Result<Vec<f64>> {
        let mut probe = x.to_vec();
        let mut grad = vec![0.0; x.len()];
        for i in 0..x.len() {
            probe[i] = x[i] + FD_STEP;
            let (up, _) = self.eval(&probe, warm)?;
            probe[i] = x[i] - FD_STEP;
            let (down, _) = self.eval(&probe, warm)?;
            probe[i] = x[i];
            grad[i] = (up - down) / (2.0 * FD_STEP);
        }
        Ok(grad)
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Full nested optimization from `m_init`.
pub fn optimize_orbitals(
    ints_native: &IntegralSet,
    ps: &PairStructure,
    m_init: &SpecialOrthogonal,
) -> Result<OrbitalOptResult> {
    run_outer(ints_native, ps, m_init, OUTER_MAX_ITER)
}

/// Exactly one outer quasi-Newton update (with line search) from `m_start`.
pub fn warm_start_step(
    ints_native: &IntegralSet,
    ps: &PairStructure,
    m_start: &SpecialOrthogonal,
) -> Result<OrbitalOptResult> {
    let mut r = run_outer(ints_native, ps, m_start, 1)?;
    r.outer_iterations = 1;
    Ok(r)
}

fn run_outer(
    ints: &IntegralSet,
    ps: &PairStructure,
    m_init: &SpecialOrthogonal,
    max_iter: usize,
) -> Result<OrbitalOptResult> {
    let n = ints.n();
    if m_init.n() != n || ps.n_orbitals() != n {
        return Err(Error::invalid(format!(
            "orbital matrix {}x{} / {} paired orbitals vs {n} integrals",
            m_init.n(),
            m_init.n(),
            ps.n_orbitals()
        )));
    }
    let obj = Objective { ints, ps, n };
    let mut x = logm_special_orthogonal(m_init)?.upper().into_values();
    let dim = x.len();

    let (theta0, e0) = energy_with_orbitals(ints, ps, m_init)?;
    let (mut f, mut theta) = obj.eval(&x, &theta0)?;
    let mut trace = vec![f];
    let mut iterations = 0;
    let mut inv_h = DMatrix::<f64>::identity(dim, dim);
    let mut grad = if dim > 0 { obj.gradient(&x, &theta)? } else { Vec::new() };
    let mut failure = false;

    while iterations < max_iter && dim > 0 {
        if max_abs(&grad) < OUTER_GRAD_TOL {
            break;
        }
        let g = DVector::from_column_slice(&grad);
        let mut fresh_start = false;
        let step = loop {
            let mut dir = -(&inv_h * &g);
            if dir.dot(&g) >= 0.0 {
                inv_h = DMatrix::identity(dim, dim);
                dir = -g.clone();
                fresh_start = true;
            }
            let biggest = dir.amax();
            if biggest > MAX_STEP {
                dir *= MAX_STEP / biggest;
            }
            let slope = dir.dot(&g);
            if let Some(found) = line_search(&obj, &x, f, &theta, &dir, slope)? {
                break Some(found);
            }
            if fresh_start {
                break None;
            }
            inv_h = DMatrix::identity(dim, dim);
            fresh_start = true;
        };
        iterations += 1;
        let Some((x_new, f_new, theta_new)) = step else {
            failure = max_abs(&grad) > STALL_GRAD_TOL;
            break;
        };
        let energy_drop = f - f_new;
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        x = x_new;
        f = f_new;
        theta = theta_new;
        trace.push(f);
        if iterations == max_iter {
            break;
        }
        let grad_new = obj.gradient(&x, &theta)?;
        let s = DVector::from_vec(s);
        let y = DVector::from_iterator(dim, grad_new.iter().zip(&grad).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-14 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let ident = DMatrix::<f64>::identity(dim, dim);
            let left = &ident - &s * y.transpose() * rho;
            let right = &ident - &y * s.transpose() * rho;
            inv_h = &left * &inv_h * &right + &s * s.transpose() * rho;
        }
        grad = grad_new;
        if energy_drop.abs() < OUTER_ENERGY_TOL * 1e-4 && max_abs(&grad) < STALL_GRAD_TOL {
            break;
        }
    }

    let mut m_oo = obj.orbitals(&x)?;
    let (fresh_theta, fresh_e) = energy_with_orbitals(ints, ps, &m_oo)?;
    let (mut theta_opt, mut e_spa) = if fresh_e < f {
        (fresh_theta, fresh_e)
    } else {
        (theta.canonical(), f)
    };
    // expm(logm(m_init)) is only m_init up to rounding; never hand back
    // something worse than the exact start.
    if e0 <= e_spa {
        m_oo = m_init.clone();
        theta_opt = theta0.canonical();
        e_spa = e0;
    }
    if let Some(last) = trace.last_mut() {
        *last = e_spa;
    }
    let result = OrbitalOptResult {
        m_oo,
        theta_opt,
        e_spa,
        outer_iterations: iterations,
        energy_trace: trace,
    };
    if failure {
        Err(Error::OrbitalConvergence(Box::new(result)))
    } else {
        Ok(result)
    }
}

type Step = (Vec<f64>, f64, SpaAngles);

/// Backtracking Armijo search along `dir`; `None` if no decrease is found.
fn line_search(
    obj: &Objective<'_>,
    x: &[f64],
    f: f64,
    theta: &SpaAngles,
    dir: &DVector<f64>,
    slope: f64,
) -> Result<Option<Step>> {
    let mut alpha = 1.0;
    for _ in 0..30 {
        let trial: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + alpha * d).collect();
        let (f_trial, theta_trial) = obj.eval(&trial, theta)?;
        if f_trial <= f + 1e-4 * alpha * slope && f_trial < f {
            return Ok(Some((trial, f_trial, theta_trial)));
        }
        alpha *= 0.5;
    }
    Ok(None)
}
