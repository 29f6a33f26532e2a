//! Training objective: Huber regression on generator entries plus two
//! gauge-aware terms on the orbital matrix.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datagen::Matching;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the determinant-overlap term.
    pub lambda1: f64,
    /// Weight of the sign-invariant orbital term.
    pub lambda2: f64,
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 0.1,
            huber_delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda1, self.lambda2, self.huber_delta]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !ok {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Columns spanning the occupied space: the lower atom index of each
/// matched pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupiedSelector {
    columns: Vec<usize>,
}

impl OccupiedSelector {
    pub fn try_new(n: usize, columns: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; n];
        for &c in &columns {
            if c >= n || std::mem::replace(&mut seen[c], true) {
                return Err(Error::invalid(format!("bad occupied column {c}")));
            }
        }
        Ok(OccupiedSelector { columns })
    }

    pub fn from_matching(m: &Matching) -> Self {
        OccupiedSelector {
            columns: m.edges().iter().map(|&(i, _)| i).collect(),
        }
    }

    pub fn columns(&self) -> &[usize] {
        &self.columns
    }
}

fn huber_term(r: f64, delta: f64) -> (f64, f64) {
    // the kink |r| = δ takes the quadratic branch
    if r.abs() <= delta {
        (0.5 * r * r, r)
    } else {
        (delta * (r.abs() - 0.5 * delta), delta * r.signum())
    }
}

/// Sum of Huber terms and its gradient with respect to `pred`.
pub fn huber_sum_grad(pred: &[f64], reference: &[f64], delta: f64) -> Result<(f64, Vec<f64>)> {
    if pred.len() != reference.len() {
        return Err(Error::invalid(format!(
            "prediction has {} entries, reference {}",
            pred.len(),
            reference.len()
        )));
    }
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(reference)
        .map(|(p, r)| {
            let (v, g) = huber_term(p - r, delta);
            total += v;
            g
        })
        .collect();
    Ok((total, grad))
}

/// Mean Huber loss over entries.
pub fn huber_loss(pred: &[f64], reference: &[f64], delta: f64) -> Result<f64> {
    let (sum, _) = huber_sum_grad(pred, reference, delta)?;
    Ok(if pred.is_empty() { 0.0 } else { sum / pred.len() as f64 })
}

fn occupied_block(m: &DMatrix<f64>, sel: &OccupiedSelector) -> DMatrix<f64> {
    m.select_columns(sel.columns())
}

/// Cofactor matrix, `cof[i][j] = (−1)^(i+j) det(minor_ij)`.
fn cofactor(s: &DMatrix<f64>) -> DMatrix<f64> {
    let k = s.nrows();
    if k == 1 {
        return DMatrix::from_element(1, 1, 1.0);
    }
    DMatrix::from_fn(k, k, |i, j| {
        let minor = s.clone().remove_row(i).remove_column(j);
        let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
        sign * minor.determinant()
    })
}

/// `1 − det(Mpredᵀ_occ Mref_occ)²` and its gradient in `m_pred`.
pub fn det_overlap_grad(
    m_pred: &DMatrix<f64>,
    m_ref: &DMatrix<f64>,
    sel: &OccupiedSelector,
) -> (f64, DMatrix<f64>) {
    let p = occupied_block(m_pred, sel);
    let r = occupied_block(m_ref, sel);
    let s = p.tr_mul(&r);
    let det = s.determinant();
    let loss = 1.0 - det * det;
    // d det / dS = cof(S); dL/dP = R (dL/dS)ᵀ
    let g_s = cofactor(&s) * (-2.0 * det);
    let g_p = &r * g_s.transpose();
    let mut grad = DMatrix::zeros(m_pred.nrows(), m_pred.ncols());
    for (k, &c) in sel.columns().iter().enumerate() {
        grad.set_column(c, &g_p.column(k));
    }
    (loss, grad)
}

pub fn det_overlap_loss(m_pred: &DMatrix<f64>, m_ref: &DMatrix<f64>, sel: &OccupiedSelector) -> f64 {
    let s = occupied_block(m_pred, sel).tr_mul(&occupied_block(m_ref, sel));
    let det = s.determinant();
    1.0 - det * det
}

/// Mean over columns of `min(‖p − r‖², ‖p + r‖²)` and its gradient in
/// `m_pred`. Ties take the `p − r` branch.
pub fn sign_invariant_orbital_grad(m_pred: &DMatrix<f64>, m_ref: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let n = m_pred.ncols();
    let mut total = 0.0;
    let mut grad = DMatrix::zeros(m_pred.nrows(), n);
    for c in 0..n {
        let p = m_pred.column(c);
        let r = m_ref.column(c);
        let minus = (p - r).norm_squared();
        let plus = (p + r).norm_squared();
        let (value, diff) = if minus <= plus {
            (minus, p - r)
        } else {
            (plus, p + r)
        };
        total += value;
        grad.set_column(c, &(diff * (2.0 / n as f64)));
    }
    (total / n as f64, grad)
}

pub fn sign_invariant_orbital_loss(m_pred: &DMatrix<f64>, m_ref: &DMatrix<f64>) -> f64 {
    sign_invariant_orbital_grad(m_pred, m_ref).0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub huber: f64,
    pub det: f64,
    pub orb: f64,
    pub total: f64,
}

/// `L_huber + λ1 L_det + λ2 L_orb` for one molecule.
pub fn combined_loss(
    a_pred: &[f64],
    m_pred: &DMatrix<f64>,
    a_ref: &[f64],
    m_ref: &DMatrix<f64>,
    weights: &LossWeights,
    sel: &OccupiedSelector,
) -> Result<LossParts> {
    if m_pred.shape() != m_ref.shape() {
        return Err(Error::invalid("orbital matrices differ in shape"));
    }
    let huber = huber_loss(a_pred, a_ref, weights.huber_delta)?;
    let det = det_overlap_loss(m_pred, m_ref, sel);
    let orb = sign_invariant_orbital_loss(m_pred, m_ref);
    Ok(LossParts {
        huber,
        det,
        orb,
        total: huber + weights.lambda1 * det + weights.lambda2 * orb,
    })
}
