//! Dense kernels for the orthogonal-manifold parametrization.
//!
//! Orbital rotations are stored as special-orthogonal matrices `M = exp(A)`
//! with `A` skew-symmetric; the learnable target is the strictly upper
//! triangle of `A`.

use nalgebra::{DMatrix, Schur, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Orthogonality tolerance (max-norm of `MᵀM − I`).
pub const ORTHO_TOL: f64 = 1e-10;
/// Determinant tolerance for special-orthogonal input.
pub const DET_TOL: f64 = 1e-8;
/// Minimum gap between a rotation angle and pi for the principal logarithm.
pub const BRANCH_TOL: f64 = 1e-6;
/// Eigenvalue floor below which an overlap matrix is rejected.
pub const LOWDIN_EIG_FLOOR: f64 = 1e-10;
/// Singular values below this make a PCA axis degenerate.
pub const PCA_DEGENERATE: f64 = 1e-9;
/// Relative singular-value gap below which principal axes count as tied.
pub const PCA_TIE_REL: f64 = 1e-6;

/// Strictly upper-triangular entries of an `n × n` matrix, row-major (`i < j`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpperTriangular {
    n: usize,
    values: Vec<f64>,
}

impl UpperTriangular {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != pair_count(n) {
            return Err(Error::invalid(format!(
                "upper-triangular vector for n={n} needs {} entries, got {}",
                pair_count(n),
                values.len()
            )));
        }
        Ok(UpperTriangular { n, values })
    }

    pub fn zeros(n: usize) -> Self {
        UpperTriangular {
            n,
            values: vec![0.0; pair_count(n)],
        }
    }

    /// Packs the strict upper triangle of `m`.
    pub fn pack(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let mut values = Vec::with_capacity(pair_count(n));
        for i in 0..n {
            for j in (i + 1)..n {
                values.push(m[(i, j)]);
            }
        }
        UpperTriangular { n, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// The strictly upper-triangular matrix `U` holding these entries.
    pub fn to_upper_matrix(&self) -> DMatrix<f64> {
        let mut u = DMatrix::zeros(self.n, self.n);
        for (k, (i, j)) in upper_pairs(self.n).enumerate() {
            u[(i, j)] = self.values[k];
        }
        u
    }
}

/// Number of strictly upper-triangular entries, `n(n−1)/2`.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Iterates `(i, j)` with `i < j` in row-major order.
pub fn upper_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> + Clone {
    (0..n).flat_map(move |i| ((i + 1)..n).map(move |j| (i, j)))
}

/// A real skew-symmetric matrix; the diagonal is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewSymmetric(DMatrix<f64>);

impl SkewSymmetric {
    /// Builds `A = U − Uᵀ` from its upper triangle.
    pub fn from_upper(upper: &UpperTriangular) -> Self {
        let u = upper.to_upper_matrix();
        let a = &u - u.transpose();
        SkewSymmetric(a)
    }

    /// Antisymmetrizes `m` as `(m − mᵀ)/2`, so the invariants hold exactly.
    pub fn from_antisymmetrized(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (m[(i, j)] - m[(j, i)]);
                a[(i, j)] = v;
                a[(j, i)] = -v;
            }
        }
        SkewSymmetric(a)
    }

    /// Accepts `m` only if it is exactly skew-symmetric.
    pub fn try_new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::invalid("skew-symmetric matrix must be square"));
        }
        let n = m.nrows();
        for i in 0..n {
            if m[(i, i)] != 0.0 {
                return Err(Error::invalid("skew-symmetric diagonal must be zero"));
            }
            for j in (i + 1)..n {
                if m[(i, j)] != -m[(j, i)] {
                    return Err(Error::invalid(format!(
                        "entries ({i},{j}) and ({j},{i}) are not negatives"
                    )));
                }
            }
        }
        Ok(SkewSymmetric(m))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn upper(&self) -> UpperTriangular {
        UpperTriangular::pack(&self.0)
    }
}

/// A real orthogonal matrix with determinant +1.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecialOrthogonal(DMatrix<f64>);

impl SpecialOrthogonal {
    pub fn try_new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::invalid("orthogonal matrix must be square"));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("orthogonal matrix has non-finite entries"));
        }
        let resid = orthogonality_residual(&m);
        if resid >= ORTHO_TOL {
            return Err(Error::invalid(format!(
                "matrix is not orthogonal (residual {resid:e})"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > DET_TOL {
            return Err(Error::invalid(format!("determinant {det} is not +1")));
        }
        Ok(SpecialOrthogonal(m))
    }

    pub fn identity(n: usize) -> Self {
        SpecialOrthogonal(DMatrix::identity(n, n))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Row-major flattening, used by the dataset format.
    pub fn to_row_major(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    pub fn from_row_major(n: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::invalid(format!(
                "expected {} entries for a {n}x{n} matrix, got {}",
                n * n,
                data.len()
            )));
        }
        Self::try_new(DMatrix::from_row_slice(n, n, data))
    }
}

/// `max |(MᵀM − I)_ij|`.
pub fn orthogonality_residual(m: &DMatrix<f64>) -> f64 {
    let n = m.ncols();
    let mtm = m.transpose() * m;
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((mtm[(i, j)] - target).abs());
        }
    }
    worst
}

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const PADE13_THETA: f64 = 5.371920351148152;

/// Matrix exponential of a general square matrix: scaling and squaring
/// around a degree-13 diagonal Padé approximant.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm1 = a
        .column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm1 > PADE13_THETA {
        (norm1 / PADE13_THETA).log2().ceil() as i32
    } else {
        0
    };
    let a = a * 2f64.powi(-squarings);
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &PADE13;

    let inner_u = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = &a * (inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1]);
    let inner_v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];

    let denom = &v - &u;
    let numer = &v + &u;
    let mut r = denom
        .lu()
        .solve(&numer)
        .expect("Padé denominator is nonsingular after scaling");
    for _ in 0..squarings {
        r = &r * &r;
    }
    r
}

/// `exp(A)` for skew-symmetric `A`.
pub fn expm_antisymmetric(a: &SkewSymmetric) -> Result<SpecialOrthogonal> {
    if a.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("generator has non-finite entries"));
    }
    Ok(SpecialOrthogonal(expm(&a.0)))
}

/// Fréchet derivative `L(A, E)` of the exponential, read off the upper-right
/// block of `exp([[A, E], [0, A]])`.
///
/// `E` is first rescaled by a power of two to unit magnitude, so the block
/// norm (and hence the squaring count) depends on `A` only and the result is
/// exactly linear under power-of-two scalings of `E`.
pub fn expm_frechet(a: &DMatrix<f64>, e: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let peak = e.amax();
    if peak == 0.0 || !peak.is_finite() {
        return e * 0.0;
    }
    let scale = 2f64.powi(peak.log2().floor() as i32);
    let mut block = DMatrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(a);
    block.view_mut((n, n), (n, n)).copy_from(a);
    block.view_mut((0, n), (n, n)).copy_from(&(e / scale));
    expm(&block).view((0, n), (n, n)).into_owned() * scale
}

/// Pulls a gradient `dL/dM` back through `M = exp(A)`: returns `dL/dA`.
pub fn expm_pullback(a: &DMatrix<f64>, grad_m: &DMatrix<f64>) -> DMatrix<f64> {
    expm_frechet(&a.transpose(), grad_m)
}

/// Principal real logarithm of a special-orthogonal matrix via the real
/// Schur form. The Schur factor of an orthogonal matrix is block diagonal
/// with 2×2 rotation blocks and ±1 entries; each block contributes its angle.
pub fn logm_special_orthogonal(m: &SpecialOrthogonal) -> Result<SkewSymmetric> {
    let mat = &m.0;
    let n = mat.nrows();
    if orthogonality_residual(mat) >= ORTHO_TOL {
        return Err(Error::invalid("logm input is not orthogonal"));
    }
    if n == 1 {
        return Ok(SkewSymmetric(DMatrix::zeros(1, 1)));
    }
    let schur = Schur::try_new(mat.clone(), f64::EPSILON, 1000 * n.max(10))
        .ok_or_else(|| Error::invalid("real Schur decomposition did not converge"))?;
    let (q, t) = schur.unpack();

    let mut log_t = DMatrix::zeros(n, n);
    let mut k = 0;
    while k < n {
        let is_block = k + 1 < n && t[(k + 1, k)] != 0.0;
        if is_block {
            let (a, b, c, d) = (t[(k, k)], t[(k, k + 1)], t[(k + 1, k)], t[(k + 1, k + 1)]);
            let angle = f64::atan2(0.5 * (b - c), 0.5 * (a + d));
            check_branch(angle)?;
            log_t[(k, k + 1)] = angle;
            log_t[(k + 1, k)] = -angle;
            k += 2;
        } else {
            // real eigenvalue of an orthogonal matrix: +1 or -1
            if t[(k, k)] < 0.0 {
                return Err(Error::BranchBoundary {
                    angle: std::f64::consts::PI,
                    gap: 0.0,
                });
            }
            k += 1;
        }
    }
    let a = &q * log_t * q.transpose();
    Ok(SkewSymmetric::from_antisymmetrized(&a))
}

fn check_branch(angle: f64) -> Result<()> {
    let gap = std::f64::consts::PI - angle.abs();
    if gap < BRANCH_TOL {
        Err(Error::BranchBoundary { angle, gap })
    } else {
        Ok(())
    }
}

/// Symmetric eigen-decomposition with eigenvalues sorted ascending and the
/// eigenvector columns permuted to match.
pub fn symmetric_eigen(s: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = s.nrows();
    let sym = 0.5 * (s + s.transpose());
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Löwdin symmetric inverse square root `S^{-1/2}`.
pub fn lowdin_inverse_sqrt(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !s.is_square() {
        return Err(Error::invalid("overlap matrix must be square"));
    }
    let (values, vectors) = symmetric_eigen(s);
    if let Some(&smallest) = values.first() {
        if smallest <= LOWDIN_EIG_FLOOR {
            return Err(Error::NearLinearDependence(smallest));
        }
    }
    let n = s.nrows();
    let mut scaled = vectors.clone();
    for (k, &lam) in values.iter().enumerate() {
        let f = 1.0 / lam.sqrt();
        scaled.column_mut(k).scale_mut(f);
    }
    let x = scaled * vectors.transpose();
    // exact symmetry
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = 0.5 * (x[(i, j)] + x[(j, i)]);
        }
    }
    Ok(out)
}

/// Principal axes of a point cloud and the min-max normalized projections.
#[derive(Debug, Clone)]
pub struct PcaFrame {
    /// Columns are the principal axes, by decreasing singular value.
    pub axes: DMatrix<f64>,
    pub singular_values: [f64; 3],
    /// `N × 3`, each column in `[0, 1]`.
    pub projections: DMatrix<f64>,
}

/// PCA of centroid-centered positions.
///
/// Each axis sign is chosen so the third moment of the projections is
/// positive, which depends only on the intrinsic shape, and projections are
/// min-max scaled to `[0, 1]`. Where the frame itself is ambiguous the
/// projections are replaced by quantities that do not depend on the choice:
/// - vanishing third moment (sign undefined): `|p| / max |p|`; the axis sign
///   falls back to making its largest-magnitude component positive;
/// - equal singular values (axes undefined within the block): the first
///   slot of the block holds the in-block radius over its maximum, the
///   others 0.5;
/// - zero spread: 0.5 for every atom.
pub fn pca_axes(positions: &[[f64; 3]]) -> PcaFrame {
    let n = positions.len();
    let mut projections = DMatrix::from_element(n, 3, 0.5);
    if n == 0 {
        return PcaFrame {
            axes: DMatrix::identity(3, 3),
            singular_values: [0.0; 3],
            projections,
        };
    }
    let centroid = centroid(positions);
    let rows = n.max(3);
    let mut x = DMatrix::zeros(rows, 3);
    for (i, p) in positions.iter().enumerate() {
        for c in 0..3 {
            x[(i, c)] = p[c] - centroid[c];
        }
    }
    let svd = nalgebra::SVD::new(x.clone(), false, true);
    let v_t = svd.v_t.expect("requested V");
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut axes = DMatrix::zeros(3, 3);
    let mut singular_values = [0.0; 3];
    let mut raw = DMatrix::zeros(n, 3);
    for (slot, &k) in order.iter().enumerate() {
        let sigma = svd.singular_values[k];
        singular_values[slot] = sigma;
        let mut axis = [v_t[(k, 0)], v_t[(k, 1)], v_t[(k, 2)]];
        let proj: Vec<f64> = (0..n)
            .map(|i| (0..3).map(|c| x[(i, c)] * axis[c]).sum())
            .collect();
        let scale = proj.iter().fold(0.0_f64, |m, p| m.max(p.abs())).max(1e-300);
        let third: f64 = proj.iter().map(|p| (p / scale).powi(3)).sum::<f64>() / n as f64;
        let flip = if third.abs() > 1e-9 {
            third < 0.0
        } else {
            let mut best = 0;
            for c in 1..3 {
                if axis[c].abs() > axis[best].abs() + 1e-12 {
                    best = c;
                }
            }
            axis[best] < 0.0
        };
        if flip {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        for c in 0..3 {
            axes[(c, slot)] = axis[c];
        }
        let sign = if flip { -1.0 } else { 1.0 };
        for (i, &p) in proj.iter().enumerate() {
            raw[(i, slot)] = sign * p;
        }
        if sigma < PCA_DEGENERATE {
            continue;
        }
        if third.abs() <= 1e-9 {
            for (i, &p) in proj.iter().enumerate() {
                projections[(i, slot)] = p.abs() / scale;
            }
            continue;
        }
        let lo = proj.iter().fold(f64::INFINITY, |m, &p| m.min(sign * p));
        let hi = proj.iter().fold(f64::NEG_INFINITY, |m, &p| m.max(sign * p));
        let range = hi - lo;
        if range < 1e-12 {
            continue;
        }
        for (i, &p) in proj.iter().enumerate() {
            projections[(i, slot)] = (sign * p - lo) / range;
        }
    }
    let mut start = 0;
    while start < 3 {
        let mut end = start + 1;
        while end < 3
            && singular_values[end] >= PCA_DEGENERATE
            && singular_values[end - 1] - singular_values[end] <= PCA_TIE_REL * singular_values[0]
        {
            end += 1;
        }
        if end - start > 1 {
            let radius: Vec<f64> = (0..n)
                .map(|i| (start..end).map(|s| raw[(i, s)].powi(2)).sum::<f64>().sqrt())
                .collect();
            let peak = radius.iter().fold(0.0_f64, |m, &r| m.max(r)).max(1e-300);
            for i in 0..n {
                projections[(i, start)] = radius[i] / peak;
                for s in start + 1..end {
                    projections[(i, s)] = 0.5;
                }
            }
        }
        start = end;
    }
    PcaFrame {
        axes,
        singular_values,
        projections,
    }
}

pub fn centroid(positions: &[[f64; 3]]) -> [f64; 3] {
    let n = positions.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in positions {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c.map(|v| v / n)
}
