//! STO-3G integrals for hydrogen 1s functions and orbital-basis transforms.
//!
//! Only s-type Gaussians occur, so every integral has a closed form in
//! terms of the Boys function `F0`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::lowdin_inverse_sqrt;

/// Bohr per Ångström.
pub const BOHR_PER_ANGSTROM: f64 = 1.8897259886;

/// STO-3G hydrogen 1s exponents (bohr⁻²), standard published basis data.
pub const STO3G_H_EXPONENTS: [f64; 3] = [3.42525091, 0.62391373, 0.16885540];
/// STO-3G hydrogen 1s contraction coefficients for normalized primitives.
pub const STO3G_H_COEFFS: [f64; 3] = [0.15432897, 0.53532814, 0.44463454];

/// Smallest nearest-neighbour distance admitted by sampling (Å, exclusive).
pub const MIN_NEIGHBOR_DIST: f64 = 0.5;
/// Largest nearest-neighbour distance admitted by sampling (Å, exclusive).
pub const MAX_NEIGHBOR_DIST: f64 = 4.0;

/// Geometry families used for data generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    LinearEquidistant,
    LinearRandom,
    PlanarEquidistant,
    PlanarRandom,
    Ring,
    #[serde(rename = "random_3d")]
    Random3d,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::LinearEquidistant,
        Family::LinearRandom,
        Family::PlanarEquidistant,
        Family::PlanarRandom,
        Family::Ring,
        Family::Random3d,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::LinearEquidistant => "linear_equidistant",
            Family::LinearRandom => "linear_random",
            Family::PlanarEquidistant => "planar_equidistant",
            Family::PlanarRandom => "planar_random",
            Family::Ring => "ring",
            Family::Random3d => "random_3d",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown geometry family '{s}'")))
    }
}

/// One molecular configuration. Coordinates are in Å.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub coords: Vec<[f64; 3]>,
    pub elements: Vec<String>,
    pub family: Option<Family>,
    pub seed: u64,
}

impl Geometry {
    /// An all-hydrogen geometry without family metadata. Not validated.
    pub fn hydrogen(coords: Vec<[f64; 3]>) -> Self {
        let elements = vec!["H".to_string(); coords.len()];
        Geometry {
            coords,
            elements,
            family: None,
            seed: 0,
        }
    }

    pub fn n_atoms(&self) -> usize {
        self.coords.len()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        distance(&self.coords[i], &self.coords[j])
    }

    /// Smallest distance from atom `i` to any other atom.
    pub fn nearest_neighbor_distance(&self, i: usize) -> f64 {
        (0..self.n_atoms())
            .filter(|&j| j != i)
            .map(|j| self.distance(i, j))
            .fold(f64::INFINITY, f64::min)
    }

    /// Checks atom count parity, element labels and nearest-neighbour spacing.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_atoms();
        if n % 2 != 0 || !(2..=16).contains(&n) {
            return Err(Error::InvalidGeometry(format!(
                "atom count {n} must be even and within 2..=16"
            )));
        }
        if self.elements.len() != n {
            return Err(Error::InvalidGeometry(
                "element list length differs from coordinate count".into(),
            ));
        }
        if let Some(bad) = self.elements.iter().find(|e| e.as_str() != "H") {
            return Err(Error::InvalidGeometry(format!(
                "only hydrogen is supported, found '{bad}'"
            )));
        }
        if self.coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGeometry("non-finite coordinate".into()));
        }
        for i in 0..n {
            let d = self.nearest_neighbor_distance(i);
            if !(d > MIN_NEIGHBOR_DIST && d < MAX_NEIGHBOR_DIST) {
                return Err(Error::InvalidGeometry(format!(
                    "atom {i} nearest-neighbour distance {d:.4} Å outside \
                     ({MIN_NEIGHBOR_DIST}, {MAX_NEIGHBOR_DIST})"
                )));
            }
        }
        Ok(())
    }

    fn bohr_coords(&self) -> Vec<[f64; 3]> {
        self.coords
            .iter()
            .map(|p| p.map(|v| v * BOHR_PER_ANGSTROM))
            .collect()
    }
}

pub(crate) fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    dist2(a, b).sqrt()
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Which orbital basis an [`IntegralSet`] is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisLabel {
    Atomic,
    Native,
    Rotated,
}

/// Two-electron integrals `(pq|rs)` in chemists' notation, dense `N⁴`.
#[derive(Debug, Clone, PartialEq)]
pub struct Eri {
    n: usize,
    data: Vec<f64>,
}

impl Eri {
    pub fn zeros(n: usize) -> Self {
        Eri {
            n,
            data: vec![0.0; n * n * n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, p: usize, q: usize, r: usize, s: usize) -> usize {
        ((p * self.n + q) * self.n + r) * self.n + s
    }

    #[inline]
    pub fn get(&self, p: usize, q: usize, r: usize, s: usize) -> f64 {
        self.data[self.idx(p, q, r, s)]
    }

    /// Writes `v` into all eight symmetry-equivalent slots.
    pub fn set_sym(&mut self, p: usize, q: usize, r: usize, s: usize, v: f64) {
        for (a, b, c, d) in [
            (p, q, r, s),
            (q, p, r, s),
            (p, q, s, r),
            (q, p, s, r),
            (r, s, p, q),
            (s, r, p, q),
            (r, s, q, p),
            (s, r, q, p),
        ] {
            let i = self.idx(a, b, c, d);
            self.data[i] = v;
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Largest deviation from 8-fold permutation symmetry.
    pub fn symmetry_violation(&self) -> f64 {
        let n = self.n;
        let mut worst = 0.0_f64;
        for p in 0..n {
            for q in 0..n {
                for r in 0..n {
                    for s in 0..n {
                        let v = self.get(p, q, r, s);
                        for w in [
                            self.get(q, p, r, s),
                            self.get(p, q, s, r),
                            self.get(r, s, p, q),
                        ] {
                            worst = worst.max((v - w).abs());
                        }
                    }
                }
            }
        }
        worst
    }

    /// Averages each orbit of the 8-fold symmetry group so it holds exactly.
    fn symmetrize(&mut self) {
        let n = self.n;
        for p in 0..n {
            for q in 0..=p {
                for r in 0..n {
                    for s in 0..=r {
                        if p * (p + 1) / 2 + q < r * (r + 1) / 2 + s {
                            continue;
                        }
                        let sum = self.get(p, q, r, s)
                            + self.get(q, p, r, s)
                            + self.get(p, q, s, r)
                            + self.get(q, p, s, r)
                            + self.get(r, s, p, q)
                            + self.get(s, r, p, q)
                            + self.get(r, s, q, p)
                            + self.get(s, r, q, p);
                        self.set_sym(p, q, r, s, sum / 8.0);
                    }
                }
            }
        }
    }
}

/// Nuclear repulsion, one- and two-electron integrals in one orbital basis.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegralSet {
    pub e_nn: f64,
    pub h: DMatrix<f64>,
    pub g: Eri,
    pub basis: BasisLabel,
}

impl IntegralSet {
    pub fn n(&self) -> usize {
        self.h.nrows()
    }

    /// Overlap, core Hamiltonian, repulsion tensor and nuclear repulsion in
    /// the atomic basis.
    pub fn atomic(geom: &Geometry) -> Result<(Self, DMatrix<f64>)> {
        let s = overlap_matrix(geom);
        let ints = IntegralSet {
            e_nn: nuclear_repulsion(geom)?,
            h: core_hamiltonian(geom),
            g: eri_tensor(geom),
            basis: BasisLabel::Atomic,
        };
        Ok((ints, s))
    }

    /// Integrals over symmetrically orthogonalized atomic orbitals.
    pub fn native(geom: &Geometry) -> Result<Self> {
        let (ints, s) = Self::atomic(geom)?;
        to_native_basis(&ints, &s)
    }
}

#[derive(Debug, Clone, Copy)]
struct Primitive {
    alpha: f64,
    coeff: f64,
}

/// Contraction of the hydrogen 1s function with primitive normalization
/// folded in and the whole contraction renormalized to unit self-overlap.
fn hydrogen_1s() -> [Primitive; 3] {
    let mut prims = [Primitive {
        alpha: 0.0,
        coeff: 0.0,
    }; 3];
    for k in 0..3 {
        let a = STO3G_H_EXPONENTS[k];
        prims[k] = Primitive {
            alpha: a,
            coeff: STO3G_H_COEFFS[k] * (2.0 * a / PI).powf(0.75),
        };
    }
    let mut self_overlap = 0.0;
    for p in &prims {
        for q in &prims {
            self_overlap += p.coeff * q.coeff * (PI / (p.alpha + q.alpha)).powf(1.5);
        }
    }
    let scale = 1.0 / self_overlap.sqrt();
    for p in &mut prims {
        p.coeff *= scale;
    }
    prims
}

/// Boys function of order zero.
pub fn boys_f0(t: f64) -> f64 {
    if t < 1e-7 {
        1.0 - t / 3.0
    } else {
        0.5 * (PI / t).sqrt() * libm::erf(t.sqrt())
    }
}

fn gaussian_product_center(a: f64, ra: &[f64; 3], b: f64, rb: &[f64; 3]) -> [f64; 3] {
    let p = a + b;
    [0, 1, 2].map(|k| (a * ra[k] + b * rb[k]) / p)
}

/// Overlap matrix of the contracted 1s functions.
pub fn overlap_matrix(geom: &Geometry) -> DMatrix<f64> {
    let r = geom.bohr_coords();
    let basis = hydrogen_1s();
    let n = r.len();
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let rab2 = dist2(&r[i], &r[j]);
            let mut v = 0.0;
            for pa in &basis {
                for pb in &basis {
                    let p = pa.alpha + pb.alpha;
                    v += pa.coeff
                        * pb.coeff
                        * (PI / p).powf(1.5)
                        * (-pa.alpha * pb.alpha / p * rab2).exp();
                }
            }
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

/// Kinetic energy plus attraction to every nucleus (Z = 1).
pub fn core_hamiltonian(geom: &Geometry) -> DMatrix<f64> {
    let r = geom.bohr_coords();
    let basis = hydrogen_1s();
    let n = r.len();
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let rab2 = dist2(&r[i], &r[j]);
            let mut v = 0.0;
            for pa in &basis {
                for pb in &basis {
                    let (a, b) = (pa.alpha, pb.alpha);
                    let p = a + b;
                    let mu = a * b / p;
                    let cc = pa.coeff * pb.coeff;
                    let pre = (-mu * rab2).exp();
                    let kinetic = mu * (3.0 - 2.0 * mu * rab2) * (PI / p).powf(1.5) * pre;
                    let center = gaussian_product_center(a, &r[i], b, &r[j]);
                    let attraction: f64 = r
                        .iter()
                        .map(|rc| -2.0 * PI / p * pre * boys_f0(p * dist2(&center, rc)))
                        .sum();
                    v += cc * (kinetic + attraction);
                }
            }
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    h
}

/// Electron-repulsion tensor `(pq|rs)`; each symmetry orbit is computed once.
pub fn eri_tensor(geom: &Geometry) -> Eri {
    let r = geom.bohr_coords();
    let basis = hydrogen_1s();
    let n = r.len();
    let mut g = Eri::zeros(n);

    // primitive pair data for every (i, j)
    struct PairData {
        p: f64,
        center: [f64; 3],
        coeff: f64,
    }
    let pair_data = |i: usize, j: usize| -> Vec<PairData> {
        let rab2 = dist2(&r[i], &r[j]);
        let mut out = Vec::with_capacity(9);
        for pa in &basis {
            for pb in &basis {
                let p = pa.alpha + pb.alpha;
                out.push(PairData {
                    p,
                    center: gaussian_product_center(pa.alpha, &r[i], pb.alpha, &r[j]),
                    coeff: pa.coeff * pb.coeff * (-pa.alpha * pb.alpha / p * rab2).exp(),
                });
            }
        }
        out
    };
    let pairs: Vec<Vec<Vec<PairData>>> = (0..n)
        .map(|i| (0..n).map(|j| pair_data(i, j)).collect())
        .collect();

    for p in 0..n {
        for q in 0..=p {
            let pq = p * (p + 1) / 2 + q;
            for rr in 0..n {
                for s in 0..=rr {
                    if rr * (rr + 1) / 2 + s > pq {
                        continue;
                    }
                    let mut v = 0.0;
                    for left in &pairs[p][q] {
                        for right in &pairs[rr][s] {
                            let (a, b) = (left.p, right.p);
                            let t = a * b / (a + b) * dist2(&left.center, &right.center);
                            v += left.coeff * right.coeff * 2.0 * PI.powf(2.5)
                                / (a * b * (a + b).sqrt())
                                * boys_f0(t);
                        }
                    }
                    g.set_sym(p, q, rr, s, v);
                }
            }
        }
    }
    g
}

/// Coulomb repulsion between unit point charges (Hartree).
pub fn nuclear_repulsion(geom: &Geometry) -> Result<f64> {
    let n = geom.n_atoms();
    let mut e = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = geom.distance(i, j);
            if d <= 1e-6 {
                return Err(Error::InvalidGeometry(format!(
                    "atoms {i} and {j} coincide"
                )));
            }
            e += 1.0 / (d * BOHR_PER_ANGSTROM);
        }
    }
    Ok(e)
}

/// Re-expresses atomic-basis integrals over Löwdin orbitals `C = S^{-1/2}`.
pub fn to_native_basis(ints: &IntegralSet, s: &DMatrix<f64>) -> Result<IntegralSet> {
    let x = lowdin_inverse_sqrt(s)?;
    let mut out = transform_integrals(ints, &x)?;
    out.basis = BasisLabel::Native;
    Ok(out)
}

/// `h̃ = Cᵀ h C` and `g̃_pqrs = Σ C_ap C_bq C_cr C_ds g_abcd`, the latter as
/// four successive one-index contractions.
pub fn transform_integrals(ints: &IntegralSet, c: &DMatrix<f64>) -> Result<IntegralSet> {
    let n = ints.n();
    if c.nrows() != n || c.ncols() != n || ints.g.n() != n {
        return Err(Error::invalid(format!(
            "coefficient matrix is {}x{}, integrals have dimension {n}",
            c.nrows(),
            c.ncols()
        )));
    }
    let h = c.transpose() * &ints.h * c;
    let h = 0.5 * (&h + h.transpose());

    let mut g = ints.g.data.clone();
    let mut tmp = vec![0.0; g.len()];
    let n2 = n * n;
    let n3 = n2 * n;
    // each pass contracts the leading index and rotates it to the back:
    // t[b c d p] = Σ_a g[a b c d] C[a p]
    for _ in 0..4 {
        for rest in 0..n3 {
            for p in 0..n {
                let mut acc = 0.0;
                for a in 0..n {
                    acc += g[a * n3 + rest] * c[(a, p)];
                }
                tmp[rest * n + p] = acc;
            }
        }
        std::mem::swap(&mut g, &mut tmp);
    }
    let mut g = Eri { n, data: g };
    g.symmetrize();
    Ok(IntegralSet {
        e_nn: ints.e_nn,
        h,
        g,
        basis: BasisLabel::Rotated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H2_BOND_ANGSTROM: f64 = 1.4 / BOHR_PER_ANGSTROM;

    fn h2(d: f64) -> Geometry {
        Geometry::hydrogen(vec![[0.0, 0.0, 0.0], [d, 0.0, 0.0]])
    }

    fn random_geometry(rng: &mut ChaCha8Rng, n: usize) -> Geometry {
        let mut coords: Vec<[f64; 3]> = Vec::new();
        while coords.len() < n {
            let p = [0, 1, 2].map(|_| rng.random_range(-1.5..1.5));
            if coords.iter().all(|q| distance(&p, q) > 0.6) {
                coords.push(p);
            }
        }
        Geometry::hydrogen(coords)
    }

    // Radial Simpson rule on [0, rmax] with `n` (even) intervals.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + k as f64 * h);
        }
        s * h / 3.0
    }

    // Contracted 1s with textbook normalization, independent of the engine's
    // renormalization path: value and radial derivative.
    fn phi(r: f64) -> f64 {
        let mut v = 0.0;
        for k in 0..3 {
            let a = STO3G_H_EXPONENTS[k];
            v += STO3G_H_COEFFS[k] * (2.0 * a / PI).powf(0.75) * (-a * r * r).exp();
        }
        v
    }

    fn dphi(r: f64) -> f64 {
        let mut v = 0.0;
        for k in 0..3 {
            let a = STO3G_H_EXPONENTS[k];
            v += STO3G_H_COEFFS[k] * (2.0 * a / PI).powf(0.75) * (-2.0 * a * r) * (-a * r * r).exp();
        }
        v
    }

    fn norm2() -> f64 {
        simpson(|r| 4.0 * PI * r * r * phi(r).powi(2), 0.0, 20.0, 40000)
    }

    #[test]
    fn single_atom_overlap_and_repulsion() {
        let g = Geometry::hydrogen(vec![[0.3, -0.2, 1.0]]);
        let s = overlap_matrix(&g);
        assert!((s[(0, 0)] - 1.0).abs() < 1e-10);
        assert_eq!(nuclear_repulsion(&g).unwrap(), 0.0);
    }

    #[test]
    fn coincident_atoms_overlap_one() {
        let g = Geometry::hydrogen(vec![[0.0; 3], [0.0; 3]]);
        let s = overlap_matrix(&g);
        assert!((s[(0, 1)] - 1.0).abs() < 1e-10);
        assert!(matches!(
            nuclear_repulsion(&g),
            Err(Error::InvalidGeometry(_))
        ));
    }

    #[test]
    fn h2_overlap_matches_cylindrical_quadrature() {
        let g = h2(H2_BOND_ANGSTROM);
        let s = overlap_matrix(&g)[(0, 1)];
        // ∫ dz ∫ 2πρ dρ φ(|r−A|) φ(|r−B|), A = 0, B = 1.4 ẑ (bohr)
        let inner = |z: f64| {
            simpson(
                |rho| {
                    let ra = (rho * rho + z * z).sqrt();
                    let rb = (rho * rho + (z - 1.4).powi(2)).sqrt();
                    2.0 * PI * rho * phi(ra) * phi(rb)
                },
                0.0,
                12.0,
                2400,
            )
        };
        let quad = simpson(inner, -11.0, 12.4, 4680) / norm2();
        assert!((s - quad).abs() < 1e-6, "engine {s} quadrature {quad}");
        assert!((s - 0.6593).abs() < 1e-3);
    }

    #[test]
    fn single_atom_core_energy_matches_radial_quadrature() {
        let g = Geometry::hydrogen(vec![[0.0; 3]]);
        let h00 = core_hamiltonian(&g)[(0, 0)];
        let kinetic = simpson(|r| 0.5 * 4.0 * PI * r * r * dphi(r).powi(2), 0.0, 20.0, 40000);
        let attraction = simpson(|r| -4.0 * PI * r * phi(r).powi(2), 0.0, 20.0, 40000);
        let quad = (kinetic + attraction) / norm2();
        assert!((h00 - quad).abs() < 1e-8, "engine {h00} quadrature {quad}");
        // frozen from the quadrature above
        assert!((h00 - (-0.466_581_8)).abs() < 1e-6);
    }

    #[test]
    fn single_atom_self_repulsion_matches_radial_quadrature() {
        let g = Geometry::hydrogen(vec![[0.0; 3]]);
        let j = eri_tensor(&g).get(0, 0, 0, 0);
        let nrm = norm2();
        let rho = |r: f64| phi(r).powi(2) / nrm;
        // Hartree potential of a spherical density, then ∫ ρ V_H.
        let steps = 4000;
        let rmax = 16.0;
        let enclosed = |r: f64| simpson(|s| 4.0 * PI * s * s * rho(s), 0.0, r, steps);
        let outer = |r: f64| simpson(|s| 4.0 * PI * s * rho(s), r, rmax, steps);
        let quad = simpson(
            |r| {
                if r == 0.0 {
                    return 0.0;
                }
                4.0 * PI * r * r * rho(r) * (enclosed(r) / r + outer(r))
            },
            0.0,
            rmax,
            800,
        );
        assert!((j - quad).abs() < 1e-6, "engine {j} quadrature {quad}");
        assert!((j - 0.7746).abs() < 1e-3);
    }

    #[test]
    fn nuclear_repulsion_closed_forms() {
        let e = nuclear_repulsion(&h2(H2_BOND_ANGSTROM)).unwrap();
        assert!((e - 1.0 / 1.4).abs() < 1e-12);
        let side = 2.0 / BOHR_PER_ANGSTROM;
        let tri = Geometry::hydrogen(vec![
            [0.0, 0.0, 0.0],
            [side, 0.0, 0.0],
            [0.5 * side, 0.75f64.sqrt() * side, 0.0],
        ]);
        assert!((nuclear_repulsion(&tri).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn core_hamiltonian_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_geometry(&mut rng, 4);
        let mut moved = g.clone();
        for p in &mut moved.coords {
            p[0] += 1.0;
            p[1] += 2.0;
            p[2] += 3.0;
        }
        let a = core_hamiltonian(&g);
        let b = core_hamiltonian(&moved);
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn eri_symmetry_and_positivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = eri_tensor(&random_geometry(&mut rng, 4));
        assert!(g.symmetry_violation() < 1e-12);
        for _ in 0..50 {
            let geom = random_geometry(&mut rng, 4);
            let g = eri_tensor(&geom);
            for p in 0..4 {
                assert!(g.get(p, p, p, p) > 0.0);
            }
        }
    }

    #[test]
    fn native_basis_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geom = random_geometry(&mut rng, 6);
        let s = overlap_matrix(&geom);
        let x = lowdin_inverse_sqrt(&s).unwrap();
        let check = x.transpose() * &s * &x;
        assert!((check - DMatrix::<f64>::identity(6, 6)).amax() < 1e-10);
    }

    #[test]
    fn native_single_atom_unchanged() {
        let geom = Geometry::hydrogen(vec![[0.0; 3]]);
        let (ints, s) = IntegralSet::atomic(&geom).unwrap();
        let native = to_native_basis(&ints, &s).unwrap();
        assert!((native.h[(0, 0)] - ints.h[(0, 0)]).abs() < 1e-10);
        assert!((native.g.get(0, 0, 0, 0) - ints.g.get(0, 0, 0, 0)).abs() < 1e-10);
        assert_eq!(native.basis, BasisLabel::Native);
    }

    #[test]
    fn native_h4_trace_matches_loops() {
        let geom = Geometry::hydrogen((0..4).map(|i| [i as f64 * 0.9, 0.0, 0.0]).collect());
        let (ints, s) = IntegralSet::atomic(&geom).unwrap();
        let native = to_native_basis(&ints, &s).unwrap();
        let x = lowdin_inverse_sqrt(&s).unwrap();
        let mut trace = 0.0;
        for p in 0..4 {
            for a in 0..4 {
                for b in 0..4 {
                    trace += x[(a, p)] * ints.h[(a, b)] * x[(b, p)];
                }
            }
        }
        assert!((native.h.trace() - trace).abs() < 1e-12);
    }

    #[test]
    fn transform_identity_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ints = IntegralSet::native(&random_geometry(&mut rng, 4)).unwrap();
        let same = transform_integrals(&ints, &DMatrix::identity(4, 4)).unwrap();
        assert!((&same.h - &ints.h).amax() < 1e-14);
        for (x, y) in same.g.as_slice().iter().zip(ints.g.as_slice()) {
            assert!((x - y).abs() < 1e-14);
        }
        // new orbital p is old orbital perm[p]
        let perm = [2usize, 0, 3, 1];
        let mut c = DMatrix::zeros(4, 4);
        for (p, &old) in perm.iter().enumerate() {
            c[(old, p)] = 1.0;
        }
        let t = transform_integrals(&ints, &c).unwrap();
        for p in 0..4 {
            for q in 0..4 {
                assert!((t.h[(p, q)] - ints.h[(perm[p], perm[q])]).abs() < 1e-14);
                for r in 0..4 {
                    for s in 0..4 {
                        let want = ints.g.get(perm[p], perm[q], perm[r], perm[s]);
                        assert!((t.g.get(p, q, r, s) - want).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn transform_matches_naive_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ints = IntegralSet::native(&random_geometry(&mut rng, 4)).unwrap();
        let mut a = DMatrix::zeros(4, 4);
        for i in 0..4 {
            for j in (i + 1)..4 {
                let v: f64 = rng.random_range(-1.0..1.0);
                a[(i, j)] = v;
                a[(j, i)] = -v;
            }
        }
        let c = crate::linalg::expm(&a);
        let t = transform_integrals(&ints, &c).unwrap();
        let n = 4;
        for p in 0..n {
            for q in 0..n {
                for r in 0..n {
                    for s in 0..n {
                        let mut acc = 0.0;
                        for i in 0..n {
                            for j in 0..n {
                                for k in 0..n {
                                    for l in 0..n {
                                        acc += c[(i, p)]
                                            * c[(j, q)]
                                            * c[(k, r)]
                                            * c[(l, s)]
                                            * ints.g.get(i, j, k, l);
                                    }
                                }
                            }
                        }
                        assert!((t.g.get(p, q, r, s) - acc).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn transform_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ints = IntegralSet::native(&random_geometry(&mut rng, 4)).unwrap();
        let rand_rot = |rng: &mut ChaCha8Rng| {
            let mut a = DMatrix::zeros(4, 4);
            for i in 0..4 {
                for j in (i + 1)..4 {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    a[(i, j)] = v;
                    a[(j, i)] = -v;
                }
            }
            crate::linalg::expm(&a)
        };
        let c1 = rand_rot(&mut rng);
        let c2 = rand_rot(&mut rng);
        let two_step = transform_integrals(&transform_integrals(&ints, &c1).unwrap(), &c2).unwrap();
        let one_step = transform_integrals(&ints, &(&c1 * &c2)).unwrap();
        assert!((two_step.h - one_step.h).amax() < 1e-10);
        for (x, y) in two_step.g.as_slice().iter().zip(one_step.g.as_slice()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn transform_rejects_dimension_mismatch() {
        let ints = IntegralSet::native(&h2(0.74)).unwrap();
        assert!(transform_integrals(&ints, &DMatrix::identity(3, 3)).is_err());
    }

    #[test]
    fn rigid_motion_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let geom = random_geometry(&mut rng, 4);
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let mut moved = geom.clone();
        for p in &mut moved.coords {
            let (x, y) = (p[0], p[1]);
            *p = [c * x - s * y + 0.7, s * x + c * y - 1.1, p[2] + 2.0];
        }
        let (a, sa) = IntegralSet::atomic(&geom).unwrap();
        let (b, sb) = IntegralSet::atomic(&moved).unwrap();
        assert!((sa - sb).amax() < 1e-10);
        assert!((a.h - b.h).amax() < 1e-10);
        assert!((a.e_nn - b.e_nn).abs() < 1e-10);
        for (x, y) in a.g.as_slice().iter().zip(b.g.as_slice()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn family_names_round_trip() {
        for f in Family::ALL {
            // datasets and the command line use the same spelling
            assert_eq!(serde_json::to_string(&f).unwrap(), format!("\"{}\"", f.as_str()));
            assert_eq!(f.as_str().parse::<Family>().unwrap(), f);
        }
        assert!("hexagonal".parse::<Family>().is_err());
    }
}
