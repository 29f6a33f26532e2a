//! Graph construction and hand-crafted node, edge and pair descriptors.
//!
//! Feature layouts (column order is part of the checkpoint contract):
//!
//! * node, `12 + T`: z, log(1+deg), mean/std neighbour distance, min/max
//!   ratio, directional asymmetry, skew proxy, partner distance, 3 PCA
//!   projections, centroid distance, T random-walk return probabilities.
//! * edge, `L + 9`: L Gaussian RBFs, 1/d, e^−d, e^−d², d, centroid-frame
//!   cosine Φ_ij, source-row variance of Φ, M_init[i][j], centrality
//!   difference and mean.
//! * pair, `6`: |ΔPCA| (3), cos(c→i, i→j), cos(p(i)→i, i→j), d/d_max.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::chem::{distance, Geometry};
use crate::datagen::Matching;
use crate::error::{Error, Result};
use crate::linalg::{centroid, pca_axes, PcaFrame};

pub const NODE_BASE_WIDTH: usize = 12;
pub const EDGE_EXTRA_WIDTH: usize = 9;
pub const PAIR_WIDTH: usize = 6;
/// Vectors shorter than this count as zero in cosines.
const ZERO_VECTOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub t_walk: usize,
    pub l_rbf: usize,
    pub rbf_min: f64,
    pub rbf_max: f64,
    pub r_fine: f64,
    pub r_coarse: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            t_walk: 8,
            l_rbf: 20,
            rbf_min: 0.0,
            rbf_max: 6.0,
            r_fine: 2.5,
            r_coarse: 5.0,
        }
    }
}

impl FeatureConfig {
    pub fn node_width(&self) -> usize {
        NODE_BASE_WIDTH + self.t_walk
    }

    pub fn edge_width(&self) -> usize {
        self.l_rbf + EDGE_EXTRA_WIDTH
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_walk < 1 || self.l_rbf < 2 {
            return Err(Error::invalid("walk length must be ≥ 1 and RBF count ≥ 2"));
        }
        if !(self.rbf_max > self.rbf_min) {
            return Err(Error::invalid("RBF range must be non-empty"));
        }
        if !(self.r_fine > 0.0 && self.r_fine <= self.r_coarse) {
            return Err(Error::invalid("cutoffs must satisfy 0 < r_fine ≤ r_coarse"));
        }
        Ok(())
    }
}

/// Directed radius graphs and the complete upper-triangular pair list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graphs {
    pub fine: Vec<(usize, usize)>,
    pub coarse: Vec<(usize, usize)>,
    pub complete: Vec<(usize, usize)>,
}

/// Both orientations of every pair strictly closer than the cutoff, sorted.
pub fn radius_edges(geom: &Geometry, r_cut: f64) -> Vec<(usize, usize)> {
    let n = geom.n_atoms();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && geom.distance(i, j) < r_cut {
                edges.push((i, j));
            }
        }
    }
    edges
}

pub fn build_graphs(geom: &Geometry, r_fine: f64, r_coarse: f64) -> Result<Graphs> {
    if r_fine > r_coarse {
        return Err(Error::invalid(format!(
            "fine cutoff {r_fine} exceeds coarse cutoff {r_coarse}"
        )));
    }
    let n = geom.n_atoms();
    Ok(Graphs {
        fine: radius_edges(geom, r_fine),
        coarse: radius_edges(geom, r_coarse),
        complete: crate::linalg::upper_pairs(n).collect(),
    })
}

/// Return probabilities of a random walk: column `k` is `diag(P^(k+1))`
/// with `P = A D⁻¹`. Isolated nodes get zero rows.
pub fn rwse(n: usize, edges: &[(usize, usize)], t: usize) -> DMatrix<f64> {
    let mut adj = DMatrix::<f64>::zeros(n, n);
    for &(i, j) in edges {
        adj[(i, j)] = 1.0;
        adj[(j, i)] = 1.0;
    }
    let mut p = adj.clone();
    for j in 0..n {
        let deg: f64 = adj.column(j).sum();
        if deg > 0.0 {
            p.column_mut(j).scale_mut(1.0 / deg);
        }
    }
    let mut out = DMatrix::zeros(n, t);
    let mut power = DMatrix::<f64>::identity(n, n);
    for k in 0..t {
        power = &power * &p;
        for i in 0..n {
            out[(i, k)] = power[(i, i)];
        }
    }
    out
}

/// Gaussian expansion on `l` centres spanning `[d_min, d_max]` inclusive,
/// width `(d_max − d_min) / l`.
pub fn rbf_expand(r: f64, l: usize, d_min: f64, d_max: f64) -> Vec<f64> {
    let sigma = (d_max - d_min) / l as f64;
    let step = (d_max - d_min) / (l - 1) as f64;
    (0..l)
        .map(|k| {
            let mu = d_min + k as f64 * step;
            (-(r - mu).powi(2) / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Cosine of the angle between `a` and `b`; 0 if either is (nearly) zero.
pub fn cosine(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (na, nb) = (norm3(a), norm3(b));
    if na < ZERO_VECTOR || nb < ZERO_VECTOR {
        return 0.0;
    }
    let c = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb);
    c.clamp(-1.0, 1.0)
}

/// Cosines between centroid-to-atom vectors and the variance of each row
/// with the diagonal left out.
pub fn angular_matrix(geom: &Geometry) -> (DMatrix<f64>, Vec<f64>) {
    let n = geom.n_atoms();
    let c = centroid(&geom.coords);
    let rel: Vec<[f64; 3]> = geom.coords.iter().map(|p| sub(p, &c)).collect();
    let phi = DMatrix::from_fn(n, n, |i, j| cosine(&rel[i], &rel[j]));
    let diversity = (0..n)
        .map(|i| {
            if n < 2 {
                return 0.0;
            }
            let row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| phi[(i, j)]).collect();
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64
        })
        .collect();
    (phi, diversity)
}

fn max_pairwise_distance(geom: &Geometry) -> f64 {
    let n = geom.n_atoms();
    let mut d = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            d = d.max(geom.distance(i, j));
        }
    }
    d.max(1e-9)
}

fn centroid_distances(geom: &Geometry) -> Vec<f64> {
    let c = centroid(&geom.coords);
    geom.coords.iter().map(|p| distance(p, &c)).collect()
}

/// `N × (12 + T)` node descriptors; neighbours are the `edges` (fine graph).
pub fn node_features(
    geom: &Geometry,
    matching: &Matching,
    edges: &[(usize, usize)],
    pca: &PcaFrame,
    rwse_rows: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = geom.n_atoms();
    let t = rwse_rows.ncols();
    let partners = matching.partners();
    let dc = centroid_distances(geom);
    let mut neighbours = vec![Vec::new(); n];
    for &(i, j) in edges {
        neighbours[i].push(j);
    }
    let mut x = DMatrix::zeros(n, NODE_BASE_WIDTH + t);
    for i in 0..n {
        let nb = &neighbours[i];
        let deg = nb.len();
        x[(i, 0)] = 1.0;
        x[(i, 1)] = (1.0 + deg as f64).ln();
        if deg == 0 {
            x[(i, 4)] = 1.0;
        } else {
            let ds: Vec<f64> = nb.iter().map(|&j| geom.distance(i, j)).collect();
            let mean = ds.iter().sum::<f64>() / deg as f64;
            let std = (ds.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / deg as f64).sqrt();
            let min = ds.iter().copied().fold(f64::INFINITY, f64::min);
            let max = ds.iter().copied().fold(0.0, f64::max);
            let mut unit_sum = [0.0; 3];
            for &j in nb {
                let v = sub(&geom.coords[j], &geom.coords[i]);
                let len = norm3(&v);
                for k in 0..3 {
                    unit_sum[k] += v[k] / len;
                }
            }
            x[(i, 2)] = mean;
            x[(i, 3)] = std;
            x[(i, 4)] = min / max;
            x[(i, 5)] = norm3(&unit_sum) / deg as f64;
            x[(i, 6)] = if std < 1e-12 {
                0.0
            } else {
                (mean - 0.5 * (min + max)) / std
            };
        }
        x[(i, 7)] = geom.distance(i, partners[i]);
        for k in 0..3 {
            x[(i, 8 + k)] = pca.projections[(i, k)];
        }
        x[(i, 11)] = dc[i];
        for k in 0..t {
            x[(i, NODE_BASE_WIDTH + k)] = rwse_rows[(i, k)];
        }
    }
    x
}

/// Per-edge context shared by every edge of one molecule.
struct EdgeContext {
    phi: DMatrix<f64>,
    diversity: Vec<f64>,
    dc: Vec<f64>,
    d_max: f64,
}

impl EdgeContext {
    fn new(geom: &Geometry) -> Self {
        let (phi, diversity) = angular_matrix(geom);
        EdgeContext {
            phi,
            diversity,
            dc: centroid_distances(geom),
            d_max: max_pairwise_distance(geom),
        }
    }
}

/// One `(L + 9)` row per directed edge, in the order given.
pub fn edge_features(
    geom: &Geometry,
    m_init: &DMatrix<f64>,
    edges: &[(usize, usize)],
    l: usize,
    d_min: f64,
    d_max: f64,
) -> Result<DMatrix<f64>> {
    let ctx = EdgeContext::new(geom);
    let mut out = DMatrix::zeros(edges.len(), l + EDGE_EXTRA_WIDTH);
    for (row, &(i, j)) in edges.iter().enumerate() {
        let d = geom.distance(i, j);
        if d < 1e-9 {
            return Err(Error::DegenerateEdge(i, j));
        }
        for (k, v) in rbf_expand(d, l, d_min, d_max).into_iter().enumerate() {
            out[(row, k)] = v;
        }
        let extra = [
            1.0 / d,
            (-d).exp(),
            (-d * d).exp(),
            d,
            ctx.phi[(i, j)],
            ctx.diversity[i],
            m_init[(i, j)],
            (ctx.dc[i] - ctx.dc[j]).abs() / ctx.d_max,
            (ctx.dc[i] + ctx.dc[j]) / (2.0 * ctx.d_max),
        ];
        for (k, v) in extra.into_iter().enumerate() {
            out[(row, l + k)] = v;
        }
    }
    Ok(out)
}

/// Six readout descriptors for the ordered pair `(i, j)`.
pub fn pair_feature_row(
    geom: &Geometry,
    partners: &[usize],
    pca: &PcaFrame,
    d_max: f64,
    i: usize,
    j: usize,
) -> [f64; PAIR_WIDTH] {
    let c = centroid(&geom.coords);
    let (ri, rj) = (&geom.coords[i], &geom.coords[j]);
    let bond = sub(rj, ri);
    [
        (pca.projections[(i, 0)] - pca.projections[(j, 0)]).abs(),
        (pca.projections[(i, 1)] - pca.projections[(j, 1)]).abs(),
        (pca.projections[(i, 2)] - pca.projections[(j, 2)]).abs(),
        cosine(&sub(ri, &c), &bond),
        cosine(&sub(ri, &geom.coords[partners[i]]), &bond),
        geom.distance(i, j) / d_max,
    ]
}

pub fn pair_features(
    geom: &Geometry,
    matching: &Matching,
    pca: &PcaFrame,
    pairs: &[(usize, usize)],
) -> DMatrix<f64> {
    let partners = matching.partners();
    let d_max = max_pairwise_distance(geom);
    let mut out = DMatrix::zeros(pairs.len(), PAIR_WIDTH);
    for (row, &(i, j)) in pairs.iter().enumerate() {
        let f = pair_feature_row(geom, &partners, pca, d_max, i, j);
        for (k, v) in f.into_iter().enumerate() {
            out[(row, k)] = v;
        }
    }
    out
}

/// Everything the network consumes for one molecule.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGraph {
    pub n: usize,
    pub fine_edges: Vec<(usize, usize)>,
    pub coarse_edges: Vec<(usize, usize)>,
    pub complete_pairs: Vec<(usize, usize)>,
    pub node_x: DMatrix<f64>,
    pub fine_edge_x: DMatrix<f64>,
    pub coarse_edge_x: DMatrix<f64>,
    /// Edge descriptors of every complete pair `(i < j)`.
    pub pair_edge_x: DMatrix<f64>,
    pub pair_x: DMatrix<f64>,
    pub config: FeatureConfig,
}

/// Full featurization with the Givens guess of `matching` as `M_init`.
pub fn featurize(geom: &Geometry, matching: &Matching, cfg: &FeatureConfig) -> Result<FeatureGraph> {
    cfg.validate()?;
    let n = geom.n_atoms();
    if matching.n() != n {
        return Err(Error::invalid(format!(
            "matching covers {} atoms, geometry has {n}",
            matching.n()
        )));
    }
    let m_init = crate::datagen::givens_guess(matching, n)?.into_matrix();
    let graphs = build_graphs(geom, cfg.r_fine, cfg.r_coarse)?;
    let pca = pca_axes(&geom.coords);
    let walk = rwse(n, &graphs.fine, cfg.t_walk);
    let node_x = node_features(geom, matching, &graphs.fine, &pca, &walk);
    let edges =
        |list: &[(usize, usize)]| edge_features(geom, &m_init, list, cfg.l_rbf, cfg.rbf_min, cfg.rbf_max);
    Ok(FeatureGraph {
        n,
        fine_edge_x: edges(&graphs.fine)?,
        coarse_edge_x: edges(&graphs.coarse)?,
        pair_edge_x: edges(&graphs.complete)?,
        pair_x: pair_features(geom, matching, &pca, &graphs.complete),
        node_x,
        fine_edges: graphs.fine,
        coarse_edges: graphs.coarse,
        complete_pairs: graphs.complete,
        config: *cfg,
    })
}

#[derive(Serialize)]
struct FeatureDump<'a> {
    n: usize,
    fine_edges: &'a [(usize, usize)],
    coarse_edges: &'a [(usize, usize)],
    complete_pairs: &'a [(usize, usize)],
    node_x: Vec<Vec<f64>>,
    fine_edge_x: Vec<Vec<f64>>,
    coarse_edge_x: Vec<Vec<f64>>,
    pair_edge_x: Vec<Vec<f64>>,
    pair_x: Vec<Vec<f64>>,
    config: &'a FeatureConfig,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl FeatureGraph {
    /// JSON debug dump with matrices as row lists.
    pub fn to_json(&self) -> String {
        let dump = FeatureDump {
            n: self.n,
            fine_edges: &self.fine_edges,
            coarse_edges: &self.coarse_edges,
            complete_pairs: &self.complete_pairs,
            node_x: rows(&self.node_x),
            fine_edge_x: rows(&self.fine_edge_x),
            coarse_edge_x: rows(&self.coarse_edge_x),
            pair_edge_x: rows(&self.pair_edge_x),
            pair_x: rows(&self.pair_x),
            config: &self.config,
        };
        serde_json::to_string_pretty(&dump).expect("features serialize")
    }
}
