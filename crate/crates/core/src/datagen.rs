//! Geometry sampling, minimum-weight matching, the Givens initial guess and
//! reference-record production.

use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chem::{distance, Family, Geometry, IntegralSet};
use crate::error::{Error, Result};
use crate::linalg::{logm_special_orthogonal, SpecialOrthogonal};
use crate::orbital_opt::{energy_with_orbitals, optimize_orbitals};
use crate::spa::{PairStructure, SpaAngles};

pub const SCHEMA_VERSION: u32 = 1;
/// Attempts allowed per geometry before sampling gives up.
pub const SAMPLING_BUDGET: usize = 10_000;
/// Fresh seeds tried for one record before generation gives up.
pub const RECORD_RETRIES: u64 = 64;
const SPACING: std::ops::Range<f64> = 0.5..4.0;
/// Matching costs closer than this (Å) count as ties.
const MATCHING_TIE_TOL: f64 = 1e-12;

/// Samples a geometry of `family` with `n` hydrogens.
pub fn sample_geometry(family: Family, n: usize, seed: u64) -> Result<Geometry> {
    if n % 2 != 0 || !(4..=12).contains(&n) {
        return Err(Error::invalid(format!(
            "sampled molecules need an even atom count in 4..=12, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempts = 0;
    while attempts < SAMPLING_BUDGET {
        let coords = match family {
            Family::LinearEquidistant => {
                attempts += 1;
                linear_coords(&vec![rng.random_range(SPACING); n - 1])
            }
            Family::LinearRandom => {
                attempts += 1;
                let gaps: Vec<f64> = (1..n).map(|_| rng.random_range(SPACING)).collect();
                linear_coords(&gaps)
            }
            Family::PlanarEquidistant => {
                attempts += 1;
                grid_coords(n, rng.random_range(SPACING))
            }
            Family::Ring => {
                attempts += 1;
                ring_coords(n, rng.random_range(SPACING))
            }
            Family::PlanarRandom => {
                match box_coords(&mut rng, n, 2, &mut attempts) {
                    Some(c) => c,
                    None => break,
                }
            }
            Family::Random3d => {
                match box_coords(&mut rng, n, 3, &mut attempts) {
                    Some(c) => c,
                    None => break,
                }
            }
        };
        let geom = Geometry {
            elements: vec!["H".to_string(); n],
            coords,
            family: Some(family),
            seed,
        };
        if geom.validate().is_ok() {
            return Ok(geom);
        }
    }
    Err(Error::SamplingFailure(format!(
        "{family} H{n} (seed {seed}): no valid geometry within {SAMPLING_BUDGET} attempts"
    )))
}

fn linear_coords(gaps: &[f64]) -> Vec<[f64; 3]> {
    let mut x = 0.0;
    let mut coords = vec![[0.0; 3]];
    for g in gaps {
        x += g;
        coords.push([x, 0.0, 0.0]);
    }
    coords
}

/// Two rows of `n / 2` atoms.
fn grid_coords(n: usize, d: f64) -> Vec<[f64; 3]> {
    (0..n)
        .map(|i| [(i % (n / 2)) as f64 * d, (i / (n / 2)) as f64 * d, 0.0])
        .collect()
}

/// Regular polygon with edge length `d`, centred at the origin.
fn ring_coords(n: usize, d: f64) -> Vec<[f64; 3]> {
    let radius = d / (2.0 * libm::sin(PI / n as f64));
    (0..n)
        .map(|i| {
            let phi = 2.0 * PI * i as f64 / n as f64;
            [radius * libm::cos(phi), radius * libm::sin(phi), 0.0]
        })
        .collect()
}

/// Structured geometry with every nearest-neighbour gap equal to `spacing`.
/// Supports the linear, planar grid and ring families with any even count
/// the family admits.
pub fn equidistant_geometry(family: Family, n: usize, spacing: f64) -> Result<Geometry> {
    let coords = match family {
        Family::LinearEquidistant if n >= 2 => linear_coords(&vec![spacing; n - 1]),
        Family::PlanarEquidistant if n >= 4 => grid_coords(n, spacing),
        Family::Ring if n >= 4 => ring_coords(n, spacing),
        _ => {
            return Err(Error::invalid(format!(
                "no equidistant {family} geometry with {n} atoms"
            )))
        }
    };
    let geom = Geometry {
        elements: vec!["H".to_string(); n],
        coords,
        family: Some(family),
        seed: 0,
    };
    geom.validate()?;
    Ok(geom)
}

/// Uniform points in a box of side `2·n^(1/dim)`, each rejected while it
/// sits closer than the minimum spacing to an earlier point.
fn box_coords(
    rng: &mut ChaCha8Rng,
    n: usize,
    dim: usize,
    attempts: &mut usize,
) -> Option<Vec<[f64; 3]>> {
    let side = 2.0 * (n as f64).powf(1.0 / dim as f64);
    let mut coords: Vec<[f64; 3]> = Vec::with_capacity(n);
    while coords.len() < n {
        if *attempts >= SAMPLING_BUDGET {
            return None;
        }
        *attempts += 1;
        let mut p = [0.0; 3];
        for v in p.iter_mut().take(dim) {
            *v = rng.random_range(0.0..side);
        }
        if coords.iter().all(|q| distance(&p, q) > SPACING.start) {
            coords.push(p);
        }
    }
    Some(coords)
}

/// A perfect matching with edges `(i, j)`, `i < j`, sorted by `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl Matching {
    pub fn try_new(n: usize, mut edges: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = vec![false; n];
        for e in edges.iter_mut() {
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
            let (i, j) = *e;
            if i == j || j >= n {
                return Err(Error::invalid(format!("bad matching edge ({i}, {j}) for {n} atoms")));
            }
            for x in [i, j] {
                if std::mem::replace(&mut seen[x], true) {
                    return Err(Error::invalid(format!("atom {x} matched twice")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("matching is not perfect"));
        }
        edges.sort_unstable();
        Ok(Matching { n, edges })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// `partner[i]` is the atom matched with `i`.
    pub fn partners(&self) -> Vec<usize> {
        let mut p = vec![0; self.n];
        for &(i, j) in &self.edges {
            p[i] = j;
            p[j] = i;
        }
        p
    }

    /// One orbital pair per edge; the lower index is the bonding orbital.
    pub fn pair_structure(&self) -> PairStructure {
        PairStructure::try_new(self.n, self.edges.clone()).expect("matching is a valid pairing")
    }

    pub fn cost(&self, geom: &Geometry) -> f64 {
        self.edges.iter().map(|&(i, j)| geom.distance(i, j)).sum()
    }
}

/// Exact minimum-total-length perfect matching; ties go to the
/// lexicographically smallest edge list.
pub fn min_weight_matching(geom: &Geometry) -> Result<Matching> {
    let n = geom.n_atoms();
    if n % 2 != 0 || n == 0 || n > 16 {
        return Err(Error::invalid(format!("cannot perfectly match {n} atoms")));
    }
    let mut memo = HashMap::new();
    let full = (1u32 << n) - 1;
    let (_, edges) = best_matching(geom, full, &mut memo);
    Matching::try_new(n, edges)
}

type Sub = (f64, Vec<(usize, usize)>);

/// Best matching of the atoms in `free`. The lowest free atom is paired with
/// each candidate in ascending order, so the first optimum found is also the
/// lexicographically smallest.
fn best_matching(geom: &Geometry, free: u32, memo: &mut HashMap<u32, Sub>) -> Sub {
    if free == 0 {
        return (0.0, Vec::new());
    }
    if let Some(hit) = memo.get(&free) {
        return hit.clone();
    }
    let i = free.trailing_zeros() as usize;
    let rest = free & !(1 << i);
    let mut best: Option<Sub> = None;
    for j in (i + 1)..geom.n_atoms() {
        if rest >> j & 1 == 0 {
            continue;
        }
        let (sub_cost, sub_edges) = best_matching(geom, rest & !(1 << j), memo);
        let cost = geom.distance(i, j) + sub_cost;
        if best.as_ref().is_none_or(|b| cost < b.0 - MATCHING_TIE_TOL) {
            let mut edges = Vec::with_capacity(sub_edges.len() + 1);
            edges.push((i, j));
            edges.extend(sub_edges);
            best = Some((cost, edges));
        }
    }
    let best = best.expect("an even set of free atoms has a pairing");
    memo.insert(free, best.clone());
    best
}

/// Block rotation with `(1/√2)[[1, 1], [−1, 1]]` on every matched pair.
pub fn givens_guess(matching: &Matching, n: usize) -> Result<SpecialOrthogonal> {
    if matching.n() != n {
        return Err(Error::invalid(format!(
            "matching on {} atoms used for {n} orbitals",
            matching.n()
        )));
    }
    let mut m = DMatrix::identity(n, n);
    for &(i, j) in matching.edges() {
        m[(i, i)] = FRAC_1_SQRT_2;
        m[(j, j)] = FRAC_1_SQRT_2;
        m[(i, j)] = FRAC_1_SQRT_2;
        m[(j, i)] = -FRAC_1_SQRT_2;
    }
    SpecialOrthogonal::try_new(m)
}

/// One reference sample: geometry, matching and optimized orbitals.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub geometry: Geometry,
    pub matching: Matching,
    pub theta_opt: SpaAngles,
    pub m_oo: SpecialOrthogonal,
    pub e_spa: f64,
    pub e_init: f64,
    pub schema_version: u32,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    coords: Vec<[f64; 3]>,
    elements: Vec<String>,
    family: Option<Family>,
    seed: u64,
    edges: Vec<(usize, usize)>,
    theta_opt: Vec<f64>,
    m_oo: Vec<f64>,
    e_spa: f64,
    e_init: f64,
    schema_version: u32,
}

impl DatasetRecord {
    pub fn n_atoms(&self) -> usize {
        self.geometry.n_atoms()
    }

    /// Checks the cross-field invariants of a loaded record.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_atoms();
        self.geometry
            .validate()
            .map_err(|e| Error::Schema(e.to_string()))?;
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.matching.n() != n || self.m_oo.n() != n || self.theta_opt.0.len() != n / 2 {
            return Err(Error::Schema("field sizes disagree with the atom count".into()));
        }
        if !(self.e_spa.is_finite() && self.e_init.is_finite()) {
            return Err(Error::Schema("non-finite energy".into()));
        }
        if self.e_spa > self.e_init + 1e-9 {
            return Err(Error::Schema(format!(
                "optimized energy {} above initial energy {}",
                self.e_spa, self.e_init
            )));
        }
        logm_special_orthogonal(&self.m_oo)
            .map_err(|e| Error::Schema(format!("m_oo has no principal logarithm: {e}")))?;
        Ok(())
    }

    fn to_line(&self) -> RecordLine {
        RecordLine {
            coords: self.geometry.coords.clone(),
            elements: self.geometry.elements.clone(),
            family: self.geometry.family,
            seed: self.geometry.seed,
            edges: self.matching.edges().to_vec(),
            theta_opt: self.theta_opt.0.clone(),
            m_oo: self.m_oo.to_row_major(),
            e_spa: self.e_spa,
            e_init: self.e_init,
            schema_version: self.schema_version,
        }
    }

    fn from_line(line: RecordLine) -> Result<Self> {
        let n = line.coords.len();
        let schema = |e: Error| Error::Schema(e.to_string());
        let record = DatasetRecord {
            geometry: Geometry {
                coords: line.coords,
                elements: line.elements,
                family: line.family,
                seed: line.seed,
            },
            matching: Matching::try_new(n, line.edges).map_err(schema)?,
            theta_opt: SpaAngles(line.theta_opt),
            m_oo: SpecialOrthogonal::from_row_major(n, &line.m_oo).map_err(schema)?,
            e_spa: line.e_spa,
            e_init: line.e_init,
            schema_version: line.schema_version,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_line()).expect("record serializes")
    }
}

/// Runs matching, the Givens guess and orbital optimization for `geom`.
pub fn build_record(geom: Geometry) -> Result<DatasetRecord> {
    geom.validate()?;
    let n = geom.n_atoms();
    let matching = min_weight_matching(&geom)?;
    let ps = matching.pair_structure();
    let guess = givens_guess(&matching, n)?;
    let ints = IntegralSet::native(&geom)?;
    let (_, e_init) = energy_with_orbitals(&ints, &ps, &guess)?;
    let opt = optimize_orbitals(&ints, &ps, &guess)?;
    logm_special_orthogonal(&opt.m_oo)?;
    Ok(DatasetRecord {
        geometry: geom,
        matching,
        theta_opt: opt.theta_opt,
        m_oo: opt.m_oo,
        e_spa: opt.e_spa,
        e_init,
        schema_version: SCHEMA_VERSION,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub family: Family,
    pub n: usize,
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub written: usize,
    pub rejected: usize,
}

fn is_rejectable(e: &Error) -> bool {
    matches!(
        e,
        Error::BranchBoundary { .. }
            | Error::OrbitalConvergence(_)
            | Error::ThetaConvergence { .. }
            | Error::NearLinearDependence(_)
    )
}

/// Record `index` of `spec`. Rejected attempts move to the seed
/// `seed + index + k·count`, so records never share a seed.
fn generate_one(spec: &DatasetSpec, index: usize) -> Result<(DatasetRecord, usize)> {
    let stride = spec.count.max(1) as u64;
    for k in 0..RECORD_RETRIES {
        let seed = spec
            .seed
            .wrapping_add(index as u64)
            .wrapping_add(k.wrapping_mul(stride));
        let geom = sample_geometry(spec.family, spec.n, seed)?;
        match build_record(geom) {
            Ok(r) => return Ok((r, k as usize)),
            Err(e) if is_rejectable(&e) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::SamplingFailure(format!(
        "record {index} of {} H{}: {RECORD_RETRIES} consecutive rejections",
        spec.family, spec.n
    )))
}

/// Generates `spec.count` records in parallel and writes them in index order.
pub fn generate_records(spec: &DatasetSpec) -> Result<(Vec<DatasetRecord>, usize)> {
    let results: Vec<Result<(DatasetRecord, usize)>> = (0..spec.count)
        .into_par_iter()
        .map(|i| generate_one(spec, i))
        .collect();
    let mut records = Vec::with_capacity(spec.count);
    let mut rejected = 0;
    for r in results {
        let (rec, rej) = r?;
        records.push(rec);
        rejected += rej;
    }
    Ok((records, rejected))
}

pub fn generate_dataset(spec: &DatasetSpec, out: &Path) -> Result<GenerationSummary> {
    let (records, rejected) = generate_records(spec)?;
    write_dataset(out, &records)?;
    Ok(GenerationSummary {
        written: records.len(),
        rejected,
    })
}

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", r.to_json()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads and validates every record; blank lines are skipped.
pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: idx + 1,
            source,
        })?;
        let record = DatasetRecord::from_line(parsed).map_err(|e| {
            Error::Schema(format!("{}:{}: {e}", path.display(), idx + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}
