//! Molecules, feature encoding, XYZ I/O and the synthetic toy dataset.
//!
//! A [`MoleculeGeometry`] is the continuous pair `⟨x, h⟩` the flow operates
//! on: Zero-CoM coordinates plus per-node features laid out as a one-hot
//! atom-type block in the fixed order `(H, C, N, O, F)` followed by one real
//! charge channel. A [`Molecule`] is the discrete counterpart (element and
//! integer charge per atom) used for I/O and metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{project_zero_com, random_rotation, PointCloud, Vec3};
use crate::rng::{self, Rng};
use crate::sampling::discretize_features;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Element {
    H,
    C,
    N,
    O,
    F,
}

impl Element {
    /// One-hot order used by every feature layout and checkpoint.
    pub const ALL: [Element; 5] = [Element::H, Element::C, Element::N, Element::O, Element::F];

    pub fn symbol(self) -> &'static str {
        match self {
            Element::H => "H",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::F => "F",
        }
    }

    pub fn from_symbol(s: &str) -> Result<Self> {
        Ok(match s {
            "H" => Element::H,
            "C" => Element::C,
            "N" => Element::N,
            "O" => Element::O,
            "F" => Element::F,
            other => return Err(Error::UnknownElement(other.to_string())),
        })
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for Element {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Feature width: 5 one-hot channels + 1 charge channel.
pub const FEATURE_DIM: usize = Element::ALL.len() + 1;
pub const CHARGE_CHANNEL: usize = Element::ALL.len();

/// Continuous geometry `⟨x, h⟩` with `h` stored row-major as `N×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeGeometry {
    pub coords: PointCloud,
    pub features: Vec<f64>,
    pub d: usize,
}

impl MoleculeGeometry {
    pub fn new(coords: PointCloud, features: Vec<f64>, d: usize) -> Result<Self> {
        if features.len() != coords.len() * d {
            return Err(Error::LengthMismatch { expected: coords.len() * d, got: features.len() });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("features"));
        }
        Ok(Self { coords, features, d })
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    /// Decode features into elements and integer charges.
    pub fn discretize(&self) -> Result<Molecule> {
        let (elements, charges) = discretize_features(&self.features, self.d, crate::sampling::DEFAULT_SIGMA0)?;
        Ok(Molecule { elements, charges, coords: self.coords.clone() })
    }
}

/// Discrete molecule: element and formal charge per atom.
#[derive(Debug, Clone, PartialEq)]
pub struct Molecule {
    pub elements: Vec<Element>,
    pub charges: Vec<i32>,
    pub coords: PointCloud,
}

impl Molecule {
    pub fn new(elements: Vec<Element>, charges: Vec<i32>, coords: PointCloud) -> Result<Self> {
        if elements.len() != coords.len() {
            return Err(Error::LengthMismatch { expected: coords.len(), got: elements.len() });
        }
        if charges.len() != coords.len() {
            return Err(Error::LengthMismatch { expected: coords.len(), got: charges.len() });
        }
        Ok(Self { elements, charges, coords })
    }

    pub fn neutral(elements: Vec<Element>, coords: PointCloud) -> Result<Self> {
        let n = elements.len();
        Self::new(elements, vec![0; n], coords)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn encode(&self) -> Result<MoleculeGeometry> {
        encode(&self.elements, &self.charges, &self.coords)
    }
}

/// One-hot + charge features with Zero-CoM coordinates.
pub fn encode(elements: &[Element], charges: &[i32], coords: &PointCloud) -> Result<MoleculeGeometry> {
    let n = coords.len();
    if elements.len() != n || charges.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: elements.len().min(charges.len()) });
    }
    let mut features = vec![0.0; n * FEATURE_DIM];
    for (i, (e, q)) in elements.iter().zip(charges).enumerate() {
        features[i * FEATURE_DIM + e.index()] = 1.0;
        features[i * FEATURE_DIM + CHARGE_CHANNEL] = *q as f64;
    }
    MoleculeGeometry::new(project_zero_com(coords), features, FEATURE_DIM)
}

/// An immutable collection of encoded molecules with its size histogram.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub molecules: Vec<MoleculeGeometry>,
    pub size_histogram: BTreeMap<usize, usize>,
}

impl Dataset {
    pub fn from_molecules(mols: &[Molecule]) -> Result<Self> {
        let molecules = mols.iter().map(Molecule::encode).collect::<Result<Vec<_>>>()?;
        Ok(Self::from_geometries(molecules))
    }

    pub fn from_geometries(molecules: Vec<MoleculeGeometry>) -> Self {
        let mut size_histogram = BTreeMap::new();
        for m in &molecules {
            *size_histogram.entry(m.n_nodes()).or_insert(0) += 1;
        }
        Self { molecules, size_histogram }
    }

    pub fn len(&self) -> usize {
        self.molecules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.molecules.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.molecules.first().map_or(FEATURE_DIM, |m| m.d)
    }

    /// Draw node counts from the empirical size histogram.
    pub fn sample_node_counts(&self, n: usize, rng: &mut Rng) -> Vec<usize> {
        let total: usize = self.size_histogram.values().sum();
        (0..n)
            .map(|_| {
                let mut k = (rng::uniform(rng, 0.0, 1.0) * total as f64) as usize;
                for (&size, &count) in &self.size_histogram {
                    if k < count {
                        return size;
                    }
                    k -= count;
                }
                *self.size_histogram.keys().next_back().expect("non-empty histogram")
            })
            .collect()
    }

    pub fn discretized(&self) -> Result<Vec<Molecule>> {
        self.molecules.iter().map(MoleculeGeometry::discretize).collect()
    }

    /// CSV with header `n_nodes,count`.
    pub fn size_histogram_csv(&self) -> String {
        let mut out = String::from("n_nodes,count\n");
        for (n, c) in &self.size_histogram {
            let _ = writeln!(out, "{n},{c}");
        }
        out
    }
}

/// Fraction of atoms of each element over a set of molecules.
pub fn element_marginals(mols: &[Molecule]) -> [f64; 5] {
    let mut counts = [0usize; 5];
    for m in mols {
        for e in &m.elements {
            counts[e.index()] += 1;
        }
    }
    let total = counts.iter().sum::<usize>().max(1) as f64;
    counts.map(|c| c as f64 / total)
}

// ---------------------------------------------------------------------------
// XYZ
// ---------------------------------------------------------------------------

/// Parse concatenated XYZ frames: a count line, a comment line, then one
/// `Symbol x y z [charge]` row per atom.
pub fn parse_xyz(text: &str) -> Result<Vec<Molecule>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut mols = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let count_line = i + 1;
        let n: usize = lines[i].trim().parse().map_err(|_| Error::Parse {
            line: count_line,
            msg: format!("expected an atom count, found {:?}", lines[i].trim()),
        })?;
        if n == 0 {
            return Err(Error::Parse { line: count_line, msg: "atom count must be positive".into() });
        }
        if i + 1 >= lines.len() {
            return Err(Error::Parse { line: count_line + 1, msg: "missing comment line".into() });
        }
        let mut elements = Vec::with_capacity(n);
        let mut charges = Vec::with_capacity(n);
        let mut coords = Vec::with_capacity(n);
        for k in 0..n {
            let idx = i + 2 + k;
            let line_no = idx + 1;
            let row = lines
                .get(idx)
                .ok_or(Error::Parse { line: line_no, msg: format!("expected {n} atom rows, file ended after {k}") })?;
            let fields: Vec<&str> = row.split_whitespace().collect();
            if fields.len() < 4 || fields.len() > 5 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected `Symbol x y z [charge]`, found {:?}", row.trim()),
                });
            }
            let element = Element::from_symbol(fields[0])
                .map_err(|_| Error::Parse { line: line_no, msg: format!("unknown atom symbol {:?}", fields[0]) })?;
            let mut p: Vec3 = [0.0; 3];
            for (c, f) in p.iter_mut().zip(&fields[1..4]) {
                *c = f
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or(Error::Parse { line: line_no, msg: format!("non-numeric coordinate {f:?}") })?;
            }
            let charge = match fields.get(4) {
                Some(f) => f
                    .parse::<i32>()
                    .map_err(|_| Error::Parse { line: line_no, msg: format!("non-integer charge {f:?}") })?,
                None => 0,
            };
            elements.push(element);
            charges.push(charge);
            coords.push(p);
        }
        mols.push(Molecule::new(elements, charges, PointCloud::new(coords)?)?);
        i += 2 + n;
    }
    Ok(mols)
}

/// Format molecules as XYZ with 6-decimal coordinates. The charge column is
/// written only for molecules carrying a non-zero charge.
pub fn format_xyz(mols: &[Molecule]) -> String {
    let mut out = String::new();
    for m in mols {
        let charged = m.charges.iter().any(|&q| q != 0);
        let _ = writeln!(out, "{}", m.len());
        out.push('\n');
        for ((e, q), p) in m.elements.iter().zip(&m.charges).zip(m.coords.points()) {
            let _ = write!(out, "{} {:.6} {:.6} {:.6}", e, p[0], p[1], p[2]);
            if charged {
                let _ = write!(out, " {q}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn read_xyz_molecules(path: impl AsRef<Path>) -> Result<Vec<Molecule>> {
    parse_xyz(&std::fs::read_to_string(path)?)
}

/// Read an XYZ file into an encoded, Zero-CoM dataset.
pub fn read_xyz(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_molecules(&read_xyz_molecules(path)?)
}

pub fn write_xyz(mols: &[Molecule], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, format_xyz(mols))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic toy molecules
// ---------------------------------------------------------------------------

/// Per-coordinate jitter of the toy dataset (Å).
pub const TOY_JITTER: f64 = 0.05;
/// Jitter draws beyond this many standard deviations are redrawn, so every
/// pairwise distance stays within `2·√3·2σ ≈ 0.35 Å` of its template value.
pub const TOY_JITTER_TRUNCATION: f64 = 2.0;

/// A rigid template: water (3), ammonia (4), methane (5), methanol (6).
#[derive(Debug, Clone)]
pub struct ToyTemplate {
    pub name: &'static str,
    pub elements: Vec<Element>,
    pub coords: Vec<Vec3>,
}

pub fn toy_templates() -> Vec<ToyTemplate> {
    use Element::*;
    let deg = std::f64::consts::PI / 180.0;

    let half = 0.5 * 104.5 * deg;
    let water = vec![
        [0.0, 0.0, 0.0],
        [0.96 * half.sin(), 0.96 * half.cos(), 0.0],
        [-0.96 * half.sin(), 0.96 * half.cos(), 0.0],
    ];

    // N–H 1.01 Å, H–N–H 106.7°.
    let hh = 2.0 * 1.01 * (0.5 * 106.7 * deg).sin();
    let r = hh / 3f64.sqrt();
    let h = (1.01f64 * 1.01 - r * r).sqrt();
    let mut ammonia = vec![[0.0, 0.0, 0.0]];
    for k in 0..3 {
        let phi = k as f64 * 120.0 * deg;
        ammonia.push([r * phi.cos(), r * phi.sin(), -h]);
    }

    let a = 1.09 / 3f64.sqrt();
    let methane = vec![[0.0, 0.0, 0.0], [a, a, a], [a, -a, -a], [-a, a, -a], [-a, -a, a]];

    // C–O 1.43, O–H 0.96, C–O–H 108.5°, C–H 1.09, H–C–O 109.5°, staggered.
    let coh = 108.5 * deg;
    let hco = 109.5 * deg;
    let mut methanol = vec![[0.0, 0.0, 0.0], [1.43, 0.0, 0.0], [1.43 - 0.96 * coh.cos(), 0.96 * coh.sin(), 0.0]];
    for phi in [180.0 * deg, 60.0 * deg, -60.0 * deg] {
        methanol.push([1.09 * hco.cos(), 1.09 * hco.sin() * phi.cos(), 1.09 * hco.sin() * phi.sin()]);
    }

    vec![
        ToyTemplate { name: "water", elements: vec![O, H, H], coords: water },
        ToyTemplate { name: "ammonia", elements: vec![N, H, H, H], coords: ammonia },
        ToyTemplate { name: "methane", elements: vec![C, H, H, H, H], coords: methane },
        ToyTemplate { name: "methanol", elements: vec![C, O, H, H, H, H], coords: methanol },
    ]
}

/// Jittered, randomly oriented copies of the toy templates, sizes drawn
/// uniformly from {3, 4, 5, 6}.
pub fn synthetic_toy_molecules(n_molecules: usize, seed: u64) -> Vec<Molecule> {
    let templates = toy_templates();
    let mut rng = rng::seeded(seed);
    (0..n_molecules)
        .map(|_| {
            let t = &templates[(rng::uniform(&mut rng, 0.0, 1.0) * templates.len() as f64) as usize % templates.len()];
            let rot = random_rotation(&mut rng);
            let coords: Vec<Vec3> = t
                .coords
                .iter()
                .map(|p| {
                    let mut q = *p;
                    for c in q.iter_mut() {
                        *c += truncated_jitter(&mut rng);
                    }
                    rot.rotate(&q)
                })
                .collect();
            let coords = project_zero_com(&PointCloud::from_vec_unchecked(coords));
            Molecule::neutral(t.elements.clone(), coords).expect("template lengths agree")
        })
        .collect()
}

pub fn synthetic_toy_dataset(n_molecules: usize, seed: u64) -> Result<Dataset> {
    if n_molecules == 0 {
        return Err(Error::InvalidArgument("n_molecules must be at least 1".into()));
    }
    Dataset::from_molecules(&synthetic_toy_molecules(n_molecules, seed))
}

fn truncated_jitter(rng: &mut Rng) -> f64 {
    loop {
        let z = rng::normal(rng);
        if z.abs() <= TOY_JITTER_TRUNCATION {
            return TOY_JITTER * z;
        }
    }
}
