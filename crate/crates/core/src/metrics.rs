//! Bond inference, stability, uniqueness, and mutual-information estimators
//! for the feature and coordinate paths.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::data::{Dataset, Element, Molecule};
use crate::error::{Error, Result};
use crate::geometry::{dist2, PointCloud};
use crate::paths::ConditionalPath;
use crate::rng::{self, Rng};

const DEFAULT_TABLE: &str = include_str!("../data/bond_table_v1.txt");
const TOY_TABLE: &str = include_str!("../data/bond_table_toy.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BondOrder {
    Single = 1,
    Double = 2,
    Triple = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: BondOrder,
}

/// Distance cut-offs for one element pair: a pair closer than `triple` is a
/// triple bond, closer than `double` a double bond, closer than `single` a
/// single bond.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub single: f64,
    pub double: Option<f64>,
    pub triple: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BondTable {
    pub version: u32,
    thresholds: HashMap<(Element, Element), Thresholds>,
    valence: HashMap<(Element, i32), Vec<u32>>,
}

fn pair_key(a: Element, b: Element) -> (Element, Element) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl BondTable {
    /// The shipped table for H, C, N, O, F.
    pub fn standard() -> Self {
        Self::parse(DEFAULT_TABLE).expect("shipped bond table parses")
    }

    /// Single bonds only, matched to [`crate::data::synthetic_toy_dataset`].
    pub fn toy() -> Self {
        Self::parse(TOY_TABLE).expect("shipped toy bond table parses")
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut version = None;
        let mut margin = 1.0;
        let mut slack = 0.0;
        let mut refs: Vec<(usize, Element, Element, Vec<f64>)> = Vec::new();
        let mut valence: HashMap<(Element, i32), Vec<u32>> = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| Error::Parse { line: line_no, msg: format!("{msg}: {line:?}") };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| err("bad number"));
            let elem = |s: &str| Element::from_symbol(s).map_err(|_| err("unknown element"));
            match fields[0] {
                "version" if fields.len() == 2 => {
                    version = Some(fields[1].parse::<u32>().map_err(|_| err("bad version"))?)
                }
                "margin" if fields.len() == 2 => margin = num(fields[1])?,
                "slack" if fields.len() == 2 => slack = num(fields[1])?,
                "bond" if (4..=6).contains(&fields.len()) => {
                    let lens = fields[3..].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
                    if lens.windows(2).any(|w| w[1] >= w[0]) || lens.iter().any(|v| *v <= 0.0) {
                        return Err(err("bond lengths must be positive and decrease with order"));
                    }
                    refs.push((line_no, elem(fields[1])?, elem(fields[2])?, lens));
                }
                "valence" if fields.len() >= 4 => {
                    let e = elem(fields[1])?;
                    let q = fields[2].parse::<i32>().map_err(|_| err("bad charge"))?;
                    let vs = fields[3..]
                        .iter()
                        .map(|s| s.parse::<u32>().map_err(|_| err("bad valence")))
                        .collect::<Result<Vec<_>>>()?;
                    valence.entry((e, q)).or_default().extend(vs);
                }
                _ => return Err(err("unrecognized line")),
            }
        }
        let version = version.ok_or(Error::Parse { line: 1, msg: "missing `version` line".into() })?;
        let mut thresholds = HashMap::new();
        for (line, a, b, lens) in refs {
            let single = margin * lens[0] + slack;
            let double = lens.get(1).map(|d| 0.5 * (lens[0] + d));
            let triple = lens.get(2).map(|t| 0.5 * (lens[1] + t));
            if thresholds.insert(pair_key(a, b), Thresholds { single, double, triple }).is_some() {
                return Err(Error::Parse { line, msg: format!("duplicate pair {a}-{b}") });
            }
        }
        for e in Element::ALL {
            if !valence.contains_key(&(e, 0)) {
                return Err(Error::Parse { line: 0, msg: format!("no neutral valence for {e}") });
            }
        }
        Ok(Self { version, thresholds, valence })
    }

    pub fn thresholds(&self, a: Element, b: Element) -> Option<&Thresholds> {
        self.thresholds.get(&pair_key(a, b))
    }

    /// Allowed valences for an element with a formal charge (empty if none).
    pub fn valences(&self, e: Element, charge: i32) -> &[u32] {
        self.valence.get(&(e, charge)).map_or(&[], Vec::as_slice)
    }

    /// Bond order for a pair at distance `d`, or `None` when unbonded.
    pub fn order(&self, a: Element, b: Element, d: f64) -> Option<BondOrder> {
        let th = self.thresholds(a, b)?;
        if th.triple.is_some_and(|c| d < c) {
            Some(BondOrder::Triple)
        } else if th.double.is_some_and(|c| d < c) {
            Some(BondOrder::Double)
        } else if d < th.single {
            Some(BondOrder::Single)
        } else {
            None
        }
    }
}

/// All bonds of a molecule, `i < j`.
pub fn infer_bonds(mol: &Molecule, table: &BondTable) -> Vec<Bond> {
    let p = mol.coords.points();
    let mut bonds = Vec::new();
    for i in 0..mol.len() {
        for j in i + 1..mol.len() {
            let d = dist2(&p[i], &p[j]).sqrt();
            if let Some(order) = table.order(mol.elements[i], mol.elements[j], d) {
                bonds.push(Bond { i, j, order });
            }
        }
    }
    bonds
}

/// Per-atom stability flags: summed bond order equals an allowed valence.
pub fn atom_stability(mol: &Molecule, table: &BondTable) -> Vec<bool> {
    let mut sum = vec![0u32; mol.len()];
    for b in infer_bonds(mol, table) {
        sum[b.i] += b.order as u32;
        sum[b.j] += b.order as u32;
    }
    (0..mol.len()).map(|i| table.valences(mol.elements[i], mol.charges[i]).contains(&sum[i])).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityReport {
    pub atom_stable_fraction: f64,
    pub mol_stable_fraction: f64,
    pub unique_fraction: f64,
    pub n_molecules: usize,
    pub n_atoms: usize,
}

pub const STABILITY_HEADER: &str = "n_molecules,n_atoms,atom_stable,mol_stable,unique";

impl StabilityReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6}",
            self.n_molecules, self.n_atoms, self.atom_stable_fraction, self.mol_stable_fraction, self.unique_fraction
        )
    }
}

pub fn stability(mols: &[Molecule], table: &BondTable) -> Result<StabilityReport> {
    if mols.is_empty() {
        return Err(Error::Empty("molecule list"));
    }
    let mut stable_atoms = 0;
    let mut n_atoms = 0;
    let mut stable_mols = 0;
    for m in mols {
        let flags = atom_stability(m, table);
        let k = flags.iter().filter(|f| **f).count();
        stable_atoms += k;
        n_atoms += flags.len();
        if k == flags.len() {
            stable_mols += 1;
        }
    }
    Ok(StabilityReport {
        atom_stable_fraction: stable_atoms as f64 / n_atoms.max(1) as f64,
        mol_stable_fraction: stable_mols as f64 / mols.len() as f64,
        unique_fraction: uniqueness(mols, table),
        n_molecules: mols.len(),
        n_atoms,
    })
}

// ---------------------------------------------------------------------------
// Uniqueness
// ---------------------------------------------------------------------------

const WL_ROUNDS: usize = 3;
/// Hash collisions are re-checked with an exact isomorphism test up to this size.
pub const EXACT_ISOMORPHISM_MAX_N: usize = 12;

fn mix(mut h: u64, v: u64) -> u64 {
    // FNV-1a over the 8 bytes of v, then a final avalanche.
    for b in v.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ (h >> 29)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

/// Typed bond multigraph of a molecule.
#[derive(Debug, Clone)]
struct Graph {
    labels: Vec<u64>,
    adj: Vec<Vec<(usize, u64)>>,
    n_edges: usize,
}

impl Graph {
    fn new(mol: &Molecule, table: &BondTable) -> Self {
        let labels = mol
            .elements
            .iter()
            .zip(&mol.charges)
            .map(|(e, q)| mix(mix(FNV_OFFSET, e.index() as u64), *q as i64 as u64))
            .collect();
        let mut adj = vec![Vec::new(); mol.len()];
        let bonds = infer_bonds(mol, table);
        for b in &bonds {
            adj[b.i].push((b.j, b.order as u64));
            adj[b.j].push((b.i, b.order as u64));
        }
        Self { labels, adj, n_edges: bonds.len() }
    }

    /// Node colors after neighborhood refinement.
    fn colors(&self) -> Vec<u64> {
        let mut c: Vec<u64> = self
            .labels
            .iter()
            .zip(&self.adj)
            .map(|(l, nb)| {
                let mut orders: Vec<u64> = nb.iter().map(|x| x.1).collect();
                orders.sort_unstable();
                orders.iter().fold(*l, |h, o| mix(h, *o))
            })
            .collect();
        for _ in 0..WL_ROUNDS {
            c = (0..c.len())
                .map(|i| {
                    let mut nb: Vec<(u64, u64)> = self.adj[i].iter().map(|&(j, o)| (o, c[j])).collect();
                    nb.sort_unstable();
                    nb.iter().fold(mix(FNV_OFFSET, c[i]), |h, (o, cj)| mix(mix(h, *o), *cj))
                })
                .collect();
        }
        c
    }

    fn hash(&self, colors: &[u64]) -> u64 {
        let mut sorted = colors.to_vec();
        sorted.sort_unstable();
        sorted.iter().fold(mix(mix(FNV_OFFSET, colors.len() as u64), self.n_edges as u64), |h, c| mix(h, *c))
    }

    fn edge(&self, i: usize, j: usize) -> Option<u64> {
        self.adj[i].iter().find(|x| x.0 == j).map(|x| x.1)
    }
}

/// Exact labelled-multigraph isomorphism by backtracking over color classes.
fn isomorphic(a: &Graph, ca: &[u64], b: &Graph, cb: &[u64]) -> bool {
    let n = a.labels.len();
    if n != b.labels.len() || a.n_edges != b.n_edges {
        return false;
    }
    let mut map = vec![usize::MAX; n];
    let mut used = vec![false; n];
    fn extend(i: usize, a: &Graph, ca: &[u64], b: &Graph, cb: &[u64], map: &mut [usize], used: &mut [bool]) -> bool {
        if i == map.len() {
            return true;
        }
        for cand in 0..map.len() {
            if used[cand] || cb[cand] != ca[i] || b.labels[cand] != a.labels[i] || b.adj[cand].len() != a.adj[i].len() {
                continue;
            }
            let consistent = (0..i).all(|k| a.edge(i, k) == b.edge(cand, map[k]));
            if !consistent {
                continue;
            }
            map[i] = cand;
            used[cand] = true;
            if extend(i + 1, a, ca, b, cb, map, used) {
                return true;
            }
            used[cand] = false;
        }
        map[i] = usize::MAX;
        false
    }
    extend(0, a, ca, b, cb, &mut map, &mut used)
}

/// Fraction of distinct bond graphs (up to isomorphism) in the list.
pub fn uniqueness(mols: &[Molecule], table: &BondTable) -> f64 {
    if mols.is_empty() {
        return 0.0;
    }
    let mut buckets: HashMap<u64, Vec<(Graph, Vec<u64>)>> = HashMap::new();
    let mut distinct = 0;
    for m in mols {
        let g = Graph::new(m, table);
        let c = g.colors();
        let bucket = buckets.entry(g.hash(&c)).or_default();
        let seen = bucket.iter().any(|(h, hc)| g.labels.len() > EXACT_ISOMORPHISM_MAX_N || isomorphic(&g, &c, h, hc));
        if !seen {
            distinct += 1;
            bucket.push((g, c));
        }
    }
    distinct as f64 / mols.len() as f64
}

// ---------------------------------------------------------------------------
// Distribution comparisons
// ---------------------------------------------------------------------------

/// All intra-molecule pairwise distances, pooled.
pub fn pairwise_distances(mols: &[Molecule]) -> Vec<f64> {
    let mut out = Vec::new();
    for m in mols {
        let p = m.coords.points();
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                out.push(dist2(&p[i], &p[j]).sqrt());
            }
        }
    }
    out
}

/// Wasserstein-1 distance between two empirical 1-D distributions, as the
/// integral of the absolute difference of their CDFs.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("sample for Wasserstein distance"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Wasserstein sample"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut x = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - x);
        x = next;
        while a.get(i) == Some(&x) {
            i += 1;
        }
        while b.get(j) == Some(&x) {
            j += 1;
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Mutual information
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiEstimator {
    ExactDiscrete,
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiEstimate {
    pub t: f64,
    /// Nats; clamped at 0.
    pub value: f64,
    pub stderr: f64,
    /// Entropy of the predicted variable, for normalization.
    pub entropy: f64,
    pub estimator: MiEstimator,
}

impl MiEstimate {
    pub fn normalized(&self) -> f64 {
        if self.entropy > 0.0 {
            self.value / self.entropy
        } else {
            0.0
        }
    }
}

fn entropy_of(counts: impl Iterator<Item = usize>) -> f64 {
    let counts: Vec<usize> = counts.collect();
    let total = counts.iter().sum::<usize>() as f64;
    counts.iter().filter(|c| **c > 0).map(|&c| -(c as f64 / total) * (c as f64 / total).ln()).sum()
}

/// Distinct feature rows with their empirical probabilities.
fn alphabet(rows: &[f64], d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut counts: BTreeMap<Vec<u64>, (Vec<f64>, usize)> = BTreeMap::new();
    for r in rows.chunks(d) {
        let key = r.iter().map(|v| v.to_bits()).collect();
        counts.entry(key).or_insert_with(|| (r.to_vec(), 0)).1 += 1;
    }
    let total = (rows.len() / d) as f64;
    counts.into_values().map(|(r, c)| (r, c as f64 / total)).unzip()
}

/// `I(h_t; h_0)` for one node feature under a Gaussian path, by Monte Carlo
/// over the exact posterior on the finite alphabet of `h_0` rows.
pub fn mi_hh(rows: &[f64], d: usize, path: &ConditionalPath, t: f64, n_mc: usize, rng: &mut Rng) -> Result<MiEstimate> {
    if d == 0 || rows.is_empty() || !rows.len().is_multiple_of(d) {
        return Err(Error::InvalidArgument(format!("feature buffer of length {} is not N×{d}", rows.len())));
    }
    if n_mc < 2 {
        return Err(Error::InvalidArgument("n_mc must be at least 2".into()));
    }
    let m = path.mean_coef(t)?;
    let s = path.std_coef(t)?;
    let (symbols, probs) = alphabet(rows, d);
    let h0: f64 = probs.iter().map(|p| -p * p.ln()).sum();
    let cumulative: Vec<f64> = probs
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();

    let mut terms = Vec::with_capacity(n_mc);
    let mut logits = vec![0.0; symbols.len()];
    for _ in 0..n_mc {
        let u = rng::uniform(rng, 0.0, 1.0);
        let k = cumulative.iter().position(|c| u < *c).unwrap_or(symbols.len() - 1);
        let ht: Vec<f64> = symbols[k].iter().map(|a| m * a + s * rng::normal(rng)).collect();
        if s == 0.0 {
            // Noise-free: the posterior is a point mass on the true symbol.
            terms.push(0.0);
            continue;
        }
        for (j, sym) in symbols.iter().enumerate() {
            let r2: f64 = ht.iter().zip(sym).map(|(h, a)| (h - m * a).powi(2)).sum();
            logits[j] = probs[j].ln() - r2 / (2.0 * s * s);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        terms.push(lse - logits[k]);
    }
    let (mean, stderr) = mean_stderr(&terms);
    Ok(MiEstimate { t, value: (h0 - mean).max(0.0), stderr, entropy: h0, estimator: MiEstimator::ExactDiscrete })
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Per-node feature rows of a dataset, row-major `N_total×d`.
pub fn dataset_feature_rows(ds: &Dataset) -> Vec<f64> {
    ds.molecules.iter().flat_map(|m| m.features.iter().copied()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Fraction of molecules used for training; the rest is held out.
    pub train_fraction: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { steps: 2_000, learning_rate: 0.05, l2: 1e-4, train_fraction: 0.7 }
    }
}

pub const N_DISTANCE_FEATURES: usize = 8;
const BOND_RADIUS: f64 = 1.25;

/// Rotation-, translation- and permutation-invariant per-node descriptors:
/// distance to centroid, first/second/third neighbor distance, soft count of
/// neighbors within 1.25, mean and max distance, and `Σ 1/(1 + d²)`.
pub fn distance_features(x: &PointCloud) -> Vec<[f64; N_DISTANCE_FEATURES]> {
    let p = x.points();
    let n = p.len();
    let c = x.centroid();
    (0..n)
        .map(|i| {
            let mut ds: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist2(&p[i], &p[j]).sqrt()).collect();
            ds.sort_by(f64::total_cmp);
            let nth = |k: usize| ds.get(k).or(ds.last()).copied().unwrap_or(0.0);
            let mean = if ds.is_empty() { 0.0 } else { ds.iter().sum::<f64>() / ds.len() as f64 };
            [
                dist2(&p[i], &c).sqrt(),
                nth(0),
                nth(1),
                nth(2),
                ds.iter().map(|d| 1.0 / (1.0 + ((d - BOND_RADIUS) / 0.05).exp())).sum(),
                mean,
                ds.last().copied().unwrap_or(0.0),
                ds.iter().map(|d| 1.0 / (1.0 + d * d)).sum(),
            ]
        })
        .collect()
}

/// Multinomial logistic regression on standardized features.
struct Softmax {
    k: usize,
    w: Vec<f64>,
    mean: [f64; N_DISTANCE_FEATURES],
    scale: [f64; N_DISTANCE_FEATURES],
}

impl Softmax {
    const P: usize = N_DISTANCE_FEATURES + 1;

    fn fit(xs: &[[f64; N_DISTANCE_FEATURES]], ys: &[usize], k: usize, cfg: &ClassifierConfig) -> Self {
        let n = xs.len() as f64;
        let mut mean = [0.0; N_DISTANCE_FEATURES];
        let mut scale = [0.0; N_DISTANCE_FEATURES];
        for x in xs {
            for f in 0..N_DISTANCE_FEATURES {
                mean[f] += x[f] / n;
            }
        }
        for x in xs {
            for f in 0..N_DISTANCE_FEATURES {
                scale[f] += (x[f] - mean[f]).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-12 { s.sqrt() } else { 1.0 };
        }
        let mut model = Self { k, w: vec![0.0; k * Self::P], mean, scale };
        let feats: Vec<[f64; N_DISTANCE_FEATURES + 1]> = xs.iter().map(|x| model.standardize(x)).collect();
        let mut m = vec![0.0; model.w.len()];
        let mut v = vec![0.0; model.w.len()];
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut probs = vec![0.0; k];
        for step in 1..=cfg.steps {
            let mut grad: Vec<f64> = model.w.iter().map(|w| cfg.l2 * w).collect();
            for (x, &y) in feats.iter().zip(ys) {
                model.probs(x, &mut probs);
                for c in 0..k {
                    let g = (probs[c] - if c == y { 1.0 } else { 0.0 }) / n;
                    for f in 0..Self::P {
                        grad[c * Self::P + f] += g * x[f];
                    }
                }
            }
            let c1 = 1.0 - f64::powi(b1, step as i32);
            let c2 = 1.0 - f64::powi(b2, step as i32);
            for i in 0..model.w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                model.w[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        model
    }

    fn standardize(&self, x: &[f64; N_DISTANCE_FEATURES]) -> [f64; N_DISTANCE_FEATURES + 1] {
        let mut out = [1.0; N_DISTANCE_FEATURES + 1];
        for f in 0..N_DISTANCE_FEATURES {
            out[f] = (x[f] - self.mean[f]) / self.scale[f];
        }
        out
    }

    fn probs(&self, x: &[f64; N_DISTANCE_FEATURES + 1], out: &mut [f64]) {
        for c in 0..self.k {
            out[c] = self.w[c * Self::P..(c + 1) * Self::P].iter().zip(x).map(|(w, v)| w * v).sum();
        }
        let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            z += *o;
        }
        for o in out.iter_mut() {
            *o /= z;
        }
    }

    fn neg_log_prob(&self, x: &[f64; N_DISTANCE_FEATURES], y: usize) -> f64 {
        let mut p = vec![0.0; self.k];
        self.probs(&self.standardize(x), &mut p);
        -p[y].max(1e-300).ln()
    }
}

/// Noise draws shared across the `t` grid (common random numbers), one
/// Zero-CoM cloud per molecule.
pub fn coordinate_noise(ds: &Dataset, rng: &mut Rng) -> Vec<PointCloud> {
    ds.molecules.iter().map(|m| PointCloud::standard_normal(m.n_nodes(), rng)).collect()
}

/// Difference-of-entropy lower bound `H(type) − CE(p_φ(type | x_t))` for a
/// per-node classifier on invariant distance features of `x_t`.
///
/// EOT paths are treated as their OT marginal (`m = 1 − t`,
/// `s = σ_min + (1 − σ_min)t`).
pub fn mi_xh(
    ds: &Dataset,
    path: &ConditionalPath,
    t: f64,
    noise: &[PointCloud],
    cfg: &ClassifierConfig,
    rng: &mut Rng,
) -> Result<MiEstimate> {
    if noise.len() != ds.len() {
        return Err(Error::LengthMismatch { expected: ds.len(), got: noise.len() });
    }
    let m = path.mean_coef(t)?;
    let s = path.std_coef(t)?;
    let n_train = (ds.len() as f64 * cfg.train_fraction).round() as usize;
    if n_train < 2 || ds.len() - n_train < 2 {
        return Err(Error::InvalidArgument(format!("dataset of {} molecules is too small to split", ds.len())));
    }
    let order = rng::shuffled_indices(rng, ds.len());

    let mut labels = Vec::new();
    let mut split_x: [Vec<[f64; N_DISTANCE_FEATURES]>; 2] = [Vec::new(), Vec::new()];
    let mut split_y: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (rank, &idx) in order.iter().enumerate() {
        let g = &ds.molecules[idx];
        let pts: Vec<[f64; 3]> = g
            .coords
            .points()
            .iter()
            .zip(noise[idx].points())
            .map(|(a, e)| [m * a[0] + s * e[0], m * a[1] + s * e[1], m * a[2] + s * e[2]])
            .collect();
        let feats = distance_features(&PointCloud::new(pts)?);
        let which = usize::from(rank >= n_train);
        for (i, f) in feats.into_iter().enumerate() {
            let row = g.feature_row(i);
            let y = (0..Element::ALL.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            labels.push(y);
            split_x[which].push(f);
            split_y[which].push(y);
        }
    }
    let mut type_counts = [0usize; 5];
    for y in &labels {
        type_counts[*y] += 1;
    }
    let h = entropy_of(type_counts.iter().copied());
    let clf = Softmax::fit(&split_x[0], &split_y[0], Element::ALL.len(), cfg);
    let ce: Vec<f64> = split_x[1].iter().zip(&split_y[1]).map(|(x, &y)| clf.neg_log_prob(x, y)).collect();
    let (mean, stderr) = mean_stderr(&ce);
    Ok(MiEstimate { t, value: (h - mean).max(0.0), stderr, entropy: h, estimator: MiEstimator::Classifier })
}

/// Normalized information curves on `t_k = k/(n−1)`.
#[derive(Debug, Clone)]
pub struct MiCurves {
    pub t: Vec<f64>,
    /// `(name, estimates)` per feature path, e.g. `"ot"`, `"vp_linear"`.
    pub hh: Vec<(String, Vec<MiEstimate>)>,
    pub xh: Vec<MiEstimate>,
}

impl MiCurves {
    pub fn csv(&self) -> String {
        let mut out = String::from("t");
        for (name, _) in &self.hh {
            let _ = write!(out, ",mi_hh_{name},mi_hh_{name}_stderr");
        }
        out.push_str(",mi_xh,mi_xh_stderr\n");
        for (k, t) in self.t.iter().enumerate() {
            let _ = write!(out, "{t:.6}");
            for (_, est) in &self.hh {
                let e = &est[k];
                let _ = write!(out, ",{:.6},{:.6}", e.normalized(), e.stderr / e.entropy.max(1e-300));
            }
            let e = &self.xh[k];
            let _ = writeln!(out, ",{:.6},{:.6}", e.normalized(), e.stderr / e.entropy.max(1e-300));
        }
        out
    }

    /// Grid-L2 distance between a normalized feature curve and the
    /// normalized coordinate curve.
    pub fn distance_to_xh(&self, name: &str) -> Option<f64> {
        let (_, est) = self.hh.iter().find(|(n, _)| n == name)?;
        Some(est.iter().zip(&self.xh).map(|(a, b)| (a.normalized() - b.normalized()).powi(2)).sum::<f64>().sqrt())
    }
}

pub fn information_curves(
    ds: &Dataset,
    h_paths: &[ConditionalPath],
    x_path: &ConditionalPath,
    n_points: usize,
    n_mc: usize,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<MiCurves> {
    if n_points < 2 {
        return Err(Error::InvalidArgument("n_points must be at least 2".into()));
    }
    let t: Vec<f64> = (0..n_points).map(|k| k as f64 / (n_points - 1) as f64).collect();
    let rows = dataset_feature_rows(ds);
    let d = ds.feature_dim();
    let mut hh = Vec::new();
    for path in h_paths {
        // Same seed per time point: common random numbers along the curve.
        let est =
            t.iter().map(|&tk| mi_hh(&rows, d, path, tk, n_mc, &mut rng::seeded(seed))).collect::<Result<Vec<_>>>()?;
        hh.push((path.name(), est));
    }
    let noise = coordinate_noise(ds, &mut rng::seeded(seed ^ 0x9e37_79b9));
    let run = |&tk: &f64| mi_xh(ds, x_path, tk, &noise, cfg, &mut rng::seeded(seed.wrapping_add(1)));
    #[cfg(feature = "parallel")]
    let xh = {
        use rayon::prelude::*;
        t.par_iter().map(run).collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let xh = t.iter().map(run).collect::<Result<Vec<_>>>()?;
    Ok(MiCurves { t, hh, xh })
}
