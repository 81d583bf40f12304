//! Point-cloud primitives.
//!
//! Points are rows. A [`Rotation`] `R` maps a point `p` to the column-vector
//! product `R·p`, so a rotated cloud has rows `p_i·Rᵀ`. [`apply`] rotates
//! first and permutes second: `result[i] = R·x[π(i)]`.

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// An `N×3` matrix of finite coordinates with `N ≥ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point cloud"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point cloud"));
        }
        Ok(Self { points })
    }

    /// Build from a flat row-major `[x0, y0, z0, x1, ...]` buffer.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return Err(Error::InvalidArgument(format!(
                "flat coordinate buffer length {} is not a multiple of 3",
                flat.len()
            )));
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub(crate) fn from_vec_unchecked(points: Vec<Vec3>) -> Self {
        assert!(!points.is_empty());
        Self { points }
    }

    /// Standard-normal cloud projected to Zero-CoM.
    pub fn standard_normal(n: usize, rng: &mut Rng) -> Self {
        let points = (0..n).map(|_| [rng::normal(rng), rng::normal(rng), rng::normal(rng)]).collect();
        project_zero_com(&Self::from_vec_unchecked(points))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn points_mut(&mut self) -> &mut [Vec3] {
        &mut self.points
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Rotate every point: rows become `R·p`.
    pub fn rotated(&self, r: &Rotation) -> Self {
        Self::from_vec_unchecked(self.points.iter().map(|p| r.rotate(p)).collect())
    }

    /// Sum of squared norms of all rows.
    pub fn squared_norm(&self) -> f64 {
        self.points.iter().map(norm2).sum()
    }
}

/// A proper rotation, `R·Rᵀ = I` and `det R = +1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    m: Mat3,
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] };

    /// Validate a matrix as a proper rotation to within `1e-9` per entry.
    pub fn from_matrix(m: Mat3) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rotation"));
        }
        let rrt = mat_mul(&m, &transpose(&m));
        for (i, row) in rrt.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                if (v - want).abs() > 1e-9 {
                    return Err(Error::InvalidArgument("matrix is not orthogonal".into()));
                }
            }
        }
        if (det(&m) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("matrix has det != +1".into()));
        }
        Ok(Self { m })
    }

    pub(crate) fn from_matrix_unchecked(m: Mat3) -> Self {
        Self { m }
    }

    /// Rotation from a (not necessarily normalized) quaternion `w + xi + yj + zk`.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let (w, x, y, z) = (w / n, x / n, y / n, z / n);
        Self {
            m: [
                [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
                [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
                [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
            ],
        }
    }

    /// Rotation by `angle` radians about `axis` (right-hand rule).
    pub fn about_axis(axis: Vec3, angle: f64) -> Self {
        let n = norm2(&axis).sqrt();
        let (s, c) = (0.5 * angle).sin_cos();
        Self::from_quaternion(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.m
    }

    pub fn rotate(&self, p: &Vec3) -> Vec3 {
        mat_vec(&self.m, p)
    }

    pub fn transpose(&self) -> Self {
        Self { m: transpose(&self.m) }
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    /// `self · other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Rotation) -> Self {
        Self { m: mat_mul(&self.m, &other.m) }
    }

    pub fn max_abs_diff(&self, other: &Rotation) -> f64 {
        self.m.iter().flatten().zip(other.m.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// A bijection on `0..N`, stored as the image array `mapping[i] = π(i)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || seen[m] {
                return Err(Error::InvalidArgument(format!("{mapping:?} is not a permutation of 0..{n}")));
            }
            seen[m] = true;
        }
        Ok(Self { mapping })
    }

    pub(crate) fn from_vec_unchecked(mapping: Vec<usize>) -> Self {
        Self { mapping }
    }

    pub fn identity(n: usize) -> Self {
        Self { mapping: (0..n).collect() }
    }

    pub fn random(n: usize, rng: &mut Rng) -> Self {
        Self { mapping: rng::shuffled_indices(rng, n) }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Self { mapping: inv }
    }

    /// The permutation `i ↦ self(other(i))`.
    ///
    /// Applying `(R₁, π₁)` and then `(R₂, π₂)` equals applying
    /// `(R₂·R₁, π₁.compose(π₂))`.
    pub fn compose(&self, other: &Permutation) -> Self {
        Self { mapping: other.mapping.iter().map(|&j| self.mapping[j]).collect() }
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &m)| i == m)
    }

    /// Reorder `rows` so that `out[i] = rows[π(i)]`.
    pub fn gather<T: Clone>(&self, rows: &[T]) -> Vec<T> {
        self.mapping.iter().map(|&j| rows[j].clone()).collect()
    }
}

/// Subtract the column-wise mean.
pub fn project_zero_com(x: &PointCloud) -> PointCloud {
    let c = x.centroid();
    PointCloud::from_vec_unchecked(x.points.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect())
}

/// In-place Zero-CoM projection of a row-major `N×3` buffer.
pub fn project_zero_com_flat(xs: &mut [f64]) {
    let n = (xs.len() / 3) as f64;
    if n == 0.0 {
        return;
    }
    let mut c = [0.0; 3];
    for p in xs.chunks_exact(3) {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    for p in xs.chunks_exact_mut(3) {
        for k in 0..3 {
            p[k] -= c[k] / n;
        }
    }
}

/// Haar-uniform rotation from a normalized quaternion of four standard
/// normal draws.
pub fn random_rotation(rng: &mut Rng) -> Rotation {
    loop {
        let q = [rng::normal(rng), rng::normal(rng), rng::normal(rng), rng::normal(rng)];
        if q.iter().map(|v| v * v).sum::<f64>() > 1e-12 {
            return Rotation::from_quaternion(q[0], q[1], q[2], q[3]);
        }
    }
}

/// `result[i] = R·x[p(i)]`.
pub fn apply(x: &PointCloud, r: &Rotation, p: &Permutation) -> Result<PointCloud> {
    if p.len() != x.len() {
        return Err(Error::LengthMismatch { expected: x.len(), got: p.len() });
    }
    Ok(PointCloud::from_vec_unchecked(p.mapping.iter().map(|&j| r.rotate(&x.points[j])).collect()))
}

/// Sum over rows of the squared Euclidean distance between paired points.
pub fn squared_cost(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { expected: a.len(), got: b.len() });
    }
    Ok(a.points.iter().zip(&b.points).map(|(p, q)| dist2(p, q)).sum())
}

pub fn norm2(v: &Vec3) -> f64 {
    v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
}

pub fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    norm2(&d)
}

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}
