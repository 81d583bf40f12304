//! Equivariant optimal transport between two point clouds.
//!
//! The plan `(π*, R*)` minimizes `Σᵢ ‖R*·z[π*(i)] − y[i]‖²` jointly over
//! permutations and proper rotations. [`solve_eot`] alternates an exact
//! linear assignment (for fixed `R`) with a Kabsch rotation (for fixed
//! `π`) until the objective stops moving, from several starting rotations.
//! [`brute_force_eot`] enumerates all permutations and is the reference for
//! small clouds.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::geometry::{
    self, cross, dist2, dot, mat_mul, mat_vec, norm2, project_zero_com, transpose, Mat3, Permutation, PointCloud,
    Rotation, Vec3,
};
use crate::linalg::symmetric_eigen;
use crate::rng::Rng;

/// Solver output: `apply(z, rotation, permutation)` is the aligned copy of `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct EotPlan {
    pub permutation: Permutation,
    pub rotation: Rotation,
    /// `Σᵢ ‖R·z[π(i)] − y[i]‖²` on the Zero-CoM projected inputs.
    pub cost: f64,
    /// Iterations used by the winning start.
    pub iterations: usize,
}

impl EotPlan {
    pub fn identity(n: usize) -> Self {
        Self { permutation: Permutation::identity(n), rotation: Rotation::IDENTITY, cost: f64::NAN, iterations: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EotOptions {
    pub max_iter: usize,
    /// Stop once the objective changes by less than this (absolute).
    pub tol: f64,
    /// Random starting rotations in addition to the identity start.
    pub restarts: usize,
    /// Candidate rotations scored per kept restart. Each candidate gets one
    /// assignment + Kabsch step and the `restarts` lowest-cost candidates are
    /// iterated to convergence. `1` keeps plain random restarts.
    pub screening: usize,
}

impl Default for EotOptions {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-9, restarts: 1, screening: 16 }
    }
}

impl EotOptions {
    pub fn with_restarts(restarts: usize) -> Self {
        Self { restarts, ..Self::default() }
    }
}

// ---------------------------------------------------------------------------
// Linear assignment
// ---------------------------------------------------------------------------

/// Exact minimum-cost perfect matching. Row `i` is matched to column `π(i)`.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Result<Permutation> {
    let n = cost.len();
    let mut flat = Vec::with_capacity(n * n);
    for row in cost {
        if row.len() != n {
            return Err(Error::NotSquare { rows: n, cols: row.len() });
        }
        flat.extend_from_slice(row);
    }
    if flat.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("cost matrix"));
    }
    Ok(Permutation::from_vec_unchecked(assign_flat(&flat, n)))
}

/// Shortest augmenting path with dual potentials (Jonker–Volgenant family),
/// `O(n³)`. `cost` is row-major `n×n` and must be finite.
pub(crate) fn assign_flat(cost: &[f64], n: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    // 1-based columns; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut min_to = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        min_to.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = row[j - 1] - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of_row = vec![0usize; n];
    for j in 1..=n {
        col_of_row[row_of_col[j] - 1] = j - 1;
    }
    col_of_row
}

// ---------------------------------------------------------------------------
// Kabsch
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KabschResult {
    pub rotation: Rotation,
    /// Numerical rank of the cross-covariance. Rank 0 returns the identity;
    /// rank 1 returns the smallest rotation aligning the two principal axes.
    pub rank: usize,
}

impl KabschResult {
    pub fn is_degenerate(&self) -> bool {
        self.rank <= 1
    }
}

/// Proper rotation minimizing `Σᵢ ‖R·z[i] − y[i]‖²` for a fixed pairing.
/// Both clouds are projected to Zero-CoM first.
pub fn kabsch(z: &PointCloud, y: &PointCloud) -> Result<KabschResult> {
    if z.len() != y.len() {
        return Err(Error::LengthMismatch { expected: z.len(), got: y.len() });
    }
    let z = project_zero_com(z);
    let y = project_zero_com(y);
    Ok(kabsch_from_covariance(&cross_covariance(z.points(), y.points())))
}

/// `H = Σᵢ zᵢ·yᵢᵀ`.
fn cross_covariance(z: &[Vec3], y: &[Vec3]) -> Mat3 {
    let mut h = [[0.0; 3]; 3];
    for (p, q) in z.iter().zip(y) {
        for a in 0..3 {
            for b in 0..3 {
                h[a][b] += p[a] * q[b];
            }
        }
    }
    h
}

/// Maximizes `tr(R·H)` over SO(3) via `H = U·S·Vᵀ`, `R = V·diag(1,1,d)·Uᵀ`.
/// The SVD comes from the eigen-decomposition of `HᵀH = V·S²·Vᵀ`.
fn kabsch_from_covariance(h: &Mat3) -> KabschResult {
    // Singular values come from square roots of eigenvalues, so relative
    // noise on them is ~sqrt(eps).
    const RANK_TOL: f64 = 1e-7;

    let (lambda, v) = symmetric_eigen(&mat_mul(&transpose(h), h));
    let s = lambda.map(|l| l.max(0.0).sqrt());
    let scale = h.iter().flatten().map(|x| x.abs()).fold(0.0, f64::max);
    if scale == 0.0 || s[0] <= f64::MIN_POSITIVE * 1e10 {
        return KabschResult { rotation: Rotation::IDENTITY, rank: 0 };
    }
    let col = |k: usize| [v[0][k], v[1][k], v[2][k]];
    let unit = |w: Vec3| {
        let n = norm2(&w).sqrt();
        w.map(|x| x / n)
    };

    let v1 = col(0);
    let u1 = unit(mat_vec(h, &v1));
    if s[1] <= RANK_TOL * s[0] {
        return KabschResult { rotation: align_axis(&u1, &v1), rank: 1 };
    }

    let v2 = col(1);
    let hv2 = mat_vec(h, &v2);
    let u2 = unit(sub(&hv2, &u1.map(|x| x * dot(&u1, &hv2))));
    let mut u3 = cross(&u1, &u2);
    let v3 = col(2);
    let rank = if s[2] <= RANK_TOL * s[0] { 2 } else { 3 };
    if rank == 3 && dot(&u3, &mat_vec(h, &v3)) < 0.0 {
        u3 = u3.map(|x| -x);
    }
    let det_u = geometry::det(&[[u1[0], u2[0], u3[0]], [u1[1], u2[1], u3[1]], [u1[2], u2[2], u3[2]]]);
    let d = (geometry::det(&v) * det_u).signum();

    let us = [u1, u2, u3];
    let vs = [v1, v2, v3];
    let weights = [1.0, 1.0, d];
    let mut r = [[0.0; 3]; 3];
    for k in 0..3 {
        for a in 0..3 {
            for b in 0..3 {
                r[a][b] += weights[k] * vs[k][a] * us[k][b];
            }
        }
    }
    KabschResult { rotation: Rotation::from_matrix_unchecked(r), rank }
}

/// Smallest rotation taking unit vector `from` to unit vector `to`.
fn align_axis(from: &Vec3, to: &Vec3) -> Rotation {
    let c = dot(from, to).clamp(-1.0, 1.0);
    let axis = cross(from, to);
    if norm2(&axis) > 1e-24 {
        return Rotation::about_axis(axis, c.acos());
    }
    if c > 0.0 {
        return Rotation::IDENTITY;
    }
    // Antiparallel: half turn about any axis orthogonal to `from`.
    let helper = if from[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    Rotation::about_axis(cross(from, &helper), std::f64::consts::PI)
}

fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

// ---------------------------------------------------------------------------
// Alternating solver
// ---------------------------------------------------------------------------

/// One start of the alternating solver, with the objective after every
/// iteration.
#[derive(Debug, Clone)]
pub struct IcpRun {
    pub plan: EotPlan,
    pub history: Vec<f64>,
}

/// Run the alternating assignment/Kabsch iteration from `init`.
/// `z` and `y` must already be Zero-CoM.
pub fn run_icp(z: &PointCloud, y: &PointCloud, init: Rotation, opts: &EotOptions) -> Result<IcpRun> {
    let n = z.len();
    if n != y.len() {
        return Err(Error::LengthMismatch { expected: n, got: y.len() });
    }
    if opts.max_iter < 1 {
        return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
    }
    let (zp, yp) = (z.points(), y.points());
    let mut rotation = init;
    let mut permutation = Permutation::identity(n);
    let mut history = Vec::new();
    let mut cost_matrix = vec![0.0; n * n];
    let mut previous = f64::INFINITY;

    for _ in 0..opts.max_iter {
        let rz: Vec<Vec3> = zp.iter().map(|p| rotation.rotate(p)).collect();
        for (i, yi) in yp.iter().enumerate() {
            for (j, rzj) in rz.iter().enumerate() {
                cost_matrix[i * n + j] = dist2(yi, rzj);
            }
        }
        permutation = Permutation::from_vec_unchecked(assign_flat(&cost_matrix, n));
        let zperm = permutation.gather(zp);
        rotation = kabsch_from_covariance(&cross_covariance(&zperm, yp)).rotation;
        let tau: f64 = zperm.iter().zip(yp).map(|(p, q)| dist2(&rotation.rotate(p), q)).sum();
        history.push(tau);
        let converged = (previous - tau).abs() < opts.tol;
        previous = tau;
        if converged {
            break;
        }
    }

    let iterations = history.len();
    Ok(IcpRun { plan: EotPlan { permutation, rotation, cost: previous, iterations }, history })
}

/// Equivariant optimal transport plan from `z` (e.g. a prior draw) onto `y`
/// (e.g. data).
///
/// Runs an identity start plus `opts.restarts` starts drawn from uniformly
/// random rotations and keeps the lowest-cost result. With
/// `opts.screening > 1`, `restarts × screening` random rotations are scored
/// by one assignment + Kabsch step and only the best `restarts` continue;
/// the screening step counts towards the reported iterations.
pub fn solve_eot(z: &PointCloud, y: &PointCloud, opts: &EotOptions, rng: &mut Rng) -> Result<EotPlan> {
    if z.len() != y.len() {
        return Err(Error::LengthMismatch { expected: z.len(), got: y.len() });
    }
    let z = project_zero_com(z);
    let y = project_zero_com(y);
    let mut best = run_icp(&z, &y, Rotation::IDENTITY, opts)?.plan;

    let screening = opts.screening.max(1);
    let starts: Vec<(Rotation, usize)> = if screening == 1 {
        (0..opts.restarts).map(|_| (geometry::random_rotation(rng), 0)).collect()
    } else {
        let one_step = EotOptions { max_iter: 1, ..*opts };
        let mut candidates = Vec::with_capacity(opts.restarts * screening);
        for _ in 0..opts.restarts * screening {
            let plan = run_icp(&z, &y, geometry::random_rotation(rng), &one_step)?.plan;
            candidates.push((plan.cost, plan.rotation));
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
        candidates.into_iter().take(opts.restarts).map(|(_, r)| (r, 1)).collect()
    };

    for (init, spent) in starts {
        let mut run = run_icp(&z, &y, init, opts)?;
        run.plan.iterations += spent;
        if run.plan.cost < best.cost {
            best = run.plan;
        }
    }
    Ok(best)
}

/// Exact plan by enumerating all `N!` permutations, each with its
/// Kabsch-optimal rotation. Supports `N ≤ 8`.
pub fn brute_force_eot(z: &PointCloud, y: &PointCloud) -> Result<EotPlan> {
    let n = z.len();
    if n != y.len() {
        return Err(Error::LengthMismatch { expected: n, got: y.len() });
    }
    if n > 8 {
        return Err(Error::TooManyPoints(n));
    }
    let z = project_zero_com(z);
    let y = project_zero_com(y);
    let (zp, yp) = (z.points(), y.points());

    let mut best: Option<EotPlan> = None;
    let mut consider = |perm: &[usize]| {
        let zperm: Vec<Vec3> = perm.iter().map(|&j| zp[j]).collect();
        let rotation = kabsch_from_covariance(&cross_covariance(&zperm, yp)).rotation;
        let cost: f64 = zperm.iter().zip(yp).map(|(p, q)| dist2(&rotation.rotate(p), q)).sum();
        if best.as_ref().is_none_or(|b| cost < b.cost) {
            best = Some(EotPlan {
                permutation: Permutation::from_vec_unchecked(perm.to_vec()),
                rotation,
                cost,
                iterations: 1,
            });
        }
    };

    // Heap's algorithm, iterative form.
    let mut perm: Vec<usize> = (0..n).collect();
    let mut counters = vec![0usize; n];
    consider(&perm);
    let mut i = 1;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            consider(&perm);
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok(best.expect("at least one permutation"))
}

/// Timing and iteration statistics for one cloud size.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n_points: usize,
    pub trials: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub mean_iterations: f64,
    pub std_iterations: f64,
}

/// Solve `trials` EOT problems between independent standard-normal clouds
/// for each size in `sizes`.
pub fn benchmark_eot(sizes: &[usize], trials: usize, opts: &EotOptions, rng: &mut Rng) -> Result<Vec<BenchRow>> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be positive".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let mut times = Vec::with_capacity(trials);
        let mut iters = Vec::with_capacity(trials);
        for _ in 0..trials {
            let z = PointCloud::standard_normal(n, rng);
            let y = PointCloud::standard_normal(n, rng);
            let start = Instant::now();
            let plan = solve_eot(&z, &y, opts, rng)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
            iters.push(plan.iterations as f64);
        }
        let (mean_ms, std_ms) = mean_std(&times);
        let (mean_iterations, std_iterations) = mean_std(&iters);
        rows.push(BenchRow { n_points: n, trials, mean_ms, std_ms, mean_iterations, std_iterations });
    }
    Ok(rows)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply, random_rotation, squared_cost};
    use crate::rng::{self, seeded};

    fn assignment_total(cost: &[Vec<f64>], p: &Permutation) -> f64 {
        p.mapping().iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
    }

    fn all_permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in all_permutations(n - 1) {
            for k in 0..n {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn assignment_small_examples() {
        let id = solve_assignment(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(id.is_identity());
        let swap = solve_assignment(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(swap.mapping(), &[1, 0]);
    }

    #[test]
    fn assignment_matches_enumeration() {
        let mut rng = seeded(11);
        let perms = all_permutations(6);
        assert_eq!(perms.len(), 720);
        for _ in 0..50 {
            let cost: Vec<Vec<f64>> =
                (0..6).map(|_| (0..6).map(|_| rng::uniform(&mut rng, 0.0, 10.0)).collect()).collect();
            let p = solve_assignment(&cost).unwrap();
            let best = perms
                .iter()
                .map(|q| q.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            assert!((assignment_total(&cost, &p) - best).abs() < 1e-12);
        }
    }

    #[test]
    fn assignment_rejects_bad_input() {
        assert!(matches!(solve_assignment(&[vec![0.0, 1.0], vec![1.0]]), Err(Error::NotSquare { .. })));
        assert!(solve_assignment(&[vec![f64::NAN]]).is_err());
        assert!(solve_assignment(&[]).unwrap().is_empty());
    }

    #[test]
    fn kabsch_recovers_known_rotation() {
        let mut rng = seeded(3);
        for _ in 0..20 {
            let z = PointCloud::standard_normal(8, &mut rng);
            let r0 = random_rotation(&mut rng);
            let res = kabsch(&z, &z.rotated(&r0)).unwrap();
            assert_eq!(res.rank, 3);
            assert!(res.rotation.max_abs_diff(&r0) < 1e-8);
        }
        let z = PointCloud::standard_normal(5, &mut rng);
        assert!(kabsch(&z, &z).unwrap().rotation.max_abs_diff(&Rotation::IDENTITY) < 1e-12);
    }

    #[test]
    fn kabsch_beats_random_rotations() {
        let mut rng = seeded(5);
        let z = PointCloud::standard_normal(5, &mut rng);
        let y = PointCloud::standard_normal(5, &mut rng);
        let r = kabsch(&z, &y).unwrap().rotation;
        assert!(Rotation::from_matrix(*r.matrix()).is_ok());
        let best = squared_cost(&z.rotated(&r), &y).unwrap();
        for _ in 0..10_000 {
            let q = random_rotation(&mut rng);
            assert!(best <= squared_cost(&z.rotated(&q), &y).unwrap() + 1e-12);
        }
    }

    #[test]
    fn kabsch_degenerate_inputs() {
        let origin = PointCloud::new(vec![[1.0, 1.0, 1.0]; 3]).unwrap();
        let res = kabsch(&origin, &origin).unwrap();
        assert_eq!(res.rank, 0);
        assert_eq!(res.rotation, Rotation::IDENTITY);

        // Collinear clouds: rank 1, still optimal.
        let line_z = PointCloud::new(vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let line_y = PointCloud::new(vec![[0.0, -1.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let res = kabsch(&line_z, &line_y).unwrap();
        assert_eq!(res.rank, 1);
        assert!(squared_cost(&line_z.rotated(&res.rotation), &line_y).unwrap() < 1e-20);

        // Planar clouds: rank 2 with the sign correction keeping det = +1.
        let mut rng = seeded(9);
        let flat: Vec<Vec3> = (0..6).map(|_| [rng::normal(&mut rng), rng::normal(&mut rng), 0.0]).collect();
        let z = project_zero_com(&PointCloud::new(flat).unwrap());
        let r0 = random_rotation(&mut rng);
        let res = kabsch(&z, &z.rotated(&r0)).unwrap();
        assert_eq!(res.rank, 2);
        assert!(Rotation::from_matrix(*res.rotation.matrix()).is_ok());
        assert!(squared_cost(&z.rotated(&res.rotation), &z.rotated(&r0)).unwrap() < 1e-18);
    }

    #[test]
    fn eot_recovers_exact_alignment() {
        let mut rng = seeded(21);
        for n in [3, 6, 12, 25] {
            let z = PointCloud::standard_normal(n, &mut rng);
            let r0 = random_rotation(&mut rng);
            let p0 = Permutation::random(n, &mut rng);
            let y = apply(&z, &r0, &p0).unwrap();
            let plan = solve_eot(&z, &y, &EotOptions::with_restarts(20), &mut rng).unwrap();
            assert!(plan.cost < 1e-10, "n={n} cost={}", plan.cost);
            let recomputed = squared_cost(&apply(&z, &plan.rotation, &plan.permutation).unwrap(), &y).unwrap();
            assert!((recomputed - plan.cost).abs() <= 1e-9 * plan.cost.max(1e-12) + 1e-15);
        }
    }

    #[test]
    fn icp_objective_is_monotone() {
        let mut rng = seeded(17);
        for _ in 0..50 {
            let z = PointCloud::standard_normal(15, &mut rng);
            let y = PointCloud::standard_normal(15, &mut rng);
            let run = run_icp(&z, &y, random_rotation(&mut rng), &EotOptions::default()).unwrap();
            assert!(run.plan.iterations >= 1);
            for w in run.history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12 * w[0].max(1.0), "{:?}", run.history);
            }
        }
    }

    #[test]
    fn eot_rejects_bad_arguments() {
        let mut rng = seeded(1);
        let z = PointCloud::standard_normal(3, &mut rng);
        let y = PointCloud::standard_normal(4, &mut rng);
        assert!(solve_eot(&z, &y, &EotOptions::default(), &mut rng).is_err());
        let opts = EotOptions { max_iter: 0, ..EotOptions::default() };
        assert!(solve_eot(&z, &z, &opts, &mut rng).is_err());
        let big = PointCloud::standard_normal(9, &mut rng);
        assert!(matches!(brute_force_eot(&big, &big), Err(Error::TooManyPoints(9))));
    }

    #[test]
    fn brute_force_small_cases() {
        let one = PointCloud::new(vec![[1.0, 2.0, 3.0]]).unwrap();
        let plan = brute_force_eot(&one, &one).unwrap();
        assert_eq!(plan.cost, 0.0);
        assert!(plan.permutation.is_identity());

        let pair = PointCloud::new(vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let flipped = PointCloud::new(vec![[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]).unwrap();
        assert!(brute_force_eot(&pair, &flipped).unwrap().cost < 1e-20);
    }

    #[test]
    fn brute_force_dominates_icp() {
        let mut rng = seeded(31);
        for _ in 0..30 {
            let z = PointCloud::standard_normal(6, &mut rng);
            let y = PointCloud::standard_normal(6, &mut rng);
            let exact = brute_force_eot(&z, &y).unwrap();
            let icp = solve_eot(&z, &y, &EotOptions::default(), &mut rng).unwrap();
            assert!(exact.cost <= icp.cost + 1e-9);
        }
    }

    #[test]
    fn eot_cost_is_invariant_to_rotation_and_permutation() {
        let mut rng = seeded(41);
        let opts = EotOptions::with_restarts(20);
        for _ in 0..20 {
            let z = PointCloud::standard_normal(6, &mut rng);
            let y = PointCloud::standard_normal(6, &mut rng);
            let base = solve_eot(&z, &y, &opts, &mut rng).unwrap().cost;
            let r = random_rotation(&mut rng);
            let p = Permutation::random(6, &mut rng);
            let zr = apply(&z, &r, &p).unwrap();
            let yr = apply(&y, &random_rotation(&mut rng), &Permutation::random(6, &mut rng)).unwrap();
            for (a, b) in [(&zr, &y), (&z, &yr)] {
                let c = solve_eot(a, b, &opts, &mut rng).unwrap().cost;
                assert!((c - base).abs() <= 1e-6, "{c} vs {base}");
            }
        }
    }

    #[test]
    fn gaussian_clouds_converge_in_a_few_iterations() {
        let mut rng = seeded(55);
        let rows = benchmark_eot(&[18], 100, &EotOptions::default(), &mut rng).unwrap();
        let it = rows[0].mean_iterations;
        assert!((3.0..=10.0).contains(&it), "mean iterations {it}");
    }
}
