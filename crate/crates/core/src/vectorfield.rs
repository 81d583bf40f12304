//! A small E(3)-equivariant graph network `v_θ(g, t) = (v_x, v_h)` with
//! hand-written reverse-mode gradients.
//!
//! Architecture (hidden width `H`, feature width `d`, `L` layers, fully
//! connected graph, SiLU activations):
//!
//! ```text
//! e      = time_embedding(t)                                   (16)
//! h⁰_i   = W_in [h_i, e] + b_in                                (H)
//! per layer, for every ordered pair i ≠ j:
//!   r_ij = x_i − x_j,   f_ij = 1 / (1 + |r_ij|²)
//!   m_ij = SiLU(W_2 SiLU(W_1 [h_i, h_j, f_ij, e] + b_1) + b_2)
//!   φ_ij = w_c2 · SiLU(W_c1 m_ij + b_c1) + b_c2                (scalar)
//!   x_i ← x_i + clip(Σ_j r_ij φ_ij)                            (|·| ≤ 100)
//!   h_i ← h_i + W_n2 SiLU(W_n1 [h_i, Σ_j m_ij] + b_n1) + b_n2
//! v_x    = ZeroCoM(x^L − x⁰)
//! v_h    = W_out h^L + b_out
//! ```
//!
//! Parameter count: `(d + 17)H + L(7H² + 23H + 1) + (H + 1)d`.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;

use crate::data::MoleculeGeometry;
use crate::error::{Error, Result};
use crate::geometry::project_zero_com_flat;
use crate::rng;

pub const TIME_EMBEDDING_DIM: usize = 16;
/// Per-node, per-layer coordinate displacement cap.
pub const MAX_DISPLACEMENT: f64 = 100.0;

/// Frequencies `ω_k = π·2^(k−3)`, `k = 0..8`: `π/8 … 16π`.
pub fn time_frequencies() -> [f64; TIME_EMBEDDING_DIM / 2] {
    std::array::from_fn(|k| std::f64::consts::PI * 2f64.powi(k as i32 - 3))
}

/// `[sin ω_0 t, cos ω_0 t, sin ω_1 t, cos ω_1 t, …]`. At `t = 0` this is
/// `[0, 1, 0, 1, …]`.
pub fn time_embedding(t: f64) -> [f64; TIME_EMBEDDING_DIM] {
    let w = time_frequencies();
    let mut e = [0.0; TIME_EMBEDDING_DIM];
    for k in 0..w.len() {
        e[2 * k] = (w[k] * t).sin();
        e[2 * k + 1] = (w[k] * t).cos();
    }
    e
}

/// Lipschitz constant of [`time_embedding`]: `√Σ ω_k²`.
pub fn time_embedding_lipschitz() -> f64 {
    time_frequencies().iter().map(|w| w * w).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { n_layers: 3, hidden_dim: 64, feature_dim: crate::data::FEATURE_DIM }
    }
}

impl ModelConfig {
    /// `(d + 17)H + L(7H² + 23H + 1) + (H + 1)d`.
    pub fn n_params(&self) -> usize {
        let (l, h, d) = (self.n_layers, self.hidden_dim, self.feature_dim);
        (d + 17) * h + l * (7 * h * h + 23 * h + 1) + (h + 1) * d
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidArgument(format!("hidden_dim and feature_dim must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

impl Linear {
    fn weights<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w..self.w + self.rows * self.cols]
    }

    fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b..self.b + self.rows]
    }

    /// `y = W x + b`.
    fn apply(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.cols);
        let w = self.weights(p);
        for (r, (yr, br)) in y.iter_mut().zip(self.bias(p)).enumerate() {
            *yr = br + dot(&w[r * self.cols..(r + 1) * self.cols], x);
        }
    }

    /// `apply` on each row of `x` (`m × cols`) into `y` (`m × rows`).
    fn apply_batch(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        let (c, r) = (self.cols, self.rows);
        let m = x.len() / c;
        assert!(x.len() == m * c && y.len() == m * r, "apply_batch shape");
        for row in y.chunks_exact_mut(r) {
            row.copy_from_slice(self.bias(p));
        }
        // SAFETY: the asserted lengths cover every index the strides reach.
        unsafe {
            matrixmultiply::dgemm(
                m,
                c,
                r,
                1.0,
                x.as_ptr(),
                c as isize,
                1,
                self.weights(p).as_ptr(),
                1,
                c as isize,
                1.0,
                y.as_mut_ptr(),
                r as isize,
                1,
            );
        }
    }

    /// `gx += Wᵀ g` restricted to input columns `[lo, lo + gx.len())`.
    fn back_input(&self, p: &[f64], g: &[f64], lo: usize, gx: &mut [f64]) {
        let w = self.weights(p);
        for (r, gr) in g.iter().enumerate() {
            if *gr == 0.0 {
                continue;
            }
            let row = &w[r * self.cols + lo..r * self.cols + lo + gx.len()];
            axpy(*gr, row, gx);
        }
    }

    /// `gW[:, lo..] += g xᵀ`.
    fn back_weights(&self, grad: &mut [f64], g: &[f64], x: &[f64], lo: usize) {
        for (r, gr) in g.iter().enumerate() {
            if *gr == 0.0 {
                continue;
            }
            let start = self.w + r * self.cols + lo;
            axpy(*gr, x, &mut grad[start..start + x.len()]);
        }
    }

    fn back_bias(&self, grad: &mut [f64], g: &[f64]) {
        axpy(1.0, g, &mut grad[self.b..self.b + self.rows]);
    }
}

#[derive(Debug, Clone)]
struct LayerLayout {
    edge1: Linear,
    edge2: Linear,
    coord1: Linear,
    coord2: Linear,
    node1: Linear,
    node2: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    input: Linear,
    layers: Vec<LayerLayout>,
    output: Linear,
    total: usize,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let mut cursor = 0;
        let mut lin = |rows: usize, cols: usize| {
            let l = Linear { w: cursor, b: cursor + rows * cols, rows, cols };
            cursor += rows * cols + rows;
            l
        };
        let (h, d) = (c.hidden_dim, c.feature_dim);
        let input = lin(h, d + TIME_EMBEDDING_DIM);
        let layers = (0..c.n_layers)
            .map(|_| LayerLayout {
                edge1: lin(h, 2 * h + 1 + TIME_EMBEDDING_DIM),
                edge2: lin(h, h),
                coord1: lin(h, h),
                coord2: lin(1, h),
                node1: lin(h, 2 * h),
                node2: lin(h, h),
            })
            .collect();
        let output = lin(d, h);
        Self { input, layers, output, total: cursor }
    }

    /// Parameter ranges that are zero at initialization.
    fn zero_init_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let whole = |l: &Linear| l.w..l.b + l.rows;
        let mut out: Vec<_> = self.layers.iter().map(|l| whole(&l.coord2)).collect();
        out.push(whole(&self.output));
        out
    }
}

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Network parameters plus the layout they are interpreted with.
#[derive(Debug, Clone)]
pub struct VectorFieldModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
    seed: u64,
    generation: u64,
}

/// Output of one network evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldOutput {
    /// Coordinate field, row-major `N×3`, Zero-CoM.
    pub vx: Vec<f64>,
    /// Feature field, row-major `N×d`.
    pub vh: Vec<f64>,
    /// Set when the graph has no edges (`N = 1`); `vx` is then zero.
    pub isolated: bool,
}

impl FieldOutput {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self { vx: vec![0.0; 3 * n], vh: vec![0.0; n * d], isolated: n == 1 }
    }
}

impl VectorFieldModel {
    /// Uniform `±1/√fan_in` initialization with zeroed output heads.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut r = rng::seeded(seed);
        let mut params = vec![0.0; layout.total];
        let mut init = |l: &Linear, params: &mut [f64]| {
            let bound = 1.0 / (l.cols as f64).sqrt();
            for v in &mut params[l.w..l.b + l.rows] {
                *v = r.random_range(-bound..bound);
            }
        };
        init(&layout.input, &mut params);
        for l in &layout.layers {
            for lin in [&l.edge1, &l.edge2, &l.coord1, &l.coord2, &l.node1, &l.node2] {
                init(lin, &mut params);
            }
        }
        for range in layout.zero_init_ranges() {
            params[range].fill(0.0);
        }
        Ok(Self { config, layout, params, seed, generation: next_generation() })
    }

    /// Build a model around an existing parameter vector.
    pub fn from_params(config: ModelConfig, params: Vec<f64>, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::LengthMismatch { expected: layout.total, got: params.len() });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(Self { config, layout, params, seed, generation: next_generation() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access. Invalidates every outstanding
    /// [`ForwardCache`].
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation = next_generation();
        &mut self.params
    }

    /// Evaluate the field.
    pub fn forward(&self, g: &MoleculeGeometry, t: f64) -> Result<FieldOutput> {
        if g.d != self.config.feature_dim {
            return Err(Error::LengthMismatch { expected: self.config.feature_dim, got: g.d });
        }
        Ok(self.run(&g.coords.to_flat(), &g.features, t, false)?.0)
    }

    /// Evaluate the field on flat state vectors (`x`: `N×3`, `h`: `N×d`).
    pub fn forward_flat(&self, x: &[f64], h: &[f64], t: f64) -> Result<FieldOutput> {
        Ok(self.run(x, h, t, false)?.0)
    }

    /// Evaluate and keep the intermediates needed by [`Self::backward`].
    pub fn forward_cached(&self, g: &MoleculeGeometry, t: f64) -> Result<(FieldOutput, ForwardCache)> {
        if g.d != self.config.feature_dim {
            return Err(Error::LengthMismatch { expected: self.config.feature_dim, got: g.d });
        }
        let (out, cache) = self.run(&g.coords.to_flat(), &g.features, t, true)?;
        Ok((out, cache.expect("cache requested")))
    }

    /// Re-evaluate the pass that produced `cache` after parameters at index
    /// `first_changed` and beyond were modified, recomputing only the stages
    /// that read them. Parameters before `first_changed` must be unchanged;
    /// this is not checked. Stages follow parameter order: input embedding,
    /// then per layer the edge block and the node block, then the output head.
    pub fn forward_resumed(&self, cache: &ForwardCache, first_changed: usize) -> Result<FieldOutput> {
        if cache.layers.len() != self.layout.layers.len() || cache.h_final.len() != cache.n * self.config.hidden_dim {
            return Err(Error::InvalidArgument("cache was produced by a model of another shape".into()));
        }
        let input_end = self.layout.input.b + self.layout.input.rows;
        if first_changed < input_end {
            return Ok(self.run(&cache.x_input, &cache.h_input, cache.t, false)?.0);
        }
        for (l, (lay, c)) in self.layout.layers.iter().zip(&cache.layers).enumerate() {
            let (edge_end, node_end) = (lay.coord2.b + 1, lay.node2.b + lay.node2.rows);
            if first_changed < edge_end {
                return self.finish(cache, l, c.x.clone(), c.h.clone(), None);
            }
            if first_changed < node_end {
                let mut x = c.x.clone();
                apply_displacement(&mut x, &c.delta);
                return self.finish(cache, l, x, c.h.clone(), Some(&c.msum));
            }
        }
        self.finish(cache, self.layout.layers.len(), cache.x_final.clone(), cache.h_final.clone(), None)
    }

    /// Continue a resumed pass at layer `from` (at its node block when
    /// `msum` is given).
    fn finish(
        &self,
        cache: &ForwardCache,
        from: usize,
        mut x: Vec<f64>,
        mut h: Vec<f64>,
        msum: Option<&[f64]>,
    ) -> Result<FieldOutput> {
        let p = &self.params;
        let mut from = from;
        if let Some(msum) = msum {
            self.node_stage(&self.layout.layers[from], p, &mut h, msum);
            from += 1;
        }
        for lay in &self.layout.layers[from..] {
            let (delta, msum) = self.edge_stage(lay, p, &x, &h, &cache.emb, None);
            apply_displacement(&mut x, &delta);
            self.node_stage(lay, p, &mut h, &msum);
        }
        self.output(&x, &cache.x_input, &h)
    }

    fn run(&self, x_in: &[f64], h_in: &[f64], t: f64, keep: bool) -> Result<(FieldOutput, Option<ForwardCache>)> {
        let p = &self.params;
        let hd = self.config.hidden_dim;
        let d = self.config.feature_dim;
        if x_in.is_empty() || !x_in.len().is_multiple_of(3) {
            return Err(Error::InvalidArgument(format!("coordinate buffer of length {} is not N×3", x_in.len())));
        }
        let n = x_in.len() / 3;
        if h_in.len() != n * d {
            return Err(Error::LengthMismatch { expected: n * d, got: h_in.len() });
        }
        if !t.is_finite() {
            return Err(Error::NonFinite("time"));
        }
        let emb = time_embedding(t);

        let mut h = vec![0.0; n * hd];
        let mut inp = vec![0.0; d + TIME_EMBEDDING_DIM];
        inp[d..].copy_from_slice(&emb);
        for i in 0..n {
            inp[..d].copy_from_slice(&h_in[i * d..(i + 1) * d]);
            self.layout.input.apply(p, &inp, &mut h[i * hd..(i + 1) * hd]);
        }
        let mut x = x_in.to_vec();

        let mut layer_caches = Vec::with_capacity(if keep { self.layout.layers.len() } else { 0 });
        for lay in &self.layout.layers {
            let mut cache = keep.then(|| LayerCache::new(n, hd, &x, &h));
            let (delta, msum) = self.edge_stage(lay, p, &x, &h, &emb, cache.as_mut());
            apply_displacement(&mut x, &delta);
            let n1 = self.node_stage(lay, p, &mut h, &msum);
            if let Some(mut c) = cache {
                c.delta = delta;
                c.msum = msum;
                c.n1 = n1;
                layer_caches.push(c);
            }
        }

        let out = self.output(&x, x_in, &h)?;
        let cache = keep.then(|| ForwardCache {
            generation: self.generation,
            n,
            t,
            emb,
            x_input: x_in.to_vec(),
            h_input: h_in.to_vec(),
            layers: layer_caches,
            x_final: x,
            h_final: h,
        });
        Ok((out, cache))
    }

    /// Messages and coordinate displacements of one layer. Returns the raw
    /// displacement `Σ_j r_ij φ_ij` and the message sums `Σ_j m_ij`.
    fn edge_stage(
        &self,
        lay: &LayerLayout,
        p: &[f64],
        x: &[f64],
        h: &[f64],
        emb: &[f64; TIME_EMBEDDING_DIM],
        mut cache: Option<&mut LayerCache>,
    ) -> (Vec<f64>, Vec<f64>) {
        let hd = self.config.hidden_dim;
        let n = x.len() / 3;
        // Split W_1 [h_i, h_j, f, e] + b_1 into per-node and constant parts.
        let (pa, pb, wf, base) = edge_input_parts(lay.edge1, p, h, emb, n, hd);

        let pairs: Vec<(usize, usize)> =
            (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
        let ne = pairs.len();
        let mut rs = vec![0.0; 3 * ne];
        let mut fs = vec![0.0; ne];
        let mut a1 = vec![0.0; ne * hd];
        let mut s1 = vec![0.0; ne * hd];
        for (q, &(i, j)) in pairs.iter().enumerate() {
            let r = sub3(&x[3 * i..3 * i + 3], &x[3 * j..3 * j + 3]);
            let f = 1.0 / (1.0 + dot(&r, &r));
            rs[3 * q..3 * q + 3].copy_from_slice(&r);
            fs[q] = f;
            for k in 0..hd {
                let v = pa[i * hd + k] + pb[j * hd + k] + wf[k] * f + base[k];
                a1[q * hd + k] = v;
                s1[q * hd + k] = silu(v);
            }
        }
        let mut a2 = vec![0.0; ne * hd];
        lay.edge2.apply_batch(p, &s1, &mut a2);
        let m: Vec<f64> = a2.iter().map(|&v| silu(v)).collect();
        let mut c1 = vec![0.0; ne * hd];
        lay.coord1.apply_batch(p, &m, &mut c1);

        let mut delta = vec![0.0; 3 * n];
        let mut msum = vec![0.0; n * hd];
        let wc2 = lay.coord2.weights(p);
        for (q, &(i, j)) in pairs.iter().enumerate() {
            let c1q = &c1[q * hd..(q + 1) * hd];
            let phi = p[lay.coord2.b] + c1q.iter().zip(wc2).map(|(&v, w)| silu(v) * w).sum::<f64>();
            for k in 0..3 {
                delta[3 * i + k] += rs[3 * q + k] * phi;
            }
            axpy(1.0, &m[q * hd..(q + 1) * hd], &mut msum[i * hd..(i + 1) * hd]);
            if let Some(c) = cache.as_deref_mut() {
                let e = i * n + j;
                let (src, dst) = (q * hd..(q + 1) * hd, e * hd..(e + 1) * hd);
                c.r[3 * e..3 * e + 3].copy_from_slice(&rs[3 * q..3 * q + 3]);
                c.f[e] = fs[q];
                c.a1[dst.clone()].copy_from_slice(&a1[src.clone()]);
                c.a2[dst.clone()].copy_from_slice(&a2[src.clone()]);
                c.c1[dst].copy_from_slice(&c1[src]);
                c.phi[e] = phi;
            }
        }
        (delta, msum)
    }

    /// `h ← h + W_n2 SiLU(W_n1 [h, M] + b_n1) + b_n2`. Returns the pre-activations.
    fn node_stage(&self, lay: &LayerLayout, p: &[f64], h: &mut [f64], msum: &[f64]) -> Vec<f64> {
        let hd = self.config.hidden_dim;
        let n = h.len() / hd;
        let mut node_in = vec![0.0; n * 2 * hd];
        for i in 0..n {
            node_in[2 * i * hd..(2 * i + 1) * hd].copy_from_slice(&h[i * hd..(i + 1) * hd]);
            node_in[(2 * i + 1) * hd..(2 * i + 2) * hd].copy_from_slice(&msum[i * hd..(i + 1) * hd]);
        }
        let mut n1 = vec![0.0; n * hd];
        lay.node1.apply_batch(p, &node_in, &mut n1);
        let sn: Vec<f64> = n1.iter().map(|&v| silu(v)).collect();
        let mut upd = vec![0.0; n * hd];
        lay.node2.apply_batch(p, &sn, &mut upd);
        axpy(1.0, &upd, h);
        n1
    }

    fn output(&self, x: &[f64], x_in: &[f64], h: &[f64]) -> Result<FieldOutput> {
        let (hd, d) = (self.config.hidden_dim, self.config.feature_dim);
        let n = x.len() / 3;
        let mut vx: Vec<f64> = x.iter().zip(x_in).map(|(a, b)| a - b).collect();
        project_zero_com_flat(&mut vx);
        let mut vh = vec![0.0; n * d];
        self.layout.output.apply_batch(&self.params, h, &mut vh);
        assert_eq!(h.len(), n * hd);
        if vx.iter().chain(&vh).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector field output"));
        }
        Ok(FieldOutput { vx, vh, isolated: n == 1 })
    }

    /// Gradient of `⟨upstream, forward(g, t)⟩` with respect to the parameters.
    pub fn backward(&self, cache: &ForwardCache, upstream: &FieldOutput) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(cache, upstream, &mut grad)?;
        Ok(grad)
    }

    /// Like [`Self::backward`], accumulating into `grad`.
    pub fn backward_into(&self, cache: &ForwardCache, upstream: &FieldOutput, grad: &mut [f64]) -> Result<()> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache("parameters changed since the forward pass"));
        }
        let p = &self.params;
        let hd = self.config.hidden_dim;
        let d = self.config.feature_dim;
        let n = cache.n;
        if upstream.vx.len() != 3 * n {
            return Err(Error::LengthMismatch { expected: 3 * n, got: upstream.vx.len() });
        }
        if upstream.vh.len() != n * d {
            return Err(Error::LengthMismatch { expected: n * d, got: upstream.vh.len() });
        }
        if grad.len() != p.len() {
            return Err(Error::LengthMismatch { expected: p.len(), got: grad.len() });
        }

        // Output heads.
        let mut gx = upstream.vx.clone();
        project_zero_com_flat(&mut gx);
        let mut gh = vec![0.0; n * hd];
        let out = self.layout.output;
        for i in 0..n {
            let g = &upstream.vh[i * d..(i + 1) * d];
            out.back_weights(grad, g, &cache.h_final[i * hd..(i + 1) * hd], 0);
            out.back_bias(grad, g);
            out.back_input(p, g, 0, &mut gh[i * hd..(i + 1) * hd]);
        }

        let mut s1 = vec![0.0; hd];
        let mut m = vec![0.0; hd];
        let mut sc = vec![0.0; hd];
        let mut g_m = vec![0.0; hd];
        let mut g_c1 = vec![0.0; hd];
        let mut g_a2 = vec![0.0; hd];
        let mut g_s1 = vec![0.0; hd];
        let mut g_a1 = vec![0.0; hd];
        for (lay, c) in self.layout.layers.iter().zip(&cache.layers).rev() {
            // Node update: h' = h + W_n2 SiLU(W_n1 [h, M] + b_n1) + b_n2.
            let mut g_msum = vec![0.0; n * hd];
            let mut node_in = vec![0.0; 2 * hd];
            let mut g_sn = vec![0.0; hd];
            let mut g_n1 = vec![0.0; hd];
            let mut sn = vec![0.0; hd];
            for i in 0..n {
                let gup = gh[i * hd..(i + 1) * hd].to_vec();
                let n1 = &c.n1[i * hd..(i + 1) * hd];
                for k in 0..hd {
                    sn[k] = silu(n1[k]);
                }
                lay.node2.back_weights(grad, &gup, &sn, 0);
                lay.node2.back_bias(grad, &gup);
                g_sn.fill(0.0);
                lay.node2.back_input(p, &gup, 0, &mut g_sn);
                for k in 0..hd {
                    g_n1[k] = g_sn[k] * silu_prime(n1[k]);
                }
                node_in[..hd].copy_from_slice(&c.h[i * hd..(i + 1) * hd]);
                node_in[hd..].copy_from_slice(&c.msum[i * hd..(i + 1) * hd]);
                lay.node1.back_weights(grad, &g_n1, &node_in, 0);
                lay.node1.back_bias(grad, &g_n1);
                lay.node1.back_input(p, &g_n1, 0, &mut gh[i * hd..(i + 1) * hd]);
                lay.node1.back_input(p, &g_n1, hd, &mut g_msum[i * hd..(i + 1) * hd]);
            }

            // Coordinate update: x' = x + clip(Δ).
            let mut g_delta = vec![0.0; 3 * n];
            for i in 0..n {
                let raw = [c.delta[3 * i], c.delta[3 * i + 1], c.delta[3 * i + 2]];
                let g = [gx[3 * i], gx[3 * i + 1], gx[3 * i + 2]];
                g_delta[3 * i..3 * i + 3].copy_from_slice(&clip_back(&raw, &g));
            }

            // Edges.
            let wf: Vec<f64> = (0..hd).map(|k| lay.edge1.weights(p)[k * lay.edge1.cols + 2 * hd]).collect();
            let mut g_pa = vec![0.0; n * hd];
            let mut g_pb = vec![0.0; n * hd];
            let mut g_wf = vec![0.0; hd];
            let mut g_base = vec![0.0; hd];
            let wc2 = lay.coord2.weights(p);
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let e = i * n + j;
                    let r = &c.r[3 * e..3 * e + 3];
                    let f = c.f[e];
                    let a1 = &c.a1[e * hd..(e + 1) * hd];
                    let a2 = &c.a2[e * hd..(e + 1) * hd];
                    let c1 = &c.c1[e * hd..(e + 1) * hd];
                    for k in 0..hd {
                        s1[k] = silu(a1[k]);
                        m[k] = silu(a2[k]);
                        sc[k] = silu(c1[k]);
                    }
                    let gd = &g_delta[3 * i..3 * i + 3];
                    let g_phi = dot(gd, r);
                    let mut g_r = [gd[0] * c.phi[e], gd[1] * c.phi[e], gd[2] * c.phi[e]];

                    // φ = w_c2·SiLU(c1) + b_c2.
                    axpy(g_phi, &sc, &mut grad[lay.coord2.w..lay.coord2.w + hd]);
                    grad[lay.coord2.b] += g_phi;
                    for k in 0..hd {
                        g_c1[k] = g_phi * wc2[k] * silu_prime(c1[k]);
                    }
                    lay.coord1.back_weights(grad, &g_c1, &m, 0);
                    lay.coord1.back_bias(grad, &g_c1);
                    g_m.copy_from_slice(&g_msum[i * hd..(i + 1) * hd]);
                    lay.coord1.back_input(p, &g_c1, 0, &mut g_m);

                    for k in 0..hd {
                        g_a2[k] = g_m[k] * silu_prime(a2[k]);
                    }
                    lay.edge2.back_weights(grad, &g_a2, &s1, 0);
                    lay.edge2.back_bias(grad, &g_a2);
                    g_s1.fill(0.0);
                    lay.edge2.back_input(p, &g_a2, 0, &mut g_s1);
                    let mut g_f = 0.0;
                    for k in 0..hd {
                        g_a1[k] = g_s1[k] * silu_prime(a1[k]);
                        g_pa[i * hd + k] += g_a1[k];
                        g_pb[j * hd + k] += g_a1[k];
                        g_wf[k] += g_a1[k] * f;
                        g_base[k] += g_a1[k];
                        g_f += g_a1[k] * wf[k];
                    }

                    // f = 1/(1 + r·r).
                    let g_dd = -g_f * f * f;
                    for k in 0..3 {
                        g_r[k] += 2.0 * r[k] * g_dd;
                    }
                    for k in 0..3 {
                        gx[3 * i + k] += g_r[k];
                        gx[3 * j + k] -= g_r[k];
                    }
                }
            }

            // W_1 blocks: [h_i | h_j | f | e].
            let e1 = lay.edge1;
            for i in 0..n {
                let hi = &c.h[i * hd..(i + 1) * hd];
                e1.back_weights(grad, &g_pa[i * hd..(i + 1) * hd], hi, 0);
                e1.back_weights(grad, &g_pb[i * hd..(i + 1) * hd], hi, hd);
                e1.back_input(p, &g_pa[i * hd..(i + 1) * hd], 0, &mut gh[i * hd..(i + 1) * hd]);
                e1.back_input(p, &g_pb[i * hd..(i + 1) * hd], hd, &mut gh[i * hd..(i + 1) * hd]);
            }
            e1.back_weights(grad, &g_wf, &[1.0], 2 * hd);
            e1.back_weights(grad, &g_base, &cache.emb, 2 * hd + 1);
            e1.back_bias(grad, &g_base);
        }

        // Input embedding.
        let mut inp = vec![0.0; d + TIME_EMBEDDING_DIM];
        inp[d..].copy_from_slice(&cache.emb);
        for i in 0..n {
            inp[..d].copy_from_slice(&cache.h_input[i * d..(i + 1) * d]);
            let g = &gh[i * hd..(i + 1) * hd];
            self.layout.input.back_weights(grad, g, &inp, 0);
            self.layout.input.back_bias(grad, g);
        }
        Ok(())
    }
}

/// Per-node projections `W_A h_i`, `W_B h_j`, the distance column `w_f`, and
/// the constant `W_e e + b_1` of the first edge layer.
fn edge_input_parts(
    lin: Linear,
    p: &[f64],
    h: &[f64],
    emb: &[f64; TIME_EMBEDDING_DIM],
    n: usize,
    hd: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let w = lin.weights(p);
    let b = lin.bias(p);
    let cols = lin.cols;
    let mut pa = vec![0.0; n * hd];
    let mut pb = vec![0.0; n * hd];
    // SAFETY: both products read `n × hd` of `h` and `hd × hd` blocks of the
    // `hd × cols` weight matrix, and write `n × hd` outputs.
    assert!(h.len() == n * hd && w.len() == hd * cols && cols >= 2 * hd);
    for (off, out) in [(0, &mut pa), (hd, &mut pb)] {
        unsafe {
            matrixmultiply::dgemm(
                n,
                hd,
                hd,
                1.0,
                h.as_ptr(),
                hd as isize,
                1,
                w.as_ptr().add(off),
                1,
                cols as isize,
                0.0,
                out.as_mut_ptr(),
                hd as isize,
                1,
            );
        }
    }
    let mut wf = vec![0.0; hd];
    let mut base = vec![0.0; hd];
    for r in 0..hd {
        let row = &w[r * cols..(r + 1) * cols];
        wf[r] = row[2 * hd];
        base[r] = b[r] + dot(&row[2 * hd + 1..], emb);
    }
    (pa, pb, wf, base)
}

#[derive(Debug, Clone)]
struct LayerCache {
    x: Vec<f64>,
    h: Vec<f64>,
    r: Vec<f64>,
    f: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    c1: Vec<f64>,
    phi: Vec<f64>,
    delta: Vec<f64>,
    msum: Vec<f64>,
    n1: Vec<f64>,
}

impl LayerCache {
    fn new(n: usize, hd: usize, x: &[f64], h: &[f64]) -> Self {
        let e = n * n;
        Self {
            x: x.to_vec(),
            h: h.to_vec(),
            r: vec![0.0; 3 * e],
            f: vec![0.0; e],
            a1: vec![0.0; e * hd],
            a2: vec![0.0; e * hd],
            c1: vec![0.0; e * hd],
            phi: vec![0.0; e],
            delta: Vec::new(),
            msum: Vec::new(),
            n1: Vec::new(),
        }
    }
}

/// Intermediates of one forward pass, tied to the parameter state that
/// produced them.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    n: usize,
    t: f64,
    emb: [f64; TIME_EMBEDDING_DIM],
    x_input: Vec<f64>,
    h_input: Vec<f64>,
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    h_final: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Eight independent partial sums so the loop is not bound by add latency.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (xa, xb) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += xa[k] * xb[k];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `x_i ← x_i + clip(Δ_i)`.
fn apply_displacement(x: &mut [f64], delta: &[f64]) {
    for (xi, di) in x.chunks_exact_mut(3).zip(delta.chunks_exact(3)) {
        let c = clip(&[di[0], di[1], di[2]]);
        for k in 0..3 {
            xi[k] += c[k];
        }
    }
}

fn sub3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn clip(v: &[f64; 3]) -> [f64; 3] {
    let norm = dot(v, v).sqrt();
    if norm <= MAX_DISPLACEMENT {
        *v
    } else {
        let s = MAX_DISPLACEMENT / norm;
        [v[0] * s, v[1] * s, v[2] * s]
    }
}

/// Vector-Jacobian product of [`clip`].
fn clip_back(v: &[f64; 3], g: &[f64; 3]) -> [f64; 3] {
    let norm = dot(v, v).sqrt();
    if norm <= MAX_DISPLACEMENT {
        return *g;
    }
    // d/dv (c v/|v|) = c/|v| (I − v̂ v̂ᵀ)
    let s = MAX_DISPLACEMENT / norm;
    let proj = dot(v, g) / (norm * norm);
    [s * (g[0] - proj * v[0]), s * (g[1] - proj * v[1]), s * (g[2] - proj * v[2])]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply, random_rotation, Permutation, PointCloud};
    use crate::rng::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig { n_layers: 2, hidden_dim: 8, feature_dim: 6 }
    }

    /// A model whose zero-initialized heads are filled with random values.
    fn live_model(config: ModelConfig, seed: u64) -> VectorFieldModel {
        let mut m = VectorFieldModel::new(config, seed).unwrap();
        let ranges = m.layout.zero_init_ranges();
        let mut r = rng::seeded(seed ^ 0xabcdef);
        let params = m.params_mut();
        for range in ranges {
            for v in &mut params[range] {
                *v = rng::uniform(&mut r, -0.5, 0.5);
            }
        }
        m
    }

    fn geometry(n: usize, d: usize, r: &mut Rng) -> MoleculeGeometry {
        let coords = PointCloud::standard_normal(n, r);
        let features = rng::normals(r, n * d);
        MoleculeGeometry::new(coords, features, d).unwrap()
    }

    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        let scale = a.iter().chain(b).map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    }

    #[test]
    fn parameter_count_matches_formula_and_layout() {
        for (l, h, d) in [(3, 64, 6), (1, 4, 2), (0, 5, 3), (2, 8, 6)] {
            let c = ModelConfig { n_layers: l, hidden_dim: h, feature_dim: d };
            let m = VectorFieldModel::new(c, 0).unwrap();
            assert_eq!(m.n_params(), c.n_params());
            let by_hand = h * (d + 16)
                + h
                + l * ((2 * h + 17) * h + h + h * h + h + h * h + h + h + 1 + 2 * h * h + h + h * h + h)
                + d * h
                + d;
            assert_eq!(c.n_params(), by_hand);
        }
        assert_eq!(ModelConfig::default().n_params(), 92_297);
    }

    #[test]
    fn resumed_pass_matches_a_full_pass_after_any_single_change() {
        for c in [small_config(), ModelConfig { n_layers: 0, hidden_dim: 4, feature_dim: 2 }] {
            let mut m = live_model(c, 8);
            let mut r = rng::seeded(8);
            let g = geometry(4, c.feature_dim, &mut r);
            let (_, cache) = m.forward_cached(&g, 0.4).unwrap();
            for k in 0..m.n_params() {
                let orig = m.params()[k];
                m.params_mut()[k] = orig + 0.3;
                let full = m.forward(&g, 0.4).unwrap();
                let resumed = m.forward_resumed(&cache, k).unwrap();
                assert_eq!(full.vx, resumed.vx, "parameter {k}");
                assert_eq!(full.vh, resumed.vh, "parameter {k}");
                m.params_mut()[k] = orig;
            }
        }
    }

    #[test]
    fn zero_heads_give_zero_field() {
        let m = VectorFieldModel::new(small_config(), 1).unwrap();
        let g = geometry(5, 6, &mut rng::seeded(2));
        let out = m.forward(&g, 0.4).unwrap();
        assert!(out.vx.iter().chain(&out.vh).all(|v| *v == 0.0));
    }

    #[test]
    fn single_node_is_flagged() {
        let m = live_model(small_config(), 3);
        let g = geometry(1, 6, &mut rng::seeded(2));
        let out = m.forward(&g, 0.4).unwrap();
        assert!(out.isolated);
        assert!(out.vx.iter().all(|v| *v == 0.0));
        assert!(out.vh.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn output_is_zero_com_and_deterministic() {
        let m = live_model(small_config(), 4);
        let g = geometry(6, 6, &mut rng::seeded(5));
        let a = m.forward(&g, 0.7).unwrap();
        let b = m.forward(&g, 0.7).unwrap();
        assert_eq!(a, b);
        for k in 0..3 {
            let s: f64 = a.vx.chunks(3).map(|r| r[k]).sum();
            assert!(s.abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_and_permutation_equivariance() {
        let m = live_model(ModelConfig::default(), 6);
        let mut r = rng::seeded(7);
        for _ in 0..5 {
            let g = geometry(7, 6, &mut r);
            let rot = random_rotation(&mut r);
            let perm = Permutation::random(7, &mut r);
            let out = m.forward(&g, 0.3).unwrap();

            let xr = apply(&g.coords, &rot, &Permutation::identity(7)).unwrap();
            let gr = MoleculeGeometry::new(xr, g.features.clone(), 6).unwrap();
            let out_r = m.forward(&gr, 0.3).unwrap();
            let want: Vec<f64> = out.vx.chunks(3).flat_map(|v| rot.rotate(&[v[0], v[1], v[2]])).collect();
            assert!(max_rel(&out_r.vx, &want) < 1e-10);
            assert!(max_rel(&out_r.vh, &out.vh) < 1e-10);

            let xp = apply(&g.coords, &crate::geometry::Rotation::IDENTITY, &perm).unwrap();
            let hp: Vec<f64> = perm.gather(&g.features.chunks(6).collect::<Vec<_>>()).concat();
            let out_p = m.forward(&MoleculeGeometry::new(xp, hp, 6).unwrap(), 0.3).unwrap();
            let vx_p: Vec<f64> = perm.gather(&out.vx.chunks(3).collect::<Vec<_>>()).concat();
            let vh_p: Vec<f64> = perm.gather(&out.vh.chunks(6).collect::<Vec<_>>()).concat();
            assert!(max_rel(&out_p.vx, &vx_p) < 1e-10);
            assert!(max_rel(&out_p.vh, &vh_p) < 1e-10);
        }
    }

    fn pairing(out: &FieldOutput, up: &FieldOutput) -> f64 {
        dot(&out.vx, &up.vx) + dot(&out.vh, &up.vh)
    }

    #[test]
    fn gradients_match_central_differences() {
        let config = small_config();
        let mut m = live_model(config, 8);
        let mut r = rng::seeded(9);
        let g = geometry(5, 6, &mut r);
        let up = FieldOutput { vx: rng::normals(&mut r, 15), vh: rng::normals(&mut r, 30), isolated: false };
        let (_, cache) = m.forward_cached(&g, 0.45).unwrap();
        let grad = m.backward(&cache, &up).unwrap();
        let h = 1e-5;
        for k in 0..m.n_params() {
            let orig = m.params[k];
            m.params_mut()[k] = orig + h;
            let fp = pairing(&m.forward(&g, 0.45).unwrap(), &up);
            m.params_mut()[k] = orig - h;
            let fm = pairing(&m.forward(&g, 0.45).unwrap(), &up);
            m.params_mut()[k] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - grad[k]).abs();
            assert!(err <= 1e-7 || err <= 1e-4 * fd.abs().max(grad[k].abs()), "param {k}: {} vs {fd}", grad[k]);
        }
    }

    #[test]
    fn backward_is_linear_in_upstream_and_rejects_stale_caches() {
        let mut m = live_model(small_config(), 10);
        let mut r = rng::seeded(11);
        let g = geometry(4, 6, &mut r);
        let u1 = FieldOutput { vx: rng::normals(&mut r, 12), vh: rng::normals(&mut r, 24), isolated: false };
        let u2 = FieldOutput { vx: rng::normals(&mut r, 12), vh: rng::normals(&mut r, 24), isolated: false };
        let sum = FieldOutput {
            vx: u1.vx.iter().zip(&u2.vx).map(|(a, b)| a + b).collect(),
            vh: u1.vh.iter().zip(&u2.vh).map(|(a, b)| a + b).collect(),
            isolated: false,
        };
        let (_, cache) = m.forward_cached(&g, 0.2).unwrap();
        let g1 = m.backward(&cache, &u1).unwrap();
        let g2 = m.backward(&cache, &u2).unwrap();
        let gs = m.backward(&cache, &sum).unwrap();
        for k in 0..gs.len() {
            assert!((gs[k] - g1[k] - g2[k]).abs() <= 1e-12 * (1.0 + gs[k].abs()));
        }
        let zero = m.backward(&cache, &FieldOutput::zeros(4, 6)).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));

        m.params_mut()[0] += 1.0;
        assert!(matches!(m.backward(&cache, &u1), Err(Error::StaleCache(_))));
    }

    #[test]
    fn clipping_gradient_matches_finite_differences() {
        let v = [150.0, -40.0, 20.0];
        let g = [0.3, -1.2, 0.7];
        let back = clip_back(&v, &g);
        let h = 1e-6;
        for k in 0..3 {
            let mut a = v;
            let mut b = v;
            a[k] += h;
            b[k] -= h;
            let fd = (dot(&clip(&a), &g) - dot(&clip(&b), &g)) / (2.0 * h);
            assert!((fd - back[k]).abs() < 1e-8);
        }
        assert!((dot(&clip(&v), &clip(&v)).sqrt() - MAX_DISPLACEMENT).abs() < 1e-9);
    }

    #[test]
    fn time_embedding_properties() {
        let e0 = time_embedding(0.0);
        for k in 0..8 {
            assert_eq!(e0[2 * k], 0.0);
            assert_eq!(e0[2 * k + 1], 1.0);
        }
        let grid: Vec<_> = (0..=200).map(|k| time_embedding(k as f64 / 200.0)).collect();
        let c = time_embedding_lipschitz();
        let mut measured: f64 = 0.0;
        for a in 0..grid.len() {
            for b in a + 1..grid.len() {
                let dist = dot(&sub_vec(&grid[a], &grid[b]), &sub_vec(&grid[a], &grid[b])).sqrt();
                assert!(dist > 1e-6, "embedding collides at {a}, {b}");
                measured = measured.max(dist / ((b - a) as f64 / 200.0));
            }
        }
        assert!(measured <= c + 1e-9, "{measured} > {c}");
        assert!(measured > 0.5 * c);
    }

    fn sub_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x - y).collect()
    }
}
