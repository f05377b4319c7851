//! Boundary-layer noise: a space-time basis orthonormal in `E`, bounded
//! coefficients with a smooth density, and counter-based random streams.
//!
//! Raw basis elements are separable products `tau_p(t) sigma(x1, x2)
//! beta_r(x3)` with shifted Legendre polynomials `tau_p`, horizontal
//! trigonometric functions `sigma`, and `beta_r = sin^3(pi r x3 / c)` on
//! `[0, c]`, zero above. They are orthonormalised by modified Gram-Schmidt
//! in the discrete inner product
//!
//! `<f, g>_E = sum_i w_i (<Lap f_i, Lap g_i> + <f_i, g_i>)
//!           + sum_i <f_{i+1} - f_i, g_{i+1} - g_i> / dt`
//!
//! over the time nodes `t_i = i dt` of a unit interval, trapezoidal weights
//! `w_i` in time, and the field quadrature in space (Laplacian on interior
//! planes). Distinct horizontal functions are orthogonal, so the Gram
//! matrix is block diagonal and each block is orthonormalised separately.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{Dirichlet, ScalarField, SpectralField};
use crate::grid::Grid;
use crate::thermal::Forcing;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseConfig {
    /// Overall amplitude `a`.
    pub a: f64,
    /// Number of basis elements.
    pub m: usize,
    /// Decay exponent of `b_j = b0 j^{-s}`.
    pub s: f64,
    pub b0: f64,
    pub seed: u64,
    /// Highest Legendre degree in time.
    pub time_degree: usize,
    /// Number of vertical profiles `beta_r`; `None` uses one per interior
    /// plane of the layer, `c n3 - 1`.
    pub vertical_modes: Option<usize>,
    /// Time nodes per unit interval used by the `E` quadrature.
    pub time_nodes: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { a: 1.0, m: 64, s: 1.0, b0: 1.0, seed: 0, time_degree: 1, vertical_modes: None, time_nodes: 256 }
    }
}

impl NoiseConfig {
    pub fn b(&self, j: usize) -> f64 {
        self.b0 * ((j + 1) as f64).powf(-self.s)
    }

    /// `(sum_{j<m} b_j^2)^{1/2}`.
    pub fn b_norm(&self) -> f64 {
        (0..self.m).map(|j| self.b(j).powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum Trig {
    Const,
    Cos,
    Sin,
}

/// Horizontal factor `sigma` of a basis element.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct HorizontalMode {
    pub q1: i64,
    pub q2: i64,
    pub kind: Trig,
}

impl HorizontalMode {
    pub fn eval(&self, x1: f64, x2: f64) -> f64 {
        let ph = self.q1 as f64 * x1 + self.q2 as f64 * x2;
        match self.kind {
            Trig::Const => 1.0,
            Trig::Cos => ph.cos(),
            Trig::Sin => ph.sin(),
        }
    }

    /// `|sigma|^2_{L^2(T^2)}`.
    pub fn norm_sq(&self) -> f64 {
        match self.kind {
            Trig::Const => 4.0 * PI * PI,
            _ => 2.0 * PI * PI,
        }
    }

    pub fn q_sq(&self) -> f64 {
        (self.q1 * self.q1 + self.q2 * self.q2) as f64
    }

    /// Coefficient `g` of `sigma` in a real field, `f = g sigma + ...`,
    /// from the spectral coefficients of one plane.
    pub(crate) fn extract(&self, grid: &Grid, plane: &[Complex64]) -> f64 {
        let (i1, i2, _) = grid.slot(self.q1, self.q2).expect("mode on grid");
        let c = plane[i1 * grid.n2() + i2];
        match self.kind {
            Trig::Const => c.re,
            Trig::Cos => 2.0 * c.re,
            Trig::Sin => -2.0 * c.im,
        }
    }

    /// Adds `g sigma` to the spectral coefficients of one plane.
    pub(crate) fn deposit(&self, grid: &Grid, g: f64, plane: &mut [Complex64]) {
        let unit = self.unit(g);
        let (i1, i2, _) = grid.slot(self.q1, self.q2).expect("mode on grid");
        plane[i1 * grid.n2() + i2] += unit;
        if self.q1 == 0 && self.kind != Trig::Const {
            // the k1 = 0 column stores both q2 and -q2
            let j2 = grid.n2() - self.q2 as usize;
            plane[j2] += unit.conj();
        }
    }
}

impl HorizontalMode {
    fn unit(&self, g: f64) -> Complex64 {
        match self.kind {
            Trig::Const => Complex64::new(g, 0.0),
            Trig::Cos => Complex64::new(0.5 * g, 0.0),
            Trig::Sin => Complex64::new(0.0, -0.5 * g),
        }
    }

    /// Parseval sum of `sigma` against one plane of spectral coefficients,
    /// without the `4 pi^2` volume factor.
    pub(crate) fn pair(&self, grid: &Grid, plane: &[Complex64]) -> f64 {
        let unit = self.unit(1.0);
        let dot = |x: Complex64, y: Complex64| x.re * y.re + x.im * y.im;
        let (i1, i2, _) = grid.slot(self.q1, self.q2).expect("mode on grid");
        let mut s = grid.multiplicity(i1) * dot(unit, plane[i1 * grid.n2() + i2]);
        if self.q1 == 0 && self.kind != Trig::Const {
            s += dot(unit.conj(), plane[grid.n2() - self.q2 as usize]);
        }
        s
    }
}

/// Horizontal functions in basis order: the constant, then `cos`/`sin`
/// pairs of representative wavevectors (`q1 > 0`, or `q1 = 0, q2 > 0`)
/// sorted by `|q|^2`, then `q1`, then `q2`.
pub fn horizontal_modes(count: usize) -> Vec<HorizontalMode> {
    let mut out = vec![HorizontalMode { q1: 0, q2: 0, kind: Trig::Const }];
    let mut radius = 1i64;
    while out.len() < count {
        let mut qs = Vec::new();
        for q1 in 0..=radius {
            for q2 in -radius..=radius {
                let r2 = q1 * q1 + q2 * q2;
                let rep = q1 > 0 || q2 > 0;
                if rep && r2 > (radius - 1) * (radius - 1) && r2 <= radius * radius {
                    qs.push((r2, q1, q2));
                }
            }
        }
        qs.sort();
        for (_, q1, q2) in qs {
            out.push(HorizontalMode { q1, q2, kind: Trig::Cos });
            out.push(HorizontalMode { q1, q2, kind: Trig::Sin });
        }
        radius += 1;
    }
    out.truncate(count);
    out
}

/// Shifted Legendre polynomials `P_p(2t - 1)`, `p = 0..=degree`.
pub fn shifted_legendre(t: f64, degree: usize) -> Vec<f64> {
    let x = 2.0 * t - 1.0;
    let mut out = Vec::with_capacity(degree + 1);
    out.push(1.0);
    if degree >= 1 {
        out.push(x);
    }
    for p in 1..degree {
        let pf = p as f64;
        let next = ((2.0 * pf + 1.0) * x * out[p] - pf * out[p - 1]) / (pf + 1.0);
        out.push(next);
    }
    out
}

/// `beta_r(x3) = sin^3(pi r x3 / c)` for `x3 < c`, exactly zero otherwise.
pub fn vertical_profile(r: usize, c: f64, x3: f64) -> f64 {
    if x3 >= c || x3 <= 0.0 {
        0.0
    } else {
        (PI * r as f64 * x3 / c).sin().powi(3)
    }
}

#[derive(Clone, Debug)]
struct Block {
    mode: HorizontalMode,
    /// `(r, p)` of the raw elements in this block, in basis order; `r` is
    /// zero-based.
    raw: Vec<(usize, usize)>,
    /// `(D^2 - |q|^2) beta_r` on the planes (zero on the walls).
    lap_beta: Vec<Vec<f64>>,
}

/// One orthonormal element: a combination of the raw elements of its block.
#[derive(Clone, Debug)]
pub struct BasisElement {
    pub block: usize,
    /// Coefficients over `block.raw[..coeffs.len()]`.
    pub coeffs: Vec<f64>,
}

/// Samples of a space-time field against the horizontal functions of the
/// basis: `values[block][i][j]` is the coefficient of `sigma_block` at time
/// node `i` and plane `j`.
#[derive(Clone, Debug)]
pub struct ModalSamples {
    pub values: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug)]
pub struct NoiseBasis {
    grid: Arc<Grid>,
    time_degree: usize,
    time_nodes: usize,
    blocks: Vec<Block>,
    elements: Vec<BasisElement>,
    /// `beta_r` at the planes.
    beta: Vec<Vec<f64>>,
    /// `tau_p` at the time nodes, `tau[i][p]`.
    tau: Vec<Vec<f64>>,
    /// `sup_t |phi_j(t)|_{L^2}` per element.
    sup_l2: Vec<f64>,
}

impl NoiseBasis {
    /// Builds and orthonormalises the first `m` raw elements.
    pub fn build(cfg: &NoiseConfig, grid: &Arc<Grid>) -> Result<Self> {
        if cfg.m == 0 {
            return Err(Error::InvalidArgument("noise basis needs m >= 1".into()));
        }
        let n_vert = cfg.vertical_modes.unwrap_or(grid.layer_top() - 1);
        if n_vert == 0 || cfg.time_nodes == 0 {
            return Err(Error::InvalidArgument("vertical_modes and time_nodes must be positive".into()));
        }
        let c = grid.layer_height();
        let per_block = n_vert * (cfg.time_degree + 1);
        let n_blocks = cfg.m.div_ceil(per_block);
        let modes = horizontal_modes(n_blocks);
        for md in &modes {
            match grid.slot(md.q1, md.q2) {
                Some((i1, i2, _)) if grid.is_resolved(i1, i2) => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "noise wavevector ({}, {}) is not resolved on the grid",
                        md.q1, md.q2
                    )))
                }
            }
        }
        let beta: Vec<Vec<f64>> = (0..n_vert)
            .map(|r| (0..grid.planes()).map(|j| vertical_profile(r + 1, c, grid.x3(j))).collect())
            .collect();
        let tau: Vec<Vec<f64>> =
            (0..=cfg.time_nodes).map(|i| shifted_legendre(i as f64 / cfg.time_nodes as f64, cfg.time_degree)).collect();
        let mut blocks = Vec::with_capacity(n_blocks);
        let mut remaining = cfg.m;
        for md in modes {
            let mut raw = Vec::new();
            'fill: for r in 0..n_vert {
                for p in 0..=cfg.time_degree {
                    if remaining == 0 {
                        break 'fill;
                    }
                    raw.push((r, p));
                    remaining -= 1;
                }
            }
            let lap_beta = beta.iter().map(|b| helmholtz(grid, b, md.q_sq())).collect();
            blocks.push(Block { mode: md, raw, lap_beta });
        }
        let mut basis = NoiseBasis {
            grid: grid.clone(),
            time_degree: cfg.time_degree,
            time_nodes: cfg.time_nodes,
            blocks,
            elements: Vec::with_capacity(cfg.m),
            beta,
            tau,
            sup_l2: Vec::new(),
        };
        basis.orthonormalise()?;
        basis.sup_l2 = (0..basis.elements.len()).map(|j| basis.sup_norm(j)).collect();
        Ok(basis)
    }

    fn orthonormalise(&mut self) -> Result<()> {
        let mut offset = 0;
        for (bi, block) in self.blocks.iter().enumerate() {
            let n = block.raw.len();
            let gram = self.raw_gram(block);
            // modified Gram-Schmidt on coefficient vectors with metric `gram`
            let ip = |a: &[f64], b: &[f64]| -> f64 {
                let mut s = 0.0;
                for i in 0..a.len() {
                    for j in 0..b.len() {
                        s += a[i] * gram[i][j] * b[j];
                    }
                }
                s
            };
            let mut done: Vec<Vec<f64>> = Vec::with_capacity(n);
            for k in 0..n {
                let mut v = vec![0.0; k + 1];
                v[k] = 1.0;
                let original = ip(&v, &v).sqrt();
                for q in &done {
                    let proj = ip(&v, q);
                    for (vi, qi) in v.iter_mut().zip(q) {
                        *vi -= proj * qi;
                    }
                }
                let norm = ip(&v, &v).max(0.0).sqrt();
                if !(norm > 1e-10 * original) {
                    return Err(Error::RankDeficient { index: offset + k });
                }
                v.iter_mut().for_each(|x| *x /= norm);
                done.push(v);
            }
            for v in done {
                self.elements.push(BasisElement { block: bi, coeffs: v });
            }
            offset += n;
        }
        Ok(())
    }

    fn raw_gram(&self, block: &Block) -> Vec<Vec<f64>> {
        let g = &self.grid;
        let n = block.raw.len();
        let dt = 1.0 / self.time_nodes as f64;
        let sig = block.mode.norm_sq();
        let mut out = vec![vec![0.0; n]; n];
        for a in 0..n {
            for b in 0..n {
                let (ra, pa) = block.raw[a];
                let (rb, pb) = block.raw[b];
                let space_l2 = plane_quadrature(g, &self.beta[ra], &self.beta[rb]);
                let space_lap = interior_quadrature(g, &block.lap_beta[ra], &block.lap_beta[rb]);
                let mut tt = 0.0;
                let mut td = 0.0;
                for i in 0..=self.time_nodes {
                    tt += time_weight(i, self.time_nodes) * self.tau[i][pa] * self.tau[i][pb];
                    if i < self.time_nodes {
                        td += (self.tau[i + 1][pa] - self.tau[i][pa]) * (self.tau[i + 1][pb] - self.tau[i][pb]) / dt;
                    }
                }
                out[a][b] = sig * (tt * (space_lap + space_l2) + td * space_l2);
            }
        }
        out
    }

    fn sup_norm(&self, j: usize) -> f64 {
        (0..=self.time_nodes)
            .map(|i| {
                let prof = self.element_profile_at_node(j, i);
                let b = &self.blocks[self.elements[j].block];
                (b.mode.norm_sq() * plane_quadrature(&self.grid, &prof, &prof)).sqrt()
            })
            .fold(0.0, f64::max)
    }

    fn element_profile_at_node(&self, j: usize, i: usize) -> Vec<f64> {
        let e = &self.elements[j];
        let block = &self.blocks[e.block];
        let mut prof = vec![0.0; self.grid.planes()];
        for (c, &(r, p)) in e.coeffs.iter().zip(&block.raw) {
            let w = c * self.tau[i][p];
            for (v, b) in prof.iter_mut().zip(&self.beta[r]) {
                *v += w * b;
            }
        }
        prof
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn len(&self) -> usize {
        self.elements.len()
    }
    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
    pub fn time_nodes(&self) -> usize {
        self.time_nodes
    }
    pub fn time_degree(&self) -> usize {
        self.time_degree
    }
    pub fn element(&self, j: usize) -> &BasisElement {
        &self.elements[j]
    }
    pub fn horizontal_mode(&self, block: usize) -> HorizontalMode {
        self.blocks[block].mode
    }
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Constant `C_basis = sum_j b_j sup_t |phi_j(t)|_{L^2}`, so that
    /// `sup_t |eta(t)|_{L^2} <= a C_basis`.
    pub fn sup_bound(&self, cfg: &NoiseConfig) -> f64 {
        self.sup_l2.iter().enumerate().map(|(j, s)| cfg.b(j) * s).sum()
    }

    /// `phi_j(t, .)` as a physical field.
    pub fn element_field(&self, j: usize, t: f64) -> ScalarField {
        let mut coeffs = vec![0.0; self.elements.len()];
        coeffs[j] = 1.0;
        BasisForcing::new(self, &coeffs).field_at(t)
    }

    /// Samples of `phi_j` at the `E` time nodes.
    pub fn element_samples(&self, j: usize) -> ModalSamples {
        let mut coeffs = vec![0.0; self.elements.len()];
        coeffs[j] = 1.0;
        self.combination_samples(&coeffs)
    }

    /// Samples of `sum_j coeffs_j phi_j` at the `E` time nodes.
    pub fn combination_samples(&self, coeffs: &[f64]) -> ModalSamples {
        let mut values = vec![vec![vec![0.0; self.grid.planes()]; self.time_nodes + 1]; self.blocks.len()];
        for (j, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let b = self.elements[j].block;
            for (i, node) in values[b].iter_mut().enumerate() {
                for (v, p) in node.iter_mut().zip(self.element_profile_at_node(j, i)) {
                    *v += c * p;
                }
            }
        }
        ModalSamples { values }
    }

    /// Empty sample container for a space-time field.
    pub fn empty_samples(&self) -> ModalSamples {
        ModalSamples { values: vec![vec![vec![0.0; self.grid.planes()]; self.time_nodes + 1]; self.blocks.len()] }
    }

    /// Records the horizontal-mode coefficients of a spectral field at time
    /// node `i`.
    pub fn record_samples(&self, samples: &mut ModalSamples, i: usize, spec: &[Complex64]) {
        let g = &self.grid;
        let sl = g.spec_plane_len();
        for (b, block) in self.blocks.iter().enumerate() {
            for j in 0..g.planes() {
                samples.values[b][i][j] = block.mode.extract(g, &spec[j * sl..(j + 1) * sl]);
            }
        }
    }

    /// `E` inner products of a sampled space-time field with `phi_0..phi_{l-1}`.
    pub fn e_products(&self, f: &ModalSamples, l: usize) -> Result<Vec<f64>> {
        if l > self.elements.len() {
            return Err(Error::InvalidArgument(format!("projection rank {l} exceeds basis size {}", self.elements.len())));
        }
        let g = &self.grid;
        let nt = self.time_nodes;
        let dt = 1.0 / nt as f64;
        let needed: usize = self.elements[..l].iter().map(|e| e.block + 1).max().unwrap_or(0);
        // raw products per block
        let mut raw: Vec<Vec<f64>> = Vec::with_capacity(needed);
        for (b, block) in self.blocks[..needed].iter().enumerate() {
            let samples = &f.values[b];
            let lap: Vec<Vec<f64>> = samples.iter().map(|s| helmholtz(g, s, block.mode.q_sq())).collect();
            let mut vals = vec![0.0; block.raw.len()];
            for (k, &(r, p)) in block.raw.iter().enumerate() {
                let mut acc = 0.0;
                for i in 0..=nt {
                    let a = interior_quadrature(g, &lap[i], &block.lap_beta[r]) + plane_quadrature(g, &samples[i], &self.beta[r]);
                    acc += time_weight(i, nt) * self.tau[i][p] * a;
                    if i < nt {
                        let diff: Vec<f64> = samples[i + 1].iter().zip(&samples[i]).map(|(x, y)| x - y).collect();
                        acc += (self.tau[i + 1][p] - self.tau[i][p]) / dt * plane_quadrature(g, &diff, &self.beta[r]);
                    }
                }
                vals[k] = block.mode.norm_sq() * acc;
            }
            raw.push(vals);
        }
        Ok(self.elements[..l]
            .iter()
            .map(|e| e.coeffs.iter().zip(&raw[e.block]).map(|(c, v)| c * v).sum())
            .collect())
    }

    /// `E` inner product of two sampled space-time fields.
    pub fn e_inner(&self, f: &ModalSamples, h: &ModalSamples) -> f64 {
        let g = &self.grid;
        let nt = self.time_nodes;
        let dt = 1.0 / nt as f64;
        let mut total = 0.0;
        for (b, block) in self.blocks.iter().enumerate() {
            let (fs, hs) = (&f.values[b], &h.values[b]);
            let q = block.mode.q_sq();
            let mut acc = 0.0;
            for i in 0..=nt {
                let (lf, lh) = (helmholtz(g, &fs[i], q), helmholtz(g, &hs[i], q));
                acc += time_weight(i, nt) * (interior_quadrature(g, &lf, &lh) + plane_quadrature(g, &fs[i], &hs[i]));
                if i < nt {
                    let df: Vec<f64> = fs[i + 1].iter().zip(&fs[i]).map(|(x, y)| x - y).collect();
                    let dh: Vec<f64> = hs[i + 1].iter().zip(&hs[i]).map(|(x, y)| x - y).collect();
                    acc += plane_quadrature(g, &df, &dh) / dt;
                }
            }
            total += block.mode.norm_sq() * acc;
        }
        total
    }

    /// Orthogonal projection `Pi_l` in `E`: coefficients of the first `l`
    /// elements (the rest zero).
    pub fn project(&self, f: &ModalSamples, l: usize) -> Result<Vec<f64>> {
        let mut c = self.e_products(f, l)?;
        c.resize(self.elements.len(), 0.0);
        Ok(c)
    }
}

/// `(D^2 - q^2) v` on interior planes, zero on the walls.
fn helmholtz(grid: &Grid, v: &[f64], q2: f64) -> Vec<f64> {
    let n = grid.n3();
    let inv_h2 = 1.0 / (grid.h() * grid.h());
    let mut out = vec![0.0; n + 1];
    for j in 1..n {
        out[j] = (v[j + 1] - 2.0 * v[j] + v[j - 1]) * inv_h2 - q2 * v[j];
    }
    out
}

fn plane_quadrature(grid: &Grid, a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).enumerate().map(|(j, (x, y))| grid.weight(j) * x * y).sum()
}

fn interior_quadrature(grid: &Grid, a: &[f64], b: &[f64]) -> f64 {
    let n = grid.n3();
    (1..n).map(|j| grid.h() * a[j] * b[j]).sum()
}

fn time_weight(i: usize, n: usize) -> f64 {
    let dt = 1.0 / n as f64;
    if i == 0 || i == n {
        0.5 * dt
    } else {
        dt
    }
}

/// Forcing `sum_j coeffs_j phi_j(t, x)`, evaluated spectrally.
#[derive(Clone, Debug)]
pub struct BasisForcing {
    grid: Arc<Grid>,
    modes: Vec<HorizontalMode>,
    /// Per block: weight of `tau_p(t) beta_r(x3)` indexed `[r][p]`.
    weights: Vec<Vec<Vec<f64>>>,
    beta: Vec<Vec<f64>>,
    degree: usize,
    zero: bool,
}

impl BasisForcing {
    pub fn new(basis: &NoiseBasis, coeffs: &[f64]) -> Self {
        let nr = basis.beta.len();
        let mut weights = vec![vec![vec![0.0; basis.time_degree + 1]; nr]; basis.blocks.len()];
        for (e, &c) in basis.elements.iter().zip(coeffs) {
            let block = &basis.blocks[e.block];
            for (w, &(r, p)) in e.coeffs.iter().zip(&block.raw) {
                weights[e.block][r][p] += c * w;
            }
        }
        BasisForcing {
            grid: basis.grid.clone(),
            modes: basis.blocks.iter().map(|b| b.mode).collect(),
            weights,
            beta: basis.beta.clone(),
            degree: basis.time_degree,
            zero: coeffs.iter().all(|&c| c == 0.0),
        }
    }

    /// Vertical profile of horizontal function `block` at time `t`.
    fn profile(&self, block: usize, tau: &[f64]) -> Vec<f64> {
        let mut prof = vec![0.0; self.grid.planes()];
        for (r, wr) in self.weights[block].iter().enumerate() {
            let w: f64 = wr.iter().zip(tau).map(|(a, b)| a * b).sum();
            if w != 0.0 {
                for (v, b) in prof.iter_mut().zip(&self.beta[r]) {
                    *v += w * b;
                }
            }
        }
        prof
    }

    /// `L^2` inner product of the forcing at time `t` with spectral
    /// coefficients `lambda`; touches only the forced modes and planes.
    pub fn pair_spectral(&self, t: f64, lambda: &[Complex64]) -> f64 {
        if self.zero {
            return 0.0;
        }
        let tau = shifted_legendre(t, self.degree);
        let sl = self.grid.spec_plane_len();
        let mut acc = 0.0;
        for (b, mode) in self.modes.iter().enumerate() {
            for (j, &v) in self.profile(b, &tau).iter().enumerate() {
                if v != 0.0 {
                    acc += self.grid.weight(j) * v * mode.pair(&self.grid, &lambda[j * sl..(j + 1) * sl]);
                }
            }
        }
        4.0 * PI * PI * acc
    }

    pub fn field_at(&self, t: f64) -> ScalarField {
        let mut c = vec![Complex64::default(); self.grid.spec_len()];
        self.add_spectral(t, 1.0, &mut c);
        SpectralField::from_coeffs(&self.grid, c, Dirichlet::ZERO).expect("sizes agree").to_physical()
    }
}

impl Forcing for BasisForcing {
    fn add_spectral(&self, t: f64, scale: f64, out: &mut [Complex64]) {
        if self.zero {
            return;
        }
        let tau = shifted_legendre(t, self.degree);
        let sl = self.grid.spec_plane_len();
        for (b, mode) in self.modes.iter().enumerate() {
            let prof = self.profile(b, &tau);
            for (j, &v) in prof.iter().enumerate() {
                if v != 0.0 {
                    mode.deposit(&self.grid, scale * v, &mut out[j * sl..(j + 1) * sl]);
                }
            }
        }
    }

    fn is_zero(&self) -> bool {
        self.zero
    }
}

/// Cumulative distribution of the density `(15/16)(1 - x^2)^2` on `[-1, 1]`.
pub fn xi_cdf(x: f64) -> f64 {
    let x = x.clamp(-1.0, 1.0);
    0.5 + 15.0 / 16.0 * (x - 2.0 * x.powi(3) / 3.0 + x.powi(5) / 5.0)
}

pub fn xi_density(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        0.0
    } else {
        15.0 / 16.0 * (1.0 - x * x).powi(2)
    }
}

/// Inverse of [`xi_cdf`] by safeguarded Newton iteration.
pub fn xi_quantile(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    let mut x = 2.0 * u - 1.0;
    for _ in 0..100 {
        let f = xi_cdf(x) - u;
        if f.abs() < 1e-15 {
            break;
        }
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let d = xi_density(x);
        let step = if d > 1e-300 { x - f / d } else { f64::NAN };
        x = if step > lo && step < hi { step } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-16 {
            break;
        }
    }
    x
}

/// Draws one coefficient from `rng` by inverse-CDF sampling.
pub fn sample_xi<R: Rng>(rng: &mut R) -> f64 {
    let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    xi_quantile(u)
}

/// Counter-based stream: the coefficient `xi_j^k` of chain `chain` is a
/// pure function of `(seed, chain, k, j)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NoiseStream {
    pub seed: u64,
    pub chain: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, chain: u64) -> Self {
        NoiseStream { seed, chain }
    }

    pub fn xi(&self, k: u64, j: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.chain);
        rng.set_word_pos(((k as u128) << 33) | ((j as u128) << 1));
        sample_xi(&mut rng)
    }

    pub fn xis(&self, k: u64, m: usize) -> Vec<f64> {
        (0..m).map(|j| self.xi(k, j)).collect()
    }
}

/// One realisation `eta_k = a sum_j b_j xi_j phi_j`.
#[derive(Clone, Debug)]
pub struct NoiseSample {
    pub k: u64,
    pub xi: Vec<f64>,
    forcing: BasisForcing,
}

impl NoiseSample {
    pub fn new(k: u64, xi: Vec<f64>, cfg: &NoiseConfig, basis: &NoiseBasis) -> Self {
        let coeffs: Vec<f64> = xi.iter().enumerate().map(|(j, x)| cfg.a * cfg.b(j) * x).collect();
        NoiseSample { k, xi, forcing: BasisForcing::new(basis, &coeffs) }
    }

    pub fn forcing(&self) -> &BasisForcing {
        &self.forcing
    }

    pub fn field_at(&self, t: f64) -> ScalarField {
        self.forcing.field_at(t)
    }
}

/// Draws `eta_k` for the given stream.
pub fn sample_noise(k: u64, cfg: &NoiseConfig, basis: &NoiseBasis, stream: &NoiseStream) -> NoiseSample {
    NoiseSample::new(k, stream.xis(k, basis.len()), cfg, basis)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Arc<Grid> {
        Grid::new(16, 16, 16, 0.25).unwrap()
    }

    fn small_cfg(m: usize) -> NoiseConfig {
        NoiseConfig { m, time_nodes: 32, ..Default::default() }
    }

    #[test]
    fn horizontal_modes_are_sorted_representatives() {
        let modes = horizontal_modes(9);
        assert_eq!(modes[0].kind, Trig::Const);
        assert_eq!((modes[1].q1, modes[1].q2, modes[1].kind), (0, 1, Trig::Cos));
        assert_eq!((modes[3].q1, modes[3].q2), (1, 0));
        assert_eq!((modes[5].q1, modes[5].q2), (1, -1));
        assert_eq!((modes[7].q1, modes[7].q2), (1, 1));
    }

    #[test]
    fn sparse_pairing_matches_the_full_inner_product() {
        let g = grid();
        let b = NoiseBasis::build(&small_cfg(24), &g).unwrap();
        let lambda = crate::field::random_smooth(&g, 4, 4, 4).to_spectral().into_coeffs();
        for j in [0, 1, 2, 7, 23] {
            let mut c = vec![0.0; b.len()];
            c[j] = 1.0;
            let f = BasisForcing::new(&b, &c);
            let mut z = vec![Complex64::default(); g.spec_len()];
            f.add_spectral(0.3, 1.0, &mut z);
            let full = crate::thermal::spectral_inner(&g, &z, &lambda);
            assert!((f.pair_spectral(0.3, &lambda) - full).abs() < 1e-12 * (1.0 + full.abs()), "element {j}");
        }
    }

    #[test]
    fn legendre_values() {
        let p = shifted_legendre(1.0, 3);
        assert!(p.iter().all(|v| (v - 1.0).abs() < 1e-15));
        let q = shifted_legendre(0.5, 2);
        assert!((q[2] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_element_has_unit_norm() {
        let g = grid();
        let b = NoiseBasis::build(&small_cfg(1), &g).unwrap();
        assert_eq!(b.len(), 1);
        let s = b.element_samples(0);
        assert!((b.e_inner(&s, &s) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gram_is_identity() {
        let g = grid();
        let b = NoiseBasis::build(&small_cfg(20), &g).unwrap();
        let samples: Vec<_> = (0..b.len()).map(|j| b.element_samples(j)).collect();
        for i in 0..b.len() {
            for j in 0..b.len() {
                let e = b.e_inner(&samples[i], &samples[j]);
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((e - expected).abs() < 1e-10, "({i},{j}) = {e}");
            }
        }
    }

    #[test]
    fn elements_vanish_above_layer() {
        let g = grid();
        let b = NoiseBasis::build(&small_cfg(12), &g).unwrap();
        for j in 0..b.len() {
            for t in [0.0, 0.3, 0.99] {
                let f = b.element_field(j, t);
                for p in g.layer_top()..g.planes() {
                    assert!(f.plane(p).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn too_many_vertical_profiles_are_rank_deficient() {
        let g = grid();
        let cfg = NoiseConfig { vertical_modes: Some(g.layer_top()), ..small_cfg(20) };
        match NoiseBasis::build(&cfg, &g) {
            Err(Error::RankDeficient { index }) => assert_eq!(index, 2 * (g.layer_top() - 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        for u in [0.0, 1e-9, 0.1, 0.5, 0.77, 1.0 - 1e-12, 1.0] {
            let x = xi_quantile(u);
            assert!((-1.0..=1.0).contains(&x));
            assert!((xi_cdf(x) - u).abs() < 1e-12);
        }
    }

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let s = NoiseStream::new(42, 3);
        assert_eq!(s.xi(5, 7), s.xi(5, 7));
        assert_ne!(s.xi(5, 7), s.xi(5, 8));
        assert_ne!(s.xi(5, 7), s.xi(6, 7));
        assert_ne!(s.xi(5, 7), NoiseStream::new(42, 4).xi(5, 7));
    }
}
