//! Coarse graining: the smoothing density, the scale functions `s_L`, `r_L`,
//! `h_L`, the coarse kernels `Π̂_L` and the sojourn functional `Λ_L`.
//!
//! The radius `t` of the stopping ball is drawn from `φ(t/h)/h`. The set
//! `V_t(x) ∩ V_L` only changes when `t²` crosses a norm that `Z^d` can
//! represent, so the `t`-integral is a finite weighted sum of exact exit
//! problems. Only the piece weights `∫φ` need numerical quadrature.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::{EnvWindow, SiteDistribution, TransitionSource};
use crate::error::{Result, RwreError};
use crate::exact_solver::{green_on_chain, AbsorbingChain, GreenTable, KernelKind, KernelTable};
use crate::lattice::{radius_to_r2, Ball, Site, SortedOffsets, NO_NEIGHBOR};
use crate::linalg::{bicgstab, conjugate_gradient, CsrMatrix, DEFAULT_MAX_ITER};
use crate::walk_engine::{default_step_cap, step, ReplicaOptions, WalkStream};

/// Relative residual for the local exit problems.
pub const LOCAL_TOL: f64 = 1e-11;

/// Default Gauss–Legendre nodes per quadrature piece.
pub const DEFAULT_NODES: usize = 32;

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn bump(t: f64) -> f64 {
    if t <= 1.0 || t >= 2.0 {
        0.0
    } else {
        (-1.0 / ((t - 1.0) * (2.0 - t))).exp()
    }
}

fn gl_integral<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, nodes: &[f64], weights: &[f64]) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    nodes
        .iter()
        .zip(weights)
        .map(|(x, w)| w * f(mid + half * x))
        .sum::<f64>()
        * half
}

/// The bump `φ(t) = Z⁻¹ exp(-1/((t-1)(2-t)))` on `(1, 2)`.
#[derive(Debug, Clone)]
pub struct SmoothingDensity {
    z: f64,
    c_phi: f64,
    grid: Vec<f64>,
    cdf: Vec<f64>,
    gl: HashMap<usize, (Vec<f64>, Vec<f64>)>,
}

const SAMPLER_CELLS: usize = 4096;

impl SmoothingDensity {
    pub fn new() -> Self {
        let (x, w) = gauss_legendre(20);
        let panels = 256;
        let mut z = 0.0;
        let mut m2 = 0.0;
        for k in 0..panels {
            let a = 1.0 + k as f64 / panels as f64;
            let b = a + 1.0 / panels as f64;
            z += gl_integral(bump, a, b, &x, &w);
            m2 += gl_integral(|t| t * t * bump(t), a, b, &x, &w);
        }
        let (x8, w8) = gauss_legendre(8);
        let mut grid = Vec::with_capacity(SAMPLER_CELLS + 1);
        let mut cdf = Vec::with_capacity(SAMPLER_CELLS + 1);
        let mut acc = 0.0;
        grid.push(1.0);
        cdf.push(0.0);
        for k in 0..SAMPLER_CELLS {
            let a = 1.0 + k as f64 / SAMPLER_CELLS as f64;
            let b = a + 1.0 / SAMPLER_CELLS as f64;
            acc += gl_integral(bump, a, b, &x8, &w8) / z;
            grid.push(b);
            cdf.push(acc);
        }
        let last = *cdf.last().unwrap();
        cdf.iter_mut().for_each(|c| *c /= last);
        let mut gl = HashMap::new();
        for n in [8, 16, 32, 64] {
            gl.insert(n, gauss_legendre(n));
        }
        Self {
            z,
            c_phi: m2 / z,
            grid,
            cdf,
            gl,
        }
    }

    /// `φ(t)`.
    pub fn eval(&self, t: f64) -> f64 {
        bump(t) / self.z
    }

    /// The normalizing constant `Z`.
    pub fn normalizer(&self) -> f64 {
        self.z
    }

    /// `c_φ = ∫ t² φ(t) dt`.
    pub fn c_phi(&self) -> f64 {
        self.c_phi
    }

    /// `∫_a^b φ` by one Gauss–Legendre panel with `nodes` points.
    pub fn integral(&self, a: f64, b: f64, nodes: usize) -> f64 {
        let a = a.clamp(1.0, 2.0);
        let b = b.clamp(1.0, 2.0);
        if b <= a {
            return 0.0;
        }
        match self.gl.get(&nodes) {
            Some((x, w)) => gl_integral(|t| self.eval(t), a, b, x, w),
            None => {
                let (x, w) = gauss_legendre(nodes);
                gl_integral(|t| self.eval(t), a, b, &x, &w)
            }
        }
    }

    /// Inverse-CDF draw from `φ(t) dt` for `u` in `[0, 1)`.
    pub fn sample(&self, u: f64) -> f64 {
        let k = self
            .cdf
            .partition_point(|&c| c <= u)
            .clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[k - 1], self.cdf[k]);
        let frac = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
        let t = self.grid[k - 1] + frac * (self.grid[k] - self.grid[k - 1]);
        t.clamp(1.0 + 1e-12, 2.0 - 1e-12)
    }
}

impl Default for SmoothingDensity {
    fn default() -> Self {
        Self::new()
    }
}

/// Process-wide density instance.
pub fn density() -> &'static SmoothingDensity {
    static DENSITY: OnceLock<SmoothingDensity> = OnceLock::new();
    DENSITY.get_or_init(SmoothingDensity::new)
}

/// Radius profile: `u` on `[0, 1/2]`, the cubic Hermite interpolant with
/// slopes 1 and 0 on `[1/2, 2]`, and 1 beyond.
pub fn profile(u: f64) -> f64 {
    if u <= 0.5 {
        u
    } else if u >= 2.0 {
        1.0
    } else {
        let s = (u - 0.5) / 1.5;
        0.5 * s * s * s - 1.5 * s * s + 1.5 * s + 0.5
    }
}

/// Exponents and prefactor of `s_L = L/(log L)^a`, `r_L = L/(log L)^b`,
/// `h_L = c · max(s_L h(d_L/s_L), r_L)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleParams {
    pub s_power: f64,
    pub r_power: f64,
    pub prefactor: f64,
}

impl ScaleParams {
    /// The asymptotic choice `(3, 15, 1/20)`.
    pub const ASYMPTOTIC: ScaleParams = ScaleParams {
        s_power: 3.0,
        r_power: 15.0,
        prefactor: 0.05,
    };

    /// Exponents that keep `h_L` between 2 and 5 lattice units for L in 8..=32.
    pub const DESK: ScaleParams = ScaleParams {
        s_power: 1.5,
        r_power: 1.8,
        prefactor: 1.0,
    };

    pub fn s(&self, l: f64) -> f64 {
        l / l.ln().powf(self.s_power)
    }

    pub fn r(&self, l: f64) -> f64 {
        l / l.ln().powf(self.r_power)
    }
}

impl Default for ScaleParams {
    fn default() -> Self {
        Self::DESK
    }
}

/// Shape of the radius function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// `h_L` shrinks towards the boundary.
    #[default]
    Smooth,
    /// `h_L ≡ c · s_L`.
    Constant,
}

/// Smallest admissible coarse radius, in lattice units.
pub const MIN_RADIUS: f64 = 2.0;

/// One constant-set piece of the `t`-integral.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Piece {
    /// Squared radius of the ball used on this piece.
    pub r2: i64,
    pub weight: f64,
}

/// The coarse-graining scheme on `V_L(center)`.
#[derive(Debug, Clone)]
pub struct CoarseScheme {
    center: Site,
    radius: f64,
    r2: i64,
    params: ScaleParams,
    profile: Profile,
    s: f64,
    r: f64,
    nodes: usize,
}

impl CoarseScheme {
    /// Scheme on `V_L(0)` in dimension `d`.
    pub fn new(d: usize, radius: f64, params: ScaleParams) -> Result<Self> {
        Self::centered(Site::origin(d), radius, params)
    }

    pub fn centered(center: Site, radius: f64, params: ScaleParams) -> Result<Self> {
        if !(radius > 1.0) || !radius.is_finite() {
            return Err(RwreError::ScaleGuard(format!(
                "coarse graining needs L > 1, got {radius}"
            )));
        }
        let s = params.s(radius);
        let r = params.r(radius);
        if params.prefactor * r < MIN_RADIUS {
            return Err(RwreError::ScaleGuard(format!(
                "minimum coarse radius {:.4} at L = {radius} is below {MIN_RADIUS}",
                params.prefactor * r
            )));
        }
        Ok(Self {
            center,
            radius,
            r2: radius_to_r2(radius),
            params,
            profile: Profile::Smooth,
            s,
            r,
            nodes: DEFAULT_NODES,
        })
    }

    pub fn with_profile(mut self, profile: Profile) -> Self {
        self.profile = profile;
        self
    }

    pub fn with_nodes(mut self, nodes: usize) -> Self {
        self.nodes = nodes.max(1);
        self
    }

    /// The scheme of the same kind on `V_t(x)`, used for `h_t^x`.
    pub fn inner(&self, x: &Site, t: f64) -> Result<Self> {
        Ok(Self::centered(*x, t, self.params)?
            .with_profile(self.profile)
            .with_nodes(self.nodes))
    }

    pub fn dim(&self) -> usize {
        self.center.dim()
    }

    pub fn center(&self) -> &Site {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// `floor(L²)`, the squared radius of the lattice ball.
    pub fn radius2(&self) -> i64 {
        self.r2
    }

    pub fn params(&self) -> ScaleParams {
        self.params
    }

    pub fn profile(&self) -> Profile {
        self.profile
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn s_l(&self) -> f64 {
        self.s
    }

    pub fn r_l(&self) -> f64 {
        self.r
    }

    /// Upper bound of `h_L` over the ball.
    pub fn max_h(&self) -> f64 {
        self.params.prefactor * self.s.max(self.r)
    }

    pub fn contains(&self, y: &Site) -> bool {
        y.dist2(&self.center) <= self.r2
    }

    /// `d_L(y) = L - |y - center|`.
    pub fn d_l(&self, y: &Site) -> Result<f64> {
        if !self.contains(y) {
            return Err(RwreError::OutsideBall {
                site: y.to_string(),
                radius: self.radius,
            });
        }
        Ok(self.radius - (y.dist2(&self.center) as f64).sqrt())
    }

    /// `h_L` as a function of the boundary distance.
    pub fn h_from_distance(&self, dl: f64) -> f64 {
        let c = self.params.prefactor;
        match self.profile {
            Profile::Constant => c * self.s,
            Profile::Smooth => c * (self.s * profile(dl.max(0.0) / self.s)).max(self.r),
        }
    }

    /// `h_L(y)` for `y` in the closed ball.
    pub fn h_at(&self, y: &Site) -> Result<f64> {
        Ok(self.h_from_distance(self.d_l(y)?))
    }

    /// Pieces of `(h, 2h)` on which `V_t(0) ∩ Z^d` is constant, weighted by
    /// `∫ φ(t/h)/h dt` over the piece. Weights are renormalized to sum to 1.
    pub fn pieces(&self, h: f64) -> Vec<Piece> {
        pieces_for(self.dim(), h, self.nodes)
    }
}

fn isqrt(n: i64) -> i64 {
    let mut r = (n as f64).sqrt() as i64;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

/// Whether `n` is a sum of `d` squares.
pub fn is_sum_of_squares(d: usize, n: i64) -> bool {
    if n < 0 {
        return false;
    }
    match d {
        0 => n == 0,
        1 => isqrt(n).pow(2) == n,
        2 => (0..=isqrt(n)).any(|a| isqrt(n - a * a).pow(2) == n - a * a),
        3 => {
            if n == 0 {
                return true;
            }
            let mut m = n;
            while m % 4 == 0 {
                m /= 4;
            }
            m % 8 != 7
        }
        _ => true,
    }
}

/// Pieces of the `t`-integral over `(h, 2h)` for dimension `d`.
pub fn pieces_for(d: usize, h: f64, nodes: usize) -> Vec<Piece> {
    let lo2 = h * h;
    let hi2 = 4.0 * h * h;
    let mut first = lo2.floor() as i64;
    while !is_sum_of_squares(d, first) {
        first -= 1;
    }
    let mut edges = vec![h];
    let mut r2s = vec![first];
    let mut n = lo2.floor() as i64 + 1;
    while (n as f64) < hi2 {
        if is_sum_of_squares(d, n) && (n as f64) > lo2 {
            edges.push((n as f64).sqrt());
            r2s.push(n);
        }
        n += 1;
    }
    edges.push(2.0 * h);
    let phi = density();
    let mut out: Vec<Piece> = r2s
        .iter()
        .enumerate()
        .map(|(k, &r2)| Piece {
            r2,
            weight: phi.integral(edges[k] / h, edges[k + 1] / h, nodes),
        })
        .collect();
    let total: f64 = out.iter().map(|p| p.weight).sum();
    out.iter_mut().for_each(|p| p.weight /= total);
    out
}

/// Transition weights for the local solver: one common law or a dense window.
pub enum WeightLookup {
    Homogeneous(SiteDistribution),
    Window(EnvWindow),
}

impl WeightLookup {
    /// Covers the cube of half-width `r` around `center`.
    pub fn new<S: TransitionSource + ?Sized>(source: &S, center: &Site, r: i32) -> Result<Self> {
        Ok(match source.homogeneous() {
            Some(p) => WeightLookup::Homogeneous(p),
            None => WeightLookup::Window(EnvWindow::new(source, center, r)?),
        })
    }

    #[inline]
    fn at(&self, y: &Site) -> &[f64] {
        match self {
            WeightLookup::Homogeneous(p) => p.weights(),
            WeightLookup::Window(w) => w
                .weights(y)
                .unwrap_or_else(|| panic!("site {y} outside the weight window")),
        }
    }

    fn homogeneous(&self) -> Option<&SiteDistribution> {
        match self {
            WeightLookup::Homogeneous(p) => Some(p),
            WeightLookup::Window(_) => None,
        }
    }
}

/// Exit data of one set `V_t(x) ∩ V`, in offset coordinates around `x`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SetExit {
    /// `(offset index, probability)`, sorted by index.
    pub exits: Vec<(u32, f64)>,
    pub mean_time: f64,
}

type CacheKey = (i64, [u64; 12]);

/// Solves the exit problems of nested balls around a start site.
pub struct LocalSolver {
    table: SortedOffsets,
    tol: f64,
    cache: Mutex<HashMap<CacheKey, Arc<SetExit>>>,
}

impl LocalSolver {
    /// Solver for balls of radius up to `max_radius`.
    pub fn new(d: usize, max_radius: f64) -> Self {
        let outer = (max_radius + 1.0).powi(2).floor() as i64 + 1;
        Self {
            table: SortedOffsets::new(d, outer),
            tol: LOCAL_TOL,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn table(&self) -> &SortedOffsets {
        &self.table
    }

    fn check_radius(&self, r2: i64) -> Result<()> {
        let need = ((r2 as f64).sqrt() + 1.0).powi(2).floor() as i64;
        if need > self.table.max_r2() {
            return Err(RwreError::InvalidArgument(format!(
                "ball r2 = {r2} exceeds the local solver table"
            )));
        }
        Ok(())
    }

    /// Exit data of `S_k = {y : |y - x|² ≤ r2_k} ∩ V_outer` for ascending
    /// `r2s`. `outer` is `(center, floor(R²))`; `None` means no truncation.
    pub fn solve_sets(
        &self,
        weights: &WeightLookup,
        x: &Site,
        r2s: &[i64],
        outer: Option<(&Site, i64)>,
    ) -> Result<Vec<Arc<SetExit>>> {
        let Some(&r2max) = r2s.last() else {
            return Ok(Vec::new());
        };
        self.check_radius(r2max)?;
        let n_max = self.table.prefix_len(r2max);
        let n_scan = self
            .table
            .prefix_len(((r2max as f64).sqrt() + 1.0).powi(2).floor() as i64);
        let outside: Vec<bool> = (0..n_scan)
            .map(|j| match outer {
                None => false,
                Some((c, rr)) => x.add(&self.table.offset(j)).dist2(c) > rr,
            })
            .collect();
        if outside[0] {
            return Err(RwreError::OutsideBall {
                site: x.to_string(),
                radius: outer.map(|(_, rr)| (rr as f64).sqrt()).unwrap_or(0.0),
            });
        }
        let truncated = outside[..n_max].iter().any(|&o| o);
        if let (Some(p), false) = (weights.homogeneous(), truncated) {
            let mut bits = [0u64; 12];
            for (b, w) in bits.iter_mut().zip(p.weights()) {
                *b = w.to_bits();
            }
            let mut out = Vec::with_capacity(r2s.len());
            let mut missing = Vec::new();
            {
                let cache = self.cache.lock().expect("cache lock");
                for &r2 in r2s {
                    match cache.get(&(r2, bits)) {
                        Some(v) => out.push(Some(v.clone())),
                        None => {
                            out.push(None);
                            missing.push(r2);
                        }
                    }
                }
            }
            if !missing.is_empty() {
                let fresh = self.solve_uncached(weights, x, &missing, &outside)?;
                let mut cache = self.cache.lock().expect("cache lock");
                for (r2, v) in missing.iter().zip(fresh) {
                    cache.entry((*r2, bits)).or_insert(v);
                }
                for (slot, &r2) in out.iter_mut().zip(r2s) {
                    if slot.is_none() {
                        *slot = Some(cache[&(r2, bits)].clone());
                    }
                }
            }
            return Ok(out.into_iter().map(|v| v.expect("filled")).collect());
        }
        self.solve_uncached(weights, x, r2s, &outside)
    }

    fn solve_uncached(
        &self,
        weights: &WeightLookup,
        x: &Site,
        r2s: &[i64],
        outside: &[bool],
    ) -> Result<Vec<Arc<SetExit>>> {
        let d = x.dim();
        let nd = 2 * d;
        let table = &self.table;
        let n_max = table.prefix_len(*r2s.last().expect("nonempty"));
        let nbr = table.neighbor_table();
        // Weights with transitions into or out of excluded sites zeroed, so
        // the operator only needs the prefix test.
        let mut wts = vec![0.0; n_max * nd];
        for j in 0..n_max {
            if outside[j] {
                continue;
            }
            let w = weights.at(&x.add(&table.offset(j)));
            for dir in 0..nd {
                let t = nbr[j * nd + dir] as usize;
                if t >= outside.len() || !outside[t] {
                    wts[j * nd + dir] = w[dir];
                }
            }
        }
        let full: Vec<f64> = (0..n_max)
            .flat_map(|j| {
                if outside[j] {
                    vec![0.0; nd]
                } else {
                    weights.at(&x.add(&table.offset(j))).to_vec()
                }
            })
            .collect();
        let symmetric = weights.homogeneous().is_some_and(|p| p.is_symmetric());
        let mut g = vec![0.0; n_max];
        let mut acc = vec![0.0; outside.len()];
        let mut out: Vec<Arc<SetExit>> = Vec::with_capacity(r2s.len());
        let mut prev_active = usize::MAX;
        for &r2 in r2s {
            let n = table.prefix_len(r2);
            let active = (0..n).filter(|&j| !outside[j]).count();
            if active == prev_active {
                out.push(out.last().expect("previous set").clone());
                continue;
            }
            prev_active = active;
            let apply = |u: &[f64], o: &mut [f64]| {
                o.copy_from_slice(u);
                for y in 0..n {
                    let gy = u[y];
                    if gy == 0.0 {
                        continue;
                    }
                    let base = y * nd;
                    for dir in 0..nd {
                        let t = nbr[base + dir] as usize;
                        if t < n {
                            o[t] -= wts[base + dir] * gy;
                        }
                    }
                }
            };
            let mut b = vec![0.0; n];
            b[0] = 1.0;
            let gs = &mut g[..n];
            if symmetric {
                conjugate_gradient(apply, &b, gs, self.tol, DEFAULT_MAX_ITER)?;
            } else {
                bicgstab(apply, &b, gs, self.tol, DEFAULT_MAX_ITER)?;
            }
            let mut mean_time = 0.0;
            let mut touched: Vec<u32> = Vec::new();
            for y in 0..n {
                if outside[y] {
                    continue;
                }
                let gy = gs[y];
                mean_time += gy;
                for dir in 0..nd {
                    let t = table.neighbor(y, dir);
                    debug_assert!(t != NO_NEIGHBOR);
                    let tu = t as usize;
                    if tu >= n || outside[tu] {
                        if acc[tu] == 0.0 {
                            touched.push(t);
                        }
                        acc[tu] += gy * full[y * nd + dir];
                    }
                }
            }
            touched.sort_unstable();
            touched.dedup();
            let exits = touched
                .iter()
                .map(|&t| {
                    let v = acc[t as usize];
                    acc[t as usize] = 0.0;
                    (t, v)
                })
                .filter(|&(_, v)| v != 0.0)
                .collect();
            out.push(Arc::new(SetExit { exits, mean_time }));
        }
        Ok(out)
    }

    /// `Σ_k w_k` of the per-set exit data.
    pub fn combine(&self, pieces: &[Piece], sets: &[Arc<SetExit>]) -> SetExit {
        let mut acc: HashMap<u32, f64> = HashMap::new();
        let mut mean_time = 0.0;
        for (p, s) in pieces.iter().zip(sets) {
            mean_time += p.weight * s.mean_time;
            for &(j, v) in &s.exits {
                *acc.entry(j).or_insert(0.0) += p.weight * v;
            }
        }
        let mut exits: Vec<(u32, f64)> = acc.into_iter().collect();
        exits.sort_unstable_by_key(|e| e.0);
        SetExit { exits, mean_time }
    }

    /// Coarse row at `x`: the piece-weighted exit measure and mean exit time.
    pub fn coarse_row(
        &self,
        weights: &WeightLookup,
        x: &Site,
        pieces: &[Piece],
        outer: Option<(&Site, i64)>,
    ) -> Result<SetExit> {
        let r2s: Vec<i64> = pieces.iter().map(|p| p.r2).collect();
        let sets = self.solve_sets(weights, x, &r2s, outer)?;
        Ok(self.combine(pieces, &sets))
    }

    /// Converts offset-indexed exits to absolute sites.
    pub fn to_sites(&self, x: &Site, exits: &[(u32, f64)]) -> Vec<(Site, f64)> {
        exits
            .iter()
            .map(|&(j, v)| (x.add(&self.table.offset(j as usize)), v))
            .collect()
    }
}

/// The sojourn functional on `V_L`; zero outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SojournField {
    pub sites: Vec<Site>,
    pub values: Vec<f64>,
    /// Per-entry standard errors when the values are Monte Carlo estimates.
    pub stderr: Option<Vec<f64>>,
}

impl SojournField {
    pub fn get(&self, y: &Site) -> f64 {
        self.sites
            .binary_search(y)
            .map(|i| self.values[i])
            .unwrap_or(0.0)
    }

    /// CSV with columns `x1..xd,value[,stderr]`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let d = self.sites.first().map_or(0, |s| s.dim());
        let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        header.push("value".into());
        if self.stderr.is_some() {
            header.push("stderr".into());
        }
        writeln!(w, "{}", header.join(","))?;
        for (i, s) in self.sites.iter().enumerate() {
            let xs: Vec<String> = s.coords().iter().map(|c| c.to_string()).collect();
            match &self.stderr {
                Some(se) => writeln!(w, "{},{:.16e},{:.16e}", xs.join(","), self.values[i], se[i])?,
                None => writeln!(w, "{},{:.16e}", xs.join(","), self.values[i])?,
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// The coarse chain on `V_L`: `Π̂_L` restricted to the ball, its exit block,
/// `Λ_L` and `h_L` per interior site.
pub struct CoarseKernel {
    scheme: CoarseScheme,
    chain: AbsorbingChain,
    lambda: Vec<f64>,
    radii: Vec<f64>,
}

impl std::fmt::Debug for CoarseKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoarseKernel")
            .field("radius", &self.scheme.radius)
            .field("sites", &self.chain.len())
            .field("nnz", &self.nnz())
            .finish()
    }
}

/// Dense site index over the cube around a ball.
struct CubeIndex {
    lo: Site,
    side: i64,
    d: usize,
    idx: Vec<u32>,
}

impl CubeIndex {
    fn new(sites: &[Site], center: &Site, r: i32) -> Self {
        let d = center.dim();
        let side = 2 * r as i64 + 1;
        let lo = center.sub(&Site::new(&vec![r; d]));
        let mut out = Self {
            lo,
            side,
            d,
            idx: vec![u32::MAX; (side as usize).pow(d as u32)],
        };
        for (i, s) in sites.iter().enumerate() {
            let k = out.key(s).expect("site inside cube");
            out.idx[k] = i as u32;
        }
        out
    }

    #[inline]
    fn key(&self, x: &Site) -> Option<usize> {
        let mut k: i64 = 0;
        for i in 0..self.d {
            let c = (x.get(i) - self.lo.get(i)) as i64;
            if c < 0 || c >= self.side {
                return None;
            }
            k = k * self.side + c;
        }
        Some(k as usize)
    }

    #[inline]
    fn get(&self, x: &Site) -> Option<u32> {
        self.key(x).map(|k| self.idx[k]).filter(|&v| v != u32::MAX)
    }
}

type RowParts = (Vec<(u32, f64)>, Vec<(Site, f64)>, f64, f64);

impl CoarseKernel {
    pub fn scheme(&self) -> &CoarseScheme {
        &self.scheme
    }

    pub fn chain(&self) -> &AbsorbingChain {
        &self.chain
    }

    /// Interior sites of `V_L`, sorted.
    pub fn interior(&self) -> &[Site] {
        self.chain.interior()
    }

    /// `Λ_L` on the interior, aligned with `interior()`.
    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// `h_L` on the interior.
    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn nnz(&self) -> usize {
        self.chain.inner().nnz() + self.chain.exit_block().nnz()
    }

    pub fn index_of(&self, x: &Site) -> Option<usize> {
        self.chain.index_of(x)
    }

    /// `Π̂_L(x, ·)`; `δ_x` for `x` outside `V_L`.
    pub fn row(&self, x: &Site) -> Vec<(Site, f64)> {
        let Some(i) = self.index_of(x) else {
            return vec![(*x, 1.0)];
        };
        let mut out = Vec::new();
        let (idx, val) = self.chain.inner().row(i);
        for (j, v) in idx.iter().zip(val) {
            out.push((self.chain.interior()[*j as usize], *v));
        }
        let (idx, val) = self.chain.exit_block().row(i);
        for (j, v) in idx.iter().zip(val) {
            out.push((self.chain.exits()[*j as usize], *v));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn sojourn_field(&self) -> SojournField {
        SojournField {
            sites: self.interior().to_vec(),
            values: self.lambda.clone(),
            stderr: None,
        }
    }

    /// `Ĝ_L f` on the interior.
    pub fn green_apply(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.chain.solve(f)
    }

    /// `Ĝ_L(x, ·)` on the interior.
    pub fn green_row(&self, x: &Site) -> Result<Vec<f64>> {
        let i = self.index_of(x).ok_or_else(|| RwreError::OutsideBall {
            site: x.to_string(),
            radius: self.scheme.radius,
        })?;
        self.chain.green_row(i)
    }

    /// The kernel as a table over the interior of `V_L`.
    pub fn to_kernel_table(&self) -> KernelTable {
        let rows = self.interior().iter().map(|x| self.row(x)).collect();
        KernelTable::from_rows(KernelKind::Coarse, self.interior().to_vec(), rows)
    }

    /// `max_x |Σ_y Π̂_L(x, y) - 1|`.
    pub fn max_row_sum_error(&self) -> f64 {
        let a = self.chain.inner().row_sums();
        let b = self.chain.exit_block().row_sums();
        a.iter()
            .zip(&b)
            .map(|(u, v)| (u + v - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Coarse row `Π̂_L(x, ·)` and `Λ_L(x)` for one site; `(δ_x, 0)` outside `V_L`.
pub fn coarse_kernel_row<S: TransitionSource + ?Sized>(
    source: &S,
    scheme: &CoarseScheme,
    x: &Site,
) -> Result<(Vec<(Site, f64)>, f64)> {
    if !scheme.contains(x) {
        return Ok((vec![(*x, 1.0)], 0.0));
    }
    let h = scheme.h_at(x)?;
    let pieces = scheme.pieces(h);
    let solver = LocalSolver::new(scheme.dim(), 2.0 * h);
    let reach = (2.0 * h).ceil() as i32 + 2;
    let weights = WeightLookup::new(source, x, reach)?;
    let row = solver.coarse_row(&weights, x, &pieces, Some((&scheme.center, scheme.r2)))?;
    Ok((solver.to_sites(x, &row.exits), row.mean_time))
}

/// Builds `Π̂_L` and `Λ_L` on all of `V_L`. Rows are computed in parallel.
pub fn build_coarse<S: TransitionSource + ?Sized>(
    source: &S,
    scheme: &CoarseScheme,
) -> Result<CoarseKernel> {
    build_coarse_with(source, scheme, LOCAL_TOL)
}

/// As [`build_coarse`] with an explicit local solver tolerance.
pub fn build_coarse_with<S: TransitionSource + ?Sized>(
    source: &S,
    scheme: &CoarseScheme,
    tol: f64,
) -> Result<CoarseKernel> {
    let ball = Ball::new(scheme.center, scheme.radius)?;
    let interior = ball.interior().to_vec();
    let h_max = scheme.max_h();
    let solver = LocalSolver::new(scheme.dim(), 2.0 * h_max).with_tolerance(tol);
    let cube_r = scheme.radius.floor() as i32;
    let reach = cube_r + (2.0 * h_max).ceil() as i32 + 2;
    let weights = WeightLookup::new(source, &scheme.center, reach)?;
    let index = CubeIndex::new(&interior, &scheme.center, cube_r);
    let outer = Some((&scheme.center, scheme.r2));
    let parts: Vec<RowParts> = interior
        .par_iter()
        .map(|x| {
            let h = scheme.h_at(x)?;
            let pieces = scheme.pieces(h);
            let row = solver.coarse_row(&weights, x, &pieces, outer)?;
            let mut inner = Vec::with_capacity(row.exits.len());
            let mut exits = Vec::new();
            for &(j, v) in &row.exits {
                let y = x.add(&solver.table.offset(j as usize));
                match index.get(&y) {
                    Some(k) => inner.push((k, v)),
                    None => exits.push((y, v)),
                }
            }
            inner.sort_unstable_by_key(|e| e.0);
            Ok((inner, exits, row.mean_time, h))
        })
        .collect::<Result<_>>()?;
    let mut exit_sites: Vec<Site> = parts.iter().flat_map(|p| p.1.iter().map(|e| e.0)).collect();
    exit_sites.sort();
    exit_sites.dedup();
    let n = interior.len();
    let mut inner_rows = Vec::with_capacity(n);
    let mut exit_rows = Vec::with_capacity(n);
    let mut lambda = Vec::with_capacity(n);
    let mut radii = Vec::with_capacity(n);
    for (inner, exits, lam, h) in parts {
        inner_rows.push(inner);
        exit_rows.push(
            exits
                .into_iter()
                .map(|(y, v)| (exit_sites.binary_search(&y).expect("exit listed") as u32, v))
                .collect(),
        );
        lambda.push(lam);
        radii.push(h);
    }
    let inner = CsrMatrix::from_rows(n, inner_rows);
    let exit = CsrMatrix::from_rows(exit_sites.len(), exit_rows);
    let chain = AbsorbingChain::from_blocks(interior, exit_sites, inner, exit, false)?;
    Ok(CoarseKernel {
        scheme: scheme.clone(),
        chain,
        lambda,
        radii,
    })
}

/// `Λ_L` (or `λ_L^(p)` for a homogeneous source) on `V_L`.
pub fn sojourn_field<S: TransitionSource + ?Sized>(
    source: &S,
    scheme: &CoarseScheme,
) -> Result<SojournField> {
    let ball = Ball::new(scheme.center, scheme.radius)?;
    let h_max = scheme.max_h();
    let solver = LocalSolver::new(scheme.dim(), 2.0 * h_max);
    let reach = scheme.radius.floor() as i32 + (2.0 * h_max).ceil() as i32 + 2;
    let weights = WeightLookup::new(source, &scheme.center, reach)?;
    let outer = Some((&scheme.center, scheme.r2));
    let values = ball
        .interior()
        .par_iter()
        .map(|x| {
            let pieces = scheme.pieces(scheme.h_at(x)?);
            let r2s: Vec<i64> = pieces.iter().map(|p| p.r2).collect();
            let sets = solver.solve_sets(&weights, x, &r2s, outer)?;
            Ok(pieces
                .iter()
                .zip(&sets)
                .map(|(p, s)| p.weight * s.mean_time)
                .sum())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(SojournField {
        sites: ball.interior().to_vec(),
        values,
        stderr: None,
    })
}

/// Green's function of the coarse chain as a dense table. Intended for small
/// balls; larger ones should use [`CoarseKernel::green_apply`].
pub fn coarse_green(kernel: &CoarseKernel) -> Result<GreenTable> {
    green_on_chain(kernel.chain())
}

/// Both sides of `E_x[τ_L] = Ĝ_L Λ_L(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub exact: f64,
    pub coarse: f64,
    pub relative_residual: f64,
}

/// `E_x[τ_L]` for every interior site from the one-step chain.
pub fn exact_exit_times<S: TransitionSource + ?Sized>(
    source: &S,
    scheme: &CoarseScheme,
) -> Result<Vec<f64>> {
    let ball = Ball::new(scheme.center, scheme.radius)?;
    AbsorbingChain::on_ball(source, &ball)?
        .with_tolerance(1e-13)
        .mean_exit_times()
}

/// Compares `Ĝ_L Λ_L` with exact one-step exit times at every interior site.
pub fn decomposition_residuals(
    kernel: &CoarseKernel,
    exact: &[f64],
) -> Result<Vec<DecompositionReport>> {
    if exact.len() != kernel.lambda.len() {
        return Err(RwreError::ShapeMismatch(
            "exit-time vector does not match the ball".into(),
        ));
    }
    let coarse = kernel.green_apply(&kernel.lambda)?;
    Ok(exact
        .iter()
        .zip(&coarse)
        .map(|(&e, &c)| DecompositionReport {
            exact: e,
            coarse: c,
            relative_residual: (e - c).abs() / e,
        })
        .collect())
}

/// Relative residual of the sojourn decomposition at `x`.
pub fn sojourn_decomposition_check<S: TransitionSource + ?Sized>(
    source: &S,
    scheme: &CoarseScheme,
    x: &Site,
) -> Result<DecompositionReport> {
    let kernel = build_coarse(source, scheme)?;
    let i = kernel.index_of(x).ok_or_else(|| RwreError::OutsideBall {
        site: x.to_string(),
        radius: scheme.radius,
    })?;
    let exact = exact_exit_times(source, scheme)?;
    Ok(decomposition_residuals(&kernel, &exact)?[i])
}

/// `d/(1 - 2εd) (2h + 1)²`, an upper bound for `Λ_L(x)` when `h_L(x) = h`
/// in environments balanced in the first coordinate.
pub fn lambda_bound(d: usize, epsilon: f64, h: f64) -> f64 {
    d as f64 / (1.0 - 2.0 * epsilon * d as f64) * (2.0 * h + 1.0).powi(2)
}

/// Monte Carlo visit counts of the randomized-stopping walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitEstimate {
    pub sites: Vec<Site>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Mean and standard error of the number of coarse steps.
    pub steps_mean: f64,
    pub steps_stderr: f64,
    pub n_reps: usize,
}

impl VisitEstimate {
    pub fn get(&self, y: &Site) -> (f64, f64) {
        match self.sites.binary_search(y) {
            Ok(i) => (self.mean[i], self.stderr[i]),
            Err(_) => (0.0, 0.0),
        }
    }
}

/// Runs the walk from `x`, stopping it at the exit of `V_{ξ h_L(y)}(y) ∩ V_L`
/// with fresh `ξ ~ φ` at each coarse position `y`, and counts coarse visits.
/// The expected counts are `Ĝ_L(x, ·)`.
pub fn simulate_coarse_visits<S: TransitionSource + ?Sized>(
    source: &S,
    scheme: &CoarseScheme,
    epsilon: f64,
    x: &Site,
    n_reps: usize,
    opts: &ReplicaOptions,
) -> Result<VisitEstimate> {
    if !scheme.contains(x) {
        return Err(RwreError::OutsideBall {
            site: x.to_string(),
            radius: scheme.radius,
        });
    }
    let cap = opts
        .step_cap
        .unwrap_or_else(|| default_step_cap(scheme.dim(), epsilon, scheme.radius));
    let phi = density();
    let runs: Vec<HashMap<Site, u32>> = (0..n_reps as u64)
        .into_par_iter()
        .map(|rep| {
            let mut stream = WalkStream::salted(opts.master_seed, opts.salt, rep);
            let mut visits: HashMap<Site, u32> = HashMap::new();
            let mut y = *x;
            let mut steps = 0u64;
            while scheme.contains(&y) {
                *visits.entry(y).or_insert(0) += 1;
                let t = phi.sample(stream.uniform()) * scheme.h_at(&y)?;
                let r2 = radius_to_r2(t);
                let mut z = y;
                loop {
                    z = step(source, &z, &mut stream);
                    steps += 1;
                    if steps > cap {
                        return Err(RwreError::CapExceeded {
                            censored: 1,
                            total: 1,
                            cap,
                        });
                    }
                    if z.dist2(&y) > r2 || !scheme.contains(&z) {
                        break;
                    }
                }
                y = z;
            }
            Ok(visits)
        })
        .collect::<Result<_>>()?;
    let mut sites: Vec<Site> = runs.iter().flat_map(|m| m.keys().copied()).collect();
    sites.sort();
    sites.dedup();
    let n = n_reps as f64;
    let mut sum = vec![0.0; sites.len()];
    let mut sum2 = vec![0.0; sites.len()];
    let mut steps = Vec::with_capacity(n_reps);
    for m in &runs {
        let mut total = 0.0;
        for (s, &c) in m {
            let i = sites.binary_search(s).expect("site listed");
            sum[i] += c as f64;
            sum2[i] += (c as f64).powi(2);
            total += c as f64;
        }
        steps.push(total);
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let stderr = mean
        .iter()
        .zip(&sum2)
        .map(|(m, s2)| ((s2 / n - m * m).max(0.0) / (n - 1.0).max(1.0)).sqrt())
        .collect();
    let est = crate::stats::MeanEstimate::from_samples(&steps);
    Ok(VisitEstimate {
        sites,
        mean,
        stderr,
        steps_mean: est.mean,
        steps_stderr: est.stderr,
        n_reps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{Environment, EnvironmentSpec, Family};

    fn srw() -> SiteDistribution {
        SiteDistribution::uniform(3)
    }

    fn quenched(eps: f64, seed: u64) -> Environment {
        Environment::new(EnvironmentSpec::new(3, eps, Family::PairUniform, seed).unwrap()).unwrap()
    }

    /// Adaptive Simpson, independent of the Gauss–Legendre code.
    fn simpson<F: Fn(f64) -> f64 + Copy>(f: F, a: f64, b: f64, tol: f64) -> f64 {
        fn rec<F: Fn(f64) -> f64 + Copy>(
            f: F,
            a: f64,
            b: f64,
            fa: f64,
            fm: f64,
            fb: f64,
            whole: f64,
            tol: f64,
            depth: u32,
        ) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        rec(
            f,
            a,
            b,
            fa,
            fm,
            fb,
            (b - a) / 6.0 * (fa + 4.0 * fm + fb),
            tol,
            50,
        )
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(16);
        let s: f64 = w.iter().sum();
        assert!((s - 2.0).abs() < 1e-14);
        let m30: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(30)).sum();
        assert!((m30 - 2.0 / 31.0).abs() < 1e-14);
    }

    #[test]
    fn density_support_and_normalization() {
        let phi = density();
        assert_eq!(phi.eval(1.0), 0.0);
        assert_eq!(phi.eval(2.0), 0.0);
        assert_eq!(phi.eval(0.5), 0.0);
        for k in 0..=98 {
            assert!(phi.eval(1.01 + k as f64 * 0.01) > 0.0);
        }
        let z = simpson(bump, 1.0, 2.0, 1e-15);
        assert!((phi.normalizer() - z).abs() / z < 1e-10);
        assert!((simpson(|t| phi.eval(t), 1.0, 2.0, 1e-15) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn c_phi_matches_adaptive_oracle() {
        let phi = density();
        let oracle = simpson(|t| t * t * bump(t), 1.0, 2.0, 1e-15) / simpson(bump, 1.0, 2.0, 1e-15);
        assert!((phi.c_phi() - oracle).abs() < 1e-10);
        // Frozen from the oracle above.
        assert!(
            (phi.c_phi() - 2.269_124_230_013_873).abs() < 1e-10,
            "{}",
            phi.c_phi()
        );
        assert!(phi.c_phi() > 1.0 && phi.c_phi() < 4.0);
    }

    #[test]
    fn sampler_reproduces_density_moments() {
        let phi = density();
        let n = 200_000;
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for i in 0..n {
            let t = phi.sample((i as f64 + 0.5) / n as f64);
            assert!(t > 1.0 && t < 2.0);
            s1 += t;
            s2 += t * t;
        }
        assert!((s1 / n as f64 - 1.5).abs() < 1e-6);
        assert!((s2 / n as f64 - phi.c_phi()).abs() < 1e-6);
    }

    #[test]
    fn profile_branches() {
        assert_eq!(profile(0.0), 0.0);
        assert_eq!(profile(0.25), 0.25);
        assert!((profile(0.5) - 0.5).abs() < 1e-15);
        assert!((profile(2.0) - 1.0).abs() < 1e-15);
        assert_eq!(profile(7.0), 1.0);
    }

    #[test]
    fn h_l_examples() {
        let scheme = CoarseScheme::new(3, 16.0, ScaleParams::DESK).unwrap();
        let (s, r) = (scheme.s_l(), scheme.r_l());
        assert!((scheme.h_from_distance(2.0 * s) - s).abs() < 1e-14);
        assert!((scheme.h_from_distance(0.0) - r).abs() < 1e-14);
        assert!((scheme.h_from_distance(s / 4.0) - (s / 4.0).max(r)).abs() < 1e-14);
        assert!((scheme.h_at(&Site::origin(3)).unwrap() - s).abs() < 1e-14);
        assert!(scheme.h_at(&Site::new(&[17, 0, 0])).is_err());
        let flat = scheme.clone().with_profile(Profile::Constant);
        assert_eq!(flat.h_from_distance(0.0), s);
    }

    #[test]
    fn scale_guard_rejects_degenerate_radii() {
        assert!(matches!(
            CoarseScheme::new(3, 16.0, ScaleParams::ASYMPTOTIC),
            Err(RwreError::ScaleGuard(_))
        ));
        assert!(CoarseScheme::new(3, 1.0, ScaleParams::DESK).is_err());
        for l in [2.0, 5.0, 8.0, 12.0, 32.0, 100.0] {
            let sc = CoarseScheme::new(3, l, ScaleParams::DESK).unwrap();
            assert!(sc.r_l() >= MIN_RADIUS);
        }
    }

    #[test]
    fn sums_of_squares_match_enumeration() {
        for d in 1..=4 {
            let table = SortedOffsets::new(d, 200);
            for n in 0..=200 {
                let hit = (0..table.len()).any(|j| table.norm2(j) == n);
                assert_eq!(is_sum_of_squares(d, n), hit, "d={d} n={n}");
            }
        }
    }

    #[test]
    fn pieces_partition_the_radius_window() {
        for h in [2.0, 2.3, 3.0, 3.47, 4.9] {
            let ps = pieces_for(3, h, 32);
            let total: f64 = ps.iter().map(|p| p.weight).sum();
            assert!((total - 1.0).abs() < 1e-14);
            assert!(ps[0].r2 as f64 <= h * h);
            assert!(ps.windows(2).all(|w| w[0].r2 < w[1].r2));
            assert!((ps.last().unwrap().r2 as f64) < 4.0 * h * h);
            assert!(ps
                .iter()
                .all(|p| p.weight >= 0.0 && is_sum_of_squares(3, p.r2)));
        }
    }

    #[test]
    fn single_set_reproduces_unit_ball_oracle() {
        let solver = LocalSolver::new(3, 3.0);
        let w = WeightLookup::Homogeneous(srw());
        let sets = solver.solve_sets(&w, &Site::origin(3), &[1], None).unwrap();
        assert!((sets[0].mean_time - 2.4).abs() < 1e-12);
        let total: f64 = sets[0].exits.iter().map(|e| e.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(sets[0].exits.len(), 18);
    }

    #[test]
    fn local_solver_matches_exact_solver_quenched() {
        let env = quenched(0.05, 3);
        let x = Site::new(&[1, -2, 0]);
        let solver = LocalSolver::new(3, 5.0);
        let w = WeightLookup::new(&env, &x, 8).unwrap();
        let outer_c = Site::origin(3);
        let sets = solver
            .solve_sets(&w, &x, &[4, 9, 13], Some((&outer_c, 16)))
            .unwrap();
        for (k, &r2) in [4i64, 9, 13].iter().enumerate() {
            let sites: Vec<Site> = Ball::new(x, (r2 as f64).sqrt())
                .unwrap()
                .interior()
                .iter()
                .copied()
                .filter(|y| y.norm2() <= 16)
                .collect();
            let kernel = KernelTable::one_step(&env, &sites);
            let chain = AbsorbingChain::from_kernel(&kernel, &sites).unwrap();
            let xi = chain.index_of(&x).unwrap();
            let tau = chain.mean_exit_times().unwrap()[xi];
            assert!((sets[k].mean_time - tau).abs() < 1e-9 * tau);
            let g = chain.green_row(xi).unwrap();
            let pi = chain.exit_from_green_row(&g);
            for (z, p) in chain.exits().iter().zip(&pi) {
                let j = solver.table().index_of(&z.sub(&x)).unwrap() as u32;
                let got = sets[k].exits.iter().find(|e| e.0 == j).map_or(0.0, |e| e.1);
                assert!((got - p).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn coarse_row_outside_is_delta() {
        let scheme = CoarseScheme::new(3, 6.0, ScaleParams::DESK).unwrap();
        let z = Site::new(&[7, 0, 0]);
        let (row, lam) = coarse_kernel_row(&srw(), &scheme, &z).unwrap();
        assert_eq!(row, vec![(z, 1.0)]);
        assert_eq!(lam, 0.0);
    }

    #[test]
    fn srw_coarse_row_is_reflection_symmetric_and_supported() {
        let scheme = CoarseScheme::new(3, 16.0, ScaleParams::DESK).unwrap();
        let x = Site::new(&[1, 0, 2]);
        let h = scheme.h_at(&x).unwrap();
        let (row, lam) = coarse_kernel_row(&srw(), &scheme, &x).unwrap();
        let total: f64 = row.iter().map(|e| e.1).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(lam >= h * h && lam <= (2.0 * h + 1.0).powi(2));
        let get = |y: &Site| row.iter().find(|e| e.0 == *y).map_or(0.0, |e| e.1);
        for (y, p) in &row {
            assert!(((y.dist2(&x) as f64).sqrt()) <= 2.0 * h + 1.0);
            for axis in 0..3 {
                let rel = y.sub(&x).reflect(axis);
                assert!((get(&x.add(&rel)) - p).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn quadrature_refinement_is_stable() {
        let env = quenched(0.05, 11);
        let base = CoarseScheme::new(3, 12.0, ScaleParams::DESK).unwrap();
        for x in [
            Site::origin(3),
            Site::new(&[9, 3, 1]),
            Site::new(&[0, 0, 12]),
        ] {
            let (a, la) = coarse_kernel_row(&env, &base.clone().with_nodes(16), &x).unwrap();
            let (b, lb) = coarse_kernel_row(&env, &base.clone().with_nodes(32), &x).unwrap();
            assert_eq!(a.len(), b.len());
            let tv: f64 = a.iter().zip(&b).map(|(u, v)| (u.1 - v.1).abs()).sum();
            assert!(tv < 1e-8, "tv {tv}");
            assert!((la - lb).abs() < 1e-8 * la);
        }
    }

    #[test]
    fn decomposition_holds_on_small_balls() {
        let scheme = CoarseScheme::new(3, 8.0, ScaleParams::DESK).unwrap();
        for source in [None, Some(quenched(0.05, 2))] {
            let kernel = match &source {
                None => build_coarse(&srw(), &scheme).unwrap(),
                Some(env) => build_coarse(env, &scheme).unwrap(),
            };
            assert!(kernel.max_row_sum_error() < 1e-9);
            assert!(kernel.lambda().iter().all(|&l| l >= 1.0));
            let exact = match &source {
                None => exact_exit_times(&srw(), &scheme).unwrap(),
                Some(env) => exact_exit_times(env, &scheme).unwrap(),
            };
            let rep = decomposition_residuals(&kernel, &exact).unwrap();
            let worst = rep.iter().map(|r| r.relative_residual).fold(0.0, f64::max);
            assert!(worst < 1e-6, "worst {worst}");
        }
    }

    #[test]
    fn lambda_respects_balanced_bound() {
        let eps = 0.05;
        let env = quenched(eps, 5);
        let scheme = CoarseScheme::new(3, 8.0, ScaleParams::DESK).unwrap();
        let field = sojourn_field(&env, &scheme).unwrap();
        for (x, &v) in field.sites.iter().zip(&field.values) {
            let h = scheme.h_at(x).unwrap();
            assert!(v >= 1.0 && v <= lambda_bound(3, eps, h));
        }
        assert_eq!(field.get(&Site::new(&[9, 0, 0])), 0.0);
    }

    #[test]
    fn coarse_green_is_nonnegative_with_unit_diagonal_floor() {
        let scheme = CoarseScheme::new(3, 5.0, ScaleParams::DESK).unwrap();
        let kernel = build_coarse(&srw(), &scheme).unwrap();
        let g = coarse_green(&kernel).unwrap();
        let n = g.n();
        for i in 0..n {
            assert!(g.inner(i, i) >= 1.0 - 1e-12);
            for j in 0..n {
                assert!(g.inner(i, j) >= -1e-12);
            }
        }
        let sums: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| g.inner(i, j) * kernel.lambda()[j]).sum())
            .collect();
        let exact = exact_exit_times(&srw(), &scheme).unwrap();
        for (a, b) in sums.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-8 * b);
        }
    }

    #[test]
    fn randomized_stopping_reproduces_coarse_green() {
        let scheme = CoarseScheme::new(3, 5.0, ScaleParams::DESK).unwrap();
        let kernel = build_coarse(&srw(), &scheme).unwrap();
        let x = Site::new(&[1, 0, 0]);
        let row = kernel.green_row(&x).unwrap();
        let est =
            simulate_coarse_visits(&srw(), &scheme, 0.0, &x, 40_000, &ReplicaOptions::new(17))
                .unwrap();
        let total: f64 = row.iter().sum();
        assert!(
            (est.steps_mean - total).abs() <= 4.0 * est.steps_stderr,
            "{} vs {total}",
            est.steps_mean
        );
        for y in [x, Site::origin(3), Site::new(&[-2, 1, 0])] {
            let g = row[kernel.index_of(&y).unwrap()];
            let (m, se) = est.get(&y);
            assert!((m - g).abs() <= 4.0 * se, "{y}: {m} ± {se} vs {g}");
        }
    }
}
