//! Green's function toolkit: resolvent identities and perturbation
//! expansions, the domination kernel `Γ_L`, the free-space coarse Green's
//! function and the strong Markov identity on balls.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::coarse_grain::{
    pieces_for, CoarseKernel, LocalSolver, ScaleParams, WeightLookup, DEFAULT_NODES,
};
use crate::environment::{SiteDistribution, TransitionSource};
use crate::error::{Result, RwreError};
use crate::exact_solver::{AbsorbingChain, GreenTable, KernelTable};
use crate::lattice::{for_each_in_cube, radius_to_r2, Ball, Site};
use crate::linalg::CsrMatrix;
use crate::stats::linear_fit;

/// `Δ = 1_V (P - p)` on a site set `V`, together with the reference kernel
/// `p` on the targets of `Δ` (needed by the third expansion).
#[derive(Debug, Clone)]
pub struct DeltaKernel {
    interior: Vec<Site>,
    rows: Vec<Vec<(Site, f64)>>,
    reference: HashMap<Site, Vec<(Site, f64)>>,
}

impl DeltaKernel {
    /// `Δ` from two kernel tables on the sorted set `interior`. `small` must
    /// also cover every target of `Δ`.
    pub fn new(big: &KernelTable, small: &KernelTable, interior: &[Site]) -> Result<Self> {
        let mut rows = Vec::with_capacity(interior.len());
        for x in interior {
            let a = big
                .row(x)
                .ok_or_else(|| RwreError::ShapeMismatch(format!("{x} missing from the kernel")))?;
            let b = small.row(x).ok_or_else(|| {
                RwreError::ShapeMismatch(format!("{x} missing from the reference"))
            })?;
            let mut acc: HashMap<Site, f64> = HashMap::new();
            for (y, w) in a {
                *acc.entry(y).or_insert(0.0) += w;
            }
            for (y, w) in b {
                *acc.entry(y).or_insert(0.0) -= w;
            }
            let mut row: Vec<(Site, f64)> = acc.into_iter().filter(|e| e.1 != 0.0).collect();
            row.sort_by(|u, v| u.0.cmp(&v.0));
            rows.push(row);
        }
        let mut reference = HashMap::new();
        let mut targets: Vec<Site> = interior.to_vec();
        targets.extend(rows.iter().flatten().map(|e| e.0));
        targets.sort();
        targets.dedup();
        for y in targets {
            if let Some(r) = small.row(&y) {
                reference.insert(y, r);
            }
        }
        Ok(Self {
            interior: interior.to_vec(),
            rows,
            reference,
        })
    }

    /// `Δ` between the one-step kernels of two sources on `ball`.
    pub fn from_sources<P, Q>(big: &P, small: &Q, ball: &Ball) -> Result<Self>
    where
        P: TransitionSource + ?Sized,
        Q: TransitionSource + ?Sized,
    {
        let mut cover: Vec<Site> = ball.interior().to_vec();
        cover.extend_from_slice(ball.boundary());
        cover.sort();
        let kb = KernelTable::one_step(big, ball.interior());
        let ks = KernelTable::one_step(small, &cover);
        Self::new(&kb, &ks, ball.interior())
    }

    pub fn interior(&self) -> &[Site] {
        &self.interior
    }

    /// Row of `Δ` at the `i`-th interior site.
    pub fn row(&self, i: usize) -> &[(Site, f64)] {
        &self.rows[i]
    }

    /// `max_x |Σ_y Δ(x, y)|`.
    pub fn max_row_sum(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.iter().map(|e| e.1).sum::<f64>().abs())
            .fold(0.0, f64::max)
    }

    /// `max_x Σ_y |Δ(x, y)|`.
    pub fn norm_l1(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.iter().map(|e| e.1.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.rows.iter().all(|r| r.is_empty())
    }
}

/// Columns ordered as the interior `V` first, then the other sites sorted.
struct Columns {
    sites: Vec<Site>,
    index: HashMap<Site, usize>,
    n_inner: usize,
}

impl Columns {
    fn new(interior: &[Site], extra: impl IntoIterator<Item = Site>) -> Self {
        let inner: std::collections::HashSet<Site> = interior.iter().copied().collect();
        let mut rest: Vec<Site> = extra.into_iter().filter(|s| !inner.contains(s)).collect();
        rest.sort();
        rest.dedup();
        let mut sites = interior.to_vec();
        sites.extend(rest);
        let index = sites.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        Self {
            sites,
            index,
            n_inner: interior.len(),
        }
    }

    fn len(&self) -> usize {
        self.sites.len()
    }

    fn get(&self, s: &Site) -> Option<usize> {
        self.index.get(s).copied()
    }
}

/// A Green table as a dense `V x cols` matrix; sites outside its support are 0.
fn dense_green(g: &GreenTable, cols: &Columns) -> DMatrix<f64> {
    let n = g.n();
    let mut m = DMatrix::zeros(n, cols.len());
    for (c, y) in cols.sites.iter().enumerate() {
        if let Ok(j) = g.interior().binary_search(y) {
            for i in 0..n {
                m[(i, c)] = g.inner(i, j);
            }
        } else if let Ok(k) = g.exits().binary_search(y) {
            for i in 0..n {
                m[(i, c)] = g.exit_entry(i, k);
            }
        }
    }
    m
}

/// `Δ F` where `F` has rows `V` given by `f` and identity rows elsewhere.
fn delta_times(delta: &DeltaKernel, cols: &Columns, f: &DMatrix<f64>) -> DMatrix<f64> {
    let n = delta.interior.len();
    let mut out = DMatrix::zeros(n, f.ncols());
    for (u, row) in delta.rows.iter().enumerate() {
        for (w, dv) in row {
            let c = cols.get(w).expect("delta target in columns");
            if c < cols.n_inner {
                for k in 0..f.ncols() {
                    out[(u, k)] += dv * f[(c, k)];
                }
            } else {
                out[(u, c)] += dv;
            }
        }
    }
    out
}

/// `Δ` as a dense `V x cols` matrix.
fn delta_dense(delta: &DeltaKernel, cols: &Columns) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(delta.interior.len(), cols.len());
    for (u, row) in delta.rows.iter().enumerate() {
        for (w, dv) in row {
            out[(u, cols.get(w).expect("delta target in columns"))] += dv;
        }
    }
    out
}

/// `Δ F` where `F` has rows `V` and vanishes elsewhere.
fn delta_inner_times(delta: &DeltaKernel, cols: &Columns, f: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(delta.interior.len(), f.ncols());
    for (u, row) in delta.rows.iter().enumerate() {
        for (w, dv) in row {
            let c = cols.get(w).expect("delta target in columns");
            if c < cols.n_inner {
                for k in 0..f.ncols() {
                    out[(u, k)] += dv * f[(c, k)];
                }
            }
        }
    }
    out
}

/// `F Δ` for `F` with rows `V`: column `w` collects `Σ_u F(x, u) Δ(u, w)`.
fn times_delta(f: &DMatrix<f64>, delta: &DeltaKernel, cols: &Columns) -> DMatrix<f64> {
    let n = f.nrows();
    let mut out = DMatrix::zeros(n, cols.len());
    for (u, row) in delta.rows.iter().enumerate() {
        for (w, dv) in row {
            let c = cols.get(w).expect("delta target in columns");
            for x in 0..n {
                out[(x, c)] += f[(x, u)] * dv;
            }
        }
    }
    out
}

/// Max-norm residuals of `G - g = gΔG = GΔg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolventReport {
    /// `max |G - g - gΔG|`
    pub left: f64,
    /// `max |G - g - GΔg|`
    pub right: f64,
    /// `max |gΔG - GΔg|`
    pub cross: f64,
}

fn check_shapes(g: &GreenTable, big: &GreenTable, delta: &DeltaKernel) -> Result<()> {
    if g.interior() != big.interior() || g.interior() != delta.interior() {
        return Err(RwreError::ShapeMismatch(
            "Green tables and Δ must share the same interior".into(),
        ));
    }
    Ok(())
}

fn columns_for(g: &GreenTable, big: &GreenTable, delta: &DeltaKernel) -> Columns {
    let extra = g
        .exits()
        .iter()
        .chain(big.exits())
        .copied()
        .chain(delta.rows.iter().flatten().map(|e| e.0))
        .collect::<Vec<_>>();
    Columns::new(g.interior(), extra)
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

/// Residuals of the resolvent identities for `g` (reference) and `G`.
pub fn resolvent_check(
    g: &GreenTable,
    big: &GreenTable,
    delta: &DeltaKernel,
) -> Result<ResolventReport> {
    check_shapes(g, big, delta)?;
    let cols = columns_for(g, big, delta);
    let n = cols.n_inner;
    let gd = dense_green(g, &cols);
    let bd = dense_green(big, &cols);
    let diff = &bd - &gd;
    let g_vv = gd.columns(0, n).into_owned();
    let b_vv = bd.columns(0, n).into_owned();
    let g_delta_big = &g_vv * delta_times(delta, &cols, &bd);
    let big_delta_g = &b_vv * delta_times(delta, &cols, &gd);
    Ok(ResolventReport {
        left: max_abs(&(&diff - &g_delta_big)),
        right: max_abs(&(&diff - &big_delta_g)),
        cross: max_abs(&(&g_delta_big - &big_delta_g)),
    })
}

/// Convergence record of one expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesReport {
    /// Max-norm error against the exact `G` after each order `0..=K`.
    pub errors: Vec<f64>,
    /// Max-norm of each term.
    pub term_norms: Vec<f64>,
    /// First order with error below `1e-8`.
    pub terms_needed: Option<usize>,
    pub final_error: f64,
}

/// Both expansions of `G` around `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    /// `G = g + Σ_{k≥1} (gΔ)^k g`.
    pub neumann: SeriesReport,
    /// `G = g Σ_m (Rg)^m Σ_k Δ^k` with `R = Σ_{k≥1} Δ^k p`.
    pub resummed: SeriesReport,
    /// Max-norm distance between the two final partial sums.
    pub agreement: f64,
}

const SERIES_TARGET: f64 = 1e-8;
const STALL_LIMIT: usize = 5;

/// Tracks term norms and flags a tail that stops decreasing.
struct StallGuard {
    best: f64,
    stalled: usize,
}

impl StallGuard {
    fn new() -> Self {
        Self {
            best: f64::INFINITY,
            stalled: 0,
        }
    }

    fn push(&mut self, norm: f64, order: usize) -> Result<()> {
        if norm < self.best {
            self.best = norm;
            self.stalled = 0;
        } else {
            self.stalled += 1;
            if self.stalled >= STALL_LIMIT {
                return Err(RwreError::NonConvergence { order });
            }
        }
        Ok(())
    }
}

fn finish(errors: Vec<f64>, term_norms: Vec<f64>) -> SeriesReport {
    let terms_needed = errors.iter().position(|&e| e < SERIES_TARGET);
    let final_error = *errors.last().unwrap_or(&f64::INFINITY);
    SeriesReport {
        errors,
        term_norms,
        terms_needed,
        final_error,
    }
}

/// Partial sums of both expansions up to order `k_max`, compared with the
/// exact `G`. Fails with `NonConvergence` when the terms stop shrinking for
/// five consecutive orders.
pub fn perturbation_series(
    g: &GreenTable,
    exact: &GreenTable,
    delta: &DeltaKernel,
    k_max: usize,
) -> Result<PerturbationReport> {
    if k_max == 0 {
        return Err(RwreError::InvalidArgument(
            "k_max must be at least 1".into(),
        ));
    }
    check_shapes(g, exact, delta)?;
    // Columns: V, then targets of Δ and both Green tables, then one more
    // layer reached by p from those targets.
    let base = columns_for(g, exact, delta);
    let mut extra: Vec<Site> = base.sites[base.n_inner..].to_vec();
    for s in &base.sites {
        if let Some(r) = delta.reference.get(s) {
            extra.extend(r.iter().map(|e| e.0));
        }
    }
    let cols = Columns::new(g.interior(), extra);
    let n = cols.n_inner;
    let gd = dense_green(g, &cols);
    let exact_d = dense_green(exact, &cols);
    let g_vv = gd.columns(0, n).into_owned();

    // First expansion.
    let g_delta = times_delta(&g_vv, delta, &cols);
    let m_vv = g_delta.columns(0, n).into_owned();
    let mut term = &m_vv * &gd;
    for c in n..cols.len() {
        for x in 0..n {
            term[(x, c)] += g_delta[(x, c)];
        }
    }
    let mut sum = gd.clone();
    let mut errors = vec![max_abs(&(&sum - &exact_d))];
    let mut norms = vec![max_abs(&gd)];
    let mut guard = StallGuard::new();
    for k in 1..=k_max {
        let tn = max_abs(&term);
        sum += &term;
        errors.push(max_abs(&(&sum - &exact_d)));
        norms.push(tn);
        if tn == 0.0 || tn < 1e-16 * norms[0] {
            break;
        }
        guard.push(tn, k)?;
        if k < k_max {
            term = &m_vv * &term;
        }
    }
    let neumann = finish(errors, norms);
    let neumann_sum = sum;

    // Σ_{k≥1} Δ^k as a V x cols matrix (rows outside V vanish).
    let mut power = delta_dense(delta, &cols);
    let mut s_delta = power.clone();
    let mut guard = StallGuard::new();
    for k in 2..200 {
        power = delta_inner_times(delta, &cols, &power);
        let pn = max_abs(&power);
        s_delta += &power;
        if pn < 1e-18 {
            break;
        }
        guard.push(pn, k)?;
    }
    // R = (Σ_{k≥1} Δ^k) 1_V p; Δ^k(x, u) with u outside V meets a zero row.
    let mut r = DMatrix::zeros(n, cols.len());
    for (c, u) in cols.sites.iter().enumerate().take(n) {
        let Some(row) = delta.reference.get(u) else {
            continue;
        };
        let col = s_delta.column(c).into_owned();
        if col.iter().all(|v| *v == 0.0) {
            continue;
        }
        for (w, pw) in row {
            let k = cols.get(w).expect("reference target in columns");
            for x in 0..n {
                r[(x, k)] += col[x] * pw;
            }
        }
    }
    // Rg with identity rows of g outside V.
    let r_vv = r.columns(0, n).into_owned();
    let mut rg = &r_vv * &gd;
    for c in n..cols.len() {
        for x in 0..n {
            rg[(x, c)] += r[(x, c)];
        }
    }
    let rg_vv = rg.columns(0, n).into_owned();
    // b (I + S_Δ), where S_Δ has rows in V only.
    let right = |b: &DMatrix<f64>| -> DMatrix<f64> { b + &b.columns(0, n).into_owned() * &s_delta };
    let mut sum = &gd + &g_vv * &s_delta;
    let mut errors = vec![max_abs(&(&sum - &exact_d))];
    let mut norms = vec![max_abs(&sum)];
    let mut b = right(&rg);
    let mut guard = StallGuard::new();
    for m in 1..=k_max {
        let term = &g_vv * &b;
        let tn = max_abs(&term);
        sum += &term;
        errors.push(max_abs(&(&sum - &exact_d)));
        norms.push(tn);
        if tn == 0.0 || tn < 1e-16 * norms[0] {
            break;
        }
        guard.push(tn, m)?;
        if m < k_max {
            b = &rg_vv * &b;
        }
    }
    let resummed = finish(errors, norms);
    let agreement = max_abs(&(&neumann_sum - &sum));
    Ok(PerturbationReport {
        neumann,
        resummed,
        agreement,
    })
}

/// The domination kernel `Γ_L` on `V_{L + r_L}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaKernel {
    pub d: usize,
    pub l: f64,
    pub s: f64,
    pub r: f64,
}

/// `Γ_L` with the scales of `params`.
pub fn gamma_eval(d: usize, l: f64, params: ScaleParams) -> Result<GammaKernel> {
    if !(l > 1.0) {
        return Err(RwreError::ScaleGuard(format!("Γ_L needs L > 1, got {l}")));
    }
    Ok(GammaKernel {
        d,
        l,
        s: params.s(l),
        r: params.r(l),
    })
}

impl GammaKernel {
    /// Radius of the enlarged ball `V_{L + r_L}`.
    pub fn outer_radius(&self) -> f64 {
        self.l + self.r
    }

    pub fn contains(&self, x: &Site) -> bool {
        x.norm2() <= radius_to_r2(self.outer_radius())
    }

    /// `max(d_{L+r}(x)/2, 3 r_L)`.
    pub fn d_tilde(&self, x: &Site) -> f64 {
        let dl = (self.outer_radius() - x.norm()).max(0.0);
        (dl / 2.0).max(3.0 * self.r)
    }

    /// `min(d̃(x), s_L)`.
    pub fn a(&self, x: &Site) -> f64 {
        self.d_tilde(x).min(self.s)
    }

    pub fn eval(&self, x: &Site, y: &Site) -> f64 {
        let dx = self.d_tilde(x);
        let dy = self.d_tilde(y);
        let ay = dy.min(self.s);
        let dist = (x.dist2(y) as f64).sqrt();
        let d = self.d as i32;
        let first = dx * dy / (ay * ay * (ay + dist).powi(d));
        let second = 1.0 / (ay * ay * (ay + dist).powi(d - 2));
        first.min(second)
    }

    /// `U(x) = V_{a(x)}(x) ∩ V_{L + r_L}`.
    pub fn neighborhood(&self, x: &Site) -> Vec<Site> {
        let a = self.a(x);
        let r2 = radius_to_r2(a);
        let mut out = Vec::new();
        for_each_in_cube(x, a.floor() as i32 + 1, |y| {
            if y.dist2(x) <= r2 && self.contains(&y) {
                out.push(y);
            }
        });
        out
    }

    /// `Γ_L(x, A) = Σ_{y ∈ A} Γ_L(x, y)`.
    pub fn mass(&self, x: &Site, set: &[Site]) -> f64 {
        set.iter().map(|y| self.eval(x, y)).sum()
    }

    /// Deterministic probe points: rays along `e1`, `e1 + e2` and the main
    /// diagonal with unit radial spacing, inside `V_{L + r_L}`.
    pub fn probe_points(&self) -> Vec<Site> {
        let d = self.d;
        let rmax = self.outer_radius();
        let mut dirs: Vec<Vec<f64>> = vec![];
        for k in [1usize, 2, d] {
            let k = k.min(d);
            let mut v = vec![0.0; d];
            for c in v.iter_mut().take(k) {
                *c = 1.0 / (k as f64).sqrt();
            }
            dirs.push(v);
        }
        let mut out = vec![Site::origin(d)];
        for v in dirs {
            let mut t = 1.0;
            while t <= rmax {
                let c: Vec<i32> = v.iter().map(|u| (u * t).round() as i32).collect();
                let s = Site::new(&c);
                if self.contains(&s) {
                    out.push(s);
                }
                t += 1.0;
            }
        }
        out.sort();
        out.dedup();
        out
    }
}

/// Outcome of a `⪯` comparison against `Γ_L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominationReport {
    /// Smallest `C` with `F(x, U(y)) ≤ C Γ_L(x, U(y))` over the checked pairs.
    pub constant: f64,
    pub argmax: (Site, Site),
    pub pairs_checked: usize,
}

/// Exhaustive `⪯` check of a dense Green table against `Γ_L`: rows in the
/// table's interior, columns `U(y)` for every `y ∈ V_{L + r_L}`.
pub fn domination_check(f: &GreenTable, gamma: &GammaKernel) -> Result<DominationReport> {
    let ys: Vec<Site> = Ball::new(Site::origin(gamma.d), gamma.outer_radius())?
        .interior()
        .to_vec();
    let cols: Vec<Vec<f64>> = ys
        .iter()
        .map(|y| {
            let u = gamma.neighborhood(y);
            (0..f.n())
                .map(|i| u.iter().map(|z| f.get(&f.interior()[i], z)).sum())
                .collect()
        })
        .collect();
    Ok(best_ratio(f.interior(), &ys, &cols, gamma))
}

/// `⪯` check of the coarse Green's function `Ĝ_L` at the given columns `ys`,
/// over every row in `V_L`, using one coarse solve per column.
pub fn domination_check_coarse(
    kernel: &CoarseKernel,
    gamma: &GammaKernel,
    ys: &[Site],
) -> Result<DominationReport> {
    let interior = kernel.interior();
    let exits = kernel.chain().exits();
    let exit_block = kernel.chain().exit_block();
    let cols: Vec<Vec<f64>> = ys
        .iter()
        .map(|y| {
            // Visits to U(y) inside V_L, plus the exit step into U(y) \ V_L.
            let u = gamma.neighborhood(y);
            let mut f = vec![0.0; interior.len()];
            let mut outside = vec![false; exits.len()];
            for z in &u {
                if let Some(i) = kernel.index_of(z) {
                    f[i] = 1.0;
                } else if let Ok(k) = exits.binary_search(z) {
                    outside[k] = true;
                }
            }
            for (i, fi) in f.iter_mut().enumerate() {
                let (cols, vals) = exit_block.row(i);
                *fi += cols
                    .iter()
                    .zip(vals)
                    .filter(|(c, _)| outside[**c as usize])
                    .map(|(_, v)| v)
                    .sum::<f64>();
            }
            if f.iter().all(|v| *v == 0.0) {
                return Ok(f);
            }
            kernel.green_apply(&f)
        })
        .collect::<Result<_>>()?;
    Ok(best_ratio(interior, ys, &cols, gamma))
}

fn best_ratio(
    xs: &[Site],
    ys: &[Site],
    cols: &[Vec<f64>],
    gamma: &GammaKernel,
) -> DominationReport {
    let per_y: Vec<(f64, Site, Site)> = ys
        .par_iter()
        .zip(cols)
        .map(|(y, col)| {
            let u = gamma.neighborhood(y);
            let mut best = (0.0, xs[0], *y);
            for (x, fv) in xs.iter().zip(col) {
                let ratio = fv / gamma.mass(x, &u);
                if ratio > best.0 {
                    best = (ratio, *x, *y);
                }
            }
            best
        })
        .collect();
    let best = per_y
        .iter()
        .copied()
        .fold((0.0, xs[0], ys[0]), |a, b| if b.0 > a.0 { b } else { a });
    DominationReport {
        constant: best.0,
        argmax: (best.1, best.2),
        pairs_checked: xs.len() * ys.len(),
    }
}

/// Largest `max/min` of `Γ_L` over `U(x) × U(y)` among the given pairs.
pub fn gamma_comparability(gamma: &GammaKernel, pairs: &[(Site, Site)]) -> f64 {
    pairs
        .par_iter()
        .map(|(x, y)| {
            let ux = gamma.neighborhood(x);
            let uy = gamma.neighborhood(y);
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for a in &ux {
                for b in &uy {
                    let v = gamma.eval(a, b);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            hi / lo
        })
        .reduce(|| 1.0, f64::max)
}

/// `Γ_L(x, V_L)` divided by `max{d̃(x)/L (log L)^6, min(d̃(x)/r_L, log log L)}`
/// for each `x`.
pub fn gamma_mass_ratios(gamma: &GammaKernel, xs: &[Site]) -> Result<Vec<f64>> {
    let ball = Ball::new(Site::origin(gamma.d), gamma.l)?;
    let ll = gamma.l.ln();
    Ok(xs
        .par_iter()
        .map(|x| {
            let dt = gamma.d_tilde(x);
            let bound = (dt / gamma.l * ll.powi(6)).max((dt / gamma.r).min(ll.ln().max(1e-12)));
            gamma.mass(x, ball.interior()) / bound
        })
        .collect())
}

/// The homogeneous coarse step `π̂^{(p)}_{ψ_m}(0, ·)` for constant `ψ ≡ m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseStep {
    pub m: f64,
    pub offsets: Vec<Site>,
    pub probs: Vec<f64>,
}

impl CoarseStep {
    pub fn dim(&self) -> usize {
        self.offsets[0].dim()
    }

    /// `λ_{m,i} = Σ_y y_i² π̂(0, y)`.
    pub fn covariances(&self) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| {
                self.offsets
                    .iter()
                    .zip(&self.probs)
                    .map(|(y, p)| (y.get(i) as f64).powi(2) * p)
                    .sum()
            })
            .collect()
    }

    /// Largest `|Σ_y y_i y_j π̂(0, y)|` over `i ≠ j` and `|Σ_y y_i π̂(0, y)|`.
    pub fn max_asymmetry(&self) -> f64 {
        let d = self.dim();
        let mut worst = 0.0f64;
        for i in 0..d {
            let mean: f64 = self
                .offsets
                .iter()
                .zip(&self.probs)
                .map(|(y, p)| y.get(i) as f64 * p)
                .sum();
            worst = worst.max(mean.abs());
            for j in 0..i {
                let c: f64 = self
                    .offsets
                    .iter()
                    .zip(&self.probs)
                    .map(|(y, p)| (y.get(i) * y.get(j)) as f64 * p)
                    .sum();
                worst = worst.max(c.abs());
            }
        }
        worst
    }
}

/// Builds `π̂^{(p)}_{ψ_m}(0, ·)` from exact exit measures of `V_t(0)`.
pub fn homogeneous_coarse_step(p: &SiteDistribution, m: f64, nodes: usize) -> Result<CoarseStep> {
    if !(m >= 1.0) {
        return Err(RwreError::InvalidArgument(format!(
            "coarse radius must be at least 1, got {m}"
        )));
    }
    let d = p.dim();
    let pieces = pieces_for(d, m, nodes);
    let solver = LocalSolver::new(d, 2.0 * m);
    let row = solver.coarse_row(
        &WeightLookup::Homogeneous(*p),
        &Site::origin(d),
        &pieces,
        None,
    )?;
    let (offsets, probs) = solver
        .to_sites(&Site::origin(d), &row.exits)
        .into_iter()
        .unzip();
    Ok(CoarseStep { m, offsets, probs })
}

/// Truncation-refined approximation of `ĝ_{m, Z^d}(0, ·)` on a cube.
#[derive(Debug, Clone)]
pub struct FreeGreenApprox {
    pub m: f64,
    pub sizes: (usize, usize),
    pub lambda: Vec<f64>,
    keep: i32,
    d: usize,
    values: Vec<f64>,
    error: Vec<f64>,
}

impl FreeGreenApprox {
    fn key(&self, y: &Site) -> Option<usize> {
        let side = 2 * self.keep as i64 + 1;
        let mut k = 0i64;
        for i in 0..self.d {
            let c = y.get(i) as i64 + self.keep as i64;
            if c < 0 || c >= side {
                return None;
            }
            k = k * side + c;
        }
        Some(k as usize)
    }

    /// Half-width of the stored cube.
    pub fn keep_radius(&self) -> i32 {
        self.keep
    }

    /// `ĝ_{m,Z^d}(0, y)`, if `y` lies in the stored cube.
    pub fn get(&self, y: &Site) -> Option<f64> {
        self.key(y).map(|k| self.values[k])
    }

    /// Truncation error estimate at `y`: the size of the extrapolation
    /// correction on the larger torus (an overestimate).
    pub fn error_at(&self, y: &Site) -> Option<f64> {
        self.key(y).map(|k| self.error[k])
    }

    /// `J_m(y) = |Λ_m^{-1/2} y|`.
    pub fn j_m(&self, y: &Site) -> f64 {
        (0..self.d)
            .map(|i| (y.get(i) as f64).powi(2) / self.lambda[i])
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_error(&self) -> f64 {
        self.error.iter().copied().fold(0.0, f64::max)
    }
}

fn fft_nd(
    data: &mut [Complex<f64>],
    n: usize,
    d: usize,
    inverse: bool,
    planner: &mut FftPlanner<f64>,
) {
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let total = data.len();
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for axis in 0..d {
        let stride = n.pow((d - 1 - axis) as u32);
        let block = stride * n;
        for outer in (0..total).step_by(block) {
            for inner in 0..stride {
                let start = outer + inner;
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = data[start + k * stride];
                }
                fft.process_with_scratch(&mut buf, &mut scratch);
                for (k, b) in buf.iter().enumerate() {
                    data[start + k * stride] = *b;
                }
            }
        }
    }
}

/// Green's function of the step on the torus of side `n` with the zero mode
/// removed and the quadratic drift `q(y)/n^d` subtracted, on the cube
/// `[-keep, keep]^d`.
fn torus_green(step: &CoarseStep, lambda: &[f64], n: usize, keep: i32) -> Vec<f64> {
    let d = step.dim();
    let total = n.pow(d as u32);
    let wrap = |y: &Site| -> usize {
        let mut k = 0usize;
        for i in 0..d {
            k = k * n + (y.get(i).rem_euclid(n as i32)) as usize;
        }
        k
    };
    let mut data = vec![Complex::new(0.0, 0.0); total];
    for (y, p) in step.offsets.iter().zip(&step.probs) {
        data[wrap(y)].re += p;
    }
    let mut planner = FftPlanner::new();
    fft_nd(&mut data, n, d, false, &mut planner);
    for (k, v) in data.iter_mut().enumerate() {
        *v = if k == 0 {
            Complex::new(0.0, 0.0)
        } else {
            Complex::new(1.0 / (1.0 - v.re), 0.0)
        };
    }
    fft_nd(&mut data, n, d, true, &mut planner);
    let norm = total as f64;
    let side = 2 * keep + 1;
    let mut out = Vec::with_capacity((side as usize).pow(d as u32));
    for_each_in_cube(&Site::origin(d), keep, |y| {
        let q: f64 = (0..d)
            .map(|i| (y.get(i) as f64).powi(2) / (d as f64 * lambda[i]))
            .sum();
        out.push(data[wrap(&y)].re / norm - q / norm);
    });
    out
}

/// `ĝ_{m,Z^d}` from two tori of sides `n1 < n2`, extrapolating away the
/// `1/n^{d-2}` offset (exact in `d = 3`).
pub fn free_green(step: &CoarseStep, n1: usize, n2: usize, keep: i32) -> Result<FreeGreenApprox> {
    let d = step.dim();
    if d < 3 {
        return Err(RwreError::InvalidArgument(
            "the free Green's function needs d >= 3".into(),
        ));
    }
    if n2 <= n1 || 2 * keep as usize >= n1 {
        return Err(RwreError::InvalidArgument(format!(
            "need n1 < n2 and 2 keep < n1, got n1 = {n1}, n2 = {n2}, keep = {keep}"
        )));
    }
    let bytes = n2.pow(d as u32) * 16;
    const CAP: usize = 1 << 31;
    if bytes > CAP {
        return Err(RwreError::MemoryCap {
            requested: bytes,
            cap: CAP,
        });
    }
    let lambda = step.covariances();
    let h1 = torus_green(step, &lambda, n1, keep);
    let h2 = torus_green(step, &lambda, n2, keep);
    let p = (d - 2) as i32;
    let (w1, w2) = ((n1 as f64).powi(p), (n2 as f64).powi(p));
    let values: Vec<f64> = h1
        .iter()
        .zip(&h2)
        .map(|(a, b)| (w2 * b - w1 * a) / (w2 - w1))
        .collect();
    let error = values.iter().zip(&h2).map(|(v, b)| (v - b).abs()).collect();
    Ok(FreeGreenApprox {
        m: step.m,
        sizes: (n1, n2),
        lambda,
        keep,
        d,
        values,
        error,
    })
}

/// Near-diagonal value and far-field power-law fit of `ĝ_{m,Z^d}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeGreenFit {
    pub m: f64,
    pub sizes: (usize, usize),
    pub lambda: Vec<f64>,
    /// `|ĝ(0, 0) - 1|`.
    pub near_diagonal: f64,
    /// Largest `|ĝ(0, y)|` over `0 < |y| < 3m`.
    pub near_off_diagonal: f64,
    pub exponent: f64,
    pub exponent_stderr: f64,
    /// Fitted `c(d) det Λ_m^{-1/2}`.
    pub amplitude: f64,
    /// Fitted `c(d)`.
    pub c_d: f64,
    /// `Γ(d/2 - 1)/(2 π^{d/2})`, the Brownian Green's constant, for reference.
    pub c_d_brownian: f64,
    pub fit_range: (f64, f64),
    pub fit_points: usize,
    pub truncation_error: f64,
}

fn gamma_fn_half(n: usize) -> f64 {
    // Γ(n/2)
    match n {
        1 => std::f64::consts::PI.sqrt(),
        2 => 1.0,
        _ => (n as f64 / 2.0 - 1.0) * gamma_fn_half(n - 2),
    }
}

/// Computes `ĝ_{m,Z^d}` for the coarse step of `p` at radius `m` on tori of
/// sides `2 box_radius` and `8 box_radius / 3`, then fits `log ĝ` against
/// `log J_m` over `3m ≤ |y| ≤ 2 box_radius / 3`.
pub fn free_green_fit(p: &SiteDistribution, m: f64, box_radius: usize) -> Result<FreeGreenFit> {
    if (box_radius as f64) < 10.0 * m {
        return Err(RwreError::InvalidArgument(format!(
            "box radius {box_radius} is below 10 m = {}",
            10.0 * m
        )));
    }
    let step = homogeneous_coarse_step(p, m, DEFAULT_NODES)?;
    let n1 = 2 * box_radius;
    let n2 = (n1 * 4 / 3 + 1) & !1;
    let hi = n1 as f64 / 3.0;
    let keep = hi.ceil() as i32;
    let free = free_green(&step, n1, n2, keep)?;
    free_green_fit_from(&free, 3.0 * m, hi)
}

/// Fit of an existing table over `lo ≤ |y| ≤ hi`.
pub fn free_green_fit_from(free: &FreeGreenApprox, lo: f64, hi: f64) -> Result<FreeGreenFit> {
    let d = free.d;
    let origin = Site::origin(d);
    let near_diagonal = (free.get(&origin).expect("origin stored") - 1.0).abs();
    let mut near_off = 0.0f64;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut trunc = 0.0f64;
    for_each_in_cube(&origin, free.keep, |y| {
        let r = y.norm();
        let v = free.get(&y).expect("inside cube");
        if r > 0.0 && r < lo {
            near_off = near_off.max(v.abs());
        }
        if r >= lo && r <= hi {
            xs.push(free.j_m(&y).ln());
            ys.push(v.ln());
            trunc = trunc.max(free.error_at(&y).unwrap_or(0.0) / v);
        }
    });
    if xs.len() < 3 || ys.iter().any(|v| !v.is_finite()) {
        return Err(RwreError::InvalidData(
            "too few usable points for the far-field fit".into(),
        ));
    }
    let (a, b, _, se_b) = linear_fit(&xs, &ys);
    let amplitude = a.exp();
    let det: f64 = free.lambda.iter().product();
    Ok(FreeGreenFit {
        m: free.m,
        sizes: free.sizes,
        lambda: free.lambda.clone(),
        near_diagonal,
        near_off_diagonal: near_off,
        exponent: b,
        exponent_stderr: se_b,
        amplitude,
        c_d: amplitude * det.sqrt(),
        c_d_brownian: gamma_fn_half(d - 2) / (2.0 * std::f64::consts::PI.powf(d as f64 / 2.0)),
        fit_range: (lo, hi),
        fit_points: xs.len(),
        truncation_error: trunc,
    })
}

/// Residual of `ĝ_{m,V_L}(x, y) = ĝ_{m,Z^d}(x, y) - E_x[ĝ_{m,Z^d}(X_{τ_L}, y)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongMarkovReport {
    pub max_residual: f64,
    /// Bound on the contribution of the free table's truncation error.
    pub truncation_estimate: f64,
    pub starts: Vec<Site>,
}

/// The coarse chain of a constant-radius step killed outside `V_L(0)`.
pub fn coarse_chain_on_ball(step: &CoarseStep, ball: &Ball) -> Result<AbsorbingChain> {
    let interior = ball.interior().to_vec();
    let mut exit_sites: Vec<Site> = Vec::new();
    let mut inner_rows = Vec::with_capacity(interior.len());
    let mut exit_raw = Vec::with_capacity(interior.len());
    for x in &interior {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (off, p) in step.offsets.iter().zip(&step.probs) {
            let y = x.add(off);
            match ball.index_of(&y) {
                Some(j) => a.push((j as u32, *p)),
                None => {
                    b.push((y, *p));
                    exit_sites.push(y);
                }
            }
        }
        a.sort_unstable_by_key(|e| e.0);
        inner_rows.push(a);
        exit_raw.push(b);
    }
    exit_sites.sort();
    exit_sites.dedup();
    let exit_rows = exit_raw
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|(y, p)| (exit_sites.binary_search(&y).expect("exit listed") as u32, p))
                .collect()
        })
        .collect();
    let n = interior.len();
    let inner = CsrMatrix::from_rows(n, inner_rows);
    let exit = CsrMatrix::from_rows(exit_sites.len(), exit_rows);
    AbsorbingChain::from_blocks(interior, exit_sites, inner, exit, false)
}

/// Checks the strong Markov identity on `V_L(0)` for each start in `starts`
/// and every interior target.
pub fn strong_markov_identity_check(
    step: &CoarseStep,
    free: &FreeGreenApprox,
    l: f64,
    starts: &[Site],
) -> Result<StrongMarkovReport> {
    let ball = Ball::new(Site::origin(step.dim()), l)?;
    let chain = coarse_chain_on_ball(step, &ball)?;
    let lookup = |v: &Site| -> Result<(f64, f64)> {
        match (free.get(v), free.error_at(v)) {
            (Some(g), Some(e)) => Ok((g, e)),
            _ => Err(RwreError::InvalidArgument(format!(
                "free table of half-width {} does not reach {v}",
                free.keep_radius()
            ))),
        }
    };
    let mut max_residual = 0.0f64;
    let mut trunc = 0.0f64;
    for x in starts {
        let xi = chain.index_of(x).ok_or_else(|| RwreError::OutsideBall {
            site: x.to_string(),
            radius: l,
        })?;
        let g = chain.green_row(xi)?;
        let pi = chain.exit_from_green_row(&g);
        for (j, y) in chain.interior().iter().enumerate() {
            let (direct, e0) = lookup(&y.sub(x))?;
            let mut expected = 0.0;
            let mut err = e0;
            for (z, pz) in chain.exits().iter().zip(&pi) {
                if *pz == 0.0 {
                    continue;
                }
                let (gz, ez) = lookup(&y.sub(z))?;
                expected += pz * gz;
                err += pz * ez;
            }
            max_residual = max_residual.max((g[j] - (direct - expected)).abs());
            trunc = trunc.max(err);
        }
    }
    Ok(StrongMarkovReport {
        max_residual,
        truncation_estimate: trunc,
        starts: starts.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coarse_grain::{build_coarse, CoarseScheme};
    use crate::environment::{Environment, EnvironmentSpec, Family};
    use crate::exact_solver::green_from_source;

    fn srw() -> SiteDistribution {
        SiteDistribution::uniform(3)
    }

    fn env(eps: f64, seed: u64) -> Environment {
        Environment::new(EnvironmentSpec::new(3, eps, Family::PairUniform, seed).unwrap()).unwrap()
    }

    #[test]
    fn zero_delta_gives_zero_residuals() {
        let ball = Ball::new(Site::origin(3), 3.0).unwrap();
        let g = green_from_source(&srw(), &ball).unwrap();
        let delta = DeltaKernel::from_sources(&srw(), &srw(), &ball).unwrap();
        assert!(delta.is_zero());
        let rep = resolvent_check(&g, &g, &delta).unwrap();
        assert_eq!((rep.left, rep.right, rep.cross), (0.0, 0.0, 0.0));
        let series = perturbation_series(&g, &g, &delta, 5).unwrap();
        assert_eq!(series.neumann.errors[0], 0.0);
        assert_eq!(series.neumann.terms_needed, Some(0));
        assert_eq!(series.resummed.terms_needed, Some(0));
    }

    #[test]
    fn resolvent_identities_hold_quenched() {
        let ball = Ball::new(Site::origin(3), 4.0).unwrap();
        let e = env(0.05, 9);
        let g = green_from_source(&srw(), &ball).unwrap();
        let big = green_from_source(&e, &ball).unwrap();
        let delta = DeltaKernel::from_sources(&e, &srw(), &ball).unwrap();
        assert!(delta.max_row_sum() < 1e-15);
        assert!(delta.norm_l1() <= 2.0 * 6.0 * 0.05 + 1e-12);
        let rep = resolvent_check(&g, &big, &delta).unwrap();
        assert!(
            rep.left < 1e-9 && rep.right < 1e-9 && rep.cross < 1e-9,
            "{rep:?}"
        );
    }

    #[test]
    fn both_expansions_converge_at_small_epsilon() {
        let ball = Ball::new(Site::origin(3), 4.0).unwrap();
        let e = env(0.01, 4);
        let g = green_from_source(&srw(), &ball).unwrap();
        let big = green_from_source(&e, &ball).unwrap();
        let delta = DeltaKernel::from_sources(&e, &srw(), &ball).unwrap();
        let rep = perturbation_series(&g, &big, &delta, 60).unwrap();
        assert!(rep.neumann.final_error < 1e-8, "{:?}", rep.neumann.errors);
        assert!(rep.resummed.final_error < 1e-8, "{:?}", rep.resummed.errors);
        assert!(rep.agreement < 1e-8);
        assert!(rep.neumann.terms_needed.is_some());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let b3 = Ball::new(Site::origin(3), 3.0).unwrap();
        let b2 = Ball::new(Site::origin(3), 2.0).unwrap();
        let g3 = green_from_source(&srw(), &b3).unwrap();
        let g2 = green_from_source(&srw(), &b2).unwrap();
        let delta = DeltaKernel::from_sources(&srw(), &srw(), &b3).unwrap();
        assert!(matches!(
            resolvent_check(&g3, &g2, &delta),
            Err(RwreError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn gamma_at_center_is_a_power() {
        let gamma = gamma_eval(3, 1e6, ScaleParams::ASYMPTOTIC).unwrap();
        let o = Site::origin(3);
        let a = gamma.a(&o);
        assert!((a - gamma.s).abs() < 1e-9);
        assert!((gamma.eval(&o, &o) - a.powi(-3)).abs() < 1e-12 * a.powi(-3));
        let g16 = gamma_eval(3, 16.0, ScaleParams::DESK).unwrap();
        let x = Site::new(&[3, -1, 2]);
        let y = Site::new(&[-5, 4, 0]);
        assert!(g16.eval(&x, &y) > 0.0);
        // Symmetries fixing the center and x.
        assert!((g16.eval(&x, &y) - g16.eval(&x.reflect(0).reflect(0), &y)).abs() < 1e-15);
        let xr = Site::new(&[3, 0, 0]);
        assert!((g16.eval(&xr, &y) - g16.eval(&xr, &y.reflect(1))).abs() < 1e-15);
        let ratio = gamma_comparability(&g16, &[(o, x), (x, y), (y, Site::new(&[12, 0, 0]))]);
        assert!(ratio.is_finite() && ratio >= 1.0);
    }

    #[test]
    fn srw_coarse_green_is_dominated() {
        let scheme = CoarseScheme::new(3, 5.0, ScaleParams::DESK).unwrap();
        let kernel = build_coarse(&srw(), &scheme).unwrap();
        let gamma = gamma_eval(3, 5.0, ScaleParams::DESK).unwrap();
        let dense = crate::coarse_grain::coarse_green(&kernel).unwrap();
        let full = domination_check(&dense, &gamma).unwrap();
        let ys = gamma.probe_points();
        let sampled = domination_check_coarse(&kernel, &gamma, &ys).unwrap();
        assert!(full.constant.is_finite() && full.constant > 0.0);
        assert!(
            sampled.constant <= full.constant * (1.0 + 1e-9),
            "{sampled:?} {full:?}"
        );
    }

    #[test]
    fn coarse_step_is_centered_and_isotropic_for_srw() {
        let step = homogeneous_coarse_step(&srw(), 3.0, 32).unwrap();
        let total: f64 = step.probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-10);
        assert!(step.max_asymmetry() < 1e-10);
        let lam = step.covariances();
        assert!(
            (lam[0] - lam[1]).abs() < 1e-10 * lam[0] && (lam[0] - lam[2]).abs() < 1e-10 * lam[0]
        );
        // Optional stopping: Σ_i λ_i = E|X_τ|² = E τ over the radius window.
        assert!(lam[0] / 9.0 > 0.5 && lam[0] / 9.0 < 4.0);
    }

    #[test]
    fn strong_markov_identity_on_small_ball() {
        let step = homogeneous_coarse_step(&srw(), 2.0, 32).unwrap();
        let free = free_green(&step, 96, 128, 24).unwrap();
        let rep = strong_markov_identity_check(
            &step,
            &free,
            6.0,
            &[Site::origin(3), Site::new(&[2, 1, 0])],
        )
        .unwrap();
        assert!(
            rep.max_residual <= 10.0 * rep.truncation_estimate + 1e-12,
            "{rep:?}"
        );
        assert!(rep.max_residual < 1e-3);
    }

    #[test]
    fn free_green_box_guard() {
        assert!(free_green_fit(&srw(), 8.0, 40).is_err());
    }
}
