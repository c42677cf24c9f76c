//! Exact exit measures, Green's functions and mean exit times on finite site
//! sets, for quenched environments and homogeneous kernels alike.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::{SiteDistribution, TransitionSource};
use crate::error::{Result, RwreError};
use crate::lattice::{Ball, Site};
use crate::linalg::{
    bicgstab, conjugate_gradient, CsrMatrix, DenseLu, DEFAULT_MAX_ITER, DENSE_LIMIT,
};

/// Relative residual tolerance for exact solves.
pub const EXACT_TOL: f64 = 1e-13;

/// Memory cap for dense Green tables, in bytes.
pub const GREEN_MEMORY_CAP: usize = 1 << 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    OneStepEnv,
    OneStepHomogeneous,
    Coarse,
    Goodified,
}

/// A sparse transition kernel from a domain of sites to a target set.
#[derive(Debug, Clone)]
pub struct KernelTable {
    pub kind: KernelKind,
    domain: Vec<Site>,
    targets: Vec<Site>,
    matrix: CsrMatrix,
}

impl KernelTable {
    /// Builds from per-row `(target site, weight)` lists over a sorted domain.
    pub fn from_rows(kind: KernelKind, domain: Vec<Site>, rows: Vec<Vec<(Site, f64)>>) -> Self {
        debug_assert!(domain.windows(2).all(|w| w[0] < w[1]));
        let mut targets: Vec<Site> = rows.iter().flatten().map(|e| e.0).collect();
        targets.sort();
        targets.dedup();
        let idx_rows = rows
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|(s, w)| (targets.binary_search(&s).expect("target listed") as u32, w))
                    .collect()
            })
            .collect();
        let matrix = CsrMatrix::from_rows(targets.len(), idx_rows);
        Self {
            kind,
            domain,
            targets,
            matrix,
        }
    }

    /// One-step kernel of `source` on the given sites.
    pub fn one_step<S: TransitionSource + ?Sized>(source: &S, domain: &[Site]) -> Self {
        let mut domain = domain.to_vec();
        domain.sort();
        domain.dedup();
        let d = source.dim();
        let rows = domain
            .iter()
            .map(|x| {
                let w = source.at(x);
                (0..2 * d).map(|dir| (x.step(dir), w.get(dir))).collect()
            })
            .collect();
        let kind = if source.homogeneous().is_some() {
            KernelKind::OneStepHomogeneous
        } else {
            KernelKind::OneStepEnv
        };
        Self::from_rows(kind, domain, rows)
    }

    pub fn domain(&self) -> &[Site] {
        &self.domain
    }

    pub fn targets(&self) -> &[Site] {
        &self.targets
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn domain_index(&self, x: &Site) -> Option<usize> {
        self.domain.binary_search(x).ok()
    }

    /// Row of `x` as `(site, weight)` pairs.
    pub fn row(&self, x: &Site) -> Option<Vec<(Site, f64)>> {
        let i = self.domain_index(x)?;
        let (idx, val) = self.matrix.row(i);
        Some(
            idx.iter()
                .zip(val)
                .map(|(c, v)| (self.targets[*c as usize], *v))
                .collect(),
        )
    }

    pub fn get(&self, x: &Site, y: &Site) -> f64 {
        match (self.domain_index(x), self.targets.binary_search(y)) {
            (Some(i), Ok(j)) => self.matrix.get(i, j),
            _ => 0.0,
        }
    }

    /// Largest deviation of a row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.matrix
            .row_sums()
            .iter()
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Checks nonnegativity and row sums within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.matrix.values.iter().any(|&v| v < 0.0) {
            return Err(RwreError::InvalidData("negative kernel entry".into()));
        }
        let err = self.max_row_sum_error();
        if err > tol {
            return Err(RwreError::InvalidData(format!(
                "kernel row sums deviate from 1 by {err:.3e}"
            )));
        }
        Ok(())
    }
}

/// Validates a symmetric homogeneous one-step law (`2d` weights ordered
/// `+e1, -e1, ...`) against the class `|p - 1/(2d)| <= kappa`.
pub fn symmetric_kernel(weights: &[f64], kappa: f64) -> Result<SiteDistribution> {
    let p = SiteDistribution::new(weights)?;
    p.check_symmetric_class(kappa)?;
    Ok(p)
}

/// The chain killed on leaving a finite site set `V`: `A = I - K_VV` and the
/// exit block `K_{V, V^c}`.
pub struct AbsorbingChain {
    interior: Vec<Site>,
    exits: Vec<Site>,
    inner: CsrMatrix,
    exit: CsrMatrix,
    symmetric: bool,
    lu: Option<DenseLu>,
    tol: f64,
}

impl AbsorbingChain {
    /// Restricts `kernel` to the sorted site set `interior`, which must be a
    /// subset of the kernel's domain.
    pub fn from_kernel(kernel: &KernelTable, interior: &[Site]) -> Result<Self> {
        let mut interior = interior.to_vec();
        interior.sort();
        interior.dedup();
        let mut exits: Vec<Site> = Vec::new();
        let mut raw_rows = Vec::with_capacity(interior.len());
        for x in &interior {
            let row = kernel.row(x).ok_or_else(|| {
                RwreError::ShapeMismatch(format!("site {x} is not in the kernel domain"))
            })?;
            for (y, _) in &row {
                if interior.binary_search(y).is_err() {
                    exits.push(*y);
                }
            }
            raw_rows.push(row);
        }
        exits.sort();
        exits.dedup();
        let mut inner_rows = Vec::with_capacity(interior.len());
        let mut exit_rows = Vec::with_capacity(interior.len());
        for row in raw_rows {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for (y, w) in row {
                match interior.binary_search(&y) {
                    Ok(j) => a.push((j as u32, w)),
                    Err(_) => b.push((exits.binary_search(&y).expect("exit listed") as u32, w)),
                }
            }
            inner_rows.push(a);
            exit_rows.push(b);
        }
        let n = interior.len();
        let inner = CsrMatrix::from_rows(n, inner_rows);
        let exit = CsrMatrix::from_rows(exits.len(), exit_rows);
        let symmetric = kernel.kind == KernelKind::OneStepHomogeneous && is_symmetric(&inner);
        Self::assemble(interior, exits, inner, exit, symmetric)
    }

    /// One-step chain of `source` killed outside `ball`.
    pub fn on_ball<S: TransitionSource + ?Sized>(source: &S, ball: &Ball) -> Result<Self> {
        let kernel = KernelTable::one_step(source, ball.interior());
        let mut chain = Self::from_kernel(&kernel, ball.interior())?;
        if let Some(p) = source.homogeneous() {
            chain.symmetric = p.is_symmetric();
        }
        Ok(chain)
    }

    /// Chain from prebuilt blocks: `inner` is `K_VV` on the sorted `interior`,
    /// `exit` maps rows to the sorted `exits`.
    pub fn from_blocks(
        interior: Vec<Site>,
        exits: Vec<Site>,
        inner: CsrMatrix,
        exit: CsrMatrix,
        symmetric: bool,
    ) -> Result<Self> {
        if inner.n_rows != interior.len()
            || inner.n_cols != interior.len()
            || exit.n_rows != interior.len()
            || exit.n_cols != exits.len()
        {
            return Err(RwreError::ShapeMismatch(
                "chain blocks do not match site lists".into(),
            ));
        }
        Self::assemble(interior, exits, inner, exit, symmetric)
    }

    fn assemble(
        interior: Vec<Site>,
        exits: Vec<Site>,
        inner: CsrMatrix,
        exit: CsrMatrix,
        symmetric: bool,
    ) -> Result<Self> {
        let n = interior.len();
        let lu = if n <= DENSE_LIMIT {
            let mut a = inner.to_dense();
            for v in a.iter_mut() {
                *v = -*v;
            }
            for i in 0..n {
                a[i * n + i] += 1.0;
            }
            Some(DenseLu::new(n, &a)?)
        } else {
            None
        };
        Ok(Self {
            interior,
            exits,
            inner,
            exit,
            symmetric,
            lu,
            tol: EXACT_TOL,
        })
    }

    /// Overrides the iterative solver tolerance.
    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn len(&self) -> usize {
        self.interior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interior.is_empty()
    }

    pub fn interior(&self) -> &[Site] {
        &self.interior
    }

    pub fn exits(&self) -> &[Site] {
        &self.exits
    }

    pub fn inner(&self) -> &CsrMatrix {
        &self.inner
    }

    pub fn exit_block(&self) -> &CsrMatrix {
        &self.exit
    }

    pub fn index_of(&self, x: &Site) -> Option<usize> {
        self.interior.binary_search(x).ok()
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        self.inner.matvec(u, out);
        for i in 0..u.len() {
            out[i] = u[i] - out[i];
        }
    }

    fn apply_transpose(&self, u: &[f64], out: &mut [f64]) {
        self.inner.matvec_transpose(u, out);
        for i in 0..u.len() {
            out[i] = u[i] - out[i];
        }
    }

    /// Solves `(I - K_VV) u = f`.
    pub fn solve(&self, f: &[f64]) -> Result<Vec<f64>> {
        if let Some(lu) = &self.lu {
            return Ok(lu.solve(f));
        }
        let mut u = f.to_vec();
        if self.symmetric {
            conjugate_gradient(
                |v, o| self.apply(v, o),
                f,
                &mut u,
                self.tol,
                DEFAULT_MAX_ITER,
            )?;
        } else {
            bicgstab(
                |v, o| self.apply(v, o),
                f,
                &mut u,
                self.tol,
                DEFAULT_MAX_ITER,
            )?;
        }
        Ok(u)
    }

    /// Solves `(I - K_VV)^T u = f`.
    pub fn solve_transpose(&self, f: &[f64]) -> Result<Vec<f64>> {
        if let Some(lu) = &self.lu {
            return Ok(lu.solve_transpose(f));
        }
        let mut u = f.to_vec();
        if self.symmetric {
            conjugate_gradient(
                |v, o| self.apply(v, o),
                f,
                &mut u,
                self.tol,
                DEFAULT_MAX_ITER,
            )?;
        } else {
            bicgstab(
                |v, o| self.apply_transpose(v, o),
                f,
                &mut u,
                self.tol,
                DEFAULT_MAX_ITER,
            )?;
        }
        Ok(u)
    }

    /// Row `g_V(x, ·)` restricted to the interior.
    pub fn green_row(&self, xi: usize) -> Result<Vec<f64>> {
        let mut e = vec![0.0; self.len()];
        e[xi] = 1.0;
        self.solve_transpose(&e)
    }

    /// Exit distribution over `exits()` from the Green row of the start.
    pub fn exit_from_green_row(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.exits.len()];
        self.exit.matvec_transpose(g, &mut out);
        out
    }

    /// `E_x[τ_V]` for every interior site.
    pub fn mean_exit_times(&self) -> Result<Vec<f64>> {
        self.solve(&vec![1.0; self.len()])
    }
}

fn is_symmetric(m: &CsrMatrix) -> bool {
    (0..m.n_rows).all(|i| {
        let (idx, val) = m.row(i);
        idx.iter()
            .zip(val)
            .all(|(j, v)| m.get(*j as usize, i) == *v)
    })
}

/// A probability distribution on exit sites.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitMeasure {
    pub sites: Vec<Site>,
    pub probs: Vec<f64>,
}

impl ExitMeasure {
    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn get(&self, z: &Site) -> f64 {
        match self.sites.binary_search(z) {
            Ok(k) => self.probs[k],
            Err(_) => 0.0,
        }
    }

    /// `Σ_z π(z) f(z)`.
    pub fn expect<F: Fn(&Site) -> f64>(&self, f: F) -> f64 {
        self.sites
            .iter()
            .zip(&self.probs)
            .map(|(z, p)| p * f(z))
            .sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let d = self.sites.first().map(|s| s.dim()).unwrap_or(0);
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (1..=d).map(|i| format!("z{i}")).collect();
        header.push("prob".into());
        w.write_record(&header)?;
        for (z, p) in self.sites.iter().zip(&self.probs) {
            let mut rec: Vec<String> = z.coords().iter().map(|c| c.to_string()).collect();
            rec.push(format!("{p:.16e}"));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_start(ball: &Ball, x: &Site) -> Result<usize> {
    ball.index_of(x).ok_or_else(|| RwreError::OutsideBall {
        site: x.to_string(),
        radius: ball.radius,
    })
}

/// `π_V(x, ·)` for a kernel whose domain covers `V`.
pub fn exit_measure_exact(kernel: &KernelTable, ball: &Ball, x: &Site) -> Result<ExitMeasure> {
    check_start(ball, x)?;
    let chain = AbsorbingChain::from_kernel(kernel, ball.interior())?;
    exit_measure_on_chain(&chain, x)
}

/// `π_V(x, ·)` directly from a transition source.
pub fn exit_measure_from_source<S: TransitionSource + ?Sized>(
    source: &S,
    ball: &Ball,
    x: &Site,
) -> Result<ExitMeasure> {
    check_start(ball, x)?;
    let chain = AbsorbingChain::on_ball(source, ball)?;
    exit_measure_on_chain(&chain, x)
}

pub fn exit_measure_on_chain(chain: &AbsorbingChain, x: &Site) -> Result<ExitMeasure> {
    let xi = chain.index_of(x).ok_or_else(|| {
        RwreError::InvalidArgument(format!("site {x} is not inside the absorbing set"))
    })?;
    let g = chain.green_row(xi)?;
    Ok(ExitMeasure {
        sites: chain.exits().to_vec(),
        probs: chain.exit_from_green_row(&g),
    })
}

/// Dense Green's function `g_V(x, y)`, with columns for interior targets and
/// for exit targets (where it equals the exit measure). Stored column-major
/// in canonical site order.
#[derive(Debug, Clone)]
pub struct GreenTable {
    interior: Vec<Site>,
    exits: Vec<Site>,
    /// `n x n`, column-major.
    inner: Vec<f64>,
    /// `n x m`, column-major.
    exit: Vec<f64>,
}

impl GreenTable {
    pub fn interior(&self) -> &[Site] {
        &self.interior
    }

    pub fn exits(&self) -> &[Site] {
        &self.exits
    }

    pub fn n(&self) -> usize {
        self.interior.len()
    }

    #[inline]
    pub fn inner(&self, i: usize, j: usize) -> f64 {
        self.inner[j * self.interior.len() + i]
    }

    #[inline]
    pub fn exit_entry(&self, i: usize, k: usize) -> f64 {
        self.exit[k * self.interior.len() + i]
    }

    /// `g_V(x, y)` for any pair; `δ_x(y)` when `x` is outside `V`.
    pub fn get(&self, x: &Site, y: &Site) -> f64 {
        match self.interior.binary_search(x) {
            Err(_) => (x == y) as u8 as f64,
            Ok(i) => {
                if let Ok(j) = self.interior.binary_search(y) {
                    self.inner(i, j)
                } else if let Ok(k) = self.exits.binary_search(y) {
                    self.exit_entry(i, k)
                } else {
                    0.0
                }
            }
        }
    }

    /// Interior row sums, i.e. mean exit times.
    pub fn row_sums(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n];
        for j in 0..n {
            for (i, o) in out.iter_mut().enumerate() {
                *o += self.inner[j * n + i];
            }
        }
        out
    }

    /// Interior block as a dense row-major matrix.
    pub fn inner_row_major(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..n {
                out[i * n + j] = self.inner[j * n + i];
            }
        }
        out
    }

    pub fn from_row_major(
        interior: Vec<Site>,
        exits: Vec<Site>,
        inner_rm: &[f64],
        exit_rm: &[f64],
    ) -> Self {
        let n = interior.len();
        let m = exits.len();
        let mut inner = vec![0.0; n * n];
        let mut exit = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..n {
                inner[j * n + i] = inner_rm[i * n + j];
            }
            for k in 0..m {
                exit[k * n + i] = exit_rm[i * m + k];
            }
        }
        Self {
            interior,
            exits,
            inner,
            exit,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let d = self.interior.first().map(|s| s.dim()).unwrap_or(0);
        let mut w = BufWriter::new(File::create(path)?);
        let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        header.extend((1..=d).map(|i| format!("y{i}")));
        header.push("value".into());
        writeln!(w, "{}", header.join(","))?;
        let n = self.n();
        for (i, x) in self.interior.iter().enumerate() {
            let xs: Vec<String> = x.coords().iter().map(|c| c.to_string()).collect();
            let targets = self
                .interior
                .iter()
                .enumerate()
                .map(|(j, y)| (y, self.inner[j * n + i]))
                .chain(
                    self.exits
                        .iter()
                        .enumerate()
                        .map(|(k, z)| (z, self.exit[k * n + i])),
                );
            for (y, v) in targets {
                if v == 0.0 {
                    continue;
                }
                let ys: Vec<String> = y.coords().iter().map(|c| c.to_string()).collect();
                writeln!(w, "{},{},{v:.16e}", xs.join(","), ys.join(","))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `g_V = Σ_k (1_V K)^k` on a chain.
pub fn green_on_chain(chain: &AbsorbingChain) -> Result<GreenTable> {
    let n = chain.len();
    let m = chain.exits().len();
    let bytes = n * (n + m) * 8;
    if bytes > GREEN_MEMORY_CAP {
        return Err(RwreError::MemoryCap {
            requested: bytes,
            cap: GREEN_MEMORY_CAP,
        });
    }
    let inner: Vec<f64> = if let Some(lu) = &chain.lu {
        let inv = lu.inverse();
        let mut cm = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                cm[j * n + i] = inv[i * n + j];
            }
        }
        cm
    } else {
        let cols: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|j| {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                chain.solve(&e)
            })
            .collect::<Result<_>>()?;
        cols.concat()
    };
    // Exit columns: g(x, z) = Σ_y g(x, y) K(y, z).
    let mut exit = vec![0.0; n * m];
    let eb = chain.exit_block();
    for y in 0..n {
        let (idx, val) = eb.row(y);
        for (k, w) in idx.iter().zip(val) {
            let col = &mut exit[*k as usize * n..(*k as usize + 1) * n];
            let src = &inner[y * n..(y + 1) * n];
            for i in 0..n {
                col[i] += w * src[i];
            }
        }
    }
    Ok(GreenTable {
        interior: chain.interior().to_vec(),
        exits: chain.exits().to_vec(),
        inner,
        exit,
    })
}

/// Green's function of a kernel table on a ball.
pub fn green_exact(kernel: &KernelTable, ball: &Ball) -> Result<GreenTable> {
    let chain = AbsorbingChain::from_kernel(kernel, ball.interior())?;
    green_on_chain(&chain)
}

/// Green's function of a transition source on a ball.
pub fn green_from_source<S: TransitionSource + ?Sized>(
    source: &S,
    ball: &Ball,
) -> Result<GreenTable> {
    let chain = AbsorbingChain::on_ball(source, ball)?;
    green_on_chain(&chain)
}

/// `E_x[τ_V]` for a kernel table.
pub fn mean_exit_time_exact(kernel: &KernelTable, ball: &Ball, x: &Site) -> Result<f64> {
    let xi = check_start(ball, x)?;
    let chain = AbsorbingChain::from_kernel(kernel, ball.interior())?;
    Ok(chain.mean_exit_times()?[xi])
}

/// `E_x[τ_V]` for a transition source.
pub fn mean_exit_time_from_source<S: TransitionSource + ?Sized>(
    source: &S,
    ball: &Ball,
    x: &Site,
) -> Result<f64> {
    let xi = check_start(ball, x)?;
    let chain = AbsorbingChain::on_ball(source, ball)?;
    Ok(chain.mean_exit_times()?[xi])
}

/// `Σ_z π_V(x, z)|z - c|² - |x - c|²`, which equals `E_x[τ_V]` for
/// centered nearest-neighbor kernels by optional stopping.
pub fn optional_stopping_value(measure: &ExitMeasure, ball: &Ball, x: &Site) -> f64 {
    let c = ball.center;
    measure.expect(|z| z.dist2(&c) as f64) - x.dist2(&c) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{Environment, EnvironmentSpec, Family};

    fn srw() -> SiteDistribution {
        SiteDistribution::uniform(3)
    }

    /// Exit measure by exhaustive path enumeration: propagate the mass of
    /// surviving paths step by step until it falls below `cutoff`.
    fn enumerate_exit(
        p: &SiteDistribution,
        ball: &Ball,
        x: &Site,
        cutoff: f64,
    ) -> (ExitMeasure, f64) {
        use std::collections::BTreeMap;
        let mut alive: BTreeMap<Site, f64> = BTreeMap::new();
        alive.insert(*x, 1.0);
        let mut exit: BTreeMap<Site, f64> = BTreeMap::new();
        let mut mean_time = 0.0;
        let mut step = 0;
        while alive.values().sum::<f64>() > cutoff {
            step += 1;
            let mut next = BTreeMap::new();
            for (y, m) in &alive {
                for dir in 0..6 {
                    let z = y.step(dir);
                    let w = m * p.get(dir);
                    if ball.contains(&z) {
                        *next.entry(z).or_insert(0.0) += w;
                    } else {
                        *exit.entry(z).or_insert(0.0) += w;
                        mean_time += w * step as f64;
                    }
                }
            }
            alive = next;
        }
        let (sites, probs) = exit.into_iter().unzip();
        (ExitMeasure { sites, probs }, mean_time)
    }

    #[test]
    fn single_site_ball() {
        let b = Ball::new(Site::origin(3), 0.0).unwrap();
        let m = exit_measure_from_source(&srw(), &b, &Site::origin(3)).unwrap();
        assert_eq!(m.sites.len(), 6);
        assert!(m.probs.iter().all(|p| (p - 1.0 / 6.0).abs() < 1e-15));
        let g = green_from_source(&srw(), &b).unwrap();
        assert_eq!(g.inner(0, 0), 1.0);
    }

    #[test]
    fn v1_anchor_and_enumeration() {
        let b = Ball::new(Site::origin(3), 1.0).unwrap();
        let o = Site::origin(3);
        let t = mean_exit_time_from_source(&srw(), &b, &o).unwrap();
        assert!((t - 2.4).abs() < 1e-12, "{t}");
        let m = exit_measure_from_source(&srw(), &b, &o).unwrap();
        let (oracle, oracle_t) = enumerate_exit(&srw(), &b, &o, 1e-14);
        assert!((oracle_t - 2.4).abs() < 1e-11);
        assert_eq!(m.sites, oracle.sites);
        for (a, b) in m.probs.iter().zip(&oracle.probs) {
            assert!((a - b).abs() < 1e-12);
        }
        // Two symmetry classes: |z|^2 = 4 and |z|^2 = 2.
        for class in [2, 4] {
            let vals: Vec<f64> = m
                .sites
                .iter()
                .zip(&m.probs)
                .filter(|(z, _)| z.norm2() == class)
                .map(|(_, p)| *p)
                .collect();
            assert!(vals.iter().all(|v| (v - vals[0]).abs() < 1e-15));
        }
    }

    #[test]
    fn anisotropic_exit_matches_enumeration() {
        let p = symmetric_kernel(&[0.2, 0.2, 0.15, 0.15, 0.15, 0.15], 0.05).unwrap();
        let b = Ball::new(Site::origin(3), 1.0).unwrap();
        let k = KernelTable::one_step(&p, b.interior());
        assert!(k.max_row_sum_error() < 1e-15);
        let m = exit_measure_exact(&k, &b, &Site::origin(3)).unwrap();
        let (oracle, _) = enumerate_exit(&p, &b, &Site::origin(3), 1e-14);
        for (a, b) in m.probs.iter().zip(&oracle.probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn green_matches_neumann_series() {
        let b = Ball::new(Site::origin(3), 1.0).unwrap();
        let chain = AbsorbingChain::on_ball(&srw(), &b).unwrap();
        let g = green_on_chain(&chain).unwrap();
        // Σ_k K^k. The center row of K_VV sums to 1, so bound the tail with
        // q = ||K^2||_inf < 1: ||Σ_{k>=K} K^k|| <= 2 q^{floor(K/2)} / (1 - q).
        let n = chain.len();
        let k = chain.inner().to_dense();
        let mut k2 = vec![0.0; n * n];
        for i in 0..n {
            for l in 0..n {
                for j in 0..n {
                    k2[i * n + j] += k[i * n + l] * k[l * n + j];
                }
            }
        }
        let q = (0..n)
            .map(|i| k2[i * n..(i + 1) * n].iter().sum::<f64>())
            .fold(0.0, f64::max);
        assert!(q < 1.0);
        let mut power = vec![0.0; n * n];
        for i in 0..n {
            power[i * n + i] = 1.0;
        }
        let mut sum = power.clone();
        let mut order = 0;
        while 2.0 * q.powi(order / 2) / (1.0 - q) > 1e-12 {
            let mut next = vec![0.0; n * n];
            for i in 0..n {
                for l in 0..n {
                    let a = power[i * n + l];
                    if a == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        next[i * n + j] += a * k[l * n + j];
                    }
                }
            }
            power = next;
            for (s, p) in sum.iter_mut().zip(&power) {
                *s += p;
            }
            order += 1;
        }
        for i in 0..n {
            for j in 0..n {
                assert!((sum[i * n + j] - g.inner(i, j)).abs() < 1e-10);
            }
        }
        let o = chain.index_of(&Site::origin(3)).unwrap();
        assert!((g.row_sums()[o] - 2.4).abs() < 1e-12);
    }

    #[test]
    fn sandwich_and_optional_stopping() {
        for l in 2..=10 {
            let b = Ball::new(Site::origin(3), l as f64).unwrap();
            let chain = AbsorbingChain::on_ball(&srw(), &b).unwrap();
            let t = chain.mean_exit_times().unwrap();
            let o = chain.index_of(&Site::origin(3)).unwrap();
            let lf = l as f64;
            assert!(
                t[o] >= lf * lf && t[o] <= (lf + 1.0) * (lf + 1.0),
                "L={l}: {}",
                t[o]
            );
            if l <= 6 {
                let m = exit_measure_on_chain(&chain, &Site::origin(3)).unwrap();
                assert!((m.total() - 1.0).abs() < 1e-12);
                let os = optional_stopping_value(&m, &b, &Site::origin(3));
                assert!((os - t[o]).abs() < 1e-9, "L={l}: {os} vs {}", t[o]);
            }
        }
    }

    #[test]
    fn quenched_martingale_bound_and_normalization() {
        let spec = EnvironmentSpec::new(3, 0.05, Family::PairUniform, 7).unwrap();
        let env = Environment::new(spec).unwrap();
        let b = Ball::new(Site::origin(3), 6.0).unwrap();
        let chain = AbsorbingChain::on_ball(&env, &b).unwrap();
        let t = chain.mean_exit_times().unwrap();
        let bound = 3.0 / (1.0 - 0.3) * 49.0;
        assert!(t.iter().all(|&v| v <= bound));
        let x = Site::new(&[2, -1, 3]);
        let m = exit_measure_on_chain(&chain, &x).unwrap();
        assert!((m.total() - 1.0).abs() < 1e-12);
        assert!(m.sites.iter().all(|z| b.boundary_index_of(z).is_some()));
    }

    #[test]
    fn green_exit_consistency() {
        let spec = EnvironmentSpec::new(3, 0.05, Family::PairUniform, 3).unwrap();
        let env = Environment::new(spec).unwrap();
        let b = Ball::new(Site::origin(3), 4.0).unwrap();
        let g = green_from_source(&env, &b).unwrap();
        let x = Site::new(&[1, 1, 0]);
        let m = exit_measure_from_source(&env, &b, &x).unwrap();
        for (z, p) in m.sites.iter().zip(&m.probs) {
            assert!((g.get(&x, z) - p).abs() < 1e-12);
        }
        let t = mean_exit_time_from_source(&env, &b, &x).unwrap();
        let i = b.index_of(&x).unwrap();
        assert!((g.row_sums()[i] - t).abs() < 1e-10);
        assert!(g.get(&x, &x) >= 1.0);
    }

    #[test]
    fn iterative_and_dense_agree() {
        let spec = EnvironmentSpec::new(3, 0.05, Family::PairUniform, 5).unwrap();
        let env = Environment::new(spec).unwrap();
        let b = Ball::new(Site::origin(3), 5.0).unwrap();
        assert!(b.interior().len() > DENSE_LIMIT);
        let chain = AbsorbingChain::on_ball(&env, &b).unwrap();
        let t_iter = chain.mean_exit_times().unwrap();
        let n = chain.len();
        let mut a = chain.inner().to_dense();
        a.iter_mut().for_each(|v| *v = -*v);
        for i in 0..n {
            a[i * n + i] += 1.0;
        }
        let t_dense = DenseLu::new(n, &a).unwrap().solve(&vec![1.0; n]);
        for (p, q) in t_iter.iter().zip(&t_dense) {
            assert!((p - q).abs() < 1e-9 * q);
        }
    }

    #[test]
    fn symmetric_kernel_validation() {
        assert!(
            symmetric_kernel(&[0.2, 0.1, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0], 0.1).is_err()
        );
        assert!(symmetric_kernel(&[0.3, 0.3, 0.1, 0.1, 0.1, 0.1], 0.02).is_err());
        let p = symmetric_kernel(&[1.0 / 6.0; 6], 0.02).unwrap();
        let b = Ball::new(Site::origin(3), 3.0).unwrap();
        let a = mean_exit_time_from_source(&p, &b, &Site::origin(3)).unwrap();
        let env = Environment::new(EnvironmentSpec::srw(3)).unwrap();
        let c = mean_exit_time_from_source(&env, &b, &Site::origin(3)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn csv_exports() {
        let b = Ball::new(Site::origin(3), 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = exit_measure_from_source(&srw(), &b, &Site::origin(3)).unwrap();
        m.write_csv(&dir.path().join("exit.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("exit.csv")).unwrap();
        assert!(text.starts_with("z1,z2,z3,prob\n"));
        assert_eq!(text.lines().count(), 19);
        let g = green_from_source(&srw(), &b).unwrap();
        g.write_csv(&dir.path().join("green.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("green.csv")).unwrap();
        assert!(text.starts_with("x1,x2,x3,y1,y2,y3,value\n"));
    }
}
