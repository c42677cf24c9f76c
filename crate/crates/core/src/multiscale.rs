//! The scale recursion `L ↦ p_L`, estimates of `p_∞`, `Λ` and `D`, the `D*`
//! total-variation diagnostics, Condition C2 statistics and the good/bad
//! classification of sites with goodified kernels.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coarse_grain::{
    build_coarse, coarse_kernel_row, density, CoarseKernel, CoarseScheme, LocalSolver, ScaleParams,
    SetExit, WeightLookup, DEFAULT_NODES,
};
use crate::environment::{
    EnvWindow, Environment, EnvironmentSpec, SiteDistribution, TransitionSource,
};
use crate::error::{Result, RwreError};
use crate::exact_solver::{
    exit_measure_from_source, mean_exit_time_from_source, AbsorbingChain, KernelKind, KernelTable,
};
use crate::green_analysis::homogeneous_coarse_step;
use crate::lattice::{radius_to_r2, Ball, Site};
use crate::rng::{hash_words, tag};
use crate::stats::{bootstrap_stderr, quantile, weighted_linear_fit, MeanEstimate};
use crate::walk_engine::{default_step_cap, run_to_exit_radius, WalkStream};

/// Scales at or below `L_0` use simple random walk.
pub const DEFAULT_L0: f64 = 8.0;
pub const BOOTSTRAP_RESAMPLES: usize = 200;
pub const DEFAULT_DELTA: f64 = 0.1;
pub const DEFAULT_ETA: f64 = 0.5;

/// `p(e_i) = ½ Σ_y π(x, y) (y - x)_i² / |y - x|²`, rescaled so that
/// `2 Σ_i p(e_i) = 1` exactly.
pub fn axis_weights(row: &[(Site, f64)], x: &Site) -> Vec<f64> {
    let d = x.dim();
    let mut acc = vec![0.0; d];
    for (y, w) in row {
        let v = y.sub(x);
        let n2 = v.norm2();
        if n2 == 0 {
            continue;
        }
        for (i, a) in acc.iter_mut().enumerate() {
            *a += 0.5 * w * (v.get(i) as f64).powi(2) / n2 as f64;
        }
    }
    normalize_axes(acc)
}

fn normalize_axes(mut acc: Vec<f64>) -> Vec<f64> {
    let total: f64 = 2.0 * acc.iter().sum::<f64>();
    if total > 0.0 {
        for a in &mut acc {
            *a /= total;
        }
    }
    acc
}

/// How `E[Π̂_L(0, ·)]` is evaluated in each environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerMethod {
    Exact,
    Mc { reps: usize },
}

/// The `k`-th environment of an ensemble drawn under `spec`.
pub fn ensemble_member(spec: &EnvironmentSpec, k: u64) -> EnvironmentSpec {
    spec.with_seed(hash_words(&[spec.master_seed, tag::ENSEMBLE, k]))
}

/// Estimate of `p_L` from an environment ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelEstimate {
    pub l: f64,
    pub axis: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_envs: usize,
    pub per_env: Vec<Vec<f64>>,
}

impl KernelEstimate {
    pub fn kernel(&self) -> Result<SiteDistribution> {
        SiteDistribution::symmetric(&self.axis)
    }

    /// `|Σ_e p_L(e) - 1|`.
    pub fn normalization_error(&self) -> f64 {
        (2.0 * self.axis.iter().sum::<f64>() - 1.0).abs()
    }
}

fn mc_axis_weights<S: TransitionSource + ?Sized>(
    env: &S,
    h: f64,
    l: f64,
    reps: usize,
    seed: u64,
    eps: f64,
) -> Result<Vec<f64>> {
    let d = env.dim();
    let origin = Site::origin(d);
    let mut acc = vec![0.0; d];
    for r in 0..reps as u64 {
        let mut stream = WalkStream::salted(seed, tag::RADIUS, r);
        let t = h * density().sample(stream.uniform());
        // V_t(0) ∩ V_L(0) is the smaller of the two concentric balls.
        let radius = t.min(l);
        let cap = default_step_cap(d, eps, radius);
        let exit = run_to_exit_radius(env, &origin, &origin, radius, cap, &mut stream)?;
        let y = exit.exit_site;
        let n2 = y.norm2() as f64;
        for (i, a) in acc.iter_mut().enumerate() {
            *a += 0.5 * (y.get(i) as f64).powi(2) / n2;
        }
    }
    Ok(normalize_axes(acc))
}

/// `p_L(±e_i) = ½ Σ_y E[Π̂_L(0, y)] y_i²/|y|²` for `L > L_0`, and `1/(2d)`
/// otherwise. Environments are processed in parallel.
pub fn kernel_recursion_step(
    spec: &EnvironmentSpec,
    l: f64,
    n_envs: usize,
    inner: InnerMethod,
    params: ScaleParams,
    l0: f64,
) -> Result<KernelEstimate> {
    spec.validate()?;
    let d = spec.d;
    if l <= l0 {
        return Ok(KernelEstimate {
            l,
            axis: vec![1.0 / (2 * d) as f64; d],
            stderr: vec![0.0; d],
            n_envs: 0,
            per_env: Vec::new(),
        });
    }
    if n_envs == 0 {
        return Err(RwreError::InvalidArgument("n_envs must be positive".into()));
    }
    if let InnerMethod::Mc { reps } = inner {
        if reps == 0 {
            return Err(RwreError::InvalidArgument(
                "Monte Carlo inner method needs reps > 0".into(),
            ));
        }
    }
    let scheme = CoarseScheme::new(d, l, params)?;
    let origin = Site::origin(d);
    let h = scheme.h_at(&origin)?;
    let per_env: Vec<Vec<f64>> = (0..n_envs as u64)
        .into_par_iter()
        .map(|k| {
            let member = ensemble_member(spec, k);
            let env = Environment::new(member)?;
            match inner {
                InnerMethod::Exact => {
                    let (row, _) = coarse_kernel_row(&env, &scheme, &origin)?;
                    Ok(axis_weights(&row, &origin))
                }
                InnerMethod::Mc { reps } => {
                    mc_axis_weights(&env, h, l, reps, member.master_seed, spec.epsilon)
                }
            }
        })
        .collect::<Result<_>>()?;
    let mut axis = Vec::with_capacity(d);
    let mut stderr = Vec::with_capacity(d);
    for i in 0..d {
        let col: Vec<f64> = per_env.iter().map(|v| v[i]).collect();
        axis.push(MeanEstimate::from_samples(&col).mean);
        stderr.push(if col.len() > 1 {
            bootstrap_stderr(
                &col,
                BOOTSTRAP_RESAMPLES,
                hash_words(&[spec.master_seed, l.to_bits(), i as u64]),
            )
        } else {
            0.0
        });
    }
    Ok(KernelEstimate {
        l,
        axis,
        stderr,
        n_envs,
        per_env,
    })
}

/// `max_i |2p(e_i) - Σ_y π^{(p)}_{V_R}(0, y)(y_i/R)²|` for a homogeneous
/// symmetric kernel.
pub fn kernel_recovery_residual(p: &SiteDistribution, radius: f64) -> Result<f64> {
    let d = p.dim();
    let ball = Ball::new(Site::origin(d), radius)?;
    let m = exit_measure_from_source(p, &ball, &Site::origin(d))?;
    Ok((0..d)
        .map(|i| {
            let rec: f64 = m
                .sites
                .iter()
                .zip(&m.probs)
                .map(|(y, w)| w * (y.get(i) as f64 / radius).powi(2))
                .sum();
            (2.0 * p.axis(i) - rec).abs()
        })
        .fold(0.0, f64::max))
}

/// `f_η(L) = (η/3) Σ_{k=1}^{⌈log L⌉} k^{-3/2}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaSchedule {
    pub eta: f64,
}

impl EtaSchedule {
    pub fn new(eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta < 1.0) {
            return Err(RwreError::InvalidArgument(format!(
                "eta must lie in (0, 1), got {eta}"
            )));
        }
        Ok(Self { eta })
    }

    /// The sum always has at least one term, so `f_η ≥ η/3` for every `L`.
    pub fn f(&self, l: f64) -> f64 {
        let n = (l.max(1.0).ln().ceil() as i64).max(1);
        self.eta / 3.0 * (1..=n).map(|k| (k as f64).powf(-1.5)).sum::<f64>()
    }
}

/// Condition C2 audit over an ensemble of quenched mean exit times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C2Report {
    pub l: f64,
    pub eta: f64,
    pub f_eta: f64,
    pub srw_mean: f64,
    pub pass_fraction: f64,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    /// `max_ω |E_{0,ω}[τ_L] - mean over ω|`.
    pub max_deviation: f64,
}

/// Fraction of environments with `E_{0,ω}[τ_L] ∈ [1 ± f_η(L)] E_0[τ_L]`.
pub fn c2_statistic(quenched: &[f64], srw_mean: f64, l: f64, eta: f64) -> Result<C2Report> {
    let sched = EtaSchedule::new(eta)?;
    if quenched.is_empty() {
        return Err(RwreError::InvalidArgument("no quenched values".into()));
    }
    let f = sched.f(l);
    let pass = quenched
        .iter()
        .filter(|&&v| v >= (1.0 - f) * srw_mean && v <= (1.0 + f) * srw_mean)
        .count();
    let est = MeanEstimate::from_samples(quenched);
    let std = est.stderr * (quenched.len() as f64).sqrt();
    Ok(C2Report {
        l,
        eta,
        f_eta: f,
        srw_mean,
        pass_fraction: pass as f64 / quenched.len() as f64,
        n: quenched.len(),
        mean: est.mean,
        std: if std.is_finite() { std } else { 0.0 },
        max_deviation: quenched
            .iter()
            .map(|v| (v - est.mean).abs())
            .fold(0.0, f64::max),
    })
}

/// Reference cutoffs `(log L)^{-9 + 9(i-1)/4}` for `i = 1..4` and the
/// constant `ι = (log L_0)^{-7}`; tabulated, not certified.
pub fn c1_reference_cutoffs(l: f64, l0: f64) -> (Vec<f64>, f64) {
    let ll = l.ln();
    let cut = (1..=4)
        .map(|i| ll.powf(-9.0 + 9.0 * (i as f64 - 1.0) / 4.0))
        .collect();
    (cut, l0.ln().powi(-7))
}

/// Smoothed and unsmoothed `D*` for one environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DstarValue {
    pub smoothed: f64,
    pub unsmoothed: f64,
}

/// `sup_{x ∈ V_{L/5}} ‖(Π_{V_L} - π^{(p)}_{V_L}) π̂^{(q)}_ψ(x, ·)‖₁` for
/// constant `ψ ≡ m`, and the same without the smoothing step.
pub fn dstar_statistic<S: TransitionSource + ?Sized>(
    env: &S,
    l: f64,
    p: &SiteDistribution,
    m: f64,
    q: &SiteDistribution,
) -> Result<DstarValue> {
    if !(l > 1.0) {
        return Err(RwreError::ScaleGuard(format!("D* needs L > 1, got {l}")));
    }
    if !(m > l / 10.0 && m < 5.0 * l) || m < 1.0 {
        return Err(RwreError::ScaleGuard(format!(
            "constant radius {m} must lie in (L/10, 5L) and be at least 1 for L = {l}"
        )));
    }
    let d = env.dim();
    let ball = Ball::new(Site::origin(d), l)?;
    let chain_env = AbsorbingChain::on_ball(env, &ball)?;
    let chain_p = AbsorbingChain::on_ball(p, &ball)?;
    let step = homogeneous_coarse_step(q, m, DEFAULT_NODES)?;
    let r2 = radius_to_r2(l / 5.0);
    let starts: Vec<Site> = ball
        .interior()
        .iter()
        .filter(|x| x.norm2() <= r2)
        .copied()
        .collect();
    let values: Vec<DstarValue> = starts
        .par_iter()
        .map(|x| {
            let a = exits_of(&chain_env, x)?;
            let b = exits_of(&chain_p, x)?;
            let mut diff: HashMap<Site, f64> = HashMap::new();
            for (z, v) in a {
                *diff.entry(z).or_insert(0.0) += v;
            }
            for (z, v) in b {
                *diff.entry(z).or_insert(0.0) -= v;
            }
            let unsmoothed = diff.values().map(|v| v.abs()).sum();
            let mut smooth: HashMap<Site, f64> = HashMap::new();
            for (z, v) in &diff {
                if *v == 0.0 {
                    continue;
                }
                for (off, w) in step.offsets.iter().zip(&step.probs) {
                    *smooth.entry(z.add(off)).or_insert(0.0) += v * w;
                }
            }
            Ok(DstarValue {
                smoothed: smooth.values().map(|v| v.abs()).sum(),
                unsmoothed,
            })
        })
        .collect::<Result<_>>()?;
    Ok(values.iter().fold(
        DstarValue {
            smoothed: 0.0,
            unsmoothed: 0.0,
        },
        |a, v| DstarValue {
            smoothed: a.smoothed.max(v.smoothed),
            unsmoothed: a.unsmoothed.max(v.unsmoothed),
        },
    ))
}

fn exits_of(chain: &AbsorbingChain, x: &Site) -> Result<Vec<(Site, f64)>> {
    let xi = chain.index_of(x).ok_or_else(|| {
        RwreError::InvalidArgument(format!("{x} is not inside the absorbing set"))
    })?;
    let g = chain.green_row(xi)?;
    Ok(chain
        .exits()
        .iter()
        .copied()
        .zip(chain.exit_from_green_row(&g))
        .collect())
}

/// `p_L` as a function of the scale: simple random walk up to `L_0`, then
/// the estimate of the largest rung not exceeding the scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSchedule {
    pub d: usize,
    pub l0: f64,
    pub rungs: Vec<(f64, Vec<f64>)>,
}

impl KernelSchedule {
    pub fn srw(d: usize, l0: f64) -> Self {
        Self {
            d,
            l0,
            rungs: Vec::new(),
        }
    }

    pub fn from_estimates(d: usize, l0: f64, estimates: &[KernelEstimate]) -> Self {
        let mut rungs: Vec<(f64, Vec<f64>)> =
            estimates.iter().map(|e| (e.l, e.axis.clone())).collect();
        rungs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self { d, l0, rungs }
    }

    pub fn at(&self, scale: f64) -> SiteDistribution {
        if scale > self.l0 {
            if let Some((_, axis)) = self
                .rungs
                .iter()
                .rev()
                .find(|(l, _)| *l <= scale && *l > self.l0)
            {
                if let Ok(p) = SiteDistribution::symmetric(axis) {
                    return p;
                }
            }
        }
        SiteDistribution::uniform(self.d)
    }
}

/// Labels of one interior site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointLabel {
    pub site: Site,
    pub good: bool,
    pub space_good: bool,
    pub time_good: bool,
    /// Largest unsmoothed exit-law distance over the radii of `x` itself.
    pub tv: f64,
    /// Smoothed distance, when `d_L(x) > 2 r_L`.
    pub smoothed: Option<f64>,
    /// Largest `|E_{x,ω}[τ]/E_x[τ] - 1|` over the radii of `x` itself.
    pub time_deviation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GoodBadSummary {
    pub sites: usize,
    pub bad: usize,
    pub space_bad: usize,
    pub time_bad: usize,
}

/// Labels for every site of `V_L` with the coarse and goodified kernels.
#[derive(Debug, Clone)]
pub struct Classification {
    pub l: f64,
    pub delta: f64,
    pub eta: f64,
    pub labels: Vec<PointLabel>,
    pub summary: GoodBadSummary,
    pub coarse: KernelTable,
    pub reference: KernelTable,
    pub goodified: KernelTable,
}

impl Classification {
    pub fn bad_sites(&self) -> Vec<Site> {
        self.labels
            .iter()
            .filter(|l| !l.good)
            .map(|l| l.site)
            .collect()
    }
}

/// Replaces the rows of `kernel` at `bad` sites by the rows of `reference`.
pub fn goodify(kernel: &KernelTable, reference: &KernelTable, bad: &[Site]) -> Result<KernelTable> {
    let mut bad = bad.to_vec();
    bad.sort();
    let domain = kernel.domain().to_vec();
    let rows = domain
        .iter()
        .map(|x| {
            let src = if bad.binary_search(x).is_ok() {
                reference
            } else {
                kernel
            };
            src.row(x)
                .ok_or_else(|| RwreError::ShapeMismatch(format!("{x} missing from a kernel table")))
        })
        .collect::<Result<_>>()?;
    Ok(KernelTable::from_rows(KernelKind::Goodified, domain, rows))
}

type StatKey = (Site, i64, usize);

#[derive(Debug, Clone, Copy)]
struct LocalStats {
    tv: f64,
    time_ratio: f64,
}

/// Exit-law distances and mean-time ratios for single balls `V_t(y)`,
/// shared across all checks of one classification.
struct LocalOracle {
    solver: LocalSolver,
    env: WeightLookup,
    srw: WeightLookup,
    kernels: Vec<SiteDistribution>,
    cache: Mutex<HashMap<StatKey, LocalStats>>,
}

fn tv_offsets(a: &SetExit, b: &SetExit) -> f64 {
    let (mut i, mut j, mut s) = (0, 0, 0.0);
    while i < a.exits.len() || j < b.exits.len() {
        let ka = a.exits.get(i).map(|e| e.0).unwrap_or(u32::MAX);
        let kb = b.exits.get(j).map(|e| e.0).unwrap_or(u32::MAX);
        if ka == kb {
            s += (a.exits[i].1 - b.exits[j].1).abs();
            i += 1;
            j += 1;
        } else if ka < kb {
            s += a.exits[i].1.abs();
            i += 1;
        } else {
            s += b.exits[j].1.abs();
            j += 1;
        }
    }
    s
}

impl LocalOracle {
    fn stats(&self, y: &Site, r2s: &[i64], qid: usize) -> Result<Vec<LocalStats>> {
        let missing: Vec<i64> = {
            let cache = self.cache.lock().expect("cache lock");
            r2s.iter()
                .copied()
                .filter(|r2| !cache.contains_key(&(*y, *r2, qid)))
                .collect()
        };
        if !missing.is_empty() {
            let a = self.solver.solve_sets(&self.env, y, &missing, None)?;
            let q = WeightLookup::Homogeneous(self.kernels[qid]);
            let b = self.solver.solve_sets(&q, y, &missing, None)?;
            let c = self.solver.solve_sets(&self.srw, y, &missing, None)?;
            let mut cache = self.cache.lock().expect("cache lock");
            for (k, r2) in missing.iter().enumerate() {
                cache.insert(
                    (*y, *r2, qid),
                    LocalStats {
                        tv: tv_offsets(&a[k], &b[k]),
                        time_ratio: a[k].mean_time / c[k].mean_time,
                    },
                );
            }
        }
        let cache = self.cache.lock().expect("cache lock");
        Ok(r2s.iter().map(|r2| cache[&(*y, *r2, qid)]).collect())
    }

    fn coarse_row(
        &self,
        weights: &WeightLookup,
        scheme: &CoarseScheme,
        y: &Site,
    ) -> Result<Vec<(Site, f64)>> {
        if !scheme.contains(y) {
            return Ok(vec![(*y, 1.0)]);
        }
        let pieces = scheme.pieces(scheme.h_at(y)?);
        let row = self.solver.coarse_row(
            weights,
            y,
            &pieces,
            Some((scheme.center(), scheme.radius2())),
        )?;
        Ok(self.solver.to_sites(y, &row.exits))
    }

    /// `‖(Π̂ - π̂^{(q)}) π̂^{(q)}(y, ·)‖₁` on `scheme`.
    fn smoothed_distance(&self, scheme: &CoarseScheme, y: &Site, qid: usize) -> Result<f64> {
        let q = WeightLookup::Homogeneous(self.kernels[qid]);
        let mut mu: HashMap<Site, f64> = HashMap::new();
        for (z, v) in self.coarse_row(&self.env, scheme, y)? {
            *mu.entry(z).or_insert(0.0) += v;
        }
        for (z, v) in self.coarse_row(&q, scheme, y)? {
            *mu.entry(z).or_insert(0.0) -= v;
        }
        compose_distance(&mu, |z| self.coarse_row(&q, scheme, z))
    }
}

fn compose_distance<F>(mu: &HashMap<Site, f64>, row: F) -> Result<f64>
where
    F: Fn(&Site) -> Result<Vec<(Site, f64)>>,
{
    let mut out: HashMap<Site, f64> = HashMap::new();
    for (z, v) in mu {
        if v.abs() < 1e-15 {
            continue;
        }
        for (w, p) in row(z)? {
            *out.entry(w).or_insert(0.0) += v * p;
        }
    }
    Ok(out.values().map(|v| v.abs()).sum())
}

/// `(log h)^{-9}`; no constraint when `h ≤ 1`.
fn smoothing_threshold(h: f64) -> f64 {
    if h > 1.0 {
        h.ln().powi(-9)
    } else {
        f64::INFINITY
    }
}

fn set_radius2(scheme: &CoarseScheme, h: f64) -> Vec<i64> {
    scheme.pieces(h).iter().map(|p| p.r2).collect()
}

/// Classifies every `x ∈ V_L` as good, space-good and time-good, and builds
/// the goodified kernel `Π̂^g_L`. `schedule` supplies `p_{h}` at each scale.
pub fn classify_points(
    env: &Environment,
    l: f64,
    delta: f64,
    eta: f64,
    params: ScaleParams,
    schedule: &KernelSchedule,
) -> Result<Classification> {
    let d = env.dim();
    let sched = EtaSchedule::new(eta)?;
    if !(delta > 0.0) {
        return Err(RwreError::InvalidArgument(format!(
            "delta must be positive, got {delta}"
        )));
    }
    let scheme = CoarseScheme::new(d, l, params)?;
    let h_max = scheme.max_h();
    let origin = Site::origin(d);
    let interior = Ball::new(origin, l)?.interior().to_vec();
    // Register every kernel the checks can ask for, and the largest radius
    // any nested scheme needs, before building the shared oracle.
    let mut kernels: Vec<SiteDistribution> = Vec::new();
    let mut kernel_id = |q: SiteDistribution| match kernels.iter().position(|k| *k == q) {
        Some(i) => i,
        None => {
            kernels.push(q);
            kernels.len() - 1
        }
    };
    let mut site_q = Vec::with_capacity(interior.len());
    for x in &interior {
        site_q.push(kernel_id(schedule.at(scheme.h_at(x)?)));
    }
    let mut h_need = h_max;
    let mut bulk_q: HashMap<(Site, i64), Vec<(Site, usize)>> = HashMap::new();
    for x in &interior {
        if scheme.d_l(x)? <= 2.0 * scheme.s_l() {
            continue;
        }
        for r2 in set_radius2(&scheme, scheme.h_at(x)?) {
            let nested = scheme.inner(x, (r2 as f64).sqrt())?;
            h_need = h_need.max(nested.max_h());
            let mut ys = Vec::new();
            for y in Ball::new(*x, (r2 as f64).sqrt())?.interior() {
                ys.push((*y, kernel_id(schedule.at(nested.h_at(y)?))));
            }
            bulk_q.insert((*x, r2), ys);
        }
    }
    let reach = l.floor() as i32 + (2.0 * h_max + 2.0 * h_need).ceil() as i32 + 3;
    let env_weights = match env.homogeneous() {
        Some(p) => WeightLookup::Homogeneous(p),
        None => WeightLookup::Window(EnvWindow::new(env, &origin, reach)?),
    };
    let oracle = Arc::new(LocalOracle {
        solver: LocalSolver::new(d, 2.0 * h_need),
        env: env_weights,
        srw: WeightLookup::Homogeneous(SiteDistribution::uniform(d)),
        kernels,
        cache: Mutex::new(HashMap::new()),
    });

    let env_kernel = build_coarse(env, &scheme)?;
    let mut ref_tables: HashMap<usize, CoarseKernel> = HashMap::new();
    for qid in site_q
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
    {
        ref_tables.insert(qid, build_coarse(&oracle.kernels[qid], &scheme)?);
    }
    let f_outer = sched.f(scheme.s_l());

    let labels: Vec<PointLabel> = interior
        .par_iter()
        .zip(&site_q)
        .map(|(x, &qid)| {
            let h = scheme.h_at(x)?;
            let dl = scheme.d_l(x)?;
            let r2s = set_radius2(&scheme, h);
            let own = oracle.stats(x, &r2s, qid)?;
            let tv = own.iter().map(|s| s.tv).fold(0.0, f64::max);
            let time_deviation = own
                .iter()
                .map(|s| (s.time_ratio - 1.0).abs())
                .fold(0.0, f64::max);
            let mut good = tv <= delta;
            let mut smoothed = None;
            if dl > 2.0 * scheme.r_l() {
                let table = &ref_tables[&qid];
                let mut mu: HashMap<Site, f64> = HashMap::new();
                for (z, v) in env_kernel.row(x) {
                    *mu.entry(z).or_insert(0.0) += v;
                }
                for (z, v) in table.row(x) {
                    *mu.entry(z).or_insert(0.0) -= v;
                }
                let s = compose_distance(&mu, |z| Ok(table.row(z)))?;
                good &= s <= smoothing_threshold(h);
                smoothed = Some(s);
            }
            let mut time_good = time_deviation <= f_outer;
            let mut space_good = good;
            if dl > 2.0 * scheme.s_l() {
                for r2 in &r2s {
                    let t = (*r2 as f64).sqrt();
                    let nested = scheme.inner(x, t)?;
                    let f_inner = sched.f(nested.s_l());
                    for (y, qy) in &bulk_q[&(*x, *r2)] {
                        let hy = nested.h_at(y)?;
                        let inner_stats = oracle.stats(y, &set_radius2(&nested, hy), *qy)?;
                        if space_good {
                            space_good &= inner_stats.iter().all(|s| s.tv <= delta);
                            if space_good && t - y.sub(x).norm() > 2.0 * nested.r_l() {
                                let s = oracle.smoothed_distance(&nested, y, *qy)?;
                                space_good &= s <= smoothing_threshold(hy);
                            }
                        }
                        if time_good {
                            time_good &= inner_stats
                                .iter()
                                .all(|s| (s.time_ratio - 1.0).abs() <= f_inner);
                        }
                    }
                }
            }
            Ok(PointLabel {
                site: *x,
                good,
                space_good,
                time_good,
                tv,
                smoothed,
                time_deviation,
            })
        })
        .collect::<Result<_>>()?;

    let summary = GoodBadSummary {
        sites: labels.len(),
        bad: labels.iter().filter(|l| !l.good).count(),
        space_bad: labels.iter().filter(|l| !l.space_good).count(),
        time_bad: labels.iter().filter(|l| !l.time_good).count(),
    };
    let coarse = env_kernel.to_kernel_table();
    let p = schedule.at(h_max);
    let reference = build_coarse(&p, &scheme)?.to_kernel_table();
    let bad: Vec<Site> = labels.iter().filter(|l| !l.good).map(|l| l.site).collect();
    let goodified = goodify(&coarse, &reference, &bad)?;
    Ok(Classification {
        l,
        delta,
        eta,
        labels,
        summary,
        coarse,
        reference,
        goodified,
    })
}

/// Settings for [`run_ladder`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LadderConfig {
    pub ladder: Vec<f64>,
    pub n_envs: usize,
    pub inner: InnerMethod,
    pub params: ScaleParams,
    pub l0: f64,
    pub eta: f64,
    pub delta: f64,
    /// Environments per rung for the `D*` summary; 0 skips it.
    pub dstar_envs: usize,
    /// Environments per rung for the good/bad summary; 0 skips it.
    pub classify_envs: usize,
    /// Cap on the number of per-environment solves over the whole ladder.
    pub budget: Option<usize>,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self {
            ladder: vec![8.0, 12.0, 16.0, 24.0, 32.0],
            n_envs: 200,
            inner: InnerMethod::Exact,
            params: ScaleParams::DESK,
            l0: DEFAULT_L0,
            eta: DEFAULT_ETA,
            delta: DEFAULT_DELTA,
            dstar_envs: 0,
            classify_envs: 0,
            budget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DstarSummary {
    pub n: usize,
    pub m: f64,
    /// Quantiles at 0, 0.25, 0.5, 0.75 and 1.
    pub smoothed: Vec<f64>,
    pub unsmoothed: Vec<f64>,
}

/// One rung of the ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleLadderRecord {
    pub l: f64,
    pub p_l: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_envs: usize,
    /// Mean of `E_{0,ω}[τ_L] / E_0[τ_L]` over environments.
    pub d_estimate: f64,
    pub d_stderr: f64,
    /// Mean of `E_{0,ω}[τ_L] / L²`.
    pub sojourn_over_l2: f64,
    pub srw_sojourn: f64,
    pub c2: C2Report,
    pub dstar_summary: Option<DstarSummary>,
    pub goodbad_summary: Option<GoodBadSummary>,
}

/// `Λ = diag(2 p_∞(e_i))`, `D` and the limiting covariance `D^{-1} Λ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionEstimate {
    pub p_infinity: Vec<f64>,
    pub p_infinity_stderr: Vec<f64>,
    pub lambda: Vec<f64>,
    pub d: f64,
    pub d_stderr: f64,
    /// `D` at the largest rung, before extrapolation.
    pub d_last: f64,
    pub d_last_stderr: f64,
    pub extrapolated: bool,
    pub covariance: Vec<f64>,
    /// `(L_{k+1}, max_i |p_{L_{k+1}}(e_i) - p_{L_k}(e_i)|, stderr)`.
    pub cauchy_increments: Vec<(f64, f64, f64)>,
}

impl DiffusionEstimate {
    pub fn trace_lambda(&self) -> f64 {
        self.lambda.iter().sum()
    }
}

fn quartiles(xs: &[f64]) -> Vec<f64> {
    [0.0, 0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|&q| quantile(xs, q))
        .collect()
}

/// Runs the recursion over an increasing ladder of scales. Rungs are
/// sequential; environments within a rung run in parallel.
pub fn run_ladder(
    spec: &EnvironmentSpec,
    cfg: &LadderConfig,
) -> Result<(Vec<ScaleLadderRecord>, DiffusionEstimate)> {
    spec.validate()?;
    if cfg.ladder.is_empty() || cfg.ladder.windows(2).any(|w| w[1] <= w[0]) {
        return Err(RwreError::InvalidArgument(
            "ladder must be non-empty and increasing".into(),
        ));
    }
    if cfg.n_envs < 2 {
        return Err(RwreError::InvalidArgument(
            "n_envs must be at least 2".into(),
        ));
    }
    let per_rung = cfg.n_envs * 2 + cfg.dstar_envs + cfg.classify_envs;
    if let Some(b) = cfg.budget {
        let need = per_rung * cfg.ladder.len();
        if need > b {
            return Err(RwreError::BudgetExhausted(format!(
                "ladder needs {need} environment solves, budget is {b}"
            )));
        }
    }
    let d = spec.d;
    let origin = Site::origin(d);
    let mut records = Vec::with_capacity(cfg.ladder.len());
    let mut estimates: Vec<KernelEstimate> = Vec::new();
    for &l in &cfg.ladder {
        let est = kernel_recursion_step(spec, l, cfg.n_envs, cfg.inner, cfg.params, cfg.l0)?;
        let ball = Ball::new(origin, l)?;
        let srw_sojourn =
            mean_exit_time_from_source(&SiteDistribution::uniform(d), &ball, &origin)?;
        let quenched: Vec<f64> = (0..cfg.n_envs as u64)
            .into_par_iter()
            .map(|k| {
                let env = Environment::new(ensemble_member(spec, k))?;
                mean_exit_time_from_source(&env, &ball, &origin)
            })
            .collect::<Result<_>>()?;
        let ratios: Vec<f64> = quenched.iter().map(|v| v / srw_sojourn).collect();
        let d_est = MeanEstimate::from_samples(&ratios).mean;
        let d_se = bootstrap_stderr(
            &ratios,
            BOOTSTRAP_RESAMPLES,
            hash_words(&[spec.master_seed, tag::BOOTSTRAP, l.to_bits()]),
        );
        let c2 = c2_statistic(&quenched, srw_sojourn, l, cfg.eta)?;
        // Later rungs compare against the kernel of the previous rung.
        let previous = KernelSchedule::from_estimates(d, cfg.l0, &estimates);
        let p_prev = previous.at(l);
        let dstar_summary = if cfg.dstar_envs > 0 {
            let m = l / 5.0;
            let vals: Vec<DstarValue> = (0..cfg.dstar_envs as u64)
                .into_par_iter()
                .map(|k| {
                    let env = Environment::new(ensemble_member(spec, k))?;
                    dstar_statistic(&env, l, &p_prev, m, &p_prev)
                })
                .collect::<Result<_>>()?;
            let sm: Vec<f64> = vals.iter().map(|v| v.smoothed).collect();
            let un: Vec<f64> = vals.iter().map(|v| v.unsmoothed).collect();
            Some(DstarSummary {
                n: vals.len(),
                m,
                smoothed: quartiles(&sm),
                unsmoothed: quartiles(&un),
            })
        } else {
            None
        };
        let goodbad_summary = if cfg.classify_envs > 0 {
            let mut total = GoodBadSummary::default();
            for k in 0..cfg.classify_envs as u64 {
                let env = Environment::new(ensemble_member(spec, k))?;
                let c = classify_points(&env, l, cfg.delta, cfg.eta, cfg.params, &previous)?;
                total.sites += c.summary.sites;
                total.bad += c.summary.bad;
                total.space_bad += c.summary.space_bad;
                total.time_bad += c.summary.time_bad;
            }
            Some(total)
        } else {
            None
        };
        records.push(ScaleLadderRecord {
            l,
            p_l: est.axis.clone(),
            stderr: est.stderr.clone(),
            n_envs: cfg.n_envs,
            d_estimate: d_est,
            d_stderr: if d_se.is_finite() { d_se } else { 0.0 },
            sojourn_over_l2: MeanEstimate::from_samples(&quenched).mean / (l * l),
            srw_sojourn,
            c2,
            dstar_summary,
            goodbad_summary,
        });
        estimates.push(est);
    }
    let estimate = diffusion_estimate(&records)?;
    Ok((records, estimate))
}

/// `Λ` from the last rung, `D` by a fit of the per-rung ratios linear in
/// `1/log L` (three or more rungs) evaluated at `1/log L = 0`.
pub fn diffusion_estimate(records: &[ScaleLadderRecord]) -> Result<DiffusionEstimate> {
    let last = records
        .last()
        .ok_or_else(|| RwreError::InvalidArgument("no ladder records".into()))?;
    let p_inf = last.p_l.clone();
    let lambda: Vec<f64> = p_inf.iter().map(|p| 2.0 * p).collect();
    let mut cauchy = Vec::new();
    for w in records.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let (mut inc, mut se) = (0.0f64, 0.0f64);
        for i in 0..a.p_l.len() {
            let diff = (b.p_l[i] - a.p_l[i]).abs();
            if diff >= inc {
                inc = diff;
                se = (a.stderr[i].powi(2) + b.stderr[i].powi(2)).sqrt();
            }
        }
        cauchy.push((b.l, inc, se));
    }
    let (d, d_se, extrapolated) = if records.len() >= 3 {
        let xs: Vec<f64> = records.iter().map(|r| 1.0 / r.l.ln()).collect();
        let ys: Vec<f64> = records.iter().map(|r| r.d_estimate).collect();
        let weighted = records.iter().all(|r| r.d_stderr > 0.0);
        let ws: Vec<f64> = if weighted {
            records.iter().map(|r| r.d_stderr.powi(-2)).collect()
        } else {
            vec![1.0; records.len()]
        };
        let (a, _, se_a, _) = weighted_linear_fit(&xs, &ys, &ws);
        (a, if se_a.is_finite() { se_a } else { 0.0 }, true)
    } else {
        (last.d_estimate, last.d_stderr, false)
    };
    Ok(DiffusionEstimate {
        covariance: lambda.iter().map(|v| v / d).collect(),
        p_infinity_stderr: last.stderr.clone(),
        p_infinity: p_inf,
        lambda,
        d,
        d_stderr: d_se,
        d_last: last.d_estimate,
        d_last_stderr: last.d_stderr,
        extrapolated,
        cauchy_increments: cauchy,
    })
}

/// `ladder.csv` with one row per rung and axis.
pub fn write_ladder_csv(records: &[ScaleLadderRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["L", "axis", "p_L", "stderr", "D_est", "D_stderr", "n_envs"])?;
    for r in records {
        for (i, (p, se)) in r.p_l.iter().zip(&r.stderr).enumerate() {
            w.write_record([
                r.l.to_string(),
                (i + 1).to_string(),
                format!("{p:.15e}"),
                format!("{se:.6e}"),
                format!("{:.15e}", r.d_estimate),
                format!("{:.6e}", r.d_stderr),
                r.n_envs.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `diagnostics.json`: per-rung `D*` quantiles, good/bad counts and C2
/// audits, the diffusion estimate, and the reference C1 cutoffs.
pub fn write_diagnostics_json(
    records: &[ScaleLadderRecord],
    estimate: &DiffusionEstimate,
    cfg: &LadderConfig,
    path: &Path,
) -> Result<()> {
    let rungs: Vec<serde_json::Value> = records
        .iter()
        .map(|r| {
            let (cut, iota) = c1_reference_cutoffs(r.l, cfg.l0);
            serde_json::json!({
                "L": r.l,
                "dstar": r.dstar_summary,
                "goodbad": r.goodbad_summary,
                "c2": r.c2,
                "sojourn_over_L2": r.sojourn_over_l2,
                "srw_sojourn": r.srw_sojourn,
                "c1_reference_cutoffs": cut,
                "iota": iota,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "config": cfg,
        "rungs": rungs,
        "diffusion": estimate,
    });
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::Family;

    fn spec(eps: f64) -> EnvironmentSpec {
        EnvironmentSpec::new(3, eps, Family::PairUniform, 17).unwrap()
    }

    #[test]
    fn below_l0_is_srw() {
        let e = kernel_recursion_step(
            &spec(0.05),
            8.0,
            3,
            InnerMethod::Exact,
            ScaleParams::DESK,
            8.0,
        )
        .unwrap();
        assert_eq!(e.axis, vec![1.0 / 6.0; 3]);
        assert_eq!(e.n_envs, 0);
    }

    #[test]
    fn srw_kernel_is_isotropic_above_l0() {
        let e = kernel_recursion_step(
            &EnvironmentSpec::srw(3),
            10.0,
            2,
            InnerMethod::Exact,
            ScaleParams::DESK,
            8.0,
        )
        .unwrap();
        for a in &e.axis {
            assert!((a - 1.0 / 6.0).abs() < 1e-9, "{:?}", e.axis);
        }
        assert!(e.normalization_error() < 1e-12);
    }

    #[test]
    fn quenched_kernel_is_normalized_and_near_srw() {
        let e = kernel_recursion_step(
            &spec(0.05),
            10.0,
            6,
            InnerMethod::Exact,
            ScaleParams::DESK,
            8.0,
        )
        .unwrap();
        assert!(e.normalization_error() < 1e-9);
        for (a, se) in e.axis.iter().zip(&e.stderr) {
            assert!((a - 1.0 / 6.0).abs() < 0.05 && se.is_finite());
        }
        let mc = kernel_recursion_step(
            &EnvironmentSpec::srw(3),
            10.0,
            2,
            InnerMethod::Mc { reps: 4000 },
            ScaleParams::DESK,
            8.0,
        )
        .unwrap();
        for a in &mc.axis {
            // Each replica contributes at most 1/2 per axis.
            assert!((a - 1.0 / 6.0).abs() < 4.0 * 0.5 / (4000f64).sqrt());
        }
    }

    #[test]
    fn kernel_recovery_within_five_over_l() {
        for (axis, r) in [(vec![1.0 / 6.0; 3], 8.0), (vec![0.2, 0.15, 0.15], 10.0)] {
            let p = SiteDistribution::symmetric(&axis).unwrap();
            let res = kernel_recovery_residual(&p, r).unwrap();
            assert!(res <= 5.0 / r, "{res}");
        }
    }

    #[test]
    fn eta_schedule_bounds() {
        let s = EtaSchedule::new(0.5).unwrap();
        let mut prev = 0.0;
        for l in [0.5, 1.0, 2.0, 3.0, 10.0, 100.0, 1e6, 1e30] {
            let f = s.f(l);
            assert!(f >= 0.5 / 3.0 - 1e-15 && f < 0.5);
            assert!(f >= prev);
            prev = f;
        }
        assert!(EtaSchedule::new(1.0).is_err());
    }

    #[test]
    fn c2_on_srw_passes() {
        let r = c2_statistic(&[5.0, 5.0, 5.0], 5.0, 12.0, 0.5).unwrap();
        assert_eq!(r.pass_fraction, 1.0);
        assert_eq!(r.max_deviation, 0.0);
    }

    #[test]
    fn dstar_vanishes_on_homogeneous_and_contracts() {
        let srw = SiteDistribution::uniform(3);
        let z = dstar_statistic(&srw, 6.0, &srw, 2.0, &srw).unwrap();
        assert_eq!(z.unsmoothed, 0.0);
        assert_eq!(z.smoothed, 0.0);
        let env = Environment::new(spec(0.05)).unwrap();
        let v = dstar_statistic(&env, 6.0, &srw, 2.0, &srw).unwrap();
        assert!(v.unsmoothed > 0.0);
        assert!(v.smoothed <= v.unsmoothed + 1e-12);
        assert!(matches!(
            dstar_statistic(&env, 6.0, &srw, 0.5, &srw),
            Err(RwreError::ScaleGuard(_))
        ));
    }

    #[test]
    fn srw_points_are_all_good() {
        let env = Environment::new(EnvironmentSpec::srw(3)).unwrap();
        let c = classify_points(
            &env,
            6.0,
            0.1,
            0.5,
            ScaleParams::DESK,
            &KernelSchedule::srw(3, 8.0),
        )
        .unwrap();
        assert_eq!(c.summary.bad + c.summary.space_bad + c.summary.time_bad, 0);
        assert_eq!(c.goodified.matrix().values, c.coarse.matrix().values);
    }

    #[test]
    fn strong_disorder_creates_bad_points() {
        let env =
            Environment::new(EnvironmentSpec::new(3, 0.9 / 6.0, Family::PairUniform, 3).unwrap())
                .unwrap();
        let c = classify_points(
            &env,
            6.0,
            0.1,
            0.5,
            ScaleParams::DESK,
            &KernelSchedule::srw(3, 8.0),
        )
        .unwrap();
        assert!(c.summary.bad > 0);
        for x in c.bad_sites() {
            assert_eq!(c.goodified.row(&x), c.reference.row(&x));
        }
        let again = goodify(&c.goodified, &c.reference, &c.bad_sites()).unwrap();
        assert_eq!(again.matrix().values, c.goodified.matrix().values);
    }

    #[test]
    fn ladder_on_srw() {
        let cfg = LadderConfig {
            ladder: vec![6.0, 8.0, 10.0],
            n_envs: 2,
            ..LadderConfig::default()
        };
        let (recs, est) = run_ladder(&EnvironmentSpec::srw(3), &cfg).unwrap();
        for r in &recs {
            for a in &r.p_l {
                assert!((a - 1.0 / 6.0).abs() < 1e-9);
            }
            assert!((r.d_estimate - 1.0).abs() < 1e-12);
            assert_eq!(r.c2.pass_fraction, 1.0);
        }
        assert!((est.d - 1.0).abs() < 1e-9);
        assert!((est.trace_lambda() - 1.0).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        write_ladder_csv(&recs, &dir.path().join("ladder.csv")).unwrap();
        write_diagnostics_json(&recs, &est, &cfg, &dir.path().join("diagnostics.json")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("ladder.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 3);
    }

    #[test]
    fn ladder_rejects_bad_input() {
        let mut cfg = LadderConfig {
            ladder: vec![10.0, 8.0],
            ..LadderConfig::default()
        };
        assert!(run_ladder(&spec(0.01), &cfg).is_err());
        cfg.ladder = vec![8.0, 10.0];
        cfg.budget = Some(3);
        assert!(matches!(
            run_ladder(&spec(0.01), &cfg),
            Err(RwreError::BudgetExhausted(_))
        ));
    }
}
