//! Empirical checks of the quenched invariance principle: the randomized
//! coarse-grained walk, the counting-process law of large numbers, endpoint
//! covariance and marginal normality, the i.i.d. comparison walk and the
//! tightness tail.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::coarse_grain::density;
use crate::environment::{SiteDistribution, TransitionSource};
use crate::error::{Result, RwreError};
use crate::lattice::{radius_to_r2, Site};
use crate::rng::{tag, CounterRng};
use crate::stats::{ks_one_sample, linear_fit, pairwise_sum, KsResult, MeanEstimate};
use crate::walk_engine::{step, WalkStream};

/// Smallest admissible coarse scale `L_n`.
pub const MIN_SCALE: f64 = 16.0;

/// Significance used for the per-axis KS tests.
pub const KS_SIGNIFICANCE: f64 = 0.01;

/// Salts separating the experiments that share a master seed.
const SALT_COARSE: u64 = 0x636f_6172;
const SALT_TIGHT: u64 = 0x7469_6768;
const SALT_POOL: u64 = 0x706f_6f6c;

/// Scale bundle for horizon `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CltScale {
    pub n: u64,
    pub l_n: f64,
    pub beta_n: u64,
    pub c_phi: f64,
    pub d_const: f64,
}

impl CltScale {
    /// `⌊n / (c_φ D L_n²)⌋`.
    pub fn beta_direct(&self) -> u64 {
        (self.n as f64 / (self.c_phi * self.d_const * self.l_n * self.l_n)).floor() as u64
    }

    /// `⌊(log n)² / (c_φ D)⌋`.
    pub fn beta_log(&self) -> u64 {
        let ln = (self.n as f64).ln();
        (ln * ln / (self.c_phi * self.d_const)).floor() as u64
    }
}

/// `L_n = √n / log n` and `β_n`; errors when `L_n < MIN_SCALE` or `β_n = 0`.
pub fn scale_params(n: u64, d_const: f64, c_phi: f64) -> Result<CltScale> {
    if !(d_const > 0.0 && c_phi > 0.0) {
        return Err(RwreError::InvalidArgument(format!(
            "D and c_phi must be positive, got {d_const} and {c_phi}"
        )));
    }
    if n < 3 {
        return Err(RwreError::ScaleGuard(format!("horizon n = {n} too small")));
    }
    let nf = n as f64;
    let l_n = nf.sqrt() / nf.ln();
    if l_n < MIN_SCALE {
        return Err(RwreError::ScaleGuard(format!(
            "L_n = {l_n:.2} below the minimum scale {MIN_SCALE} (n = {n})"
        )));
    }
    let mut s = CltScale {
        n,
        l_n,
        beta_n: 0,
        c_phi,
        d_const,
    };
    s.beta_n = s.beta_direct();
    if s.beta_n == 0 {
        return Err(RwreError::ScaleGuard(format!(
            "beta_n = 0 at n = {n}, D = {d_const}"
        )));
    }
    Ok(s)
}

/// One replica of the coarse-grained walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseTrajectory {
    /// Stopping times `T_{n,i}`, starting with `T_{n,0} = 0`.
    pub times: Vec<u64>,
    /// Positions `X̂_{n,i}` at those times.
    pub positions: Vec<Site>,
    /// `k_{n,t}` for each requested `t`.
    pub k_nt: Vec<usize>,
    /// `X_{⌊tn⌋}` for each requested `t`.
    pub grid_positions: Vec<Site>,
    /// `X_n`.
    pub endpoint: Site,
    /// Largest `|X^n_t − X̂_{k_{n,t}}|` over the grid, interpolation slack included.
    pub max_gap: f64,
    /// Whether every coarse step had length in `(ξL_n, ξL_n + 1]`.
    pub envelope_ok: bool,
}

impl CoarseTrajectory {
    /// `k_{n,t} = max{i : T_{n,i} ≤ tn}`.
    pub fn count_at(&self, tn: u64) -> usize {
        self.times.partition_point(|&t| t <= tn) - 1
    }
}

/// Ensemble of coarse trajectories in one environment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoarseEnsemble {
    pub scale: CltScale,
    pub t_grid: Vec<f64>,
    pub trajectories: Vec<CoarseTrajectory>,
}

/// Per-`t` summary of `k_{n,t}/β_n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub t: f64,
    pub ratio: MeanEstimate,
}

impl CoarseEnsemble {
    pub fn count_table(&self) -> Vec<CountRow> {
        let beta = self.scale.beta_n as f64;
        self.t_grid
            .iter()
            .enumerate()
            .map(|(j, &t)| {
                let xs: Vec<f64> = self
                    .trajectories
                    .iter()
                    .map(|tr| tr.k_nt[j] as f64 / beta)
                    .collect();
                CountRow {
                    t,
                    ratio: MeanEstimate::from_samples(&xs),
                }
            })
            .collect()
    }

    /// Largest gap over all replicas in units of `L_n`.
    pub fn max_gap_ratio(&self) -> f64 {
        self.trajectories
            .iter()
            .map(|t| t.max_gap)
            .fold(0.0, f64::max)
            / self.scale.l_n
    }

    pub fn envelope_ok(&self) -> bool {
        self.trajectories.iter().all(|t| t.envelope_ok)
    }

    /// `Var(T_{n,ℓ}) / n²` over replicas.
    pub fn stopping_time_variance(&self, ell: usize) -> f64 {
        let n = self.scale.n as f64;
        let xs: Vec<f64> = self
            .trajectories
            .iter()
            .filter_map(|t| t.times.get(ell).map(|&v| v as f64 / n))
            .collect();
        let s = crate::stats::std_dev(&xs);
        s * s
    }

    /// `X_n / √n` per replica.
    pub fn scaled_endpoints(&self) -> Vec<Vec<f64>> {
        let sq = (self.scale.n as f64).sqrt();
        self.trajectories
            .iter()
            .map(|t| t.endpoint.coords().iter().map(|&c| c as f64 / sq).collect())
            .collect()
    }
}

fn radius_draw(seed: u64, rep: u64, i: u64) -> f64 {
    let mut rng = CounterRng::from_words(&[seed, tag::RADIUS, rep, i]);
    density().sample(rng.uniform())
}

/// Runs the walk for `n` steps and continues until `β_n` coarse steps are
/// recorded; each coarse step exits a ball of radius `ξ L_n` around the last
/// recorded position with `ξ` drawn from the smoothing density.
pub fn simulate_coarse<S: TransitionSource + ?Sized>(
    env: &S,
    scale: &CltScale,
    t_grid: &[f64],
    reps: usize,
    seed: u64,
) -> Result<CoarseEnsemble> {
    if t_grid.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(RwreError::InvalidArgument(
            "t grid must lie in [0, 1]".into(),
        ));
    }
    let trajectories = (0..reps as u64)
        .into_par_iter()
        .map(|rep| coarse_replica(env, scale, t_grid, seed, rep))
        .collect::<Result<Vec<_>>>()?;
    Ok(CoarseEnsemble {
        scale: *scale,
        t_grid: t_grid.to_vec(),
        trajectories,
    })
}

fn coarse_replica<S: TransitionSource + ?Sized>(
    env: &S,
    scale: &CltScale,
    t_grid: &[f64],
    seed: u64,
    rep: u64,
) -> Result<CoarseTrajectory> {
    let d = env.dim();
    let n = scale.n;
    let cap = 4 * n;
    let grid: Vec<u64> = t_grid
        .iter()
        .map(|&t| (t * n as f64).floor() as u64)
        .collect();
    let mut stream = WalkStream::salted(seed, SALT_COARSE, rep);
    let mut x = Site::origin(d);
    let mut center = x;
    let mut radius = radius_draw(seed, rep, 0) * scale.l_n;
    let mut r2 = radius_to_r2(radius);
    let mut times = vec![0u64];
    let mut positions = vec![x];
    let mut grid_positions = vec![Site::origin(d); grid.len()];
    for (j, &g) in grid.iter().enumerate() {
        if g == 0 {
            grid_positions[j] = x;
        }
    }
    let mut envelope_ok = true;
    let mut endpoint = x;
    let mut m = 0u64;
    while m < n || (times.len() as u64) <= scale.beta_n {
        if m >= cap {
            return Err(RwreError::CapExceeded {
                censored: 1,
                total: 1,
                cap,
            });
        }
        x = step(env, &x, &mut stream);
        m += 1;
        if m <= n {
            for (j, &g) in grid.iter().enumerate() {
                if g == m {
                    grid_positions[j] = x;
                }
            }
            if m == n {
                endpoint = x;
            }
        }
        if x.dist2(&center) > r2 {
            let len = (x.dist2(&center) as f64).sqrt();
            if !(len > radius && len <= radius + 1.0) {
                envelope_ok = false;
            }
            times.push(m);
            positions.push(x);
            center = x;
            radius = radius_draw(seed, rep, times.len() as u64 - 1) * scale.l_n;
            r2 = radius_to_r2(radius);
        }
    }
    let mut tr = CoarseTrajectory {
        times,
        positions,
        k_nt: Vec::with_capacity(grid.len()),
        grid_positions,
        endpoint,
        max_gap: 0.0,
        envelope_ok,
    };
    for (j, &g) in grid.iter().enumerate() {
        let k = tr.count_at(g);
        tr.k_nt.push(k);
        // The interpolated path lies within one lattice step of X_{⌊tn⌋}.
        let gap = 1.0 + (tr.grid_positions[j].dist2(&tr.positions[k]) as f64).sqrt();
        tr.max_gap = tr.max_gap.max(gap);
    }
    Ok(tr)
}

/// Sample covariance with per-entry standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    pub n: usize,
}

impl CovarianceEstimate {
    pub fn from_samples(xs: &[Vec<f64>]) -> Self {
        let n = xs.len();
        let d = xs.first().map_or(0, |v| v.len());
        let mean: Vec<f64> = (0..d)
            .map(|i| pairwise_sum(&xs.iter().map(|v| v[i]).collect::<Vec<_>>()) / n as f64)
            .collect();
        let mut covariance = vec![vec![0.0; d]; d];
        let mut stderr = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..d {
                let prods: Vec<f64> = xs
                    .iter()
                    .map(|v| (v[i] - mean[i]) * (v[j] - mean[j]))
                    .collect();
                let e = MeanEstimate::from_samples(&prods);
                covariance[i][j] = e.mean * n as f64 / (n as f64 - 1.0);
                stderr[i][j] = e.stderr;
            }
        }
        Self {
            mean,
            covariance,
            stderr,
            n,
        }
    }

    /// Largest `|cov_ij − target_ij| / sqrt(se_ij² + target_se_ij²)`.
    pub fn max_z(&self, target: &[Vec<f64>], target_stderr: &[Vec<f64>]) -> f64 {
        let d = self.covariance.len();
        let mut z: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                let se = (self.stderr[i][j].powi(2) + target_stderr[i][j].powi(2)).sqrt();
                z = z.max((self.covariance[i][j] - target[i][j]).abs() / se);
            }
        }
        z
    }
}

/// Covariance of `X_n/√n` and per-axis normality against a predicted law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointReport {
    pub n: u64,
    pub reps: usize,
    pub covariance: CovarianceEstimate,
    /// Predicted diagonal `(D⁻¹Λ)_ii`.
    pub predicted: Vec<f64>,
    pub ks: Vec<KsResult>,
    /// Largest off-diagonal `|cov_ij| / se_ij`.
    pub max_offdiag_z: f64,
    /// Largest diagonal `|cov_ii − predicted_ii| / se_ii` (sample error only).
    pub max_diag_z: f64,
}

impl EndpointReport {
    pub fn ks_passes(&self, significance: f64) -> bool {
        self.ks.iter().all(|k| k.passes(significance))
    }

    /// Diagonal agreement with a predicted law carrying its own errors.
    pub fn diag_z_with(&self, predicted_stderr: &[f64]) -> f64 {
        (0..self.predicted.len())
            .map(|i| {
                let se =
                    (self.covariance.stderr[i][i].powi(2) + predicted_stderr[i].powi(2)).sqrt();
                (self.covariance.covariance[i][i] - self.predicted[i]).abs() / se
            })
            .fold(0.0, f64::max)
    }
}

/// Statistics of already simulated scaled endpoints.
pub fn endpoint_statistics_from(n: u64, samples: &[Vec<f64>], predicted: &[f64]) -> EndpointReport {
    let covariance = CovarianceEstimate::from_samples(samples);
    let d = predicted.len();
    let ks = (0..d)
        .map(|i| {
            let xs: Vec<f64> = samples.iter().map(|v| v[i]).collect();
            let law = Normal::new(0.0, predicted[i].sqrt()).expect("positive variance");
            ks_one_sample(&xs, |x| law.cdf(x))
        })
        .collect();
    let mut max_offdiag_z: f64 = 0.0;
    let mut max_diag_z: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let z = if i == j {
                (covariance.covariance[i][i] - predicted[i]).abs() / covariance.stderr[i][i]
            } else {
                covariance.covariance[i][j].abs() / covariance.stderr[i][j]
            };
            if i == j {
                max_diag_z = max_diag_z.max(z);
            } else {
                max_offdiag_z = max_offdiag_z.max(z);
            }
        }
    }
    EndpointReport {
        n,
        reps: samples.len(),
        covariance,
        predicted: predicted.to_vec(),
        ks,
        max_offdiag_z,
        max_diag_z,
    }
}

/// Simulates `reps` walks of `n` steps from the origin in `env`.
pub fn endpoint_statistics<S: TransitionSource + ?Sized>(
    env: &S,
    n: u64,
    reps: usize,
    predicted: &[f64],
    seed: u64,
) -> Result<EndpointReport> {
    if predicted.len() != env.dim() {
        return Err(RwreError::ShapeMismatch(format!(
            "predicted covariance has {} entries, dimension is {}",
            predicted.len(),
            env.dim()
        )));
    }
    let sq = (n as f64).sqrt();
    let samples: Vec<Vec<f64>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let mut stream = WalkStream::salted(seed, SALT_COARSE, rep);
            let mut x = Site::origin(env.dim());
            for _ in 0..n {
                x = step(env, &x, &mut stream);
            }
            x.coords().iter().map(|&c| c as f64 / sq).collect()
        })
        .collect();
    Ok(endpoint_statistics_from(n, &samples, predicted))
}

/// `Cov(X_{t₁n}, X_{t₂n}) / n` per axis, from the grid positions.
pub fn two_time_covariance(ens: &CoarseEnsemble, j1: usize, j2: usize) -> Vec<MeanEstimate> {
    let n = ens.scale.n as f64;
    let d = ens.trajectories.first().map_or(0, |t| t.endpoint.dim());
    (0..d)
        .map(|i| {
            let prods: Vec<f64> = ens
                .trajectories
                .iter()
                .map(|t| {
                    t.grid_positions[j1].get(i) as f64 * t.grid_positions[j2].get(i) as f64 / n
                })
                .collect();
            MeanEstimate::from_samples(&prods)
        })
        .collect()
}

/// Monte Carlo sample of the comparison kernel `q_n(0, ·)`: exits of the
/// homogeneous `p` walk from `V_{ξ L_n}(0)` with `ξ` drawn from the density.
pub fn sample_increment_pool(p: &SiteDistribution, l_n: f64, size: usize, seed: u64) -> Vec<Site> {
    (0..size as u64)
        .into_par_iter()
        .map(|k| {
            let r2 = radius_to_r2(radius_draw(seed ^ SALT_POOL, k, 0) * l_n);
            let mut stream = WalkStream::salted(seed, SALT_POOL, k);
            let mut x = Site::origin(p.dim());
            while x.norm2() <= r2 {
                x = x.step(p.pick(stream.uniform()));
            }
            x
        })
        .collect()
}

/// Comparison of the i.i.d. walk `Ŷ` with its Gaussian prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LindebergReport {
    pub scale: CltScale,
    pub pool_size: usize,
    pub increment_mean: Vec<MeanEstimate>,
    /// Increment covariance divided by `L_n²`.
    pub increment_covariance: CovarianceEstimate,
    /// `c_φ · 2p(e_i)`, the predicted diagonal of the line above.
    pub increment_predicted: Vec<f64>,
    /// Largest `|W| = |Z|/√n` in the pool.
    pub max_w: f64,
    /// `2L_n/√n` and `2/log n`.
    pub w_bound: f64,
    pub w_bound_log: f64,
    /// Covariance of `Ŷ_{β_n}/√n`.
    pub sum_covariance: CovarianceEstimate,
    /// `2p(e_i)/D`.
    pub sum_predicted: Vec<f64>,
    pub ks: Vec<KsResult>,
}

/// Simulates `Ŷ_{β_n}/√n` from `reps` sums of `β_n` increments resampled
/// from a pool of `pool_size` draws of `q_n(0, ·)`.
pub fn lindeberg_comparison(
    p: &SiteDistribution,
    scale: &CltScale,
    reps: usize,
    pool_size: usize,
    seed: u64,
) -> Result<LindebergReport> {
    if !p.is_symmetric() {
        return Err(RwreError::InvalidArgument(
            "comparison kernel must be symmetric".into(),
        ));
    }
    if pool_size < 2 || reps < 2 {
        return Err(RwreError::InvalidArgument(
            "need at least two pool draws and two replicas".into(),
        ));
    }
    let d = p.dim();
    let pool = sample_increment_pool(p, scale.l_n, pool_size, seed);
    let inc: Vec<Vec<f64>> = pool
        .iter()
        .map(|z| z.coords().iter().map(|&c| c as f64).collect())
        .collect();
    let increment_mean = (0..d)
        .map(|i| MeanEstimate::from_samples(&inc.iter().map(|v| v[i]).collect::<Vec<_>>()))
        .collect();
    let scaled: Vec<Vec<f64>> = inc
        .iter()
        .map(|v| v.iter().map(|c| c / scale.l_n).collect())
        .collect();
    let increment_covariance = CovarianceEstimate::from_samples(&scaled);
    let increment_predicted = (0..d).map(|i| scale.c_phi * 2.0 * p.axis(i)).collect();
    let sqn = (scale.n as f64).sqrt();
    let max_w = pool.iter().map(|z| z.norm()).fold(0.0, f64::max) / sqn;

    let sums: Vec<Vec<f64>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = CounterRng::from_words(&[seed, tag::INCREMENT, rep]);
            let mut s = vec![0.0; d];
            for _ in 0..scale.beta_n {
                let z = &inc[rng.below(pool_size as u64) as usize];
                for i in 0..d {
                    s[i] += z[i];
                }
            }
            s.iter().map(|c| c / sqn).collect()
        })
        .collect();
    let sum_predicted: Vec<f64> = (0..d).map(|i| 2.0 * p.axis(i) / scale.d_const).collect();
    let report = endpoint_statistics_from(scale.n, &sums, &sum_predicted);
    Ok(LindebergReport {
        scale: *scale,
        pool_size,
        increment_mean,
        increment_covariance,
        increment_predicted,
        max_w,
        w_bound: 2.0 * scale.l_n / sqn,
        w_bound_log: 2.0 / (scale.n as f64).ln(),
        sum_covariance: report.covariance,
        sum_predicted,
        ks: report.ks,
    })
}

/// Fit of `P(|Ŷ_ℓ| > r) ≤ C₁ exp(−c₁ r²/(ℓ L_n²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdFit {
    pub c1_amplitude: f64,
    pub c1_rate: f64,
    /// `(ℓ, r²/(ℓL_n²), tail)` for every point with a positive tail.
    pub points: Vec<(usize, f64, f64)>,
}

/// Fits the large-deviation shape of the comparison walk from a pool of
/// increments; `C₁` is enlarged so that the bound covers every point.
pub fn large_deviation_fit(
    pool: &[Site],
    l_n: f64,
    ells: &[usize],
    reps: usize,
    seed: u64,
) -> Result<LdFit> {
    if pool.is_empty() || ells.is_empty() {
        return Err(RwreError::InvalidArgument("empty pool or ell grid".into()));
    }
    let d = pool[0].dim();
    let mut points = Vec::new();
    for &ell in ells {
        let norms: Vec<f64> = (0..reps as u64)
            .into_par_iter()
            .map(|rep| {
                let mut rng = CounterRng::from_words(&[seed, tag::INCREMENT, ell as u64, rep]);
                let mut s = Site::origin(d);
                for _ in 0..ell {
                    s = s.add(&pool[rng.below(pool.len() as u64) as usize]);
                }
                s.norm()
            })
            .collect();
        let scale = (ell as f64).sqrt() * l_n;
        for k in 1..=8 {
            let r = 0.5 * k as f64 * scale;
            let tail = norms.iter().filter(|&&v| v > r).count() as f64 / reps as f64;
            if tail > 0.0 {
                points.push((ell, r * r / (ell as f64 * l_n * l_n), tail));
            }
        }
    }
    if points.len() < 2 {
        return Err(RwreError::InvalidData(
            "too few positive tail points to fit".into(),
        ));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.1).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.2.ln()).collect();
    let (_, slope, _, _) = linear_fit(&xs, &ys);
    let c1_rate = -slope;
    let c1_amplitude = points
        .iter()
        .map(|&(_, x, t)| t * (c1_rate * x).exp())
        .fold(0.0, f64::max);
    Ok(LdFit {
        c1_amplitude,
        c1_rate,
        points,
    })
}

/// Tail of the running maximum increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessReport {
    pub n: u64,
    pub reps: usize,
    pub lambdas: Vec<f64>,
    pub ks: Vec<u64>,
    /// `tail[a][b] = P(max_{ℓ≤n} |X_{k_b+ℓ} − X_{k_b}| ≥ λ_a √n)`.
    pub tail: Vec<Vec<f64>>,
    /// `λ² · max_k tail`.
    pub eps_lambda: Vec<f64>,
    pub ld_fit: Option<LdFit>,
}

impl TightnessReport {
    pub fn tail_monotone(&self) -> bool {
        (1..self.lambdas.len())
            .all(|a| (0..self.ks.len()).all(|b| self.tail[a][b] <= self.tail[a - 1][b]))
    }
}

/// Empirical tail of `max_{ℓ≤n} |X_{k+ℓ} − X_k|` for each `λ` and `k`;
/// `lambda_grid` must be increasing.
pub fn tightness_statistic<S: TransitionSource + ?Sized>(
    env: &S,
    n: u64,
    lambda_grid: &[f64],
    k_grid: &[u64],
    reps: usize,
    seed: u64,
) -> Result<TightnessReport> {
    if lambda_grid.windows(2).any(|w| w[1] <= w[0]) || k_grid.is_empty() || reps == 0 {
        return Err(RwreError::InvalidArgument(
            "lambda grid must be increasing, k grid and replicas nonempty".into(),
        ));
    }
    let d = env.dim();
    let k_max = *k_grid.iter().max().expect("nonempty");
    let horizon = (k_max + n) as usize;
    // Per replica, the running-maximum displacement for each k.
    let maxima: Vec<Vec<f64>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let mut stream = WalkStream::salted(seed, SALT_TIGHT, rep);
            let mut path = Vec::with_capacity(horizon + 1);
            let mut x = Site::origin(d);
            path.push(x);
            for _ in 0..horizon {
                x = step(env, &x, &mut stream);
                path.push(x);
            }
            k_grid
                .iter()
                .map(|&k| {
                    let base = path[k as usize];
                    path[k as usize + 1..=(k + n) as usize]
                        .iter()
                        .map(|y| y.dist2(&base))
                        .max()
                        .unwrap_or(0) as f64
                })
                .map(f64::sqrt)
                .collect()
        })
        .collect();
    let sq = (n as f64).sqrt();
    let tail: Vec<Vec<f64>> = lambda_grid
        .iter()
        .map(|&lam| {
            (0..k_grid.len())
                .map(|b| maxima.iter().filter(|m| m[b] >= lam * sq).count() as f64 / reps as f64)
                .collect()
        })
        .collect();
    let eps_lambda = lambda_grid
        .iter()
        .zip(&tail)
        .map(|(&lam, row)| lam * lam * row.iter().cloned().fold(0.0, f64::max))
        .collect();
    Ok(TightnessReport {
        n,
        reps,
        lambdas: lambda_grid.to_vec(),
        ks: k_grid.to_vec(),
        tail,
        eps_lambda,
        ld_fit: None,
    })
}

/// Contents of `clt_run.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CltRun {
    pub n: u64,
    #[serde(rename = "L_n")]
    pub l_n: f64,
    pub beta_n: u64,
    pub covariance: Vec<Vec<f64>>,
    pub covariance_stderr: Vec<Vec<f64>>,
    pub predicted: Vec<f64>,
    pub ks: Vec<KsResult>,
    pub k_nt: Vec<CountRow>,
    pub max_gap_over_l_n: f64,
    pub envelope_ok: bool,
    pub tightness: Option<TightnessReport>,
    pub lindeberg: Option<LindebergReport>,
}

impl CltRun {
    pub fn new(ens: &CoarseEnsemble, endpoint: &EndpointReport) -> Self {
        Self {
            n: ens.scale.n,
            l_n: ens.scale.l_n,
            beta_n: ens.scale.beta_n,
            covariance: endpoint.covariance.covariance.clone(),
            covariance_stderr: endpoint.covariance.stderr.clone(),
            predicted: endpoint.predicted.clone(),
            ks: endpoint.ks.clone(),
            k_nt: ens.count_table(),
            max_gap_over_l_n: ens.max_gap_ratio(),
            envelope_ok: ens.envelope_ok(),
            tightness: None,
            lindeberg: None,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }
}

/// Writes one row per replica: `rep, x1, …, xd` of `X_n/√n`.
pub fn write_endpoint_csv(samples: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = samples.first().map_or(0, |v| v.len());
    let mut header = vec!["rep".to_string()];
    header.extend((1..=d).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for (k, v) in samples.iter().enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(v.iter().map(|c| format!("{c:.10e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{Environment, EnvironmentSpec, Family};

    fn c_phi() -> f64 {
        density().c_phi()
    }

    #[test]
    fn beta_agrees_both_ways() {
        for n in [100_000u64, 1_000_000, 10_000_000] {
            for d in [0.9, 1.0, 1.1] {
                let s = scale_params(n, d, c_phi()).unwrap();
                assert!(s.beta_direct().abs_diff(s.beta_log()) <= 1, "{s:?}");
            }
        }
        let s = scale_params(1_000_000, 1.0, c_phi()).unwrap();
        let ln = (1e6f64).ln();
        assert_eq!(s.beta_log(), (ln * ln / c_phi()).floor() as u64);
        assert!((s.l_n - 1000.0 / ln).abs() < 1e-12);
    }

    #[test]
    fn small_horizon_rejected() {
        assert!(matches!(
            scale_params(10_000, 1.0, c_phi()),
            Err(RwreError::ScaleGuard(_))
        ));
        assert!(scale_params(1_000_000, 0.0, c_phi()).is_err());
    }

    fn small_scale() -> CltScale {
        // Below the production guard; exercises the mechanics only.
        let n = 20_000u64;
        let l_n = (n as f64).sqrt() / (n as f64).ln();
        let mut s = CltScale {
            n,
            l_n,
            beta_n: 0,
            c_phi: c_phi(),
            d_const: 1.0,
        };
        s.beta_n = s.beta_direct();
        s
    }

    #[test]
    fn coarse_walk_invariants() {
        let spec = EnvironmentSpec::new(3, 0.02, Family::PairUniform, 4).unwrap();
        let env = Environment::new(spec).unwrap();
        let s = small_scale();
        let ens = simulate_coarse(&env, &s, &[0.25, 0.5, 1.0], 40, 9).unwrap();
        assert!(ens.envelope_ok());
        assert!(ens.max_gap_ratio() <= 3.0);
        for t in &ens.trajectories {
            assert!(t.times.windows(2).all(|w| w[1] > w[0]));
            assert!(t.times.len() as u64 > s.beta_n);
            for (j, &tt) in ens.t_grid.iter().enumerate() {
                let tn = (tt * s.n as f64).floor() as u64;
                let k = t.k_nt[j];
                assert!(t.times[k] <= tn && (k + 1 == t.times.len() || t.times[k + 1] > tn));
            }
        }
        let again = simulate_coarse(&env, &s, &[0.25, 0.5, 1.0], 40, 9).unwrap();
        assert_eq!(ens.trajectories, again.trajectories);
    }

    #[test]
    fn srw_counts_track_t() {
        let env = Environment::new(EnvironmentSpec::srw(3)).unwrap();
        let s = small_scale();
        let ens = simulate_coarse(&env, &s, &[0.5, 1.0], 200, 2).unwrap();
        for row in ens.count_table() {
            assert!((row.ratio.mean - row.t).abs() < 0.15, "{row:?}");
        }
    }

    #[test]
    fn covariance_estimate_matches_hand_computation() {
        let xs = vec![vec![1.0, 2.0], vec![3.0, 2.0], vec![2.0, 5.0]];
        let c = CovarianceEstimate::from_samples(&xs);
        assert!((c.mean[0] - 2.0).abs() < 1e-12);
        assert!((c.covariance[0][0] - 1.0).abs() < 1e-12);
        assert!((c.covariance[1][1] - 3.0).abs() < 1e-12);
        assert!((c.covariance[0][1] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn srw_endpoints_are_gaussian() {
        let env = Environment::new(EnvironmentSpec::srw(3)).unwrap();
        let r = endpoint_statistics(&env, 2_000, 800, &[1.0 / 3.0; 3], 5).unwrap();
        assert!(r.ks_passes(KS_SIGNIFICANCE), "{:?}", r.ks);
        assert!(r.max_diag_z < 4.0 && r.max_offdiag_z < 4.0, "{r:?}");
    }

    #[test]
    fn comparison_walk_matches_prediction() {
        let p = SiteDistribution::uniform(3);
        let s = scale_params(1_000_000, 1.0, c_phi()).unwrap();
        let r = lindeberg_comparison(&p, &s, 2000, 2000, 3).unwrap();
        for (i, m) in r.increment_mean.iter().enumerate() {
            assert!(m.within(0.0, 4.0), "axis {i}: {m:?}");
        }
        let c = &r.increment_covariance;
        for i in 0..3 {
            // Exit overshoot makes the one-step variance slightly larger.
            let rel = c.covariance[i][i] / r.increment_predicted[i] - 1.0;
            assert!(rel.abs() < 0.06, "axis {i}: {rel}");
            for j in 0..3 {
                if i != j {
                    assert!(c.covariance[i][j].abs() < 4.0 * c.stderr[i][j]);
                }
            }
        }
        assert!(r.max_w <= r.w_bound + 1.0 / (s.n as f64).sqrt());
        assert!(r.w_bound <= r.w_bound_log + 1e-12);
        for i in 0..3 {
            let rel = r.sum_covariance.covariance[i][i] / r.sum_predicted[i] - 1.0;
            assert!(rel.abs() < 0.12, "axis {i}: {rel}");
        }
    }

    #[test]
    fn tightness_tail_monotone_and_ld_fit_decays() {
        let env = Environment::new(EnvironmentSpec::srw(3)).unwrap();
        let r = tightness_statistic(&env, 4_000, &[1.0, 2.0, 3.0], &[0, 2_000], 400, 1).unwrap();
        assert!(r.tail_monotone());
        assert!(r.eps_lambda[1] > r.eps_lambda[2]);
        let pool = sample_increment_pool(&SiteDistribution::uniform(3), 20.0, 1000, 3);
        let fit = large_deviation_fit(&pool, 20.0, &[1, 4, 16], 4000, 2).unwrap();
        assert!(fit.c1_rate > 0.0, "{fit:?}");
        for &(_, x, t) in &fit.points {
            assert!(t <= fit.c1_amplitude * (-fit.c1_rate * x).exp() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn json_and_csv_round_trip() {
        let env = Environment::new(EnvironmentSpec::srw(3)).unwrap();
        let s = small_scale();
        let ens = simulate_coarse(&env, &s, &[1.0], 10, 1).unwrap();
        let samples = ens.scaled_endpoints();
        let ep = endpoint_statistics_from(s.n, &samples, &[1.0 / 3.0; 3]);
        let dir = tempfile::tempdir().unwrap();
        let run = CltRun::new(&ens, &ep);
        run.write_json(&dir.path().join("clt_run.json")).unwrap();
        let back: serde_json::Value =
            serde_json::from_reader(std::fs::File::open(dir.path().join("clt_run.json")).unwrap())
                .unwrap();
        assert_eq!(back["beta_n"].as_u64(), Some(s.beta_n));
        assert!(back["L_n"].as_f64().is_some());
        write_endpoint_csv(&samples, &dir.path().join("endpoints.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("endpoints.csv")).unwrap();
        assert_eq!(text.lines().count(), 11);
    }
}
