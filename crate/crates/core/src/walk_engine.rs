//! Quenched path simulation: steps, exits from balls, sojourn-time estimates
//! and the optional-stopping check for balanced environments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::TransitionSource;
use crate::error::{Result, RwreError};
use crate::lattice::{in_ball, Ball, Site};
use crate::rng::{tag, CounterRng};
use crate::stats::{pairwise_sum, MeanEstimate};

/// Per-replica random stream; a trajectory is a pure function of the
/// environment, the start and `(master_seed, salt, replica_id)`.
#[derive(Debug, Clone)]
pub struct WalkStream {
    pub replica_id: u64,
    rng: CounterRng,
}

impl WalkStream {
    pub fn new(master_seed: u64, replica_id: u64) -> Self {
        Self::salted(master_seed, 0, replica_id)
    }

    /// Stream separated from others of the same seed by an experiment salt.
    pub fn salted(master_seed: u64, salt: u64, replica_id: u64) -> Self {
        Self {
            replica_id,
            rng: CounterRng::from_words(&[master_seed, tag::WALK, salt, replica_id]),
        }
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.uniform()
    }

    pub fn rng(&mut self) -> &mut CounterRng {
        &mut self.rng
    }
}

/// One step from `x` under the site distribution at `x`.
#[inline]
pub fn step<S: TransitionSource + ?Sized>(env: &S, x: &Site, stream: &mut WalkStream) -> Site {
    let w = env.at(x);
    x.step(w.pick(stream.uniform()))
}

/// First site outside the interior and the step count at which it is reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExitRecord {
    pub exit_site: Site,
    pub exit_time: u64,
}

/// `⌈100 · d/(1 - 2εd) · (L+1)²⌉`, a hundred times the balanced mean bound.
pub fn default_step_cap(d: usize, epsilon: f64, radius: f64) -> u64 {
    let factor = d as f64 / (1.0 - 2.0 * epsilon * d as f64);
    (100.0 * factor * (radius + 1.0).powi(2)).ceil() as u64
}

/// `d/(1 - 2εd) (L+1)² - (x·e1)²`, the bound on `E_x[τ_L]` for environments
/// balanced in the first coordinate.
pub fn balanced_mean_bound(d: usize, epsilon: f64, radius: f64, x: &Site) -> f64 {
    let x1 = x.get(0) as f64;
    d as f64 / (1.0 - 2.0 * epsilon * d as f64) * (radius + 1.0).powi(2) - x1 * x1
}

/// Walks from `start` until leaving the closed ball `V_radius(center)`.
pub fn run_to_exit_radius<S: TransitionSource + ?Sized>(
    env: &S,
    start: &Site,
    center: &Site,
    radius: f64,
    step_cap: u64,
    stream: &mut WalkStream,
) -> Result<ExitRecord> {
    if !in_ball(center, radius, start) {
        return Err(RwreError::OutsideBall {
            site: start.to_string(),
            radius,
        });
    }
    let r2 = crate::lattice::radius_to_r2(radius);
    let mut x = *start;
    let mut n = 0u64;
    loop {
        x = step(env, &x, stream);
        n += 1;
        if x.dist2(center) > r2 {
            return Ok(ExitRecord {
                exit_site: x,
                exit_time: n,
            });
        }
        if n >= step_cap {
            return Err(RwreError::CapExceeded {
                censored: 1,
                total: 1,
                cap: step_cap,
            });
        }
    }
}

/// Walks from `start` until leaving `ball`.
pub fn run_to_exit<S: TransitionSource + ?Sized>(
    env: &S,
    start: &Site,
    ball: &Ball,
    step_cap: u64,
    stream: &mut WalkStream,
) -> Result<ExitRecord> {
    if step_cap == 0 {
        return Err(RwreError::InvalidArgument(
            "step_cap must be at least 1".into(),
        ));
    }
    run_to_exit_radius(env, start, &ball.center, ball.radius, step_cap, stream)
}

/// Monte Carlo summary of `τ_{V_L(x)}` over replicas in one environment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SojournEstimate {
    pub mean: f64,
    pub stderr: f64,
    /// Sample mean and standard error of `τ²`.
    pub second_moment: f64,
    pub second_moment_stderr: f64,
    pub n_reps: usize,
}

/// Options shared by the replica-based estimators.
#[derive(Debug, Clone, Copy)]
pub struct ReplicaOptions {
    pub master_seed: u64,
    pub salt: u64,
    pub step_cap: Option<u64>,
}

impl ReplicaOptions {
    pub fn new(master_seed: u64) -> Self {
        Self {
            master_seed,
            salt: 0,
            step_cap: None,
        }
    }

    pub fn with_salt(mut self, salt: u64) -> Self {
        self.salt = salt;
        self
    }
}

fn resolve_cap<S: TransitionSource + ?Sized>(
    env: &S,
    radius: f64,
    opts: &ReplicaOptions,
    epsilon: f64,
) -> u64 {
    opts.step_cap
        .unwrap_or_else(|| default_step_cap(env.dim(), epsilon, radius))
}

/// Independent exits from `V_L(x)`, in replica order.
pub fn sample_exits<S: TransitionSource + ?Sized>(
    env: &S,
    x: &Site,
    radius: f64,
    n_reps: usize,
    epsilon: f64,
    opts: &ReplicaOptions,
) -> Result<Vec<ExitRecord>> {
    let cap = resolve_cap(env, radius, opts, epsilon);
    let results: Vec<Result<ExitRecord>> = (0..n_reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut s = WalkStream::salted(opts.master_seed, opts.salt, r);
            run_to_exit_radius(env, x, x, radius, cap, &mut s)
        })
        .collect();
    let censored = results
        .iter()
        .filter(|r| matches!(r, Err(RwreError::CapExceeded { .. })))
        .count();
    if censored > 0 {
        return Err(RwreError::CapExceeded {
            censored,
            total: n_reps,
            cap,
        });
    }
    results.into_iter().collect()
}

/// Sample mean and standard error of `τ_{V_L(x)}`; `epsilon` only sets the
/// default step cap.
pub fn estimate_sojourn<S: TransitionSource + ?Sized>(
    env: &S,
    x: &Site,
    radius: f64,
    n_reps: usize,
    epsilon: f64,
    opts: &ReplicaOptions,
) -> Result<SojournEstimate> {
    if n_reps < 2 {
        return Err(RwreError::InvalidArgument(
            "need at least 2 replicas".into(),
        ));
    }
    let exits = sample_exits(env, x, radius, n_reps, epsilon, opts)?;
    let t: Vec<f64> = exits.iter().map(|e| e.exit_time as f64).collect();
    let t2: Vec<f64> = t.iter().map(|v| v * v).collect();
    let m1 = MeanEstimate::from_samples(&t);
    let m2 = MeanEstimate::from_samples(&t2);
    Ok(SojournEstimate {
        mean: m1.mean,
        stderr: m1.stderr,
        second_moment: m2.mean,
        second_moment_stderr: m2.stderr,
        n_reps,
    })
}

/// Path of `n_steps` steps from `start`, including the start.
pub fn trajectory<S: TransitionSource + ?Sized>(
    env: &S,
    start: &Site,
    n_steps: usize,
    stream: &mut WalkStream,
) -> Vec<Site> {
    let mut out = Vec::with_capacity(n_steps + 1);
    let mut x = *start;
    out.push(x);
    for _ in 0..n_steps {
        x = step(env, &x, stream);
        out.push(x);
    }
    out
}

/// `M_n = (X_n·e1)² - Σ_{k<n} (ω_{X_k}(e1) + ω_{X_k}(-e1))` along a path.
pub fn martingale_sequence<S: TransitionSource + ?Sized>(env: &S, path: &[Site]) -> Vec<f64> {
    let mut comp = 0.0;
    let mut out = Vec::with_capacity(path.len());
    for (k, x) in path.iter().enumerate() {
        if k > 0 {
            let w = env.at(&path[k - 1]);
            comp += w.get(0) + w.get(1);
        }
        let x1 = x.get(0) as f64;
        out.push(x1 * x1 - comp);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MartingaleReport {
    /// Mean of `M_{τ_L} - (x·e1)²` over replicas.
    pub mean: f64,
    pub stderr: f64,
    pub n_reps: usize,
    /// `|mean| / stderr`.
    pub z_score: f64,
}

/// Optional-stopping check: `E[M_{τ_L}] = (x·e1)²` in balanced environments.
pub fn martingale_compensator_check<S: TransitionSource + ?Sized>(
    env: &S,
    x: &Site,
    radius: f64,
    n_reps: usize,
    epsilon: f64,
    opts: &ReplicaOptions,
) -> Result<MartingaleReport> {
    let cap = resolve_cap(env, radius, opts, epsilon);
    let r2 = crate::lattice::radius_to_r2(radius);
    let center = Site::origin(env.dim());
    let vals: Vec<Result<f64>> = (0..n_reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut s = WalkStream::salted(opts.master_seed, opts.salt, r);
            let mut y = *x;
            let mut comp = 0.0;
            let mut n = 0;
            while y.dist2(&center) <= r2 {
                let w = env.at(&y);
                comp += w.get(0) + w.get(1);
                y = y.step(w.pick(s.uniform()));
                n += 1;
                if n >= cap {
                    return Err(RwreError::CapExceeded {
                        censored: 1,
                        total: 1,
                        cap,
                    });
                }
            }
            let x1 = x.get(0) as f64;
            let y1 = y.get(0) as f64;
            Ok(y1 * y1 - comp - x1 * x1)
        })
        .collect();
    let vals: Vec<f64> = vals.into_iter().collect::<Result<_>>()?;
    let e = MeanEstimate::from_samples(&vals);
    Ok(MartingaleReport {
        mean: e.mean,
        stderr: e.stderr,
        n_reps,
        z_score: if e.stderr > 0.0 {
            e.mean.abs() / e.stderr
        } else {
            0.0
        },
    })
}

/// Empirical exit distribution from `V_L(x)` as sorted `(site, frequency)`.
pub fn empirical_exit_distribution(exits: &[ExitRecord]) -> Vec<(Site, f64)> {
    let mut sites: Vec<Site> = exits.iter().map(|e| e.exit_site).collect();
    sites.sort();
    let n = exits.len() as f64;
    let mut out: Vec<(Site, f64)> = Vec::new();
    for s in sites {
        match out.last_mut() {
            Some((last, c)) if *last == s => *c += 1.0,
            _ => out.push((s, 1.0)),
        }
    }
    for e in out.iter_mut() {
        e.1 /= n;
    }
    out
}

/// Mean of a step-count statistic over replicas with pairwise summation.
pub fn mean_of(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{Environment, EnvironmentSpec, Family, SiteDistribution};

    #[test]
    fn srw_step_frequencies() {
        let p = SiteDistribution::uniform(3);
        let mut s = WalkStream::new(1, 0);
        let n = 1_000_000;
        let mut counts = [0usize; 6];
        let o = Site::origin(3);
        for _ in 0..n {
            let y = step(&p, &o, &mut s);
            let dir = (0..6).find(|&d| o.step(d) == y).unwrap();
            counts[dir] += 1;
        }
        let sigma = (n as f64 * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 6.0).abs() < 4.0 * sigma);
        }
    }

    #[test]
    fn balanced_e1_marginal() {
        let env = Environment::new(EnvironmentSpec::new(3, 0.05, Family::PairUniform, 4).unwrap())
            .unwrap();
        let x = Site::new(&[3, 1, 4]);
        let mut s = WalkStream::new(2, 0);
        let n = 400_000;
        let (mut plus, mut minus) = (0usize, 0usize);
        for _ in 0..n {
            let y = step(&env, &x, &mut s);
            if y == x.step(0) {
                plus += 1;
            } else if y == x.step(1) {
                minus += 1;
            }
        }
        let sigma = ((plus + minus) as f64).sqrt();
        assert!((plus as f64 - minus as f64).abs() < 4.0 * sigma);
    }

    #[test]
    fn replay_and_single_site_ball() {
        let p = SiteDistribution::uniform(3);
        let b0 = Ball::new(Site::origin(3), 0.0).unwrap();
        let mut s = WalkStream::new(7, 3);
        let r = run_to_exit(&p, &Site::origin(3), &b0, 10, &mut s).unwrap();
        assert_eq!(r.exit_time, 1);
        let mut a = WalkStream::new(7, 3);
        let mut b = WalkStream::new(7, 3);
        assert_eq!(
            trajectory(&p, &Site::origin(3), 50, &mut a),
            trajectory(&p, &Site::origin(3), 50, &mut b)
        );
    }

    #[test]
    fn v1_mean_exit_time() {
        let p = SiteDistribution::uniform(3);
        let est = estimate_sojourn(
            &p,
            &Site::origin(3),
            1.0,
            100_000,
            0.0,
            &ReplicaOptions::new(11),
        )
        .unwrap();
        assert!((est.mean - 2.4).abs() < 4.0 * est.stderr, "{est:?}");
    }

    #[test]
    fn exit_sites_are_just_outside() {
        let env = Environment::new(EnvironmentSpec::new(3, 0.05, Family::PairUniform, 9).unwrap())
            .unwrap();
        let exits = sample_exits(
            &env,
            &Site::origin(3),
            4.5,
            2000,
            0.05,
            &ReplicaOptions::new(1),
        )
        .unwrap();
        for e in exits {
            let r = e.exit_site.norm();
            assert!(r > 4.5 && r <= 5.5);
        }
    }

    #[test]
    fn srw_sandwich_monte_carlo() {
        let p = SiteDistribution::uniform(3);
        for l in [2.0, 5.0] {
            let est = estimate_sojourn(
                &p,
                &Site::origin(3),
                l,
                20_000,
                0.0,
                &ReplicaOptions::new(5),
            )
            .unwrap();
            assert!(est.mean >= l * l - 4.0 * est.stderr);
            assert!(est.mean <= (l + 1.0) * (l + 1.0) + 4.0 * est.stderr);
        }
    }

    #[test]
    fn balanced_bound_monte_carlo() {
        let env = Environment::new(EnvironmentSpec::new(3, 0.05, Family::PairUniform, 21).unwrap())
            .unwrap();
        let est = estimate_sojourn(
            &env,
            &Site::origin(3),
            8.0,
            4000,
            0.05,
            &ReplicaOptions::new(5),
        )
        .unwrap();
        assert!(est.mean <= 3.0 / 0.7 * 81.0 + 4.0 * est.stderr);
    }

    #[test]
    fn martingale_checks() {
        let p = SiteDistribution::uniform(3);
        let path = trajectory(&p, &Site::origin(3), 20, &mut WalkStream::new(1, 1));
        let m = martingale_sequence(&p, &path);
        let m2 = martingale_sequence(&p, &path);
        assert_eq!(m, m2);
        // Compensator grows by exactly 1/d per step for SRW.
        let comp: Vec<f64> = path
            .iter()
            .zip(&m)
            .map(|(x, mi)| (x.get(0) as f64).powi(2) - mi)
            .collect();
        for k in 1..comp.len() {
            assert!((comp[k] - comp[k - 1] - 1.0 / 3.0).abs() < 1e-15);
        }
        let env = Environment::new(EnvironmentSpec::new(3, 0.05, Family::PairUniform, 3).unwrap())
            .unwrap();
        let r = martingale_compensator_check(
            &env,
            &Site::new(&[1, 0, 2]),
            6.0,
            10_000,
            0.05,
            &ReplicaOptions::new(8),
        )
        .unwrap();
        assert!(r.z_score <= 4.0, "{r:?}");
    }

    #[test]
    fn cap_exceeded_is_reported() {
        let p = SiteDistribution::uniform(3);
        let err = estimate_sojourn(
            &p,
            &Site::origin(3),
            10.0,
            10,
            0.0,
            &ReplicaOptions {
                master_seed: 1,
                salt: 0,
                step_cap: Some(3),
            },
        )
        .unwrap_err();
        assert!(matches!(
            err,
            RwreError::CapExceeded {
                censored: 10,
                total: 10,
                cap: 3
            }
        ));
    }
}
