//! I.i.d. random environments satisfying A0(ε), reflection invariance and
//! balance in the first coordinate, plus audits and window persistence.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::num::NonZeroUsize;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use lru::LruCache;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RwreError};
use crate::lattice::{for_each_in_cube, Site, MAX_DIM};
use crate::rng::{tag, CounterRng};
use crate::stats::ks_two_sample;

/// Bound on comparison kernels `|p(e) - 1/(2d)| <= κ` for the symmetric class.
pub const DEFAULT_KAPPA: f64 = 0.02;

const NORMALIZATION_TOL: f64 = 1e-14;

/// Weights on the 2d signed unit steps, ordered `+e1, -e1, +e2, -e2, ...`.
#[derive(Clone, Copy, PartialEq)]
pub struct SiteDistribution {
    d: usize,
    w: [f64; 2 * MAX_DIM],
}

impl std::fmt::Debug for SiteDistribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.weights()).finish()
    }
}

impl SiteDistribution {
    pub fn new(weights: &[f64]) -> Result<Self> {
        if weights.len() % 2 != 0 || weights.len() < 2 || weights.len() > 2 * MAX_DIM {
            return Err(RwreError::InvalidArgument(format!(
                "expected 2d weights with 1 <= d <= {MAX_DIM}, got {}",
                weights.len()
            )));
        }
        let mut w = [0.0; 2 * MAX_DIM];
        w[..weights.len()].copy_from_slice(weights);
        Ok(Self {
            d: weights.len() / 2,
            w,
        })
    }

    /// Simple random walk weights `1/(2d)`.
    pub fn uniform(d: usize) -> Self {
        Self::new(&vec![1.0 / (2 * d) as f64; 2 * d]).expect("valid dimension")
    }

    /// Symmetric weights from per-axis values `p(e_i) = p(-e_i)`.
    pub fn symmetric(per_axis: &[f64]) -> Result<Self> {
        let w: Vec<f64> = per_axis.iter().flat_map(|&p| [p, p]).collect();
        Self::new(&w)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.w[..2 * self.d]
    }

    #[inline]
    pub fn get(&self, dir: usize) -> f64 {
        self.w[dir]
    }

    /// Per-axis value `p(e_i)` (the `+e_i` weight).
    pub fn axis(&self, axis: usize) -> f64 {
        self.w[2 * axis]
    }

    pub fn max_deviation(&self) -> f64 {
        let base = 1.0 / (2 * self.d) as f64;
        self.weights()
            .iter()
            .map(|w| (w - base).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.d).all(|i| self.w[2 * i] == self.w[2 * i + 1])
    }

    /// Inverse-CDF step choice in the fixed direction order.
    #[inline]
    pub fn pick(&self, u: f64) -> usize {
        let mut acc = 0.0;
        let n = 2 * self.d;
        for dir in 0..n - 1 {
            acc += self.w[dir];
            if u < acc {
                return dir;
            }
        }
        n - 1
    }

    /// Law with `+e_axis` and `-e_axis` weights exchanged.
    pub fn reflected(&self, axis: usize) -> Self {
        let mut out = *self;
        out.w.swap(2 * axis, 2 * axis + 1);
        out
    }

    /// Validates a symmetric comparison kernel within distance `kappa` of SRW.
    pub fn check_symmetric_class(&self, kappa: f64) -> Result<()> {
        if !self.is_symmetric() {
            return Err(RwreError::InvalidArgument(format!(
                "kernel {:?} is not symmetric",
                self.weights()
            )));
        }
        let sum: f64 = self.weights().iter().sum();
        if (sum - 1.0).abs() > 1e-12 || self.weights().iter().any(|&w| w < 0.0) {
            return Err(RwreError::InvalidArgument(format!(
                "kernel {:?} is not a probability vector",
                self.weights()
            )));
        }
        if self.max_deviation() > kappa + 1e-15 {
            return Err(RwreError::InvalidArgument(format!(
                "kernel {:?} deviates from 1/(2d) by more than kappa = {kappa}",
                self.weights()
            )));
        }
        Ok(())
    }
}

/// Built-in environment laws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Every site is simple random walk.
    Zero,
    /// Uniform perturbations with random signs (see `sample_site_distribution`).
    PairUniform,
    /// Same construction with two-point laws on `{0, ε/2}`.
    PairTwoPoint,
}

impl FromStr for Family {
    type Err = RwreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Family::Zero),
            "pair-uniform" => Ok(Family::PairUniform),
            "pair-two-point" => Ok(Family::PairTwoPoint),
            other => Err(RwreError::InvalidArgument(format!(
                "unknown family '{other}' (expected zero, pair-uniform, pair-two-point)"
            ))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Zero => "zero",
            Family::PairUniform => "pair-uniform",
            Family::PairTwoPoint => "pair-two-point",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub d: usize,
    pub epsilon: f64,
    pub family: Family,
    pub master_seed: u64,
}

impl EnvironmentSpec {
    pub fn new(d: usize, epsilon: f64, family: Family, master_seed: u64) -> Result<Self> {
        let s = Self {
            d,
            epsilon,
            family,
            master_seed,
        };
        s.validate()?;
        Ok(s)
    }

    /// Simple random walk in dimension `d`.
    pub fn srw(d: usize) -> Self {
        Self {
            d,
            epsilon: 0.0,
            family: Family::Zero,
            master_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.d > MAX_DIM {
            return Err(RwreError::InvalidArgument(format!(
                "dimension must lie in 2..={MAX_DIM}, got {}",
                self.d
            )));
        }
        let limit = 1.0 / (2 * self.d) as f64;
        if !(self.epsilon >= 0.0 && self.epsilon < limit) {
            return Err(RwreError::InvalidArgument(format!(
                "epsilon must lie in [0, 1/(2d)) = [0, {limit}), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Same law with a different master seed.
    pub fn with_seed(&self, master_seed: u64) -> Self {
        Self {
            master_seed,
            ..*self
        }
    }

    pub fn is_homogeneous(&self) -> bool {
        self.family == Family::Zero || self.epsilon == 0.0
    }
}

fn site_stream(spec: &EnvironmentSpec, x: &Site) -> CounterRng {
    let mut words = [0u64; MAX_DIM + 3];
    words[0] = spec.master_seed;
    words[1] = tag::ENVIRONMENT;
    words[2] = spec.d as u64;
    for (i, &c) in x.coords().iter().enumerate() {
        words[3 + i] = c as i64 as u64;
    }
    CounterRng::from_words(&words[..3 + spec.d])
}

/// Draws the site distribution at `x`. Normalization, balance in `e1` and the
/// A0 bound hold by construction:
/// `w(±e1) = 1/(2d) + c1`, `w(±e_i) = 1/(2d) - c1/(d-1) ± s_i a_i` for `i >= 2`,
/// with independent uniform signs `s_i` realizing the reflections.
pub fn sample_site_distribution(spec: &EnvironmentSpec, x: &Site) -> SiteDistribution {
    let d = spec.d;
    let base = 1.0 / (2 * d) as f64;
    if spec.is_homogeneous() {
        return SiteDistribution::uniform(d);
    }
    let eps = spec.epsilon;
    let mut rng = site_stream(spec, x);
    let c1 = match spec.family {
        Family::PairUniform => (rng.uniform() - 0.5) * eps,
        _ => {
            if rng.uniform() < 0.5 {
                0.0
            } else {
                0.5 * eps
            }
        }
    };
    let c = -c1 / (d - 1) as f64;
    let mut w = [0.0; 2 * MAX_DIM];
    w[0] = base + c1;
    w[1] = base + c1;
    for i in 1..d {
        let a = match spec.family {
            Family::PairUniform => 0.5 * eps * rng.uniform(),
            _ => {
                if rng.uniform() < 0.5 {
                    0.0
                } else {
                    0.5 * eps
                }
            }
        };
        let s = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
        w[2 * i] = base + c + s * a;
        w[2 * i + 1] = base + c - s * a;
    }
    SiteDistribution { d, w }
}

/// Outcome of `verify_conditions`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub normalized: bool,
    pub normalization_error: f64,
    pub nonnegative: bool,
    pub a0: bool,
    /// `ε - max_e |w(e) - 1/(2d)|`.
    pub a0_slack: f64,
    pub balanced: bool,
    pub balance_gap: f64,
}

impl ConditionReport {
    pub fn all_pass(&self) -> bool {
        self.normalized && self.nonnegative && self.a0 && self.balanced
    }
}

pub fn verify_conditions(dist: &SiteDistribution, epsilon: f64) -> ConditionReport {
    let sum: f64 = dist.weights().iter().sum();
    let slack = epsilon - dist.max_deviation();
    let gap = (dist.get(0) - dist.get(1)).abs();
    ConditionReport {
        normalized: (sum - 1.0).abs() <= NORMALIZATION_TOL,
        normalization_error: sum - 1.0,
        nonnegative: dist.weights().iter().all(|&w| w >= 0.0),
        a0: slack >= -1e-15,
        a0_slack: slack,
        balanced: gap == 0.0,
        balance_gap: gap,
    }
}

/// Outcome of the reflection-invariance audit for one axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymmetryReport {
    pub axis: usize,
    pub n_samples: usize,
    pub max_statistic: f64,
    pub min_p_value: f64,
    pub significance: f64,
    pub pass: bool,
}

/// Compares the law of the weight vector with its `O_axis` mirror image by
/// per-component two-sample KS tests on two disjoint site samples; the
/// significance is Bonferroni-split over the 2d components. `axis` is 1-based.
pub fn symmetry_audit(
    spec: &EnvironmentSpec,
    axis: usize,
    n_samples: usize,
    significance: f64,
) -> Result<SymmetryReport> {
    spec.validate()?;
    if axis < 1 || axis > spec.d {
        return Err(RwreError::InvalidArgument(format!(
            "axis must lie in 1..={}, got {axis}",
            spec.d
        )));
    }
    if n_samples < 1000 {
        return Err(RwreError::InvalidArgument(format!(
            "symmetry audit needs at least 1000 samples, got {n_samples}"
        )));
    }
    let d = spec.d;
    let draw = |k: usize, row: i32| {
        let mut c = vec![0; d];
        c[0] = k as i32;
        c[1] = row;
        sample_site_distribution(spec, &Site::new(&c))
    };
    let plain: Vec<SiteDistribution> = (0..n_samples).map(|k| draw(k, 0)).collect();
    let mirrored: Vec<SiteDistribution> = (0..n_samples)
        .map(|k| draw(k, 1).reflected(axis - 1))
        .collect();
    let mut max_stat: f64 = 0.0;
    let mut min_p: f64 = 1.0;
    for comp in 0..2 * d {
        let a: Vec<f64> = plain.iter().map(|w| w.get(comp)).collect();
        let b: Vec<f64> = mirrored.iter().map(|w| w.get(comp)).collect();
        let r = ks_two_sample(&a, &b);
        max_stat = max_stat.max(r.statistic);
        min_p = min_p.min(r.p_value);
    }
    let pass = min_p >= significance / (2 * d) as f64;
    Ok(SymmetryReport {
        axis,
        n_samples,
        max_statistic: max_stat,
        min_p_value: min_p,
        significance,
        pass,
    })
}

/// Anything that supplies nearest-neighbor transition weights per site.
pub trait TransitionSource: Sync {
    fn dim(&self) -> usize;
    fn at(&self, x: &Site) -> SiteDistribution;
    /// The common law when the source is translation invariant.
    fn homogeneous(&self) -> Option<SiteDistribution>;
}

impl TransitionSource for SiteDistribution {
    fn dim(&self) -> usize {
        self.d
    }
    fn at(&self, _x: &Site) -> SiteDistribution {
        *self
    }
    fn homogeneous(&self) -> Option<SiteDistribution> {
        Some(*self)
    }
}

/// A quenched environment; values are a pure function of `(spec, site)`.
pub struct Environment {
    spec: EnvironmentSpec,
    cache: Option<Mutex<LruCache<Site, SiteDistribution>>>,
}

impl std::fmt::Debug for Environment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Environment")
            .field("spec", &self.spec)
            .field("cached", &self.cache.is_some())
            .finish()
    }
}

impl Environment {
    pub fn new(spec: EnvironmentSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, cache: None })
    }

    /// Environment with an LRU cache of `capacity` site distributions.
    pub fn with_cache(spec: EnvironmentSpec, capacity: usize) -> Result<Self> {
        spec.validate()?;
        let cache = NonZeroUsize::new(capacity).map(|c| Mutex::new(LruCache::new(c)));
        Ok(Self { spec, cache })
    }

    pub fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    pub fn get(&self, x: &Site) -> SiteDistribution {
        match &self.cache {
            None => sample_site_distribution(&self.spec, x),
            Some(cache) => {
                if let Some(v) = cache.lock().expect("cache lock").get(x) {
                    return *v;
                }
                let v = sample_site_distribution(&self.spec, x);
                cache.lock().expect("cache lock").put(*x, v);
                v
            }
        }
    }
}

impl TransitionSource for Environment {
    fn dim(&self) -> usize {
        self.spec.d
    }
    fn at(&self, x: &Site) -> SiteDistribution {
        self.get(x)
    }
    fn homogeneous(&self) -> Option<SiteDistribution> {
        self.spec
            .is_homogeneous()
            .then(|| SiteDistribution::uniform(self.spec.d))
    }
}

/// Dense table of weights on the cube `center + [-r, r]^d`.
pub struct EnvWindow {
    d: usize,
    lo: Site,
    side: i64,
    weights: Vec<f64>,
}

impl EnvWindow {
    pub fn new<S: TransitionSource + ?Sized>(source: &S, center: &Site, r: i32) -> Result<Self> {
        let d = source.dim();
        let side = 2 * r as i64 + 1;
        let count = (side as usize).pow(d as u32);
        let bytes = count * 2 * d * 8;
        const CAP: usize = 1 << 31;
        if bytes > CAP {
            return Err(RwreError::MemoryCap {
                requested: bytes,
                cap: CAP,
            });
        }
        let mut weights = Vec::with_capacity(count * 2 * d);
        let homog = source.homogeneous();
        for_each_in_cube(center, r, |s| {
            let w = homog.unwrap_or_else(|| source.at(&s));
            weights.extend_from_slice(w.weights());
        });
        let lo = center.sub(&Site::new(&vec![r; d]));
        Ok(Self {
            d,
            lo,
            side,
            weights,
        })
    }

    #[inline]
    fn index(&self, x: &Site) -> Option<usize> {
        let mut idx: i64 = 0;
        for i in 0..self.d {
            let c = (x.get(i) - self.lo.get(i)) as i64;
            if c < 0 || c >= self.side {
                return None;
            }
            idx = idx * self.side + c;
        }
        Some(idx as usize)
    }

    /// Weights at `x`, if inside the window.
    #[inline]
    pub fn weights(&self, x: &Site) -> Option<&[f64]> {
        self.index(x)
            .map(|k| &self.weights[k * 2 * self.d..(k + 1) * 2 * self.d])
    }
}

/// Header line of an environment window export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowHeader {
    pub d: usize,
    pub epsilon: f64,
    pub family: Family,
    pub master_seed: u64,
    pub box_lo: Vec<i32>,
    pub box_hi: Vec<i32>,
}

/// Writes the sites of the box `[lo, hi]` (inclusive) with their weights: a JSON
/// header line followed by CSV rows `x1..xd,w_plus_1,w_minus_1,...`.
pub fn export_window(env: &Environment, lo: &Site, hi: &Site, path: &Path) -> Result<()> {
    let spec = env.spec();
    let d = spec.d;
    if lo.dim() != d || hi.dim() != d || (0..d).any(|i| lo.get(i) > hi.get(i)) {
        return Err(RwreError::InvalidArgument(
            "window bounds must have dimension d and lo <= hi".into(),
        ));
    }
    let header = WindowHeader {
        d,
        epsilon: spec.epsilon,
        family: spec.family,
        master_seed: spec.master_seed,
        box_lo: lo.coords().to_vec(),
        box_hi: hi.coords().to_vec(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    let mut cols: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    for i in 1..=d {
        cols.push(format!("w_plus_{i}"));
        cols.push(format!("w_minus_{i}"));
    }
    writeln!(out, "{}", cols.join(","))?;
    let mut x = *lo;
    loop {
        let w = env.get(&x);
        let mut fields: Vec<String> = x.coords().iter().map(|c| c.to_string()).collect();
        fields.extend(w.weights().iter().map(|v| format!("{v:.16e}")));
        writeln!(out, "{}", fields.join(","))?;
        // Advance lexicographically inside the box.
        let mut i = d;
        loop {
            if i == 0 {
                out.flush()?;
                return Ok(());
            }
            i -= 1;
            if x.get(i) < hi.get(i) {
                let mut c = x.coords().to_vec();
                c[i] += 1;
                for (j, cj) in c.iter_mut().enumerate().skip(i + 1) {
                    *cj = lo.get(j);
                }
                x = Site::new(&c);
                break;
            }
        }
    }
}

/// Reads an exported window and validates every row: normalization, A0 and
/// balance, and bit-identity with regeneration from the header's spec.
pub fn import_window(path: &Path) -> Result<(WindowHeader, Vec<(Site, SiteDistribution)>)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let header: WindowHeader = serde_json::from_str(first.trim_end())?;
    let spec = EnvironmentSpec::new(header.d, header.epsilon, header.family, header.master_seed)?;
    let d = header.d;
    let mut csv = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for rec in csv.records() {
        let rec = rec?;
        if rec.len() != 3 * d {
            return Err(RwreError::InvalidData(format!(
                "row has {} fields, expected {}",
                rec.len(),
                3 * d
            )));
        }
        let parse_err = |e: String| RwreError::InvalidData(e);
        let coords: Vec<i32> = (0..d)
            .map(|i| rec[i].parse::<i32>().map_err(|e| parse_err(e.to_string())))
            .collect::<Result<_>>()?;
        let w: Vec<f64> = (d..3 * d)
            .map(|i| rec[i].parse::<f64>().map_err(|e| parse_err(e.to_string())))
            .collect::<Result<_>>()?;
        let x = Site::new(&coords);
        let dist = SiteDistribution::new(&w)?;
        let report = verify_conditions(&dist, header.epsilon);
        if !report.all_pass() {
            return Err(RwreError::InvalidData(format!(
                "site {x} violates the environment conditions: {report:?}"
            )));
        }
        if dist != sample_site_distribution(&spec, &x) {
            return Err(RwreError::InvalidData(format!(
                "site {x} does not match the environment regenerated from the header"
            )));
        }
        rows.push((x, dist));
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: Family, eps: f64, seed: u64) -> EnvironmentSpec {
        EnvironmentSpec::new(3, eps, family, seed).unwrap()
    }

    #[test]
    fn zero_family_is_srw() {
        let s = spec(Family::Zero, 0.1, 3);
        let w = sample_site_distribution(&s, &Site::new(&[4, 5, 6]));
        assert!(w.weights().iter().all(|&v| v == 1.0 / 6.0));
    }

    #[test]
    fn construction_satisfies_conditions() {
        for family in [Family::PairUniform, Family::PairTwoPoint] {
            let s = spec(family, 0.05, 9);
            for k in 0..20_000 {
                let x = Site::new(&[k, -k / 3, 7]);
                let w = sample_site_distribution(&s, &x);
                let r = verify_conditions(&w, 0.05);
                assert!(r.all_pass(), "{family:?} {x}: {r:?}");
            }
        }
    }

    #[test]
    fn determinism() {
        let s = spec(Family::PairUniform, 0.05, 42);
        let x = Site::new(&[1, 2, 3]);
        let a = sample_site_distribution(&s, &x);
        let b = sample_site_distribution(&s, &x);
        assert_eq!(a.weights(), b.weights());
        let env = Environment::with_cache(s, 16).unwrap();
        assert_eq!(env.get(&x).weights(), a.weights());
        assert_eq!(env.get(&x).weights(), a.weights());
    }

    #[test]
    fn verify_conditions_examples() {
        let srw = SiteDistribution::uniform(3);
        let r = verify_conditions(&srw, 0.05);
        assert!(r.all_pass());
        assert_eq!(r.a0_slack, 0.05);
        let unbalanced =
            SiteDistribution::new(&[0.2, 0.1, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0]).unwrap();
        assert!(!verify_conditions(&unbalanced, 0.1).balanced);
        let mut w = [1.0 / 6.0; 6];
        w[2] += 1e-6;
        let r = verify_conditions(&SiteDistribution::new(&w).unwrap(), 0.05);
        assert!(!r.normalized);
    }

    #[test]
    fn symmetry_audit_examples() {
        let z = symmetry_audit(&spec(Family::Zero, 0.0, 1), 2, 1000, 0.01).unwrap();
        assert_eq!(z.max_statistic, 0.0);
        assert!(z.pass);
        let s = spec(Family::PairUniform, 0.05, 1);
        assert!(symmetry_audit(&s, 1, 5000, 0.01).unwrap().pass);
        assert!(symmetry_audit(&s, 2, 20_000, 0.01).unwrap().pass);
        assert!(symmetry_audit(&s, 4, 5000, 0.01).is_err());
    }

    #[test]
    fn audit_detects_broken_reflection() {
        // A law with w(e2) > w(-e2) always is not reflection invariant; feed it
        // through the KS machinery directly.
        let s = spec(Family::PairUniform, 0.05, 1);
        let a: Vec<f64> = (0..2000)
            .map(|k| {
                let w = sample_site_distribution(&s, &Site::new(&[k, 0, 0]));
                w.get(2).max(w.get(3))
            })
            .collect();
        let b: Vec<f64> = (0..2000)
            .map(|k| {
                let w = sample_site_distribution(&s, &Site::new(&[k, 1, 0]));
                w.get(2).min(w.get(3))
            })
            .collect();
        assert!(!ks_two_sample(&a, &b).passes(0.01));
    }

    #[test]
    fn window_matches_accessor() {
        let env = Environment::new(spec(Family::PairUniform, 0.05, 5)).unwrap();
        let c = Site::new(&[2, -1, 0]);
        let win = EnvWindow::new(&env, &c, 3).unwrap();
        for_each_in_cube(&c, 3, |x| {
            assert_eq!(win.weights(&x).unwrap(), env.get(&x).weights());
        });
        assert!(win.weights(&Site::new(&[6, 0, 0])).is_none());
    }

    #[test]
    fn export_import_roundtrip() {
        let env = Environment::new(spec(Family::PairUniform, 0.05, 11)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("env.csv");
        export_window(
            &env,
            &Site::new(&[-1, -1, -1]),
            &Site::new(&[1, 2, 1]),
            &path,
        )
        .unwrap();
        let (header, rows) = import_window(&path).unwrap();
        assert_eq!(header.master_seed, 11);
        assert_eq!(rows.len(), 3 * 4 * 3);
        for (x, w) in rows {
            assert_eq!(w, env.get(&x));
        }
    }

    #[test]
    fn import_rejects_tampering() {
        let env = Environment::new(spec(Family::PairUniform, 0.05, 11)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("env.csv");
        export_window(&env, &Site::new(&[0, 0, 0]), &Site::new(&[1, 0, 0]), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut f: Vec<String> = lines[2].split(',').map(String::from).collect();
        f[3] = "0.2".into();
        lines[2] = f.join(",");
        std::fs::write(&path, lines.join("\n")).unwrap();
        assert!(import_window(&path).is_err());
    }

    #[test]
    fn epsilon_domain() {
        assert!(EnvironmentSpec::new(3, 1.0 / 6.0, Family::PairUniform, 0).is_err());
        assert!(EnvironmentSpec::new(3, -0.01, Family::PairUniform, 0).is_err());
    }

    #[test]
    fn pick_follows_weights() {
        let w = SiteDistribution::new(&[0.2, 0.2, 0.1, 0.2, 0.15, 0.15]).unwrap();
        assert_eq!(w.pick(0.0), 0);
        assert_eq!(w.pick(0.19), 0);
        assert_eq!(w.pick(0.21), 1);
        assert_eq!(w.pick(0.45), 2);
        assert_eq!(w.pick(0.999_999), 5);
    }
}
