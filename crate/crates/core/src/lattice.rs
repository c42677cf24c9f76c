//! Lattice geometry on Z^d: sites, Euclidean balls with their outer
//! boundaries, shells, and distance-sorted offset tables.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, RwreError};

/// Largest supported dimension.
pub const MAX_DIM: usize = 6;

/// Default cap on interior sites for exact (linear-algebra) methods.
pub const EXACT_SITE_CAP: usize = 200_000;

const RADIUS_SLACK: f64 = 1e-9;

/// A point of Z^d. Unused trailing coordinates are kept at zero so that the
/// derived order is lexicographic on the first `dim` coordinates.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    coords: [i32; MAX_DIM],
    dim: u8,
}

impl Site {
    pub fn new(coords: &[i32]) -> Self {
        assert!(
            !coords.is_empty() && coords.len() <= MAX_DIM,
            "dimension {} not in 1..={MAX_DIM}",
            coords.len()
        );
        let mut c = [0; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        Self {
            coords: c,
            dim: coords.len() as u8,
        }
    }

    pub fn origin(d: usize) -> Self {
        Self::new(&vec![0; d])
    }

    /// `sign * e_axis` with a zero-based axis.
    pub fn unit(d: usize, axis: usize, sign: i32) -> Self {
        let mut s = Self::origin(d);
        s.coords[axis] = sign;
        s
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    #[inline]
    pub fn coords(&self) -> &[i32] {
        &self.coords[..self.dim as usize]
    }

    #[inline]
    pub fn get(&self, axis: usize) -> i32 {
        self.coords[axis]
    }

    #[inline]
    pub fn norm2(&self) -> i64 {
        self.coords().iter().map(|&c| c as i64 * c as i64).sum()
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        (self.norm2() as f64).sqrt()
    }

    #[inline]
    pub fn dist2(&self, other: &Site) -> i64 {
        (0..self.dim())
            .map(|i| {
                let c = (self.coords[i] - other.coords[i]) as i64;
                c * c
            })
            .sum()
    }

    #[inline]
    pub fn add(&self, other: &Site) -> Site {
        let mut s = *self;
        for i in 0..self.dim() {
            s.coords[i] += other.coords[i];
        }
        s
    }

    #[inline]
    pub fn sub(&self, other: &Site) -> Site {
        let mut s = *self;
        for i in 0..self.dim() {
            s.coords[i] -= other.coords[i];
        }
        s
    }

    /// Neighbor in direction `dir`, where `dir = 2i` is `+e_{i+1}` and
    /// `dir = 2i + 1` is `-e_{i+1}`.
    #[inline]
    pub fn step(&self, dir: usize) -> Site {
        let mut s = *self;
        s.coords[dir / 2] += if dir % 2 == 0 { 1 } else { -1 };
        s
    }

    /// Mirror image under `x_axis -> -x_axis`.
    pub fn reflect(&self, axis: usize) -> Site {
        let mut s = *self;
        s.coords[axis] = -s.coords[axis];
        s
    }
}

impl Serialize for Site {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.coords().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Site {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<i32>::deserialize(d)?;
        if v.is_empty() || v.len() > MAX_DIM {
            return Err(serde::de::Error::custom(format!(
                "site dimension {} not in 1..={MAX_DIM}",
                v.len()
            )));
        }
        Ok(Site::new(&v))
    }
}

impl fmt::Debug for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.coords().iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// Whether `y` lies in the closed Euclidean ball of radius `radius` about `center`.
#[inline]
pub fn in_ball(center: &Site, radius: f64, y: &Site) -> bool {
    (y.dist2(center) as f64) <= radius * radius + RADIUS_SLACK
}

/// Largest integer squared norm inside a ball of real radius `radius`.
#[inline]
pub fn radius_to_r2(radius: f64) -> i64 {
    if radius < 0.0 {
        -1
    } else {
        (radius * radius + RADIUS_SLACK).floor() as i64
    }
}

/// Calls `f` on every site of the cube `center + [-r, r]^d` in lexicographic order.
pub fn for_each_in_cube<F: FnMut(Site)>(center: &Site, r: i32, mut f: F) {
    let d = center.dim();
    let mut off = vec![-r; d];
    loop {
        let mut s = *center;
        for i in 0..d {
            s.coords[i] += off[i];
        }
        f(s);
        let mut i = d;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if off[i] < r {
                off[i] += 1;
                for o in off.iter_mut().skip(i + 1) {
                    *o = -r;
                }
                break;
            }
        }
    }
}

/// The closed ball `V_L(center)` with its outer boundary.
#[derive(Debug, Clone)]
pub struct Ball {
    pub center: Site,
    pub radius: f64,
    interior: Vec<Site>,
    boundary: Vec<Site>,
}

impl Ball {
    /// Enumerates the ball, failing with `BallTooLarge` above the default cap.
    pub fn new(center: Site, radius: f64) -> Result<Self> {
        Self::with_cap(center, radius, EXACT_SITE_CAP)
    }

    pub fn with_cap(center: Site, radius: f64, cap: usize) -> Result<Self> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(RwreError::InvalidArgument(format!(
                "ball radius must be finite and nonnegative, got {radius}"
            )));
        }
        let r2 = radius_to_r2(radius);
        let estimate = estimate_ball_size(center.dim(), radius);
        if estimate > 2 * cap + 1000 {
            return Err(RwreError::BallTooLarge {
                sites: estimate,
                cap,
            });
        }
        let r = radius.floor() as i32 + 1;
        let mut interior = Vec::new();
        let mut boundary = Vec::new();
        let d = center.dim();
        for_each_in_cube(&center, r, |s| {
            let n2 = s.dist2(&center);
            if n2 <= r2 {
                interior.push(s);
            } else if (0..2 * d).any(|dir| s.step(dir).dist2(&center) <= r2) {
                boundary.push(s);
            }
        });
        if interior.len() > cap {
            return Err(RwreError::BallTooLarge {
                sites: interior.len(),
                cap,
            });
        }
        Ok(Self {
            center,
            radius,
            interior,
            boundary,
        })
    }

    pub fn dim(&self) -> usize {
        self.center.dim()
    }

    /// Interior sites in lexicographic order.
    pub fn interior(&self) -> &[Site] {
        &self.interior
    }

    /// Outer boundary sites in lexicographic order.
    pub fn boundary(&self) -> &[Site] {
        &self.boundary
    }

    pub fn contains(&self, y: &Site) -> bool {
        in_ball(&self.center, self.radius, y)
    }

    /// Position of `y` in the interior list.
    pub fn index_of(&self, y: &Site) -> Option<usize> {
        self.interior.binary_search(y).ok()
    }

    /// Position of `z` in the boundary list.
    pub fn boundary_index_of(&self, z: &Site) -> Option<usize> {
        self.boundary.binary_search(z).ok()
    }

    /// `d_L(x) = L - |x - center|`.
    pub fn d_l(&self, x: &Site) -> Result<f64> {
        d_l(x, self)
    }

    /// Sites with `a <= d_L < b`.
    pub fn shell(&self, a: f64, b: f64) -> Result<Shell> {
        shell(self, a, b)
    }
}

fn estimate_ball_size(d: usize, radius: f64) -> usize {
    // Volume of the d-ball of radius L + 1, a generous upper estimate.
    let r = radius + 1.0;
    let unit = std::f64::consts::PI.powf(d as f64 / 2.0) / gamma_half_int(d + 2);
    (unit * r.powi(d as i32)).ceil() as usize
}

/// Gamma(n / 2) for positive integer n.
fn gamma_half_int(n: usize) -> f64 {
    if n == 1 {
        std::f64::consts::PI.sqrt()
    } else if n == 2 {
        1.0
    } else {
        (n as f64 / 2.0 - 1.0) * gamma_half_int(n - 2)
    }
}

/// `d_L(x) = L - |x - center|` for `x` in the closed ball.
pub fn d_l(x: &Site, ball: &Ball) -> Result<f64> {
    if !ball.contains(x) {
        return Err(RwreError::OutsideBall {
            site: x.to_string(),
            radius: ball.radius,
        });
    }
    Ok((ball.radius - x.sub(&ball.center).norm()).max(0.0))
}

/// `Sh_L(a, b) = {x in V_L : a <= d_L(x) < b}`.
#[derive(Debug, Clone)]
pub struct Shell {
    pub radius: f64,
    pub a: f64,
    pub b: f64,
    pub sites: Vec<Site>,
}

pub fn shell(ball: &Ball, a: f64, b: f64) -> Result<Shell> {
    // b may exceed L; the shell is then all sites with d_L >= a.
    if !(a >= 0.0 && a < b) {
        return Err(RwreError::InvalidArgument(format!(
            "shell bounds need 0 <= a < b, got a={a}, b={b}"
        )));
    }
    let sites = ball
        .interior()
        .iter()
        .filter(|x| {
            let dl = ball.radius - x.sub(&ball.center).norm();
            a <= dl && dl < b
        })
        .copied()
        .collect();
    Ok(Shell {
        radius: ball.radius,
        a,
        b,
        sites,
    })
}

/// Offsets of `V_R(0)` sorted by `(|y|^2, lexicographic)`, with neighbor
/// indices. Every closed ball `V_t(0)` with `t <= R` is a prefix of the list,
/// and a neighbor index at or beyond the prefix length marks a site outside.
#[derive(Debug, Clone)]
pub struct SortedOffsets {
    d: usize,
    offsets: Vec<Site>,
    norm2: Vec<i64>,
    nbr: Vec<u32>,
}

/// Neighbor marker for sites beyond the table's outer radius.
pub const NO_NEIGHBOR: u32 = u32::MAX;

impl SortedOffsets {
    pub fn new(d: usize, max_r2: i64) -> Self {
        let r = (max_r2 as f64).sqrt().floor() as i32 + 1;
        let mut offsets = Vec::new();
        for_each_in_cube(&Site::origin(d), r, |s| {
            if s.norm2() <= max_r2 {
                offsets.push(s);
            }
        });
        offsets.sort_by_key(|s| (s.norm2(), *s));
        let norm2: Vec<i64> = offsets.iter().map(|s| s.norm2()).collect();
        let mut nbr = vec![NO_NEIGHBOR; offsets.len() * 2 * d];
        for (j, s) in offsets.iter().enumerate() {
            for dir in 0..2 * d {
                let t = s.step(dir);
                let n2 = t.norm2();
                if n2 <= max_r2 {
                    let lo = norm2.partition_point(|&v| v < n2);
                    let hi = norm2.partition_point(|&v| v <= n2);
                    let k = lo
                        + offsets[lo..hi]
                            .binary_search(&t)
                            .expect("offset table is closed");
                    nbr[j * 2 * d + dir] = k as u32;
                }
            }
        }
        Self {
            d,
            offsets,
            norm2,
            nbr,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn max_r2(&self) -> i64 {
        *self.norm2.last().unwrap_or(&0)
    }

    pub fn offset(&self, j: usize) -> Site {
        self.offsets[j]
    }

    pub fn offsets(&self) -> &[Site] {
        &self.offsets
    }

    pub fn norm2(&self, j: usize) -> i64 {
        self.norm2[j]
    }

    /// Number of offsets with `|y|^2 <= r2`.
    pub fn prefix_len(&self, r2: i64) -> usize {
        self.norm2.partition_point(|&v| v <= r2)
    }

    #[inline]
    pub fn neighbor(&self, j: usize, dir: usize) -> u32 {
        self.nbr[j * 2 * self.d + dir]
    }

    /// Flat neighbor table, `2d` entries per offset.
    pub fn neighbor_table(&self) -> &[u32] {
        &self.nbr
    }

    /// Index of an offset, if present.
    pub fn index_of(&self, y: &Site) -> Option<usize> {
        let n2 = y.norm2();
        let lo = self.norm2.partition_point(|&v| v < n2);
        let hi = self.norm2.partition_point(|&v| v <= n2);
        self.offsets[lo..hi].binary_search(y).ok().map(|k| lo + k)
    }
}

/// Distinct squared norms of Z^d points in `[lo, hi]`, ascending.
pub fn representable_norms(d: usize, lo: i64, hi: i64) -> Vec<i64> {
    let table = SortedOffsets::new(d, hi.max(0));
    let mut out: Vec<i64> = table
        .norm2
        .iter()
        .copied()
        .filter(|&n| n >= lo && n <= hi)
        .collect();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_count(d: usize, radius: f64) -> usize {
        let r = radius.floor() as i32 + 1;
        let mut n = 0;
        for_each_in_cube(&Site::origin(d), r, |s| {
            if (s.norm2() as f64) <= radius * radius + 1e-9 {
                n += 1;
            }
        });
        n
    }

    #[test]
    fn small_balls() {
        let b0 = Ball::new(Site::origin(3), 0.0).unwrap();
        assert_eq!(b0.interior(), &[Site::origin(3)]);
        assert_eq!(b0.boundary().len(), 6);
        let b1 = Ball::new(Site::origin(3), 1.0).unwrap();
        assert_eq!(b1.interior().len(), 7);
        assert_eq!(b1.boundary().len(), 18);
        let b2 = Ball::new(Site::origin(3), 2.0).unwrap();
        assert_eq!(b2.interior().len(), 33);
    }

    #[test]
    fn boundary_of_v1_by_enumeration() {
        // Neighbors of V_1 not in V_1: 6 sites at distance 2 and 12 at sqrt(2).
        let b1 = Ball::new(Site::origin(3), 1.0).unwrap();
        let mut set = std::collections::BTreeSet::new();
        for x in b1.interior() {
            for dir in 0..6 {
                let y = x.step(dir);
                if y.norm2() > 1 {
                    set.insert(y);
                }
            }
        }
        assert_eq!(set.into_iter().collect::<Vec<_>>(), b1.boundary());
    }

    #[test]
    fn d_l_examples() {
        let b = Ball::new(Site::origin(3), 10.0).unwrap();
        assert_eq!(b.d_l(&Site::origin(3)).unwrap(), 10.0);
        assert_eq!(b.d_l(&Site::new(&[3, 0, 0])).unwrap(), 7.0);
        let v = b.d_l(&Site::new(&[2, 2, 0])).unwrap();
        assert!((v - (10.0 - 8f64.sqrt())).abs() < 1e-15);
        assert!(b.d_l(&Site::new(&[11, 0, 0])).is_err());
    }

    #[test]
    fn shells() {
        let b1 = Ball::new(Site::origin(3), 1.0).unwrap();
        assert_eq!(b1.shell(0.0, 2.0).unwrap().sites.len(), 7);
        let b10 = Ball::new(Site::origin(3), 10.0).unwrap();
        let sh = b10.shell(0.0, 0.5).unwrap();
        assert!(sh.sites.iter().all(|x| x.norm() > 9.5 && x.norm() <= 10.0));
        let expected = brute_force_count(3, 10.0) - brute_force_count(3, 9.5);
        assert_eq!(sh.sites.len(), expected);
        let b5 = Ball::new(Site::origin(3), 5.0).unwrap();
        let sh = b5.shell(4.0, 5.0).unwrap();
        assert!(!sh.sites.contains(&Site::origin(3)));
        // 4 <= 5 - |x| < 5  <=>  0 < |x| <= 1: the six unit vectors.
        assert_eq!(sh.sites.len(), 6);
        assert!(b5.shell(2.0, 2.0).is_err());
    }

    #[test]
    fn partition_and_closure() {
        for &l in &[0.0, 1.0, 2.5, 4.0, 6.3] {
            let b = Ball::new(Site::new(&[1, -2, 3]), l).unwrap();
            for x in b.interior() {
                assert!(b.boundary_index_of(x).is_none());
                for dir in 0..6 {
                    let y = x.step(dir);
                    assert!(b.index_of(&y).is_some() || b.boundary_index_of(&y).is_some());
                }
            }
            assert_eq!(b.interior().len(), brute_force_count(3, l));
        }
    }

    #[test]
    fn d_l_below_graph_distance_to_boundary() {
        for l in 1..=8 {
            let b = Ball::new(Site::origin(3), l as f64).unwrap();
            for x in b.interior() {
                let graph = b
                    .boundary()
                    .iter()
                    .map(|z| z.sub(x).coords().iter().map(|c| c.abs()).sum::<i32>())
                    .min()
                    .unwrap();
                assert!(b.d_l(x).unwrap() <= graph as f64 + 1e-12);
            }
        }
    }

    #[test]
    fn cap_is_enforced() {
        let err = Ball::with_cap(Site::origin(3), 10.0, 100).unwrap_err();
        assert!(matches!(err, RwreError::BallTooLarge { .. }));
    }

    #[test]
    fn sorted_offsets_prefixes_are_balls() {
        let t = SortedOffsets::new(3, 30);
        for r2 in 0..=30 {
            let n = t.prefix_len(r2);
            let ball = Ball::new(Site::origin(3), (r2 as f64).sqrt()).unwrap();
            assert_eq!(n, ball.interior().len());
            for j in 0..n {
                for dir in 0..6 {
                    let k = t.neighbor(j, dir);
                    let inside = ball.contains(&t.offset(j).step(dir));
                    assert_eq!(inside, (k as usize) < n);
                }
            }
        }
        assert_eq!(
            t.index_of(&Site::new(&[1, 2, 3])).map(|j| t.offset(j)),
            Some(Site::new(&[1, 2, 3]))
        );
    }

    #[test]
    fn representable_norms_skip_sevens() {
        let v = representable_norms(3, 0, 16);
        assert!(!v.contains(&7) && !v.contains(&15));
        assert!(v.contains(&14) && v.contains(&16));
    }
}
