//! Feature correspondence search.
//!
//! Correspondences are found by exhaustive dot-product argmax over the query
//! grid, then stabilised by iterating forward (moving to fixed) and backward
//! (fixed to moving) searches until each key sits on a mutual best match.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Mutex;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, GridShape};

/// Which image a point set lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Moving,
    Fixed,
}

/// Integer voxel coordinates on a feature grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointSet {
    pub domain: Domain,
    pub points: Vec<[usize; 3]>,
}

/// One correspondence between the moving and fixed feature grids.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub moving: [usize; 3],
    pub fixed: [usize; 3],
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// One pair per line: `zm ym xm zf yf xf score`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for m in &self.pairs {
            let [zm, ym, xm] = m.moving;
            let [zf, yf, xf] = m.fixed;
            let _ = writeln!(out, "{zm} {ym} {xm} {zf} {yf} {xf} {:.9e}", m.score);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<MatchSet> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::MalformedMatches(format!("line {}: `{line}`", n + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 7 {
                return Err(bad());
            }
            let mut c = [0usize; 6];
            for (slot, f) in c.iter_mut().zip(&fields[..6]) {
                *slot = f.parse().map_err(|_| bad())?;
            }
            let score: f64 = fields[6].parse().map_err(|_| bad())?;
            if !score.is_finite() {
                return Err(bad());
            }
            pairs.push(Match {
                moving: [c[0], c[1], c[2]],
                fixed: [c[3], c[4], c[5]],
                score,
            });
        }
        Ok(MatchSet { pairs })
    }
}

/// Dot product of two feature vectors; a cosine for unit-norm inputs.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(dot(a, b))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Regular lattice with offset `step / 2` and stride `step`, in z, y, x order.
pub fn select_points(domain: &GridShape, step: usize) -> Result<PointSet> {
    if step < 1 {
        return Err(Error::InvalidStep(step));
    }
    let off = step / 2;
    let axis = |n: usize| (off..n).step_by(step).collect::<Vec<_>>();
    let (zs, ys, xs) = (axis(domain.dims[0]), axis(domain.dims[1]), axis(domain.dims[2]));
    let mut points = Vec::with_capacity(zs.len() * ys.len() * xs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                points.push([z, y, x]);
            }
        }
    }
    Ok(PointSet {
        domain: Domain::Moving,
        points,
    })
}

fn check_channels(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.channels() != b.channels() {
        return Err(Error::DimensionMismatch {
            expected: a.channels(),
            actual: b.channels(),
        });
    }
    Ok(())
}

/// Index of the query voxel most similar to `key`; the first (lowest flat,
/// i.e. lexicographic z, y, x) index wins ties.
fn argmax(key: &[f64], query: &FeatureMap) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, v) in query.data().chunks_exact(query.channels()).enumerate() {
        let s = dot(key, v);
        if s > best_score {
            best_score = s;
            best = i;
        }
    }
    best
}

/// For every key, the query-grid voxel with the most similar feature.
pub fn find_points(keys: &PointSet, key_map: &FeatureMap, query_map: &FeatureMap) -> Result<PointSet> {
    check_channels(key_map, query_map)?;
    for p in &keys.points {
        if !key_map.shape.contains(*p) {
            return Err(Error::InvalidCoordinate([p[0] as f64, p[1] as f64, p[2] as f64]));
        }
    }
    let points = keys
        .points
        .par_iter()
        .map(|p| query_map.shape.coord(argmax(key_map.vector_at(*p), query_map)))
        .collect();
    let domain = match keys.domain {
        Domain::Moving => Domain::Fixed,
        Domain::Fixed => Domain::Moving,
    };
    Ok(PointSet { domain, points })
}

/// Memoized argmax searches from one map into another.
struct Searcher<'a> {
    from: &'a FeatureMap,
    to: &'a FeatureMap,
    cache: Mutex<HashMap<usize, usize>>,
}

impl<'a> Searcher<'a> {
    fn new(from: &'a FeatureMap, to: &'a FeatureMap) -> Self {
        Searcher {
            from,
            to,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn run(&self, keys: &[usize]) -> Vec<usize> {
        let missing: Vec<usize> = {
            let cache = self.cache.lock().unwrap();
            let mut m: Vec<usize> = keys.iter().copied().filter(|k| !cache.contains_key(k)).collect();
            m.sort_unstable();
            m.dedup();
            m
        };
        let found: Vec<(usize, usize)> = missing
            .par_iter()
            .map(|&k| (k, argmax(self.from.vector(k), self.to)))
            .collect();
        let mut cache = self.cache.lock().unwrap();
        cache.extend(found);
        keys.iter().map(|k| cache[k]).collect()
    }
}

/// Stable sampling via cycle consistency.
///
/// Starts from the `step` lattice on the moving grid and repeats `iterations`
/// forward/backward searches, replacing each moving point by the point the
/// backward search returns. Pairs whose moving point still moved during the
/// final round are not cycle-consistent and are dropped; every returned pair
/// is a mutual best match. Duplicate pairs are collapsed, keeping the order
/// of first appearance.
pub fn sscc(
    moving: &FeatureMap,
    fixed: &FeatureMap,
    step: usize,
    iterations: usize,
) -> Result<MatchSet> {
    if iterations < 1 {
        return Err(Error::Config("cycle-consistency iterations must be >= 1".into()));
    }
    check_channels(moving, fixed)?;
    let seeds = select_points(&moving.shape, step)?;
    let mut xm: Vec<usize> = seeds
        .points
        .iter()
        .map(|p| moving.shape.index(p[0], p[1], p[2]))
        .collect();
    let forward = Searcher::new(moving, fixed);
    let backward = Searcher::new(fixed, moving);

    let mut xf = Vec::new();
    let mut stable = Vec::new();
    for _ in 0..iterations {
        xf = forward.run(&xm);
        let next = backward.run(&xf);
        stable = xm.iter().zip(&next).map(|(a, b)| a == b).collect::<Vec<_>>();
        xm = next;
        // Once every point is a fixed point, further rounds change nothing.
        if stable.iter().all(|&s| s) {
            break;
        }
    }

    let mut seen = std::collections::HashSet::new();
    let mut pairs = Vec::new();
    for ((&m, &f), &ok) in xm.iter().zip(&xf).zip(&stable) {
        if ok && seen.insert((m, f)) {
            pairs.push(Match {
                moving: moving.shape.coord(m),
                fixed: fixed.shape.coord(f),
                score: dot(moving.vector(m), fixed.vector(f)).clamp(-1.0, 1.0),
            });
        }
    }
    Ok(MatchSet { pairs })
}

/// Keeps pairs whose score is strictly greater than `epsilon`.
pub fn filter_matches(matches: &MatchSet, epsilon: f64) -> MatchSet {
    MatchSet {
        pairs: matches
            .pairs
            .iter()
            .filter(|m| m.score > epsilon)
            .copied()
            .collect(),
    }
}

/// Whether one more forward/backward round maps `moving` back onto itself.
pub fn is_cycle_consistent(m: [usize; 3], moving: &FeatureMap, fixed: &FeatureMap) -> bool {
    let f = argmax(moving.vector_at(m), fixed);
    let back = argmax(fixed.vector(f), moving);
    moving.shape.coord(back) == m
}
