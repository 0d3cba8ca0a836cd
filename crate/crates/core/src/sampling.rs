//! Uniform direction subsets under an antipodally symmetric electrostatic
//! energy.
//!
//! `E = Σ_{i<j} 1/‖g_i − g_j‖ + 1/‖g_i + g_j‖`. Each restart seeds a subset by
//! greedy farthest-point selection from a random start, then applies the
//! best improving single swap until none is left.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DwiVolume, GradientScheme};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsamplingResult {
    /// Sorted indices into the parent scheme (all diffusion-weighted).
    pub selected_indices: Vec<usize>,
    pub energy: f64,
}

pub fn pair_energy(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let minus = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    let plus = ((a[0] + b[0]).powi(2) + (a[1] + b[1]).powi(2) + (a[2] + b[2]).powi(2)).sqrt();
    1.0 / minus + 1.0 / plus
}

/// Energy of a set of directions.
pub fn energy(dirs: &[[f64; 3]]) -> f64 {
    let mut e = 0.0;
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            e += pair_energy(&dirs[i], &dirs[j]);
        }
    }
    e
}

/// Energy of a subset of scheme entries.
pub fn subset_energy(scheme: &GradientScheme, indices: &[usize]) -> f64 {
    let dirs: Vec<[f64; 3]> = indices.iter().map(|&i| scheme.bvecs()[i]).collect();
    energy(&dirs)
}

struct Pairs {
    n: usize,
    e: Vec<f64>,
}

impl Pairs {
    fn new(dirs: &[[f64; 3]]) -> Self {
        let n = dirs.len();
        let mut e = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    e[i * n + j] = pair_energy(&dirs[i], &dirs[j]);
                }
            }
        }
        Pairs { n, e }
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.e[i * self.n + j]
    }

    fn set_energy(&self, set: &[usize]) -> f64 {
        let mut total = 0.0;
        for a in 0..set.len() {
            for b in a + 1..set.len() {
                total += self.get(set[a], set[b]);
            }
        }
        total
    }
}

fn angular_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let minus = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
    let plus = (a[0] + b[0]).powi(2) + (a[1] + b[1]).powi(2) + (a[2] + b[2]).powi(2);
    minus.min(plus)
}

/// Greedy farthest-point seeding over candidate positions `0..dirs.len()`.
fn greedy_seed(dirs: &[[f64; 3]], k: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    let mut min_dist: Vec<f64> = dirs.iter().map(|d| angular_distance(d, &dirs[start])).collect();
    min_dist[start] = f64::NEG_INFINITY;
    while chosen.len() < k {
        let (best, _) = min_dist
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty candidates");
        chosen.push(best);
        min_dist[best] = f64::NEG_INFINITY;
        for (i, d) in dirs.iter().enumerate() {
            if min_dist[i] > f64::NEG_INFINITY {
                min_dist[i] = min_dist[i].min(angular_distance(d, &dirs[best]));
            }
        }
    }
    chosen
}

/// Steepest-improvement pairwise exchange. Returns the final subset and the
/// energy after every accepted swap (starting with the seed's energy).
fn exchange_search(pairs: &Pairs, mut set: Vec<usize>) -> (Vec<usize>, Vec<f64>) {
    let n = pairs.n;
    let mut current = pairs.set_energy(&set);
    let mut trace = vec![current];
    loop {
        let mut in_set = vec![false; n];
        set.iter().for_each(|&i| in_set[i] = true);
        // contribution of candidate c against the current set
        let contrib: Vec<f64> = (0..n).map(|c| set.iter().map(|&s| pairs.get(c, s)).sum()).collect();
        let mut best: Option<(usize, usize, f64)> = None;
        for (pos, &out) in set.iter().enumerate() {
            for cand in (0..n).filter(|&c| !in_set[c]) {
                // swap `out` for `cand`: drop out's terms, add cand's minus its pair with out
                let delta = contrib[cand] - pairs.get(cand, out) - contrib[out];
                if delta < -1e-12 * current.abs().max(1.0) && best.is_none_or(|b| delta < b.2) {
                    best = Some((pos, cand, delta));
                }
            }
        }
        match best {
            Some((pos, cand, _)) => {
                set[pos] = cand;
                let e = pairs.set_energy(&set);
                if !(e < current) {
                    break;
                }
                current = e;
                trace.push(current);
            }
            None => break,
        }
    }
    (set, trace)
}

/// One restart of the search; exposed for inspecting the descent trace.
pub fn search_restart(scheme: &GradientScheme, k: usize, seed: u64, restart: usize) -> Result<(SubsamplingResult, Vec<f64>)> {
    let candidates = scheme.dw_indices();
    check_k(k, candidates.len())?;
    let dirs: Vec<[f64; 3]> = candidates.iter().map(|&i| scheme.bvecs()[i]).collect();
    let pairs = Pairs::new(&dirs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    let start = rng.random_range(0..dirs.len());
    let seeded = greedy_seed(&dirs, k, start);
    let (set, trace) = exchange_search(&pairs, seeded);
    let mut selected: Vec<usize> = set.iter().map(|&c| candidates[c]).collect();
    selected.sort_unstable();
    let energy = subset_energy(scheme, &selected);
    Ok((SubsamplingResult { selected_indices: selected, energy }, trace))
}

fn check_k(k: usize, available: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("must select at least one direction".into()));
    }
    if k > available {
        return Err(Error::TooFewDirections { requested: k, available });
    }
    Ok(())
}

/// Best-of-restarts subset of `k` diffusion-weighted directions. Ties go to
/// the lowest restart index.
pub fn select_uniform(scheme: &GradientScheme, k: usize, restarts: usize, seed: u64) -> Result<SubsamplingResult> {
    let candidates = scheme.dw_indices();
    check_k(k, candidates.len())?;
    if k == candidates.len() {
        let energy = subset_energy(scheme, &candidates);
        return Ok(SubsamplingResult { selected_indices: candidates, energy });
    }
    let mut best: Option<SubsamplingResult> = None;
    for r in 0..restarts.max(1) {
        let (res, _) = search_restart(scheme, k, seed, r)?;
        if best.as_ref().is_none_or(|b| res.energy < b.energy) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Keeps `n_b0` b=0 entries (the first ones in the parent order) followed by
/// the selected directions.
pub fn apply_subsampling(volume: &DwiVolume, result: &SubsamplingResult, n_b0: usize) -> Result<DwiVolume> {
    let scheme = volume.scheme();
    for &i in &result.selected_indices {
        if i >= scheme.len() {
            return Err(Error::IndexOutOfRange { index: i, len: scheme.len() });
        }
        if scheme.is_b0(i) {
            return Err(Error::InvalidArgument(format!("selected index {i} is a b=0 entry")));
        }
    }
    let b0 = scheme.b0_indices();
    if b0.len() < n_b0 {
        return Err(Error::InvalidArgument(format!(
            "asked to keep {n_b0} b=0 volumes but the scheme has {}",
            b0.len()
        )));
    }
    let mut keep: Vec<usize> = b0[..n_b0].to_vec();
    keep.extend_from_slice(&result.selected_indices);
    restrict_volume(volume, &keep)
}

/// Copies the listed channels, in order, into a new volume.
pub fn restrict_volume(volume: &DwiVolume, keep: &[usize]) -> Result<DwiVolume> {
    let new_scheme = volume.scheme().restrict(keep)?;
    let mut data = Vec::with_capacity(keep.len() * volume.dims().n_voxels());
    for &d in keep {
        data.extend_from_slice(volume.channel(d));
    }
    DwiVolume::new(volume.dims(), data, volume.mask().to_vec(), new_scheme)
}

/// `n` roughly uniform antipodally symmetric directions: random starts
/// relaxed by projected gradient descent on the electrostatic energy. Each
/// direction is returned in the upper hemisphere (z ≥ 0).
pub fn electrostatic_directions(n: usize, seed: u64, iterations: usize) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs: Vec<[f64; 3]> = (0..n)
        .map(|_| loop {
            let v: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if norm > 1e-6 {
                break v.map(|x| x / norm);
            }
        })
        .collect();
    let mut step = 0.1 / n as f64;
    let mut current = energy(&dirs);
    for _ in 0..iterations {
        let mut grad = vec![[0.0f64; 3]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                for sign in [-1.0, 1.0] {
                    let d: [f64; 3] = std::array::from_fn(|a| dirs[i][a] + sign * dirs[j][a]);
                    let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    let r3 = r * r * r;
                    for a in 0..3 {
                        grad[i][a] -= d[a] / r3;
                    }
                }
            }
        }
        let trial: Vec<[f64; 3]> = dirs
            .iter()
            .zip(&grad)
            .map(|(g, dg)| {
                // project the gradient onto the tangent plane before stepping
                let radial = g[0] * dg[0] + g[1] * dg[1] + g[2] * dg[2];
                let t: [f64; 3] = std::array::from_fn(|a| g[a] - step * (dg[a] - radial * g[a]));
                let norm = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
                t.map(|x| x / norm)
            })
            .collect();
        let e = energy(&trial);
        if e < current {
            dirs = trial;
            current = e;
            step *= 1.2;
        } else {
            step *= 0.5;
        }
    }
    dirs.into_iter()
        .map(|g| if g[2] < 0.0 { g.map(|x| -x) } else { g })
        .collect()
}
