//! Prototype estimation: spherical k-means over unit-norm action encodings
//! and per-cluster tightness.

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{PcrpError, Result};
use crate::seed;

pub const DEFAULT_ALPHA: f64 = 10.0;
/// Lower bound on tightness; it divides the prototype logits.
pub const TIGHTNESS_FLOOR: f64 = 1e-3;
pub const DEFAULT_MAX_ITER: usize = 100;

/// Row-major `N×C` matrix of encodings.
#[derive(Clone, Copy, Debug)]
pub struct Points<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> Points<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(PcrpError::Shape {
                op: "points",
                left: vec![data.len()],
                right: vec![dim],
            });
        }
        Ok(Self { data, dim })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 1e-12) {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Outcome of one k-means run.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub k: usize,
    pub dim: usize,
    /// Row-major `k×C`, unit rows.
    pub prototypes: Vec<f64>,
    pub assignment: Vec<usize>,
    pub member_counts: Vec<usize>,
    /// Sum of squared distances to assigned prototypes, after each
    /// assignment step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    /// Number of empty clusters re-seeded from the farthest point.
    pub repairs: usize,
}

impl KMeans {
    pub fn prototype(&self, c: usize) -> &[f64] {
        &self.prototypes[c * self.dim..(c + 1) * self.dim]
    }
}

/// Index of the nearest prototype, lowest index on ties.
pub fn nearest(point: &[f64], prototypes: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, z) in prototypes.chunks(dim).enumerate() {
        let d = squared_distance(point, z);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(points: Points, prototypes: &[f64]) -> Vec<(usize, f64)> {
    let dim = points.dim();
    let f = |i: usize| nearest(points.row(i), prototypes, dim);
    if rayon::current_num_threads() > 1 && points.len() * prototypes.len() >= 1 << 15 {
        (0..points.len()).into_par_iter().map(f).collect()
    } else {
        (0..points.len()).map(f).collect()
    }
}

fn kmeans_plus_plus(points: Points, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // Fewer distinct points than k: fall back to unchosen indices.
            Err(_) => {
                let rest: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                rest[rng.gen_range(0..rest.len())]
            }
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.row(i), points.row(next)));
        }
    }
    chosen.iter().flat_map(|&i| points.row(i).to_vec()).collect()
}

/// Moves the globally farthest point into each empty cluster.
fn repair_empty(points: Points, prototypes: &mut [f64], labels: &mut [(usize, f64)], k: usize) -> usize {
    let dim = points.dim();
    let mut repairs = 0;
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|(c, _)| counts[*c] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return repairs;
        };
        let far = (0..labels.len())
            .filter(|&i| counts[labels[i].0] > 1)
            .max_by(|&a, &b| labels[a].1.total_cmp(&labels[b].1).then(b.cmp(&a)));
        let Some(far) = far else { return repairs };
        prototypes[empty * dim..(empty + 1) * dim].copy_from_slice(points.row(far));
        labels[far] = (empty, 0.0);
        repairs += 1;
    }
}

/// Spherical Lloyd iterations with k-means++ seeding. Centroids are the
/// re-normalized member means; iteration stops once assignments repeat.
pub fn kmeans(points: Points, k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(PcrpError::Param(format!("k-means with k={k} on {n} points")));
    }
    let dim = points.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prototypes = kmeans_plus_plus(points, k, &mut rng);
    for z in prototypes.chunks_mut(dim) {
        normalize(z);
    }

    let mut history = Vec::new();
    let mut previous: Option<Vec<usize>> = None;
    let mut repairs = 0;
    let mut iterations = 0;
    let mut labels;
    loop {
        labels = assign(points, &prototypes);
        repairs += repair_empty(points, &mut prototypes, &mut labels, k);
        history.push(labels.iter().map(|(_, d)| d).sum());
        let current: Vec<usize> = labels.iter().map(|(c, _)| *c).collect();
        if previous.as_ref() == Some(&current) || iterations >= max_iter {
            break;
        }
        iterations += 1;
        let mut sums = vec![0.0; k * dim];
        for (i, &c) in current.iter().enumerate() {
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for (c, s) in sums.chunks_mut(dim).enumerate() {
            // Antipodal members can cancel; keep the old centroid then.
            if normalize(s) {
                prototypes[c * dim..(c + 1) * dim].copy_from_slice(s);
            }
        }
        previous = Some(current);
    }

    let assignment: Vec<usize> = labels.iter().map(|(c, _)| *c).collect();
    let mut member_counts = vec![0; k];
    assignment.iter().for_each(|&c| member_counts[c] += 1);
    Ok(KMeans {
        k,
        dim,
        prototypes,
        assignment,
        member_counts,
        objective_history: history,
        iterations,
        repairs,
    })
}

/// `Σ‖v_i − z‖ / (P·ln(P + α))`, floored at `floor`.
pub fn tightness(members: Points, prototype: &[f64], alpha: f64, floor: f64) -> Result<f64> {
    let p = members.len();
    if p == 0 {
        return Err(PcrpError::Contract("tightness of an empty cluster".into()));
    }
    if !(alpha > 0.0) {
        return Err(PcrpError::Param(format!("alpha must be positive, got {alpha}")));
    }
    let total: f64 = (0..p)
        .map(|i| squared_distance(members.row(i), prototype).sqrt())
        .sum();
    let pf = p as f64;
    Ok((total / (pf * (pf + alpha).ln())).max(floor))
}

/// Singleton clusters sit exactly on their prototype, so their raw tightness
/// is the floor. They take the loosest tightness among the other clusters
/// instead; with no multi-member cluster the floor stays.
pub fn singleton_tightness(mut phi: Vec<f64>, member_counts: &[usize]) -> Vec<f64> {
    let loosest = phi
        .iter()
        .zip(member_counts)
        .filter(|(_, &p)| p > 1)
        .map(|(&f, _)| f)
        .fold(None, |acc: Option<f64>, f| Some(acc.map_or(f, |a| a.max(f))));
    if let Some(l) = loosest {
        phi.iter_mut().zip(member_counts).filter(|(_, &p)| p == 1).for_each(|(f, _)| *f = l);
    }
    phi
}

/// Prototypes, tightness, and assignments of one clustering granularity.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    pub prototypes: Vec<f64>,
    pub tightness: Vec<f64>,
    pub member_counts: Vec<usize>,
    #[serde(skip)]
    pub assignment: Vec<usize>,
}

impl ClusterModel {
    pub fn from_kmeans(points: Points, km: &KMeans, alpha: f64, floor: f64) -> Result<Self> {
        let dim = points.dim();
        let mut members: Vec<Vec<f64>> = vec![Vec::new(); km.k];
        for (i, &c) in km.assignment.iter().enumerate() {
            members[c].extend_from_slice(points.row(i));
        }
        let tightness = members
            .iter()
            .enumerate()
            .map(|(c, m)| tightness(Points::new(m, dim)?, km.prototype(c), alpha, floor))
            .collect::<Result<Vec<f64>>>()?;
        let tightness = singleton_tightness(tightness, &km.member_counts);
        Ok(Self {
            k: km.k,
            dim,
            prototypes: km.prototypes.clone(),
            tightness,
            member_counts: km.member_counts.clone(),
            assignment: km.assignment.clone(),
        })
    }

    pub fn prototype(&self, c: usize) -> &[f64] {
        &self.prototypes[c * self.dim..(c + 1) * self.dim]
    }
}

/// One k-means run per entry of `ks`, each with its own derived seed.
pub fn multi_cluster(points: Points, ks: &[usize], seed: u64, alpha: f64, max_iter: usize) -> Result<Vec<ClusterModel>> {
    ks.iter()
        .enumerate()
        .map(|(m, &k)| {
            let km = kmeans(points, k, seed::derive(seed, seed::KMEANS, m as u64), max_iter)?;
            if km.repairs > 0 {
                log::debug!("k-means k={k}: re-seeded {} empty clusters", km.repairs);
            }
            ClusterModel::from_kmeans(points, &km, alpha, TIGHTNESS_FLOOR)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_rows(n: usize, dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            normalize(&mut v);
            out.extend(v);
        }
        out
    }

    #[test]
    fn single_cluster_is_normalized_mean() {
        let v = unit_rows(40, 5, 1);
        let p = Points::new(&v, 5).unwrap();
        let km = kmeans(p, 1, 0, 50).unwrap();
        let mut mean = vec![0.0; 5];
        for i in 0..40 {
            mean.iter_mut().zip(p.row(i)).for_each(|(m, x)| *m += x);
        }
        normalize(&mut mean);
        for (a, b) in km.prototypes.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(km.member_counts, vec![40]);
    }

    #[test]
    fn saturated_k_gives_zero_objective() {
        let v = unit_rows(6, 3, 2);
        let km = kmeans(Points::new(&v, 3).unwrap(), 6, 9, 50).unwrap();
        assert!(*km.objective_history.last().unwrap() < 1e-24);
        assert!(km.member_counts.iter().all(|&c| c == 1));
    }

    #[test]
    fn singletons_take_the_loosest_tightness() {
        assert_eq!(singleton_tightness(vec![0.2, 1e-3, 0.5], &[3, 1, 4]), vec![0.2, 0.5, 0.5]);
        assert_eq!(singleton_tightness(vec![1e-3, 1e-3], &[1, 1]), vec![1e-3, 1e-3]);
        let v = unit_rows(6, 3, 2);
        let p = Points::new(&v, 3).unwrap();
        let km = kmeans(p, 6, 9, 50).unwrap();
        let m = ClusterModel::from_kmeans(p, &km, DEFAULT_ALPHA, TIGHTNESS_FLOOR).unwrap();
        assert!(m.tightness.iter().all(|&f| f == TIGHTNESS_FLOOR));
    }

    #[test]
    fn k_larger_than_n_is_rejected() {
        let v = unit_rows(3, 3, 2);
        assert!(matches!(kmeans(Points::new(&v, 3).unwrap(), 4, 0, 10), Err(PcrpError::Param(_))));
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let mut v = Vec::new();
        for _ in 0..5 {
            v.extend([1.0, 0.0]);
        }
        v.extend([0.0, 1.0]);
        let km = kmeans(Points::new(&v, 2).unwrap(), 3, 1, 20).unwrap();
        assert_eq!(km.member_counts.iter().sum::<usize>(), 6);
        assert!(km.member_counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn tightness_hand_cases() {
        let z = [1.0, 0.0];
        let same = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(tightness(Points::new(&same, 2).unwrap(), &z, 10.0, TIGHTNESS_FLOOR).unwrap(), TIGHTNESS_FLOOR);
        // Two members at distance 1.
        let two = [1.0, 1.0, 1.0, -1.0];
        let phi = tightness(Points::new(&two, 2).unwrap(), &z, 10.0, TIGHTNESS_FLOOR).unwrap();
        assert!((phi - 1.0 / 12f64.ln()).abs() < 1e-12);
        assert!((phi - 0.402429).abs() < 1e-6);
        assert!(tightness(Points::new(&[], 2).unwrap(), &z, 10.0, TIGHTNESS_FLOOR).is_err());
    }

    #[test]
    fn more_members_at_same_distance_is_tighter() {
        let z = [0.0, 0.0];
        let mut prev = f64::INFINITY;
        for p in [1usize, 2, 4, 8, 16, 32] {
            let members: Vec<f64> = (0..p).flat_map(|_| [0.6, 0.8]).collect();
            let phi = tightness(Points::new(&members, 2).unwrap(), &z, 10.0, 0.0).unwrap();
            assert!(phi < prev, "P={p}");
            prev = phi;
        }
    }

    #[test]
    fn multi_cluster_shapes_and_determinism() {
        let v = unit_rows(150, 8, 3);
        let p = Points::new(&v, 8).unwrap();
        let models = multi_cluster(p, &[40, 70, 100], 5, DEFAULT_ALPHA, 30).unwrap();
        assert_eq!(models.iter().map(|m| m.k).collect::<Vec<_>>(), vec![40, 70, 100]);
        assert_eq!(models, multi_cluster(p, &[40, 70, 100], 5, DEFAULT_ALPHA, 30).unwrap());

        let single = multi_cluster(p, &[7], 5, DEFAULT_ALPHA, 30).unwrap();
        let km = kmeans(p, 7, seed::derive(5, seed::KMEANS, 0), 30).unwrap();
        assert_eq!(single[0], ClusterModel::from_kmeans(p, &km, DEFAULT_ALPHA, TIGHTNESS_FLOOR).unwrap());
    }

    #[test]
    fn euclidean_and_cosine_nearest_agree_on_unit_vectors() {
        let v = unit_rows(200, 6, 4);
        let z = unit_rows(9, 6, 5);
        for i in 0..200 {
            let x = &v[i * 6..(i + 1) * 6];
            let (e, _) = nearest(x, &z, 6);
            let cos = z
                .chunks(6)
                .enumerate()
                .map(|(c, zc)| (c, zc.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()))
                .fold((0, f64::NEG_INFINITY), |best, (c, d)| if d > best.1 { (c, d) } else { best });
            assert_eq!(e, cos.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn invariants_hold(n in 5usize..60, dim in 2usize..6, k in 1usize..5, seed in 0u64..10_000) {
            prop_assume!(k <= n);
            let v = unit_rows(n, dim, seed);
            let p = Points::new(&v, dim).unwrap();
            let km = kmeans(p, k, seed, 100).unwrap();
            for w in km.objective_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
            prop_assert_eq!(km.member_counts.iter().sum::<usize>(), n);
            for c in 0..k {
                let norm: f64 = km.prototype(c).iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() < 1e-9);
            }
            if km.repairs == 0 {
                for i in 0..n {
                    prop_assert_eq!(km.assignment[i], nearest(p.row(i), &km.prototypes, dim).0);
                }
            }
            let model = ClusterModel::from_kmeans(p, &km, DEFAULT_ALPHA, TIGHTNESS_FLOOR).unwrap();
            prop_assert!(model.tightness.iter().all(|&t| t >= TIGHTNESS_FLOOR));
        }
    }
}
