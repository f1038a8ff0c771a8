//! Style space: per-region appearance vectors, per-category clustering and
//! the human-labeled concept catalog.
//!
//! A style vector holds per-channel means followed by per-channel population
//! standard deviations (D = 6). Clustering is k-means with k-means++ seeding,
//! run independently for every category.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{mix, sha256_hex};
use crate::json;
use crate::scene::{InstanceRegion, Scene, SceneImage};

/// Default style dimension: 3 channel means + 3 channel standard deviations.
pub const STYLE_DIM: usize = 6;

pub const CATALOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StyleVector(pub Vec<f64>);

impl StyleVector {
    pub fn new(components: Vec<f64>) -> Self {
        Self(components)
    }

    pub fn from_mean_std(mean: [f64; 3], std: [f64; 3]) -> Self {
        Self(mean.into_iter().chain(std).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }

    pub fn mean(&self) -> [f64; 3] {
        [self.0[0], self.0[1], self.0[2]]
    }

    /// Channel standard deviations; zero when the vector carries means only.
    pub fn std(&self) -> [f64; 3] {
        if self.0.len() >= 6 {
            [self.0[3], self.0[4], self.0[5]]
        } else {
            [0.0; 3]
        }
    }

    pub fn distance_sq(&self, other: &Self) -> f64 {
        squared_distance(&self.0, &other.0)
    }

    /// `(1 - lambda) * self + lambda * other`, exact at both endpoints.
    pub fn lerp(&self, other: &Self, lambda: f64) -> Self {
        if lambda == 0.0 {
            return self.clone();
        }
        if lambda == 1.0 {
            return other.clone();
        }
        Self(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
                .collect(),
        )
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-channel mean and population standard deviation over the region's pixels.
pub fn encode_region(image: &SceneImage, region: &InstanceRegion) -> Result<StyleVector> {
    if region.pixels.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let n_pixels = image.width() as usize * image.height() as usize;
    let mut sum = [0.0f64; 3];
    for &p in &region.pixels {
        let p = p as usize;
        if p >= n_pixels {
            return Err(Error::RenderInput(format!(
                "region {} pixel {p} lies outside the image",
                region.region_id
            )));
        }
        let px = image.pixel(p);
        for c in 0..3 {
            sum[c] += px[c];
        }
    }
    let n = region.pixels.len() as f64;
    let mean = sum.map(|s| s / n);
    let mut var = [0.0f64; 3];
    for &p in &region.pixels {
        let px = image.pixel(p as usize);
        for c in 0..3 {
            let d = px[c] - mean[c];
            var[c] += d * d;
        }
    }
    let std = var.map(|v| (v / n).sqrt());
    Ok(StyleVector::from_mean_std(mean, std))
}

/// Styles of one scene keyed by region id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StyleAssignment(pub BTreeMap<u32, StyleVector>);

impl StyleAssignment {
    pub fn get(&self, region_id: u32) -> Option<&StyleVector> {
        self.0.get(&region_id)
    }

    pub fn region_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.0.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Encodes every region of `scene` from its own image.
pub fn encode_scene(scene: &Scene) -> Result<StyleAssignment> {
    scene
        .regions
        .iter()
        .map(|r| Ok((r.region_id, encode_region(&scene.image, r)?)))
        .collect::<Result<_>>()
        .map(StyleAssignment)
}

/// Replaces the style of every region in `targets`.
pub fn apply_style(
    base: &StyleAssignment,
    targets: &BTreeSet<u32>,
    new_style: &StyleVector,
) -> Result<StyleAssignment> {
    if let Some(&missing) = targets.iter().find(|id| !base.0.contains_key(id)) {
        return Err(Error::UnknownRegion(missing));
    }
    let mut out = base.clone();
    for id in targets {
        out.0.insert(*id, new_style.clone());
    }
    Ok(out)
}

/// Componentwise `(1 - lambda) * a + lambda * b` for every region.
pub fn interpolate_assignment(
    a: &StyleAssignment,
    b: &StyleAssignment,
    lambda: f64,
) -> Result<StyleAssignment> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::LambdaOutOfRange(lambda));
    }
    if a.0.len() != b.0.len() || a.0.keys().zip(b.0.keys()).any(|(x, y)| x != y) {
        return Err(Error::RegionSetMismatch);
    }
    a.0.iter()
        .zip(b.0.values())
        .map(|((id, va), vb)| {
            if va.dim() != vb.dim() {
                return Err(Error::StyleDimension {
                    expected: va.dim(),
                    found: vb.dim(),
                });
            }
            Ok((*id, va.lerp(vb, lambda)))
        })
        .collect::<Result<_>>()
        .map(StyleAssignment)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleEntry {
    pub scene_id: String,
    pub region_id: u32,
    pub category_id: u8,
    pub style: StyleVector,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StyleSpace {
    pub entries: Vec<StyleEntry>,
}

impl StyleSpace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn categories(&self) -> BTreeSet<u8> {
        self.entries.iter().map(|e| e.category_id).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        json::write_atomic(path, json::to_exact_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        json::read_json(path)
    }
}

/// One entry per region of every scene, in scene then region order.
pub fn build_style_space(scenes: &[Scene]) -> Result<StyleSpace> {
    let per_scene: Vec<Vec<StyleEntry>> = scenes
        .par_iter()
        .map(|scene| {
            scene
                .regions
                .iter()
                .map(|r| {
                    Ok(StyleEntry {
                        scene_id: scene.scene_id.clone(),
                        region_id: r.region_id,
                        category_id: r.category_id,
                        style: encode_region(&scene.image, r)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(StyleSpace {
        entries: per_scene.into_iter().flatten().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    /// Independent k-means++ restarts; the lowest-SSE run wins.
    pub restarts: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            restarts: 10,
            tolerance: 1e-9,
            max_iterations: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub sse: f64,
    pub iterations: usize,
}

impl Clustering {
    pub fn member_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.centers.len()];
        for &a in &self.assignment {
            counts[a] += 1;
        }
        counts
    }
}

/// Index of the nearest center; ties go to the lowest index.
pub fn nearest_center(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Within-cluster sum of squared distances when each point joins its nearest center.
pub fn sse(points: &[Vec<f64>], centers: &[Vec<f64>]) -> f64 {
    points.iter().map(|p| nearest_center(p, centers).1).sum()
}

/// k-means++ seeding: first center uniform, then D²-weighted sampling.
pub fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    assert!(!points.is_empty() && k >= 1 && k <= points.len());
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &points[chosen[0]]))
        .collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, d) in dist.iter().enumerate() {
                if *d <= 0.0 {
                    continue;
                }
                acc += d;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            (0..points.len())
                .find(|i| !chosen.contains(i))
                .expect("k <= number of points")
        };
        chosen.push(next);
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Lloyd iterations until the largest center move is below `tolerance`.
///
/// A center that loses all members stays where it was.
pub fn lloyd(
    points: &[Vec<f64>],
    initial: Vec<Vec<f64>>,
    tolerance: f64,
    max_iterations: usize,
) -> Clustering {
    let dim = points[0].len();
    let mut centers = initial;
    let mut iterations = 0;
    while iterations < max_iterations {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for p in points {
            let (c, _) = nearest_center(p, &centers);
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut movement = 0.0f64;
        for (i, center) in centers.iter_mut().enumerate() {
            if counts[i] == 0 {
                continue;
            }
            let updated: Vec<f64> = sums[i].iter().map(|s| s / counts[i] as f64).collect();
            movement = movement.max(squared_distance(center, &updated).sqrt());
            *center = updated;
        }
        if movement < tolerance {
            break;
        }
    }
    let assignment: Vec<usize> = points.iter().map(|p| nearest_center(p, &centers).0).collect();
    let sse = sse(points, &centers);
    Clustering {
        centers,
        assignment,
        sse,
        iterations,
    }
}

/// Single-point transfers on top of a Lloyd result.
///
/// A point moves from cluster `a` to `b` when
/// `n_b/(n_b+1)·|x−c_b|² < n_a/(n_a−1)·|x−c_a|²`, which strictly lowers the
/// SSE. Lloyd then re-settles the centers. Fixed points of Lloyd that are not
/// optimal under such moves get escaped; the SSE never increases.
pub fn refine_transfers(points: &[Vec<f64>], run: Clustering, tolerance: f64, max_passes: usize) -> Clustering {
    let k = run.centers.len();
    let dim = points[0].len();
    let mut assignment = run.assignment.clone();
    let mut counts = vec![0usize; k];
    let mut centers = vec![vec![0.0; dim]; k];
    for (p, &a) in points.iter().zip(&assignment) {
        counts[a] += 1;
        for (c, v) in centers[a].iter_mut().zip(p) {
            *c += v;
        }
    }
    for (c, &n) in centers.iter_mut().zip(&counts) {
        if n > 0 {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let mut moved_any = false;
    for _ in 0..max_passes {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let a = assignment[i];
            if counts[a] <= 1 {
                continue;
            }
            let na = counts[a] as f64;
            let remove = na / (na - 1.0) * squared_distance(p, &centers[a]);
            let best = (0..k)
                .filter(|&b| b != a)
                .map(|b| {
                    let nb = counts[b] as f64;
                    (b, nb / (nb + 1.0) * squared_distance(p, &centers[b]))
                })
                .min_by(|x, y| x.1.total_cmp(&y.1));
            let Some((b, add)) = best else { continue };
            if add >= remove * (1.0 - 1e-12) {
                continue;
            }
            let nb = counts[b] as f64;
            for d in 0..dim {
                centers[a][d] = (na * centers[a][d] - p[d]) / (na - 1.0);
                centers[b][d] = (nb * centers[b][d] + p[d]) / (nb + 1.0);
            }
            counts[a] -= 1;
            counts[b] += 1;
            assignment[i] = b;
            moved = true;
        }
        if !moved {
            break;
        }
        moved_any = true;
    }
    if !moved_any {
        return run;
    }
    let refined = lloyd(points, centers, tolerance, max_passes);
    if refined.sse <= run.sse {
        refined
    } else {
        run
    }
}

pub(crate) fn restart_seed(seed: u64, category_id: u8, restart: usize) -> u64 {
    mix(&[seed, u64::from(category_id), restart as u64])
}

/// Number of bitwise-distinct points.
fn distinct_count(points: &[Vec<f64>]) -> usize {
    points
        .iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<BTreeSet<_>>()
        .len()
}

/// Clusters one category's points with `min(k, distinct points)` centers.
pub fn kmeans(points: &[Vec<f64>], category_id: u8, params: &KMeansParams) -> Clustering {
    let k = params.k.min(distinct_count(points)).max(1);
    let mut best: Option<Clustering> = None;
    for restart in 0..params.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(params.seed, category_id, restart));
        let init = kmeans_plus_plus(points, k, &mut rng);
        let run = lloyd(points, init, params.tolerance, params.max_iterations);
        let run = refine_transfers(points, run, params.tolerance, params.max_iterations);
        if best.as_ref().is_none_or(|b| run.sse < b.sse) {
            best = Some(run);
        }
    }
    best.expect("at least one restart")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub center: StyleVector,
    pub member_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryClusters {
    pub id: u8,
    pub clusters: Vec<Cluster>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleCatalog {
    pub version: u32,
    #[serde(rename = "D")]
    pub dim: usize,
    pub k: usize,
    pub seed: u64,
    pub categories: Vec<CategoryClusters>,
}

/// Per-category k-means over the style space.
///
/// Clusters are ordered by descending member count, then lexicographically by center.
pub fn cluster_styles(space: &StyleSpace, params: &KMeansParams) -> Result<StyleCatalog> {
    if space.is_empty() {
        return Err(Error::EmptyStyleSpace);
    }
    if params.k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let dim = space.entries[0].style.dim();
    let mut by_category: BTreeMap<u8, Vec<Vec<f64>>> = BTreeMap::new();
    for e in &space.entries {
        if e.style.dim() != dim {
            return Err(Error::StyleDimension {
                expected: dim,
                found: e.style.dim(),
            });
        }
        by_category
            .entry(e.category_id)
            .or_default()
            .push(e.style.0.clone());
    }
    let groups: Vec<(u8, Vec<Vec<f64>>)> = by_category.into_iter().collect();
    let categories = groups
        .par_iter()
        .map(|(id, points)| {
            let run = kmeans(points, *id, params);
            let counts = run.member_counts();
            let mut clusters: Vec<Cluster> = run
                .centers
                .into_iter()
                .zip(counts)
                .map(|(center, member_count)| Cluster {
                    center: StyleVector(center),
                    member_count,
                    concept: None,
                })
                .collect();
            clusters.sort_by(|a, b| {
                b.member_count.cmp(&a.member_count).then_with(|| {
                    a.center
                        .0
                        .iter()
                        .zip(&b.center.0)
                        .map(|(x, y)| x.total_cmp(y))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
            });
            CategoryClusters { id: *id, clusters }
        })
        .collect();
    Ok(StyleCatalog {
        version: CATALOG_VERSION,
        dim,
        k: params.k,
        seed: params.seed,
        categories,
    })
}

impl StyleCatalog {
    pub fn category(&self, id: u8) -> Option<&CategoryClusters> {
        self.categories.iter().find(|c| c.id == id)
    }

    /// Center labeled `concept` for the category, if any.
    pub fn lookup(&self, category_id: u8, concept: &str) -> Option<&StyleVector> {
        self.category(category_id)?
            .clusters
            .iter()
            .find(|c| c.concept.as_deref() == Some(concept))
            .map(|c| &c.center)
    }

    /// Returns a copy with `concept` attached to one cluster. Relabeling a
    /// cluster replaces its previous label.
    pub fn label_concept(&self, category_id: u8, cluster_index: usize, concept: &str) -> Result<Self> {
        let concept = concept.trim();
        if concept.is_empty() {
            return Err(Error::Config("concept label must not be empty".into()));
        }
        let mut out = self.clone();
        let cat = out
            .categories
            .iter_mut()
            .find(|c| c.id == category_id)
            .ok_or(Error::ClusterIndex {
                category: category_id,
                index: cluster_index,
                available: 0,
            })?;
        let available = cat.clusters.len();
        if cluster_index >= available {
            return Err(Error::ClusterIndex {
                category: category_id,
                index: cluster_index,
                available,
            });
        }
        let taken = cat
            .clusters
            .iter()
            .enumerate()
            .any(|(i, c)| i != cluster_index && c.concept.as_deref() == Some(concept));
        if taken {
            return Err(Error::DuplicateConcept {
                category: category_id,
                concept: concept.to_string(),
            });
        }
        cat.clusters[cluster_index].concept = Some(concept.to_string());
        Ok(out)
    }

    /// Index of the cluster of `category_id` whose center is closest to `style`.
    pub fn nearest_cluster(&self, category_id: u8, style: &StyleVector) -> Option<usize> {
        let cat = self.category(category_id)?;
        let centers: Vec<Vec<f64>> = cat.clusters.iter().map(|c| c.center.0.clone()).collect();
        if centers.is_empty() || centers[0].len() != style.dim() {
            return None;
        }
        Some(nearest_center(&style.0, &centers).0)
    }

    pub fn to_json(&self) -> Result<String> {
        json::to_exact_string(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        json::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        json::read_json(path)
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SemanticMask;

    fn region(pixels: Vec<u32>) -> InstanceRegion {
        InstanceRegion {
            region_id: 0,
            category_id: 0,
            pixels,
            residual: false,
        }
    }

    fn sv(values: &[f64]) -> StyleVector {
        StyleVector(values.to_vec())
    }

    fn space(points: &[Vec<f64>]) -> StyleSpace {
        StyleSpace {
            entries: points
                .iter()
                .enumerate()
                .map(|(i, p)| StyleEntry {
                    scene_id: format!("s{i}"),
                    region_id: 0,
                    category_id: 10,
                    style: StyleVector(p.clone()),
                })
                .collect(),
        }
    }

    #[test]
    fn uniform_region_has_zero_std() {
        let img = SceneImage::filled(3, 2, [0.2, 0.4, 0.6]).unwrap();
        let v = encode_region(&img, &region((0..6).collect())).unwrap();
        assert_eq!(v.dim(), 6);
        for (got, want) in v.0.iter().zip([0.2, 0.4, 0.6, 0.0, 0.0, 0.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn two_extreme_pixels() {
        let img = SceneImage::new(2, 1, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let v = encode_region(&img, &region(vec![0, 1])).unwrap();
        assert_eq!(v.0, vec![0.5; 6]);
    }

    #[test]
    fn whole_image_region_matches_global_statistics() {
        let samples: Vec<f64> = (0..12).map(|i| f64::from(i) / 11.0).collect();
        let img = SceneImage::new(2, 2, samples.clone()).unwrap();
        let v = encode_region(&img, &region(vec![0, 1, 2, 3])).unwrap();
        for c in 0..3 {
            let ch: Vec<f64> = samples.iter().skip(c).step_by(3).copied().collect();
            let m = ch.iter().sum::<f64>() / 4.0;
            let s = (ch.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0).sqrt();
            assert!((v.0[c] - m).abs() < 1e-15);
            assert!((v.0[c + 3] - s).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_region_is_an_error() {
        let img = SceneImage::filled(1, 1, [0.0; 3]).unwrap();
        assert!(matches!(encode_region(&img, &region(vec![])), Err(Error::EmptyRegion)));
    }

    #[test]
    fn style_space_counts_regions() {
        let reg = crate::registry::CategoryRegistry::default();
        let mk = |labels: Vec<u8>| {
            let n = labels.len() as u32;
            Scene::from_parts(
                "x",
                SceneImage::filled(n, 1, [0.5; 3]).unwrap(),
                SemanticMask::new(n, 1, labels).unwrap(),
                &reg,
                1,
            )
            .unwrap()
        };
        let a = mk(vec![0, 1, 2]);
        assert_eq!(build_style_space(std::slice::from_ref(&a)).unwrap().len(), 3);
        let empty = mk(vec![255, 255]);
        assert_eq!(build_style_space(&[empty]).unwrap().len(), 0);
        let b = mk(vec![0, 1, 0, 1, 0]);
        let c = mk(vec![3, 3]);
        assert_eq!(build_style_space(&[b, c]).unwrap().len(), 6);
        let d = mk(vec![0, 1]);
        assert_eq!(build_style_space(&[a.clone(), d]).unwrap().len(), 5);
    }

    #[test]
    fn single_entry_single_cluster() {
        let cat = cluster_styles(&space(&[vec![0.3; 6]]), &KMeansParams::new(1, 7)).unwrap();
        let c = &cat.categories[0];
        assert_eq!(c.clusters.len(), 1);
        assert_eq!(c.clusters[0].center.0, vec![0.3; 6]);
        assert_eq!(c.clusters[0].member_count, 1);
    }

    #[test]
    fn k_is_capped_by_entry_count() {
        let pts: Vec<Vec<f64>> = (0..3).map(|i| vec![f64::from(i) * 0.3, 0.0]).collect();
        let cat = cluster_styles(&space(&pts), &KMeansParams::new(10, 1)).unwrap();
        assert_eq!(cat.categories[0].clusters.len(), 3);
        assert_eq!(cat.k, 10);
    }

    #[test]
    fn duplicate_points_do_not_produce_empty_clusters() {
        let pts = vec![vec![0.1, 0.0], vec![0.1, 0.0], vec![0.9, 0.0]];
        let cat = cluster_styles(&space(&pts), &KMeansParams::new(3, 1)).unwrap();
        let counts: Vec<usize> = cat.categories[0].clusters.iter().map(|c| c.member_count).collect();
        assert_eq!(counts, vec![2, 1]);
    }

    #[test]
    fn two_groups_on_a_line() {
        let pts: Vec<Vec<f64>> = [0.0, 0.1, 0.9, 1.0]
            .iter()
            .map(|&x| {
                let mut v = vec![0.0; 6];
                v[0] = x;
                v
            })
            .collect();
        let cat = cluster_styles(&space(&pts), &KMeansParams::new(2, 3)).unwrap();
        let mut xs: Vec<f64> = cat.categories[0].clusters.iter().map(|c| c.center.0[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] - 0.05).abs() < 1e-12);
        assert!((xs[1] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn empty_space_is_an_error() {
        let err = cluster_styles(&StyleSpace::default(), &KMeansParams::new(2, 0)).unwrap_err();
        assert!(matches!(err, Error::EmptyStyleSpace));
    }

    #[test]
    fn clusters_sorted_by_size_then_center() {
        let pts = vec![
            vec![0.9, 0.0],
            vec![0.1, 0.0],
            vec![0.11, 0.0],
            vec![0.5, 0.0],
        ];
        let cat = cluster_styles(&space(&pts), &KMeansParams::new(3, 5)).unwrap();
        let cl = &cat.categories[0].clusters;
        assert_eq!(cl[0].member_count, 2);
        assert_eq!(cl[1].center.0[0], 0.5);
        assert_eq!(cl[2].center.0[0], 0.9);
    }

    fn labeled_catalog() -> StyleCatalog {
        let pts = vec![vec![0.1, 0.0], vec![0.5, 0.0], vec![0.9, 0.0]];
        cluster_styles(&space(&pts), &KMeansParams::new(3, 0)).unwrap()
    }

    #[test]
    fn label_lookup_relabel_and_duplicates() {
        let cat = labeled_catalog();
        let night = cat.label_concept(10, 0, "night").unwrap();
        assert_eq!(night.lookup(10, "night"), Some(&cat.categories[0].clusters[0].center));
        assert!(cat.lookup(10, "night").is_none(), "input catalog unchanged");

        let renamed = night.label_concept(10, 0, "dusk").unwrap();
        assert!(renamed.lookup(10, "night").is_none());
        assert!(renamed.lookup(10, "dusk").is_some());

        assert!(matches!(
            night.label_concept(10, 1, "night"),
            Err(Error::DuplicateConcept { .. })
        ));
        assert!(night.label_concept(10, 0, "night").is_ok());
        assert!(matches!(
            night.label_concept(10, 3, "snow"),
            Err(Error::ClusterIndex { available: 3, .. })
        ));
        assert!(night.label_concept(4, 0, "snow").is_err());
    }

    #[test]
    fn catalog_json_reload_is_bit_exact() {
        let pts = vec![vec![0.1 / 3.0, 0.7], vec![2.0f64.sqrt() / 2.0, 0.123456789012345]];
        let cat = cluster_styles(&space(&pts), &KMeansParams::new(2, 9))
            .unwrap()
            .label_concept(10, 1, "snow")
            .unwrap();
        let text = cat.to_json().unwrap();
        assert!(text.contains("\"D\": 2"));
        let back = StyleCatalog::from_json(&text).unwrap();
        assert_eq!(back, cat);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn apply_style_edits_only_targets() {
        let base = StyleAssignment(
            [(0, sv(&[0.1; 6])), (1, sv(&[0.2; 6])), (2, sv(&[0.3; 6]))]
                .into_iter()
                .collect(),
        );
        assert_eq!(apply_style(&base, &BTreeSet::new(), &sv(&[0.9; 6])).unwrap(), base);
        let out = apply_style(&base, &[1].into_iter().collect(), &sv(&[0.9; 6])).unwrap();
        assert_eq!(out.get(1), Some(&sv(&[0.9; 6])));
        assert_eq!(out.get(0), base.get(0));
        assert_eq!(out.get(2), base.get(2));
        let all = apply_style(&base, &[0, 1, 2].into_iter().collect(), &sv(&[0.9; 6])).unwrap();
        assert!(all.0.values().all(|v| v == &sv(&[0.9; 6])));
        assert!(matches!(
            apply_style(&base, &[7].into_iter().collect(), &sv(&[0.9; 6])),
            Err(Error::UnknownRegion(7))
        ));
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = StyleAssignment([(0, sv(&[0.2, 0.4, 0.6, 0.0, 0.0, 0.0]))].into_iter().collect());
        let b = StyleAssignment([(0, sv(&[0.6, 0.0, 0.2, 0.0, 0.0, 0.0]))].into_iter().collect());
        assert_eq!(interpolate_assignment(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate_assignment(&a, &b, 1.0).unwrap(), b);
        let mid = interpolate_assignment(&a, &b, 0.5).unwrap();
        for (got, want) in mid.get(0).unwrap().0.iter().zip([0.4, 0.2, 0.4, 0.0, 0.0, 0.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(matches!(
            interpolate_assignment(&a, &b, 1.5),
            Err(Error::LambdaOutOfRange(_))
        ));
        let c = StyleAssignment([(1, sv(&[0.0; 6]))].into_iter().collect());
        assert!(matches!(
            interpolate_assignment(&a, &c, 0.5),
            Err(Error::RegionSetMismatch)
        ));
    }

    #[test]
    fn transfers_escape_a_lloyd_fixed_point() {
        // {0,4} | {5,6,10} is Lloyd-stable with SSE 22; moving 4 across gives 20.75.
        let points: Vec<Vec<f64>> = [0.0, 4.0, 5.0, 6.0, 10.0].iter().map(|&v| vec![v]).collect();
        let stuck = lloyd(&points, vec![vec![2.0], vec![7.0]], 1e-9, 300);
        assert_eq!(stuck.sse, 22.0);
        let refined = refine_transfers(&points, stuck, 1e-9, 300);
        assert!((refined.sse - 20.75).abs() < 1e-12, "{}", refined.sse);
        assert_eq!(refined.member_counts().iter().sum::<usize>(), 5);
    }
}
