//! Partitioning of a cloud into slabs and of each slab into fixed-size
//! nearest-neighbour patches.

use std::cmp::Ordering;

use kdtree::distance::squared_euclidean;
use kdtree::KdTree;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pc_io::PointCloud;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("invalid preprocessing config: {0}")]
    InvalidConfig(String),
    #[error("cannot sample {requested} points from {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("start index {start} out of bounds for {len} points")]
    StartOutOfBounds { start: usize, len: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CacheError {
    #[error("not a patch cache file")]
    BadMagic,
    #[error("unsupported patch cache version {0}")]
    Version(u32),
    #[error("patch cache is truncated")]
    Truncated,
    #[error("patch cache is inconsistent: {0}")]
    Corrupt(String),
}

/// How many slabs to cut a cloud into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PartitionCount {
    /// Derived from the cloud size, see [`compute_partition_count`].
    #[default]
    Auto,
    Fixed(usize),
}

impl std::str::FromStr for PartitionCount {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Self::Auto);
        }
        match s.parse::<usize>() {
            Ok(k) if k > 0 => Ok(Self::Fixed(k)),
            _ => Err(format!("expected `auto` or a positive integer, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub patch_size: usize,
    pub partitions: PartitionCount,
    pub min_partitions: usize,
    pub max_partitions: usize,
    pub points_per_partition_target: usize,
    /// Slicing axis (0 = x, 1 = y, 2 = z). `None` picks the axis with the
    /// largest bounding-box extent.
    pub slice_axis: Option<usize>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            patch_size: 512,
            partitions: PartitionCount::Auto,
            min_partitions: 8,
            max_partitions: 24,
            points_per_partition_target: 100_000,
            slice_axis: None,
        }
    }
}

impl PreprocessConfig {
    /// Desk-scale settings for small clouds and quick training runs.
    pub fn small() -> Self {
        Self {
            patch_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        let bad = |m: String| Err(PreprocessError::InvalidConfig(m));
        if self.patch_size < 8 {
            return bad(format!("patch_size {} is below 8", self.patch_size));
        }
        if self.min_partitions == 0 || self.min_partitions > self.max_partitions {
            return bad(format!(
                "partition range {}..={} is empty or starts at 0",
                self.min_partitions, self.max_partitions
            ));
        }
        if self.points_per_partition_target == 0 {
            return bad("points_per_partition_target must be positive".into());
        }
        if self.partitions == PartitionCount::Fixed(0) {
            return bad("fixed partition count must be positive".into());
        }
        if matches!(self.slice_axis, Some(a) if a > 2) {
            return bad(format!("slice_axis {:?} is not 0, 1 or 2", self.slice_axis));
        }
        Ok(())
    }

    /// Stable 64-bit digest of the settings, recorded in patch caches.
    pub fn digest(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let hash = Sha256::digest(&json);
        u64::from_le_bytes(hash[..8].try_into().expect("8 bytes"))
    }
}

/// `clamp(round(n / target), min, max)`.
pub fn compute_partition_count(n_points: usize, cfg: &PreprocessConfig) -> usize {
    let k = (n_points as f64 / cfg.points_per_partition_target as f64).round() as usize;
    k.clamp(cfg.min_partitions, cfg.max_partitions)
}

/// A slab of the parent cloud along the slicing axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Strictly increasing indices into the parent cloud.
    pub point_indices: Vec<usize>,
    /// Bounds along the slicing axis, inclusive.
    pub slab_range: (f64, f64),
    pub axis: usize,
}

fn longest_axis(pc: &PointCloud) -> usize {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in pc.positions() {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let mut best = 0;
    for a in 1..3 {
        if hi[a] - lo[a] > hi[best] - lo[best] {
            best = a;
        }
    }
    best
}

/// Cuts the cloud into `k` equal-width slabs along its longest axis.
pub fn slice_partitions(pc: &PointCloud, k: usize) -> Vec<Partition> {
    slice_partitions_along(pc, k, longest_axis(pc))
}

/// Cuts the cloud into `k` equal-width slabs along `axis`. Points on the
/// upper boundary go to the last slab and empty slabs are dropped.
pub fn slice_partitions_along(pc: &PointCloud, k: usize, axis: usize) -> Vec<Partition> {
    assert!(k >= 1, "partition count must be positive");
    let coord = |i: usize| pc.positions()[i][axis];
    let (lo, hi) = (0..pc.len()).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), i| {
        (l.min(coord(i)), h.max(coord(i)))
    });
    let extent = hi - lo;

    let mut slabs: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..pc.len() {
        let slot = if extent > 0.0 {
            (((coord(i) - lo) / extent * k as f64).floor() as usize).min(k - 1)
        } else {
            0
        };
        slabs[slot].push(i);
    }

    let width = extent / k as f64;
    slabs
        .into_iter()
        .enumerate()
        .filter(|(_, idx)| !idx.is_empty())
        .map(|(s, point_indices)| {
            // widen the nominal bounds by whatever rounding put at the edges
            let (mut low, mut high) = (lo + s as f64 * width, lo + (s + 1) as f64 * width);
            for &i in &point_indices {
                low = low.min(coord(i));
                high = high.max(coord(i));
            }
            Partition {
                point_indices,
                slab_range: (low, high),
                axis,
            }
        })
        .collect()
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Greedy max-min selection. Returns the chosen indices and, for every
/// point, its squared distance to the nearest chosen one.
fn fps_with_distances(points: &[[f64; 3]], m: usize, start: usize) -> (Vec<usize>, Vec<f64>) {
    let mut chosen = Vec::with_capacity(m);
    let mut nearest = vec![f64::INFINITY; points.len()];
    let mut taken = vec![false; points.len()];
    let mut next = start;
    for _ in 0..m {
        chosen.push(next);
        taken[next] = true;
        let c = points[next];
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if !taken[i] && nearest[i] > best.0 {
                best = (nearest[i], i);
            }
        }
        next = best.1;
    }
    (chosen, nearest)
}

/// Farthest point sampling: starts at `start` and repeatedly takes the
/// point whose distance to the selected set is largest, lowest index on
/// ties.
pub fn farthest_point_sample(
    points: &[[f64; 3]],
    m: usize,
    start: usize,
) -> Result<Vec<usize>, PreprocessError> {
    if m > points.len() {
        return Err(PreprocessError::SampleTooLarge {
            requested: m,
            available: points.len(),
        });
    }
    if m > 0 && start >= points.len() {
        return Err(PreprocessError::StartOutOfBounds {
            start,
            len: points.len(),
        });
    }
    Ok(fps_with_distances(points, m, start).0)
}

/// Network input unit: `patch_size` rows of normalized geometry and colour.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub geometry: Tensor,
    pub color: Tensor,
    /// Index of the seed point in the parent cloud.
    pub centroid_index: usize,
    /// Parent-cloud index of each row, `patch_size` long.
    pub point_indices: Vec<usize>,
}

impl Patch {
    pub fn len(&self) -> usize {
        self.geometry.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Centers geometry at its mean and scales it into the unit ball. Colours
/// pass through unchanged.
pub fn normalize_patch(geometry_raw: &[[f64; 3]], colors: &[[f64; 3]]) -> Patch {
    assert_eq!(geometry_raw.len(), colors.len());
    let n = geometry_raw.len() as f64;
    let mut mean = [0.0; 3];
    for p in geometry_raw {
        for a in 0..3 {
            mean[a] += p[a];
        }
    }
    mean = mean.map(|m| m / n);
    let centered: Vec<[f64; 3]> = geometry_raw
        .iter()
        .map(|p| [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]])
        .collect();
    let radius = centered
        .iter()
        .map(|p| dist2(p, &[0.0; 3]).sqrt())
        .fold(0.0, f64::max);
    let scale = if radius > 0.0 { 1.0 / radius } else { 1.0 };

    let geometry = centered.iter().flat_map(|p| p.map(|c| c * scale)).collect();
    let color = colors.iter().flat_map(|c| *c).collect();
    Patch {
        geometry: Tensor::from_vec(geometry_raw.len(), 3, geometry),
        color: Tensor::from_vec(colors.len(), 3, color),
        centroid_index: 0,
        point_indices: Vec::new(),
    }
}

fn neighbour_order(seed: Option<usize>) -> impl Fn(&(f64, usize), &(f64, usize)) -> Ordering {
    move |a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then((Some(a.1) != seed).cmp(&(Some(b.1) != seed)))
            .then(a.1.cmp(&b.1))
    }
}

/// Local indices of the `k` points nearest `center`, ordered by distance
/// then index, except that `seed` wins ties so a seed is always in its own
/// neighbourhood. When fewer than `k` points exist the ordered list repeats.
fn nearest(points: &[[f64; 3]], center: &[f64; 3], k: usize, seed: Option<usize>) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(p, center), i))
        .collect();
    let by_dist = neighbour_order(seed);
    if order.len() > k {
        order.select_nth_unstable_by(k - 1, &by_dist);
        order.truncate(k);
    }
    order.sort_unstable_by(&by_dist);
    order.iter().map(|&(_, i)| i).cycle().take(k).collect()
}

/// Below this many points a linear scan beats building a tree.
const TREE_MIN_POINTS: usize = 4096;

/// [`nearest`] backed by a k-d tree for large partitions. The tree only
/// proposes candidates; they are re-ranked with the same distance and
/// tie-break as the linear scan, so both paths return identical lists.
struct NeighbourIndex<'a> {
    points: &'a [[f64; 3]],
    tree: Option<KdTree<f64, usize, [f64; 3]>>,
}

impl<'a> NeighbourIndex<'a> {
    fn new(points: &'a [[f64; 3]], k: usize) -> Self {
        let tree = (points.len() >= TREE_MIN_POINTS && points.len() > k).then(|| {
            let mut tree = KdTree::with_capacity(3, 64);
            for (i, p) in points.iter().enumerate() {
                tree.add(*p, i).expect("finite coordinates");
            }
            tree
        });
        Self { points, tree }
    }

    fn nearest(&self, center: &[f64; 3], k: usize, seed: Option<usize>) -> Vec<usize> {
        let Some(tree) = &self.tree else {
            return nearest(self.points, center, k, seed);
        };
        let kth = tree
            .nearest(center, k, &squared_euclidean)
            .expect("finite query")
            .last()
            .map_or(0.0, |&(d, _)| d);
        // widen by a few ulps so rounding differences cannot drop a point
        let radius = kth * (1.0 + 1e-12) + f64::MIN_POSITIVE;
        let mut order: Vec<(f64, usize)> = tree
            .within(center, radius, &squared_euclidean)
            .expect("finite query")
            .into_iter()
            .map(|(_, &i)| (dist2(&self.points[i], center), i))
            .collect();
        order.sort_unstable_by(neighbour_order(seed));
        order.truncate(k);
        order.into_iter().map(|(_, i)| i).collect()
    }
}

/// Covers a partition with `patch_size`-point neighbourhoods.
///
/// Seeds are `ceil(n / patch_size)` farthest-point samples starting from the
/// point nearest the partition mean. Points left uncovered by the initial
/// neighbourhoods get extra seeds, farthest uncovered point first, until
/// every point belongs to some patch.
pub fn build_patches(pc: &PointCloud, partition: &Partition, cfg: &PreprocessConfig) -> Vec<Patch> {
    let global = &partition.point_indices;
    assert!(!global.is_empty(), "partition has no points");
    let points: Vec<[f64; 3]> = global.iter().map(|&i| pc.positions()[i]).collect();
    let n = points.len();
    let k = cfg.patch_size;

    let mut mean = [0.0; 3];
    for p in &points {
        for a in 0..3 {
            mean[a] += p[a] / n as f64;
        }
    }
    let start = nearest(&points, &mean, 1, None)[0];
    let seeds_wanted = n.div_ceil(k);
    let (mut seeds, mut seed_dist) = fps_with_distances(&points, seeds_wanted, start);

    let index = NeighbourIndex::new(&points, k);
    let mut covered = vec![false; n];
    let mut neighbourhoods = Vec::with_capacity(seeds.len());
    for &s in &seeds {
        let nb = index.nearest(&points[s], k, Some(s));
        for &i in &nb {
            covered[i] = true;
        }
        neighbourhoods.push(nb);
    }

    // only uncovered points can become seeds, so only their distances matter
    let mut uncovered: Vec<usize> = (0..n).filter(|&i| !covered[i]).collect();
    while !uncovered.is_empty() {
        let mut pick = uncovered[0];
        for &i in &uncovered[1..] {
            if seed_dist[i] > seed_dist[pick] {
                pick = i;
            }
        }
        seeds.push(pick);
        let nb = index.nearest(&points[pick], k, Some(pick));
        for &i in &nb {
            covered[i] = true;
        }
        neighbourhoods.push(nb);
        uncovered.retain(|&i| !covered[i]);
        for &i in &uncovered {
            seed_dist[i] = seed_dist[i].min(dist2(&points[i], &points[pick]));
        }
    }

    seeds
        .iter()
        .zip(neighbourhoods)
        .map(|(&s, nb)| {
            let geometry: Vec<[f64; 3]> = nb.iter().map(|&i| points[i]).collect();
            let colors: Vec<[f64; 3]> = nb.iter().map(|&i| pc.colors()[global[i]]).collect();
            let mut patch = normalize_patch(&geometry, &colors);
            patch.centroid_index = global[s];
            patch.point_indices = nb.iter().map(|&i| global[i]).collect();
            patch
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPatches {
    pub partition: Partition,
    pub patches: Vec<Patch>,
}

/// Partitions and patches of one cloud, ordered along the slicing axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedCloud {
    pub partitions: Vec<PartitionPatches>,
}

impl PreprocessedCloud {
    pub fn patch_count(&self) -> usize {
        self.partitions.iter().map(|p| p.patches.len()).sum()
    }
}

/// Full preprocessing of one cloud. Partitions are processed in parallel.
pub fn preprocess(pc: &PointCloud, cfg: &PreprocessConfig) -> Result<PreprocessedCloud, PreprocessError> {
    cfg.validate()?;
    let k = match cfg.partitions {
        PartitionCount::Auto => compute_partition_count(pc.len(), cfg),
        PartitionCount::Fixed(k) => k,
    };
    let axis = cfg.slice_axis.unwrap_or_else(|| longest_axis(pc));
    let partitions = slice_partitions_along(pc, k, axis)
        .into_par_iter()
        .map(|partition| {
            let patches = build_patches(pc, &partition, cfg);
            PartitionPatches { partition, patches }
        })
        .collect();
    Ok(PreprocessedCloud { partitions })
}

const CACHE_MAGIC: &[u8; 8] = b"PCQAPTCH";
pub const CACHE_VERSION: u32 = 1;

/// Serializes preprocessed patches:
///
/// ```text
/// magic "PCQAPTCH" | u32 version | u64 config digest | u32 patch_size
/// u32 partition count, then per partition:
///   u32 axis | f32 low | f32 high | u32 n | n × u32 point index
///   u32 patch count, then per patch:
///     u32 centroid index | patch_size × u32 point index
///     patch_size × 3 f32 geometry | patch_size × 3 f32 colour
/// ```
///
/// All values little-endian.
pub fn encode_patch_cache(cloud: &PreprocessedCloud, cfg: &PreprocessConfig) -> Vec<u8> {
    let mut out = Vec::new();
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    let f32le = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&cfg.digest().to_le_bytes());
    u32le(&mut out, cfg.patch_size);
    u32le(&mut out, cloud.partitions.len());
    for pp in &cloud.partitions {
        u32le(&mut out, pp.partition.axis);
        f32le(&mut out, pp.partition.slab_range.0);
        f32le(&mut out, pp.partition.slab_range.1);
        u32le(&mut out, pp.partition.point_indices.len());
        for &i in &pp.partition.point_indices {
            u32le(&mut out, i);
        }
        u32le(&mut out, pp.patches.len());
        for patch in &pp.patches {
            u32le(&mut out, patch.centroid_index);
            for &i in &patch.point_indices {
                u32le(&mut out, i);
            }
            for &v in patch.geometry.data().iter().chain(patch.color.data()) {
                f32le(&mut out, v);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CacheError> {
        let end = self.at.checked_add(n).ok_or(CacheError::Truncated)?;
        let s = self.bytes.get(self.at..end).ok_or(CacheError::Truncated)?;
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CacheError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64, CacheError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64, CacheError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
}

/// Reads a patch cache. Returns `Ok(None)` when the cache was written under
/// a different config and must be rebuilt.
pub fn decode_patch_cache(
    bytes: &[u8],
    cfg: &PreprocessConfig,
) -> Result<Option<PreprocessedCloud>, CacheError> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8).map_err(|_| CacheError::BadMagic)? != CACHE_MAGIC {
        return Err(CacheError::BadMagic);
    }
    let version = r.u32()? as u32;
    if version != CACHE_VERSION {
        return Err(CacheError::Version(version));
    }
    if r.u64()? != cfg.digest() {
        return Ok(None);
    }
    let patch_size = r.u32()?;
    if patch_size != cfg.patch_size {
        return Err(CacheError::Corrupt("patch size disagrees with digest".into()));
    }
    let n_partitions = r.u32()?;
    let mut partitions = Vec::new();
    for _ in 0..n_partitions {
        let axis = r.u32()?;
        let slab_range = (r.f32()?, r.f32()?);
        let n = r.u32()?;
        let point_indices = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let n_patches = r.u32()?;
        let mut patches = Vec::new();
        for _ in 0..n_patches {
            let centroid_index = r.u32()?;
            let idx = (0..patch_size)
                .map(|_| r.u32())
                .collect::<Result<Vec<_>, _>>()?;
            let geo = (0..patch_size * 3)
                .map(|_| r.f32())
                .collect::<Result<Vec<_>, _>>()?;
            let col = (0..patch_size * 3)
                .map(|_| r.f32())
                .collect::<Result<Vec<_>, _>>()?;
            patches.push(Patch {
                geometry: Tensor::from_vec(patch_size, 3, geo),
                color: Tensor::from_vec(patch_size, 3, col),
                centroid_index,
                point_indices: idx,
            });
        }
        partitions.push(PartitionPatches {
            partition: Partition {
                point_indices,
                slab_range,
                axis,
            },
            patches,
        });
    }
    if r.at != bytes.len() {
        return Err(CacheError::Corrupt("trailing bytes".into()));
    }
    Ok(Some(PreprocessedCloud { partitions }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: Vec<[f64; 3]>) -> PointCloud {
        let n = points.len();
        PointCloud::new("t", points, vec![[0.5; 3]; n]).unwrap()
    }

    fn lcg_points(n: usize, levels: u64, mut state: u64) -> Vec<[f64; 3]> {
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) % levels) as f64 / levels as f64
        };
        (0..n).map(|_| [next(), next(), next()]).collect()
    }

    fn assert_index_matches_scan(points: &[[f64; 3]], k: usize) {
        let index = NeighbourIndex::new(points, k);
        assert!(index.tree.is_some());
        for q in (0..points.len()).step_by(97) {
            assert_eq!(
                index.nearest(&points[q], k, Some(q)),
                nearest(points, &points[q], k, Some(q)),
                "query {q}"
            );
        }
        let off = [0.31, 0.77, 0.05];
        assert_eq!(index.nearest(&off, k, None), nearest(points, &off, k, None));
    }

    #[test]
    fn tree_neighbours_match_linear_scan() {
        assert_index_matches_scan(&lcg_points(6000, 1 << 30, 1), 64);
    }

    #[test]
    fn tree_neighbours_match_linear_scan_with_duplicates() {
        // 27 distinct positions, so every neighbourhood is decided by ties
        assert_index_matches_scan(&lcg_points(5000, 3, 2), 100);
        assert_index_matches_scan(&vec![[1.0, 2.0, 3.0]; 4200], 512);
    }

    #[test]
    fn partition_count_clamps() {
        let cfg = PreprocessConfig::default();
        assert_eq!(compute_partition_count(1_000, &cfg), 8);
        assert_eq!(compute_partition_count(10_000_000, &cfg), 24);
        assert_eq!(compute_partition_count(1_200_000, &cfg), 12);
    }

    #[test]
    fn slicing_collinear_points() {
        let pc = cloud((0..4).map(|y| [0.0, y as f64, 0.0]).collect());
        let parts = slice_partitions(&pc, 2);
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].point_indices, vec![0, 1]);
        assert_eq!(parts[1].point_indices, vec![2, 3]);
        assert_eq!(parts[0].axis, 1);
        assert_eq!(parts[1].slab_range, (1.5, 3.0));
    }

    #[test]
    fn single_slab_holds_everything() {
        let pc = cloud(vec![[0.0, 1.0, 2.0], [3.0, -1.0, 0.0], [0.5, 0.5, 0.5]]);
        let parts = slice_partitions(&pc, 1);
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].point_indices, vec![0, 1, 2]);
    }

    #[test]
    fn identical_points_collapse_to_one_partition() {
        let pc = cloud(vec![[1.0, 1.0, 1.0]; 5]);
        let parts = slice_partitions(&pc, 8);
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].point_indices.len(), 5);
    }

    #[test]
    fn fps_on_a_line() {
        let pts: Vec<[f64; 3]> = (0..4).map(|x| [x as f64, 0.0, 0.0]).collect();
        assert_eq!(farthest_point_sample(&pts, 2, 0).unwrap(), vec![0, 3]);
        let mut all = farthest_point_sample(&pts, 4, 1).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fps_ties_prefer_lowest_index() {
        let pts = vec![[2.0, 2.0, 2.0]; 4];
        assert_eq!(farthest_point_sample(&pts, 2, 0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn fps_rejects_oversampling() {
        let pts = vec![[0.0; 3]; 2];
        assert!(matches!(
            farthest_point_sample(&pts, 3, 0),
            Err(PreprocessError::SampleTooLarge { .. })
        ));
    }

    #[test]
    fn normalize_examples() {
        let p = normalize_patch(&[[2.0, 2.0, 2.0]; 3], &[[0.1, 0.2, 0.3]; 3]);
        assert!(p.geometry.data().iter().all(|&v| v == 0.0));
        assert_eq!(p.color.row(1), &[0.1, 0.2, 0.3]);

        let p = normalize_patch(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]], &[[0.0; 3]; 2]);
        assert_eq!(p.geometry.data(), &[-1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn exact_size_partition_is_one_patch() {
        let pts: Vec<[f64; 3]> = (0..8).map(|i| [i as f64, (i * i) as f64, 0.0]).collect();
        let pc = cloud(pts);
        let cfg = PreprocessConfig {
            patch_size: 8,
            ..PreprocessConfig::default()
        };
        let part = &slice_partitions(&pc, 1)[0];
        let patches = build_patches(&pc, part, &cfg);
        assert_eq!(patches.len(), 1);
        let mut idx = patches[0].point_indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn undersized_partition_wraps_around() {
        let pc = cloud(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 3.0, 0.0]]);
        let cfg = PreprocessConfig {
            patch_size: 8,
            ..PreprocessConfig::default()
        };
        let part = &slice_partitions(&pc, 1)[0];
        let patches = build_patches(&pc, part, &cfg);
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].len(), 8);
        for i in 0..3 {
            let hits = patches[0].point_indices.iter().filter(|&&j| j == i).count();
            assert!(hits >= 2, "point {i} drawn {hits} times");
        }
    }

    #[test]
    fn cache_round_trip_and_invalidation() {
        let pts: Vec<[f64; 3]> = (0..40)
            .map(|i| [(i % 7) as f64, (i / 7) as f64 * 0.5, (i % 3) as f64])
            .collect();
        let pc = cloud(pts);
        let cfg = PreprocessConfig {
            patch_size: 8,
            partitions: PartitionCount::Fixed(2),
            ..PreprocessConfig::default()
        };
        let pre = preprocess(&pc, &cfg).unwrap();
        let bytes = encode_patch_cache(&pre, &cfg);
        let back = decode_patch_cache(&bytes, &cfg).unwrap().unwrap();
        assert_eq!(back.partitions.len(), pre.partitions.len());
        for (a, b) in back.partitions.iter().zip(&pre.partitions) {
            assert_eq!(a.partition.point_indices, b.partition.point_indices);
            assert_eq!(a.patches.len(), b.patches.len());
            for (pa, pb) in a.patches.iter().zip(&b.patches) {
                assert_eq!(pa.point_indices, pb.point_indices);
                assert!(pa.geometry.max_abs_diff(&pb.geometry) < 1e-6);
            }
        }

        let other = PreprocessConfig {
            patch_size: 16,
            ..cfg.clone()
        };
        assert_eq!(decode_patch_cache(&bytes, &other).unwrap(), None);
        assert_eq!(
            decode_patch_cache(&bytes[..bytes.len() - 3], &cfg),
            Err(CacheError::Truncated)
        );
        let mut bumped = bytes.clone();
        bumped[8] = 9;
        assert_eq!(
            decode_patch_cache(&bumped, &cfg),
            Err(CacheError::Version(9))
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = PreprocessConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.patch_size = 4;
        assert!(cfg.validate().is_err());
        cfg.patch_size = 8;
        cfg.min_partitions = 30;
        assert!(cfg.validate().is_err());
        assert_eq!("auto".parse(), Ok(PartitionCount::Auto));
        assert_eq!("12".parse(), Ok(PartitionCount::Fixed(12)));
        assert!("0".parse::<PartitionCount>().is_err());
    }
}
