//! Point-cloud data model and geometric preprocessing.
//!
//! Coordinates are kept in `f64` throughout; per-point feature matrices
//! are produced in the requested network precision by [`build_features`].

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kdtree::{squared_distance, KdTree};
use crate::tensor::{Real, Tensor};

/// A LiDAR scan: per-point coordinates and remission, with optional
/// semantic labels and instance ids of matching length.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub coords: Vec<[f64; 3]>,
    pub remission: Vec<f64>,
    pub labels: Option<Vec<u32>>,
    pub instance_ids: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(coords: Vec<[f64; 3]>, remission: Vec<f64>) -> Self {
        assert_eq!(coords.len(), remission.len());
        PointCloud {
            coords,
            remission,
            labels: None,
            instance_ids: None,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Checks the structural invariants: finite coordinates and matching
    /// lengths for every present per-point attribute.
    pub fn validate(&self, num_classes: u32, ignore_id: u32) -> Result<()> {
        if self.remission.len() != self.len() {
            return Err(Error::shape("remission length differs from point count"));
        }
        if !self.coords.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::numeric("non-finite coordinate in point cloud"));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.len() {
                return Err(Error::shape("label length differs from point count"));
            }
            if let Some(&bad) = labels
                .iter()
                .find(|&&l| l != ignore_id && l >= num_classes)
            {
                return Err(Error::arg(format!(
                    "label {bad} outside [0, {num_classes}) and not the ignore id {ignore_id}"
                )));
            }
        }
        if let Some(ids) = &self.instance_ids {
            if ids.len() != self.len() {
                return Err(Error::shape("instance id length differs from point count"));
            }
        }
        Ok(())
    }

    /// Keep the points selected by `mask`, carrying labels and instance ids.
    pub fn filter(&self, mask: &[bool]) -> PointCloud {
        let pick = |v: &Vec<u32>| -> Vec<u32> {
            v.iter()
                .zip(mask)
                .filter_map(|(&x, &keep)| keep.then_some(x))
                .collect()
        };
        PointCloud {
            coords: self
                .coords
                .iter()
                .zip(mask)
                .filter_map(|(&c, &keep)| keep.then_some(c))
                .collect(),
            remission: self
                .remission
                .iter()
                .zip(mask)
                .filter_map(|(&r, &keep)| keep.then_some(r))
                .collect(),
            labels: self.labels.as_ref().map(pick),
            instance_ids: self.instance_ids.as_ref().map(pick),
        }
    }
}

/// Self-inclusive k-nearest-neighbor table: row `i` starts with `i` itself.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    indices: Vec<u32>,
    k: usize,
}

impl NeighborTable {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }
}

/// Axis-aligned crop box, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CropBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl CropBounds {
    pub fn validate(&self) -> Result<()> {
        let axes = [
            ("x", self.x_min, self.x_max),
            ("y", self.y_min, self.y_max),
            ("z", self.z_min, self.z_max),
        ];
        for (name, lo, hi) in axes {
            if !(lo < hi) {
                return Err(Error::arg(format!(
                    "crop bounds require {name}_min < {name}_max (got {lo} .. {hi})"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        p[0] >= self.x_min
            && p[0] <= self.x_max
            && p[1] >= self.y_min
            && p[1] <= self.y_max
            && p[2] >= self.z_min
            && p[2] <= self.z_max
    }
}

/// Per-point input features: `(x, y, z, remission, range)` with
/// `range = sqrt(x^2 + y^2 + z^2)`.
pub fn build_features<R: Real>(cloud: &PointCloud) -> Result<Tensor<R>> {
    if cloud.is_empty() {
        return Err(Error::empty("build_features on empty cloud"));
    }
    let n = cloud.len();
    let mut data = Vec::with_capacity(n * 5);
    for (p, &rem) in cloud.coords.iter().zip(&cloud.remission) {
        let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        data.push(R::from_f64_c(p[0]));
        data.push(R::from_f64_c(p[1]));
        data.push(R::from_f64_c(p[2]));
        data.push(R::from_f64_c(rem));
        data.push(R::from_f64_c(range));
    }
    Ok(Tensor::new(&[n, 5], data))
}

fn voxel_key(p: &[f64; 3], resolution: f64) -> [i64; 3] {
    [
        (p[0] / resolution).floor() as i64,
        (p[1] / resolution).floor() as i64,
        (p[2] / resolution).floor() as i64,
    ]
}

/// Keep one representative point per occupied voxel (the first by input
/// order). Returns the reduced cloud and a map sending each original
/// point to the index of its voxel's representative in the output.
pub fn voxel_downsample(cloud: &PointCloud, resolution: f64) -> Result<(PointCloud, Vec<usize>)> {
    if !(resolution > 0.0) {
        return Err(Error::arg(format!(
            "voxel resolution must be positive (got {resolution})"
        )));
    }
    let mut voxel_of: HashMap<[i64; 3], usize> = HashMap::new();
    let mut keep: Vec<usize> = Vec::new();
    let mut index_map = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.coords.iter().enumerate() {
        let key = voxel_key(p, resolution);
        let slot = *voxel_of.entry(key).or_insert_with(|| {
            keep.push(i);
            keep.len() - 1
        });
        index_map.push(slot);
    }
    let mut mask = vec![false; cloud.len()];
    for &i in &keep {
        mask[i] = true;
    }
    Ok((cloud.filter(&mask), index_map))
}

/// Keep points inside `bounds` (inclusive). Returns the cropped cloud and
/// the full-length keep mask.
pub fn crop(cloud: &PointCloud, bounds: &CropBounds) -> Result<(PointCloud, Vec<bool>)> {
    bounds.validate()?;
    let mask: Vec<bool> = cloud.coords.iter().map(|p| bounds.contains(p)).collect();
    Ok((cloud.filter(&mask), mask))
}

/// Self-inclusive k-nearest neighbors for every point.
///
/// Row `i` is `[i]` followed by the `k - 1` nearest other points ordered
/// by (distance, index); when fewer points exist the row is padded by
/// repeating its last entry.
pub fn knn(cloud: &PointCloud, k: usize) -> Result<NeighborTable> {
    if k == 0 {
        return Err(Error::arg("knn requires k >= 1"));
    }
    if cloud.is_empty() {
        return Err(Error::empty("knn on empty cloud"));
    }
    let tree = KdTree::build(&cloud.coords);
    let n = cloud.len();
    let rows: Vec<Vec<u32>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut found = tree.knn(&cloud.coords[i], k);
            // The query point always occupies the first slot, even when a
            // duplicate point with a lower index ties it at distance zero.
            if let Some(pos) = found.iter().position(|&j| j == i) {
                found.remove(pos);
            } else {
                found.pop();
            }
            let mut row = Vec::with_capacity(k);
            row.push(i as u32);
            row.extend(found.iter().map(|&j| j as u32));
            while row.len() < k {
                row.push(*row.last().expect("row starts with self"));
            }
            row
        })
        .collect();
    let mut indices = Vec::with_capacity(n * k);
    for row in rows {
        indices.extend(row);
    }
    Ok(NeighborTable { indices, k })
}

/// Assign each point of `full` the prediction of its Euclidean-nearest
/// point in `processed` (lowest index on ties).
pub fn propagate_labels(
    full: &PointCloud,
    processed: &PointCloud,
    predictions: &[u32],
) -> Result<Vec<u32>> {
    if processed.is_empty() {
        return Err(Error::empty("propagate_labels with empty processed cloud"));
    }
    if predictions.len() != processed.len() {
        return Err(Error::shape(format!(
            "got {} predictions for {} processed points",
            predictions.len(),
            processed.len()
        )));
    }
    let tree = KdTree::build(&processed.coords);
    Ok(full
        .coords
        .par_iter()
        .map(|p| {
            let j = tree.nearest(p).expect("non-empty tree");
            predictions[j]
        })
        .collect())
}

/// Squared distances of a neighbor row, for diagnostics and tests.
pub fn row_distances(cloud: &PointCloud, table: &NeighborTable, i: usize) -> Vec<f64> {
    table
        .row(i)
        .iter()
        .map(|&j| squared_distance(&cloud.coords[i], &cloud.coords[j as usize]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud_from(coords: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(coords.to_vec(), vec![0.0; coords.len()])
    }

    #[test]
    fn features_are_xyz_remission_range() {
        let mut c = cloud_from(&[[3.0, 4.0, 0.0], [0.0, 0.0, 0.0], [1.0, 2.0, 2.0]]);
        c.remission = vec![0.5, 0.0, 0.1];
        let f: Tensor<f64> = build_features(&c).unwrap();
        assert_eq!(f.shape(), &[3, 5]);
        assert_eq!(f.row(0), &[3.0, 4.0, 0.0, 0.5, 5.0]);
        assert_eq!(f.row(1), &[0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(f.row(2), &[1.0, 2.0, 2.0, 0.1, 3.0]);
    }

    #[test]
    fn features_reject_empty_cloud() {
        let c = PointCloud::default();
        assert!(matches!(
            build_features::<f64>(&c),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn voxel_merges_points_in_same_cell() {
        let c = cloud_from(&[[0.01, 0.02, 0.03], [0.04, 0.05, 0.06]]);
        let (down, map) = voxel_downsample(&c, 0.1).unwrap();
        assert_eq!(down.len(), 1);
        assert_eq!(map, vec![0, 0]);
        assert_eq!(down.coords[0], [0.01, 0.02, 0.03]);
    }

    #[test]
    fn voxel_keeps_separate_cells() {
        let c = cloud_from(&[[0.0, 0.0, 0.0], [0.15, 0.0, 0.0]]);
        let (down, map) = voxel_downsample(&c, 0.1).unwrap();
        assert_eq!(down.len(), 2);
        assert_eq!(map, vec![0, 1]);
    }

    #[test]
    fn voxel_empty_and_bad_resolution() {
        let empty = PointCloud::default();
        let (down, map) = voxel_downsample(&empty, 0.1).unwrap();
        assert!(down.is_empty() && map.is_empty());
        assert!(voxel_downsample(&empty, 0.0).is_err());
        assert!(voxel_downsample(&empty, -1.0).is_err());
    }

    #[test]
    fn voxel_downsample_is_idempotent() {
        let mut c = cloud_from(&[
            [0.01, 0.02, 0.03],
            [0.04, 0.05, 0.06],
            [-0.32, 0.7, 1.4],
            [5.0, -3.0, 0.2],
            [5.01, -3.01, 0.21],
        ]);
        c.labels = Some(vec![1, 2, 3, 4, 5]);
        let (once, _) = voxel_downsample(&c, 0.1).unwrap();
        let (twice, map) = voxel_downsample(&once, 0.1).unwrap();
        assert_eq!(twice.coords, once.coords);
        assert_eq!(twice.labels, once.labels);
        assert_eq!(map, (0..once.len()).collect::<Vec<_>>());
    }

    #[test]
    fn crop_respects_bounds_and_mask() {
        let bounds = CropBounds {
            x_min: -50.0,
            x_max: 50.0,
            y_min: -50.0,
            y_max: 50.0,
            z_min: -3.0,
            z_max: 2.0,
        };
        let c = cloud_from(&[[60.0, 0.0, 0.0], [10.0, 10.0, 0.0]]);
        let (kept, mask) = crop(&c, &bounds).unwrap();
        assert_eq!(mask, vec![false, true]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept.coords[0], [10.0, 10.0, 0.0]);

        // All inside: identity with an all-true mask, and idempotent.
        let inside = cloud_from(&[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]);
        let (kept, mask) = crop(&inside, &bounds).unwrap();
        assert!(mask.iter().all(|&m| m));
        assert_eq!(kept.coords, inside.coords);
        let (again, _) = crop(&kept, &bounds).unwrap();
        assert_eq!(again.coords, kept.coords);
        assert_eq!(mask.iter().filter(|&&m| m).count(), kept.len());
    }

    #[test]
    fn crop_rejects_inverted_bounds() {
        let bad = CropBounds {
            x_min: 1.0,
            x_max: -1.0,
            y_min: 0.0,
            y_max: 1.0,
            z_min: 0.0,
            z_max: 1.0,
        };
        assert!(crop(&PointCloud::default(), &bad).is_err());
    }

    #[test]
    fn knn_pads_single_point_cloud() {
        let c = cloud_from(&[[1.0, 2.0, 3.0]]);
        let t = knn(&c, 4).unwrap();
        assert_eq!(t.row(0), &[0, 0, 0, 0]);
    }

    #[test]
    fn knn_collinear_hand_case() {
        let c = cloud_from(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let t = knn(&c, 2).unwrap();
        assert_eq!(t.row(1), &[1, 0]);
    }

    #[test]
    fn knn_k1_is_self() {
        let c = cloud_from(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let t = knn(&c, 1).unwrap();
        for i in 0..3 {
            assert_eq!(t.row(i), &[i as u32]);
        }
    }

    #[test]
    fn knn_errors() {
        assert!(knn(&PointCloud::default(), 3).is_err());
        assert!(knn(&cloud_from(&[[0.0; 3]]), 0).is_err());
    }

    #[test]
    fn knn_row_distances_non_decreasing() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let coords: Vec<[f64; 3]> = (0..80)
            .map(|_| {
                [
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(-4.0..4.0),
                ]
            })
            .collect();
        let c = cloud_from(&coords);
        let t = knn(&c, 6).unwrap();
        for i in 0..c.len() {
            let d = row_distances(&c, &t, i);
            assert_eq!(d[0], 0.0);
            for w in d.windows(2) {
                assert!(w[0] <= w[1], "row {i} distances {d:?}");
            }
        }
    }

    #[test]
    fn propagate_identity_and_nearest() {
        let full = cloud_from(&[[100.0, 0.0, 0.0]]);
        let processed = cloud_from(&[[1.0, 0.0, 0.0], [50.0, 0.0, 0.0]]);
        let out = propagate_labels(&full, &processed, &[7, 9]).unwrap();
        assert_eq!(out, vec![9]);

        let same = cloud_from(&[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]);
        let out = propagate_labels(&same, &same, &[3, 4]).unwrap();
        assert_eq!(out, vec![3, 4]);
    }

    #[test]
    fn propagate_errors() {
        let c = cloud_from(&[[0.0; 3]]);
        assert!(propagate_labels(&c, &PointCloud::default(), &[]).is_err());
        assert!(propagate_labels(&c, &c, &[1, 2]).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_cloud(max_points: usize) -> impl Strategy<Value = PointCloud> {
            prop::collection::vec(
                (
                    -20.0f64..20.0,
                    -20.0f64..20.0,
                    -3.0f64..3.0,
                ),
                1..max_points,
            )
            .prop_map(|pts| {
                let coords: Vec<[f64; 3]> = pts.iter().map(|&(x, y, z)| [x, y, z]).collect();
                let n = coords.len();
                PointCloud::new(coords, vec![0.0; n])
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(40))]

            /// Row i holds self first, then the nearest others by
            /// (distance, index), matching an exhaustive sort.
            #[test]
            fn knn_matches_exhaustive_sort_oracle(cloud in arb_cloud(200), k in 1usize..12) {
                let table = knn(&cloud, k).unwrap();
                for i in 0..cloud.len() {
                    let mut all: Vec<(f64, usize)> = (0..cloud.len())
                        .filter(|&j| j != i)
                        .map(|j| (squared_distance(&cloud.coords[i], &cloud.coords[j]), j))
                        .collect();
                    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    let mut expected = vec![i as u32];
                    expected.extend(all.iter().take(k - 1).map(|&(_, j)| j as u32));
                    while expected.len() < k {
                        expected.push(*expected.last().unwrap());
                    }
                    prop_assert_eq!(table.row(i), &expected[..], "row {}", i);
                }
            }

            /// Downsampling a downsampled cloud at the same resolution is
            /// the identity.
            #[test]
            fn voxel_downsample_idempotent(cloud in arb_cloud(150), res in 0.05f64..2.0) {
                let (once, _) = voxel_downsample(&cloud, res).unwrap();
                let (twice, map) = voxel_downsample(&once, res).unwrap();
                prop_assert_eq!(&twice.coords, &once.coords);
                prop_assert_eq!(map, (0..once.len()).collect::<Vec<_>>());
            }

            /// Cropping is idempotent and the mask count equals the output
            /// size.
            #[test]
            fn crop_idempotent_with_consistent_mask(cloud in arb_cloud(150)) {
                let bounds = CropBounds {
                    x_min: -10.0, x_max: 10.0,
                    y_min: -10.0, y_max: 10.0,
                    z_min: -2.0, z_max: 2.0,
                };
                let (kept, mask) = crop(&cloud, &bounds).unwrap();
                prop_assert_eq!(mask.iter().filter(|&&m| m).count(), kept.len());
                let (again, mask2) = crop(&kept, &bounds).unwrap();
                prop_assert_eq!(&again.coords, &kept.coords);
                prop_assert!(mask2.iter().all(|&m| m));
            }
        }
    }

    #[test]
    fn propagate_restricted_to_survivors_is_identity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let coords: Vec<[f64; 3]> = (0..60)
            .map(|_| {
                [
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ]
            })
            .collect();
        let full = cloud_from(&coords);
        let (processed, index_map) = voxel_downsample(&full, 0.5).unwrap();
        let preds: Vec<u32> = (0..processed.len() as u32).collect();
        let out = propagate_labels(&full, &processed, &preds).unwrap();
        // Survivors are exactly the points mapped to themselves.
        for (i, &slot) in index_map.iter().enumerate() {
            if processed.coords[slot] == full.coords[i] {
                assert_eq!(out[i], preds[slot], "survivor {i}");
            }
        }
    }
}
