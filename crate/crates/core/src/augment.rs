//! Training-time augmentation: global rotate/flip/scale and a
//! geometry-aware instance paste that resamples objects to match the
//! beam density at their new distance.
//!
//! Instances are quantized along z into beam-like groups whose height
//! grows linearly with placement distance. Moving an object closer
//! duplicates groups (with a half-bin vertical shift, simulating new
//! beams); moving it farther removes groups. Group selection is
//! deterministic and evenly spaced over the z-extent, mirroring how real
//! scan lines thin out regularly with range — this also makes the pasted
//! point count monotone in the placement distance.

use std::collections::BTreeMap;

use rand::Rng;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

/// Probabilities and ranges for the global scene augmentations.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GlobalAugmentConfig {
    pub rotate_prob: f64,
    /// Applied independently to the x and y axes.
    pub flip_prob: f64,
    pub scale_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for GlobalAugmentConfig {
    fn default() -> Self {
        GlobalAugmentConfig {
            rotate_prob: 1.0,
            flip_prob: 0.5,
            scale_prob: 1.0,
            scale_min: 0.95,
            scale_max: 1.05,
        }
    }
}

/// Rotate all points by `theta` about the z axis.
pub fn rotate_z(cloud: &mut PointCloud, theta: f64) {
    let (sin, cos) = theta.sin_cos();
    for p in &mut cloud.coords {
        let (x, y) = (p[0], p[1]);
        p[0] = cos * x - sin * y;
        p[1] = sin * x + cos * y;
    }
}

/// Negate one horizontal axis (0 = x, 1 = y).
pub fn flip_axis(cloud: &mut PointCloud, axis: usize) {
    assert!(axis < 2, "flips are defined for the x and y axes");
    for p in &mut cloud.coords {
        p[axis] = -p[axis];
    }
}

/// Isotropic scaling about the origin.
pub fn scale_points(cloud: &mut PointCloud, factor: f64) {
    for p in &mut cloud.coords {
        for v in p.iter_mut() {
            *v *= factor;
        }
    }
}

/// Random rotation about z, independent x/y flips, and isotropic
/// scaling, each applied with its configured probability. Labels and
/// instance ids are untouched.
pub fn global_augment(
    cloud: &PointCloud,
    rng: &mut impl Rng,
    cfg: &GlobalAugmentConfig,
) -> PointCloud {
    let mut out = cloud.clone();
    if rng.gen_bool(cfg.rotate_prob) {
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        rotate_z(&mut out, theta);
    }
    if rng.gen_bool(cfg.flip_prob) {
        flip_axis(&mut out, 0);
    }
    if rng.gen_bool(cfg.flip_prob) {
        flip_axis(&mut out, 1);
    }
    if rng.gen_bool(cfg.scale_prob) {
        let s = rng.gen_range(cfg.scale_min..cfg.scale_max);
        scale_points(&mut out, s);
    }
    out
}

/// A stored object instance: points centered at the x,y origin with z
/// relative to the instance's lowest point.
#[derive(Debug, Clone)]
pub struct InstanceRecord {
    pub points: Vec<[f64; 3]>,
    pub remission: Vec<f64>,
    pub class_id: u32,
    /// Range of the instance centroid in its source scan, meters.
    pub source_distance: f64,
    pub source_id: String,
}

impl InstanceRecord {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Instance-paste configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CutMixConfig {
    /// Classes worth banking and pasting.
    pub rare_classes: Vec<u32>,
    /// Classes a pasted instance may stand on.
    pub ground_classes: Vec<u32>,
    pub max_paste: usize,
    pub min_instance_points: usize,
    /// Vertical angular spacing of simulated beams, radians.
    pub vertical_fov_step: f64,
    pub rate_clamp_min: f64,
    pub rate_clamp_max: f64,
    /// Placement attempts per pasted instance before giving up.
    pub max_retries: usize,
}

impl Default for CutMixConfig {
    fn default() -> Self {
        CutMixConfig {
            rare_classes: vec![],
            ground_classes: vec![],
            max_paste: 10,
            min_instance_points: 10,
            vertical_fov_step: 0.0073,
            rate_clamp_min: 0.5,
            rate_clamp_max: 2.0,
            max_retries: 10,
        }
    }
}

impl CutMixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate_clamp_min <= 1.0 && 1.0 <= self.rate_clamp_max) {
            return Err(Error::config(
                "rate clamp must bracket 1 (rate_clamp_min <= 1 <= rate_clamp_max)",
            ));
        }
        if !(self.vertical_fov_step > 0.0) {
            return Err(Error::config("vertical_fov_step must be positive"));
        }
        Ok(())
    }
}

/// Extract one record per (rare class, instance id) group with at least
/// `min_instance_points` points. Requires labels and instance ids;
/// instance id 0 marks unassigned points and is skipped.
pub fn extract_instances(
    cloud: &PointCloud,
    cfg: &CutMixConfig,
    source_id: &str,
) -> Result<Vec<InstanceRecord>> {
    let labels = cloud
        .labels
        .as_ref()
        .ok_or_else(|| Error::arg("instance extraction requires labels"))?;
    let instance_ids = cloud
        .instance_ids
        .as_ref()
        .ok_or_else(|| Error::arg("instance extraction requires instance ids"))?;
    let mut groups: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for i in 0..cloud.len() {
        if instance_ids[i] == 0 || !cfg.rare_classes.contains(&labels[i]) {
            continue;
        }
        groups.entry((labels[i], instance_ids[i])).or_default().push(i);
    }
    let mut out = Vec::new();
    for ((class_id, instance_id), members) in groups {
        if members.len() < cfg.min_instance_points {
            continue;
        }
        let m = members.len() as f64;
        let mut centroid = [0.0f64; 3];
        for &i in &members {
            for a in 0..3 {
                centroid[a] += cloud.coords[i][a];
            }
        }
        for a in &mut centroid {
            *a /= m;
        }
        let min_z = members
            .iter()
            .map(|&i| cloud.coords[i][2])
            .fold(f64::INFINITY, f64::min);
        let points = members
            .iter()
            .map(|&i| {
                let p = cloud.coords[i];
                [p[0] - centroid[0], p[1] - centroid[1], p[2] - min_z]
            })
            .collect();
        out.push(InstanceRecord {
            points,
            remission: members.iter().map(|&i| cloud.remission[i]).collect(),
            class_id,
            source_distance: (centroid[0] * centroid[0]
                + centroid[1] * centroid[1]
                + centroid[2] * centroid[2])
                .sqrt(),
            source_id: format!("{source_id}#{instance_id}"),
        });
    }
    Ok(out)
}

/// Partition of instance points into z bins of equal height.
#[derive(Debug, Clone)]
pub struct BeamGroups {
    pub bin_height: f64,
    /// (bin index, member point indices), ordered by bin.
    pub groups: Vec<(i64, Vec<usize>)>,
}

impl BeamGroups {
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }
}

/// Quantize instance points along z with bin height
/// `d * tan(vertical_fov_step)` — the beam spacing at distance `d`.
pub fn beam_quantize(instance: &InstanceRecord, d: f64, cfg: &CutMixConfig) -> Result<BeamGroups> {
    if !(d > 0.0) {
        return Err(Error::arg(format!("placement distance must be positive (got {d})")));
    }
    cfg.validate()?;
    let bin_height = d * cfg.vertical_fov_step.tan();
    let mut bins: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, p) in instance.points.iter().enumerate() {
        // The epsilon absorbs division noise for points that sit exactly
        // on a bin boundary (0.30 / 0.1 must land in bin 3, not 2).
        let bin = (p[2] / bin_height + 1e-9).floor() as i64;
        bins.entry(bin).or_default().push(i);
    }
    Ok(BeamGroups {
        bin_height,
        groups: bins.into_iter().collect(),
    })
}

/// Bit-reversal (van der Corput) visiting order over `g` items: every
/// prefix of the order is evenly spread, so consuming groups in this
/// order thins or thickens beams uniformly across the z-extent.
fn low_discrepancy_order(g: usize) -> Vec<usize> {
    if g <= 1 {
        return (0..g).collect();
    }
    let bits = usize::BITS - (g - 1).leading_zeros();
    let mut order = Vec::with_capacity(g);
    for v in 0..(1usize << bits) {
        let rev = v.reverse_bits() >> (usize::BITS - bits);
        if rev < g {
            order.push(rev);
        }
    }
    order
}

/// Resample an instance for a new placement distance.
///
/// The density rate is `source_distance / d_target` clamped to the
/// configured range. The point budget `round(|rate - 1| * M)` is
/// duplicated (rate > 1, shifted up half a bin to simulate new beams) or
/// removed (rate < 1, never all points), taken as whole beam groups in
/// low-discrepancy order with only the final group partial. The budget
/// is a monotone function of the distance, so the output point count is
/// monotone non-increasing in `d_target` for a fixed source.
pub fn resample_instance(
    instance: &InstanceRecord,
    d_target: f64,
    cfg: &CutMixConfig,
) -> Result<InstanceRecord> {
    if instance.is_empty() {
        return Err(Error::empty("resampling an empty instance"));
    }
    let m = instance.len();
    let rate = (instance.source_distance / d_target).clamp(cfg.rate_clamp_min, cfg.rate_clamp_max);
    let budget = ((rate - 1.0).abs() * m as f64).round() as usize;
    if rate == 1.0 || budget == 0 {
        return Ok(instance.clone());
    }
    let beams = beam_quantize(instance, d_target, cfg)?;
    let order = low_discrepancy_order(beams.group_count());
    let mut out = instance.clone();
    if rate > 1.0 {
        let shift = beams.bin_height / 2.0;
        let mut added = 0usize;
        'dup: for &sel in &order {
            for &i in &beams.groups[sel].1 {
                if added == budget {
                    break 'dup;
                }
                let p = instance.points[i];
                out.points.push([p[0], p[1], p[2] + shift]);
                out.remission.push(instance.remission[i]);
                added += 1;
            }
        }
    } else {
        let budget = budget.min(m - 1);
        let mut removed = vec![false; m];
        let mut count = 0usize;
        'rm: for &sel in &order {
            for &i in &beams.groups[sel].1 {
                if count == budget {
                    break 'rm;
                }
                removed[i] = true;
                count += 1;
            }
        }
        out.points = instance
            .points
            .iter()
            .zip(&removed)
            .filter_map(|(&p, &r)| (!r).then_some(p))
            .collect();
        out.remission = instance
            .remission
            .iter()
            .zip(&removed)
            .filter_map(|(&v, &r)| (!r).then_some(v))
            .collect();
    }
    Ok(out)
}

/// Outcome of pasting instances into a scene.
#[derive(Debug, Clone)]
pub struct PasteResult {
    pub cloud: PointCloud,
    pub pasted: usize,
    /// True when the scene had no ground-class points to anchor on.
    pub no_ground: bool,
}

/// Paste up to `max_paste` bank instances into a scene.
///
/// Each instance is anchored on a uniformly drawn ground-class point,
/// yawed randomly, resampled for the anchor distance, and rejected (with
/// bounded retries) when its 2D bounding circle overlaps an earlier
/// placement. Pre-existing scene points are never moved or relabeled.
pub fn paste_instances(
    scene: &PointCloud,
    bank: &[InstanceRecord],
    cfg: &CutMixConfig,
    rng: &mut impl Rng,
) -> Result<PasteResult> {
    cfg.validate()?;
    let labels = scene
        .labels
        .as_ref()
        .ok_or_else(|| Error::arg("instance pasting requires a labeled scene"))?;
    if bank.is_empty() {
        return Err(Error::empty("instance bank is empty"));
    }
    let ground: Vec<usize> = (0..scene.len())
        .filter(|&i| cfg.ground_classes.contains(&labels[i]))
        .collect();
    if ground.is_empty() {
        log::warn!("no ground-class points in scene; skipping instance paste");
        return Ok(PasteResult {
            cloud: scene.clone(),
            pasted: 0,
            no_ground: true,
        });
    }
    let mut classes: Vec<u32> = bank.iter().map(|r| r.class_id).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut out = scene.clone();
    let mut next_instance_id = scene
        .instance_ids
        .as_ref()
        .map(|ids| ids.iter().copied().max().unwrap_or(0) + 1);
    let mut placements: Vec<(f64, f64, f64)> = Vec::new();
    let mut pasted = 0usize;
    for _ in 0..cfg.max_paste {
        let class = classes[rng.gen_range(0..classes.len())];
        let candidates: Vec<&InstanceRecord> =
            bank.iter().filter(|r| r.class_id == class).collect();
        let record = candidates[rng.gen_range(0..candidates.len())];
        for _attempt in 0..cfg.max_retries.max(1) {
            let anchor = scene.coords[ground[rng.gen_range(0..ground.len())]];
            let d = (anchor[0] * anchor[0] + anchor[1] * anchor[1] + anchor[2] * anchor[2]).sqrt();
            if d <= 0.0 {
                continue;
            }
            let mut resampled = resample_instance(record, d, cfg)?;
            let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
            let (sin, cos) = yaw.sin_cos();
            for p in &mut resampled.points {
                let (x, y) = (p[0], p[1]);
                p[0] = cos * x - sin * y;
                p[1] = sin * x + cos * y;
            }
            // Recenter after resampling so the pasted x,y centroid sits
            // exactly on the anchor and the lowest point touches its z.
            let m = resampled.len() as f64;
            let cx = resampled.points.iter().map(|p| p[0]).sum::<f64>() / m;
            let cy = resampled.points.iter().map(|p| p[1]).sum::<f64>() / m;
            let min_z = resampled
                .points
                .iter()
                .map(|p| p[2])
                .fold(f64::INFINITY, f64::min);
            let radius = resampled
                .points
                .iter()
                .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
                .fold(0.0f64, f64::max);
            let collides = placements
                .iter()
                .any(|&(px, py, pr)| ((px - anchor[0]).powi(2) + (py - anchor[1]).powi(2)).sqrt() < pr + radius);
            if collides {
                continue;
            }
            placements.push((anchor[0], anchor[1], radius));
            let id = next_instance_id;
            for (p, &rem) in resampled.points.iter().zip(&resampled.remission) {
                out.coords.push([
                    anchor[0] + (p[0] - cx),
                    anchor[1] + (p[1] - cy),
                    anchor[2] + (p[2] - min_z),
                ]);
                out.remission.push(rem);
                out.labels.as_mut().expect("scene labels").push(record.class_id);
                if let (Some(ids), Some(new_id)) = (out.instance_ids.as_mut(), id) {
                    ids.push(new_id);
                }
            }
            if let Some(new_id) = next_instance_id {
                next_instance_id = Some(new_id + 1);
                let _ = id;
            }
            pasted += 1;
            break;
        }
    }
    Ok(PasteResult {
        cloud: out,
        pasted,
        no_ground: false,
    })
}

/// Persist a bank as one scan-layout binary file per instance plus a
/// `manifest.csv` (file, class id, point count, source distance,
/// provenance).
pub fn save_bank(dir: &std::path::Path, bank: &[InstanceRecord]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("file,class_id,points,source_distance,source_id\n");
    for (i, record) in bank.iter().enumerate() {
        let file = format!("{i:05}.bin");
        let cloud = PointCloud::new(record.points.clone(), record.remission.clone());
        crate::dataio::write_scan(&dir.join(&file), &cloud)?;
        manifest.push_str(&format!(
            "{file},{},{},{},{}\n",
            record.class_id,
            record.len(),
            record.source_distance,
            record.source_id
        ));
    }
    let path = dir.join("manifest.csv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

/// Load a bank saved by [`save_bank`].
pub fn load_bank(dir: &std::path::Path) -> Result<Vec<InstanceRecord>> {
    let manifest_path = dir.join("manifest.csv");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut bank = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(5, ',').collect();
        if fields.len() != 5 {
            return Err(Error::Format {
                path: manifest_path.clone(),
                offset: lineno as u64,
                message: format!("manifest line {} has {} fields, expected 5", lineno + 1, fields.len()),
            });
        }
        let parse_err = |what: &str| {
            Error::Format {
                path: manifest_path.clone(),
                offset: lineno as u64,
                message: format!("manifest line {}: bad {what}", lineno + 1),
            }
        };
        let cloud = crate::dataio::read_scan(&dir.join(fields[0]))?;
        let class_id: u32 = fields[1].parse().map_err(|_| parse_err("class id"))?;
        let points: usize = fields[2].parse().map_err(|_| parse_err("point count"))?;
        let source_distance: f64 = fields[3].parse().map_err(|_| parse_err("source distance"))?;
        if cloud.len() != points {
            return Err(parse_err("point count (file disagrees)"));
        }
        bank.push(InstanceRecord {
            points: cloud.coords,
            remission: cloud.remission,
            class_id,
            source_distance,
            source_id: fields[4].to_string(),
        });
    }
    if bank.is_empty() {
        return Err(Error::empty(format!("instance bank at {}", dir.display())));
    }
    Ok(bank)
}
