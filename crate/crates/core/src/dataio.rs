//! Binary scan/label file IO and synthetic scene generation.
//!
//! Scan files are consecutive 16-byte records of four little-endian f32
//! values (x, y, z, remission). Label files are consecutive little-endian
//! u32 values whose low 16 bits carry the raw semantic class and high 16
//! bits the instance id.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

const SCAN_RECORD: usize = 16;

/// Raw-id to train-id mapping with an ignore fallback for unknown ids.
#[derive(Debug, Clone)]
pub struct ClassMap {
    raw_to_train: HashMap<u16, u32>,
    train_to_raw: HashMap<u32, u16>,
    pub ignore_index: u32,
    pub num_classes: usize,
}

impl ClassMap {
    /// Build from (raw, train) pairs. The first raw id listed for a train
    /// id becomes its representative for the inverse mapping.
    pub fn new(pairs: &[(u16, u32)], ignore_index: u32) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::config("class map needs at least one entry"));
        }
        let mut raw_to_train = HashMap::new();
        let mut train_to_raw = HashMap::new();
        let mut max_train = 0;
        for &(raw, train) in pairs {
            if raw_to_train.insert(raw, train).is_some() {
                return Err(Error::config(format!("raw class {raw} mapped twice")));
            }
            train_to_raw.entry(train).or_insert(raw);
            max_train = max_train.max(train);
        }
        let num_classes = (max_train.max(ignore_index) + 1) as usize;
        Ok(ClassMap {
            raw_to_train,
            train_to_raw,
            ignore_index,
            num_classes,
        })
    }

    /// 1:1 mapping for synthetic data with `num_classes` ids.
    pub fn identity(num_classes: usize, ignore_index: u32) -> Self {
        let pairs: Vec<(u16, u32)> = (0..num_classes as u32).map(|c| (c as u16, c)).collect();
        Self::new(&pairs, ignore_index).expect("identity map is valid")
    }

    /// Total over all raw ids: unknown ids fall back to the ignore class.
    pub fn map_raw(&self, raw: u16) -> u32 {
        self.raw_to_train.get(&raw).copied().unwrap_or(self.ignore_index)
    }

    pub fn unmap(&self, train: u32) -> Result<u16> {
        self.train_to_raw
            .get(&train)
            .copied()
            .ok_or_else(|| Error::arg(format!("train class {train} has no raw id")))
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Read a scan file into an unlabeled cloud.
pub fn read_scan(path: &Path) -> Result<PointCloud> {
    let bytes = read_bytes(path)?;
    if bytes.len() % SCAN_RECORD != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (bytes.len() - bytes.len() % SCAN_RECORD) as u64,
            message: format!(
                "file size {} is not a multiple of the {SCAN_RECORD}-byte point record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / SCAN_RECORD;
    let mut coords = Vec::with_capacity(n);
    let mut remission = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(SCAN_RECORD) {
        let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]) as f64;
        coords.push([f(0), f(4), f(8)]);
        remission.push(f(12));
    }
    Ok(PointCloud::new(coords, remission))
}

/// Write a cloud's coordinates and remission as a scan file.
pub fn write_scan(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut bytes = Vec::with_capacity(cloud.len() * SCAN_RECORD);
    for (p, &rem) in cloud.coords.iter().zip(&cloud.remission) {
        for v in [p[0], p[1], p[2], rem] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a label file: mapped semantic train ids and instance ids.
pub fn read_labels(path: &Path, map: &ClassMap) -> Result<(Vec<u32>, Vec<u32>)> {
    let bytes = read_bytes(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (bytes.len() - bytes.len() % 4) as u64,
            message: format!("file size {} is not a multiple of 4", bytes.len()),
        });
    }
    let mut semantic = Vec::with_capacity(bytes.len() / 4);
    let mut instance = Vec::with_capacity(bytes.len() / 4);
    for rec in bytes.chunks_exact(4) {
        let raw = u32::from_le_bytes([rec[0], rec[1], rec[2], rec[3]]);
        semantic.push(map.map_raw((raw & 0xffff) as u16));
        instance.push(raw >> 16);
    }
    Ok((semantic, instance))
}

/// Write predictions as a label file: low 16 bits carry the raw dataset
/// id of each prediction, high 16 bits are zero.
pub fn write_predictions(path: &Path, predictions: &[u32], map: &ClassMap) -> Result<()> {
    let mut bytes = Vec::with_capacity(predictions.len() * 4);
    for &p in predictions {
        let raw = map.unmap(p)? as u32;
        bytes.extend_from_slice(&raw.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Attach labels read from `label_path` to a scan, checking counts.
pub fn read_scan_with_labels(
    scan_path: &Path,
    label_path: &Path,
    map: &ClassMap,
) -> Result<PointCloud> {
    let mut cloud = read_scan(scan_path)?;
    let (semantic, instance) = read_labels(label_path, map)?;
    if semantic.len() != cloud.len() {
        return Err(Error::Format {
            path: label_path.to_path_buf(),
            offset: 0,
            message: format!(
                "{} labels for a scan of {} points",
                semantic.len(),
                cloud.len()
            ),
        });
    }
    cloud.labels = Some(semantic);
    cloud.instance_ids = Some(instance);
    Ok(cloud)
}

/// Primitive generators for desk-scale labeled scenes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthSceneSpec {
    pub ground: Option<GroundSpec>,
    pub boxes: Vec<BoxSpec>,
    pub cylinders: Vec<CylinderSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroundSpec {
    pub points: usize,
    pub radius: f64,
    pub class_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoxSpec {
    pub points: usize,
    pub center: [f64; 2],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CylinderSpec {
    pub points: usize,
    pub center: [f64; 2],
    pub radius: f64,
    pub height: f64,
    pub class_id: u32,
}

impl SynthSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let mut total = 0usize;
        if let Some(g) = &self.ground {
            if !(g.radius > 0.0) {
                return Err(Error::arg("ground radius must be positive"));
            }
            total += g.points;
        }
        for b in &self.boxes {
            if b.size.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::arg("box sizes must be positive"));
            }
            total += b.points;
        }
        for c in &self.cylinders {
            if !(c.radius > 0.0) || !(c.height > 0.0) {
                return Err(Error::arg("cylinder radius and height must be positive"));
            }
            total += c.points;
        }
        if total == 0 {
            return Err(Error::empty("scene spec generates no points"));
        }
        Ok(())
    }
}

/// Deterministic labeled scene: a ground disk plus boxes and vertical
/// cylinders. The ground carries instance id 0; each object gets the next
/// id starting from 1, in listed order (boxes first).
pub fn synth_scene(spec: &SynthSceneSpec, seed: u64) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    let mut remission = Vec::new();
    let mut labels = Vec::new();
    let mut instance_ids = Vec::new();

    if let Some(g) = &spec.ground {
        for _ in 0..g.points {
            let r = g.radius * rng.gen_range(0.0f64..1.0).sqrt();
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            coords.push([r * phi.cos(), r * phi.sin(), rng.gen_range(-0.02..0.02)]);
            remission.push(rng.gen_range(0.0..1.0));
            labels.push(g.class_id);
            instance_ids.push(0);
        }
    }
    let mut next_id = 1u32;
    for b in &spec.boxes {
        let (sin, cos) = b.yaw.sin_cos();
        for _ in 0..b.points {
            let lx = rng.gen_range(-b.size[0] / 2.0..b.size[0] / 2.0);
            let ly = rng.gen_range(-b.size[1] / 2.0..b.size[1] / 2.0);
            let lz = rng.gen_range(0.0..b.size[2]);
            coords.push([
                b.center[0] + cos * lx - sin * ly,
                b.center[1] + sin * lx + cos * ly,
                lz,
            ]);
            remission.push(rng.gen_range(0.0..1.0));
            labels.push(b.class_id);
            instance_ids.push(next_id);
        }
        next_id += 1;
    }
    for c in &spec.cylinders {
        for _ in 0..c.points {
            let r = c.radius * rng.gen_range(0.0f64..1.0).sqrt();
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            coords.push([
                c.center[0] + r * phi.cos(),
                c.center[1] + r * phi.sin(),
                rng.gen_range(0.0..c.height),
            ]);
            remission.push(rng.gen_range(0.0..1.0));
            labels.push(c.class_id);
            instance_ids.push(next_id);
        }
        next_id += 1;
    }

    let mut cloud = PointCloud::new(coords, remission);
    cloud.labels = Some(labels);
    cloud.instance_ids = Some(instance_ids);
    Ok(cloud)
}
