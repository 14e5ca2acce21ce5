//! Orchestration: dataset access, the training loop, and evaluation.
//!
//! One training step loads a batch of scenes, augments them (global
//! transforms plus optional instance pasting), preprocesses (voxel
//! downsample, crop, features, neighbors), runs the shared-tape batch
//! forward, applies the combined objective over the concatenated batch
//! points, and takes one AdamW step on the warmup/cosine schedule.
//! Evaluation recovers predictions for every original point by
//! nearest-neighbor propagation from the processed cloud.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{self, InstanceRecord};
use crate::autodiff::Mode;
use crate::checkpoint;
use crate::cloud::{self, PointCloud};
use crate::config::{DataSource, Precision, PreprocessSection, RunConfig};
use crate::dataio::{self, ClassMap, SynthSceneSpec};
use crate::error::{Error, Result};
use crate::loss::{self, LossConfig};
use crate::metrics::{ConfusionMatrix, IouReport};
use crate::network::{self, forward_batch, NetworkConfig, NetworkInput, NetworkParams};
use crate::optim::{lr_at, AdamW};
use crate::tensor::{Real, Tensor};

/// A list of scenes that can be loaded by index.
pub enum SceneSet {
    Synthetic(Vec<(String, PointCloud)>),
    Kitti {
        scans: Vec<(String, PathBuf, PathBuf)>,
        class_map: ClassMap,
    },
}

impl SceneSet {
    pub fn len(&self) -> usize {
        match self {
            SceneSet::Synthetic(v) => v.len(),
            SceneSet::Kitti { scans, .. } => scans.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(&self, index: usize) -> Result<(String, PointCloud)> {
        match self {
            SceneSet::Synthetic(v) => Ok(v[index].clone()),
            SceneSet::Kitti { scans, class_map } => {
                let (id, scan, label) = &scans[index];
                let cloud = dataio::read_scan_with_labels(scan, label, class_map)?;
                Ok((id.clone(), cloud))
            }
        }
    }
}

/// Deterministic synthetic scene for index `i`: a ground disk plus a box
/// and a cylinder at seeded positions.
fn synthetic_scene_spec(config: &RunConfig, rng: &mut ChaCha8Rng) -> SynthSceneSpec {
    let synth = config.data.synthetic.as_ref().expect("validated synthetic section");
    let place = |rng: &mut ChaCha8Rng| {
        let r = rng.gen_range(3.0..9.0);
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        [r * phi.cos(), r * phi.sin()]
    };
    SynthSceneSpec {
        ground: Some(dataio::GroundSpec {
            points: synth.ground_points,
            radius: 12.0,
            class_id: 1,
        }),
        boxes: vec![dataio::BoxSpec {
            points: synth.box_points,
            center: place(rng),
            size: [
                rng.gen_range(1.5..4.0),
                rng.gen_range(1.5..2.5),
                rng.gen_range(1.0..2.0),
            ],
            yaw: rng.gen_range(0.0..std::f64::consts::TAU),
            class_id: 2,
        }],
        cylinders: vec![dataio::CylinderSpec {
            points: synth.cylinder_points,
            center: place(rng),
            radius: rng.gen_range(0.2..0.5),
            height: rng.gen_range(1.4..1.9),
            class_id: 3,
        }],
    }
}

fn kitti_scene_list(root: &Path, sequences: &[String]) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let mut out = Vec::new();
    for seq in sequences {
        let scan_dir = root.join(seq).join("velodyne");
        let label_dir = root.join(seq).join("labels");
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&scan_dir)
            .map_err(|e| Error::io(&scan_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .collect();
        entries.sort();
        for scan in entries {
            let stem = scan
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::arg("scan file name is not utf-8"))?
                .to_string();
            out.push((
                format!("{seq}/{stem}"),
                scan.clone(),
                label_dir.join(format!("{stem}.label")),
            ));
        }
    }
    Ok(out)
}

/// Build the train or validation scene set from the configuration.
pub fn scene_set(config: &RunConfig, validation: bool) -> Result<SceneSet> {
    match config.data.source {
        DataSource::Synthetic => {
            let synth = config
                .data
                .synthetic
                .as_ref()
                .ok_or_else(|| Error::config("missing [data.synthetic] section"))?;
            let count = if validation { synth.val_scenes } else { synth.train_scenes };
            // Validation scenes reuse the training geometry when the
            // validation count is zero-offset by design: indexes continue
            // after the training scenes so the two sets differ.
            let offset = if validation { synth.train_scenes } else { 0 };
            let mut scenes = Vec::with_capacity(count);
            for i in 0..count {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    config.run.seed.wrapping_add((offset + i) as u64),
                );
                let spec = synthetic_scene_spec(config, &mut rng);
                let scene = dataio::synth_scene(&spec, rng.gen())?;
                scenes.push((format!("synthetic/{:04}", offset + i), scene));
            }
            Ok(SceneSet::Synthetic(scenes))
        }
        DataSource::Kitti => {
            let kitti = config
                .data
                .kitti
                .as_ref()
                .ok_or_else(|| Error::config("missing [data.kitti] section"))?;
            let sequences = if validation {
                &kitti.val_sequences
            } else {
                &kitti.train_sequences
            };
            Ok(SceneSet::Kitti {
                scans: kitti_scene_list(&kitti.root, sequences)?,
                class_map: config.class_map()?,
            })
        }
    }
}

/// Voxel-downsample and crop a cloud, then build the network input.
pub fn preprocess<R: Real>(
    cloud: &PointCloud,
    pp: &PreprocessSection,
    netcfg: &NetworkConfig,
) -> Result<(PointCloud, NetworkInput<R>)> {
    let (down, _) = cloud::voxel_downsample(cloud, pp.voxel_resolution)?;
    let (processed, _) = cloud::crop(&down, &pp.crop)?;
    if processed.is_empty() {
        return Err(Error::empty("no points survive preprocessing"));
    }
    let input = NetworkInput::prepare(&processed, netcfg)?;
    Ok((processed, input))
}

/// One row of the training log.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub val_miou: f64,
}

/// Training outcome: per-epoch stats and artifact paths.
pub struct TrainReport {
    pub epochs: Vec<EpochRow>,
    pub best_miou: f64,
    pub best_epoch: usize,
    /// Checkpoint of the best-validation-mIoU epoch.
    pub checkpoint: PathBuf,
    /// Checkpoint of the final parameter state.
    pub final_checkpoint: PathBuf,
    pub log_csv: PathBuf,
}

/// Train per the configuration, dispatching on the configured precision.
pub fn train(config: &RunConfig) -> Result<TrainReport> {
    config.validate()?;
    match config.run.precision {
        Precision::F32 => train_impl::<f32>(config),
        Precision::F64 => train_impl::<f64>(config),
    }
}

fn build_or_load_bank(config: &RunConfig, train_scenes: &SceneSet) -> Result<Vec<InstanceRecord>> {
    if let Some(dir) = &config.cutmix.bank_dir {
        if dir.join("manifest.csv").is_file() {
            return augment::load_bank(dir);
        }
    }
    let cfg = config.cutmix_config();
    let mut bank = Vec::new();
    for i in 0..train_scenes.len() {
        let (id, scene) = train_scenes.load(i)?;
        bank.extend(augment::extract_instances(&scene, &cfg, &id)?);
    }
    if bank.is_empty() {
        return Err(Error::empty(
            "instance pasting is enabled but no instances were extracted",
        ));
    }
    if let Some(dir) = &config.cutmix.bank_dir {
        augment::save_bank(dir, &bank)?;
    }
    Ok(bank)
}

fn train_impl<R: Real>(config: &RunConfig) -> Result<TrainReport> {
    std::fs::create_dir_all(&config.run.out_dir)
        .map_err(|e| Error::io(&config.run.out_dir, e))?;
    let netcfg = config.network_config()?;
    let loss_cfg = config.loss_config();
    let cutmix_cfg = config.cutmix_config();
    let train_scenes = scene_set(config, false)?;
    let val_scenes = scene_set(config, true)?;
    if train_scenes.is_empty() {
        return Err(Error::empty("training scene set"));
    }
    let bank = if config.cutmix.enabled {
        build_or_load_bank(config, &train_scenes)?
    } else {
        Vec::new()
    };

    let mut params = network::init_params::<R>(&netcfg, config.run.seed)?;
    let mut optimizer = AdamW::new(&params, config.optimizer)?;
    let steps_per_epoch = train_scenes.len().div_ceil(config.optimizer.batch_size);
    let mut global_step = 0u64;

    let log_csv = config.run.out_dir.join("train_log.csv");
    let checkpoint_path = config.run.out_dir.join("best.ckpt");
    let mut log = std::fs::File::create(&log_csv).map_err(|e| Error::io(&log_csv, e))?;
    writeln!(log, "epoch,mean_loss,lr,val_miou").map_err(|e| Error::io(&log_csv, e))?;

    let mut epochs = Vec::new();
    let mut best_miou = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(config.run.seed.wrapping_mul(0x9e37_79b9));
    for epoch in 0..config.optimizer.total_epochs {
        let mut order: Vec<usize> = (0..train_scenes.len()).collect();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        let mut lr = 0.0;
        for batch in order.chunks(config.optimizer.batch_size) {
            let mut ids = Vec::new();
            let mut clouds = Vec::new();
            for &index in batch {
                let (id, scene) = train_scenes.load(index)?;
                let mut scene = if config.augment.enabled {
                    augment::global_augment(&scene, &mut rng, &config.global_augment_config())
                } else {
                    scene
                };
                if config.cutmix.enabled && !bank.is_empty() {
                    scene = augment::paste_instances(&scene, &bank, &cutmix_cfg, &mut rng)?.cloud;
                }
                ids.push(id);
                clouds.push(scene);
            }
            lr = lr_at(global_step, steps_per_epoch, &config.optimizer);
            let loss = train_step(
                &clouds,
                &ids,
                &mut params,
                &mut optimizer,
                config,
                &netcfg,
                &loss_cfg,
                lr,
            )?;
            losses.push(loss);
            global_step += 1;
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;

        let (cm, _) = evaluate_scenes::<R>(&val_scenes, &mut params, config, &netcfg, None)?;
        let val_miou = cm.miou()?.mean;
        if val_miou > best_miou {
            best_miou = val_miou;
            best_epoch = epoch;
            checkpoint::save_checkpoint(&checkpoint_path, &params)?;
        }
        writeln!(log, "{epoch},{mean_loss},{lr},{val_miou}").map_err(|e| Error::io(&log_csv, e))?;
        log::info!("epoch {epoch}: loss {mean_loss:.4} lr {lr:.6} val mIoU {val_miou:.4}");
        epochs.push(EpochRow {
            epoch,
            mean_loss,
            lr,
            val_miou,
        });
    }
    let final_checkpoint = config.run.out_dir.join("last.ckpt");
    checkpoint::save_checkpoint(&final_checkpoint, &params)?;
    Ok(TrainReport {
        epochs,
        best_miou,
        best_epoch,
        checkpoint: checkpoint_path,
        final_checkpoint,
        log_csv,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step<R: Real>(
    clouds: &[PointCloud],
    ids: &[String],
    params: &mut NetworkParams<R>,
    optimizer: &mut AdamW<R>,
    config: &RunConfig,
    netcfg: &NetworkConfig,
    loss_cfg: &LossConfig,
    lr: f64,
) -> Result<f64> {
    let mut inputs = Vec::with_capacity(clouds.len());
    let mut labels: Vec<Vec<u32>> = Vec::with_capacity(clouds.len());
    for (cloud, id) in clouds.iter().zip(ids) {
        let (processed, input) = preprocess::<R>(cloud, &config.preprocess, netcfg)
            .map_err(|e| Error::arg(format!("scene {id}: {e}")))?;
        labels.push(
            processed
                .labels
                .ok_or_else(|| Error::arg(format!("scene {id} has no labels")))?,
        );
        inputs.push(input);
    }

    let loss_value = if config.train.grad_accumulation {
        // Per-cloud statistics: average the per-cloud gradients.
        let mut grad_sum: HashMap<String, Tensor<R>> = HashMap::new();
        let mut total = 0.0;
        for (b, input) in inputs.iter().enumerate() {
            let pass = forward_batch(std::slice::from_ref(input), params, netcfg, Mode::Train)?;
            let mut tape = pass.tape;
            let loss = loss::tape_total_loss(&mut tape, pass.logits[0], &labels[b], loss_cfg)?;
            let value = tape.value(loss).item().to_f64_c();
            if !value.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss {value} on scene {}",
                    ids[b]
                )));
            }
            total += value;
            let grads = tape.backward(loss)?;
            for (name, var) in tape.params() {
                if let Some(g) = grads.get(*var) {
                    grad_sum
                        .entry(name.clone())
                        .and_modify(|acc| {
                            for (a, d) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += *d;
                            }
                        })
                        .or_insert_with(|| g.clone());
                }
            }
        }
        let inv = R::from_f64_c(1.0 / inputs.len() as f64);
        for g in grad_sum.values_mut() {
            for v in g.data_mut() {
                *v *= inv;
            }
        }
        optimizer.step(params, &grad_sum, lr)?;
        total / inputs.len() as f64
    } else {
        // Joint batch: one tape, batch-norm over the concatenated points,
        // loss over the concatenated logits.
        let pass = forward_batch(&inputs, params, netcfg, Mode::Train)?;
        let mut tape = pass.tape;
        let logits = tape.concat_rows(&pass.logits)?;
        let flat_labels: Vec<u32> = labels.concat();
        let loss = loss::tape_total_loss(&mut tape, logits, &flat_labels, loss_cfg)?;
        let value = tape.value(loss).item().to_f64_c();
        if !value.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss {value} on batch {ids:?}"
            )));
        }
        let grads = tape.backward(loss)?;
        let mut named: HashMap<String, Tensor<R>> = HashMap::new();
        for (name, var) in tape.params() {
            if let Some(g) = grads.get(*var) {
                named.insert(name.clone(), g.clone());
            }
        }
        optimizer.step(params, &named, lr)?;
        value
    };
    Ok(loss_value)
}

/// Evaluate scenes: forward in eval mode, argmax, propagate predictions
/// back to every original point, and score against the full-cloud labels.
/// Optionally writes one prediction label file per scene.
pub fn evaluate_scenes<R: Real>(
    scenes: &SceneSet,
    params: &mut NetworkParams<R>,
    config: &RunConfig,
    netcfg: &NetworkConfig,
    write_labels: Option<&Path>,
) -> Result<(ConfusionMatrix, Vec<(String, usize)>)> {
    let class_map = config.class_map()?;
    let mut cm = ConfusionMatrix::new(netcfg.num_classes, class_map.ignore_index);
    let mut sizes = Vec::new();
    if let Some(dir) = write_labels {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for i in 0..scenes.len() {
        let (id, full) = scenes.load(i)?;
        let (processed, input) = preprocess::<R>(&full, &config.preprocess, netcfg)?;
        let _ = processed;
        let logits = network::forward(&input, params, netcfg, Mode::Eval)?;
        let preds = network::argmax_rows(&logits);
        let (proc_cloud, _) = cloud::voxel_downsample(&full, config.preprocess.voxel_resolution)?;
        let (proc_cloud, _) = cloud::crop(&proc_cloud, &config.preprocess.crop)?;
        let full_preds = cloud::propagate_labels(&full, &proc_cloud, &preds)?;
        if let Some(labels) = &full.labels {
            cm.update(&full_preds, labels)?;
        }
        if let Some(dir) = write_labels {
            let name = id.replace('/', "_");
            dataio::write_predictions(&dir.join(format!("{name}.label")), &full_preds, &class_map)?;
        }
        sizes.push((id, full_preds.len()));
    }
    Ok((cm, sizes))
}

/// Evaluation outcome.
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub iou: IouReport,
    /// Scene id and emitted prediction count (equals the raw point count).
    pub scenes: Vec<(String, usize)>,
}

/// Evaluate a checkpoint on the validation scenes.
pub fn evaluate_checkpoint(
    config: &RunConfig,
    checkpoint_path: &Path,
    write_labels: Option<&Path>,
) -> Result<EvalReport> {
    config.validate()?;
    let netcfg = config.network_config()?;
    match config.run.precision {
        Precision::F32 => {
            let mut params = network::init_params::<f32>(&netcfg, 0)?;
            checkpoint::load_checkpoint(checkpoint_path, &mut params)?;
            let scenes = scene_set(config, true)?;
            let (cm, sizes) = evaluate_scenes(&scenes, &mut params, config, &netcfg, write_labels)?;
            Ok(EvalReport {
                iou: cm.miou()?,
                confusion: cm,
                scenes: sizes,
            })
        }
        Precision::F64 => {
            let mut params = network::init_params::<f64>(&netcfg, 0)?;
            checkpoint::load_checkpoint(checkpoint_path, &mut params)?;
            let scenes = scene_set(config, true)?;
            let (cm, sizes) = evaluate_scenes(&scenes, &mut params, config, &netcfg, write_labels)?;
            Ok(EvalReport {
                iou: cm.miou()?,
                confusion: cm,
                scenes: sizes,
            })
        }
    }
}
