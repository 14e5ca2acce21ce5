//! Acceptance suite: one test per criterion, each printing a single
//! pass/fail line (run with `--nocapture` to see them).
//!
//! Expected values come from independent oracles computed inside this
//! file (brute-force grouping, exhaustive Jaccard enumeration, direct
//! per-class counting) or from hand-derived constants.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use planeseg::augment::{self, CutMixConfig, InstanceRecord};
use planeseg::autodiff::Mode;
use planeseg::cloud::{CropBounds, PointCloud};
use planeseg::config::RunConfig;
use planeseg::dataio;
use planeseg::loss::{lovasz_softmax, LossConfig};
use planeseg::metrics::ConfusionMatrix;
use planeseg::network::{self, NetworkConfig, NetworkInput};
use planeseg::optim::{lr_at, OptimizerConfig};
use planeseg::projection::{
    cartesian_bin, polar_bin, project, spherical_bin, unproject, PlaneKind, PlaneSetConfig,
    PolarGridConfig, RangeImageConfig,
};
use planeseg::tensor::Tensor;
use planeseg::train;

fn report(criterion: usize, name: &str, detail: &str) {
    println!("criterion {criterion:02} [PASS] {name} ({detail})");
}

fn kitti_planes() -> PlaneSetConfig {
    let bounds = CropBounds {
        x_min: -50.0,
        x_max: 50.0,
        y_min: -50.0,
        y_max: 50.0,
        z_min: -3.0,
        z_max: 2.0,
    };
    PlaneSetConfig::from_crop_bounds(&bounds, 0.4)
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> (PointCloud, Tensor<f64>) {
    let coords: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.gen_range(-49.0..49.0),
                rng.gen_range(-49.0..49.0),
                rng.gen_range(-2.9..1.9),
            ]
        })
        .collect();
    let cloud = PointCloud::new(coords, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect());
    let c = 4;
    let features = Tensor::new(
        &[n, c],
        (0..n * c).map(|_| rng.gen_range(-3.0..3.0)).collect(),
    );
    (cloud, features)
}

/// Independent oracle: bin every point with the per-point formulas, group
/// per cell, and average each group directly.
#[allow(clippy::needless_range_loop)]
fn oracle_grid(
    features: &Tensor<f64>,
    cloud: &PointCloud,
    kind: PlaneKind,
    cfg: &PlaneSetConfig,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let (h, w) = cfg.grid_shape(kind);
    let c = features.cols();
    let mut sums = vec![vec![0.0f64; c]; h * w];
    let mut counts = vec![0usize; h * w];
    for (i, p) in cloud.coords.iter().enumerate() {
        let (row, col) = match kind {
            PlaneKind::Xy => cartesian_bin(p, &cfg.xy).unwrap(),
            PlaneKind::Xz => cartesian_bin(p, &cfg.xz).unwrap(),
            PlaneKind::Yz => cartesian_bin(p, &cfg.yz).unwrap(),
            PlaneKind::PolarGrid => polar_bin(p, &cfg.polar),
            PlaneKind::RangeImage => {
                let (u, v) = spherical_bin(p, &cfg.range_image).unwrap();
                (v, u)
            }
        };
        let cell = row * w + col;
        counts[cell] += 1;
        for ch in 0..c {
            sums[cell][ch] += features.at2(i, ch);
        }
    }
    for (cell, row) in sums.iter_mut().enumerate() {
        if counts[cell] > 0 {
            for v in row.iter_mut() {
                *v /= counts[cell] as f64;
            }
        }
    }
    (sums, counts)
}

#[test]
#[allow(clippy::needless_range_loop)]
fn criterion_01_projection_oracle_equivalence() {
    let start = Instant::now();
    let cfg = kitti_planes();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut max_rel = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=500);
        let (cloud, features) = random_cloud(&mut rng, n);
        for kind in PlaneKind::ALL {
            let grid = project(&features, &cloud, kind, &cfg).unwrap();
            let (oracle, counts) = oracle_grid(&features, &cloud, kind, &cfg);
            let c = features.cols();
            for cell in 0..counts.len() {
                assert_eq!(grid.occupancy[cell] as usize, counts[cell], "{kind:?}");
                for ch in 0..c {
                    let a = grid.cells.data()[cell * c + ch];
                    let b = oracle[cell][ch];
                    let rel = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
                    max_rel = max_rel.max(rel);
                    assert!(rel < 1e-9, "{kind:?} cell {cell} channel {ch}: {a} vs {b}");
                }
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    report(
        1,
        "projection matches brute-force grouping oracle on 100 clouds x 5 planes",
        &format!("max rel {max_rel:.2e}, {:.1}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_02_roundtrip_and_mass_conservation() {
    let cfg = kitti_planes();
    let mut rng = ChaCha8Rng::seed_from_u64(202);

    // Exact round trip when every occupied cell holds exactly one point.
    let mut singleton_cases = 0;
    'outer: while singleton_cases < 20 {
        let (cloud, features) = random_cloud(&mut rng, 40);
        for kind in PlaneKind::ALL {
            let grid = project(&features, &cloud, kind, &cfg).unwrap();
            if grid.occupancy.iter().any(|&c| c > 1) {
                continue 'outer;
            }
            let back = unproject(&grid);
            assert_eq!(back, features, "{kind:?} round trip not exact");
        }
        singleton_cases += 1;
    }

    // Mass conservation: sum(cell mean * occupancy) equals column sums.
    let mut max_rel = 0.0f64;
    for _ in 0..20 {
        let (cloud, features) = random_cloud(&mut rng, 400);
        for kind in PlaneKind::ALL {
            let grid = project(&features, &cloud, kind, &cfg).unwrap();
            let c = features.cols();
            for ch in 0..c {
                let grid_total: f64 = (0..grid.occupancy.len())
                    .map(|cell| grid.cells.data()[cell * c + ch] * grid.occupancy[cell] as f64)
                    .sum();
                let direct: f64 = (0..cloud.len()).map(|i| features.at2(i, ch)).sum();
                let rel = (grid_total - direct).abs() / grid_total.abs().max(direct.abs()).max(1.0);
                max_rel = max_rel.max(rel);
                assert!(rel < 1e-9, "{kind:?} channel {ch}");
            }
        }
    }
    report(
        2,
        "unproject(project) exact on singleton cells; scatter-mean conserves mass",
        &format!("20 singleton clouds, 20 mass checks, max rel {max_rel:.2e}"),
    );
}

#[test]
fn criterion_03_binning_formulas() {
    let polar = PolarGridConfig {
        rho_min: 2.0,
        rho_max: 50.0,
        rings: 64,
        sectors: 512,
    };
    let (ring, _) = polar_bin(&[2.0, 0.0, 0.0], &polar);
    assert_eq!(ring, 0);
    let (ring, _) = polar_bin(&[50.0, 0.0, 0.0], &polar);
    assert_eq!(ring, 63);
    let (_, sector) = polar_bin(&[10.0, 0.0, 0.0], &polar);
    assert_eq!(sector, 255);

    let range = RangeImageConfig {
        height: 64,
        width: 2048,
        fov_up: 3.0_f64.to_radians(),
        fov_down: 25.0_f64.to_radians(),
    };
    let (u, v) = spherical_bin(&[10.0, 0.0, 0.0], &range).unwrap();
    assert_eq!(u, 1024, "straight ahead lands at W/2");
    assert_eq!(v, 6, "zero elevation lands on row 6");
    report(
        3,
        "polar and spherical binning reproduce hand-derived cells",
        "ring 0/63, sector 255, u 1024, v 6",
    );
}

#[test]
fn criterion_04_gradient_suite() {
    let start = Instant::now();
    let results = planeseg::gradcheck::full_suite(404).unwrap();
    let mut worst: f64 = 0.0;
    for r in &results {
        assert!(
            r.passed(),
            "{}: rel error {} exceeds {}",
            r.name,
            r.rel_error,
            r.tolerance
        );
        worst = worst.max(r.rel_error / r.tolerance);
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "took {elapsed:?}");
    report(
        4,
        "all autodiff ops and the end-to-end network pass finite-difference checks",
        &format!(
            "{} checks, worst at {:.1}% of tolerance, {:.1}s",
            results.len(),
            worst * 100.0,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_05_lovasz_binary_vertex_oracle() {
    let cfg = LossConfig {
        lambda: 1.0,
        ignore_index: 9,
    };
    let mut checked = 0usize;
    let mut max_err = 0.0f64;
    for n in 1..=6usize {
        for labeling in 0..(1u32 << n) {
            for prediction in 0..(1u32 << n) {
                let labels: Vec<u32> = (0..n).map(|i| (labeling >> i) & 1).collect();
                let preds: Vec<u32> = (0..n).map(|i| (prediction >> i) & 1).collect();
                let mut probs = Tensor::<f64>::zeros(&[n, 2]);
                for (i, &p) in preds.iter().enumerate() {
                    probs.row_mut(i)[p as usize] = 1.0;
                }
                let loss = lovasz_softmax(&probs, &labels, &cfg).unwrap();

                // Exhaustive complement-Jaccard oracle.
                let mut present: Vec<u32> = labels.clone();
                present.sort_unstable();
                present.dedup();
                let mut total = 0.0;
                for &c in &present {
                    let inter = (0..n).filter(|&i| labels[i] == c && preds[i] == c).count();
                    let union = (0..n).filter(|&i| labels[i] == c || preds[i] == c).count();
                    total += 1.0 - inter as f64 / union as f64;
                }
                let oracle = total / present.len() as f64;
                max_err = max_err.max((loss - oracle).abs());
                assert!(
                    (loss - oracle).abs() < 1e-12,
                    "labels {labels:?} preds {preds:?}: {loss} vs {oracle}"
                );
                checked += 1;
            }
        }
    }
    report(
        5,
        "Lovász-Softmax equals averaged complement Jaccard at all binary vertices",
        &format!("{checked} vertices, max err {max_err:.1e}"),
    );
}

#[test]
fn criterion_06_miou_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let num_classes = 5usize;
    let ignore = 0u32;
    let mut trials = 0;
    for _ in 0..10 {
        // 1,000 random prediction/label pairs per trial.
        let preds: Vec<u32> = (0..1000).map(|_| rng.gen_range(0..num_classes as u32)).collect();
        let labels: Vec<u32> = (0..1000).map(|_| rng.gen_range(0..num_classes as u32)).collect();
        let mut cm = ConfusionMatrix::new(num_classes, ignore);
        cm.update(&preds, &labels).unwrap();
        let got = cm.miou().unwrap();

        // Direct evaluation: count TP/FP/FN per class from the raw pairs.
        let mut sum = 0.0;
        let mut included = 0usize;
        let mut direct_per_class = vec![None; num_classes];
        for c in 1..num_classes as u32 {
            let tp = preds
                .iter()
                .zip(&labels)
                .filter(|&(&p, &y)| y != ignore && p == c && y == c)
                .count() as u64;
            let fp = preds
                .iter()
                .zip(&labels)
                .filter(|&(&p, &y)| y != ignore && p == c && y != c)
                .count() as u64;
            let fn_ = preds
                .iter()
                .zip(&labels)
                .filter(|&(&p, &y)| y != ignore && p != c && y == c)
                .count() as u64;
            if tp + fp + fn_ > 0 {
                let iou = tp as f64 / (tp + fp + fn_) as f64;
                direct_per_class[c as usize] = Some(iou);
                sum += iou;
                included += 1;
            }
        }
        let direct_mean = sum / included as f64;
        // Integer-derived arithmetic must agree exactly.
        assert_eq!(got.per_class, direct_per_class);
        assert_eq!(got.mean, direct_mean);
        trials += 1;
    }

    // Perfect predictions give exactly 1.0.
    let labels: Vec<u32> = (0..500).map(|i| 1 + (i % 4) as u32).collect();
    let mut cm = ConfusionMatrix::new(num_classes, ignore);
    cm.update(&labels, &labels).unwrap();
    assert_eq!(cm.miou().unwrap().mean, 1.0);
    report(
        6,
        "confusion-matrix mIoU equals direct per-class counting exactly",
        &format!("{trials} trials x 1000 pairs, plus the perfect case"),
    );
}

fn overfit_config(dir: &std::path::Path) -> RunConfig {
    let text = format!(
        r#"[run]
seed = 11
precision = "f32"
out_dir = "{}"

[data]
source = "synthetic"

[data.synthetic]
train_scenes = 1
val_scenes = 1
ground_points = 100
box_points = 50
cylinder_points = 50

[preprocess]
voxel_resolution = 0.1
crop = {{ x_min = -15.0, x_max = 15.0, y_min = -15.0, y_max = 15.0, z_min = -3.0, z_max = 3.0 }}
cell_size = 1.0

[grids.polar]
rho_min = 1.0
rho_max = 16.0
rings = 16
sectors = 32

[grids.range_image]
height = 16
width = 64
fov_up = 0.35
fov_down = 0.45

[network]
layers = 10
channels = 32
k_neighbors = 8
mlp_hidden = 64
conv_hidden = 32

[loss]
lambda = 1.0

[optimizer]
peak_lr = 0.002
final_lr = 1e-5
warmup_epochs = 18
total_epochs = 200
batch_size = 1
"#,
        dir.display()
    );
    RunConfig::parse(&text).unwrap()
}

#[test]
fn criterion_07_end_to_end_overfit() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = overfit_config(dir.path());
    config.validate().unwrap();

    // 1 scene, batch 1: 200 epochs = 200 optimizer steps with the paper's
    // warmup/cosine shape (4/45 of the steps warm up).
    let outcome = train::train(&config).unwrap();
    assert_eq!(outcome.epochs.len(), 200);
    let final_loss = outcome.epochs.last().unwrap().mean_loss;

    // Training-set mIoU with the final parameters.
    let netcfg = config.network_config().unwrap();
    let mut params = network::init_params::<f32>(&netcfg, 0).unwrap();
    planeseg::checkpoint::load_checkpoint(&outcome.final_checkpoint, &mut params).unwrap();
    let train_scenes = train::scene_set(&config, false).unwrap();
    let (cm, _) = train::evaluate_scenes(&train_scenes, &mut params, &config, &netcfg, None).unwrap();
    let miou = cm.miou().unwrap().mean;

    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 300.0,
        "overfit run took {elapsed:?}"
    );
    assert!(final_loss < 0.1, "final training loss {final_loss}");
    assert!(miou >= 0.95, "training mIoU {miou}");
    report(
        7,
        "200-step overfit reaches training mIoU >= 0.95 and loss < 0.1",
        &format!(
            "mIoU {miou:.4}, loss {final_loss:.4}, {:.0}s",
            elapsed.as_secs_f64()
        ),
    );
}

fn random_instance(rng: &mut ChaCha8Rng) -> InstanceRecord {
    let points = rng.gen_range(40..200);
    let height = rng.gen_range(0.5..2.0);
    let pts = (0..points)
        .map(|i| {
            let t = i as f64 / (points - 1) as f64;
            [
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
                t * height,
            ]
        })
        .collect();
    InstanceRecord {
        points: pts,
        remission: vec![0.5; points],
        class_id: 3,
        source_distance: rng.gen_range(8.0..25.0),
        source_id: "acceptance".into(),
    }
}

#[test]
fn criterion_08_cutmix_properties() {
    let cfg = CutMixConfig {
        rare_classes: vec![3],
        ground_classes: vec![1],
        ..CutMixConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(808);

    // Beam partition completeness on random instances.
    for _ in 0..10 {
        let inst = random_instance(&mut rng);
        let beams = augment::beam_quantize(&inst, rng.gen_range(5.0..30.0), &cfg).unwrap();
        let mut seen = vec![false; inst.len()];
        for (_, members) in &beams.groups {
            for &i in members {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "partition incomplete");
    }

    // Resampling monotone in target distance: 10 instances x 5 distances.
    for _ in 0..10 {
        let inst = random_instance(&mut rng);
        let mut distances: Vec<f64> = (0..5).map(|_| rng.gen_range(4.0..40.0)).collect();
        distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let counts: Vec<usize> = distances
            .iter()
            .map(|&d| augment::resample_instance(&inst, d, &cfg).unwrap().len())
            .collect();
        for w in counts.windows(2) {
            assert!(w[0] >= w[1], "counts {counts:?} at distances {distances:?}");
        }
        assert!(*counts.last().unwrap() > 0, "downsampling emptied the instance");
    }

    // Point count doubles exactly at the forced maximum rate of 2.
    for _ in 0..5 {
        let inst = random_instance(&mut rng);
        let out = augment::resample_instance(&inst, inst.source_distance / 4.0, &cfg).unwrap();
        assert_eq!(out.len(), 2 * inst.len());
    }

    // Pasting never moves or relabels pre-existing scene points.
    let spec = dataio::SynthSceneSpec {
        ground: Some(dataio::GroundSpec {
            points: 120,
            radius: 10.0,
            class_id: 1,
        }),
        boxes: vec![],
        cylinders: vec![dataio::CylinderSpec {
            points: 50,
            center: [4.0, 4.0],
            radius: 0.3,
            height: 1.6,
            class_id: 3,
        }],
    };
    let scene = dataio::synth_scene(&spec, 9).unwrap();
    let bank = augment::extract_instances(&scene, &cfg, "scene").unwrap();
    let result = augment::paste_instances(&scene, &bank, &cfg, &mut rng).unwrap();
    assert!(result.pasted > 0);
    assert_eq!(&result.cloud.coords[..scene.len()], &scene.coords[..]);
    assert_eq!(
        &result.cloud.labels.as_ref().unwrap()[..scene.len()],
        &scene.labels.as_ref().unwrap()[..]
    );
    assert_eq!(
        &result.cloud.remission[..scene.len()],
        &scene.remission[..]
    );
    report(
        8,
        "beam partition, resample monotonicity, rate-2 doubling, paste immutability",
        "all exact over seeded random instances",
    );
}

#[test]
fn criterion_09_permutation_equivariance() {
    let bounds = CropBounds {
        x_min: -12.0,
        x_max: 12.0,
        y_min: -12.0,
        y_max: 12.0,
        z_min: -3.0,
        z_max: 3.0,
    };
    let mut planes = PlaneSetConfig::from_crop_bounds(&bounds, 1.5);
    planes.polar = PolarGridConfig {
        rho_min: 0.5,
        rho_max: 18.0,
        rings: 8,
        sectors: 16,
    };
    planes.range_image = RangeImageConfig {
        height: 8,
        width: 32,
        fov_up: 0.4,
        fov_down: 0.6,
    };
    let cfg = NetworkConfig {
        layers: 5,
        channels: 16,
        k_neighbors: 8,
        num_classes: 4,
        mlp_hidden: 32,
        conv_hidden: 16,
        bn_momentum: 0.1,
        bn_eps: 1e-5,
        plane_order: PlaneKind::ALL,
        planes,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let cloud = PointCloud::new(
        (0..100)
            .map(|_| {
                [
                    rng.gen_range(-11.0..11.0),
                    rng.gen_range(-11.0..11.0),
                    rng.gen_range(-2.0..2.0),
                ]
            })
            .collect(),
        (0..100).map(|_| rng.gen_range(0.0..1.0)).collect(),
    );
    let mut params = network::init_params::<f32>(&cfg, 99).unwrap();
    let input = NetworkInput::<f32>::prepare(&cloud, &cfg).unwrap();
    let base = network::forward(&input, &mut params.clone(), &cfg, Mode::Eval).unwrap();

    let mut max_diff = 0.0f32;
    for _ in 0..20 {
        let mut order: Vec<usize> = (0..cloud.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let permuted = PointCloud::new(
            order.iter().map(|&i| cloud.coords[i]).collect(),
            order.iter().map(|&i| cloud.remission[i]).collect(),
        );
        let pinput = NetworkInput::<f32>::prepare(&permuted, &cfg).unwrap();
        let plogits = network::forward(&pinput, &mut params, &cfg, Mode::Eval).unwrap();
        for (new_i, &old_i) in order.iter().enumerate() {
            for c in 0..cfg.num_classes {
                let diff = (plogits.at2(new_i, c) - base.at2(old_i, c)).abs();
                max_diff = max_diff.max(diff);
                assert!(diff < 1e-5, "point {old_i} class {c}: diff {diff}");
            }
        }
    }
    report(
        9,
        "forward(permutation) equals permuted forward within 1e-5 (f32)",
        &format!("20 permutations of 100 points, max diff {max_diff:.2e}"),
    );
}

#[test]
fn criterion_10_format_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let map = dataio::ClassMap::new(&[(0, 0), (10, 1), (40, 2), (44, 3)], 0).unwrap();
    for trial in 0..50 {
        let n = rng.gen_range(1..300);
        // Random scan bytes built from finite f32 values.
        let mut scan_bytes = Vec::with_capacity(n * 16);
        for _ in 0..n * 4 {
            scan_bytes.extend_from_slice(&rng.gen_range(-100.0f32..100.0).to_le_bytes());
        }
        let scan_path = dir.path().join(format!("scan{trial}.bin"));
        std::fs::write(&scan_path, &scan_bytes).unwrap();
        let cloud = dataio::read_scan(&scan_path).unwrap();
        let back_path = dir.path().join(format!("scan{trial}_back.bin"));
        dataio::write_scan(&back_path, &cloud).unwrap();
        assert_eq!(
            std::fs::read(&back_path).unwrap(),
            scan_bytes,
            "scan bytes differ on trial {trial}"
        );

        // Random label files: known raw ids so the semantic round trip is
        // exact at the bit level too.
        let raws = [0u16, 10, 40, 44];
        let mut label_bytes = Vec::with_capacity(n * 4);
        for _ in 0..n {
            let raw = raws[rng.gen_range(0..raws.len())] as u32;
            let inst: u32 = rng.gen_range(0..8) << 16;
            label_bytes.extend_from_slice(&(inst | raw).to_le_bytes());
        }
        let label_path = dir.path().join(format!("labels{trial}.label"));
        std::fs::write(&label_path, &label_bytes).unwrap();
        let (semantic, _) = dataio::read_labels(&label_path, &map).unwrap();
        let pred_path = dir.path().join(format!("pred{trial}.label"));
        dataio::write_predictions(&pred_path, &semantic, &map).unwrap();
        let (semantic2, inst2) = dataio::read_labels(&pred_path, &map).unwrap();
        assert_eq!(semantic, semantic2, "semantics differ on trial {trial}");
        assert!(inst2.iter().all(|&i| i == 0));
    }

    // A 17-byte scan is rejected with a format error.
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, vec![0u8; 17]).unwrap();
    assert!(matches!(
        dataio::read_scan(&bad),
        Err(planeseg::Error::Format { .. })
    ));
    report(
        10,
        "scan/label write-read round trips are bit-identical; malformed sizes rejected",
        "50 random files each",
    );
}

#[test]
fn criterion_11_learning_rate_schedule() {
    let cfg = OptimizerConfig::default();
    let steps_per_epoch = 250;
    assert_eq!(lr_at(0, steps_per_epoch, &cfg), 0.0);
    let warmup_end = (cfg.warmup_epochs * steps_per_epoch) as u64;
    assert_eq!(lr_at(warmup_end, steps_per_epoch, &cfg), 0.002);
    let final_step = (cfg.total_epochs * steps_per_epoch) as u64;
    assert_eq!(lr_at(final_step, steps_per_epoch, &cfg), 1e-5);
    // Continuity at the warmup/cosine boundary.
    let before = lr_at(warmup_end - 1, steps_per_epoch, &cfg);
    let at = lr_at(warmup_end, steps_per_epoch, &cfg);
    let step_gap = cfg.peak_lr / warmup_end as f64;
    assert!((at - before - step_gap).abs() < 1e-9);
    let linear_extrapolated = cfg.peak_lr * warmup_end as f64 / warmup_end as f64;
    assert!((linear_extrapolated - at).abs() < 1e-9);
    report(
        11,
        "schedule hits 0 -> 0.002 -> 1e-5 with a continuous warmup/cosine joint",
        "exact endpoint values",
    );
}
