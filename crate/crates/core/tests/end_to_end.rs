//! Public-API paths through data, training, rendering and evaluation.

use unveil_core::data::synth::{synthesize, DarkenMode, SyntheticSceneSpec};
use unveil_core::data::{load_dataset, quantize, write_dataset, write_image, Split};
use unveil_core::eval::{evaluate, PSNR_CAP};
use unveil_core::render::render_image;
use unveil_core::{
    load_checkpoint, save_checkpoint, FieldConfig, LossWeights, RenderMode, TrainConfig, TrainView,
    Trainer, View,
};

fn small_scene() -> SyntheticSceneSpec {
    let mut spec = SyntheticSceneSpec::random(2, 5);
    spec.width = 12;
    spec.height = 12;
    spec.n_cameras = 6;
    spec.gt_samples = 48;
    spec.train_samples = 12;
    spec
}

fn small_field() -> FieldConfig {
    FieldConfig {
        pos_enc_levels: 4,
        dir_enc_levels: 2,
        trunk_layers: 2,
        trunk_width: 24,
        conv_kernel: 3,
        n_samples: 12,
        learnable_kernel: true,
    }
}

#[test]
fn dataset_round_trip_keeps_quantized_pixels_and_poses() {
    let out = synthesize(
        &small_scene(),
        DarkenMode::FieldConceal {
            omega: 0.88,
            theta: 1.0,
        },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &out.lowlight).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), out.lowlight.len());
    for a in &out.lowlight {
        let b = back.iter().find(|b| b.name == a.name).unwrap();
        assert_eq!(a.split, b.split);
        assert_eq!(quantize(&a.image).data, b.image.data);
        assert_eq!(a.camera.width, b.camera.width);
        assert!((a.camera.focal - b.camera.focal).abs() < 1e-9);
        for (ra, rb) in a.camera.pose.iter().zip(&b.camera.pose) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn training_fits_a_single_view_and_resumes_from_disk() {
    let out = synthesize(
        &small_scene(),
        DarkenMode::FieldConceal {
            omega: 0.88,
            theta: 1.0,
        },
    )
    .unwrap();
    let posed = out.normal.iter().find(|p| p.split == Split::Train).unwrap();
    let view = View {
        camera: posed.camera,
        range: posed.range,
    };
    let views = vec![TrainView {
        view,
        image: posed.image.data.clone(),
    }];
    let field = small_field();
    let train = TrainConfig {
        iters: 150,
        patch_w: 12,
        patch_h: 12,
        lr0: 5e-3,
        lr_min: 5e-3,
        weights: LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..LossWeights::default()
        },
        conceal_frozen: true,
        checkpoint_every: 0,
        seed: 4,
        ..TrainConfig::default()
    };

    let mse = |t: &Trainer| {
        let r = render_image(&t.params, &t.field_cfg, &view, RenderMode::Normal).unwrap();
        r.rgb
            .iter()
            .zip(&posed.image.data)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / r.rgb.len() as f64
    };

    let mut trainer = Trainer::new(field, train).unwrap();
    let before = mse(&trainer);
    for _ in 0..75 {
        trainer.step(&views).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    save_checkpoint(&path, &trainer.checkpoint()).unwrap();
    let mut straight = trainer.clone();
    let mut resumed = Trainer::from_checkpoint(load_checkpoint(&path).unwrap()).unwrap();
    while !straight.done() {
        let a = straight.step(&views).unwrap();
        let b = resumed.step(&views).unwrap();
        assert_eq!(a, b);
    }
    assert!(resumed.done());
    assert_eq!(straight.params, resumed.params);
    let after = mse(&straight);
    assert!(after < 0.5 * before, "mse {before} -> {after}");
}

#[test]
fn evaluating_ground_truth_against_itself_is_perfect() {
    let out = synthesize(
        &small_scene(),
        DarkenMode::ImageGamma {
            gain: 0.5,
            gamma: 2.0,
        },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    for p in &out.normal {
        write_image(&dir.path().join(format!("{}.png", p.name)), &p.image).unwrap();
    }
    let report = evaluate(dir.path(), dir.path(), "self").unwrap();
    assert_eq!(report.rows.len(), out.normal.len());
    assert!((report.mean_ssim - 1.0).abs() < 1e-9);
    assert_eq!(report.mean_psnr, PSNR_CAP);
}
