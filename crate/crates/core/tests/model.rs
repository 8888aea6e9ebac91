use pixeldoc_core::masking::{sample_span_mask, PatchMask, SpanMaskConfig};
use pixeldoc_core::model::{
    fingerprint, from_bytes, to_bytes, train_step, AdamW, Example, Model, ModelConfig, OptimState, Schedule, Target,
};
use pixeldoc_core::render::{render_block, FontRegistry, FontSpec, RasterBackend};
use pixeldoc_core::scan::{Raster, ScanMeta};
use pixeldoc_core::seed::rng_from;

fn tiny() -> ModelConfig {
    ModelConfig {
        image_h: 32,
        image_w: 32,
        width: 32,
        dec_width: 32,
        heads: 2,
        norm_pix: false,
        ..ModelConfig::default()
    }
}

fn text_image() -> Raster {
    let fonts = FontRegistry::builtin();
    let plan = render_block("the old ship", FontSpec::new(0, 12), (32, 32), &fonts, 1).unwrap();
    plan.to_scan(RasterBackend::Bitmap, &fonts, ScanMeta::default())
        .unwrap()
        .0
        .pixels()
        .clone()
}

fn train(model: &mut Model<f32>, img: &Raster, mask: &PatchMask, steps: u64) -> Vec<f64> {
    let sched = Schedule {
        peak_lr: 3e-3,
        min_lr: 1e-5,
        warmup: 20,
        total_steps: steps,
    };
    let mut opt = OptimState::new(&model.params, AdamW::default(), sched);
    let target = Target::Mae(mask.clone());
    (0..steps)
        .map(|s| {
            let batch = [Example {
                image: img,
                target: &target,
            }];
            train_step(model, &mut opt, &batch, s, 0).unwrap().loss
        })
        .collect()
}

#[test]
fn tiny_model_overfits_one_image() {
    let img = text_image();
    let mut model = Model::<f32>::new(tiny(), 1).unwrap();
    let mask = PatchMask::from_cells(model.grid(), &[(0, 1), (1, 0)]);
    let losses = train(&mut model, &img, &mask, 500);
    let end = f64::from(model.forward_mae(&img, &mask).unwrap().loss);
    assert!(end < 1e-2, "loss {} -> {end}", losses[0]);
}

#[test]
fn training_is_deterministic() {
    let img = text_image();
    let mask = PatchMask::from_cells(tiny().grid(), &[(0, 0)]);
    let run = || {
        let mut m = Model::<f32>::new(tiny(), 7).unwrap();
        train(&mut m, &img, &mask, 5);
        to_bytes(&m)
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoints_round_trip() {
    let m = Model::<f32>::new(
        ModelConfig {
            seq_head: Some(2),
            patch_head: true,
            ..tiny()
        },
        3,
    )
    .unwrap();
    let bytes = to_bytes(&m);
    let back: Model<f32> = from_bytes(&bytes).unwrap();
    assert_eq!(fingerprint(&back), fingerprint(&m));
    assert_eq!(to_bytes(&back), bytes);
    assert!(from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
    let other = Model::<f32>::new(tiny(), 4).unwrap();
    assert_ne!(fingerprint(&other), fingerprint(&m));
}

#[test]
fn reconstruction_keeps_the_image_shape() {
    let m = Model::<f32>::new(ModelConfig::default(), 5).unwrap();
    let img = Raster::filled(64, 64, 1, 1.0);
    let mask = sample_span_mask(m.grid(), &SpanMaskConfig::default(), &mut rng_from(5));
    let out = m.forward_mae(&img, &mask).unwrap();
    assert_eq!((out.reconstruction.height(), out.reconstruction.width()), (64, 64));
    assert!(out.loss.is_finite());
}
