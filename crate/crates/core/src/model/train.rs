use ndarray::Array2;
use rayon::prelude::*;

use super::tape::{c, Gradients, Scalar, Tape};
use super::{patchify, Model, ModelError, OptimState};
use crate::masking::PatchMask;
use crate::scan::Raster;
use crate::seed::{derive_seed, rng_from};

/// What one example is trained against.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Reconstruct the masked patches.
    Mae(PatchMask),
    /// Sequence classification label.
    Class(usize),
    /// Sequence regression value.
    Value(f64),
    /// Per-patch answer labels.
    Patches(PatchMask),
}

#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub image: &'a Raster,
    pub target: &'a Target,
}

/// Loss and parameter gradients of one example. `dropout_seed` drives
/// dropout when the model has any.
pub fn loss_and_grads<T: Scalar>(
    model: &Model<T>,
    ex: Example<'_>,
    dropout_seed: Option<u64>,
) -> Result<(T, Gradients<T>), ModelError> {
    model.check_image(ex.image)?;
    let patches: Array2<T> = patchify(ex.image, model.grid())?;
    let mut t = Tape::new(&model.params.tensors);
    let mut rng = dropout_seed.filter(|_| model.cfg.dropout > 0.0).map(rng_from);
    let loss = match ex.target {
        Target::Mae(mask) => model.mae_graph(&mut t, &patches, mask, rng.as_mut())?.1,
        Target::Class(label) => {
            let k = model.cfg.seq_head.ok_or(ModelError::HeadMissing("sequence"))?;
            if *label >= k || k < 2 {
                return Err(ModelError::Label {
                    label: *label,
                    classes: k,
                });
            }
            let logits = model.seq_graph(&mut t, &patches, rng.as_mut())?;
            t.softmax_xent(logits, *label)
        }
        Target::Value(v) => {
            let out = model.seq_graph(&mut t, &patches, rng.as_mut())?;
            t.mse(out, Array2::from_elem((1, 1), c(*v)))
        }
        Target::Patches(mask) => {
            if mask.grid() != model.grid() {
                return Err(ModelError::MaskGrid {
                    got: mask.grid(),
                    want: model.grid(),
                });
            }
            let logits = model.patch_graph(&mut t, &patches, rng.as_mut())?;
            let target = Array2::from_shape_fn((mask.bits().len(), 1), |(i, _)| {
                if mask.bits()[i] {
                    T::one()
                } else {
                    T::zero()
                }
            });
            t.bce_with_logits(logits, target)
        }
    };
    let value = t.scalar(loss);
    Ok((value, t.backward(loss, T::one())))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub lr: f64,
}

/// One optimizer step on the mean loss of `batch`. Examples are processed
/// in parallel; gradients are summed in batch order so the result does not
/// depend on thread scheduling.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    optim: &mut OptimState<T>,
    batch: &[Example<'_>],
    batch_id: u64,
    seed: u64,
) -> Result<StepStats, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let m: &Model<T> = model;
    let results: Vec<Result<(T, Gradients<T>), ModelError>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let s = derive_seed(seed, "dropout", batch_id.wrapping_mul(1 << 20) + i as u64);
            loss_and_grads(m, *ex, Some(s))
        })
        .collect();
    let mut total = Gradients::zeros_like(model.params.len());
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l.to_f64().unwrap_or(f64::NAN);
        total.accumulate(&g);
    }
    let n = batch.len() as f64;
    loss /= n;
    if !loss.is_finite() || !total.all_finite() {
        return Err(ModelError::NonFiniteLoss { batch: batch_id });
    }
    total.scale(c(1.0 / n));
    let lr = optim.apply(&mut model.params, &total);
    Ok(StepStats { loss, lr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{sample_span_mask, SpanMaskConfig};
    use crate::model::{AdamW, ModelConfig, Schedule};

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let cfg = ModelConfig {
            image_h: 32,
            image_w: 32,
            width: 32,
            dec_width: 32,
            norm_pix: false,
            ..ModelConfig::default()
        };
        let mut img = Raster::filled(32, 32, 1, 1.0);
        for x in 4..28 {
            img.set(10, x, 0, 0.0);
            img.set(22, x, 0, 0.0);
        }
        let mask = sample_span_mask(
            cfg.grid(),
            &SpanMaskConfig {
                ratio: 0.25,
                width: (1, 1),
                height: (1, 1),
                trim: true,
            },
            &mut rng_from(1),
        );
        let target = Target::Mae(mask);
        let run = || {
            let mut m = Model::<f32>::new(cfg.clone(), 5).unwrap();
            let sched = Schedule {
                peak_lr: 3e-3,
                min_lr: 1e-4,
                warmup: 5,
                total_steps: 60,
            };
            let mut o = OptimState::new(&m.params, AdamW::default(), sched);
            let batch = [Example {
                image: &img,
                target: &target,
            }];
            (0..60)
                .map(|s| train_step(&mut m, &mut o, &batch, s, 9).unwrap().loss)
                .collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a[59] < 0.2 * a[0], "{} -> {}", a[0], a[59]);
    }

    #[test]
    fn bad_label_and_empty_batch() {
        let cfg = ModelConfig {
            image_h: 16,
            image_w: 16,
            seq_head: Some(2),
            ..ModelConfig::default()
        };
        let mut m = Model::<f32>::new(cfg, 1).unwrap();
        let img = Raster::filled(16, 16, 1, 1.0);
        let t = Target::Class(2);
        let err = loss_and_grads(
            &m,
            Example {
                image: &img,
                target: &t,
            },
            None,
        )
        .unwrap_err();
        assert_eq!(err, ModelError::Label { label: 2, classes: 2 });
        let mut o = OptimState::new(&m.params, AdamW::default(), Schedule::default());
        assert_eq!(
            train_step(&mut m, &mut o, &[], 0, 0).unwrap_err(),
            ModelError::EmptyBatch
        );
    }
}
