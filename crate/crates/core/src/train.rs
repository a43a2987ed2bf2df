//! SGD training with a cosine learning-rate schedule, dataset assembly from
//! generated scenes, and checkpoint persistence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{load_annotations, ntf_read, ntf_read_raw, ntf_write, ntf_write_raw};
use crate::error::{Error, Result};
use crate::head::{assign_targets, decode_anchors, enumerate_anchors, total_loss, GtBox};
use crate::model::Detector;
use crate::nn::ParamSet;
use crate::tensor::{concat, Mode, Scalar, Tape, Tensor};

/// Cosine decay from `lr0` at step 0 to `lr_final` at step `total`, exact at
/// both endpoints; steps past `total` clamp to `lr_final`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_final: f64) -> f64 {
    assert!(total >= 1, "schedule length must be >= 1");
    if step == 0 {
        return lr0;
    }
    if step >= total {
        return lr_final;
    }
    let t = step as f64 / total as f64;
    lr_final + 0.5 * (lr0 - lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One training example: image `(1,1,H,W)` plus its ground-truth boxes.
pub struct Sample<T: Scalar> {
    pub image: Tensor<T>,
    pub gts: Vec<GtBox>,
    pub name: String,
}

pub struct Dataset<T: Scalar> {
    pub samples: Vec<Sample<T>>,
    pub image_hw: (usize, usize),
    /// Boxes clamped to image bounds while loading.
    pub clamp_warnings: usize,
}

impl<T: Scalar> Dataset<T> {
    /// Loads `annotations.jsonl` plus the NTF images it references,
    /// clamping out-of-bounds boxes.
    pub fn load(dir: &Path) -> Result<Self> {
        let ann_path = dir.join("annotations.jsonl");
        let records = load_annotations(&ann_path)?;
        if records.is_empty() {
            return Err(Error::contract(format!(
                "no annotation records in {}",
                ann_path.display()
            )));
        }
        let mut samples = Vec::with_capacity(records.len());
        let mut hw: Option<(usize, usize)> = None;
        let mut clamp_warnings = 0usize;
        for rec in records {
            let image = ntf_read::<T>(&dir.join(&rec.image))?;
            let s = image.shape();
            let this_hw = (s.h(), s.w());
            match hw {
                None => hw = Some(this_hw),
                Some(prev) if prev != this_hw => {
                    return Err(Error::contract(format!(
                        "mixed image sizes in dataset: {prev:?} vs {this_hw:?}"
                    )));
                }
                _ => {}
            }
            let (ih, iw) = (this_hw.0 as f64, this_hw.1 as f64);
            let mut gts = Vec::with_capacity(rec.boxes.len());
            for b in &rec.boxes {
                let clamped = GtBox {
                    x1: b.x1.clamp(0.0, iw),
                    y1: b.y1.clamp(0.0, ih),
                    x2: b.x2.clamp(0.0, iw),
                    y2: b.y2.clamp(0.0, ih),
                    cls: b.cls,
                };
                if clamped.x1 != b.x1 || clamped.y1 != b.y1 || clamped.x2 != b.x2
                    || clamped.y2 != b.y2
                {
                    clamp_warnings += 1;
                }
                gts.push(clamped);
            }
            samples.push(Sample { image, gts, name: rec.image });
        }
        Ok(Dataset { samples, image_hw: hw.expect("non-empty"), clamp_warnings })
    }
}

/// SGD with momentum; weight decay applies to convolution weights only
/// (names ending in `.weight`), not biases or batch-norm affine parameters.
pub struct Sgd<T: Scalar> {
    velocity: BTreeMap<String, Vec<T>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { velocity: BTreeMap::new(), momentum, weight_decay }
    }

    pub fn step(&mut self, params: &ParamSet<T>, lr: f64) {
        let mu = T::fl(self.momentum);
        let lr_t = T::fl(lr);
        for (name, tensor) in params.params() {
            let Some(grad) = tensor.take_grad() else { continue };
            let wd = if name.ends_with(".weight") { T::fl(self.weight_decay) } else { T::zero() };
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); grad.len()]);
            tensor.update_data(|data| {
                for i in 0..data.len() {
                    let g = grad[i] + wd * data[i];
                    vel[i] = mu * vel[i] + g;
                    data[i] = data[i] - lr_t * vel[i];
                }
            });
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainResult {
    pub loss_history: Vec<f64>,
    pub steps: usize,
}

/// Runs the training schedule: each epoch processes the dataset in fixed
/// batch order; the learning rate follows `cosine_lr` over all steps.
pub fn train_loop<T: Scalar>(
    model: &Detector<T>,
    params: &ParamSet<T>,
    dataset: &Dataset<T>,
    cfg: &ModelConfig,
) -> Result<TrainResult> {
    let batch = cfg.train.batch.min(dataset.samples.len()).max(1);
    let steps_per_epoch = dataset.samples.len().div_ceil(batch);
    let total_steps = cfg.train.epochs * steps_per_epoch;
    let mut sgd = Sgd::new(cfg.train.momentum, cfg.train.weight_decay);
    let mut history = Vec::with_capacity(total_steps);
    let mut cursor = 0usize;
    for step in 0..total_steps {
        let mut images = Vec::with_capacity(batch);
        let mut gts: Vec<&[GtBox]> = Vec::with_capacity(batch);
        for _ in 0..batch {
            let s = &dataset.samples[cursor];
            images.push(&s.image);
            gts.push(&s.gts);
            cursor = (cursor + 1) % dataset.samples.len();
        }
        let batch_images = concat(&images, 0)?;

        let tape = Tape::<T>::new();
        let out = model.forward(&batch_images, Mode::TRAIN)?;
        let reg_max = out.reg_max;
        let anchors = enumerate_anchors(&out);
        let assignments: Vec<_> = (0..batch)
            .map(|img| {
                let decoded = decode_anchors(&out, img);
                assign_targets(&anchors, gts[img], &decoded, reg_max)
            })
            .collect();
        let loss = total_loss(&out, &assignments, &cfg.loss)?;
        let loss_value = loss.scalar_value().f64();
        if !loss_value.is_finite() {
            return Err(Error::contract(format!(
                "non-finite loss {loss_value} at step {step}"
            )));
        }
        tape.backward(&loss)?;
        drop(tape);
        let mut lr = cosine_lr(step, total_steps, cfg.train.lr0, cfg.train.lr_final);
        if step < cfg.train.warmup_steps {
            lr *= (step + 1) as f64 / cfg.train.warmup_steps as f64;
        }
        sgd.step(params, lr);
        params.zero_grads();
        history.push(loss_value);
    }
    Ok(TrainResult { loss_history: history, steps: total_steps })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    steps: usize,
    loss_history: Vec<f64>,
    params: Vec<String>,
    buffers: Vec<String>,
}

/// Saves config, step count, loss history, and every parameter/buffer as an
/// NTF file under `dir/params` and `dir/buffers`.
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    cfg: &ModelConfig,
    params: &ParamSet<T>,
    result: &TrainResult,
) -> Result<()> {
    let params_dir = dir.join("params");
    let buffers_dir = dir.join("buffers");
    std::fs::create_dir_all(&params_dir)
        .map_err(|e| Error::io(params_dir.display().to_string(), e))?;
    std::fs::create_dir_all(&buffers_dir)
        .map_err(|e| Error::io(buffers_dir.display().to_string(), e))?;
    let mut names = Vec::new();
    for (name, tensor) in params.params() {
        ntf_write(tensor, &params_dir.join(format!("{name}.ntf")))?;
        names.push(name.clone());
    }
    let mut buffer_names = Vec::new();
    for (name, buf) in params.buffers() {
        let values = buf.borrow();
        ntf_write_raw(&buffers_dir.join(format!("{name}.ntf")), &[values.len() as u64], &values)?;
        buffer_names.push(name.clone());
    }
    let manifest = Manifest {
        config: cfg.clone(),
        steps: result.steps,
        loss_history: result.loss_history.clone(),
        params: names,
        buffers: buffer_names,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serializable"))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub struct LoadedCheckpoint<T: Scalar> {
    pub cfg: ModelConfig,
    pub model: Detector<T>,
    pub params: ParamSet<T>,
    pub steps: usize,
    pub loss_history: Vec<f64>,
}

/// Rebuilds the model from the stored config and overwrites every parameter
/// and buffer from the NTF files. Manifest names must be bijective with the
/// rebuilt set.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<LoadedCheckpoint<T>> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::config(format!("manifest: {e}")))?;
    let (model, params) = Detector::<T>::build(&manifest.config, manifest.config.train.seed)?;

    let built: Vec<String> = params.params().map(|(n, _)| n.clone()).collect();
    if built != manifest.params {
        return Err(Error::contract(
            "checkpoint manifest parameter names do not match the model".to_string(),
        ));
    }
    for (name, tensor) in params.params() {
        let path = param_path(dir, "params", name);
        let loaded = ntf_read::<T>(&path)?;
        if loaded.shape() != tensor.shape() {
            return Err(Error::contract(format!(
                "checkpoint tensor {name} has shape {}, model expects {}",
                loaded.shape(),
                tensor.shape()
            )));
        }
        tensor.copy_from(&loaded.data());
    }
    for (name, buf) in params.buffers() {
        let (dims, data) = ntf_read_raw::<T>(&param_path(dir, "buffers", name))?;
        if dims.len() != 1 || dims[0] as usize != buf.borrow().len() {
            return Err(Error::contract(format!("checkpoint buffer {name} length mismatch")));
        }
        buf.borrow_mut().copy_from_slice(&data);
    }
    Ok(LoadedCheckpoint {
        cfg: manifest.config,
        model,
        params,
        steps: manifest.steps,
        loss_history: manifest.loss_history,
    })
}

fn param_path(dir: &Path, sub: &str, name: &str) -> PathBuf {
    dir.join(sub).join(format!("{name}.ntf"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_exact_and_monotone() {
        assert_eq!(cosine_lr(0, 200, 0.02, 0.0002), 0.02);
        assert_eq!(cosine_lr(200, 200, 0.02, 0.0002), 0.0002);
        assert_eq!(cosine_lr(500, 200, 0.02, 0.0002), 0.0002);
        let mid = cosine_lr(100, 200, 0.02, 0.0002);
        assert!((mid - 0.0101).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for t in 0..=200 {
            let lr = cosine_lr(t, 200, 0.02, 0.0002);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn sgd_applies_momentum_and_decay() {
        let mut set = ParamSet::<f64>::new();
        let mut pb = crate::nn::ParamBuilder::new(&mut set, 0);
        let w = pb.tensor("layer.weight", crate::tensor::Shape([1, 1, 1, 1]), vec![1.0]);
        let b = pb.tensor("layer.bias", crate::tensor::Shape([1, 1, 1, 1]), vec![1.0]);
        w.accumulate_grad(&[0.5]);
        b.accumulate_grad(&[0.5]);
        let mut sgd = Sgd::new(0.9, 0.1);
        sgd.step(&set, 0.1);
        // weight: g = 0.5 + 0.1*1.0 = 0.6 -> v = 0.6 -> w = 1 - 0.06
        assert!((w.data()[0] - 0.94).abs() < 1e-12);
        // bias: no decay -> g = 0.5 -> b = 1 - 0.05
        assert!((b.data()[0] - 0.95).abs() < 1e-12);
        // second step with zero grad: momentum keeps moving
        w.accumulate_grad(&[0.0]);
        sgd.step(&set, 0.1);
        // v = 0.9*0.6 + 0.1*0.94 = 0.634 -> w = 0.94 - 0.0634
        assert!((w.data()[0] - (0.94 - 0.0634)).abs() < 1e-12);
    }
}
