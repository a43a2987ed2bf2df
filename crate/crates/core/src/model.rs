//! Full detector assembly: backbone -> neck -> head.

use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::head::{Head, HeadOutput};
use crate::neck::Neck;
use crate::nn::{ParamBuilder, ParamSet};
use crate::tensor::{Mode, Scalar, Tensor};

pub struct Detector<T: Scalar> {
    pub cfg: ModelConfig,
    pub backbone: Backbone<T>,
    pub neck: Option<Neck<T>>,
    pub head: Head<T>,
}

impl<T: Scalar> Detector<T> {
    /// Builds a detector with seeded parameter init; all parameters and
    /// batch-norm buffers are registered in the returned set.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamSet<T>)> {
        cfg.validate()?;
        let mut set = ParamSet::new();
        let mut pb = ParamBuilder::new(&mut set, seed);
        let backbone = Backbone::new(&mut pb, "backbone", &cfg.backbone)?;
        let chans = cfg.backbone.level_channels();
        let dam = (cfg.backbone.dam_kernel, cfg.backbone.dam_reduction);
        let neck = if cfg.neck.enabled {
            Some(Neck::new(&mut pb, "neck", chans, &cfg.neck, dam)?)
        } else {
            None
        };
        let head = Head::new(&mut pb, "head", [chans[1], chans[2], chans[3]], &cfg.head)?;
        Ok((Detector { cfg: cfg.clone(), backbone, neck, head }, set))
    }

    /// Image batch `(N,1,H,W)` to raw head predictions.
    pub fn forward(&self, images: &Tensor<T>, mode: Mode) -> Result<HeadOutput<T>> {
        let pyramid = self.backbone.forward(images, mode)?;
        let neck_out = match &self.neck {
            Some(neck) => neck.forward(&pyramid, mode)?,
            None => Neck::passthrough(&pyramid)?,
        };
        self.head.forward(&neck_out, mode)
    }
}

/// Trainable parameter count as a pure function of the configuration.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    let (_, set) = Detector::<f32>::build(cfg, 0)?;
    Ok(set.param_count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::DamMode;
    use crate::tensor::Shape;

    #[test]
    fn forward_end_to_end_shapes() {
        let cfg = ModelConfig::default();
        let (model, _set) = Detector::<f32>::build(&cfg, 7).unwrap();
        let img = Tensor::<f32>::full(Shape([2, 1, 64, 64]), 0.4);
        let out = model.forward(&img, Mode::Train { update_stats: false }).unwrap();
        assert_eq!(out.levels.len(), 3);
        assert_eq!(out.levels[0].cls.shape(), Shape([2, 6, 8, 8]));
        assert_eq!(out.levels[0].reg.shape(), Shape([2, 68, 8, 8]));
        assert_eq!(out.levels[1].cls.shape(), Shape([2, 6, 4, 4]));
        assert_eq!(out.levels[2].cls.shape(), Shape([2, 6, 2, 2]));
    }

    #[test]
    fn param_count_is_config_pure() {
        let cfg = ModelConfig::default();
        assert_eq!(param_count(&cfg).unwrap(), param_count(&cfg).unwrap());
        // Seed changes values, never the count.
        let (_, a) = Detector::<f32>::build(&cfg, 1).unwrap();
        let (_, b) = Detector::<f32>::build(&cfg, 2).unwrap();
        assert_eq!(a.param_count(), b.param_count());
    }

    #[test]
    fn ablation_grid_param_ordering() {
        // baseline < +DAM < +UCM < both, mirroring the paper's Params column.
        let arm = |dam: bool, ucm: bool| {
            let mut cfg = ModelConfig::default();
            cfg.backbone.dam_mode = if dam { DamMode::Davgg } else { DamMode::Off };
            cfg.neck.enabled = ucm;
            param_count(&cfg).unwrap()
        };
        let baseline = arm(false, false);
        let dam_only = arm(true, false);
        let ucm_only = arm(false, true);
        let both = arm(true, true);
        assert!(baseline < dam_only, "{baseline} !< {dam_only}");
        assert!(dam_only < ucm_only, "{dam_only} !< {ucm_only}");
        assert!(ucm_only < both, "{ucm_only} !< {both}");
    }
}
