//! Direction-aware feature-extraction backbone: a stride-2 stem followed by
//! four downsampling stages of DA blocks, emitting the pyramid C2..C5 at
//! strides (4, 8, 16, 32) with channel widths (w, 2w, 4w, 8w).

use serde::{Deserialize, Serialize};

use crate::dam::{dam_forward, DaVggBlock, DamParams};
use crate::error::{Error, Result};
use crate::nn::{ConvBnRelu, ParamBuilder};
use crate::tensor::{Mode, Scalar, Shape, Tensor};

/// Where the attention module sits inside each stage.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DamMode {
    /// Inside every DAVgg block, after its conv+BN+ReLU.
    #[default]
    Davgg,
    /// Once per stage, right after the downsample block's ReLU.
    BehindRelu,
    /// Once per stage, after the last block.
    BehindErblock,
    /// No attention anywhere; stages reduce to plain conv+BN+ReLU.
    Off,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Base channel width of C2; doubles at each level.
    pub width: usize,
    pub stage_depths: [usize; 4],
    pub dam_mode: DamMode,
    /// Deformable kernel size inside DAM (odd).
    pub dam_kernel: usize,
    /// Channel reduction ratio of the attention embedding (floor 8 channels).
    pub dam_reduction: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            width: 16,
            stage_depths: [1, 1, 2, 1],
            dam_mode: DamMode::Davgg,
            dam_kernel: 3,
            dam_reduction: 16,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::config("backbone width must be >= 1"));
        }
        if self.stage_depths.iter().any(|&d| d == 0) {
            return Err(Error::config("stage depths must be >= 1"));
        }
        if self.dam_kernel % 2 == 0 {
            return Err(Error::config("dam kernel must be odd"));
        }
        Ok(())
    }

    /// Channel widths of C2..C5.
    pub fn level_channels(&self) -> [usize; 4] {
        [self.width, self.width * 2, self.width * 4, self.width * 8]
    }
}

/// Pyramid level identifiers across backbone and neck.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum Level {
    C2,
    C3,
    C4,
    C5,
    K3,
    K4,
    K5,
    B4,
    B5,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Level::C2 => "C2",
            Level::C3 => "C3",
            Level::C4 => "C4",
            Level::C5 => "C5",
            Level::K3 => "K3",
            Level::K4 => "K4",
            Level::K5 => "K5",
            Level::B4 => "B4",
            Level::B5 => "B5",
        };
        f.write_str(s)
    }
}

/// Ordered multi-scale feature map, finest first.
pub struct FeaturePyramid<T: Scalar> {
    entries: Vec<(Level, Tensor<T>)>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn new(entries: Vec<(Level, Tensor<T>)>) -> Result<Self> {
        for win in entries.windows(2) {
            let (a, b) = (win[0].1.shape(), win[1].1.shape());
            if b.h() >= a.h() || b.w() >= a.w() {
                return Err(Error::contract(format!(
                    "pyramid levels must strictly shrink: {} then {}",
                    a, b
                )));
            }
        }
        Ok(FeaturePyramid { entries })
    }

    pub fn get(&self, level: Level) -> Result<&Tensor<T>> {
        self.entries
            .iter()
            .find(|(l, _)| *l == level)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::contract(format!("pyramid has no level {level}")))
    }

    pub fn levels(&self) -> impl Iterator<Item = (Level, &Tensor<T>)> {
        self.entries.iter().map(|(l, t)| (*l, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

struct Stage<T: Scalar> {
    down: ConvBnRelu<T>,
    entry_dam: Option<DamParams<T>>, // BehindRelu placement
    blocks: Vec<DaVggBlock<T>>,
    exit_dam: Option<DamParams<T>>, // BehindErblock placement
}

pub struct Backbone<T: Scalar> {
    pub cfg: BackboneConfig,
    stem: ConvBnRelu<T>,
    stages: Vec<Stage<T>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(pb: &mut ParamBuilder<T>, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let stem = ConvBnRelu::new(pb, &format!("{name}.stem"), 1, w, 3, 2, 1);
        let chans = cfg.level_channels();
        let dam_spec = (cfg.dam_kernel, cfg.dam_reduction);
        let mut stages = Vec::with_capacity(4);
        let mut cin = w;
        for (si, &cout) in chans.iter().enumerate() {
            let prefix = format!("{name}.stage{}", si + 1);
            let down = ConvBnRelu::new(pb, &format!("{prefix}.down"), cin, cout, 3, 2, 1);
            let entry_dam = match cfg.dam_mode {
                DamMode::BehindRelu => {
                    Some(DamParams::new(pb, &format!("{prefix}.dam"), cout, dam_spec.0, dam_spec.1)?)
                }
                _ => None,
            };
            let block_dam = match cfg.dam_mode {
                DamMode::Davgg => Some(dam_spec),
                _ => None,
            };
            let mut blocks = Vec::with_capacity(cfg.stage_depths[si]);
            for bi in 0..cfg.stage_depths[si] {
                blocks.push(DaVggBlock::new(
                    pb,
                    &format!("{prefix}.block{bi}"),
                    cout,
                    cout,
                    block_dam,
                )?);
            }
            let exit_dam = match cfg.dam_mode {
                DamMode::BehindErblock => {
                    Some(DamParams::new(pb, &format!("{prefix}.dam"), cout, dam_spec.0, dam_spec.1)?)
                }
                _ => None,
            };
            stages.push(Stage { down, entry_dam, blocks, exit_dam });
            cin = cout;
        }
        Ok(Backbone { cfg: cfg.clone(), stem, stages })
    }

    /// Runs the stem and four stages over a single-channel image batch,
    /// emitting C2..C5.
    pub fn forward(&self, image: &Tensor<T>, mode: Mode) -> Result<FeaturePyramid<T>> {
        let s = image.shape();
        if s.c() != 1 {
            return Err(Error::shape(1, format!("expected grayscale input, got {} channels", s.c())));
        }
        if s.h() % 32 != 0 {
            return Err(Error::shape(2, format!("input height {} not divisible by 32", s.h())));
        }
        if s.w() % 32 != 0 {
            return Err(Error::shape(3, format!("input width {} not divisible by 32", s.w())));
        }
        let mut x = self.stem.forward(image, mode)?;
        let mut levels = Vec::with_capacity(4);
        let ids = [Level::C2, Level::C3, Level::C4, Level::C5];
        for (stage, id) in self.stages.iter().zip(ids) {
            x = stage.down.forward(&x, mode)?;
            if let Some(dam) = &stage.entry_dam {
                x = dam_forward(&x, dam, mode)?;
            }
            for block in &stage.blocks {
                x = block.forward(&x, mode)?;
            }
            if let Some(dam) = &stage.exit_dam {
                x = dam_forward(&x, dam, mode)?;
            }
            levels.push((id, x.clone()));
        }
        FeaturePyramid::new(levels)
    }

    /// Expected level shapes for an input of `(h, w)`.
    pub fn expected_shapes(&self, n: usize, h: usize, w: usize) -> [Shape; 4] {
        let c = self.cfg.level_channels();
        [
            Shape([n, c[0], h / 4, w / 4]),
            Shape([n, c[1], h / 8, w / 8]),
            Shape([n, c[2], h / 16, w / 16]),
            Shape([n, c[3], h / 32, w / 32]),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamSet;

    fn build(cfg: &BackboneConfig) -> (ParamSet<f32>, Backbone<f32>) {
        let mut set = ParamSet::new();
        let mut pb = ParamBuilder::new(&mut set, 1);
        let bb = Backbone::new(&mut pb, "backbone", cfg).unwrap();
        (set, bb)
    }

    #[test]
    fn pyramid_shape_contract() {
        let cfg = BackboneConfig::default();
        let (_set, bb) = build(&cfg);
        let img = Tensor::<f32>::full(Shape([1, 1, 64, 64]), 0.3);
        let pyr = bb.forward(&img, Mode::Train { update_stats: false }).unwrap();
        assert_eq!(pyr.get(Level::C2).unwrap().shape(), Shape([1, 16, 16, 16]));
        assert_eq!(pyr.get(Level::C3).unwrap().shape(), Shape([1, 32, 8, 8]));
        assert_eq!(pyr.get(Level::C4).unwrap().shape(), Shape([1, 64, 4, 4]));
        assert_eq!(pyr.get(Level::C5).unwrap().shape(), Shape([1, 128, 2, 2]));
    }

    #[test]
    fn indivisible_input_rejected_before_compute() {
        let cfg = BackboneConfig::default();
        let (_set, bb) = build(&cfg);
        let img = Tensor::<f32>::zeros(Shape([1, 1, 48, 64]));
        assert!(bb.forward(&img, Mode::Eval).is_err());
    }

    #[test]
    fn dam_modes_preserve_shapes() {
        let img = Tensor::<f32>::full(Shape([1, 1, 64, 64]), 0.5);
        let mut shapes = Vec::new();
        for mode in [DamMode::Davgg, DamMode::BehindRelu, DamMode::BehindErblock, DamMode::Off] {
            let cfg = BackboneConfig { dam_mode: mode, ..Default::default() };
            let (_set, bb) = build(&cfg);
            let pyr = bb.forward(&img, Mode::Train { update_stats: false }).unwrap();
            shapes.push(
                pyr.levels().map(|(_, t)| t.shape()).collect::<Vec<_>>(),
            );
        }
        for s in &shapes[1..] {
            assert_eq!(s, &shapes[0]);
        }
    }

    #[test]
    fn dam_off_strictly_fewer_params() {
        let on = build(&BackboneConfig::default()).0.param_count();
        let off =
            build(&BackboneConfig { dam_mode: DamMode::Off, ..Default::default() }).0.param_count();
        assert!(off < on);
    }

    #[test]
    fn fixed_seed_bit_identical_forward() {
        let cfg = BackboneConfig::default();
        let run = || {
            let (_set, bb) = build(&cfg);
            let img = Tensor::<f32>::full(Shape([1, 1, 32, 32]), 0.25);
            bb.forward(&img, Mode::Eval).unwrap().get(Level::C5).unwrap().to_vec()
        };
        assert_eq!(run(), run());
    }
}
