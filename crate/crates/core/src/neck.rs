//! Unity-compensation neck: multi-scale alignment, shallow and deep
//! multi-level fusion, and multi-feature embedding. Maps the backbone
//! pyramid {C2..C5} onto the head inputs {K3, B4, B5}.

use serde::{Deserialize, Serialize};

use crate::backbone::{FeaturePyramid, Level};
use crate::dam::DaBlock;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBn, ParamBuilder};
use crate::tensor::{
    add, adaptive_avg_pool, concat_channels, matmul, mul, mul_scalar, narrow, permute, relu,
    reshape, resize_bilinear, sigmoid, softmax, Mode, Scalar, Shape, Tensor,
};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlignOp {
    /// Stack aligned maps along the channel axis.
    #[default]
    Concat,
    /// Project every level to a common channel count, then sum.
    Add,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Compensation {
    /// Gated multi-feature embedding with a DA block on top.
    #[default]
    Mem,
    /// Plain addition of the projected global feature.
    Add,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeckConfig {
    /// When false the neck is an identity pass-through of (C3, C4, C5).
    pub enabled: bool,
    pub align_op: AlignOp,
    pub compensation: Compensation,
    pub n_blocks: usize,
    pub heads: usize,
}

impl Default for NeckConfig {
    fn default() -> Self {
        NeckConfig {
            enabled: true,
            align_op: AlignOp::Concat,
            compensation: Compensation::Mem,
            n_blocks: 2,
            heads: 4,
        }
    }
}

impl NeckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::config("neck n_blocks must be >= 1"));
        }
        if self.heads == 0 {
            return Err(Error::config("neck heads must be >= 1"));
        }
        Ok(())
    }
}

/// How fused channels map back to source levels.
pub enum AlignLayout {
    /// Contiguous channel spans in source order.
    Concat(Vec<(Level, std::ops::Range<usize>)>),
    /// Sum of projected maps; every separation yields the whole fused map.
    Summed { levels: Vec<Level>, channels: usize },
}

/// Output of multi-scale alignment.
pub struct AlignedBundle<T: Scalar> {
    pub fused: Tensor<T>,
    pub layout: AlignLayout,
    pub aligned_size: (usize, usize),
}

impl<T: Scalar> AlignedBundle<T> {
    /// Extracts the fused sub-feature belonging to `level`.
    pub fn separate(&self, level: Level) -> Result<Tensor<T>> {
        match &self.layout {
            AlignLayout::Concat(spans) => {
                let span = spans
                    .iter()
                    .find(|(l, _)| *l == level)
                    .map(|(_, r)| r.clone())
                    .ok_or_else(|| {
                        Error::contract(format!("layout has no span for level {level}"))
                    })?;
                narrow(&self.fused, 1, span.start, span.end - span.start)
            }
            AlignLayout::Summed { levels, .. } => {
                if !levels.contains(&level) {
                    return Err(Error::contract(format!("layout has no level {level}")));
                }
                Ok(self.fused.clone())
            }
        }
    }
}

/// Resizes to a target spatial size: average pooling to shrink, bilinear
/// interpolation to grow, identity when equal.
pub fn resize_to<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h() == h && s.w() == w {
        Ok(x.clone())
    } else if h <= s.h() && w <= s.w() {
        adaptive_avg_pool(x, h, w)
    } else {
        resize_bilinear(x, h, w)
    }
}

/// The aligned target size: second-smallest level size for four inputs,
/// smallest for three.
pub fn alignment_target(sizes: &[(usize, usize)]) -> Result<(usize, usize)> {
    match sizes.len() {
        4 => Ok(sizes[2]),
        3 => Ok(sizes[2]),
        n => Err(Error::contract(format!("alignment expects 3 or 4 levels, got {n}"))),
    }
}

/// Multi-scale alignment parameters: per-level 1x1 projections, used only in
/// `Add` mode.
pub struct MamParams<T: Scalar> {
    pub projections: Option<Vec<Conv2d<T>>>,
    pub common_channels: usize,
}

impl<T: Scalar> MamParams<T> {
    pub fn new(
        pb: &mut ParamBuilder<T>,
        name: &str,
        level_channels: &[usize],
        align_op: AlignOp,
    ) -> Self {
        match align_op {
            AlignOp::Concat => {
                MamParams { projections: None, common_channels: level_channels.iter().sum() }
            }
            AlignOp::Add => {
                let common = *level_channels.iter().min().expect("at least one level");
                let projections = level_channels
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| Conv2d::pointwise(pb, &format!("{name}.proj{i}"), c, common, false))
                    .collect();
                MamParams { projections: Some(projections), common_channels: common }
            }
        }
    }
}

/// Aligns 3 or 4 pyramid levels to a common size and fuses them.
pub fn mam_align<T: Scalar>(
    features: &[(Level, &Tensor<T>)],
    params: &MamParams<T>,
) -> Result<AlignedBundle<T>> {
    let sizes: Vec<(usize, usize)> =
        features.iter().map(|(_, t)| (t.shape().h(), t.shape().w())).collect();
    for win in sizes.windows(2) {
        if win[1].0 >= win[0].0 || win[1].1 >= win[0].1 {
            return Err(Error::contract("alignment inputs must strictly decrease in size"));
        }
    }
    let target = alignment_target(&sizes)?;
    let aligned: Vec<Tensor<T>> = features
        .iter()
        .map(|(_, t)| resize_to(t, target.0, target.1))
        .collect::<Result<_>>()?;

    match &params.projections {
        None => {
            let refs: Vec<&Tensor<T>> = aligned.iter().collect();
            let fused = concat_channels(&refs)?;
            let mut spans = Vec::with_capacity(features.len());
            let mut start = 0;
            for ((level, t), _) in features.iter().zip(&aligned) {
                let c = t.shape().c();
                spans.push((*level, start..start + c));
                start += c;
            }
            Ok(AlignedBundle { fused, layout: AlignLayout::Concat(spans), aligned_size: target })
        }
        Some(projections) => {
            if projections.len() != aligned.len() {
                return Err(Error::contract(format!(
                    "{} projections for {} levels",
                    projections.len(),
                    aligned.len()
                )));
            }
            let mut acc: Option<Tensor<T>> = None;
            for (proj, t) in projections.iter().zip(&aligned) {
                let p = proj.forward(t)?;
                acc = Some(match acc {
                    Some(prev) => add(&prev, &p)?,
                    None => p,
                });
            }
            Ok(AlignedBundle {
                fused: acc.expect("at least one level"),
                layout: AlignLayout::Summed {
                    levels: features.iter().map(|(l, _)| *l).collect(),
                    channels: params.common_channels,
                },
                aligned_size: target,
            })
        }
    }
}

/// Shallow multi-level fusion: a DA block over the aligned bundle, then
/// separation of the C3/C4 spans, each resized to its compensation target.
pub struct ShallowMfm<T: Scalar> {
    pub fuse: DaBlock<T>,
}

impl<T: Scalar> ShallowMfm<T> {
    pub fn new(
        pb: &mut ParamBuilder<T>,
        name: &str,
        fused_channels: usize,
        dam: (usize, usize),
    ) -> Result<Self> {
        Ok(ShallowMfm { fuse: DaBlock::new(pb, &format!("{name}.fuse"), fused_channels, fused_channels, 1, Some(dam))? })
    }

    /// Returns `(F_emb_K3, F_emb_K4)` resized to the (h, w) of the
    /// compensation targets C3 and C4.
    pub fn forward(
        &self,
        bundle: &AlignedBundle<T>,
        c3_hw: (usize, usize),
        c4_hw: (usize, usize),
        mode: Mode,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let fused = self.fuse.forward(&bundle.fused, mode)?;
        let refined = AlignedBundle {
            fused,
            layout: clone_layout(&bundle.layout),
            aligned_size: bundle.aligned_size,
        };
        let emb_k3 = resize_to(&refined.separate(Level::C3)?, c3_hw.0, c3_hw.1)?;
        let emb_k4 = resize_to(&refined.separate(Level::C4)?, c4_hw.0, c4_hw.1)?;
        Ok((emb_k3, emb_k4))
    }
}

fn clone_layout(layout: &AlignLayout) -> AlignLayout {
    match layout {
        AlignLayout::Concat(spans) => AlignLayout::Concat(spans.clone()),
        AlignLayout::Summed { levels, channels } => {
            AlignLayout::Summed { levels: levels.clone(), channels: *channels }
        }
    }
}

/// One transformer block: multi-head attention over flattened tokens and a
/// depthwise-convolution FFN, both with residual connections.
pub struct TransformerBlock<T: Scalar> {
    pub q: Conv2d<T>,
    pub k: Conv2d<T>,
    pub v: Conv2d<T>,
    pub out: Conv2d<T>,
    pub cb1: ConvBn<T>,
    pub dw: Conv2d<T>,
    pub cb2: ConvBn<T>,
    pub heads: usize,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn new(pb: &mut ParamBuilder<T>, name: &str, channels: usize, heads: usize) -> Result<Self> {
        if channels % heads != 0 {
            return Err(Error::config(format!(
                "embedding dim {channels} not divisible by {heads} heads"
            )));
        }
        let hidden = channels * 2;
        Ok(TransformerBlock {
            q: Conv2d::pointwise(pb, &format!("{name}.q"), channels, channels, true),
            k: Conv2d::pointwise(pb, &format!("{name}.k"), channels, channels, true),
            v: Conv2d::pointwise(pb, &format!("{name}.v"), channels, channels, true),
            out: Conv2d::pointwise(pb, &format!("{name}.out"), channels, channels, true),
            cb1: ConvBn::pointwise(pb, &format!("{name}.ffn.cb1"), channels, hidden),
            dw: Conv2d::new(
                pb,
                &format!("{name}.ffn.dw"),
                hidden,
                hidden,
                (3, 3),
                1,
                (1, 1),
                hidden,
                false,
            ),
            cb2: ConvBn::pointwise(pb, &format!("{name}.ffn.cb2"), hidden, channels),
            heads,
        })
    }

    /// Scaled dot-product attention; also returns the attention probabilities
    /// `(N, heads, T, T)` so invariants can inspect them.
    pub fn attention(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = x.shape();
        let (n, c, h, w) = (s.n(), s.c(), s.h(), s.w());
        let tokens = h * w;
        let hd = c / self.heads;
        let scale = T::fl(1.0 / (hd as f64).sqrt());
        // (N,C,H,W) -> (N,heads,hd,T); head-major channel layout makes this a
        // pure reshape.
        let to_tokens = |t: &Tensor<T>| reshape(t, Shape([n, self.heads, hd, tokens]));
        let q = permute(&to_tokens(&self.q.forward(x)?)?, [0, 1, 3, 2])?; // (N,h,T,hd)
        let k = to_tokens(&self.k.forward(x)?)?; // (N,h,hd,T)
        let v = permute(&to_tokens(&self.v.forward(x)?)?, [0, 1, 3, 2])?; // (N,h,T,hd)
        let logits = mul_scalar(&matmul(&q, &k)?, scale)?;
        let attn = softmax(&logits, 3)?;
        let mixed = matmul(&attn, &v)?; // (N,h,T,hd)
        let mixed = permute(&mixed, [0, 1, 3, 2])?; // (N,h,hd,T)
        let mixed = reshape(&mixed, Shape([n, c, h, w]))?;
        Ok((self.out.forward(&mixed)?, attn))
    }

    fn ffn(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.cb2.forward(&relu(&self.dw.forward(&self.cb1.forward(x, mode)?)?)?, mode)
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (mha, _) = self.attention(x)?;
        let y = add(x, &mha)?;
        let f = self.ffn(&y, mode)?;
        add(&y, &f)
    }
}

/// Deep multi-level fusion: a transformer stack over the aligned K-bundle,
/// then separation of the K3/K4 spans resized onto K4 and K5.
pub struct DeepMfm<T: Scalar> {
    pub blocks: Vec<TransformerBlock<T>>,
}

impl<T: Scalar> DeepMfm<T> {
    pub fn new(
        pb: &mut ParamBuilder<T>,
        name: &str,
        channels: usize,
        n_blocks: usize,
        heads: usize,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(n_blocks);
        for i in 0..n_blocks {
            blocks.push(TransformerBlock::new(pb, &format!("{name}.block{i}"), channels, heads)?);
        }
        Ok(DeepMfm { blocks })
    }

    /// Returns `(F_emb_B3, F_emb_B4)` resized for compensation onto K4 and K5.
    pub fn forward(
        &self,
        bundle: &AlignedBundle<T>,
        k4_hw: (usize, usize),
        k5_hw: (usize, usize),
        mode: Mode,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut fused = bundle.fused.clone();
        for b in &self.blocks {
            fused = b.forward(&fused, mode)?;
        }
        let refined = AlignedBundle {
            fused,
            layout: clone_layout(&bundle.layout),
            aligned_size: bundle.aligned_size,
        };
        let emb_b3 = resize_to(&refined.separate(Level::K3)?, k4_hw.0, k4_hw.1)?;
        let emb_b4 = resize_to(&refined.separate(Level::K4)?, k5_hw.0, k5_hw.1)?;
        Ok((emb_b3, emb_b4))
    }
}

/// Multi-feature embedding: gates the local feature with the sigmoid of the
/// transformed global feature, keeps a residual connection, and runs a DA
/// block on top. The `Add` arm replaces all of that with plain addition of
/// the projected global feature.
pub struct MemParams<T: Scalar> {
    pub local_conv: Conv2d<T>,
    pub global_conv: Conv2d<T>,
    pub fuse: Option<DaBlock<T>>,
    pub compensation: Compensation,
}

impl<T: Scalar> MemParams<T> {
    pub fn new(
        pb: &mut ParamBuilder<T>,
        name: &str,
        local_channels: usize,
        global_channels: usize,
        compensation: Compensation,
        dam: (usize, usize),
    ) -> Result<Self> {
        Ok(MemParams {
            local_conv: Conv2d::pointwise(pb, &format!("{name}.local"), local_channels, local_channels, true),
            global_conv: Conv2d::pointwise(
                pb,
                &format!("{name}.global"),
                global_channels,
                local_channels,
                true,
            ),
            fuse: match compensation {
                Compensation::Mem => Some(DaBlock::new(
                    pb,
                    &format!("{name}.fuse"),
                    local_channels,
                    local_channels,
                    1,
                    Some(dam),
                )?),
                Compensation::Add => None,
            },
            compensation,
        })
    }

    /// `global_emb` must already be resized to the local (h, w).
    pub fn forward(
        &self,
        local: &Tensor<T>,
        global_emb: &Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let (ls, gs) = (local.shape(), global_emb.shape());
        if ls.h() != gs.h() || ls.w() != gs.w() {
            return Err(Error::shape(
                2,
                format!("global {} not resized to local {}", gs, ls),
            ));
        }
        match self.compensation {
            Compensation::Mem => {
                let gate = sigmoid(&self.global_conv.forward(global_emb)?)?;
                let gated = mul(&self.local_conv.forward(local)?, &gate)?;
                let fused = add(local, &gated)?;
                self.fuse.as_ref().expect("mem mode has fuse block").forward(&fused, mode)
            }
            Compensation::Add => add(local, &self.global_conv.forward(global_emb)?),
        }
    }
}

/// Full neck wiring.
pub struct Neck<T: Scalar> {
    pub cfg: NeckConfig,
    shallow_mam: MamParams<T>,
    shallow: ShallowMfm<T>,
    mem_k3: MemParams<T>,
    mem_k4: MemParams<T>,
    deep_mam: MamParams<T>,
    deep: DeepMfm<T>,
    mem_b4: MemParams<T>,
    mem_b5: MemParams<T>,
}

impl<T: Scalar> Neck<T> {
    /// `level_channels` are the C2..C5 channel counts; `dam` is the
    /// (kernel, reduction) pair used by embedded DA blocks.
    pub fn new(
        pb: &mut ParamBuilder<T>,
        name: &str,
        level_channels: [usize; 4],
        cfg: &NeckConfig,
        dam: (usize, usize),
    ) -> Result<Self> {
        cfg.validate()?;
        let [c2, c3, c4, c5] = level_channels;
        let shallow_mam =
            MamParams::new(pb, &format!("{name}.mam_c"), &[c2, c3, c4, c5], cfg.align_op);
        let shallow = ShallowMfm::new(pb, &format!("{name}.shallow"), shallow_mam.common_channels, dam)?;
        // Span channel widths as seen after separation.
        let (span_k3, span_k4) = match cfg.align_op {
            AlignOp::Concat => (c3, c4),
            AlignOp::Add => (shallow_mam.common_channels, shallow_mam.common_channels),
        };
        let mem_k3 = MemParams::new(pb, &format!("{name}.mem_k3"), c3, span_k3, cfg.compensation, dam)?;
        let mem_k4 = MemParams::new(pb, &format!("{name}.mem_k4"), c4, span_k4, cfg.compensation, dam)?;

        let deep_mam = MamParams::new(pb, &format!("{name}.mam_k"), &[c3, c4, c5], cfg.align_op);
        let deep = DeepMfm::new(
            pb,
            &format!("{name}.deep"),
            deep_mam.common_channels,
            cfg.n_blocks,
            cfg.heads,
        )?;
        let (span_b3, span_b4) = match cfg.align_op {
            AlignOp::Concat => (c3, c4),
            AlignOp::Add => (deep_mam.common_channels, deep_mam.common_channels),
        };
        let mem_b4 = MemParams::new(pb, &format!("{name}.mem_b4"), c4, span_b3, cfg.compensation, dam)?;
        let mem_b5 = MemParams::new(pb, &format!("{name}.mem_b5"), c5, span_b4, cfg.compensation, dam)?;
        Ok(Neck { cfg: cfg.clone(), shallow_mam, shallow, mem_k3, mem_k4, deep_mam, deep, mem_b4, mem_b5 })
    }

    /// `{C2..C5} -> {K3, B4, B5}` at strides (8, 16, 32).
    pub fn forward(&self, pyramid: &FeaturePyramid<T>, mode: Mode) -> Result<FeaturePyramid<T>> {
        let c2 = pyramid.get(Level::C2)?;
        let c3 = pyramid.get(Level::C3)?;
        let c4 = pyramid.get(Level::C4)?;
        let c5 = pyramid.get(Level::C5)?;

        let hw = |t: &Tensor<T>| (t.shape().h(), t.shape().w());
        let bundle = mam_align(
            &[(Level::C2, c2), (Level::C3, c3), (Level::C4, c4), (Level::C5, c5)],
            &self.shallow_mam,
        )?;
        let (emb_k3, emb_k4) = self.shallow.forward(&bundle, hw(c3), hw(c4), mode)?;
        let k3 = self.mem_k3.forward(c3, &emb_k3, mode)?;
        let k4 = self.mem_k4.forward(c4, &emb_k4, mode)?;
        let k5 = c5.clone();

        let deep_bundle = mam_align(
            &[(Level::K3, &k3), (Level::K4, &k4), (Level::K5, &k5)],
            &self.deep_mam,
        )?;
        let (emb_b3, emb_b4) = self.deep.forward(&deep_bundle, hw(&k4), hw(&k5), mode)?;
        let b4 = self.mem_b4.forward(&k4, &emb_b3, mode)?;
        let b5 = self.mem_b5.forward(&k5, &emb_b4, mode)?;

        FeaturePyramid::new(vec![(Level::K3, k3), (Level::B4, b4), (Level::B5, b5)])
    }

    /// Identity pass-through used when the neck is disabled: the head sees
    /// (C3, C4, C5) relabeled at the same strides.
    pub fn passthrough(pyramid: &FeaturePyramid<T>) -> Result<FeaturePyramid<T>> {
        FeaturePyramid::new(vec![
            (Level::K3, pyramid.get(Level::C3)?.clone()),
            (Level::B4, pyramid.get(Level::C4)?.clone()),
            (Level::B5, pyramid.get(Level::C5)?.clone()),
        ])
    }
}

/// Separation uses the fused channels that belong to each source level; for
/// the deep pass the K3 span compensates K4 and the K4 span compensates K5.
#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamSet;

    fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        let data = (0..Shape(shape).numel())
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0
            })
            .collect();
        Tensor::from_vec(Shape(shape), data).unwrap()
    }

    #[test]
    fn alignment_rule_four_and_three_levels() {
        assert_eq!(alignment_target(&[(32, 32), (16, 16), (8, 8), (4, 4)]).unwrap(), (8, 8));
        assert_eq!(alignment_target(&[(16, 16), (8, 8), (4, 4)]).unwrap(), (4, 4));
        assert!(alignment_target(&[(8, 8), (4, 4)]).is_err());
        assert!(alignment_target(&[(64, 64), (32, 32), (16, 16), (8, 8), (4, 4)]).is_err());
    }

    #[test]
    fn concat_layout_spans() {
        let a = rand_tensor([1, 16, 32, 32], 1);
        let b = rand_tensor([1, 32, 16, 16], 2);
        let c = rand_tensor([1, 64, 8, 8], 3);
        let d = rand_tensor([1, 128, 4, 4], 4);
        let params = MamParams { projections: None, common_channels: 240 };
        let bundle = mam_align(
            &[(Level::C2, &a), (Level::C3, &b), (Level::C4, &c), (Level::C5, &d)],
            &params,
        )
        .unwrap();
        assert_eq!(bundle.aligned_size, (8, 8));
        assert_eq!(bundle.fused.shape(), Shape([1, 240, 8, 8]));
        match &bundle.layout {
            AlignLayout::Concat(spans) => {
                let expect = [(0..16), (16..48), (48..112), (112..240)];
                for ((_, got), want) in spans.iter().zip(expect) {
                    assert_eq!(got, &want);
                }
            }
            _ => panic!("expected concat layout"),
        }
    }

    #[test]
    fn separation_recovers_identity_slices() {
        // With identity fusion (no DA/transformer mixing), each separated
        // slice equals the aligned source level content exactly.
        let b = rand_tensor([1, 3, 16, 16], 6);
        let c = rand_tensor([1, 5, 8, 8], 7);
        let d = rand_tensor([1, 7, 4, 4], 8);
        let params = MamParams { projections: None, common_channels: 15 };
        let bundle =
            mam_align(&[(Level::K3, &b), (Level::K4, &c), (Level::K5, &d)], &params).unwrap();
        assert_eq!(bundle.aligned_size, (4, 4));
        let sliced = bundle.separate(Level::K4).unwrap();
        let pooled = adaptive_avg_pool(&c, 4, 4).unwrap();
        assert_eq!(sliced.to_vec(), pooled.to_vec());
        let last = bundle.separate(Level::K5).unwrap();
        assert_eq!(last.to_vec(), d.to_vec());
    }

    #[test]
    fn transformer_block_shape_and_attention_rows() {
        let mut set = ParamSet::<f64>::new();
        let mut pb = ParamBuilder::new(&mut set, 9);
        let block = TransformerBlock::new(&mut pb, "t", 64, 4).unwrap();
        let x = rand_tensor([2, 64, 4, 4], 10);
        let y = block.forward(&x, Mode::Train { update_stats: false }).unwrap();
        assert_eq!(y.shape(), Shape([2, 64, 4, 4]));
        let (_, attn) = block.attention(&x).unwrap();
        assert_eq!(attn.shape(), Shape([2, 4, 16, 16]));
        let ad = attn.data();
        for row in 0..2 * 4 * 16 {
            let sum: f64 = ad[row * 16..(row + 1) * 16].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn transformer_zero_projections_reduce_to_identity() {
        let mut set = ParamSet::<f64>::new();
        let mut pb = ParamBuilder::new(&mut set, 12);
        let block = TransformerBlock::new(&mut pb, "t", 16, 4).unwrap();
        block.out.weight.update_data(|d| d.fill(0.0));
        block.out.bias.as_ref().unwrap().update_data(|d| d.fill(0.0));
        block.cb2.conv.weight.update_data(|d| d.fill(0.0));
        // Zero the BN affine of cb2 so the FFN emits exactly zero.
        block.cb2.bn.gamma.update_data(|d| d.fill(0.0));
        let x = rand_tensor([1, 16, 2, 2], 13);
        let y = block.forward(&x, Mode::Train { update_stats: false }).unwrap();
        for (a, b) in y.data().iter().zip(x.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_must_divide_channels() {
        let mut set = ParamSet::<f64>::new();
        let mut pb = ParamBuilder::new(&mut set, 14);
        assert!(TransformerBlock::new(&mut pb, "t", 30, 4).is_err());
    }

    #[test]
    fn mem_gate_closed_leaves_residual_path() {
        let mut set = ParamSet::<f64>::new();
        let mut pb = ParamBuilder::new(&mut set, 15);
        let mem = MemParams::new(&mut pb, "m", 8, 8, Compensation::Mem, (3, 16)).unwrap();
        mem.global_conv.weight.update_data(|d| d.fill(0.0));
        mem.global_conv.bias.as_ref().unwrap().update_data(|d| d.fill(-1e4));
        let local = rand_tensor([1, 8, 4, 4], 16);
        let global = rand_tensor([1, 8, 4, 4], 17);
        let mode = Mode::Train { update_stats: false };
        let y = mem.forward(&local, &global, mode).unwrap();
        let direct = mem.fuse.as_ref().unwrap().forward(&local, mode).unwrap();
        for (a, b) in y.data().iter().zip(direct.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mem_add_mode_with_zero_global_is_local() {
        let mut set = ParamSet::<f64>::new();
        let mut pb = ParamBuilder::new(&mut set, 18);
        let mem = MemParams::new(&mut pb, "m", 8, 4, Compensation::Add, (3, 16)).unwrap();
        let local = rand_tensor([1, 8, 4, 4], 19);
        let global = Tensor::<f64>::zeros(Shape([1, 4, 4, 4]));
        let y = mem.forward(&local, &global, Mode::Eval).unwrap();
        assert_eq!(y.to_vec(), local.to_vec());
    }

    #[test]
    fn mem_requires_matching_spatial_dims() {
        let mut set = ParamSet::<f64>::new();
        let mut pb = ParamBuilder::new(&mut set, 20);
        let mem = MemParams::new(&mut pb, "m", 8, 8, Compensation::Add, (3, 16)).unwrap();
        let local = rand_tensor([1, 8, 4, 4], 21);
        let global = rand_tensor([1, 8, 2, 2], 22);
        assert!(mem.forward(&local, &global, Mode::Eval).is_err());
    }

    fn backbone_pyramid(seed: u64) -> FeaturePyramid<f64> {
        FeaturePyramid::new(vec![
            (Level::C2, rand_tensor([1, 16, 32, 32], seed)),
            (Level::C3, rand_tensor([1, 32, 16, 16], seed + 1)),
            (Level::C4, rand_tensor([1, 64, 8, 8], seed + 2)),
            (Level::C5, rand_tensor([1, 128, 4, 4], seed + 3)),
        ])
        .unwrap()
    }

    #[test]
    fn neck_shape_contract() {
        let mut set = ParamSet::<f64>::new();
        let mut pb = ParamBuilder::new(&mut set, 23);
        let neck =
            Neck::new(&mut pb, "neck", [16, 32, 64, 128], &NeckConfig::default(), (3, 16)).unwrap();
        let pyr = backbone_pyramid(100);
        let out = neck.forward(&pyr, Mode::Train { update_stats: false }).unwrap();
        assert_eq!(out.get(Level::K3).unwrap().shape(), Shape([1, 32, 16, 16]));
        assert_eq!(out.get(Level::B4).unwrap().shape(), Shape([1, 64, 8, 8]));
        assert_eq!(out.get(Level::B5).unwrap().shape(), Shape([1, 128, 4, 4]));
    }

    #[test]
    fn add_alignment_same_shapes() {
        let mut set = ParamSet::<f64>::new();
        let mut pb = ParamBuilder::new(&mut set, 24);
        let cfg = NeckConfig { align_op: AlignOp::Add, ..Default::default() };
        let neck = Neck::new(&mut pb, "neck", [16, 32, 64, 128], &cfg, (3, 16)).unwrap();
        let pyr = backbone_pyramid(200);
        let out = neck.forward(&pyr, Mode::Train { update_stats: false }).unwrap();
        assert_eq!(out.get(Level::K3).unwrap().shape(), Shape([1, 32, 16, 16]));
        assert_eq!(out.get(Level::B4).unwrap().shape(), Shape([1, 64, 8, 8]));
        assert_eq!(out.get(Level::B5).unwrap().shape(), Shape([1, 128, 4, 4]));
    }

    #[test]
    fn add_compensation_same_shapes() {
        let mut set = ParamSet::<f64>::new();
        let mut pb = ParamBuilder::new(&mut set, 25);
        let cfg = NeckConfig { compensation: Compensation::Add, ..Default::default() };
        let neck = Neck::new(&mut pb, "neck", [16, 32, 64, 128], &cfg, (3, 16)).unwrap();
        let pyr = backbone_pyramid(300);
        let out = neck.forward(&pyr, Mode::Train { update_stats: false }).unwrap();
        assert_eq!(out.get(Level::K3).unwrap().shape(), Shape([1, 32, 16, 16]));
    }

    #[test]
    fn deterministic_forward() {
        let run = || {
            let mut set = ParamSet::<f64>::new();
            let mut pb = ParamBuilder::new(&mut set, 77);
            let neck = Neck::new(&mut pb, "neck", [16, 32, 64, 128], &NeckConfig::default(), (3, 16))
                .unwrap();
            let pyr = backbone_pyramid(500);
            neck.forward(&pyr, Mode::Eval).unwrap().get(Level::B5).unwrap().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn token_count_conserved_through_stack() {
        let mut set = ParamSet::<f64>::new();
        let mut pb = ParamBuilder::new(&mut set, 26);
        let deep = DeepMfm::new(&mut pb, "d", 32, 3, 4).unwrap();
        let mut x = rand_tensor([2, 32, 4, 4], 27);
        for b in &deep.blocks {
            x = b.forward(&x, Mode::Train { update_stats: false }).unwrap();
            assert_eq!(x.shape(), Shape([2, 32, 4, 4]));
        }
    }
}
