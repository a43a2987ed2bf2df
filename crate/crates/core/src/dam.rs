//! Direction-aware attention: directional deformable gating, bidirectional
//! 1-D pooling, and channel attention embedding, plus the DAVgg/DA blocks
//! that host the module inside the backbone and neck.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvBnRelu, ParamBuilder};
use crate::tensor::{
    add, adaptive_avg_pool, concat, deform_conv1d, mul, narrow, permute, relu, sigmoid,
    DeformAxis, Mode, Scalar, Shape, Tensor,
};

/// Deformable 1-D convolution layer with its offset branch.
///
/// The offset branch is a standard convolution over the input emitting one
/// scalar per kernel tap; it is zero-initialized (weights and bias), so a
/// fresh layer starts in the standard-convolution regime.
pub struct DirectionalDeform<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub offset: Conv2d<T>,
    pub axis: DeformAxis,
}

impl<T: Scalar> DirectionalDeform<T> {
    pub fn new(
        pb: &mut ParamBuilder<T>,
        name: &str,
        channels: usize,
        k: usize,
        axis: DeformAxis,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::config(format!("deformable kernel size {k} must be odd")));
        }
        let (kernel, pad) = match axis {
            DeformAxis::Row => ((1, k), (0, k / 2)),
            DeformAxis::Column => ((k, 1), (k / 2, 0)),
        };
        let weight = pb.weight(
            &format!("{name}.weight"),
            Shape([channels, channels, kernel.0, kernel.1]),
            channels * k,
        );
        let bias = pb.zeros(&format!("{name}.bias"), Shape([1, channels, 1, 1]));
        let offset =
            Conv2d::new(pb, &format!("{name}.offset"), channels, k, kernel, 1, pad, 1, true);
        offset.weight.update_data(|d| d.fill(T::zero()));
        Ok(DirectionalDeform { weight, bias, offset, axis })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let offsets = self.offset.forward(x)?;
        deform_conv1d(x, &self.weight, Some(&self.bias), &offsets, self.axis)
    }
}

/// Row/column pooled descriptors: `z_h` is `(N,C,H,1)`, `z_w` is `(N,C,1,W)`.
pub struct DirectionalDescriptors<T: Scalar> {
    pub z_h: Tensor<T>,
    pub z_w: Tensor<T>,
}

/// Parameters of one direction-aware attention module over `C` channels.
pub struct DamParams<T: Scalar> {
    pub row_deform: DirectionalDeform<T>,
    pub col_deform: DirectionalDeform<T>,
    pub cbr_conv: Conv2d<T>,
    pub cbr_bn: BatchNorm2d<T>,
    pub conv_h: Conv2d<T>,
    pub conv_w: Conv2d<T>,
    pub channels: usize,
    pub reduced: usize,
}

impl<T: Scalar> DamParams<T> {
    pub fn new(
        pb: &mut ParamBuilder<T>,
        name: &str,
        channels: usize,
        k: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 {
            return Err(Error::config("reduction ratio must be >= 1"));
        }
        let reduced = (channels / reduction).max(8).min(channels);
        Ok(DamParams {
            row_deform: DirectionalDeform::new(
                pb,
                &format!("{name}.row"),
                channels,
                k,
                DeformAxis::Row,
            )?,
            col_deform: DirectionalDeform::new(
                pb,
                &format!("{name}.col"),
                channels,
                k,
                DeformAxis::Column,
            )?,
            cbr_conv: Conv2d::pointwise(pb, &format!("{name}.cbr.conv"), channels, reduced, false),
            cbr_bn: BatchNorm2d::new(pb, &format!("{name}.cbr.bn"), reduced),
            conv_h: Conv2d::pointwise(pb, &format!("{name}.conv_h"), reduced, channels, true),
            conv_w: Conv2d::pointwise(pb, &format!("{name}.conv_w"), reduced, channels, true),
            channels,
            reduced,
        })
    }

    /// Trainable scalar count of one module; kept in sync with the builder
    /// (asserted in tests against the constructed set).
    pub fn analytic_param_count(channels: usize, k: usize, reduction: usize) -> usize {
        let c = channels;
        let cr = (c / reduction).max(8).min(c);
        let deform = c * c * k + c + (k * c * k + k); // weight + bias + offset conv
        2 * deform            // row + col
            + cr * c + 2 * cr // cbr conv + bn affine
            + 2 * (c * cr + c) // conv_h, conv_w with bias
    }
}

/// Eq-style directional gating: `sigmoid(DConv_row(x) + DConv_col(x)) * x`.
///
/// The gate lies in (0,1), so `|out| <= |x|` element-wise.
pub fn direction_aware_generation<T: Scalar>(
    x: &Tensor<T>,
    p: &DamParams<T>,
) -> Result<Tensor<T>> {
    if x.shape().c() != p.channels {
        return Err(Error::shape(
            1,
            format!("input has {} channels, module built for {}", x.shape().c(), p.channels),
        ));
    }
    let row = p.row_deform.forward(x)?;
    let col = p.col_deform.forward(x)?;
    let gate = sigmoid(&add(&row, &col)?)?;
    mul(&gate, x)
}

/// Mean over width into `z_h` and mean over height into `z_w`.
pub fn directional_pool<T: Scalar>(x_dir: &Tensor<T>) -> Result<DirectionalDescriptors<T>> {
    let s = x_dir.shape();
    Ok(DirectionalDescriptors {
        z_h: adaptive_avg_pool(x_dir, s.h(), 1)?,
        z_w: adaptive_avg_pool(x_dir, 1, s.w())?,
    })
}

/// Channel attention embedding: concatenates the descriptors along the
/// spatial axis (z_w transposed onto the H axis), reduces channels through
/// CBR, splits back, restores channel width with two pointwise convolutions,
/// and reweights `x` with both sigmoid gates.
pub fn channel_attention_embedding<T: Scalar>(
    x: &Tensor<T>,
    d: &DirectionalDescriptors<T>,
    p: &DamParams<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let s = x.shape();
    let (h, w) = (s.h(), s.w());
    if d.z_h.shape() != Shape([s.n(), s.c(), h, 1]) {
        return Err(Error::contract(format!(
            "z_h dims {} do not match input {}",
            d.z_h.shape(),
            s
        )));
    }
    if d.z_w.shape() != Shape([s.n(), s.c(), 1, w]) {
        return Err(Error::contract(format!(
            "z_w dims {} do not match input {}",
            d.z_w.shape(),
            s
        )));
    }
    // (N,C,1,W) -> (N,C,W,1) so both descriptors stack on the H axis.
    let z_w_t = permute(&d.z_w, [0, 1, 3, 2])?;
    let stacked = concat(&[&d.z_h, &z_w_t], 2)?;
    debug_assert_eq!(stacked.shape(), Shape([s.n(), s.c(), h + w, 1]));
    let g = relu(&p.cbr_bn.forward(&p.cbr_conv.forward(&stacked)?, mode)?)?;
    if g.shape().h() != h + w {
        return Err(Error::contract(format!(
            "fused descriptor height {} cannot split into {h}+{w}",
            g.shape().h()
        )));
    }
    let g_h = narrow(&g, 2, 0, h)?;
    let g_w = permute(&narrow(&g, 2, h, w)?, [0, 1, 3, 2])?;
    let gate_h = sigmoid(&p.conv_h.forward(&g_h)?)?; // (N,C,H,1)
    let gate_w = sigmoid(&p.conv_w.forward(&g_w)?)?; // (N,C,1,W)
    mul(&mul(x, &gate_h)?, &gate_w)
}

/// Full module: gates derive from the direction-aware map while the final
/// product reweights the original input.
pub fn dam_forward<T: Scalar>(x: &Tensor<T>, p: &DamParams<T>, mode: Mode) -> Result<Tensor<T>> {
    let x_dir = direction_aware_generation(x, p)?;
    let d = directional_pool(&x_dir)?;
    channel_attention_embedding(x, &d, p, mode)
}

/// Conv3x3 + BN + ReLU followed by direction-aware attention.
pub struct DaVggBlock<T: Scalar> {
    pub cbr: ConvBnRelu<T>,
    pub dam: Option<DamParams<T>>,
}

impl<T: Scalar> DaVggBlock<T> {
    pub fn new(
        pb: &mut ParamBuilder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        dam: Option<(usize, usize)>, // (kernel, reduction)
    ) -> Result<Self> {
        Ok(DaVggBlock {
            cbr: ConvBnRelu::new(pb, &format!("{name}.cbr"), cin, cout, 3, 1, 1),
            dam: match dam {
                Some((k, r)) => Some(DamParams::new(pb, &format!("{name}.dam"), cout, k, r)?),
                None => None,
            },
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.cbr.forward(x, mode)?;
        match &self.dam {
            Some(dam) => dam_forward(&y, dam, mode),
            None => Ok(y),
        }
    }
}

/// A DA block is a sequence of DAVgg blocks.
pub struct DaBlock<T: Scalar> {
    pub blocks: Vec<DaVggBlock<T>>,
}

impl<T: Scalar> DaBlock<T> {
    pub fn new(
        pb: &mut ParamBuilder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        depth: usize,
        dam: Option<(usize, usize)>,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::config("DA block depth must be >= 1"));
        }
        let mut blocks = Vec::with_capacity(depth);
        for i in 0..depth {
            let bin = if i == 0 { cin } else { cout };
            blocks.push(DaVggBlock::new(pb, &format!("{name}.block{i}"), bin, cout, dam)?);
        }
        Ok(DaBlock { blocks })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.forward(&y, mode)?;
        }
        Ok(y)
    }
}
