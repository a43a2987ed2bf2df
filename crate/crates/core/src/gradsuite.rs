//! The f64 finite-difference verification suite.
//!
//! Every differentiable operation and composite module gets a named check:
//! a scalar-valued closure over seeded random inputs, verified against
//! central differences at rel_tol 1e-4. The suite is shared by the CLI
//! `gradcheck` subcommand and the acceptance tests.
//!
//! Inputs are drawn away from non-differentiable points (ReLU kinks at 0,
//! integer sampling positions of the deformable offsets), so the comparison
//! is meaningful everywhere it runs.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::backbone::{Backbone, BackboneConfig, FeaturePyramid, Level};
use crate::config::ModelConfig;
use crate::dam::{dam_forward, direction_aware_generation, DamParams};
use crate::error::Result;
use crate::head::{
    assign_targets, decode_anchors, dfl_loss_sum, enumerate_anchors, siou_loss_sum, total_loss,
    vfl_loss_sum, GtBox, LossWeights,
};
use crate::model::Detector;
use crate::neck::{mam_align, AlignOp, MamParams, MemParams, Neck, NeckConfig, TransformerBlock};
use crate::nn::{ParamBuilder, ParamSet};
use crate::tensor::{
    adaptive_avg_pool, batchnorm, concat, conv2d, deform_conv1d, grad_check, grad_check_scaled,
    matmul, mul, relu, resize_bilinear, sigmoid, softmax, sum_all, DeformAxis, Mode, Shape,
    Tensor,
};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub module: &'static str,
    pub name: &'static str,
    pub max_rel_err: f64,
    pub pass: bool,
    pub coords: usize,
    pub seconds: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ModuleFilter {
    All,
    Tensor,
    Dam,
    Neck,
    Loss,
}

impl ModuleFilter {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all" => Some(ModuleFilter::All),
            "tensor" => Some(ModuleFilter::Tensor),
            "dam" => Some(ModuleFilter::Dam),
            "neck" => Some(ModuleFilter::Neck),
            "loss" => Some(ModuleFilter::Loss),
            _ => None,
        }
    }

    fn admits(&self, module: &str) -> bool {
        matches!(self, ModuleFilter::All)
            || matches!(
                (self, module),
                (ModuleFilter::Tensor, "tensor")
                    | (ModuleFilter::Dam, "dam")
                    | (ModuleFilter::Neck, "neck")
                    | (ModuleFilter::Loss, "loss")
            )
    }
}

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Uniform values in +-[0.1, 1.0]: bounded away from zero so ReLU kinks and
/// near-zero denominators stay clear of the finite-difference step.
fn gen_data(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.random_range(0.1..1.0);
            if rng.random_range(0.0..1.0) < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect()
}

fn leaf(rng: &mut ChaCha20Rng, shape: [usize; 4]) -> Tensor<f64> {
    let n = Shape(shape).numel();
    Tensor::param(Shape(shape), gen_data(rng, n)).expect("valid leaf")
}

/// Randomizes every parameter of a freshly built set, keeping magnitudes
/// moderate; offset convs get small nonzero weights so deformable sampling
/// happens at generic fractional positions.
fn randomize_params(set: &ParamSet<f64>, rng: &mut ChaCha20Rng) {
    for (name, t) in set.params() {
        let scale = if name.contains(".offset") { 0.15 } else { 0.4 };
        t.update_data(|d| {
            for v in d.iter_mut() {
                let mag = rng.random_range(0.05..1.0) * scale;
                *v = if rng.random_range(0.0..1.0) < 0.5 { -mag } else { mag };
            }
        });
    }
}

type Check = (
    &'static str,
    &'static str,
    Box<dyn Fn() -> Result<(Box<dyn Fn() -> Result<Tensor<f64>>>, Vec<Tensor<f64>>)>>,
);

fn checks() -> Vec<Check> {
    let mode = Mode::Train { update_stats: false };
    let mut list: Vec<Check> = Vec::new();

    list.push((
        "tensor",
        "elementwise_add_mul_sigmoid_relu",
        Box::new(|| {
            let mut r = rng(101);
            let a = leaf(&mut r, [1, 2, 3, 4]);
            let b = leaf(&mut r, [1, 2, 3, 4]);
            let (a2, b2) = (a.clone(), b.clone());
            Ok((
                Box::new(move || {
                    let s = sigmoid(&mul(&a2, &b2)?)?;
                    let t = relu(&crate::tensor::add(&s, &b2)?)?;
                    sum_all(&mul(&t, &t)?)
                }),
                vec![a, b],
            ))
        }),
    ));

    list.push((
        "tensor",
        "softmax_all_axes",
        Box::new(|| {
            let mut r = rng(102);
            let x = leaf(&mut r, [2, 3, 2, 4]);
            let x2 = x.clone();
            Ok((
                Box::new(move || {
                    let mut acc = Tensor::scalar(0.0);
                    for axis in 0..4 {
                        let s = softmax(&x2, axis)?;
                        acc = crate::tensor::add(&acc, &sum_all(&mul(&s, &s)?)?)?;
                    }
                    Ok(acc)
                }),
                vec![x],
            ))
        }),
    ));

    list.push((
        "tensor",
        "matmul_batched",
        Box::new(|| {
            let mut r = rng(103);
            let a = leaf(&mut r, [2, 2, 3, 4]);
            let b = leaf(&mut r, [2, 2, 4, 2]);
            let (a2, b2) = (a.clone(), b.clone());
            Ok((
                Box::new(move || {
                    let y = matmul(&a2, &b2)?;
                    sum_all(&mul(&y, &y)?)
                }),
                vec![a, b],
            ))
        }),
    ));

    list.push((
        "tensor",
        "conv2d_strided_grouped",
        Box::new(|| {
            let mut r = rng(104);
            let x = leaf(&mut r, [2, 4, 6, 6]);
            let w = leaf(&mut r, [6, 2, 3, 3]);
            let b = leaf(&mut r, [1, 6, 1, 1]);
            let (x2, w2, b2) = (x.clone(), w.clone(), b.clone());
            Ok((
                Box::new(move || {
                    let y = conv2d(&x2, &w2, Some(&b2), 2, (1, 1), 2)?;
                    sum_all(&mul(&y, &y)?)
                }),
                vec![x, w, b],
            ))
        }),
    ));

    list.push((
        "tensor",
        "deform_conv_row",
        Box::new(|| {
            let mut r = rng(105);
            let x = leaf(&mut r, [1, 3, 4, 7]);
            let w = leaf(&mut r, [3, 3, 1, 3]);
            let b = leaf(&mut r, [1, 3, 1, 1]);
            // Offsets at generic fractional positions, away from integers.
            let off = Tensor::param(
                Shape([1, 3, 4, 7]),
                (0..84)
                    .map(|_| {
                        let v: f64 = r.random_range(0.1..0.45);
                        if r.random_range(0.0..1.0) < 0.5 {
                            -v
                        } else {
                            v
                        }
                    })
                    .collect(),
            )
            .unwrap();
            let (x2, w2, b2, o2) = (x.clone(), w.clone(), b.clone(), off.clone());
            Ok((
                Box::new(move || {
                    let y = deform_conv1d(&x2, &w2, Some(&b2), &o2, DeformAxis::Row)?;
                    sum_all(&mul(&y, &y)?)
                }),
                vec![x, w, b, off],
            ))
        }),
    ));

    list.push((
        "tensor",
        "deform_conv_column_with_offset_branch",
        Box::new(|| {
            let mut r = rng(106);
            let mut set = ParamSet::new();
            let mut pb = ParamBuilder::new(&mut set, 1060);
            let deform = crate::dam::DirectionalDeform::new(
                &mut pb,
                "d",
                3,
                3,
                DeformAxis::Column,
            )?;
            randomize_params(&set, &mut r);
            let x = leaf(&mut r, [1, 3, 7, 4]);
            let x2 = x.clone();
            let inputs = vec![
                x,
                deform.weight.clone(),
                deform.bias.clone(),
                deform.offset.weight.clone(),
                deform.offset.bias.as_ref().unwrap().clone(),
            ];
            Ok((
                Box::new(move || {
                    let y = deform.forward(&x2)?;
                    sum_all(&mul(&y, &y)?)
                }),
                inputs,
            ))
        }),
    ));

    list.push((
        "tensor",
        "resize_bilinear_up_down",
        Box::new(|| {
            let mut r = rng(107);
            let x = leaf(&mut r, [1, 2, 4, 4]);
            let x2 = x.clone();
            Ok((
                Box::new(move || {
                    let up = resize_bilinear(&x2, 7, 9)?;
                    let down = resize_bilinear(&x2, 2, 3)?;
                    crate::tensor::add(&sum_all(&mul(&up, &up)?)?, &sum_all(&mul(&down, &down)?)?)
                }),
                vec![x],
            ))
        }),
    ));

    list.push((
        "tensor",
        "adaptive_avg_pool",
        Box::new(|| {
            let mut r = rng(108);
            let x = leaf(&mut r, [1, 2, 5, 6]);
            let x2 = x.clone();
            Ok((
                Box::new(move || {
                    let a = adaptive_avg_pool(&x2, 2, 3)?;
                    let b = adaptive_avg_pool(&x2, 5, 1)?;
                    crate::tensor::add(&sum_all(&mul(&a, &a)?)?, &sum_all(&mul(&b, &b)?)?)
                }),
                vec![x],
            ))
        }),
    ));

    list.push((
        "tensor",
        "batchnorm_train_mode",
        Box::new(|| {
            let mut r = rng(109);
            let x = leaf(&mut r, [3, 2, 3, 3]);
            let gamma = leaf(&mut r, [1, 2, 1, 1]);
            let beta = leaf(&mut r, [1, 2, 1, 1]);
            let rm = std::rc::Rc::new(std::cell::RefCell::new(vec![0.0f64; 2]));
            let rv = std::rc::Rc::new(std::cell::RefCell::new(vec![1.0f64; 2]));
            let (x2, g2, b2) = (x.clone(), gamma.clone(), beta.clone());
            Ok((
                Box::new(move || {
                    let y = batchnorm(
                        &x2,
                        &g2,
                        &b2,
                        &rm,
                        &rv,
                        0.03,
                        1e-3,
                        Mode::Train { update_stats: false },
                    )?;
                    sum_all(&mul(&y, &y)?)
                }),
                vec![x, gamma, beta],
            ))
        }),
    ));

    list.push((
        "tensor",
        "concat_and_gather",
        Box::new(|| {
            let mut r = rng(110);
            let a = leaf(&mut r, [1, 2, 3, 2]);
            let b = leaf(&mut r, [1, 3, 3, 2]);
            let (a2, b2) = (a.clone(), b.clone());
            Ok((
                Box::new(move || {
                    let cat = concat(&[&a2, &b2], 1)?;
                    let picked = crate::tensor::index_select(&cat, 1, &[4, 0, 2, 2])?;
                    sum_all(&mul(&picked, &picked)?)
                }),
                vec![a, b],
            ))
        }),
    ));

    list.push((
        "dam",
        "direction_aware_generation",
        Box::new(|| {
            let mut r = rng(201);
            let mut set = ParamSet::new();
            let mut pb = ParamBuilder::new(&mut set, 2010);
            let dam = DamParams::new(&mut pb, "dam", 4, 3, 16)?;
            randomize_params(&set, &mut r);
            let x = leaf(&mut r, [1, 4, 5, 6]);
            let x2 = x.clone();
            let mut inputs = vec![x];
            inputs.push(dam.row_deform.weight.clone());
            inputs.push(dam.col_deform.weight.clone());
            inputs.push(dam.row_deform.offset.weight.clone());
            Ok((
                Box::new(move || {
                    let y = direction_aware_generation(&x2, &dam)?;
                    sum_all(&mul(&y, &y)?)
                }),
                inputs,
            ))
        }),
    ));

    list.push((
        "dam",
        "dam_forward_full",
        Box::new(move || {
            let mut r = rng(202);
            let mut set = ParamSet::new();
            let mut pb = ParamBuilder::new(&mut set, 2020);
            let dam = DamParams::new(&mut pb, "dam", 4, 3, 2)?;
            randomize_params(&set, &mut r);
            let x = leaf(&mut r, [1, 4, 4, 5]);
            let x2 = x.clone();
            let inputs = vec![
                x,
                dam.cbr_conv.weight.clone(),
                dam.conv_h.weight.clone(),
                dam.conv_w.weight.clone(),
                dam.cbr_bn.gamma.clone(),
            ];
            Ok((
                Box::new(move || {
                    let y = dam_forward(&x2, &dam, mode)?;
                    sum_all(&mul(&y, &y)?)
                }),
                inputs,
            ))
        }),
    ));

    list.push((
        "dam",
        "backbone_tiny",
        Box::new(move || {
            let mut r = rng(203);
            let cfg = BackboneConfig {
                width: 4,
                stage_depths: [1, 1, 1, 1],
                ..Default::default()
            };
            let mut set = ParamSet::new();
            let mut pb = ParamBuilder::new(&mut set, 2030);
            let bb = Backbone::new(&mut pb, "bb", &cfg)?;
            randomize_params(&set, &mut r);
            let img = leaf(&mut r, [1, 1, 32, 32]);
            let img2 = img.clone();
            let inputs = vec![img, set.get("bb.stem.conv.weight").unwrap().clone()];
            Ok((
                Box::new(move || {
                    let pyr = bb.forward(&img2, mode)?;
                    let mut acc = Tensor::scalar(0.0);
                    for (_, t) in pyr.levels() {
                        acc = crate::tensor::add(&acc, &sum_all(&mul(t, t)?)?)?;
                    }
                    Ok(acc)
                }),
                inputs,
            ))
        }),
    ));

    list.push((
        "neck",
        "mam_align_both_modes",
        Box::new(|| {
            let mut r = rng(301);
            let a = leaf(&mut r, [1, 2, 8, 8]);
            let b = leaf(&mut r, [1, 3, 4, 4]);
            let c = leaf(&mut r, [1, 4, 2, 2]);
            let d = leaf(&mut r, [1, 5, 1, 1]);
            let mut set = ParamSet::new();
            let mut pb = ParamBuilder::new(&mut set, 3010);
            let add_params = MamParams::new(&mut pb, "mam", &[2, 3, 4, 5], AlignOp::Add);
            randomize_params(&set, &mut r);
            let concat_params = MamParams { projections: None, common_channels: 14 };
            let (a2, b2, c2, d2) = (a.clone(), b.clone(), c.clone(), d.clone());
            Ok((
                Box::new(move || {
                    let levels = [
                        (Level::C2, &a2),
                        (Level::C3, &b2),
                        (Level::C4, &c2),
                        (Level::C5, &d2),
                    ];
                    let cat = mam_align(&levels, &concat_params)?;
                    let summed = mam_align(&levels, &add_params)?;
                    crate::tensor::add(
                        &sum_all(&mul(&cat.fused, &cat.fused)?)?,
                        &sum_all(&mul(&summed.fused, &summed.fused)?)?,
                    )
                }),
                vec![a, b, c, d],
            ))
        }),
    ));

    list.push((
        "neck",
        "transformer_block",
        Box::new(move || {
            let mut r = rng(302);
            let mut set = ParamSet::new();
            let mut pb = ParamBuilder::new(&mut set, 3020);
            let block = TransformerBlock::new(&mut pb, "t", 8, 2)?;
            randomize_params(&set, &mut r);
            let x = leaf(&mut r, [1, 8, 2, 3]);
            let x2 = x.clone();
            let inputs = vec![
                x,
                block.q.weight.clone(),
                block.k.weight.clone(),
                block.v.weight.clone(),
                block.out.weight.clone(),
                block.cb1.conv.weight.clone(),
                block.dw.weight.clone(),
            ];
            Ok((
                Box::new(move || {
                    let y = block.forward(&x2, mode)?;
                    sum_all(&mul(&y, &y)?)
                }),
                inputs,
            ))
        }),
    ));

    list.push((
        "neck",
        "mem_embed_both_modes",
        Box::new(move || {
            let mut r = rng(303);
            let mut set = ParamSet::new();
            let mut pb = ParamBuilder::new(&mut set, 3030);
            let mem = MemParams::new(&mut pb, "mem", 4, 3, crate::neck::Compensation::Mem, (3, 2))?;
            let mem_add =
                MemParams::new(&mut pb, "mem_add", 4, 3, crate::neck::Compensation::Add, (3, 2))?;
            randomize_params(&set, &mut r);
            let local = leaf(&mut r, [1, 4, 3, 3]);
            let global = leaf(&mut r, [1, 3, 3, 3]);
            let (l2, g2) = (local.clone(), global.clone());
            let inputs = vec![
                local,
                global,
                mem.local_conv.weight.clone(),
                mem.global_conv.weight.clone(),
            ];
            Ok((
                Box::new(move || {
                    let y = mem.forward(&l2, &g2, mode)?;
                    let z = mem_add.forward(&l2, &g2, mode)?;
                    crate::tensor::add(&sum_all(&mul(&y, &y)?)?, &sum_all(&mul(&z, &z)?)?)
                }),
                inputs,
            ))
        }),
    ));

    list.push((
        "neck",
        "neck_forward_full",
        Box::new(move || {
            let mut r = rng(304);
            let mut set = ParamSet::new();
            let mut pb = ParamBuilder::new(&mut set, 3040);
            let cfg = NeckConfig { n_blocks: 1, heads: 2, ..Default::default() };
            let neck = Neck::new(&mut pb, "neck", [4, 8, 16, 32], &cfg, (3, 4))?;
            randomize_params(&set, &mut r);
            let c2 = leaf(&mut r, [1, 4, 8, 8]);
            let c3 = leaf(&mut r, [1, 8, 4, 4]);
            let c4 = leaf(&mut r, [1, 16, 2, 2]);
            let c5 = leaf(&mut r, [1, 32, 1, 1]);
            let inputs = vec![c2.clone(), c3.clone(), c4.clone(), c5.clone()];
            Ok((
                Box::new(move || {
                    let pyr = FeaturePyramid::new(vec![
                        (Level::C2, c2.clone()),
                        (Level::C3, c3.clone()),
                        (Level::C4, c4.clone()),
                        (Level::C5, c5.clone()),
                    ])?;
                    let out = neck.forward(&pyr, mode)?;
                    let mut acc = Tensor::scalar(0.0);
                    for (_, t) in out.levels() {
                        acc = crate::tensor::add(&acc, &sum_all(&mul(t, t)?)?)?;
                    }
                    Ok(acc)
                }),
                inputs,
            ))
        }),
    ));

    list.push((
        "loss",
        "vfl",
        Box::new(|| {
            let mut r = rng(401);
            let logits = leaf(&mut r, [1, 3, 2, 2]);
            let q: Vec<f64> = (0..12)
                .map(|i| if i % 4 == 0 { r.random_range(0.3..0.9) } else { 0.0 })
                .collect();
            let z2 = logits.clone();
            Ok((
                Box::new(move || vfl_loss_sum(&z2, &q, 0.75, 2.0)),
                vec![logits],
            ))
        }),
    ));

    list.push((
        "loss",
        "siou",
        Box::new(|| {
            let mut r = rng(402);
            // Boxes with generic geometry: distinct centers, positive areas.
            let mut coords = Vec::new();
            let mut gts = Vec::new();
            for _ in 0..4 {
                let x1 = r.random_range(0.0..6.0);
                let y1 = r.random_range(0.0..6.0);
                coords.extend([x1, y1, x1 + r.random_range(2.0..8.0), y1 + r.random_range(2.0..8.0)]);
                let gx1 = r.random_range(0.0..6.0) + 0.37;
                let gy1 = r.random_range(0.0..6.0) + 0.21;
                gts.push([gx1, gy1, gx1 + r.random_range(2.0..8.0), gy1 + r.random_range(2.0..8.0)]);
            }
            let pred = Tensor::param(Shape([4, 4, 1, 1]), coords).unwrap();
            let weights = vec![0.4, 0.1, 0.3, 0.2];
            let p2 = pred.clone();
            Ok((
                Box::new(move || siou_loss_sum(&p2, &gts, &weights)),
                vec![pred],
            ))
        }),
    ));

    list.push((
        "loss",
        "dfl",
        Box::new(|| {
            let mut r = rng(403);
            let logits = leaf(&mut r, [3, 4, 9, 1]);
            let targets: Vec<[f64; 4]> = (0..3)
                .map(|_| {
                    [
                        r.random_range(0.2..7.3),
                        r.random_range(0.2..7.3),
                        r.random_range(0.2..7.3),
                        r.random_range(0.2..7.3),
                    ]
                })
                .collect();
            let weights = vec![0.5, 0.2, 0.3];
            let z2 = logits.clone();
            Ok((
                Box::new(move || dfl_loss_sum(&z2, &targets, &weights)),
                vec![logits],
            ))
        }),
    ));

    list.push((
        "loss",
        "head_and_total_loss",
        Box::new(move || {
            let mut r = rng(404);
            let mut cfg = ModelConfig::default();
            cfg.backbone.width = 4;
            cfg.backbone.stage_depths = [1, 1, 1, 1];
            cfg.neck.n_blocks = 1;
            cfg.neck.heads = 2;
            cfg.head.num_classes = 2;
            cfg.head.reg_max = 8;
            let (model, set) = Detector::<f64>::build(&cfg, 4040)?;
            randomize_params(&set, &mut r);
            let img = leaf(&mut r, [1, 1, 32, 32]);
            let gts = vec![
                GtBox { x1: 3.0, y1: 4.0, x2: 17.0, y2: 15.0, cls: 0 },
                GtBox { x1: 18.0, y1: 16.0, x2: 30.0, y2: 29.0, cls: 1 },
            ];
            // Freeze the assignment once so the finite-difference closure sees
            // fixed targets.
            let out0 = model.forward(&img, mode)?;
            let anchors = enumerate_anchors(&out0);
            let decoded = decode_anchors(&out0, 0);
            let assign = assign_targets(&anchors, &gts, &decoded, cfg.head.reg_max);
            let img2 = img.clone();
            let weights = LossWeights::default();
            let inputs = vec![
                img,
                set.get("head.level0.cls_out.weight").unwrap().clone(),
                set.get("head.level0.reg_out.weight").unwrap().clone(),
                set.get("head.level2.reg_out.bias").unwrap().clone(),
            ];
            Ok((
                Box::new(move || {
                    let out = model.forward(&img2, mode)?;
                    let assigns = [Assignment {
                        matches: assign.matches.clone(),
                        sum_q: assign.sum_q,
                    }];
                    total_loss(&out, &assigns, &weights)
                }),
                inputs,
            ))
        }),
    ));

    list
}

use crate::head::Assignment;

/// Runs every check admitted by `filter`.
pub fn run(filter: ModuleFilter) -> Result<Vec<SuiteEntry>> {
    let mut entries = Vec::new();
    for (module, name, build) in checks() {
        if !filter.admits(module) {
            continue;
        }
        let started = std::time::Instant::now();
        let (closure, inputs) = build()?;
        let report = grad_check(&closure, &inputs, GRAD_STEP, GRAD_TOL)?;
        entries.push(SuiteEntry {
            module,
            name,
            max_rel_err: report.max_rel_err,
            pass: report.pass,
            coords: report.coords_checked,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(entries)
}

/// Negative control: the same suite must FAIL when the analytic gradient is
/// scaled by 1.01. Returns true when the injected error is detected.
pub fn negative_control() -> Result<bool> {
    let (_, _, build) = checks().remove(0);
    let (closure, inputs) = build()?;
    let report = grad_check_scaled(&closure, &inputs, GRAD_STEP, GRAD_TOL, 1.01)?;
    Ok(!report.pass)
}
