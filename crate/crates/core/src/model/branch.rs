use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::density::Resolution;
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Layer list of the low-resolution branch at 1/4 output resolution.
pub const LR_REFERENCE: &str = "Conv3-64, Conv3-64, MaxPool, Conv3-128, Conv3-128, MaxPool, \
Conv3-256, Conv3-256, Conv3-256, Conv7-196, Conv5-96, Conv3-32, Conv1-1";

/// Layer list of the high-resolution branch (fusion point not shown).
pub const HR_REFERENCE: &str = "Conv7-16, MaxPool, Conv5-24, MaxPool, Conv3-48, Conv3-48, \
Conv3-24, Conv7-196, Conv5-96, Upsampling-2, Conv3-32, Upsampling-2, Conv1-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchKind {
    Lr,
    Hr,
}

impl BranchKind {
    pub fn tag(self) -> &'static str {
        match self {
            BranchKind::Lr => "lr",
            BranchKind::Hr => "hr",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub relu: bool,
}

impl ConvSpec {
    pub fn param_count(&self) -> usize {
        self.kernel * self.kernel * self.in_channels * self.out_channels + self.out_channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv(ConvSpec),
    MaxPool,
    Upsample2,
    /// Where the HR trunk (at 1/4 resolution) is concatenated with the LR
    /// features, LR prediction and earlier-stage predictions.
    Fusion,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv(c) => write!(f, "Conv{}-{}", c.kernel, c.out_channels),
            LayerSpec::MaxPool => f.write_str("MaxPool"),
            LayerSpec::Upsample2 => f.write_str("Upsampling-2"),
            LayerSpec::Fusion => f.write_str("Fusion"),
        }
    }
}

/// Weight `[Cout, Cin, k, k]` and bias `[Cout]` of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Scales a channel width by the network's width divisor (never below one).
pub(crate) fn scaled(width: usize, divisor: usize) -> usize {
    width.div_ceil(divisor).max(1)
}

/// Width of the LR feature map exported to the HR branch.
pub fn shared_feature_channels(width_divisor: usize) -> usize {
    scaled(32, width_divisor)
}

/// Ordered parameters of one branch of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    pub kind: BranchKind,
    /// 1-based stage index.
    pub stage: usize,
    pub frozen: bool,
    layers: Vec<LayerSpec>,
    convs: Vec<ConvParams>,
}

fn lr_layout(extra_input_channels: usize, resolution: Resolution, div: usize) -> Vec<LayerSpec> {
    let groups: [&[(usize, usize)]; 3] = [
        &[(3, 64), (3, 64)],
        &[(3, 128), (3, 128)],
        &[(3, 256), (3, 256), (3, 256)],
    ];
    let head = [(7, 196), (5, 96), (3, 32)];
    let pools = resolution.halvings();

    let mut layers = Vec::new();
    let mut cin = 3 + extra_input_channels;
    let mut conv = |layers: &mut Vec<LayerSpec>, k: usize, c: usize, relu: bool| {
        let cout = if relu { scaled(c, div) } else { c };
        layers.push(LayerSpec::Conv(ConvSpec {
            kernel: k,
            in_channels: cin,
            out_channels: cout,
            relu,
        }));
        cin = cout;
    };
    for (g, group) in groups.iter().enumerate() {
        for &(k, c) in group.iter() {
            conv(&mut layers, k, c, true);
        }
        if g < pools {
            layers.push(LayerSpec::MaxPool);
        }
    }
    for (k, c) in head {
        conv(&mut layers, k, c, true);
    }
    conv(&mut layers, 1, 1, false);
    layers
}

fn hr_layout(fusion_extra_channels: usize, div: usize) -> Vec<LayerSpec> {
    use LayerSpec::*;
    let c = |k, cin, cout, relu| {
        Conv(ConvSpec {
            kernel: k,
            in_channels: cin,
            out_channels: cout,
            relu,
        })
    };
    let s = |w| scaled(w, div);
    vec![
        c(7, 3, s(16), true),
        MaxPool,
        c(5, s(16), s(24), true),
        MaxPool,
        c(3, s(24), s(48), true),
        c(3, s(48), s(48), true),
        c(3, s(48), s(24), true),
        Fusion,
        c(7, s(24) + fusion_extra_channels, s(196), true),
        c(5, s(196), s(96), true),
        Upsample2,
        c(3, s(96), s(32), true),
        Upsample2,
        c(1, s(32), 1, false),
    ]
}

fn he_init(layers: &[LayerSpec], rng: &mut ChaCha8Rng) -> Vec<ConvParams> {
    layers
        .iter()
        .filter_map(|l| match l {
            LayerSpec::Conv(c) => Some(c),
            _ => None,
        })
        .map(|c| {
            let fan_in = c.in_channels * c.kernel * c.kernel;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let weight = Tensor::from_fn(&[c.out_channels, c.in_channels, c.kernel, c.kernel], |_| {
                normal.sample(rng)
            });
            ConvParams {
                weight,
                bias: Tensor::zeros(&[c.out_channels]),
            }
        })
        .collect()
}

/// Deterministic per-branch generator: one ChaCha stream per (stage, branch).
fn branch_rng(seed: u64, stage: usize, kind: BranchKind) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind_id = match kind {
        BranchKind::Lr => 0,
        BranchKind::Hr => 1,
    };
    rng.set_stream((stage as u64) * 2 + kind_id);
    rng
}

/// Convolutions of a branch bound to tape variables.
#[derive(Clone, Debug)]
pub struct BoundBranch {
    convs: Vec<(Var, Var)>,
    trainable: bool,
}

/// Intermediate results of the LR branch on a tape.
pub struct LrVars {
    pub z_hat: Var,
    pub shared_features: Var,
}

impl BranchParams {
    /// LR branch; `extra_input_channels` carries earlier-stage predictions.
    pub fn lr(
        stage: usize,
        extra_input_channels: usize,
        resolution: Resolution,
        width_divisor: usize,
        seed: u64,
    ) -> Result<Self> {
        let layers = lr_layout(extra_input_channels, resolution, width_divisor.max(1));
        let branch = Self::with_layers(BranchKind::Lr, stage, layers, seed);
        if width_divisor == 1 && resolution == Resolution::Quarter {
            branch.check_reference(LR_REFERENCE)?;
        }
        Ok(branch)
    }

    /// HR branch whose post-fusion convolution takes `24 + fusion_extra_channels`
    /// inputs (24 scaled by the width divisor).
    pub fn hr(stage: usize, fusion_extra_channels: usize, width_divisor: usize, seed: u64) -> Result<Self> {
        let layers = hr_layout(fusion_extra_channels, width_divisor.max(1));
        let branch = Self::with_layers(BranchKind::Hr, stage, layers, seed);
        if width_divisor == 1 {
            branch.check_reference(HR_REFERENCE)?;
        }
        Ok(branch)
    }

    fn with_layers(kind: BranchKind, stage: usize, layers: Vec<LayerSpec>, seed: u64) -> Self {
        let mut rng = branch_rng(seed, stage, kind);
        let convs = he_init(&layers, &mut rng);
        Self {
            kind,
            stage,
            frozen: false,
            layers,
            convs,
        }
    }

    fn check_reference(&self, reference: &str) -> Result<()> {
        let got = self.describe();
        if got != reference {
            return Err(Error::Contract(format!(
                "{} branch layout {got:?} differs from {reference:?}",
                self.kind.tag()
            )));
        }
        Ok(())
    }

    /// Comma-separated layer list, fusion marker omitted.
    pub fn describe(&self) -> String {
        self.layers
            .iter()
            .filter(|l| **l != LayerSpec::Fusion)
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn conv_specs(&self) -> impl Iterator<Item = &ConvSpec> {
        self.layers.iter().filter_map(|l| match l {
            LayerSpec::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn convs(&self) -> &[ConvParams] {
        &self.convs
    }

    pub fn convs_mut(&mut self) -> &mut [ConvParams] {
        &mut self.convs
    }

    pub fn input_channels(&self) -> usize {
        self.conv_specs().next().map_or(0, |c| c.in_channels)
    }

    /// Input channels of the first convolution after the fusion point.
    pub fn fusion_input_channels(&self) -> Option<usize> {
        let pos = self.layers.iter().position(|l| *l == LayerSpec::Fusion)?;
        self.layers[pos..].iter().find_map(|l| match l {
            LayerSpec::Conv(c) => Some(c.in_channels),
            _ => None,
        })
    }

    pub fn maxpool_count(&self) -> usize {
        self.layers.iter().filter(|l| **l == LayerSpec::MaxPool).count()
    }

    pub fn param_count(&self) -> usize {
        self.conv_specs().map(ConvSpec::param_count).sum()
    }

    /// `(name, tensor)` pairs, named `stage{k}.{lr|hr}.conv{i}.{weight|bias}`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let prefix = format!("stage{}.{}", self.stage, self.kind.tag());
        self.convs
            .iter()
            .enumerate()
            .flat_map(|(i, c)| {
                [
                    (format!("{prefix}.conv{i}.weight"), &c.weight),
                    (format!("{prefix}.conv{i}.bias"), &c.bias),
                ]
            })
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let prefix = format!("stage{}.{}", self.stage, self.kind.tag());
        self.convs
            .iter_mut()
            .enumerate()
            .flat_map(|(i, c)| {
                [
                    (format!("{prefix}.conv{i}.weight"), &mut c.weight),
                    (format!("{prefix}.conv{i}.bias"), &mut c.bias),
                ]
            })
            .collect()
    }

    /// Records the parameters on `tape`: as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundBranch {
        let convs = self
            .convs
            .iter()
            .map(|c| {
                if trainable {
                    (tape.param(&c.weight), tape.param(&c.bias))
                } else {
                    (tape.constant(c.weight.clone()), tape.constant(c.bias.clone()))
                }
            })
            .collect();
        BoundBranch { convs, trainable }
    }

    /// Copies gradients for a trainable binding into each tensor's `grad`.
    pub fn install_grads(&mut self, bound: &BoundBranch, grads: &Gradients) -> Result<()> {
        if !bound.trainable {
            return Err(Error::State("branch was bound as constants".into()));
        }
        for (params, &(w, b)) in self.convs.iter_mut().zip(&bound.convs) {
            grads.install(w, &mut params.weight)?;
            grads.install(b, &mut params.bias)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for c in &mut self.convs {
            c.weight.clear_grad();
            c.bias.clear_grad();
        }
    }

    /// Runs the layers in `range` of the layer list. Returns the output and,
    /// when present in the range, the activation feeding the final conv.
    fn run(
        &self,
        tape: &mut Tape,
        bound: &BoundBranch,
        mut x: Var,
        layers: std::ops::Range<usize>,
        conv_offset: usize,
    ) -> Result<(Var, Option<Var>, usize)> {
        let mut conv_idx = conv_offset;
        let last_conv = self.convs.len() - 1;
        let mut penultimate = None;
        for layer in &self.layers[layers] {
            match layer {
                LayerSpec::Conv(spec) => {
                    if conv_idx == last_conv {
                        penultimate = Some(x);
                    }
                    let (w, b) = bound.convs[conv_idx];
                    x = tape.conv2d(x, w, b)?;
                    if spec.relu {
                        x = tape.relu(x)?;
                    }
                    conv_idx += 1;
                }
                LayerSpec::MaxPool => x = tape.maxpool2(x)?,
                LayerSpec::Upsample2 => x = tape.upsample2(x)?,
                LayerSpec::Fusion => {
                    return Err(Error::State("fusion point reached in a linear run".into()))
                }
            }
        }
        Ok((x, penultimate, conv_idx))
    }

    /// LR branch on `input` (`[3 + extra, H, W]`): the prediction and the
    /// activation feeding the final 1x1 conv (the shared features).
    pub fn lr_forward(&self, tape: &mut Tape, bound: &BoundBranch, input: Var) -> Result<LrVars> {
        let (z_hat, shared, _) = self.run(tape, bound, input, 0..self.layers.len(), 0)?;
        Ok(LrVars {
            z_hat,
            shared_features: shared.expect("LR branch ends in a convolution"),
        })
    }

    /// HR branch: trunk up to the fusion point, concatenation with
    /// `fusion_inputs` (all at the trunk's 1/4 resolution), then the head.
    pub fn hr_forward(
        &self,
        tape: &mut Tape,
        bound: &BoundBranch,
        image: Var,
        fusion_inputs: &[Var],
    ) -> Result<Var> {
        let fusion = self
            .layers
            .iter()
            .position(|l| *l == LayerSpec::Fusion)
            .ok_or_else(|| Error::State("HR branch has no fusion point".into()))?;
        let (trunk, _, next_conv) = self.run(tape, bound, image, 0..fusion, 0)?;
        let mut parts = Vec::with_capacity(1 + fusion_inputs.len());
        parts.push(trunk);
        parts.extend_from_slice(fusion_inputs);
        let fused = tape.concat_channels(&parts)?;
        let expected = self.fusion_input_channels().unwrap_or(0);
        let got = tape.value(fused).shape()[0];
        if got != expected {
            return Err(Error::shape(format!(
                "fusion stack has {got} channels, branch expects {expected}"
            )));
        }
        let (y_hat, _, _) = self.run(tape, bound, fused, fusion + 1..self.layers.len(), next_conv)?;
        Ok(y_hat)
    }
}
