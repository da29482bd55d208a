use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::branch::{shared_feature_channels, BoundBranch, BranchKind, BranchParams, ConvSpec};
use crate::density::{DensityMap, Resolution};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Gradients, Tape, Tensor, Var};

/// Network variants: the full two-branch model and its ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    Full,
    /// LR branch only; its output is upsampled (mass-preserving) to full size.
    LrAlone,
    /// HR branch only, nothing fused.
    HrAlone,
    /// HR fuses LR features but not the LR prediction.
    FeaturesOnly,
    /// HR fuses the LR prediction but not the LR features.
    PredictionOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::LrAlone,
        Variant::HrAlone,
        Variant::FeaturesOnly,
        Variant::PredictionOnly,
        Variant::Full,
    ];

    pub fn has_lr(self) -> bool {
        self != Variant::HrAlone
    }

    pub fn has_hr(self) -> bool {
        self != Variant::LrAlone
    }

    pub fn fuses_features(self) -> bool {
        matches!(self, Variant::Full | Variant::FeaturesOnly)
    }

    pub fn fuses_prediction(self) -> bool {
        matches!(self, Variant::Full | Variant::PredictionOnly)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::LrAlone => "lr-alone",
            Variant::HrAlone => "hr-alone",
            Variant::FeaturesOnly => "features-only",
            Variant::PredictionOnly => "prediction-only",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s.trim())
            .ok_or_else(|| Error::config(format!("unknown network variant {s:?}")))
    }
}

/// Structural configuration of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub variant: Variant,
    pub lr_resolution: Resolution,
    pub stages: usize,
    /// Divides every hidden channel width (1 = published widths).
    pub width_divisor: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            lr_resolution: Resolution::Quarter,
            stages: 1,
            width_divisor: 1,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::config("a network needs at least one stage"));
        }
        if self.width_divisor == 0 {
            return Err(Error::config("width divisor must be at least 1"));
        }
        if self.variant != Variant::Full && self.stages > 1 {
            return Err(Error::config(format!(
                "variant {} is single-stage only",
                self.variant
            )));
        }
        Ok(())
    }

    /// Extents must be multiples of this.
    pub fn input_multiple(&self) -> usize {
        self.lr_resolution.divisor().max(4)
    }

    /// Predictions of earlier stages fed into stage `k` (1-based).
    fn previous_maps(&self, k: usize) -> usize {
        2 * (k - 1)
    }

    fn fusion_extra_channels(&self, k: usize) -> usize {
        let mut extra = 0;
        if self.variant.fuses_features() {
            extra += shared_feature_channels(self.width_divisor);
        }
        if self.variant.fuses_prediction() {
            extra += 1;
        }
        if self.variant == Variant::Full {
            extra += self.previous_maps(k);
        }
        extra
    }
}

/// Predictions of one stage. `z_hat` is at the LR resolution, `y_hat` at
/// the input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutputs {
    pub z_hat: DensityMap,
    pub y_hat: DensityMap,
    pub shared_features: Option<Tensor>,
}

/// Tape handles of one stage's outputs.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    pub z_hat: Var,
    pub y_hat: Var,
    pub shared_features: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct StageBinding {
    lr: Option<BoundBranch>,
    hr: Option<BoundBranch>,
}

/// One LR/HR block.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    /// 1-based.
    pub index: usize,
    pub lr: Option<BranchParams>,
    pub hr: Option<BranchParams>,
}

fn resample_to_quarter(tape: &mut Tape, v: Var, from: Resolution) -> Result<Var> {
    match from {
        Resolution::Full => tape.block_sum(v, 4),
        Resolution::Half => tape.block_sum(v, 2),
        Resolution::Quarter => Ok(v),
        Resolution::Eighth => tape.upsample2(v),
    }
}

fn check_map(map: &DensityMap, dims: (usize, usize), what: &str) -> Result<()> {
    if map.dims() != dims {
        return Err(Error::shape(format!(
            "{what} is {}x{}, expected {}x{}",
            map.height(),
            map.width(),
            dims.0,
            dims.1
        )));
    }
    Ok(())
}

impl Stage {
    fn new(cfg: &NetConfig, index: usize) -> Result<Self> {
        let lr = cfg
            .variant
            .has_lr()
            .then(|| {
                BranchParams::lr(
                    index,
                    cfg.previous_maps(index),
                    cfg.lr_resolution,
                    cfg.width_divisor,
                    cfg.seed,
                )
            })
            .transpose()?;
        let hr = cfg
            .variant
            .has_hr()
            .then(|| BranchParams::hr(index, cfg.fusion_extra_channels(index), cfg.width_divisor, cfg.seed))
            .transpose()?;
        Ok(Self { index, lr, hr })
    }

    pub fn branches(&self) -> impl Iterator<Item = &BranchParams> {
        self.lr.iter().chain(self.hr.iter())
    }

    pub fn branches_mut(&mut self) -> impl Iterator<Item = &mut BranchParams> {
        self.lr.iter_mut().chain(self.hr.iter_mut())
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.branches_mut().for_each(|b| b.frozen = frozen);
    }

    pub fn is_frozen(&self) -> bool {
        self.branches().all(|b| b.frozen)
    }

    pub fn param_count(&self) -> usize {
        self.branches().map(BranchParams::param_count).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> StageBinding {
        StageBinding {
            lr: self.lr.as_ref().map(|b| b.bind(tape, trainable)),
            hr: self.hr.as_ref().map(|b| b.bind(tape, trainable)),
        }
    }

    pub fn install_grads(&mut self, binding: &StageBinding, grads: &Gradients) -> Result<()> {
        if let (Some(b), Some(bound)) = (self.lr.as_mut(), binding.lr.as_ref()) {
            b.install_grads(bound, grads)?;
        }
        if let (Some(b), Some(bound)) = (self.hr.as_mut(), binding.hr.as_ref()) {
            b.install_grads(bound, grads)?;
        }
        Ok(())
    }

    fn check_previous(&self, cfg: &NetConfig, prev: &[StageOutputs], dims: (usize, usize)) -> Result<()> {
        if prev.len() != self.index - 1 {
            return Err(Error::shape(format!(
                "stage {} needs {} earlier predictions, got {}",
                self.index,
                self.index - 1,
                prev.len()
            )));
        }
        let d = cfg.lr_resolution.divisor();
        for p in prev {
            check_map(&p.y_hat, dims, "previous high-resolution prediction")?;
            check_map(&p.z_hat, (dims.0 / d, dims.1 / d), "previous low-resolution prediction")?;
        }
        Ok(())
    }

    /// LR input: the image, then every earlier Z-hat upsampled to full size,
    /// then every earlier Y-hat.
    fn lr_input(&self, cfg: &NetConfig, tape: &mut Tape, image: Var, prev: &[StageOutputs]) -> Result<Var> {
        if prev.is_empty() {
            return Ok(image);
        }
        let d = cfg.lr_resolution.divisor();
        let mut parts = vec![image];
        for p in prev {
            let (h, w) = p.z_hat.dims();
            let up = kernels::upsample_bilinear_forward(p.z_hat.values(), 1, h, w, d);
            parts.push(tape.constant(Tensor::new(vec![1, h * d, w * d], up)?));
        }
        for p in prev {
            parts.push(tape.constant(p.y_hat.to_tensor()));
        }
        tape.concat_channels(&parts)
    }

    /// Everything concatenated after the HR trunk, at 1/4 resolution.
    fn fusion_inputs(
        &self,
        cfg: &NetConfig,
        tape: &mut Tape,
        z_hat: Option<Var>,
        shared: Option<Var>,
        prev: &[StageOutputs],
    ) -> Result<Vec<Var>> {
        let mut parts = Vec::new();
        if cfg.variant.fuses_features() {
            let s = shared.ok_or_else(|| Error::State("LR features missing at fusion".into()))?;
            parts.push(resample_to_quarter(tape, s, cfg.lr_resolution)?);
        }
        if cfg.variant.fuses_prediction() {
            let z = z_hat.ok_or_else(|| Error::State("LR prediction missing at fusion".into()))?;
            parts.push(resample_to_quarter(tape, z, cfg.lr_resolution)?);
        }
        if cfg.variant == Variant::Full {
            for p in prev {
                let z = tape.constant(p.z_hat.to_tensor());
                parts.push(resample_to_quarter(tape, z, cfg.lr_resolution)?);
            }
            for p in prev {
                let y = tape.constant(p.y_hat.to_tensor());
                parts.push(tape.block_sum(y, 4)?);
            }
        }
        Ok(parts)
    }

    /// Records this stage on `tape`. Earlier-stage predictions enter as
    /// constants, so no gradient reaches earlier stages.
    pub fn forward_taped(
        &self,
        cfg: &NetConfig,
        tape: &mut Tape,
        image: Var,
        prev: &[StageOutputs],
        trainable: bool,
    ) -> Result<(StageVars, StageBinding)> {
        let (_, h, w) = tape.value(image).chw()?;
        check_input_dims(cfg, h, w)?;
        self.check_previous(cfg, prev, (h, w))?;
        let binding = self.bind(tape, trainable);
        let d = cfg.lr_resolution.divisor();

        let lr_out = match (&self.lr, &binding.lr) {
            (Some(lr), Some(bound)) => {
                let input = self.lr_input(cfg, tape, image, prev)?;
                Some(lr.lr_forward(tape, bound, input)?)
            }
            _ => None,
        };
        let z_lr = lr_out.as_ref().map(|o| o.z_hat);
        let shared = lr_out.as_ref().map(|o| o.shared_features);

        let vars = match (&self.hr, &binding.hr) {
            (Some(hr), Some(bound)) => {
                let fusion = self.fusion_inputs(cfg, tape, z_lr, shared, prev)?;
                let y_hat = hr.hr_forward(tape, bound, image, &fusion)?;
                let z_hat = match z_lr {
                    Some(z) => z,
                    None => tape.block_sum(y_hat, d)?,
                };
                StageVars {
                    z_hat,
                    y_hat,
                    shared_features: shared,
                }
            }
            _ => {
                let z_hat = z_lr.ok_or_else(|| Error::State("stage has no branches".into()))?;
                let up = tape.upsample(z_hat, d)?;
                let y_hat = tape.scale(up, 1.0 / (d * d) as f64)?;
                StageVars {
                    z_hat,
                    y_hat,
                    shared_features: shared,
                }
            }
        };
        Ok((vars, binding))
    }

    fn outputs(cfg: &NetConfig, tape: &Tape, vars: &StageVars) -> Result<StageOutputs> {
        Ok(StageOutputs {
            z_hat: DensityMap::from_tensor(tape.value(vars.z_hat), cfg.lr_resolution)?,
            y_hat: DensityMap::from_tensor(tape.value(vars.y_hat), Resolution::Full)?,
            shared_features: vars.shared_features.map(|s| tape.value(s).clone()),
        })
    }

    /// Inference pass of this stage given earlier predictions.
    pub fn forward(&self, cfg: &NetConfig, image: &Tensor, prev: &[StageOutputs]) -> Result<StageOutputs> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let (vars, _) = self.forward_taped(cfg, &mut tape, x, prev, false)?;
        Self::outputs(cfg, &tape, &vars)
    }

    /// LR branch alone: the low-resolution prediction and shared features.
    pub fn lr_forward(&self, cfg: &NetConfig, image: &Tensor, prev: &[StageOutputs]) -> Result<(DensityMap, Tensor)> {
        let lr = self
            .lr
            .as_ref()
            .ok_or_else(|| Error::State(format!("variant {} has no LR branch", cfg.variant)))?;
        let (_, h, w) = image.chw()?;
        check_input_dims(cfg, h, w)?;
        self.check_previous(cfg, prev, (h, w))?;
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let bound = lr.bind(&mut tape, false);
        let input = self.lr_input(cfg, &mut tape, x, prev)?;
        let out = lr.lr_forward(&mut tape, &bound, input)?;
        Ok((
            DensityMap::from_tensor(tape.value(out.z_hat), cfg.lr_resolution)?,
            tape.value(out.shared_features).clone(),
        ))
    }

    /// HR branch alone, with explicit LR prediction and features.
    pub fn hr_forward(
        &self,
        cfg: &NetConfig,
        image: &Tensor,
        z_hat: &DensityMap,
        shared_features: &Tensor,
        prev: &[StageOutputs],
    ) -> Result<DensityMap> {
        let hr = self
            .hr
            .as_ref()
            .ok_or_else(|| Error::State(format!("variant {} has no HR branch", cfg.variant)))?;
        let (_, h, w) = image.chw()?;
        check_input_dims(cfg, h, w)?;
        self.check_previous(cfg, prev, (h, w))?;
        let d = cfg.lr_resolution.divisor();
        check_map(z_hat, (h / d, w / d), "low-resolution prediction")?;
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let bound = hr.bind(&mut tape, false);
        let z = tape.constant(z_hat.to_tensor());
        let s = tape.constant(shared_features.clone());
        let fusion = self.fusion_inputs(cfg, &mut tape, Some(z), Some(s), prev)?;
        let y = hr.hr_forward(&mut tape, &bound, x, &fusion)?;
        DensityMap::from_tensor(tape.value(y), Resolution::Full)
    }
}

fn check_input_dims(cfg: &NetConfig, h: usize, w: usize) -> Result<()> {
    let m = cfg.input_multiple();
    if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!(
            "input {h}x{w} must have extents divisible by {m}"
        )));
    }
    Ok(())
}

/// Per-layer parameter count entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCount {
    pub stage: usize,
    pub branch: BranchKind,
    pub spec: ConvSpec,
    pub count: usize,
}

/// A stack of one or more stages.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetConfig,
    stages: Vec<Stage>,
}

impl Network {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let stages = (1..=config.stages)
            .map(|k| Stage::new(&config, k))
            .collect::<Result<_>>()?;
        Ok(Self { config, stages })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// 1-based.
    pub fn stage(&self, k: usize) -> &Stage {
        &self.stages[k - 1]
    }

    pub fn stage_mut(&mut self, k: usize) -> &mut Stage {
        &mut self.stages[k - 1]
    }

    pub fn check_input(&self, image: &Tensor) -> Result<()> {
        let (c, h, w) = image.chw()?;
        if c != 3 {
            return Err(Error::shape(format!("expected a 3-channel image, got {c}")));
        }
        check_input_dims(&self.config, h, w)
    }

    /// Runs stages `1..=upto`, each consuming all earlier predictions as
    /// fixed inputs.
    pub fn forward_upto(&self, image: &Tensor, upto: usize) -> Result<Vec<StageOutputs>> {
        self.check_input(image)?;
        let mut outputs: Vec<StageOutputs> = Vec::with_capacity(upto);
        for stage in &self.stages[..upto] {
            let out = stage.forward(&self.config, image, &outputs)?;
            outputs.push(out);
        }
        Ok(outputs)
    }

    /// All stages; the last entry is the network's final prediction.
    pub fn forward(&self, image: &Tensor) -> Result<Vec<StageOutputs>> {
        self.forward_upto(image, self.stages.len())
    }

    /// Final stage outputs.
    pub fn predict(&self, image: &Tensor) -> Result<StageOutputs> {
        Ok(self.forward(image)?.pop().expect("at least one stage"))
    }

    /// Records stage `k` with trainable parameters on `tape`; stages before
    /// `k` are evaluated separately and enter as constants.
    pub fn forward_for_training(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        k: usize,
    ) -> Result<(StageVars, StageBinding)> {
        if k == 0 || k > self.stages.len() {
            return Err(Error::config(format!("no stage {k}")));
        }
        let prev = self.forward_upto(image, k - 1)?;
        let x = tape.constant(image.clone());
        self.stages[k - 1].forward_taped(&self.config, tape, x, &prev, true)
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(Stage::param_count).sum()
    }

    pub fn param_breakdown(&self) -> Vec<LayerCount> {
        self.stages
            .iter()
            .flat_map(|s| s.branches())
            .flat_map(|b| {
                b.conv_specs().map(move |spec| LayerCount {
                    stage: b.stage,
                    branch: b.kind,
                    spec: *spec,
                    count: spec.param_count(),
                })
            })
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.stages
            .iter()
            .flat_map(|s| s.branches())
            .flat_map(|b| b.named_tensors())
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.stages
            .iter_mut()
            .flat_map(|s| s.branches_mut())
            .flat_map(|b| b.named_tensors_mut())
            .collect()
    }

    /// Overwrites parameters from `(name, tensor)` pairs. Names not present
    /// in this network are ignored; shape mismatches are errors. Returns the
    /// number of tensors loaded.
    pub fn load_tensors<'a>(&mut self, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<usize> {
        let lookup: std::collections::HashMap<&str, &Tensor> = tensors.into_iter().collect();
        let mut loaded = 0;
        for (name, dst) in self.named_tensors_mut() {
            if let Some(src) = lookup.get(name.as_str()) {
                if src.shape() != dst.shape() {
                    return Err(Error::shape(format!(
                        "{name}: stored shape {:?} does not match {:?}",
                        src.shape(),
                        dst.shape()
                    )));
                }
                dst.data_mut().copy_from_slice(src.data());
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    /// Freezes stages `1..k` and unfreezes stage `k`.
    pub fn freeze_before(&mut self, k: usize) {
        for s in &mut self.stages {
            s.set_frozen(s.index < k);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant) -> NetConfig {
        NetConfig {
            variant,
            width_divisor: 8,
            ..NetConfig::default()
        }
    }

    #[test]
    fn single_stage_shapes() {
        let net = Network::new(tiny(Variant::Full)).unwrap();
        let x = Tensor::full(&[3, 16, 24], 0.5);
        let out = net.predict(&x).unwrap();
        assert_eq!(out.y_hat.dims(), (16, 24));
        assert_eq!(out.z_hat.dims(), (4, 6));
        assert_eq!(out.shared_features.unwrap().shape(), &[4, 4, 6]);
    }

    #[test]
    fn rejects_unaligned_input() {
        let net = Network::new(tiny(Variant::Full)).unwrap();
        assert!(matches!(net.predict(&Tensor::zeros(&[3, 18, 16])), Err(Error::Shape(_))));
    }

    #[test]
    fn ablations_are_single_stage() {
        let cfg = NetConfig {
            stages: 2,
            ..tiny(Variant::HrAlone)
        };
        assert!(matches!(Network::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn fusion_widths() {
        let full = Network::new(NetConfig::default()).unwrap();
        assert_eq!(full.stage(1).hr.as_ref().unwrap().fusion_input_channels(), Some(24 + 32 + 1));
        let feats = Network::new(NetConfig {
            variant: Variant::FeaturesOnly,
            ..NetConfig::default()
        })
        .unwrap();
        assert_eq!(feats.stage(1).hr.as_ref().unwrap().fusion_input_channels(), Some(24 + 32));
        let hr = Network::new(NetConfig {
            variant: Variant::HrAlone,
            ..NetConfig::default()
        })
        .unwrap();
        assert_eq!(hr.stage(1).hr.as_ref().unwrap().fusion_input_channels(), Some(24));
    }

    #[test]
    fn stage_channel_arithmetic() {
        let net = Network::new(NetConfig {
            stages: 3,
            width_divisor: 8,
            ..NetConfig::default()
        })
        .unwrap();
        assert_eq!(net.stage(2).lr.as_ref().unwrap().input_channels(), 5);
        assert_eq!(net.stage(3).lr.as_ref().unwrap().input_channels(), 7);
        // 3 (hr trunk) + 4 (features) + 1 (prediction) + 4 (earlier maps)
        assert_eq!(net.stage(3).hr.as_ref().unwrap().fusion_input_channels(), Some(12));
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut net = Network::new(tiny(Variant::Full)).unwrap();
        for (_, t) in net.named_tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let lr = net.stage_mut(1).lr.as_mut().unwrap();
        let last = lr.convs_mut().last_mut().unwrap();
        last.bias.data_mut()[0] = 0.25;
        let out = net.predict(&Tensor::full(&[3, 16, 16], 0.3)).unwrap();
        assert!(out.z_hat.values().iter().all(|&v| v == 0.25));
    }
}
