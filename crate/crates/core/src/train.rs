//! Two-term loss, SGD with momentum, crop augmentation and the stage-wise
//! training protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{self, DensityMap, DotAnnotations, Resolution};
use crate::error::{Error, Result};
use crate::model::{BranchParams, NetConfig, Network, Variant};
use crate::tensor::{Tape, Tensor, Var};

/// Hyperparameters of a training run. Defaults follow the published setup
/// (learning rate 1e-4, momentum 0.9, batch size 1, loss weights 1e-2 / 1e2,
/// Gaussian sigma 5, LR output at 1/4 resolution).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub lambda_l: f64,
    pub lambda_h: f64,
    /// Crop side as a fraction of the image side, in `(0, 1]`.
    pub crop_fraction: f64,
    /// Iterations per stage.
    pub iterations: usize,
    pub seed: u64,
    pub stages: usize,
    pub sigma: f64,
    pub lr_resolution: Resolution,
    pub variant: Variant,
    pub width_divisor: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            momentum: 0.9,
            batch_size: 1,
            lambda_l: 1e-2,
            lambda_h: 1e2,
            crop_fraction: 1.0 / 3.0,
            iterations: 1000,
            seed: 0,
            stages: 1,
            sigma: 5.0,
            lr_resolution: Resolution::Quarter,
            variant: Variant::Full,
            width_divisor: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size != 1 {
            return Err(Error::config("only batch_size = 1 is supported"));
        }
        if self.lambda_l < 0.0 || self.lambda_h < 0.0 || self.lambda_l.is_nan() || self.lambda_h.is_nan() {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.lambda_l == 0.0 && self.lambda_h == 0.0 {
            return Err(Error::config("lambda_l and lambda_h cannot both be zero"));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::config(format!("crop_fraction must be in (0, 1], got {}", self.crop_fraction)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config(format!("sigma must be positive, got {}", self.sigma)));
        }
        self.net_config().validate()
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            variant: self.variant,
            lr_resolution: self.lr_resolution,
            stages: self.stages,
            width_divisor: self.width_divisor,
            seed: self.seed,
        }
    }
}

/// A training image with its full-resolution ground truth, both padded to
/// the network's input multiple.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub id: String,
    pub image: Tensor,
    pub density: DensityMap,
    pub count: f64,
    /// Extent before padding.
    pub original: (usize, usize),
}

impl TrainSample {
    pub fn new(id: impl Into<String>, image: &Tensor, ann: &DotAnnotations, sigma: f64, multiple: usize) -> Result<Self> {
        let (_, h, w) = image.chw()?;
        if (ann.height, ann.width) != (h, w) {
            return Err(Error::shape(format!(
                "annotations are for {}x{} but the image is {h}x{w}",
                ann.height, ann.width
            )));
        }
        let y = density::gaussian_density(ann, sigma)?;
        let padded = density::pad_to_multiple(image, std::slice::from_ref(&y), multiple)?;
        Ok(Self {
            id: id.into(),
            image: padded.image,
            density: padded.maps.into_iter().next().expect("one map in, one out"),
            count: ann.count() as f64,
            original: padded.original,
        })
    }
}

/// Spatially aligned training crop.
#[derive(Clone, Debug)]
pub struct Crop {
    pub image: Tensor,
    pub y: DensityMap,
    pub z: DensityMap,
    pub top: usize,
    pub left: usize,
}

/// Crop extent for one axis: `floor(n * fraction)` rounded down to `multiple`.
fn crop_extent(n: usize, fraction: f64, multiple: usize) -> usize {
    let raw = (n as f64 * fraction + 1e-9).floor() as usize;
    raw / multiple * multiple
}

/// Crops image and density at a uniformly random offset. The LR target is
/// the block sum of the density crop at `lr_resolution`.
pub fn random_crop<R: Rng>(
    image: &Tensor,
    y: &DensityMap,
    fraction: f64,
    lr_resolution: Resolution,
    rng: &mut R,
) -> Result<Crop> {
    let (_, h, w) = image.chw()?;
    if y.dims() != (h, w) {
        return Err(Error::shape(format!(
            "density {}x{} does not match image {h}x{w}",
            y.height(),
            y.width()
        )));
    }
    let multiple = lr_resolution.divisor().max(4);
    let ch = crop_extent(h, fraction, multiple);
    let cw = crop_extent(w, fraction, multiple);
    if ch < 16 || cw < 16 {
        return Err(Error::config(format!(
            "crop of {h}x{w} at fraction {fraction} is {ch}x{cw}, below the 16x16 minimum"
        )));
    }
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    let y_crop = y.crop(top, left, ch, cw)?;
    let z = density::downsample_sum(&y_crop, lr_resolution.divisor())?;
    Ok(Crop {
        image: image.crop(top, left, ch, cw)?,
        y: y_crop,
        z,
        top,
        left,
    })
}

/// Tape handles of the weighted loss and its two terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub low: Var,
    pub high: Var,
}

/// `lambda_l * SSE(z_hat, z_gt) + lambda_h * SSE(y_hat, y_gt)`, SSE summed
/// over pixels of one sample.
pub fn iccnn_loss(
    tape: &mut Tape,
    z_hat: Var,
    z_gt: Var,
    y_hat: Var,
    y_gt: Var,
    lambda_l: f64,
    lambda_h: f64,
) -> Result<LossVars> {
    let sse_l = tape.sum_squared_error(z_hat, z_gt)?;
    let sse_h = tape.sum_squared_error(y_hat, y_gt)?;
    let low = tape.scale(sse_l, lambda_l)?;
    let high = tape.scale(sse_h, lambda_h)?;
    let total = tape.add(low, high)?;
    Ok(LossVars { total, low, high })
}

/// Loss value on plain maps (no tape).
pub fn iccnn_loss_value(
    z_hat: &DensityMap,
    z_gt: &DensityMap,
    y_hat: &DensityMap,
    y_gt: &DensityMap,
    lambda_l: f64,
    lambda_h: f64,
) -> Result<f64> {
    let sse = |a: &DensityMap, b: &DensityMap| -> Result<f64> {
        if a.dims() != b.dims() {
            return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
        }
        Ok(a.values().iter().zip(b.values()).map(|(p, t)| (p - t) * (p - t)).sum())
    };
    Ok(lambda_l * sse(z_hat, z_gt)? + lambda_h * sse(y_hat, y_gt)?)
}

/// Classic momentum update: `v = momentum * v + g; p = p - lr * v`.
pub fn sgd_momentum_step(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Velocity buffers, keyed by parameter name, for unfrozen parameters only.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub velocity: BTreeMap<String, Vec<f64>>,
}

/// SGD with momentum over whole branches.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub state: OptimizerState,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            state: OptimizerState::default(),
        }
    }

    /// Applies one update to every tensor of `branch` using its installed
    /// gradients. Frozen branches are refused.
    pub fn step(&mut self, branch: &mut BranchParams) -> Result<()> {
        if branch.frozen {
            return Err(Error::Contract(format!(
                "attempted to update frozen {} branch of stage {}",
                branch.kind.tag(),
                branch.stage
            )));
        }
        for (name, tensor) in branch.named_tensors_mut() {
            let grad = tensor
                .grad()
                .ok_or_else(|| Error::State(format!("{name} has no gradient")))?
                .to_vec();
            let velocity = self
                .state
                .velocity
                .entry(name)
                .or_insert_with(|| vec![0.0; grad.len()]);
            sgd_momentum_step(tensor.data_mut(), &grad, velocity, self.learning_rate, self.momentum);
            tensor.clear_grad();
        }
        Ok(())
    }
}

/// One line of the loss log; `loss_l` and `loss_h` are the weighted terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub loss: f64,
    pub loss_l: f64,
    pub loss_h: f64,
}

/// `iter<TAB>loss<TAB>loss_l<TAB>loss_h`, one line per iteration, with
/// round-trip float formatting.
pub fn format_loss_log(records: &[LossRecord]) -> String {
    let mut out = String::new();
    for r in records {
        writeln!(out, "{}\t{}\t{}\t{}", r.iter, r.loss, r.loss_l, r.loss_h).unwrap();
    }
    out
}

/// Per-stage sampling RNG.
fn stage_rng(seed: u64, stage: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5eed_0000 + stage as u64);
    rng
}

/// One training step on a single crop for stage `k`; returns the loss terms.
pub fn train_step(net: &mut Network, sgd: &mut Sgd, crop: &Crop, cfg: &TrainConfig, k: usize, iter: usize) -> Result<LossRecord> {
    let diverged = |loss: f64, loss_l: f64, loss_h: f64| Error::Diverged {
        iteration: iter,
        loss,
        loss_l,
        loss_h,
    };
    let mut tape = Tape::new();
    let (vars, binding) = match net.forward_for_training(&mut tape, &crop.image, k) {
        Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN, f64::NAN, f64::NAN)),
        other => other?,
    };
    let z_gt = tape.constant(crop.z.to_tensor());
    let y_gt = tape.constant(crop.y.to_tensor());
    let loss = match iccnn_loss(&mut tape, vars.z_hat, z_gt, vars.y_hat, y_gt, cfg.lambda_l, cfg.lambda_h) {
        Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN, f64::NAN, f64::NAN)),
        other => other?,
    };
    let record = LossRecord {
        iter,
        loss: tape.value(loss.total).data()[0],
        loss_l: tape.value(loss.low).data()[0],
        loss_h: tape.value(loss.high).data()[0],
    };
    if !record.loss.is_finite() {
        return Err(diverged(record.loss, record.loss_l, record.loss_h));
    }
    let grads = tape.backward(loss.total)?;
    let stage = net.stage_mut(k);
    stage.install_grads(&binding, &grads)?;
    drop(tape);
    for branch in stage.branches_mut() {
        sgd.step(branch)?;
    }
    Ok(record)
}

/// Trains stage `k` of `net` for `cfg.iterations` steps with every earlier
/// stage frozen. Images are drawn uniformly with replacement.
pub fn train_stage(net: &mut Network, samples: &[TrainSample], cfg: &TrainConfig, k: usize) -> Result<Vec<LossRecord>> {
    if samples.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    cfg.validate()?;
    net.freeze_before(k);
    let mut rng = stage_rng(cfg.seed, k);
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut log = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let sample = &samples[rng.random_range(0..samples.len())];
        let crop = random_crop(&sample.image, &sample.density, cfg.crop_fraction, cfg.lr_resolution, &mut rng)?;
        log.push(train_step(net, &mut sgd, &crop, cfg, k, iter)?);
    }
    Ok(log)
}

/// Fresh single-stage network trained on `samples`.
pub fn train_single_stage(samples: &[TrainSample], cfg: &TrainConfig) -> Result<(Network, Vec<LossRecord>)> {
    cfg.validate()?;
    let mut net = Network::new(NetConfig {
        stages: 1,
        ..cfg.net_config()
    })?;
    let log = train_stage(&mut net, samples, cfg, 1)?;
    Ok((net, log))
}

/// Trains stages `first..=stages` of `net` in order, freezing each before
/// moving on. `on_stage` runs after every stage (e.g. to checkpoint).
pub fn train_stages<F>(
    net: &mut Network,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    first: usize,
    mut on_stage: F,
) -> Result<Vec<Vec<LossRecord>>>
where
    F: FnMut(usize, &Network, &[LossRecord]) -> Result<()>,
{
    let stages = net.stages().len();
    if first == 0 || first > stages {
        return Err(Error::config(format!("first stage {first} outside 1..={stages}")));
    }
    let mut logs = Vec::new();
    for k in first..=stages {
        let log = train_stage(net, samples, cfg, k)?;
        net.stage_mut(k).set_frozen(true);
        on_stage(k, net, &log)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Fresh `cfg.stages`-stage network trained stage by stage.
pub fn train_multi_stage<F>(samples: &[TrainSample], cfg: &TrainConfig, on_stage: F) -> Result<(Network, Vec<Vec<LossRecord>>)>
where
    F: FnMut(usize, &Network, &[LossRecord]) -> Result<()>,
{
    cfg.validate()?;
    let mut net = Network::new(cfg.net_config())?;
    let logs = train_stages(&mut net, samples, cfg, 1, on_stage)?;
    Ok((net, logs))
}
