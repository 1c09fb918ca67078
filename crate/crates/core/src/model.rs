//! The U-shaped segmentation network with gated skip connections.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gate::{default_theta_init, GateSpec, GateTrace, GateVariant};
use crate::nn::{ConvSpec, ResBlockSpec};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub gate_variant: GateVariant,
    pub dilations: Vec<usize>,
    pub latent_min: usize,
    pub mlp_reduction: usize,
    pub theta_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            levels: 5,
            base_channels: 16,
            gate_variant: GateVariant::Full,
            dilations: vec![1, 2, 4],
            latent_min: 8,
            mlp_reduction: 4,
            theta_init: default_theta_init(),
        }
    }
}

impl ModelConfig {
    pub fn with_variant(mut self, variant: GateVariant) -> Self {
        self.gate_variant = variant;
        self
    }

    pub fn with_base_channels(mut self, base: usize) -> Self {
        self.base_channels = base;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::contract("network needs at least two levels"));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::contract("channel counts must be positive"));
        }
        Ok(())
    }

    /// Feature width at level `i` (1-based).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    /// Spatial extents must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    fn encoder(&self, level: usize) -> ResBlockSpec {
        let cin = if level == 1 {
            self.in_channels
        } else {
            self.channels(level - 1)
        };
        ResBlockSpec::new(cin, self.channels(level))
    }

    fn bottleneck(&self) -> ResBlockSpec {
        let c = self.channels(self.levels);
        ResBlockSpec::new(c, c)
    }

    fn up(&self, stage: usize) -> ConvSpec {
        ConvSpec::conv3(self.channels(stage + 1), self.channels(stage))
    }

    pub fn gate(&self, stage: usize) -> GateSpec {
        let c = self.channels(stage);
        GateSpec::new(
            c,
            c,
            self.gate_variant,
            &self.dilations,
            self.latent_min,
            self.mlp_reduction,
            self.theta_init,
        )
    }

    fn decoder(&self, stage: usize) -> ResBlockSpec {
        let c = self.channels(stage);
        ResBlockSpec::new(2 * c, c)
    }

    fn head(&self) -> ConvSpec {
        ConvSpec::pointwise(self.channels(1), 1)
    }

    /// Decoder stages from coarsest to finest.
    pub fn stages(&self) -> impl Iterator<Item = usize> {
        (1..self.levels).rev()
    }
}

/// Named parameters of a network together with its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
}

/// Logits and the per-stage gate traces, coarsest stage first.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub traces: Vec<(usize, GateTrace)>,
}

impl ModelParams {
    /// He-uniform weights, zero biases, `θ = theta_init`. Each tensor is drawn
    /// from an RNG keyed by `(seed, name)`, so parameters shared between
    /// variants are identical under the same seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        for level in 1..=config.levels {
            config.encoder(level).init(&format!("enc{level}"), seed, &mut store)?;
        }
        config.bottleneck().init("bottleneck", seed, &mut store)?;
        for stage in config.stages() {
            config.up(stage).init(&format!("up{stage}"), seed, &mut store)?;
            config.gate(stage).init(&format!("gate{stage}"), seed, &mut store)?;
            config.decoder(stage).init(&format!("dec{stage}"), seed, &mut store)?;
        }
        config.head().init("head", seed, &mut store)?;
        Ok(Self { config, store })
    }

    pub fn num_scalars(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.store.bind(tape, trainable)
    }

    /// Logits without gradient tracking.
    pub fn predict_logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = forward(&self.config, &mut tape, &bound, x)?;
        Ok(tape.value(out.logits).clone())
    }
}

pub fn check_input(config: &ModelConfig, dims: &[usize]) -> Result<()> {
    let [_, c, h, w] = dims[..] else {
        return Err(Error::shape(format!("input must be [N,C,H,W], got {dims:?}")));
    };
    if c != config.in_channels {
        return Err(Error::shape(format!(
            "model expects {} input channels, got {c}",
            config.in_channels
        )));
    }
    let div = config.spatial_divisor();
    if h % div != 0 || w % div != 0 {
        return Err(Error::shape(format!(
            "input {h}x{w} is not divisible by {div}"
        )));
    }
    Ok(())
}

/// Encoder → bottleneck → gated decoder → 1×1 head. Returns raw logits.
pub fn forward(config: &ModelConfig, tape: &mut Tape, params: &Bound, image: Var) -> Result<ForwardOutput> {
    check_input(config, tape.dims(image))?;
    let mut skips = Vec::with_capacity(config.levels);
    let mut h = image;
    for level in 1..=config.levels {
        if level > 1 {
            h = tape.maxpool2(h)?;
        }
        h = config.encoder(level).apply(tape, params, &format!("enc{level}"), h)?;
        skips.push(h);
    }
    let mut g = config
        .bottleneck()
        .apply(tape, params, "bottleneck", skips[config.levels - 1])?;
    let mut traces = Vec::with_capacity(config.levels - 1);
    for stage in config.stages() {
        let up = tape.bilinear_up2(g)?;
        let up = config.up(stage).apply(tape, params, &format!("up{stage}"), up)?;
        let gated = config
            .gate(stage)
            .forward(tape, params, &format!("gate{stage}"), skips[stage - 1], up)?;
        traces.push((stage, gated.trace));
        let cat = tape.concat_channels(gated.out, up)?;
        g = config.decoder(stage).apply(tape, params, &format!("dec{stage}"), cat)?;
    }
    let logits = config.head().apply(tape, params, "head", g)?;
    Ok(ForwardOutput { logits, traces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softplus;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::default().with_base_channels(4);
        let a = ModelParams::init(cfg.clone(), 11).unwrap();
        let b = ModelParams::init(cfg, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn theta_and_bias_init() {
        let p = ModelParams::init(ModelConfig::default().with_base_channels(4), 2).unwrap();
        let mut thetas = 0;
        for (name, t) in p.store.iter() {
            if name.ends_with(".theta") {
                thetas += 1;
                assert!(t.data().iter().all(|&v| v == default_theta_init()));
                assert!(t.data().iter().all(|&v| (softplus(v) - 0.05).abs() < 1e-15));
            }
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        assert_eq!(thetas, 4);
    }

    #[test]
    fn indivisible_input_rejected() {
        let p = ModelParams::init(ModelConfig::default().with_base_channels(2), 0).unwrap();
        let img = Tensor::zeros(&[1, 1, 24, 24]).unwrap();
        assert!(matches!(p.predict_logits(&img), Err(Error::Shape(_))));
    }
}
