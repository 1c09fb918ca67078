//! Proximal sparse skip gating.
//!
//! Encoder features `x` and decoder context `g` are projected into a shared
//! latent space, combined into a multi-scale compatibility field `u`, and
//! sparsified by one ℓ1 proximal step (soft-thresholding with a learnable
//! per-channel threshold `λ = softplus(θ)`). The sparse field drives a
//! single-channel spatial mask `ψ`, while a small MLP over the pooled
//! decoder context produces a channel gate `c`; the gated skip is
//! `x ⊙ c ⊙ ψ`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{he_uniform, ConvSpec};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// `sign(u) · max(|u| − λ, 0)`; exactly `0.0` whenever `|u| ≤ λ`.
#[inline]
pub fn soft_threshold_scalar(u: f64, lambda: f64) -> f64 {
    if u > lambda {
        u - lambda
    } else if u < -lambda {
        u + lambda
    } else {
        0.0
    }
}

fn check_lambda(u_dims: &[usize], lambda: &[f64]) -> Result<usize> {
    let channels = *u_dims
        .get(1)
        .ok_or_else(|| Error::shape(format!("soft_threshold input {u_dims:?} has no channel axis")))?;
    if lambda.len() != channels {
        return Err(Error::shape(format!(
            "{} thresholds for {channels} channels",
            lambda.len()
        )));
    }
    if let Some(bad) = lambda.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::contract(format!("threshold {bad} is not non-negative")));
    }
    Ok(channels)
}

/// Per-channel soft-thresholding of `u` (`[N, C, ...]`) by `lambda` (`[C]`).
pub fn soft_threshold(u: &Tensor, lambda: &[f64]) -> Result<Tensor> {
    let channels = check_lambda(u.dims(), lambda)?;
    let inner: usize = u.dims()[2..].iter().product();
    let data = u
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| soft_threshold_scalar(v, lambda[(i / inner) % channels]))
        .collect();
    Tensor::from_values(u.dims(), data)
}

impl Tape {
    /// Recorded soft-thresholding. Gradients: `dz/du = 1` and
    /// `dz/dλ = −sign(u)` where `|u| > λ`, zero elsewhere (kinks included).
    pub fn soft_threshold(&mut self, u: Var, lambda: Var) -> Result<Var> {
        if self.value(lambda).rank() != 1 {
            return Err(Error::shape(format!(
                "thresholds must be rank 1, got {:?}",
                self.dims(lambda)
            )));
        }
        check_lambda(self.dims(u), self.value(lambda).data())?;
        let z = soft_threshold(self.value(u), self.value(lambda).data())?;
        let dims = z.dims().to_vec();
        Ok(self.push(&dims, z.into_data(), Op::SoftThreshold { u, lambda }, &[u, lambda]))
    }
}

/// Which parts of the gate are active. Mirrors the ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateVariant {
    /// `x ⊙ c ⊙ ψ`.
    Full,
    /// Spatial mask only: `x ⊙ ψ`.
    SsOnly,
    /// Channel gate only: `x ⊙ c`.
    CgOnly,
    /// Ungated skip.
    Plain,
    /// Dense sigmoid attention: `x ⊙ σ(Ψ(relu(q + k)))`, no proximal step.
    Dense,
}

impl GateVariant {
    pub const ALL: [GateVariant; 5] = [
        GateVariant::Full,
        GateVariant::SsOnly,
        GateVariant::CgOnly,
        GateVariant::Plain,
        GateVariant::Dense,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GateVariant::Full => "full",
            GateVariant::SsOnly => "ss-only",
            GateVariant::CgOnly => "cg-only",
            GateVariant::Plain => "plain",
            GateVariant::Dense => "dense",
        }
    }

    fn uses_projection(self) -> bool {
        matches!(self, GateVariant::Full | GateVariant::SsOnly | GateVariant::Dense)
    }

    pub fn uses_prox(self) -> bool {
        matches!(self, GateVariant::Full | GateVariant::SsOnly)
    }

    pub fn uses_channel_gate(self) -> bool {
        matches!(self, GateVariant::Full | GateVariant::CgOnly)
    }
}

impl fmt::Display for GateVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GateVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GateVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::contract(format!("unknown gate variant {s:?}")))
    }
}

/// `softplus⁻¹(0.05)`: thresholds start at 0.05 per channel.
pub fn default_theta_init() -> f64 {
    0.05f64.exp_m1().ln()
}

/// Shape and hyper-parameters of one gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSpec {
    /// Encoder (skip) channels.
    pub skip_channels: usize,
    /// Decoder context channels.
    pub context_channels: usize,
    /// Width of the latent compatibility space.
    pub latent_channels: usize,
    pub dilations: Vec<usize>,
    pub mlp_hidden: usize,
    pub theta_init: f64,
    pub variant: GateVariant,
}

impl GateSpec {
    /// Latent width `max(C_x/2, latent_min)`, MLP hidden width
    /// `max(C_g/reduction, 4)`.
    pub fn new(
        skip_channels: usize,
        context_channels: usize,
        variant: GateVariant,
        dilations: &[usize],
        latent_min: usize,
        reduction: usize,
        theta_init: f64,
    ) -> Self {
        Self {
            skip_channels,
            context_channels,
            latent_channels: (skip_channels / 2).max(latent_min),
            dilations: dilations.to_vec(),
            mlp_hidden: (context_channels / reduction.max(1)).max(4),
            theta_init,
            variant,
        }
    }

    /// Defaults: dilations (1, 2, 4), latent floor 8, reduction 4, λ₀ = 0.05.
    pub fn with_defaults(skip_channels: usize, context_channels: usize, variant: GateVariant) -> Self {
        Self::new(
            skip_channels,
            context_channels,
            variant,
            &[1, 2, 4],
            8,
            4,
            default_theta_init(),
        )
    }

    fn wx(&self) -> ConvSpec {
        ConvSpec::pointwise(self.skip_channels, self.latent_channels)
    }

    fn wg(&self) -> ConvSpec {
        ConvSpec::pointwise(self.context_channels, self.latent_channels)
    }

    fn dw(&self, d: usize) -> ConvSpec {
        ConvSpec::depthwise3(self.latent_channels, d)
    }

    fn fuse(&self) -> ConvSpec {
        ConvSpec::pointwise(self.dilations.len() * self.latent_channels, self.latent_channels)
    }

    fn psi(&self) -> ConvSpec {
        ConvSpec::pointwise(self.latent_channels, 1)
    }

    fn validate(&self) -> Result<()> {
        if self.variant.uses_prox() && self.dilations.is_empty() {
            return Err(Error::contract("gate needs at least one dilation"));
        }
        if self.dilations.contains(&0) {
            return Err(Error::contract("dilation rates must be at least 1"));
        }
        Ok(())
    }

    /// Number of scalar parameters this variant owns.
    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        if self.variant.uses_projection() {
            n += self.wx().num_scalars() + self.wg().num_scalars() + self.psi().num_scalars();
        }
        if self.variant.uses_prox() {
            n += self.dilations.iter().map(|&d| self.dw(d).num_scalars()).sum::<usize>();
            n += self.fuse().num_scalars() + self.latent_channels;
        }
        if self.variant.uses_channel_gate() {
            n += self.mlp_hidden * self.context_channels + self.mlp_hidden;
            n += self.skip_channels * self.mlp_hidden + self.skip_channels;
        }
        n
    }

    pub fn init(&self, prefix: &str, seed: u64, store: &mut ParamStore) -> Result<()> {
        self.validate()?;
        if self.variant.uses_projection() {
            self.wx().init(&format!("{prefix}.wx"), seed, store)?;
            self.wg().init(&format!("{prefix}.wg"), seed, store)?;
            self.psi().init(&format!("{prefix}.psi"), seed, store)?;
        }
        if self.variant.uses_prox() {
            for (i, &d) in self.dilations.iter().enumerate() {
                self.dw(d).init(&format!("{prefix}.dw{i}"), seed, store)?;
            }
            self.fuse().init(&format!("{prefix}.fuse"), seed, store)?;
            store.insert(
                format!("{prefix}.theta"),
                Tensor::full(&[self.latent_channels], self.theta_init)?,
            )?;
        }
        if self.variant.uses_channel_gate() {
            let (cg, hid, cx) = (self.context_channels, self.mlp_hidden, self.skip_channels);
            let w1 = format!("{prefix}.mlp1.weight");
            store.insert(&w1, he_uniform(&[hid, cg], cg, seed, &w1)?)?;
            store.insert(format!("{prefix}.mlp1.bias"), Tensor::zeros(&[hid])?)?;
            let w2 = format!("{prefix}.mlp2.weight");
            store.insert(&w2, he_uniform(&[cx, hid], hid, seed, &w2)?)?;
            store.insert(format!("{prefix}.mlp2.bias"), Tensor::zeros(&[cx])?)?;
        }
        Ok(())
    }

    /// `u = φ([D^(d₁) v, …, D^(dₘ) v])` with `v = relu(W_x x + W_g g)`.
    pub fn compatibility_field(
        &self,
        tape: &mut Tape,
        params: &Bound,
        prefix: &str,
        x: Var,
        g: Var,
    ) -> Result<CompatField> {
        let (q, k, v) = self.projections(tape, params, prefix, x, g)?;
        let mut stacked: Option<Var> = None;
        for (i, &d) in self.dilations.iter().enumerate() {
            let kernel = params.get(&format!("{prefix}.dw{i}.weight"))?;
            let branch = tape.depthwise_dilated_conv(v, kernel, d)?;
            stacked = Some(match stacked {
                None => branch,
                Some(acc) => tape.concat_channels(acc, branch)?,
            });
        }
        let stacked = stacked.ok_or_else(|| Error::contract("gate needs at least one dilation"))?;
        let u = self.fuse().apply(tape, params, &format!("{prefix}.fuse"), stacked)?;
        Ok(CompatField { q, k, v, u })
    }

    fn projections(
        &self,
        tape: &mut Tape,
        params: &Bound,
        prefix: &str,
        x: Var,
        g: Var,
    ) -> Result<(Var, Var, Var)> {
        let (n, _, h, w) = tape.value(x).nchw()?;
        let (ng, _, hg, wg) = tape.value(g).nchw()?;
        if (n, h, w) != (ng, hg, wg) {
            return Err(Error::shape(format!(
                "gate inputs misaligned: x {:?}, g {:?}",
                tape.dims(x),
                tape.dims(g)
            )));
        }
        let q = self.wx().apply(tape, params, &format!("{prefix}.wx"), x)?;
        let k = self.wg().apply(tape, params, &format!("{prefix}.wg"), g)?;
        let qk = tape.add(q, k)?;
        let v = tape.relu(qk);
        Ok((q, k, v))
    }

    /// `ψ = σ(Ψ(z))`, one channel.
    pub fn spatial_mask(&self, tape: &mut Tape, params: &Bound, prefix: &str, z: Var) -> Result<Var> {
        let logits = self.psi().apply(tape, params, &format!("{prefix}.psi"), z)?;
        Ok(tape.sigmoid(logits))
    }

    /// `c = σ(W₂ relu(W₁ GAP(g) + b₁) + b₂)`, shape `[N, C_x]`.
    pub fn channel_gate(&self, tape: &mut Tape, params: &Bound, prefix: &str, g: Var) -> Result<Var> {
        let pooled = tape.gap(g)?;
        let w1 = params.get(&format!("{prefix}.mlp1.weight"))?;
        let b1 = params.get(&format!("{prefix}.mlp1.bias"))?;
        let w2 = params.get(&format!("{prefix}.mlp2.weight"))?;
        let b2 = params.get(&format!("{prefix}.mlp2.bias"))?;
        let w1t = tape.transpose(w1)?;
        let h = tape.matmul(pooled, w1t)?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h);
        let w2t = tape.transpose(w2)?;
        let o = tape.matmul(h, w2t)?;
        let o = tape.add(o, b2)?;
        Ok(tape.sigmoid(o))
    }

    /// Gated skip features and the intermediates that produced them.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, prefix: &str, x: Var, g: Var) -> Result<GateOutput> {
        self.validate()?;
        let mut trace = GateTrace {
            variant: self.variant,
            ..GateTrace::default()
        };
        let (_, cx, _, _) = tape.value(x).nchw()?;
        if cx != self.skip_channels {
            return Err(Error::shape(format!(
                "gate expects {} skip channels, got {cx}",
                self.skip_channels
            )));
        }
        let out = match self.variant {
            GateVariant::Plain => {
                let (ng, _, hg, wg) = tape.value(g).nchw()?;
                let (n, _, h, w) = tape.value(x).nchw()?;
                if (n, h, w) != (ng, hg, wg) {
                    return Err(Error::shape("gate inputs misaligned"));
                }
                x
            }
            GateVariant::Dense => {
                let (q, k, v) = self.projections(tape, params, prefix, x, g)?;
                let psi = self.spatial_mask(tape, params, prefix, v)?;
                trace.q = Some(q);
                trace.k = Some(k);
                trace.v = Some(v);
                trace.psi = Some(psi);
                tape.mul(x, psi)?
            }
            GateVariant::Full | GateVariant::SsOnly | GateVariant::CgOnly => {
                let mut out = x;
                if self.variant.uses_channel_gate() {
                    let c = self.channel_gate(tape, params, prefix, g)?;
                    trace.channel_gate = Some(c);
                    out = tape.mul(out, c)?;
                }
                if self.variant.uses_prox() {
                    let field = self.compatibility_field(tape, params, prefix, x, g)?;
                    let theta = params.get(&format!("{prefix}.theta"))?;
                    let lambda = tape.softplus(theta);
                    let z = tape.soft_threshold(field.u, lambda)?;
                    let psi = self.spatial_mask(tape, params, prefix, z)?;
                    trace.q = Some(field.q);
                    trace.k = Some(field.k);
                    trace.v = Some(field.v);
                    trace.u = Some(field.u);
                    trace.lambda = Some(lambda);
                    trace.z_star = Some(z);
                    trace.psi = Some(psi);
                    out = tape.mul(out, psi)?;
                }
                out
            }
        };
        trace.output = Some(out);
        Ok(GateOutput { out, trace })
    }
}

/// Intermediates of the compatibility field.
#[derive(Clone, Copy, Debug)]
pub struct CompatField {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub u: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GateOutput {
    pub out: Var,
    pub trace: GateTrace,
}

/// Tape handles of the gate intermediates; `None` for parts the variant
/// does not compute.
#[derive(Clone, Copy, Debug)]
pub struct GateTrace {
    pub variant: GateVariant,
    pub q: Option<Var>,
    pub k: Option<Var>,
    pub v: Option<Var>,
    pub u: Option<Var>,
    pub lambda: Option<Var>,
    pub z_star: Option<Var>,
    pub psi: Option<Var>,
    pub channel_gate: Option<Var>,
    pub output: Option<Var>,
}

impl Default for GateTrace {
    fn default() -> Self {
        Self {
            variant: GateVariant::Plain,
            q: None,
            k: None,
            v: None,
            u: None,
            lambda: None,
            z_star: None,
            psi: None,
            channel_gate: None,
            output: None,
        }
    }
}

impl GateTrace {
    /// Fraction of positions per latent channel with `|u| ≤ λ_c`, i.e.
    /// exactly zeroed by the proximal step. Empty for variants without it.
    pub fn zero_fraction_per_channel(&self, tape: &Tape) -> Vec<f64> {
        let (Some(u), Some(lambda)) = (self.u, self.lambda) else {
            return Vec::new();
        };
        let u = tape.value(u);
        let lambda = tape.value(lambda).data();
        let (n, c, h, w) = u.nchw().expect("compatibility field is rank 4");
        let plane = h * w;
        let mut zeros = vec![0usize; c];
        for (i, &v) in u.data().iter().enumerate() {
            let ch = (i / plane) % c;
            if v.abs() <= lambda[ch] {
                zeros[ch] += 1;
            }
        }
        zeros.iter().map(|&z| z as f64 / (n * plane) as f64).collect()
    }

    /// Copies the trace off the tape. Missing masks are reported as
    /// all-ones sentinels so every variant yields the same fields.
    pub fn report(&self, tape: &Tape) -> Result<GateReport> {
        let out = self.output.ok_or_else(|| Error::contract("trace has no output"))?;
        let (n, cx, h, w) = tape.value(out).nchw()?;
        let psi = match self.psi {
            Some(p) => tape.value(p).clone(),
            None => Tensor::ones(&[n, 1, h, w])?,
        };
        let channel_gate = match self.channel_gate {
            Some(c) => tape.value(c).clone(),
            None => Tensor::ones(&[n, cx])?,
        };
        Ok(GateReport {
            variant: self.variant,
            lambda: self.lambda.map(|l| tape.value(l).data().to_vec()).unwrap_or_default(),
            zero_fraction_per_channel: self.zero_fraction_per_channel(tape),
            psi,
            channel_gate,
            u: self.u.map(|u| tape.value(u).clone()),
            z_star: self.z_star.map(|z| tape.value(z).clone()),
        })
    }
}

/// Materialised gate intermediates.
#[derive(Clone, Debug)]
pub struct GateReport {
    pub variant: GateVariant,
    pub lambda: Vec<f64>,
    pub zero_fraction_per_channel: Vec<f64>,
    pub psi: Tensor,
    pub channel_gate: Tensor,
    pub u: Option<Tensor>,
    pub z_star: Option<Tensor>,
}

/// A single gate with its own parameters, named under [`GateParams::PREFIX`].
#[derive(Clone, Debug)]
pub struct GateParams {
    pub spec: GateSpec,
    pub store: ParamStore,
}

impl GateParams {
    pub const PREFIX: &'static str = "gate";

    pub fn init(spec: GateSpec, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        spec.init(Self::PREFIX, seed, &mut store)?;
        Ok(Self { spec, store })
    }

    /// Mutable access by short name, e.g. `"theta"` or `"psi.bias"`.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.store.get_mut(&format!("{}.{name}", Self::PREFIX))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.store.get(&format!("{}.{name}", Self::PREFIX))
    }

    /// Current thresholds `softplus(θ)`.
    pub fn lambda(&self) -> Vec<f64> {
        self.get("theta")
            .map(|t| t.data().iter().map(|&v| softplus(v)).collect())
            .unwrap_or_default()
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, g: Var) -> Result<GateOutput> {
        self.spec.forward(tape, bound, Self::PREFIX, x, g)
    }
}
