//! Executable checks: soft-thresholding properties and finite-difference
//! gradient verification of the tape.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::gate::{soft_threshold, soft_threshold_scalar, GateSpec, GateVariant};
use crate::loss::LossWeights;
use crate::model::{forward, ModelConfig, ModelParams};
use crate::nn::ConvGeom;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Deliberate faults for negative controls of [`theorem_check`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sabotage {
    #[default]
    None,
    /// Hard thresholding: survivors keep their full magnitude.
    ShrinkOff,
    /// Sub-threshold entries leak through scaled by 1e-3.
    Leak,
}

impl FromStr for Sabotage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Sabotage::None),
            "shrink-off" => Ok(Sabotage::ShrinkOff),
            "leak" => Ok(Sabotage::Leak),
            _ => Err(Error::contract(format!(
                "unknown sabotage mode {s:?} (none, shrink-off, leak)"
            ))),
        }
    }
}

impl Sabotage {
    fn apply(self, u: &Tensor, lambda: &[f64]) -> Result<Tensor> {
        if self == Sabotage::None {
            return soft_threshold(u, lambda);
        }
        let c = lambda.len();
        let inner: usize = u.dims()[2..].iter().product();
        let data = u
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let l = lambda[(i / inner) % c];
                match self {
                    Sabotage::ShrinkOff if v.abs() > l => v,
                    Sabotage::Leak if v.abs() <= l => 1e-3 * v,
                    _ => soft_threshold_scalar(v, l),
                }
            })
            .collect();
        Tensor::from_values(u.dims(), data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyOutcome {
    pub name: &'static str,
    pub trials: usize,
    pub violations: usize,
    pub first_violation: Option<String>,
}

impl PropertyOutcome {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            trials: 0,
            violations: 0,
            first_violation: None,
        }
    }

    fn record(&mut self, failure: Option<String>) {
        self.trials += 1;
        if let Some(f) = failure {
            self.violations += 1;
            self.first_violation.get_or_insert(f);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoremReport {
    pub trials: usize,
    pub seed: u64,
    pub sabotage: Sabotage,
    pub properties: Vec<PropertyOutcome>,
}

impl TheoremReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.violations == 0)
    }
}

/// Slack allowed in the non-expansiveness inequality.
pub const NONEXPANSIVE_SLACK: f64 = 1e-12;

fn frobenius(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Random `u` of shape `[1, C, L]`, occasionally with entries placed
/// exactly on `±λ`.
fn draw_field(rng: &mut ChaCha8Rng, lambda: &[f64], len: usize) -> Result<Tensor> {
    let c = lambda.len();
    let scale = rng.random_range(0.1..3.0);
    let mut data: Vec<f64> = (0..c * len)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut *rng);
            scale * e
        })
        .collect();
    if rng.random_bool(0.2) {
        let i = rng.random_range(0..data.len());
        let l = lambda[i / len];
        data[i] = if rng.random_bool(0.5) { l } else { -l };
    }
    Tensor::from_values(&[1, c, len], data)
}

/// Monotone sparsity in `λ`, non-expansiveness, exact zeros below the
/// threshold, and shrinkage (`‖z‖ ≤ ‖u‖`, signs kept, survivors reduced by
/// exactly `λ`).
pub fn theorem_check(trials: usize, seed: u64, sabotage: Sabotage) -> Result<TheoremReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nesting = PropertyOutcome::new("support-nesting");
    let mut nonexp = PropertyOutcome::new("non-expansive");
    let mut zeros = PropertyOutcome::new("exact-zero");
    let mut shrink = PropertyOutcome::new("shrinkage");
    for trial in 0..trials {
        let c = rng.random_range(1..=4);
        let len = rng.random_range(1..=16);
        let lam1: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.5)).collect();
        let lam2: Vec<f64> = lam1
            .iter()
            .map(|&l| if rng.random_bool(0.1) { l } else { l + rng.random_range(0.0..1.0) })
            .collect();
        let u = draw_field(&mut rng, &lam1, len)?;
        let delta = if rng.random_bool(0.5) { 1e-3 } else { 1.0 };
        let u2: Vec<f64> = u
            .data()
            .iter()
            .map(|&v| {
                let e: f64 = StandardNormal.sample(&mut rng);
                v + delta * e
            })
            .collect();
        let u2 = Tensor::from_values(u.dims(), u2)?;

        let z1 = sabotage.apply(&u, &lam1)?;
        let z2 = sabotage.apply(&u, &lam2)?;
        let escaped = z2
            .data()
            .iter()
            .zip(z1.data())
            .position(|(&b, &a)| b != 0.0 && a == 0.0);
        nesting.record(escaped.map(|i| {
            format!("trial {trial}: entry {i} active at the larger threshold but not the smaller")
        }));

        let z1b = sabotage.apply(&u2, &lam1)?;
        let lhs = frobenius(z1.data(), z1b.data());
        let rhs = frobenius(u.data(), u2.data());
        nonexp.record((lhs > rhs + NONEXPANSIVE_SLACK).then(|| {
            format!("trial {trial}: output distance {lhs:e} exceeds input distance {rhs:e}")
        }));

        let mut zero_fail = None;
        let mut shrink_fail = None;
        for (i, (&v, &z)) in u.data().iter().zip(z1.data()).enumerate() {
            let l = lam1[i / len];
            if v.abs() <= l && z.to_bits() != 0 {
                zero_fail.get_or_insert(format!("trial {trial}: |u|={} <= λ={l} gave {z:e}", v.abs()));
            }
            let tol = 4.0 * f64::EPSILON * v.abs().max(l);
            let bad = z.abs() > v.abs()
                || z * v < 0.0
                || (z != 0.0 && (v.abs() - z.abs() - l).abs() > tol);
            if bad {
                shrink_fail.get_or_insert(format!("trial {trial}: u={v} λ={l} gave {z}"));
            }
        }
        let (nz, nu) = (z1.norm(), u.norm());
        if nz > nu {
            shrink_fail.get_or_insert(format!("trial {trial}: ‖z‖={nz:e} exceeds ‖u‖={nu:e}"));
        }
        zeros.record(zero_fail);
        shrink.record(shrink_fail);
    }
    Ok(TheoremReport {
        trials,
        seed,
        sabotage,
        properties: vec![nesting, nonexp, zeros, shrink],
    })
}

/// Which part of the system a gradient check covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Ops,
    Gate,
    Model,
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "gate" => Ok(Scope::Gate),
            "model" => Ok(Scope::Model),
            _ => Err(Error::contract(format!("unknown scope {s:?} (ops, gate, model)"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Ops => "ops",
            Scope::Gate => "gate",
            Scope::Model => "model",
        })
    }
}

impl Scope {
    pub fn tolerance(self) -> f64 {
        match self {
            Scope::Ops | Scope::Gate => 1e-5,
            Scope::Model => 1e-4,
        }
    }
}

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Coordinates whose perturbation switches the branch of a non-smooth
/// element lying within this distance of its kink are excluded.
pub const KINK_BAND: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCase {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<String>,
    pub tolerance: f64,
    pub rejected_trials: usize,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub scope: Scope,
    pub seed: u64,
    pub step: f64,
    pub kink_band: f64,
    pub cases: Vec<GradCase>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(GradCase::passed)
    }

    /// Coordinates skipped plus random draws rejected near kinks.
    pub fn skipped(&self) -> usize {
        self.cases.iter().map(|c| c.skipped + c.rejected_trials).sum()
    }
}

/// `|a − n| / max(1, |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

type Builder<'a> = dyn Fn(&mut Tape, &Bound) -> Result<crate::Var> + 'a;

/// Compares tape gradients of `f` with central differences.
///
/// `f` may return any shape; it is reduced to a scalar through a fixed
/// random projection. `per_input` caps the coordinates checked in each
/// input (chosen at random when capped).
pub struct GradCheck<'a> {
    pub name: String,
    pub inputs: Vec<(String, Tensor)>,
    pub f: Box<Builder<'a>>,
    pub per_input: usize,
    pub tolerance: f64,
    /// Random draws discarded before this one for lying near a kink.
    pub rejected_trials: usize,
}

struct Eval {
    loss: f64,
    kinks: Vec<(f64, u8)>,
}

impl GradCheck<'_> {
    fn bind(&self, tape: &mut Tape, inputs: &[(String, Tensor)], trainable: bool) -> Bound {
        Bound::from_pairs(inputs.iter().map(|(n, t)| {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            (n.clone(), v)
        }))
    }

    fn reduce(tape: &mut Tape, out: crate::Var, proj: &Tensor) -> Result<crate::Var> {
        let r = tape.constant(proj.clone());
        let weighted = tape.mul(out, r)?;
        Ok(tape.sum(weighted))
    }

    fn eval(&self, inputs: &[(String, Tensor)], proj: &Tensor) -> Result<Eval> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, inputs, false);
        let out = (self.f)(&mut tape, &bound)?;
        let loss = Self::reduce(&mut tape, out, proj)?;
        Ok(Eval {
            loss: tape.value(loss).item()?,
            kinks: tape.kinks(),
        })
    }

    pub fn run(&self, rng: &mut ChaCha8Rng) -> Result<GradCase> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &self.inputs, true);
        let out = (self.f)(&mut tape, &bound)?;
        let dims = tape.dims(out).to_vec();
        let n: usize = dims.iter().product();
        let proj = Tensor::from_values(&dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let loss = Self::reduce(&mut tape, out, &proj)?;
        tape.backward(loss)?;
        let base_kinks = tape.kinks();

        let mut case = GradCase {
            name: self.name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            worst: None,
            tolerance: self.tolerance,
            rejected_trials: self.rejected_trials,
        };
        let mut work = self.inputs.clone();
        for (k, (name, t)) in self.inputs.iter().enumerate() {
            let var = bound.get(name)?;
            let grad = tape
                .grad(var)
                .ok_or_else(|| Error::contract(format!("no gradient reached {name:?}")))?
                .to_vec();
            let coords: Vec<usize> = if t.len() <= self.per_input {
                (0..t.len()).collect()
            } else {
                let mut c = sample(rng, t.len(), self.per_input).into_vec();
                c.sort_unstable();
                c
            };
            for i in coords {
                let x0 = t.data()[i];
                work[k].1.data_mut()[i] = x0 + FD_STEP;
                let plus = self.eval(&work, &proj)?;
                work[k].1.data_mut()[i] = x0 - FD_STEP;
                let minus = self.eval(&work, &proj)?;
                work[k].1.data_mut()[i] = x0;
                if straddles_kink(&base_kinks, &plus.kinks, &minus.kinks) {
                    case.skipped += 1;
                    continue;
                }
                let numeric = (plus.loss - minus.loss) / (2.0 * FD_STEP);
                let err = rel_err(grad[i], numeric);
                case.checked += 1;
                if err > case.max_rel_err || case.worst.is_none() {
                    case.max_rel_err = case.max_rel_err.max(err);
                    case.worst = Some(format!(
                        "{name}[{i}]: analytic {:.9e}, numeric {numeric:.9e}",
                        grad[i]
                    ));
                }
            }
        }
        Ok(case)
    }
}

/// True when some non-smooth element within [`KINK_BAND`] of its kink sits
/// on different branches across the three evaluations.
fn straddles_kink(base: &[(f64, u8)], plus: &[(f64, u8)], minus: &[(f64, u8)]) -> bool {
    if base.len() != plus.len() || base.len() != minus.len() {
        return true;
    }
    base.iter().zip(plus).zip(minus).any(|((b, p), m)| {
        let switched = b.1 != p.1 || b.1 != m.1;
        switched && b.0.min(p.0).min(m.0) < KINK_BAND
    })
}

fn normal(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor {
    let n = dims.iter().product();
    let data = (0..n).map(|_| {
            let e: f64 = StandardNormal.sample(&mut *rng);
            scale * e
        }).collect();
    Tensor::from_values(dims, data).expect("dims match data")
}

fn named(pairs: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<GradCheck<'static>> {
    let tol = Scope::Ops.tolerance();
    let mut cases = Vec::new();
    let mut add = |name: &str, inputs: Vec<(&str, Tensor)>, f: Box<Builder<'static>>| {
        cases.push(GradCheck {
            name: name.to_string(),
            inputs: named(inputs),
            f,
            per_input: usize::MAX,
            tolerance: tol,
            rejected_trials: 0,
        })
    };
    let binary_shapes: [(&str, &[usize], &[usize]); 4] = [
        ("same", &[2, 3, 4], &[2, 3, 4]),
        ("channel", &[2, 3, 4, 4], &[3]),
        ("sample-channel", &[2, 3, 4, 4], &[2, 3]),
        ("pixel", &[2, 3, 4, 4], &[2, 1, 4, 4]),
    ];
    for (tag, da, db) in binary_shapes {
        for op in ["add", "sub", "mul"] {
            let a = normal(rng, da, 1.0);
            let b = normal(rng, db, 1.0);
            add(
                &format!("{op}/{tag}"),
                vec![("a", a), ("b", b)],
                Box::new(move |t, p| {
                    let (a, b) = (p.get("a")?, p.get("b")?);
                    match op {
                        "add" => t.add(a, b),
                        "sub" => t.sub(a, b),
                        _ => t.mul(a, b),
                    }
                }),
            );
        }
    }
    let unary: [(&str, fn(&mut Tape, crate::Var) -> crate::Var); 7] = [
        ("relu", |t, x| t.relu(x)),
        ("sigmoid", |t, x| t.sigmoid(x)),
        ("softplus", |t, x| t.softplus(x)),
        ("sign", |t, x| t.sign(x)),
        ("abs", |t, x| t.abs(x)),
        ("max-scalar", |t, x| t.max_scalar(x, 0.25)),
        ("scale", |t, x| t.scale(x, -1.7)),
    ];
    for (name, f) in unary {
        let x = normal(rng, &[2, 3, 5], 2.0);
        add(name, vec![("x", x)], Box::new(move |t, p| Ok(f(t, p.get("x")?))));
    }
    let x = normal(rng, &[3, 4], 1.0);
    add("sum", vec![("x", x)], Box::new(|t, p| Ok(t.sum(p.get("x")?))));
    let x = normal(rng, &[3, 4], 1.0);
    add("mean", vec![("x", x)], Box::new(|t, p| Ok(t.mean(p.get("x")?))));
    let (a, b) = (normal(rng, &[3, 4], 1.0), normal(rng, &[4, 5], 1.0));
    add(
        "matmul",
        vec![("a", a), ("b", b)],
        Box::new(|t, p| t.matmul(p.get("a")?, p.get("b")?)),
    );
    let x = normal(rng, &[3, 5], 1.0);
    add("transpose", vec![("x", x)], Box::new(|t, p| t.transpose(p.get("x")?)));

    let convs: [(&str, [usize; 4], [usize; 4], bool, ConvGeom); 5] = [
        ("conv2d/3x3", [2, 3, 6, 7], [4, 3, 3, 3], true, ConvGeom::same(3, 1)),
        ("conv2d/3x3-d2", [1, 2, 7, 6], [3, 2, 3, 3], true, ConvGeom::same(3, 2)),
        ("conv2d/1x1", [2, 3, 5, 4], [5, 3, 1, 1], true, ConvGeom::POINTWISE),
        ("conv2d/valid", [1, 2, 6, 6], [2, 2, 3, 3], false, ConvGeom { padding: 0, dilation: 1, groups: 1 }),
        ("conv2d/grouped", [1, 4, 5, 5], [6, 2, 3, 3], true, ConvGeom { padding: 1, dilation: 1, groups: 2 }),
    ];
    for (name, xd, wd, bias, geom) in convs {
        let mut inputs = vec![("x", normal(rng, &xd, 1.0)), ("w", normal(rng, &wd, 0.5))];
        if bias {
            inputs.push(("bias", normal(rng, &[wd[0]], 0.5)));
        }
        add(
            name,
            inputs,
            Box::new(move |t, p| t.conv2d(p.get("x")?, p.get("w")?, p.opt("bias"), geom)),
        );
    }
    for d in [1, 2, 4] {
        let x = normal(rng, &[2, 3, 9, 9], 1.0);
        let k = normal(rng, &[3, 1, 3, 3], 0.5);
        add(
            &format!("depthwise/d{d}"),
            vec![("x", x), ("k", k)],
            Box::new(move |t, p| t.depthwise_dilated_conv(p.get("x")?, p.get("k")?, d)),
        );
    }
    let x = normal(rng, &[2, 2, 6, 4], 1.0);
    add("maxpool2", vec![("x", x)], Box::new(|t, p| t.maxpool2(p.get("x")?)));
    let x = normal(rng, &[2, 2, 3, 4], 1.0);
    add("bilinear-up2", vec![("x", x)], Box::new(|t, p| t.bilinear_up2(p.get("x")?)));
    let x = normal(rng, &[2, 3, 4, 5], 1.0);
    add("gap", vec![("x", x)], Box::new(|t, p| t.gap(p.get("x")?)));
    let (a, b) = (normal(rng, &[2, 2, 3, 3], 1.0), normal(rng, &[2, 3, 3, 3], 1.0));
    add(
        "concat",
        vec![("a", a), ("b", b)],
        Box::new(|t, p| t.concat_channels(p.get("a")?, p.get("b")?)),
    );
    let x = normal(rng, &[2, 5, 3, 3], 1.0);
    add("slice", vec![("x", x)], Box::new(|t, p| t.slice_channels(p.get("x")?, 1, 3)));
    let u = normal(rng, &[2, 3, 4, 4], 1.0);
    let theta = normal(rng, &[3], 1.0);
    add(
        "soft-threshold",
        vec![("u", u), ("theta", theta)],
        Box::new(|t, p| {
            let lambda = t.softplus(p.get("theta")?);
            t.soft_threshold(p.get("u")?, lambda)
        }),
    );
    let logits = normal(rng, &[2, 1, 4, 4], 2.0);
    let mask = Tensor::from_values(
        &[2, 1, 4, 4],
        (0..32).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect(),
    )
    .expect("dims match data");
    add(
        "dice-bce",
        vec![("logits", logits)],
        Box::new(move |t, p| t.dice_bce_loss(p.get("logits")?, &mask, LossWeights::default())),
    );
    cases
}

/// Randomises every parameter of `store` (θ included) so both sides of
/// every kink are exercised.
fn scramble(store: &ParamStore, rng: &mut ChaCha8Rng, scale: f64) -> Vec<(String, Tensor)> {
    store
        .iter()
        .map(|(n, t)| (n.to_string(), normal(rng, t.dims(), scale)))
        .collect()
}

/// Smallest `||u| − λ_c|` over the compatibility field of one gate pass.
fn soft_threshold_margin(spec: &GateSpec, inputs: &[(String, Tensor)]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = Bound::from_pairs(inputs.iter().map(|(n, t)| (n.clone(), tape.constant(t.clone()))));
    let out = spec.forward(&mut tape, &bound, "gate", bound.get("x")?, bound.get("g")?)?;
    let (Some(u), Some(lambda)) = (out.trace.u, out.trace.lambda) else {
        return Ok(f64::INFINITY);
    };
    let lam = tape.value(lambda).data();
    let (_, c, h, w) = tape.value(u).nchw()?;
    Ok(tape
        .value(u)
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v.abs() - lam[(i / (h * w)) % c]).abs())
        .fold(f64::INFINITY, f64::min))
}

/// Random gate parameters and inputs, redrawn while any compatibility
/// entry lies within [`KINK_BAND`] of its threshold. Returns the accepted
/// draw and the number of rejected ones.
fn draw_gate_trial(
    spec: &GateSpec,
    store: &ParamStore,
    rng: &mut ChaCha8Rng,
    n: usize,
) -> Result<(Vec<(String, Tensor)>, usize)> {
    for rejected in 0..1000 {
        let mut inputs = scramble(store, rng, 0.5);
        inputs.push(("x".into(), normal(rng, &[n, spec.skip_channels, 8, 8], 1.0)));
        inputs.push(("g".into(), normal(rng, &[n, spec.context_channels, 8, 8], 1.0)));
        if soft_threshold_margin(spec, &inputs)? >= KINK_BAND {
            return Ok((inputs, rejected));
        }
    }
    Err(Error::contract("no gate draw clear of the threshold kinks in 1000 attempts"))
}

const GATE_TRIALS: usize = 3;

fn gate_cases(rng: &mut ChaCha8Rng) -> Result<Vec<GradCheck<'static>>> {
    let mut cases = Vec::new();
    for variant in GateVariant::ALL {
        let spec = GateSpec::with_defaults(4, 6, variant);
        let mut store = ParamStore::new();
        spec.init("gate", 0, &mut store)?;
        for trial in 0..GATE_TRIALS {
            let (inputs, rejected) = draw_gate_trial(&spec, &store, rng, 2)?;
            let s = spec.clone();
            cases.push(GradCheck {
                name: format!("gate/{variant}/output/{trial}"),
                inputs,
                f: Box::new(move |t, p| Ok(s.forward(t, p, "gate", p.get("x")?, p.get("g")?)?.out)),
                per_input: 64,
                tolerance: Scope::Gate.tolerance(),
                rejected_trials: rejected,
            });
        }
        if variant.uses_prox() {
            let (inputs, rejected) = draw_gate_trial(&spec, &store, rng, 1)?;
            let s = spec.clone();
            cases.push(GradCheck {
                name: format!("gate/{variant}/sparse-field"),
                inputs,
                f: Box::new(move |t, p| {
                    Ok(s.forward(t, p, "gate", p.get("x")?, p.get("g")?)?
                        .trace
                        .z_star
                        .expect("prox variants record z"))
                }),
                per_input: 64,
                tolerance: Scope::Gate.tolerance(),
                rejected_trials: rejected,
            });
        }
    }
    Ok(cases)
}

/// Tiny network for every variant: base width 4, one 16×16 image,
/// subsampled coordinates in every parameter tensor.
fn model_cases(rng: &mut ChaCha8Rng, seed: u64) -> Result<Vec<GradCheck<'static>>> {
    let mut cases = Vec::new();
    for variant in GateVariant::ALL {
        let config = ModelConfig::default().with_base_channels(4).with_variant(variant);
        let params = ModelParams::init(config.clone(), seed)?;
        let mut inputs: Vec<(String, Tensor)> = params
            .store
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        for (name, t) in inputs.iter_mut() {
            if name.ends_with(".theta") || name.ends_with("bias") {
                *t = normal(rng, t.dims(), 0.5);
            }
        }
        let image = Tensor::from_values(&[1, 1, 16, 16], (0..256).map(|_| rng.random_range(0.0..1.0)).collect())?;
        inputs.push(("image".into(), image));
        let mask = Tensor::from_values(
            &[1, 1, 16, 16],
            (0..256).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect(),
        )?;
        cases.push(GradCheck {
            name: format!("model/{variant}/dice-bce"),
            inputs,
            f: Box::new(move |t, p| {
                let out = forward(&config, t, p, p.get("image")?)?;
                t.dice_bce_loss(out.logits, &mask, LossWeights::default())
            }),
            per_input: 3,
            tolerance: Scope::Model.tolerance(),
            rejected_trials: 0,
        });
    }
    Ok(cases)
}

pub fn gradcheck(scope: Scope, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let checks = match scope {
        Scope::Ops => op_cases(&mut rng),
        Scope::Gate => gate_cases(&mut rng)?,
        Scope::Model => model_cases(&mut rng, seed)?,
    };
    let cases = checks.iter().map(|c| c.run(&mut rng)).collect::<Result<Vec<_>>>()?;
    Ok(GradReport {
        scope,
        seed,
        step: FD_STEP,
        kink_band: KINK_BAND,
        cases,
    })
}
