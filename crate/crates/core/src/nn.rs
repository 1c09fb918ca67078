//! Convolution, pooling and resampling operators, plus the layer
//! descriptors the network is assembled from.

use rand::Rng;

use crate::autodiff::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvShape};
use crate::params::{param_rng, Bound, ParamStore};
use crate::tensor::Tensor;

/// Padding, dilation and grouping of a stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub const POINTWISE: ConvGeom = ConvGeom {
        padding: 0,
        dilation: 1,
        groups: 1,
    };

    /// Size-preserving geometry for an odd `k`×`k` kernel.
    pub fn same(k: usize, dilation: usize) -> Self {
        debug_assert!(k % 2 == 1);
        Self {
            padding: dilation * (k - 1) / 2,
            dilation,
            groups: 1,
        }
    }
}

impl Tape {
    /// Cross-correlation of `x` `[N,C_in,H,W]` with `weight`
    /// `[C_out, C_in/groups, kH, kW]`, zero padding, stride 1.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let shape = ConvShape::resolve(
            self.dims(x),
            self.dims(weight),
            geom.padding,
            geom.dilation,
            geom.groups,
        )?;
        if let Some(b) = bias {
            if self.dims(b) != [shape.cout] {
                return Err(Error::shape(format!(
                    "bias dims {:?} do not match {} output channels",
                    self.dims(b),
                    shape.cout
                )));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &shape,
        );
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(
            &shape.out_dims(),
            out,
            Op::Conv2d {
                x,
                w: weight,
                bias,
                shape,
            },
            &inputs,
        ))
    }

    /// Per-channel 3×3 convolution with dilation `d` and padding `d`.
    pub fn depthwise_dilated_conv(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let c = self.value(x).nchw()?.1;
        if self.dims(kernel) != [c, 1, 3, 3] {
            return Err(Error::shape(format!(
                "depthwise kernel dims {:?}, expected [{c}, 1, 3, 3]",
                self.dims(kernel)
            )));
        }
        let geom = ConvGeom {
            padding: dilation,
            dilation,
            groups: c,
        };
        self.conv2d(x, kernel, None, geom)
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("maxpool2 needs even extents, got {h}x{w}")));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(x).data(), n, c, h, w);
        Ok(self.push(&[n, c, h / 2, w / 2], out, Op::MaxPool2 { x, argmax }, &[x]))
    }

    pub fn bilinear_up2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let out = kernels::bilinear_up2_forward(self.value(x).data(), n * c, h, w);
        Ok(self.push(&[n, c, 2 * h, 2 * w], out, Op::BilinearUp2 { x }, &[x]))
    }

    /// Global average pooling to `[N, C]`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let plane = h * w;
        let out = self
            .value(x)
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        Ok(self.push(&[n, c], out, Op::Gap { x }, &[x]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).nchw()?;
        let (nb, cb, hb, wb) = self.value(b).nchw()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(format!(
                "concat of {:?} and {:?}: batch/spatial extents differ",
                self.dims(a),
                self.dims(b)
            )));
        }
        let plane = h * w;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for s in 0..n {
            out.extend_from_slice(&da[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&db[s * cb * plane..(s + 1) * cb * plane]);
        }
        Ok(self.push(&[n, ca + cb, h, w], out, Op::Concat { a, b }, &[a, b]))
    }

    /// Channels `start..start + len` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        if len == 0 || start + len > c {
            return Err(Error::shape(format!("channel slice {start}..{} of {c}", start + len)));
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * plane);
        for s in 0..n {
            out.extend_from_slice(&src[(s * c + start) * plane..][..len * plane]);
        }
        Ok(self.push(&[n, len, h, w], out, Op::SliceChannels { x, start }, &[x]))
    }
}

/// A convolution layer: its shape and how it is initialised and named.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub geom: ConvGeom,
    pub bias: bool,
}

impl ConvSpec {
    pub fn pointwise(cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            kernel: 1,
            geom: ConvGeom::POINTWISE,
            bias: true,
        }
    }

    pub fn conv3(cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            kernel: 3,
            geom: ConvGeom::same(3, 1),
            bias: true,
        }
    }

    pub fn depthwise3(channels: usize, dilation: usize) -> Self {
        Self {
            cin: channels,
            cout: channels,
            kernel: 3,
            geom: ConvGeom {
                padding: dilation,
                dilation,
                groups: channels,
            },
            bias: false,
        }
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.cout, self.cin / self.geom.groups, self.kernel, self.kernel]
    }

    pub fn fan_in(&self) -> usize {
        self.cin / self.geom.groups * self.kernel * self.kernel
    }

    pub fn num_scalars(&self) -> usize {
        self.weight_dims().iter().product::<usize>() + if self.bias { self.cout } else { 0 }
    }

    /// He-uniform weights in `±sqrt(6 / fan_in)`, zero bias.
    pub fn init(&self, prefix: &str, seed: u64, store: &mut ParamStore) -> Result<()> {
        let name = format!("{prefix}.weight");
        store.insert(&name, he_uniform(&self.weight_dims(), self.fan_in(), seed, &name)?)?;
        if self.bias {
            store.insert(format!("{prefix}.bias"), Tensor::zeros(&[self.cout])?)?;
        }
        Ok(())
    }

    pub fn apply(&self, tape: &mut Tape, params: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let w = params.get(&format!("{prefix}.weight"))?;
        let b = if self.bias {
            Some(params.get(&format!("{prefix}.bias"))?)
        } else {
            None
        };
        tape.conv2d(x, w, b, self.geom)
    }
}

pub fn he_uniform(dims: &[usize], fan_in: usize, seed: u64, name: &str) -> Result<Tensor> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = param_rng(seed, name);
    let n = dims.iter().product();
    let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_values(dims, values)
}

/// `relu(conv3(relu(conv3(x))) + shortcut(x))`, shortcut being identity
/// when the channel count is unchanged and a 1×1 convolution otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResBlockSpec {
    pub cin: usize,
    pub cout: usize,
}

impl ResBlockSpec {
    pub fn new(cin: usize, cout: usize) -> Self {
        Self { cin, cout }
    }

    fn layers(&self) -> (ConvSpec, ConvSpec, Option<ConvSpec>) {
        let skip = (self.cin != self.cout).then(|| ConvSpec::pointwise(self.cin, self.cout));
        (
            ConvSpec::conv3(self.cin, self.cout),
            ConvSpec::conv3(self.cout, self.cout),
            skip,
        )
    }

    pub fn num_scalars(&self) -> usize {
        let (a, b, s) = self.layers();
        a.num_scalars() + b.num_scalars() + s.map_or(0, |s| s.num_scalars())
    }

    pub fn init(&self, prefix: &str, seed: u64, store: &mut ParamStore) -> Result<()> {
        let (a, b, s) = self.layers();
        a.init(&format!("{prefix}.conv1"), seed, store)?;
        b.init(&format!("{prefix}.conv2"), seed, store)?;
        if let Some(s) = s {
            s.init(&format!("{prefix}.skip"), seed, store)?;
        }
        Ok(())
    }

    pub fn apply(&self, tape: &mut Tape, params: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let (a, b, s) = self.layers();
        let h = a.apply(tape, params, &format!("{prefix}.conv1"), x)?;
        let h = tape.relu(h);
        let h = b.apply(tape, params, &format!("{prefix}.conv2"), h)?;
        let shortcut = match s {
            Some(s) => s.apply(tape, params, &format!("{prefix}.skip"), x)?,
            None => x,
        };
        let sum = tape.add(h, shortcut)?;
        Ok(tape.relu(sum))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(dims: [usize; 4], vals: Vec<f64>) -> Tensor {
        Tensor::from_values(&dims, vals).unwrap()
    }

    #[test]
    fn pointwise_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t4([1, 3, 2, 2], (0..12).map(f64::from).collect()));
        let mut eye = vec![0.0; 9];
        for c in 0..3 {
            eye[c * 3 + c] = 1.0;
        }
        let w = tape.constant(t4([3, 3, 1, 1], eye));
        let y = tape.conv2d(x, w, None, ConvGeom::POINTWISE).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn all_ones_kernel_counts_taps() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 4, 5]).unwrap());
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]).unwrap());
        let y = tape.conv2d(x, w, None, ConvGeom::same(3, 1)).unwrap();
        let v = tape.value(y).data();
        assert_eq!(tape.dims(y), &[1, 1, 4, 5]);
        assert_eq!(v[0], 4.0);
        assert_eq!(v[4], 4.0);
        assert_eq!(v[5 + 1], 9.0);
        assert_eq!(v[5 * 2 + 3], 9.0);
        assert_eq!(v[5], 6.0);
    }

    #[test]
    fn conv_group_mismatch_is_shape_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 3, 4, 4]).unwrap());
        let w = tape.constant(Tensor::ones(&[2, 2, 1, 1]).unwrap());
        assert!(matches!(
            tape.conv2d(x, w, None, ConvGeom::POINTWISE),
            Err(Error::Shape(_))
        ));
        let k = tape.constant(Tensor::ones(&[2, 1, 3, 3]).unwrap());
        assert!(matches!(tape.depthwise_dilated_conv(x, k, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn depthwise_center_delta_is_identity() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..2 * 36).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.constant(t4([1, 2, 6, 6], vals));
        let mut k = vec![0.0; 18];
        k[4] = 1.0;
        k[9 + 4] = 1.0;
        let kv = tape.constant(t4([2, 1, 3, 3], k));
        for d in 1..=4 {
            let y = tape.depthwise_dilated_conv(x, kv, d).unwrap();
            assert_eq!(tape.value(y), tape.value(x));
        }
    }

    #[test]
    fn maxpool_examples() {
        let mut tape = Tape::new();
        let x = tape.param(t4([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let c = tape.constant(Tensor::full(&[1, 2, 4, 4], 2.5).unwrap());
        let yc = tape.maxpool2(c).unwrap();
        assert_eq!(tape.dims(yc), &[1, 2, 2, 2]);
        assert!(tape.value(yc).data().iter().all(|&v| v == 2.5));

        let odd = tape.constant(Tensor::ones(&[1, 1, 3, 2]).unwrap());
        assert!(matches!(tape.maxpool2(odd), Err(Error::Shape(_))));
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[1, 1, 2, 2], 5.0).unwrap());
        let y = tape.maxpool2(x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bilinear_constant_and_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 3, 5], -1.25).unwrap());
        let y = tape.bilinear_up2(x).unwrap();
        assert_eq!(tape.dims(y), &[2, 3, 6, 10]);
        assert!(tape.value(y).data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn gap_examples() {
        let mut tape = Tape::new();
        let x = tape.param(t4([1, 1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]));
        let g = tape.gap(x).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0]);
        let s = tape.sum(g);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn concat_and_slice() {
        let mut tape = Tape::new();
        let a = tape.constant(t4([2, 2, 1, 2], (0..8).map(f64::from).collect()));
        let b = tape.constant(t4([2, 3, 1, 2], (100..112).map(f64::from).collect()));
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.dims(c), &[2, 5, 1, 2]);
        assert_eq!(&tape.value(c).data()[..2], &tape.value(a).data()[..2]);
        let a2 = tape.slice_channels(c, 0, 2).unwrap();
        let b2 = tape.slice_channels(c, 2, 3).unwrap();
        assert_eq!(tape.value(a2), tape.value(a));
        assert_eq!(tape.value(b2), tape.value(b));
        let bad = tape.constant(Tensor::ones(&[2, 1, 2, 2]).unwrap());
        assert!(matches!(tape.concat_channels(a, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn res_block_zero_weights_is_relu() {
        let spec = ResBlockSpec::new(3, 3);
        let mut store = ParamStore::new();
        spec.init("blk", 0, &mut store).unwrap();
        for (_, t) in store.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let vals: Vec<f64> = (0..3 * 16).map(|i| (i as f64 * 0.7).cos()).collect();
        let x = tape.constant(t4([1, 3, 4, 4], vals));
        let y = spec.apply(&mut tape, &p, "blk", x).unwrap();
        let expect = tape.relu(x);
        assert_eq!(tape.value(y), tape.value(expect));
    }

    #[test]
    fn res_block_shapes() {
        for (cin, cout) in [(1, 4), (4, 4), (6, 3)] {
            let spec = ResBlockSpec::new(cin, cout);
            let mut store = ParamStore::new();
            spec.init("b", 3, &mut store).unwrap();
            assert_eq!(store.num_scalars(), spec.num_scalars());
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let x = tape.constant(Tensor::ones(&[2, cin, 6, 4]).unwrap());
            let y = spec.apply(&mut tape, &p, "b", x).unwrap();
            assert_eq!(tape.dims(y), &[2, cout, 6, 4]);
        }
    }

    #[test]
    fn he_bound_respected() {
        let t = he_uniform(&[8, 4, 3, 3], 36, 9, "w").unwrap();
        let bound = (6.0f64 / 36.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }
}
