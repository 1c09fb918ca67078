//! Loop and grid-search references shared by the oracle tests and the
//! acceptance suite.
#![allow(dead_code)]

use prosma::gate::soft_threshold_scalar;
use prosma::nn::ConvGeom;
use prosma::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_values(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub struct Conv {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub dil: usize,
    pub groups: usize,
}

impl Conv {
    pub fn out_hw(&self) -> (usize, usize) {
        let span = self.dil * (self.k - 1);
        (self.h + 2 * self.pad - span, self.w + 2 * self.pad - span)
    }

    /// Cross-correlation, seven nested loops.
    pub fn forward(&self, x: &[f64], wt: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let (ho, wo) = self.out_hw();
        let (cig, cog) = (self.cin / self.groups, self.cout / self.groups);
        let mut y = vec![0.0; self.n * self.cout * ho * wo];
        for n in 0..self.n {
            for co in 0..self.cout {
                let g = co / cog;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias.map_or(0.0, |b| b[co]);
                        for ci in 0..cig {
                            for ky in 0..self.k {
                                for kx in 0..self.k {
                                    let iy = (oy + ky * self.dil) as isize - self.pad as isize;
                                    let ix = (ox + kx * self.dil) as isize - self.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                                        continue;
                                    }
                                    let c = g * cig + ci;
                                    let xv = x[((n * self.cin + c) * self.h + iy as usize) * self.w + ix as usize];
                                    let wv = wt[((co * cig + ci) * self.k + ky) * self.k + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        y[((n * self.cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    /// Adjoint loops: gradients of `sum(y ⊙ gy)`.
    pub fn backward(&self, x: &[f64], wt: &[f64], gy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (ho, wo) = self.out_hw();
        let (cig, cog) = (self.cin / self.groups, self.cout / self.groups);
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; self.cout];
        for n in 0..self.n {
            for co in 0..self.cout {
                let g = co / cog;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = gy[((n * self.cout + co) * ho + oy) * wo + ox];
                        db[co] += gv;
                        for ci in 0..cig {
                            for ky in 0..self.k {
                                for kx in 0..self.k {
                                    let iy = (oy + ky * self.dil) as isize - self.pad as isize;
                                    let ix = (ox + kx * self.dil) as isize - self.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                                        continue;
                                    }
                                    let xi = ((n * self.cin + g * cig + ci) * self.h + iy as usize) * self.w + ix as usize;
                                    let wi = ((co * cig + ci) * self.k + ky) * self.k + kx;
                                    dx[xi] += gv * wt[wi];
                                    dw[wi] += gv * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        (dx, dw, db)
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub const ORACLE_TOL: f64 = 1e-12;

/// Runs the tape convolution forward and backward and compares both with
/// the loop references.
pub fn check_conv(rng: &mut ChaCha8Rng, c: &Conv, bias: bool, depthwise: bool) -> f64 {
    let x = random(rng, &[c.n, c.cin, c.h, c.w]);
    let wt = random(rng, &[c.cout, c.cin / c.groups, c.k, c.k]);
    let b = bias.then(|| random(rng, &[c.cout]));
    let (ho, wo) = c.out_hw();
    let gy = random(rng, &[c.n, c.cout, ho, wo]);

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let wv = tape.param(wt.clone());
    let bv = b.clone().map(|b| tape.param(b));
    let y = if depthwise {
        tape.depthwise_dilated_conv(xv, wv, c.dil).unwrap()
    } else {
        let geom = ConvGeom {
            padding: c.pad,
            dilation: c.dil,
            groups: c.groups,
        };
        tape.conv2d(xv, wv, bv, geom).unwrap()
    };
    let want = c.forward(x.data(), wt.data(), b.as_ref().map(|b| b.data()));
    let mut worst = max_abs_diff(tape.value(y).data(), &want);

    let g = tape.constant(gy.clone());
    let prod = tape.mul(y, g).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    let (dx, dw, db) = c.backward(x.data(), wt.data(), gy.data());
    worst = worst.max(max_abs_diff(tape.grad(xv).unwrap(), &dx));
    worst = worst.max(max_abs_diff(tape.grad(wv).unwrap(), &dw));
    if let Some(bv) = bv {
        worst = worst.max(max_abs_diff(tape.grad(bv).unwrap(), &db));
    }
    worst
}
/// Worst forward/backward deviation over 100 random dense configurations.
pub fn dense_sweep(seed: u64) -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        let groups = [1, 1, 2, 3][rng.random_range(0..4)];
        let k = [1, 3, 3, 5][rng.random_range(0..4)];
        let dil = rng.random_range(1..=3);
        let c = Conv {
            n: rng.random_range(1..=2),
            cin: groups * rng.random_range(1..=3),
            cout: groups * rng.random_range(1..=3),
            h: rng.random_range(dil * (k - 1) + 1..=dil * (k - 1) + 8),
            w: rng.random_range(dil * (k - 1) + 1..=dil * (k - 1) + 8),
            k,
            pad: rng.random_range(0..=2),
            dil,
            groups,
        };
        let bias = rng.random_bool(0.5);
        let err = check_conv(&mut rng, &c, bias, false);
        worst = worst.max(err);
    }
    worst
}

/// Worst forward/backward deviation over 100 random depthwise configurations.
pub fn depthwise_sweep(seed: u64) -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        let ch = rng.random_range(1..=5);
        let d = [1, 2, 4][rng.random_range(0..3)];
        let c = Conv {
            n: rng.random_range(1..=2),
            cin: ch,
            cout: ch,
            h: rng.random_range(1..=12),
            w: rng.random_range(1..=12),
            k: 3,
            pad: d,
            dil: d,
            groups: ch,
        };
        let err = check_conv(&mut rng, &c, false, true);
        worst = worst.max(err);
    }
    worst
}

/// Worst forward/backward deviation over 100 random pointwise configurations.
pub fn pointwise_sweep(seed: u64) -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        let c = Conv {
            n: rng.random_range(1..=3),
            cin: rng.random_range(1..=6),
            cout: rng.random_range(1..=6),
            h: rng.random_range(1..=9),
            w: rng.random_range(1..=9),
            k: 1,
            pad: 0,
            dil: 1,
            groups: 1,
        };
        let bias = rng.random_bool(0.5);
        let err = check_conv(&mut rng, &c, bias, false);
        worst = worst.max(err);
    }
    worst
}

/// Minimiser of `½(z−u)² + λ|z|` over a uniform grid of step 1e-4.
pub fn grid_minimiser(u: f64, lambda: f64) -> f64 {
    const STEP: f64 = 1e-4;
    let lo = (u.min(0.0) - 1.0) / STEP;
    let hi = (u.max(0.0) + 1.0) / STEP;
    let mut best = (f64::INFINITY, 0.0);
    let mut i = lo.floor() as i64;
    while i as f64 <= hi.ceil() {
        let z = i as f64 * STEP;
        let obj = 0.5 * (z - u) * (z - u) + lambda * z.abs();
        if obj < best.0 {
            best = (obj, z);
        }
        i += 1;
    }
    best.1
}

/// Largest gap between the closed form and the grid minimiser over `n`
/// random scalars.
pub fn prox_sweep(seed: u64, n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let u = rng.random_range(-3.0..3.0);
        let lambda = rng.random_range(0.0..2.0);
        worst = worst.max((soft_threshold_scalar(u, lambda) - grid_minimiser(u, lambda)).abs());
    }
    worst
}
