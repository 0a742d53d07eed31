//! Fully connected velocity network `v(x, t)` with Swish hidden activations
//! and hand-written reverse-mode gradients of the flow-matching loss.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::{config, contract, Error, Result};
use crate::points::PointSet;
use crate::rng::{stream_rng, streams};

const MAGIC: &[u8; 8] = b"SGFMLP01";

/// Hidden widths of the reference architecture.
pub const DEFAULT_HIDDEN: [usize; 4] = [512; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(fan_in, fan_out)`, applied as `x W + b` to row-vector batches.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Gradients with the same shapes as the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    data_dim: usize,
    layers: Vec<Dense>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

impl Mlp {
    /// Network taking `(x, t)` with `x` of dimension `data_dim`, returning a
    /// `data_dim` velocity. Weights and biases are drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(data_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if data_dim == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(config("network dimensions must be positive"));
        }
        let mut sizes = vec![data_dim + 1];
        sizes.extend_from_slice(hidden);
        sizes.push(data_dim);
        let mut rng = stream_rng(seed, streams::INIT);
        let layers = sizes
            .windows(2)
            .map(|io| {
                let bound = 1.0 / (io[0] as f64).sqrt();
                let w = Array2::from_shape_fn((io[0], io[1]), |_| rng.random_range(-bound..bound));
                let b = Array1::from_shape_fn(io[1], |_| rng.random_range(-bound..bound));
                Dense { w, b }
            })
            .collect();
        Ok(Self { data_dim, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + 1
    }

    pub fn output_dim(&self) -> usize {
        self.data_dim
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    /// Widths from input to output.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.w.ncols()));
        s
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn check_input(&self, input: &Array2<f64>) -> Result<()> {
        if input.ncols() != self.input_dim() {
            return Err(contract(format!(
                "network expects {} input columns, got {}",
                self.input_dim(),
                input.ncols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(input)?;
        let last = self.layers.len() - 1;
        let mut a = input.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.w);
            z += &layer.b;
            if l < last {
                z.mapv_inplace(swish);
            }
            a = z;
        }
        Ok(a)
    }

    /// Mean over rows of the squared error `|out - target|^2`.
    pub fn loss(&self, input: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
        let out = self.forward(input)?;
        Ok(mse(&out, target))
    }

    /// Loss and its gradient with respect to every weight and bias.
    pub fn loss_and_grad(
        &self,
        input: &Array2<f64>,
        target: &Array2<f64>,
    ) -> Result<(f64, Gradients)> {
        self.check_input(input)?;
        if target.nrows() != input.nrows() || target.ncols() != self.output_dim() {
            return Err(contract("target shape does not match network output"));
        }
        let last = self.layers.len() - 1;
        // acts[l] feeds layer l; pres[l] is layer l's pre-activation.
        let mut acts = vec![input.to_owned()];
        let mut pres = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = acts[l].dot(&layer.w);
            z += &layer.b;
            let a = if l < last { z.mapv(swish) } else { z.clone() };
            pres.push(z);
            acts.push(a);
        }
        let out = &acts[self.layers.len()];
        let loss = mse(out, target);
        let rows = input.nrows() as f64;
        let mut delta = (out - target) * (2.0 / rows);
        let mut grads = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let gw = acts[l].t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            grads.push(Dense { w: gw, b: gb });
            if l > 0 {
                let mut back = delta.dot(&self.layers[l].w.t());
                back.zip_mut_with(&pres[l - 1], |d, z| *d *= swish_grad(*z));
                delta = back;
            }
        }
        grads.reverse();
        Ok((loss, Gradients { layers: grads }))
    }

    /// Velocity at each point of `xs` at the common time `t`.
    pub fn velocity_batch(&self, xs: &PointSet, t: f64) -> Result<PointSet> {
        if xs.dim() != self.data_dim {
            return Err(contract("point dimension does not match network"));
        }
        let input = time_input(xs, |_| t);
        let out = self.forward(&input)?;
        PointSet::from_flat(self.data_dim, out.into_raw_vec_and_offset().0)
    }

    /// All parameters, layer by layer, weights (row-major) before biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            p.extend(l.w.iter());
            p.extend(l.b.iter());
        }
        p
    }

    pub fn set_params_flat(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(contract("parameter vector has the wrong length"));
        }
        let mut i = 0;
        for l in &mut self.layers {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = p[i];
                i += 1;
            }
        }
        Ok(())
    }

    /// Binary checkpoint: magic, data dimension, layer sizes, then every
    /// layer's weights and biases, all little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 8 * self.param_count());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.data_dim as u64).to_le_bytes());
        let sizes = self.sizes();
        buf.extend_from_slice(&(sizes.len() as u64).to_le_bytes());
        for s in &sizes {
            buf.extend_from_slice(&(*s as u64).to_le_bytes());
        }
        for v in self.params_flat() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |why: &str| Error::Config(format!("invalid checkpoint {}: {why}", path.display()));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != MAGIC {
            return Err(bad("wrong magic"));
        }
        let u = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize;
        let data_dim = u(take(8)?);
        let n_sizes = u(take(8)?);
        if n_sizes < 2 || n_sizes > 64 {
            return Err(bad("implausible layer count"));
        }
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            sizes.push(u(take(8)?));
        }
        if data_dim == 0 || sizes[0] != data_dim + 1 || sizes[n_sizes - 1] != data_dim {
            return Err(bad("layer sizes do not match the data dimension"));
        }
        let hidden = &sizes[1..n_sizes - 1];
        let mut net = Mlp::new(data_dim, hidden, 0)?;
        let mut params = Vec::with_capacity(net.param_count());
        for _ in 0..net.param_count() {
            params.push(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes")));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        net.set_params_flat(&params)?;
        Ok(net)
    }
}

fn mse(out: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let diff = out - target;
    diff.iter().map(|v| v * v).sum::<f64>() / out.nrows() as f64
}

/// `[x | t]` rows for the points of `xs`, with per-row time `t_of(i)`.
pub fn time_input(xs: &PointSet, t_of: impl Fn(usize) -> f64) -> Array2<f64> {
    let d = xs.dim();
    Array2::from_shape_fn((xs.len(), d + 1), |(i, j)| {
        if j < d {
            xs.point(i)[j]
        } else {
            t_of(i)
        }
    })
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub params: usize,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
}

/// Checks every parameter gradient of a small network on a random batch.
pub fn gradient_check(width: usize, batch: usize, seed: u64) -> Result<GradCheck> {
    const H: f64 = 1e-6;
    const FLOOR: f64 = 1e-6;
    let net = Mlp::new(2, &[width, width], seed)?;
    let mut rng = stream_rng(seed, streams::VERIFY);
    let input = Array2::from_shape_fn((batch, 3), |(_, j)| {
        if j < 2 {
            rng.random_range(-3.0..3.0)
        } else {
            rng.random_range(0.0..1.0)
        }
    });
    let target = Array2::from_shape_fn((batch, 2), |_| rng.random_range(-2.0..2.0));
    let (_, grads) = net.loss_and_grad(&input, &target)?;
    let analytic: Vec<f64> = grads
        .layers
        .iter()
        .flat_map(|l| l.w.iter().chain(l.b.iter()).copied().collect::<Vec<_>>())
        .collect();
    let base = net.params_flat();
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut p = base.clone();
        p[i] = base[i] + H;
        probe.set_params_flat(&p)?;
        let up = probe.loss(&input, &target)?;
        p[i] = base[i] - H;
        probe.set_params_flat(&p)?;
        let down = probe.loss(&input, &target)?;
        let numeric = (up - down) / (2.0 * H);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(err);
    }
    Ok(GradCheck {
        params: analytic.len(),
        max_rel_error: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        let net = Mlp::new(2, &DEFAULT_HIDDEN, 1).unwrap();
        assert_eq!(net.sizes(), vec![3, 512, 512, 512, 512, 2]);
        assert_eq!(net.param_count(), 3 * 512 + 512 + 3 * (512 * 512 + 512) + 512 * 2 + 2);
        let xs = PointSet::from_rows(&[[0.1, 0.2], [0.3, 0.4], [1.0, -1.0]]).unwrap();
        let v = net.velocity_batch(&xs, 0.3).unwrap();
        assert_eq!((v.len(), v.dim()), (3, 2));
    }

    #[test]
    fn swish_derivative() {
        for x in [-30.0, -2.0, -0.1, 0.0, 0.7, 4.0, 40.0] {
            let h = 1e-6;
            let fd = (swish(x + h) - swish(x - h)) / (2.0 * h);
            assert!((fd - swish_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let r = gradient_check(8, 16, 11).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = Mlp::new(2, &[8, 5], 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        net.save(&path).unwrap();
        assert_eq!(Mlp::load(&path).unwrap(), net);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(Mlp::load(&path).is_err());
    }

    #[test]
    fn same_seed_same_init() {
        assert_eq!(Mlp::new(2, &[8], 9).unwrap(), Mlp::new(2, &[8], 9).unwrap());
        assert_ne!(Mlp::new(2, &[8], 9).unwrap(), Mlp::new(2, &[8], 10).unwrap());
    }
}
