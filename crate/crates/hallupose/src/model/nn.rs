//! Minimal NN building blocks on top of candle tensors.
//!
//! Parameters live in a [`VarStore`] keyed by dotted names. Initialization is
//! derived from the store seed and the parameter name, so construction order
//! and refactorings do not change the initial weights. Conv weights draw from
//! N(0, 0.001), biases start at zero and normalization scales at one.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Initialization spec for a parameter tensor.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

const CONV_INIT_STD: f64 = 0.001;

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Named parameter/buffer registry.
///
/// Parameters are trainable weights; buffers (batch-norm running statistics)
/// are saved and digested alongside them but never handed to the optimizer.
pub struct VarStore {
    device: Device,
    dtype: DType,
    seed: u64,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    preload: HashMap<String, Tensor>,
    /// Name prefixes that must resolve from the preload map.
    strict_prefixes: Vec<String>,
    missing: Vec<String>,
}

impl VarStore {
    pub fn new(device: Device, seed: u64) -> Self {
        VarStore {
            device,
            dtype: DType::F32,
            seed,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            preload: HashMap::new(),
            strict_prefixes: Vec::new(),
            missing: Vec::new(),
        }
    }

    /// Same store at a different element type (f64 is used by the
    /// finite-difference gradient tests).
    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// A store that resolves names from `tensors` instead of fresh
    /// initialization. Names matching one of `strict_prefixes` that are absent
    /// from `tensors` are recorded in [`VarStore::missing`]; other absent names
    /// fall back to the init spec.
    pub fn with_preload(
        device: Device,
        seed: u64,
        tensors: HashMap<String, Tensor>,
        strict_prefixes: Vec<String>,
    ) -> Self {
        VarStore {
            preload: tensors,
            strict_prefixes,
            ..VarStore::new(device, seed)
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Names required by the model that the preload map did not provide.
    pub fn missing(&self) -> &[String] {
        &self.missing
    }

    fn materialize(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(t) = self.preload.remove(name) {
            if t.dims() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    shape
                )));
            }
            return Ok(t.to_device(&self.device)?.to_dtype(self.dtype)?);
        }
        if self.strict_prefixes.iter().any(|p| name.starts_with(p)) {
            self.missing.push(name.to_string());
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
                // Box-Muller on uniform draws; avoids distribution-crate
                // version drift in something that must stay reproducible.
                (0..n)
                    .map(|_| {
                        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                        let u2: f64 = rng.gen_range(0.0..1.0);
                        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                        (z * std) as f32
                    })
                    .collect()
            }
        };
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Fetch or create a trainable parameter.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(v.clone());
        }
        let t = self.materialize(name, shape, init)?;
        let v = Var::from_tensor(&t)?;
        self.params.insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Fetch or create a non-trainable buffer.
    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if let Some(v) = self.buffers.get(name) {
            return Ok(v.clone());
        }
        let t = self.materialize(name, shape, init)?;
        let v = Var::from_tensor(&t)?;
        self.buffers.insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Names the preload map contained that no layer asked for.
    pub fn unused_preload(&self) -> Vec<String> {
        let mut v: Vec<String> = self.preload.keys().cloned().collect();
        v.sort();
        v
    }

    /// All parameters in name order.
    pub fn params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    /// Parameters whose name satisfies `keep`, in name order.
    pub fn params_filtered<'a>(
        &'a self,
        keep: impl Fn(&str) -> bool + 'a,
    ) -> impl Iterator<Item = (&'a String, &'a Var)> {
        self.params.iter().filter(move |(n, _)| keep(n))
    }

    /// Total number of scalars in parameters matching `keep`.
    pub fn count_parameters(&self, keep: impl Fn(&str) -> bool) -> usize {
        self.params_filtered(keep)
            .map(|(_, v)| v.as_tensor().elem_count())
            .sum()
    }

    /// Parameters and buffers together, for checkpointing. Parameter and
    /// buffer names never collide (batch-norm buffers use distinct suffixes).
    pub fn all_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (n, v) in self.params.iter().chain(self.buffers.iter()) {
            out.insert(n.clone(), v.as_tensor().clone());
        }
        out
    }

    /// Digest of every parameter and buffer whose name starts with `prefix`.
    pub fn digest(&self, prefix: &str) -> Result<String> {
        let map = self.all_tensors();
        digest_tensors(map.iter().filter(|(n, _)| n.starts_with(prefix)))
    }
}

/// SHA-256 over name, shape and little-endian f32 bytes of the given tensors.
/// Callers must present entries in a deterministic (name) order.
pub fn digest_tensors<'a>(
    tensors: impl Iterator<Item = (&'a String, &'a Tensor)>,
) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        for d in t.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        for x in data {
            hasher.update(x.to_le_bytes());
        }
    }
    let out = hasher.finalize();
    Ok(out.iter().map(|b| format!("{b:02x}")).collect())
}

/// 2D convolution with optional bias.
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        vs: &mut VarStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = vs.param(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            Init::Normal(CONV_INIT_STD),
        )?;
        let bias = if bias {
            Some(vs.param(&format!("{name}.bias"), &[c_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => {
                let c = b.as_tensor().dim(0)?;
                Ok(y.broadcast_add(&b.as_tensor().reshape((1, c, 1, 1))?)?)
            }
            None => Ok(y),
        }
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }
}

/// 2D transpose convolution (stride-2 upsampling inside the head).
pub struct ConvTranspose2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        vs: &mut VarStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = vs.param(
            &format!("{name}.weight"),
            &[c_in, c_out, kernel, kernel],
            Init::Normal(CONV_INIT_STD),
        )?;
        let bias = if bias {
            Some(vs.param(&format!("{name}.bias"), &[c_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(ConvTranspose2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(self.weight.as_tensor(), self.padding, 0, self.stride, 1)?;
        match &self.bias {
            Some(b) => {
                let c = b.as_tensor().dim(0)?;
                Ok(y.broadcast_add(&b.as_tensor().reshape((1, c, 1, 1))?)?)
            }
            None => Ok(y),
        }
    }
}

/// Batch normalization over (N, H, W) per channel.
///
/// Training mode normalizes with batch statistics and folds them into the
/// running estimates; evaluation mode normalizes with the running estimates.
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    channels: usize,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(vs: &mut VarStore, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: vs.param(&format!("{name}.gamma"), &[channels], Init::Ones)?,
            beta: vs.param(&format!("{name}.beta"), &[channels], Init::Zeros)?,
            running_mean: vs.buffer(&format!("{name}.running_mean"), &[channels], Init::Zeros)?,
            running_var: vs.buffer(&format!("{name}.running_var"), &[channels], Init::Ones)?,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = self.channels;
        let (b, xc2, h, w) = x.dims4()?;
        if xc2 != c {
            return Err(Error::Shape(format!(
                "batch norm expects {c} channels, got {xc2}"
            )));
        }
        let (mean, var) = if train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            // fold detached batch statistics into the running estimates
            let n = (b * h * w) as f64;
            let unbias = n / (n - 1.0).max(1.0);
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().reshape(c)? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.detach().reshape(c)? * (m * unbias))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().detach().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().detach().reshape((1, c, 1, 1))?,
            )
        };
        let xhat = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let y = xhat
            .broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)?;
        Ok(y)
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (_b, _c, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(h * factor, w * factor)?)
}

/// Downsample by an integer factor with average pooling.
pub fn downsample_avg(x: &Tensor, factor: usize) -> Result<Tensor> {
    Ok(x.avg_pool2d(factor)?)
}

fn linear_interp_matrix(n_in: usize, n_out: usize, device: &Device) -> Result<Tensor> {
    let scale = n_out as f64 / n_in as f64;
    let mut data = vec![0.0f32; n_out * n_in];
    for i in 0..n_out {
        let src = (i as f64 + 0.5) / scale - 0.5;
        let i0 = src.floor();
        let t = src - i0;
        let a = (i0.max(0.0) as usize).min(n_in - 1);
        let b = ((i0 + 1.0).max(0.0) as usize).min(n_in - 1);
        data[i * n_in + a] += (1.0 - t) as f32;
        data[i * n_in + b] += t as f32;
    }
    Ok(Tensor::from_vec(data, (n_out, n_in), device)?)
}

/// Bilinear resize to `(h_out, w_out)` (half-pixel centers), expressed as two
/// matrix products so it stays differentiable with respect to `x`.
pub fn upsample_bilinear(x: &Tensor, h_out: usize, w_out: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h == h_out && w == w_out {
        return Ok(x.clone());
    }
    let rows = linear_interp_matrix(h, h_out, x.device())?; // (h_out, h)
    let cols = linear_interp_matrix(w, w_out, x.device())?.t()?; // (w, w_out)
    let flat = x.reshape((b * c, h, w))?;
    let y = rows.broadcast_matmul(&flat)?; // (b*c, h_out, w)
    let y = y.broadcast_matmul(&cols)?; // (b*c, h_out, w_out)
    Ok(y.reshape((b, c, h_out, w_out))?)
}

/// Convert a scalar tensor to f32.
pub fn scalar_f32(t: &Tensor) -> Result<f32> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn init_is_deterministic_and_order_independent() {
        let mut a = VarStore::new(dev(), 42);
        let w1 = a.param("x.weight", &[4, 3], Init::Normal(0.001)).unwrap();
        let _ = a.param("y.weight", &[2], Init::Normal(0.001)).unwrap();

        let mut b = VarStore::new(dev(), 42);
        let _ = b.param("y.weight", &[2], Init::Normal(0.001)).unwrap();
        let w2 = b.param("x.weight", &[4, 3], Init::Normal(0.001)).unwrap();

        let v1 = w1.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let v2 = w2.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v1, v2);

        let mut c = VarStore::new(dev(), 43);
        let w3 = c.param("x.weight", &[4, 3], Init::Normal(0.001)).unwrap();
        let v3 = w3.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_ne!(v1, v3);
    }

    #[test]
    fn conv_parameter_count_closed_form() {
        let mut vs = VarStore::new(dev(), 0);
        let _ = Conv2d::new(&mut vs, "c", 3, 8, 3, 1, 1, true).unwrap();
        assert_eq!(vs.count_parameters(|_| true), 3 * 8 * 9 + 8);
    }

    #[test]
    fn batch_norm_normalizes_in_train_mode() {
        let mut vs = VarStore::new(dev(), 0);
        let bn = BatchNorm2d::new(&mut vs, "bn", 2).unwrap();
        let x = Tensor::from_vec(
            (0..2 * 2 * 4 * 4).map(|i| i as f32).collect::<Vec<_>>(),
            (2, 2, 4, 4),
            &dev(),
        )
        .unwrap();
        let y = bn.forward(&x, true).unwrap();
        let m = scalar_f32(&y.mean_all().unwrap()).unwrap();
        let v = scalar_f32(&y.sqr().unwrap().mean_all().unwrap()).unwrap();
        assert!(m.abs() < 1e-5);
        assert!((v - 1.0).abs() < 1e-3);
    }

    #[test]
    fn bilinear_upsample_is_exact_on_constant_and_linear_maps() {
        let x = Tensor::from_vec(vec![1.0f32; 2 * 1 * 4 * 4], (2, 1, 4, 4), &dev()).unwrap();
        let y = upsample_bilinear(&x, 8, 8).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&a| (a - 1.0).abs() < 1e-6));

        // a ramp along x stays a ramp (away from the clamped borders)
        let ramp: Vec<f32> = (0..4).flat_map(|_| (0..4).map(|c| c as f32)).collect();
        let x = Tensor::from_vec(ramp, (1, 1, 4, 4), &dev()).unwrap();
        let y = upsample_bilinear(&x, 4, 8).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        // interior differences are the constant source slope / 2
        for c in 2..5 {
            assert!((v[c + 1] - v[c] - 0.5).abs() < 1e-6, "at {c}: {v:?}");
        }
    }

    #[test]
    fn digest_changes_with_weights_and_prefix() {
        let mut vs = VarStore::new(dev(), 1);
        let w = vs.param("a.weight", &[2, 2], Init::Normal(0.01)).unwrap();
        let _ = vs.param("b.weight", &[2], Init::Zeros).unwrap();
        let d_all = vs.digest("").unwrap();
        let d_a = vs.digest("a.").unwrap();
        assert_ne!(d_all, d_a);
        let before = vs.digest("a.").unwrap();
        w.set(&Tensor::zeros((2, 2), DType::F32, &dev()).unwrap()).unwrap();
        assert_ne!(before, vs.digest("a.").unwrap());
        assert_eq!(d_a.len(), 64);
    }
}
