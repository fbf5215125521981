//! Layer building blocks over candle tensors.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Device, Layout, Shape, Tensor, Var, WithDType, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Named trainable parameters, kept in registration order so optimizer state
/// and checkpoints line up deterministically.
#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, init: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&init)?;
        self.entries.push((name.into(), var.clone()));
        Ok(var)
    }

    pub fn vars(&self) -> impl Iterator<Item = &Var> {
        self.entries.iter().map(|(_, v)| v)
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Flattened copy of every parameter, in registration order.
    pub fn flat_values(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for v in self.vars() {
            out.extend(v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::ensure_parent(path)?;
        let map: HashMap<String, Tensor> = self
            .entries
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrites every registered parameter from a safetensors file. Names and
    /// shapes must match exactly.
    pub fn load(&self, path: &Path) -> Result<()> {
        if !path.is_file() {
            return Err(Error::IncompatibleModel(format!("{} not found", path.display())));
        }
        let map = candle_core::safetensors::load(path, &Device::Cpu)?;
        if map.len() != self.entries.len() {
            return Err(Error::IncompatibleModel(format!(
                "checkpoint has {} tensors, model expects {}",
                map.len(),
                self.entries.len()
            )));
        }
        for (name, var) in &self.entries {
            let t = map
                .get(name)
                .ok_or_else(|| Error::IncompatibleModel(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::IncompatibleModel(format!(
                    "tensor {name}: shape {:?} vs {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

fn kaiming(rng: &mut impl Rng, shape: &[usize], fan_in: usize, dtype: DType) -> Result<Tensor> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// 2-D convolution, stride 1, "same" padding for odd kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        (in_ch, out_ch, kernel): (usize, usize, usize),
        rng: &mut impl Rng,
        dtype: DType,
    ) -> Result<Self> {
        let w = kaiming(rng, &[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, dtype)?;
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(out_ch, dtype, &Device::Cpu)?)?;
        Ok(Self {
            weight,
            bias,
            padding: kernel / 2,
        })
    }

    /// Lowered to an explicit patch matrix times the flattened kernel; on the
    /// CPU backend this is several times faster than `Tensor::conv2d`, mostly
    /// in the backward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, cin, h, w) = x.dims4()?;
        let (cout, _, k, _) = self.weight.dims4()?;
        let cols = if k == 1 {
            x.reshape((n, cin, h * w))?
        } else {
            x.contiguous()?.apply_op1(Im2Col { kernel: k, padding: self.padding })?
        };
        let y = self
            .weight
            .reshape((cout, cin * k * k))?
            .broadcast_matmul(&cols)?
            .reshape((n, cout, h, w))?;
        Ok(y.broadcast_add(&self.bias.reshape((1, cout, 1, 1))?)?)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// (N, C, H, W) → (N, C·k·k, H·W) patch matrix for a stride-1 convolution
/// with zero padding. Row `c·k·k + ky·k + kx` holds input channel `c` shifted
/// by `(ky − p, kx − p)`.
struct Im2Col {
    kernel: usize,
    padding: usize,
}

/// Adjoint of [`Im2Col`]: scatters a patch-matrix gradient back onto the image.
struct Col2Im {
    kernel: usize,
    padding: usize,
    dims: (usize, usize, usize),
}

/// Visits every (patch-matrix row, image row) pair that overlaps the image.
/// `f(dst, src, len)`: patch elements `dst..dst + len` correspond to image
/// elements `src..src + len`.
fn for_each_patch_row(
    (n, c, h, w): (usize, usize, usize, usize),
    kernel: usize,
    padding: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let hw = h * w;
    let p = padding as isize;
    for plane in 0..n * c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (plane * kernel + ky) * kernel + kx;
                let dx = kx as isize - p;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    if (0..h as isize).contains(&sy) {
                        let src = plane * hw + sy as usize * w + (x0 as isize + dx) as usize;
                        f(row * hw + y * w + x0, src, x1 - x0);
                    }
                }
            }
        }
    }
}

type Dims4 = (usize, usize, usize, usize);

fn im2col<T: WithDType>(input: &[T], dims: Dims4, kernel: usize, padding: usize) -> Vec<T> {
    let (n, c, h, w) = dims;
    let mut out = vec![T::zero(); n * c * kernel * kernel * h * w];
    for_each_patch_row(dims, kernel, padding, |dst, src, len| {
        out[dst..dst + len].copy_from_slice(&input[src..src + len]);
    });
    out
}

fn col2im<T: WithDType>(grad: &[T], dims: Dims4, kernel: usize, padding: usize) -> Vec<T> {
    let (n, c, h, w) = dims;
    let mut out = vec![T::zero(); n * c * h * w];
    for_each_patch_row(dims, kernel, padding, |dst, src, len| {
        for (o, g) in out[src..src + len].iter_mut().zip(&grad[dst..dst + len]) {
            *o += *g;
        }
    });
    out
}

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("patch ops need contiguous input"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (k, p) = (self.kernel, self.padding);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous_slice(v, layout)?, dims, k, p)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous_slice(v, layout)?, dims, k, p)),
            other => candle_core::bail!("im2col: unsupported dtype {:?}", other.dtype()),
        };
        let (n, c, h, w) = dims;
        Ok((out, Shape::from((n, c * k * k, h * w))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, c, h, w) = arg.dims4()?;
        let op = Col2Im {
            kernel: self.kernel,
            padding: self.padding,
            dims: (c, h, w),
        };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (c, h, w) = self.dims;
        let dims = (layout.shape().dims()[0], c, h, w);
        let (k, p) = (self.kernel, self.padding);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous_slice(v, layout)?, dims, k, p)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous_slice(v, layout)?, dims, k, p)),
            other => candle_core::bail!("col2im: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, Shape::from(dims)))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        (in_dim, out_dim): (usize, usize),
        rng: &mut impl Rng,
        dtype: DType,
    ) -> Result<Self> {
        let w = kaiming(rng, &[out_dim, in_dim], in_dim, dtype)?.affine(0.5f64.sqrt(), 0.0)?;
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(out_dim, dtype, &Device::Cpu)?)?;
        Ok(Self { weight, bias })
    }

    /// `x`: (batch, in) → (batch, out)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }
}

/// `stem` with `.ext` appended. Unlike `Path::with_extension` this keeps any
/// dots already in the file name, so `run.v2/classifier` and `lr0.003` stems work.
pub fn checkpoint_file(stem: &Path, ext: &str) -> PathBuf {
    let mut name = stem.as_os_str().to_os_string();
    name.push(".");
    name.push(ext);
    PathBuf::from(name)
}

/// Nearest-neighbour 2× upsampling as broadcast + reshape. `Tensor::upsample_nearest2d`
/// is avoided because its backward overwrites, rather than accumulates, the
/// gradient of its input, which silently drops every other consumer of that
/// tensor (here: the contrastive taps).
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .reshape((n, c, 2 * h, 2 * w))?)
}

/// 2×2 max pooling with stride 2. The backward pass routes each output
/// gradient to a single input: the first maximum in row-major window order.
/// (Candle's generic max reduction gives every tied element the full gradient,
/// which over-counts on all-zero ReLU windows.)
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!("max pooling needs even sides, got {h}x{w}")));
    }
    Ok(x.contiguous()?.apply_op1(MaxPool2x2)?)
}

struct MaxPool2x2;
struct MaxPool2x2Grad;

/// Flat input index of the first maximum of each 2×2 window.
fn pool_argmax<T: WithDType>(x: &[T], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let top = base + 2 * i * w + 2 * j;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

impl CustomOp1 for MaxPool2x2 {
    fn name(&self) -> &'static str {
        "max_pool2x2"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        fn run<T: WithDType>(x: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
            pool_argmax(x, dims).into_iter().map(|i| x[i]).collect()
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(run(contiguous_slice(v, layout)?, dims)),
            CpuStorage::F64(v) => CpuStorage::F64(run(contiguous_slice(v, layout)?, dims)),
            other => candle_core::bail!("max_pool2x2: unsupported dtype {:?}", other.dtype()),
        };
        let (n, c, h, w) = dims;
        Ok((out, Shape::from((n, c, h / 2, w / 2))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &MaxPool2x2Grad)?))
    }
}

impl CustomOp2 for MaxPool2x2Grad {
    fn name(&self) -> &'static str {
        "max_pool2x2_grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        fn run<T: WithDType>(x: &[T], g: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
            let (n, c, h, w) = dims;
            let mut dx = vec![T::zero(); n * c * h * w];
            for (o, i) in pool_argmax(x, dims).into_iter().enumerate() {
                dx[i] = g[o];
            }
            dx
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(run(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?, dims))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(run(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?, dims))
            }
            _ => candle_core::bail!("max_pool2x2_grad: unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Softmax over dim 1 of an (N, C, H, W) score tensor.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

/// Softmax over the last dim of a (N, C) score tensor.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Per-channel input standardization, fixed after being fitted on the training split.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for ChannelStats {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl ChannelStats {
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a crate::data::Image>) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut n = 0f64;
        for img in images {
            for px in img.rows() {
                for c in 0..3 {
                    let v = px[c] as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Self::default();
        }
        let mut out = Self::default();
        for c in 0..3 {
            let mean = sum[c] / n;
            let var = (sq[c] / n - mean * mean).max(0.0);
            out.mean[c] = mean as f32;
            out.std[c] = var.sqrt().max(1e-3) as f32;
        }
        out
    }

    pub fn apply(&self, batch: &Tensor) -> Result<Tensor> {
        let dtype = batch.dtype();
        let mean = Tensor::new(&self.mean, &Device::Cpu)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&self.std, &Device::Cpu)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        Ok(batch.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }
}

/// Stacks H×W×3 images into an (N, 3, H, W) tensor.
pub fn images_to_tensor<'a>(
    images: impl IntoIterator<Item = &'a crate::data::Image>,
    dtype: DType,
) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims: Option<(usize, usize, usize)> = None;
    let mut n = 0;
    for img in images {
        let (h, w, c) = img.dim();
        if let Some(d) = dims {
            if d != (h, w, c) {
                return Err(Error::shape(&[d.0, d.1, d.2], &[h, w, c]));
            }
        }
        dims = Some((h, w, c));
        let chw = img.view().permuted_axes([2, 0, 1]);
        data.extend(chw.iter().copied());
        n += 1;
    }
    let (h, w, c) = dims.ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    Ok(Tensor::from_vec(data, (n, c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}
