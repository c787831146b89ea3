//! ViT encoder with class token, interpolated positional embeddings, and a
//! projection head whose final linear layer has row-normalized weights.
//!
//! Parameters live in a flat name -> Var map so the same forward pass
//! serves the student (in-graph tensors) and the teacher (detached
//! tensors). Single-channel crops are replicated to three input planes.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Encoder and head dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub head_layers: usize,
    pub head_hidden: usize,
    pub head_bottleneck: usize,
    /// Projection head output dimension K.
    pub head_output: usize,
    /// Side of the patch grid the stored positional embedding refers to.
    pub ref_grid: usize,
}

impl ViTConfig {
    /// ViT-S/8 with the standard 3-layer projection head.
    pub fn paper() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 384,
            depth: 12,
            n_heads: 6,
            mlp_ratio: 4,
            head_layers: 3,
            head_hidden: 2048,
            head_bottleneck: 256,
            head_output: 65_536,
            ref_grid: 28,
        }
    }

    /// Desk-scale encoder for 48 px global crops.
    pub fn toy() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            n_heads: 4,
            mlp_ratio: 4,
            head_layers: 3,
            head_hidden: 512,
            head_bottleneck: 64,
            head_output: 256,
            ref_grid: 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Parameter(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.patch_size == 0
            || self.depth == 0
            || self.head_layers == 0
            || self.head_output == 0
            || self.ref_grid == 0
        {
            return Err(Error::Parameter("all dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Flattened patch length: three replicated planes of patch_size^2.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

fn trunc_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let (u1, u2): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen());
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            out.push((z * std) as f32);
        }
    }
    out
}

/// Named parameter tensors for one network (student or teacher).
pub struct ParamSet {
    pub config: ViTConfig,
    pub vars: BTreeMap<String, Var>,
    pub device: Device,
    pub dtype: DType,
}

fn var_from(values: Vec<f32>, shape: &[usize], device: &Device, dtype: DType) -> Result<Var> {
    let t = Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?;
    Ok(Var::from_tensor(&t)?)
}

impl ParamSet {
    /// Fresh parameters: truncated-normal weights (std 0.02), zero biases,
    /// unit LayerNorm scales.
    pub fn init(config: ViTConfig, seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vars = BTreeMap::new();
        let d = config.embed_dim;
        let std = 0.02;

        let weight = |vars: &mut BTreeMap<String, Var>,
                          rng: &mut ChaCha8Rng,
                          name: &str,
                          shape: &[usize]|
         -> Result<()> {
            let n: usize = shape.iter().product();
            vars.insert(
                name.to_string(),
                var_from(trunc_normal(rng, n, std), shape, device, dtype)?,
            );
            Ok(())
        };
        let zeros = |vars: &mut BTreeMap<String, Var>, name: &str, shape: &[usize]| -> Result<()> {
            let n: usize = shape.iter().product();
            vars.insert(name.to_string(), var_from(vec![0.0; n], shape, device, dtype)?);
            Ok(())
        };
        let ones = |vars: &mut BTreeMap<String, Var>, name: &str, shape: &[usize]| -> Result<()> {
            let n: usize = shape.iter().product();
            vars.insert(name.to_string(), var_from(vec![1.0; n], shape, device, dtype)?);
            Ok(())
        };

        weight(&mut vars, &mut rng, "patch.w", &[config.patch_dim(), d])?;
        zeros(&mut vars, "patch.b", &[d])?;
        weight(&mut vars, &mut rng, "cls", &[1, 1, d])?;
        let n_ref = config.ref_grid * config.ref_grid;
        weight(&mut vars, &mut rng, "pos", &[1, 1 + n_ref, d])?;

        for i in 0..config.depth {
            ones(&mut vars, &format!("blk{}.ln1.w", i), &[d])?;
            zeros(&mut vars, &format!("blk{}.ln1.b", i), &[d])?;
            weight(&mut vars, &mut rng, &format!("blk{}.qkv.w", i), &[d, 3 * d])?;
            zeros(&mut vars, &format!("blk{}.qkv.b", i), &[3 * d])?;
            weight(&mut vars, &mut rng, &format!("blk{}.proj.w", i), &[d, d])?;
            zeros(&mut vars, &format!("blk{}.proj.b", i), &[d])?;
            ones(&mut vars, &format!("blk{}.ln2.w", i), &[d])?;
            zeros(&mut vars, &format!("blk{}.ln2.b", i), &[d])?;
            let hidden = d * config.mlp_ratio;
            weight(&mut vars, &mut rng, &format!("blk{}.fc1.w", i), &[d, hidden])?;
            zeros(&mut vars, &format!("blk{}.fc1.b", i), &[hidden])?;
            weight(&mut vars, &mut rng, &format!("blk{}.fc2.w", i), &[hidden, d])?;
            zeros(&mut vars, &format!("blk{}.fc2.b", i), &[d])?;
        }
        ones(&mut vars, "norm.w", &[d])?;
        zeros(&mut vars, "norm.b", &[d])?;

        // Projection head: d -> hidden x(L-1 layers) -> bottleneck, then a
        // row-normalized map onto K prototypes.
        let mut in_dim = d;
        for l in 0..config.head_layers {
            let out_dim = if l + 1 == config.head_layers {
                config.head_bottleneck
            } else {
                config.head_hidden
            };
            weight(&mut vars, &mut rng, &format!("head.{}.w", l), &[in_dim, out_dim])?;
            zeros(&mut vars, &format!("head.{}.b", l), &[out_dim])?;
            in_dim = out_dim;
        }
        weight(
            &mut vars,
            &mut rng,
            "head.last",
            &[config.head_output, config.head_bottleneck],
        )?;

        Ok(Self { config, vars, device: device.clone(), dtype })
    }

    /// Tensor views that keep autograd history (student forward).
    pub fn graph_params(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Tensor views cut from the graph (teacher forward, no gradients).
    pub fn detached_params(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.vars.values().map(|v| v.as_tensor().elem_count()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: std::collections::HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    /// Load same-shape tensors saved by `save` into the existing vars.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        for (name, var) in &self.vars {
            let t = loaded.get(name).ok_or_else(|| {
                Error::Dependency(format!("checkpoint is missing tensor '{}'", name))
            })?;
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Import externally trained tensors under different names. Returns the
    /// number of tensors imported; shapes must match exactly.
    pub fn import_named(
        &mut self,
        path: &Path,
        name_map: &BTreeMap<String, String>,
    ) -> Result<usize> {
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        let mut imported = 0;
        for (external, internal) in name_map {
            let src = loaded.get(external).ok_or_else(|| {
                Error::Dependency(format!("import file is missing tensor '{}'", external))
            })?;
            let var = self.vars.get(internal).ok_or_else(|| {
                Error::Parameter(format!("no parameter named '{}'", internal))
            })?;
            if src.dims() != var.as_tensor().dims() {
                return Err(Error::Shape(format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    external,
                    src.dims(),
                    var.as_tensor().dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
            imported += 1;
        }
        Ok(imported)
    }
}

/// Flatten a single-channel crop into patch rows; each row is the patch
/// replicated over three planes. Returns (rows, grid side pair).
pub fn patchify(image: &Array2<f32>, patch: usize) -> Result<(Vec<f32>, (usize, usize))> {
    let (rows, cols) = image.dim();
    if rows % patch != 0 || cols % patch != 0 {
        return Err(Error::Shape(format!(
            "{}x{} image not divisible by patch size {}",
            rows, cols, patch
        )));
    }
    let (gh, gw) = (rows / patch, cols / patch);
    let mut out = Vec::with_capacity(gh * gw * 3 * patch * patch);
    for gr in 0..gh {
        for gc in 0..gw {
            let start = out.len();
            for pr in 0..patch {
                for pc in 0..patch {
                    out.push(image[(gr * patch + pr, gc * patch + pc)]);
                }
            }
            let end = out.len();
            for _ in 0..2 {
                out.extend_from_within(start..end);
            }
        }
    }
    Ok((out, (gh, gw)))
}

/// Stack same-size crops into a [batch, tokens, patch_dim] tensor.
pub fn crops_to_tensor(
    crops: &[&Array2<f32>],
    config: &ViTConfig,
    device: &Device,
    dtype: DType,
) -> Result<(Tensor, (usize, usize))> {
    if crops.is_empty() {
        return Err(Error::Shape("cannot batch zero crops".into()));
    }
    let mut grid = None;
    let mut flat = Vec::new();
    for crop in crops {
        let (values, g) = patchify(crop, config.patch_size)?;
        match grid {
            None => grid = Some(g),
            Some(prev) if prev == g => {}
            Some(prev) => {
                return Err(Error::Shape(format!(
                    "mixed crop grids {:?} and {:?} in one batch",
                    prev, g
                )))
            }
        }
        flat.extend(values);
    }
    let (gh, gw) = grid.unwrap();
    let t = Tensor::from_vec(
        flat,
        &[crops.len(), gh * gw, config.patch_dim()][..],
        device,
    )?
    .to_dtype(dtype)?;
    Ok((t, (gh, gw)))
}

fn layer_norm(x: &Tensor, w: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let std = (var + 1e-6)?.sqrt()?;
    centered
        .broadcast_div(&std)?
        .broadcast_mul(w)?
        .broadcast_add(b)
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    x.matmul(w)?.broadcast_add(b)
}

/// Bilinear interpolation matrix mapping a src-side axis onto a tgt-side
/// axis with pixel-center alignment.
fn interp_axis(tgt: usize, src: usize) -> Vec<f32> {
    let mut m = vec![0.0f32; tgt * src];
    let scale = src as f64 / tgt as f64;
    for t in 0..tgt {
        let pos = ((t as f64 + 0.5) * scale - 0.5).clamp(0.0, src as f64 - 1.0);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let frac = pos - lo as f64;
        m[t * src + lo] += (1.0 - frac) as f32;
        m[t * src + hi] += frac as f32;
    }
    m
}

/// Positional embedding for a (gh, gw) patch grid, interpolated from the
/// stored ref_grid x ref_grid table. Shape [1, 1 + gh*gw, d].
fn interpolated_pos(
    params: &BTreeMap<String, Tensor>,
    config: &ViTConfig,
    grid: (usize, usize),
    dtype: DType,
    device: &Device,
) -> candle_core::Result<Tensor> {
    let pos = &params["pos"];
    let d = config.embed_dim;
    let r = config.ref_grid;
    let (gh, gw) = grid;
    let cls_pos = pos.narrow(1, 0, 1)?;
    if (gh, gw) == (r, r) {
        return Ok(pos.clone());
    }
    let patch_pos = pos.narrow(1, 1, r * r)?.reshape((r, r, d))?;
    let m_rows = Tensor::from_vec(interp_axis(gh, r), (gh, r), device)?.to_dtype(dtype)?;
    let m_cols = Tensor::from_vec(interp_axis(gw, r), (gw, r), device)?.to_dtype(dtype)?;
    // rows: [gh, r] x [r, r*d] -> [gh, r, d]; cols applied per row block.
    let by_rows = m_rows
        .matmul(&patch_pos.reshape((r, r * d))?)?
        .reshape((gh, r, d))?;
    let swapped = by_rows.transpose(0, 1)?.contiguous()?; // [r, gh, d]
    let by_cols = m_cols
        .matmul(&swapped.reshape((r, gh * d))?)?
        .reshape((gw, gh, d))?;
    let patch = by_cols.transpose(0, 1)?.contiguous()?.reshape((1, gh * gw, d))?;
    Tensor::cat(&[&cls_pos, &patch], 1)
}

/// Forward outputs for a batch of same-size crops.
pub struct Encoded {
    /// Class-token embeddings after the final LayerNorm, [batch, embed_dim].
    pub cls: Tensor,
    /// Projection head outputs, [batch, K].
    pub head: Tensor,
    /// Last-layer class-token attention rows, [batch, heads, tokens],
    /// present when capture was requested.
    pub cls_attention: Option<Tensor>,
}

fn l2_normalize(x: &Tensor) -> candle_core::Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()? + 1e-12)?;
    x.broadcast_div(&norm)
}

/// Encoder + head forward over a [batch, tokens, patch_dim] tensor.
pub fn encode_batch(
    config: &ViTConfig,
    params: &BTreeMap<String, Tensor>,
    patches: &Tensor,
    grid: (usize, usize),
    capture_attention: bool,
) -> Result<Encoded> {
    let (b, t, f) = patches.dims3()?;
    if f != config.patch_dim() || t != grid.0 * grid.1 {
        return Err(Error::Shape(format!(
            "patch tensor {:?} does not match grid {:?} and patch_dim {}",
            patches.dims(),
            grid,
            config.patch_dim()
        )));
    }
    let d = config.embed_dim;
    let heads = config.n_heads;
    let dh = config.head_dim();
    let dtype = patches.dtype();
    let device = patches.device();

    let embedded = linear(&patches.reshape((b * t, f))?, &params["patch.w"], &params["patch.b"])?
        .reshape((b, t, d))?;
    let cls = params["cls"].broadcast_as((b, 1, d))?;
    let mut x = Tensor::cat(&[&cls, &embedded], 1)?;
    let pos = interpolated_pos(params, config, grid, dtype, device)?;
    x = x.broadcast_add(&pos)?;
    let tokens = t + 1;

    let mut last_attention = None;
    for i in 0..config.depth {
        let ln1 = layer_norm(&x, &params[&format!("blk{}.ln1.w", i)], &params[&format!("blk{}.ln1.b", i)])?;
        let qkv = linear(
            &ln1.reshape((b * tokens, d))?,
            &params[&format!("blk{}.qkv.w", i)],
            &params[&format!("blk{}.qkv.b", i)],
        )?
        .reshape((b, tokens, 3, heads, dh))?
        .permute((2, 0, 3, 1, 4))?;
        let q = qkv.narrow(0, 0, 1)?.squeeze(0)?.contiguous()?;
        let k = qkv.narrow(0, 1, 1)?.squeeze(0)?.contiguous()?;
        let v = qkv.narrow(0, 2, 1)?.squeeze(0)?.contiguous()?;
        let scores = (q.matmul(&k.transpose(2, 3)?)? * (1.0 / (dh as f64).sqrt()))?;
        let attention = candle_nn::ops::softmax(&scores, D::Minus1)?;
        if capture_attention && i + 1 == config.depth {
            // Class-token row: [b, heads, tokens].
            last_attention = Some(attention.narrow(2, 0, 1)?.squeeze(2)?);
        }
        let ctx = attention
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * tokens, d))?;
        let projected = linear(&ctx, &params[&format!("blk{}.proj.w", i)], &params[&format!("blk{}.proj.b", i)])?
            .reshape((b, tokens, d))?;
        x = (x + projected)?;
        let ln2 = layer_norm(&x, &params[&format!("blk{}.ln2.w", i)], &params[&format!("blk{}.ln2.b", i)])?;
        let hidden = linear(
            &ln2.reshape((b * tokens, d))?,
            &params[&format!("blk{}.fc1.w", i)],
            &params[&format!("blk{}.fc1.b", i)],
        )?
        .gelu_erf()?;
        let mlp = linear(&hidden, &params[&format!("blk{}.fc2.w", i)], &params[&format!("blk{}.fc2.b", i)])?
            .reshape((b, tokens, d))?;
        x = (x + mlp)?;
    }
    let x = layer_norm(&x, &params["norm.w"], &params["norm.b"])?;
    let cls_out = x.narrow(1, 0, 1)?.squeeze(1)?.contiguous()?;

    // Projection head.
    let mut h = cls_out.clone();
    for l in 0..config.head_layers {
        h = linear(&h, &params[&format!("head.{}.w", l)], &params[&format!("head.{}.b", l)])?;
        if l + 1 < config.head_layers {
            h = h.gelu_erf()?;
        }
    }
    let h = l2_normalize(&h)?;
    let prototypes = l2_normalize(&params["head.last"])?;
    let head = h.matmul(&prototypes.t()?)?;

    Ok(Encoded { cls: cls_out, head, cls_attention: last_attention })
}

/// Single-crop convenience wrapper over `encode_batch`.
pub fn encode(param_set: &ParamSet, crop: &Array2<f32>) -> Result<(Vec<f32>, Vec<f32>)> {
    let (patches, grid) =
        crops_to_tensor(&[crop], &param_set.config, &param_set.device, param_set.dtype)?;
    let encoded = encode_batch(
        &param_set.config,
        &param_set.detached_params(),
        &patches,
        grid,
        false,
    )?;
    let cls = encoded.cls.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let head = encoded.head.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok((cls, head))
}

/// Last-layer class-token attention reshaped onto the patch grid.
pub struct AttentionMap {
    /// One grid per head, rows x cols = patch grid.
    pub per_head: Vec<Array2<f32>>,
    /// Head-averaged grid.
    pub head_mean: Array2<f32>,
    /// Attention the class token pays to itself, per head.
    pub cls_self: Vec<f32>,
}

pub fn attention_maps(param_set: &ParamSet, image: &Array2<f32>) -> Result<AttentionMap> {
    let (patches, grid) =
        crops_to_tensor(&[image], &param_set.config, &param_set.device, param_set.dtype)?;
    let encoded = encode_batch(
        &param_set.config,
        &param_set.detached_params(),
        &patches,
        grid,
        true,
    )?;
    let attention = encoded
        .cls_attention
        .ok_or_else(|| Error::Numerical("attention capture produced nothing".into()))?
        .to_dtype(DType::F32)?;
    let (gh, gw) = grid;
    let heads = param_set.config.n_heads;
    let rows = attention.squeeze(0)?.to_vec2::<f32>()?;
    let mut per_head = Vec::with_capacity(heads);
    let mut cls_self = Vec::with_capacity(heads);
    let mut mean = Array2::<f32>::zeros((gh, gw));
    for row in rows.iter().take(heads) {
        cls_self.push(row[0]);
        let grid_map = Array2::from_shape_vec((gh, gw), row[1..].to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        mean = mean + &grid_map;
        per_head.push(grid_map);
    }
    mean.mapv_inplace(|v| v / heads as f32);
    Ok(AttentionMap { per_head, head_mean: mean, cls_self })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_set(seed: u64) -> ParamSet {
        ParamSet::init(ViTConfig::toy(), seed, &Device::Cpu, DType::F32).unwrap()
    }

    fn ramp(rows: usize, cols: usize) -> Array2<f32> {
        Array2::from_shape_fn((rows, cols), |(r, c)| {
            ((r * cols + c) as f32) / (rows * cols) as f32 - 0.5
        })
    }

    /// Parameter count from the config alone, written out independently of
    /// the init code.
    fn expected_params(c: &ViTConfig) -> usize {
        let d = c.embed_dim;
        let patch = c.patch_dim() * d + d;
        let cls_pos = d + (1 + c.ref_grid * c.ref_grid) * d;
        let block = (d + d)                      // ln1
            + (d * 3 * d + 3 * d)                // qkv
            + (d * d + d)                        // proj
            + (d + d)                            // ln2
            + (d * c.mlp_ratio * d + c.mlp_ratio * d)
            + (c.mlp_ratio * d * d + d);
        let norm = d + d;
        let mut head = 0;
        let mut in_dim = d;
        for l in 0..c.head_layers {
            let out = if l + 1 == c.head_layers { c.head_bottleneck } else { c.head_hidden };
            head += in_dim * out + out;
            in_dim = out;
        }
        head += c.head_output * c.head_bottleneck;
        patch + cls_pos + c.depth * block + norm + head
    }

    #[test]
    fn token_grid_arithmetic() {
        let img224 = ramp(224, 224);
        let (_, grid) = patchify(&img224, 8).unwrap();
        assert_eq!(grid, (28, 28));
        assert_eq!(grid.0 * grid.1, 784);
        let img96 = ramp(96, 96);
        let (_, grid) = patchify(&img96, 8).unwrap();
        assert_eq!(grid.0 * grid.1, 144);
    }

    #[test]
    fn indivisible_input_is_a_shape_error() {
        let img = ramp(50, 48);
        assert!(matches!(patchify(&img, 8), Err(Error::Shape(_))));
    }

    #[test]
    fn head_output_has_configured_dimension() {
        let set = toy_set(0);
        let (cls, head) = encode(&set, &ramp(48, 48)).unwrap();
        assert_eq!(cls.len(), 64);
        assert_eq!(head.len(), 256);
    }

    #[test]
    fn shared_parameters_accept_both_crop_sizes() {
        let set = toy_set(1);
        let (cls_g, _) = encode(&set, &ramp(48, 48)).unwrap();
        let (cls_l, _) = encode(&set, &ramp(24, 24)).unwrap();
        assert_eq!(cls_g.len(), cls_l.len());
        assert!(cls_g.iter().all(|v| v.is_finite()));
        assert!(cls_l.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_is_deterministic_given_parameters() {
        let set = toy_set(2);
        let img = ramp(48, 48);
        let (a, ha) = encode(&set, &img).unwrap();
        let (b, hb) = encode(&set, &img).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }

    #[test]
    fn student_and_teacher_have_identical_parameter_counts() {
        let student = toy_set(3);
        let teacher = toy_set(4);
        assert_eq!(student.n_params(), teacher.n_params());
        assert_eq!(student.n_params(), expected_params(&ViTConfig::toy()));
    }

    #[test]
    fn attention_rows_are_simplex_weights() {
        let set = toy_set(5);
        let maps = attention_maps(&set, &ramp(48, 48)).unwrap();
        assert_eq!(maps.per_head.len(), 4);
        for (h, grid) in maps.per_head.iter().enumerate() {
            assert_eq!(grid.dim(), (6, 6));
            let total: f32 = grid.sum() + maps.cls_self[h];
            assert!((total - 1.0).abs() < 1e-5, "head {} sums to {}", h, total);
            assert!(grid.iter().all(|&w| w >= 0.0));
        }
        assert_eq!(maps.head_mean.dim(), (6, 6));
    }

    #[test]
    fn reference_grid_pos_embedding_is_used_verbatim() {
        let set = toy_set(6);
        let params = set.detached_params();
        let pos = interpolated_pos(&params, &set.config, (6, 6), DType::F32, &Device::Cpu).unwrap();
        let diff = (pos - &params["pos"])
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn interp_axis_rows_are_convex() {
        for (tgt, src) in [(3usize, 6usize), (12, 28), (6, 6), (10, 3)] {
            let m = interp_axis(tgt, src);
            for t in 0..tgt {
                let row = &m[t * src..(t + 1) * src];
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&w| w >= 0.0));
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.safetensors");
        let set = toy_set(7);
        let img = ramp(48, 48);
        let (before, _) = encode(&set, &img).unwrap();
        set.save(&path).unwrap();
        let mut other = toy_set(8);
        let (fresh, _) = encode(&other, &img).unwrap();
        assert_ne!(before, fresh);
        other.load_into(&path).unwrap();
        let (after, _) = encode(&other, &img).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn external_import_maps_names_and_checks_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("external.safetensors");
        let donor = toy_set(9);
        let exported: std::collections::HashMap<String, Tensor> = donor
            .vars
            .iter()
            .map(|(k, v)| (format!("ext/{}", k), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&exported, &path).unwrap();

        let mut target = toy_set(10);
        let name_map: BTreeMap<String, String> = donor
            .vars
            .keys()
            .map(|k| (format!("ext/{}", k), k.clone()))
            .collect();
        let n = target.import_named(&path, &name_map).unwrap();
        assert_eq!(n, donor.vars.len());
        let img = ramp(48, 48);
        let (a, _) = encode(&donor, &img).unwrap();
        let (b, _) = encode(&target, &img).unwrap();
        assert_eq!(a, b);

        let bad_map: BTreeMap<String, String> =
            [("ext/patch.w".to_string(), "patch.b".to_string())].into();
        assert!(matches!(
            target.import_named(&path, &bad_map),
            Err(Error::Shape(_))
        ));
    }
}
