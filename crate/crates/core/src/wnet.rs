//! The two-encoder/one-decoder generator and the patch discriminators.
//!
//! Block notation follows the usual image-to-image convention:
//! `c3s1-k` is a 3x3 stride-1 convolution with ReLU, `dk` a 4x4 stride-2
//! convolution with instance norm and ReLU, `uk` a 4x4 stride-1/2 transposed
//! convolution with instance norm and ReLU.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::NUM_LANDMARKS;
use crate::transform::WarpPlan;

/// Image plus heat maps.
pub const GENERATOR_IN_CHANNELS: usize = 3 + NUM_LANDMARKS;
/// Source image and heat maps, then candidate image and target heat maps.
pub const D1_IN_CHANNELS: usize = 2 * GENERATOR_IN_CHANNELS;
pub const D2_IN_CHANNELS: usize = 3;

const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;

/// Named trainable tensors of one network.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        self.insert(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::zeros(shape, self.dtype, &self.device)?;
        self.insert(name, t)
    }

    fn insert(&mut self, name: String, t: Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        if self.vars.insert(name.clone(), var).is_some() {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Snapshot of every parameter keyed `<prefix><name>`.
    pub fn export(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v.as_tensor().copy().expect("copy")))
            .collect()
    }

    /// Overwrites every parameter from `tensors[<prefix><name>]`.
    pub fn import(&self, prefix: &str, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (k, v) in &self.vars {
            let key = format!("{prefix}{k}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor {key}")))?;
            if t.dims() != v.dims() {
                return Err(Error::invalid(format!(
                    "tensor {key}: checkpoint shape {:?}, model shape {:?}",
                    t.dims(),
                    v.dims()
                )));
            }
            v.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    /// 3x3, stride 1.
    Same3,
    /// 4x4, stride 2.
    Down4,
    /// 4x4 transposed, stride 1/2.
    Up4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Act {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug)]
struct Block {
    kind: Kind,
    weight: Tensor,
    bias: Option<Tensor>,
    norm: bool,
    act: Act,
    in_channels: usize,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        kind: Kind,
        cin: usize,
        cout: usize,
        norm: bool,
        act: Act,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let shape = match kind {
            Kind::Same3 => [cout, cin, 3, 3],
            Kind::Down4 => [cout, cin, 4, 4],
            Kind::Up4 => [cin, cout, 4, 4],
        };
        let weight = store.normal(format!("{name}.weight"), &shape, INIT_STD, rng)?;
        // A bias right before instance norm is cancelled by the normalization.
        let bias = if norm {
            None
        } else {
            Some(store.zeros(format!("{name}.bias"), &[cout])?)
        };
        Ok(Self {
            kind,
            weight,
            bias,
            norm,
            act,
            in_channels: cin,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = match self.kind {
            Kind::Same3 => x.conv2d(&self.weight, 1, 1, 1, 1)?,
            Kind::Down4 => x.conv2d(&self.weight, 1, 2, 1, 1)?,
            Kind::Up4 => x.conv_transpose2d(&self.weight, 1, 0, 2, 1)?,
        };
        if let Some(b) = &self.bias {
            y = y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?;
        }
        if self.norm {
            y = instance_norm(&y)?;
        }
        Ok(match self.act {
            Act::Relu => y.relu()?,
            Act::Tanh => y.tanh()?,
            Act::Sigmoid => sigmoid(&y)?,
        })
    }
}

/// Per-sample, per-channel normalization over the spatial axes, without affine terms.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim((2, 3))?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim((2, 3))?;
    Ok(centered.broadcast_div(&var.affine(1.0, NORM_EPS)?.sqrt()?)?)
}

/// Logistic function written through `tanh` so neither tail overflows.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

/// Encoder/decoder layout of the generator.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeneratorSpec {
    /// Number of encoder blocks, 6 or 7.
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each encoder block.
    pub encoder: Vec<usize>,
    /// Output channels of each up-sampling decoder block (the final `c3s1-3` is implicit).
    pub decoder: Vec<usize>,
    /// Number of highest-resolution encoder levels that feed skip connections.
    pub skip_depth: usize,
    pub dropout: f64,
    /// Leading decoder blocks that apply dropout while training.
    pub dropout_blocks: usize,
}

impl GeneratorSpec {
    /// 128x64 inputs, six encoder blocks.
    pub fn market() -> Self {
        Self::with_depth(6, 128, 64)
    }

    /// 256x256 inputs, seven encoder blocks.
    pub fn deepfashion() -> Self {
        Self::with_depth(7, 256, 256)
    }

    pub fn with_depth(depth: usize, height: usize, width: usize) -> Self {
        let mut encoder = vec![64, 128, 256, 512, 512, 512];
        let mut decoder = vec![512, 512, 512, 256, 128];
        for _ in 6..depth {
            encoder.push(512);
            decoder.insert(0, 512);
        }
        Self {
            depth,
            height,
            width,
            encoder,
            decoder,
            skip_depth: 4,
            dropout: 0.5,
            dropout_blocks: 3,
        }
    }

    /// Divides every channel count by `divisor` (at least one channel each).
    pub fn with_channel_divisor(mut self, divisor: usize) -> Self {
        let d = divisor.max(1);
        for c in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            *c = (*c / d).max(1);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.depth < 2 || self.encoder.len() != self.depth || self.decoder.len() != self.depth - 1 {
            return bad(format!(
                "depth {} needs {} encoder and {} decoder widths, got {} and {}",
                self.depth,
                self.depth,
                self.depth.saturating_sub(1),
                self.encoder.len(),
                self.decoder.len()
            ));
        }
        let f = 1usize << (self.depth - 1);
        if self.height % f != 0 || self.width % f != 0 || self.height == 0 || self.width == 0 {
            return bad(format!(
                "{}x{} input is not divisible by {f} for depth {}",
                self.height, self.width, self.depth
            ));
        }
        if self.skip_depth >= self.depth {
            return bad(format!(
                "skip depth {} must be below depth {}",
                self.skip_depth, self.depth
            ));
        }
        Ok(())
    }

    /// Spatial size of encoder level `l` (the output of encoder block `l`).
    pub fn level_shape(&self, level: usize) -> (usize, usize) {
        (self.height >> level, self.width >> level)
    }

    /// Feature-grid shapes of the skip-connected levels, highest resolution first.
    pub fn skip_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.skip_depth).map(|l| self.level_shape(l)).collect()
    }

    /// Encoder level whose resolution matches the input of decoder block `j`
    /// (`j == depth - 1` is the final `c3s1-3`).
    fn decoder_input_level(&self, j: usize) -> usize {
        self.depth - 1 - j
    }
}

/// Discriminator layout: `c4s2-64, d128, d256, d512, d1`.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub widths: Vec<usize>,
}

impl DiscriminatorSpec {
    pub fn d1() -> Self {
        Self {
            in_channels: D1_IN_CHANNELS,
            widths: vec![64, 128, 256, 512, 1],
        }
    }

    pub fn d2() -> Self {
        Self {
            in_channels: D2_IN_CHANNELS,
            widths: vec![64, 128, 256, 512, 1],
        }
    }

    pub fn with_channel_divisor(mut self, divisor: usize) -> Self {
        let d = divisor.max(1);
        let last = self.widths.len() - 1;
        for c in &mut self.widths[..last] {
            *c = (*c / d).max(1);
        }
        self
    }

    /// Total spatial downscale factor.
    pub fn stride(&self) -> usize {
        1 << self.widths.len()
    }
}

fn check_channels(x: &Tensor, expected: usize, what: &str) -> Result<()> {
    let dims = x.dims();
    if dims.len() != 4 || dims[1] != expected {
        return Err(Error::invalid(format!(
            "{what} expects (batch, {expected}, h, w), got {dims:?}"
        )));
    }
    Ok(())
}

/// Batched gather table for one skip level, see [`warp_merge`].
#[derive(Clone, Debug)]
pub struct SkipWarp {
    index: Tensor,
    height: usize,
    width: usize,
    batch: usize,
    parts: usize,
}

impl SkipWarp {
    /// Stacks per-sample plans of one resolution into a single index tensor.
    pub fn from_plans(plans: &[&WarpPlan], device: &Device) -> Result<Self> {
        let first = plans.first().ok_or_else(|| Error::invalid("no warp plans for batch"))?;
        let (h, w) = first.shape();
        let cells = h * w;
        let batch = plans.len();
        let zero_row = (batch * cells) as u32;
        let parts = crate::geometry::NUM_PARTS;
        let mut index = Vec::with_capacity(parts * batch * cells);
        for part in 0..parts {
            for (b, plan) in plans.iter().enumerate() {
                if plan.shape() != (h, w) {
                    return Err(Error::invalid("warp plans in a batch differ in shape"));
                }
                let offset = (b * cells) as u32;
                index.extend(
                    plan.part_sources(part)
                        .iter()
                        .map(|s| s.map_or(zero_row, |s| offset + s)),
                );
            }
        }
        let len = index.len();
        Ok(Self {
            index: Tensor::from_vec(index, len, device)?,
            height: h,
            width: w,
            batch,
            parts,
        })
    }

    /// Passes every cell through unchanged (as a single part covering the frame).
    pub fn identity(batch: usize, height: usize, width: usize, device: &Device) -> Result<Self> {
        let cells = batch * height * width;
        let parts = crate::geometry::NUM_PARTS;
        let mut index: Vec<u32> = (0..cells as u32).collect();
        index.resize(parts * cells, cells as u32);
        Ok(Self {
            index: Tensor::from_vec(index, parts * cells, device)?,
            height,
            width,
            batch,
            parts,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Sums the per-part gathers of `features` `(batch, c, h, w)` described by `warp`.
pub fn warp_merge(features: &Tensor, warp: &SkipWarp) -> Result<Tensor> {
    let (b, c, h, w) = features.dims4()?;
    if (b, h, w) != (warp.batch, warp.height, warp.width) {
        return Err(Error::invalid(format!(
            "features ({b}, {c}, {h}, {w}) do not match warp table ({}, {}, {})",
            warp.batch, warp.height, warp.width
        )));
    }
    let rows = b * h * w;
    let flat = features.permute((0, 2, 3, 1))?.reshape((rows, c))?;
    let zero = Tensor::zeros((1, c), features.dtype(), features.device())?;
    let table = Tensor::cat(&[&flat, &zero], 0)?;
    let gathered = table.index_select(&warp.index, 0)?.reshape((warp.parts, rows, c))?;
    let merged = gathered.sum(0)?;
    Ok(merged.reshape((b, h, w, c))?.permute((0, 3, 1, 2))?.contiguous()?)
}

/// Two independent encoders and one decoder with skip connections.
#[derive(Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    store: ParamStore,
    e1: Vec<Block>,
    e2: Vec<Block>,
    decoder: Vec<Block>,
}

impl Generator {
    pub fn new(spec: GeneratorSpec, dtype: DType, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let e1 = Self::encoder(&spec, &mut store, "e1", &mut rng)?;
        let e2 = Self::encoder(&spec, &mut store, "e2", &mut rng)?;
        let mut decoder = Vec::with_capacity(spec.depth);
        let mut prev = 2 * spec.encoder[spec.depth - 1];
        for j in 0..spec.depth {
            let level = spec.decoder_input_level(j);
            let cin = if j > 0 && level < spec.skip_depth {
                prev + 2 * spec.encoder[level]
            } else {
                prev
            };
            let name = format!("dec.{j}");
            let block = if j + 1 < spec.depth {
                Block::new(
                    &mut store,
                    &name,
                    Kind::Up4,
                    cin,
                    spec.decoder[j],
                    true,
                    Act::Relu,
                    &mut rng,
                )?
            } else {
                Block::new(&mut store, &name, Kind::Same3, cin, 3, false, Act::Tanh, &mut rng)?
            };
            prev = spec.decoder.get(j).copied().unwrap_or(3);
            decoder.push(block);
        }
        Ok(Self {
            spec,
            store,
            e1,
            e2,
            decoder,
        })
    }

    fn encoder(spec: &GeneratorSpec, store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Result<Vec<Block>> {
        let mut blocks = Vec::with_capacity(spec.depth);
        let mut cin = GENERATOR_IN_CHANNELS;
        for (l, &cout) in spec.encoder.iter().enumerate() {
            let name = format!("{prefix}.{l}");
            let last = l + 1 == spec.depth;
            let block = if l == 0 {
                Block::new(store, &name, Kind::Same3, cin, cout, false, Act::Relu, rng)?
            } else {
                Block::new(store, &name, Kind::Down4, cin, cout, !last, Act::Relu, rng)?
            };
            blocks.push(block);
            cin = cout;
        }
        Ok(blocks)
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn encode(blocks: &[Block], x: &Tensor) -> Result<Vec<Tensor>> {
        let mut feats = Vec::with_capacity(blocks.len());
        let mut h = x.clone();
        for b in blocks {
            h = b.forward(&h)?;
            feats.push(h.clone());
        }
        Ok(feats)
    }

    /// Encoder feature maps of both branches, highest resolution first.
    pub fn encoder_features(&self, src_in: &Tensor, tgt_in: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        check_channels(src_in, GENERATOR_IN_CHANNELS, "source encoder")?;
        check_channels(tgt_in, GENERATOR_IN_CHANNELS, "target encoder")?;
        let (_, _, h, w) = src_in.dims4()?;
        if (h, w) != (self.spec.height, self.spec.width) || tgt_in.dims() != src_in.dims() {
            return Err(Error::invalid(format!(
                "generator expects {}x{} inputs, got {:?} and {:?}",
                self.spec.height,
                self.spec.width,
                src_in.dims(),
                tgt_in.dims()
            )));
        }
        Ok((Self::encode(&self.e1, src_in)?, Self::encode(&self.e2, tgt_in)?))
    }

    /// Runs the generator. `warps[l]` moves source-branch features of skip level `l`.
    /// Dropout is active only when `dropout_rng` is given.
    pub fn forward(
        &self,
        src_in: &Tensor,
        tgt_in: &Tensor,
        warps: &[SkipWarp],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        self.forward_traced(src_in, tgt_in, warps, dropout_rng, &mut Vec::new())
    }

    /// [`Generator::forward`], also collecting every decoder block output.
    pub fn forward_traced(
        &self,
        src_in: &Tensor,
        tgt_in: &Tensor,
        warps: &[SkipWarp],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
        trace: &mut Vec<Tensor>,
    ) -> Result<Tensor> {
        if warps.len() != self.spec.skip_depth {
            return Err(Error::invalid(format!(
                "expected {} skip warps, got {}",
                self.spec.skip_depth,
                warps.len()
            )));
        }
        let (f1, f2) = self.encoder_features(src_in, tgt_in)?;
        let depth = self.spec.depth;
        let mut h = Tensor::cat(&[&f1[depth - 1], &f2[depth - 1]], 1)?;
        for (j, block) in self.decoder.iter().enumerate() {
            let level = self.spec.decoder_input_level(j);
            if j > 0 && level < self.spec.skip_depth {
                let moved = warp_merge(&f1[level], &warps[level])?;
                h = Tensor::cat(&[&h, &moved, &f2[level]], 1)?;
            }
            debug_assert_eq!(h.dim(1)?, block.in_channels);
            h = block.forward(&h)?;
            if j < self.spec.dropout_blocks {
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    h = dropout(&h, self.spec.dropout, rng)?;
                }
            }
            trace.push(h.clone());
        }
        Ok(h)
    }
}

/// Inverted dropout with a mask drawn from `rng`.
pub fn dropout(x: &Tensor, rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if rate <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

/// Fully-convolutional discriminator returning a map of probabilities.
#[derive(Debug)]
pub struct Discriminator {
    spec: DiscriminatorSpec,
    store: ParamStore,
    blocks: Vec<Block>,
}

impl Discriminator {
    pub fn new(spec: DiscriminatorSpec, dtype: DType, seed: u64) -> Result<Self> {
        if spec.widths.len() < 2 {
            return Err(Error::invalid("discriminator needs at least two blocks"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let mut blocks = Vec::with_capacity(spec.widths.len());
        let mut cin = spec.in_channels;
        let n = spec.widths.len();
        for (i, &cout) in spec.widths.iter().enumerate() {
            let (norm, act) = match i {
                0 => (false, Act::Relu),
                i if i + 1 == n => (false, Act::Sigmoid),
                _ => (true, Act::Relu),
            };
            blocks.push(Block::new(
                &mut store,
                &i.to_string(),
                Kind::Down4,
                cin,
                cout,
                norm,
                act,
                &mut rng,
            )?);
            cin = cout;
        }
        Ok(Self { spec, store, blocks })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.trace(x)?.pop().expect("at least two blocks"))
    }

    /// Output of every block, input side first.
    pub fn trace(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        check_channels(x, self.spec.in_channels, "discriminator")?;
        let (_, _, h, w) = x.dims4()?;
        let s = self.spec.stride();
        if h % s != 0 || w % s != 0 {
            return Err(Error::invalid(format!(
                "discriminator input {h}x{w} not divisible by {s}"
            )));
        }
        let mut out: Vec<Tensor> = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let y = b.forward(out.last().unwrap_or(x))?;
            out.push(y);
        }
        Ok(out)
    }

    /// Zeroes the weights and bias of the last block.
    pub fn zero_final_block(&self) -> Result<()> {
        let last = (self.blocks.len() - 1).to_string();
        for (name, var) in self.store.iter() {
            if name.starts_with(&format!("{last}.")) {
                var.set(&var.zeros_like()?)?;
            }
        }
        Ok(())
    }
}

/// Conditional discriminator input: `(x_src, H(x_src), candidate, H(x_tgt))`.
pub fn d1_bundle(src_in: &Tensor, candidate: &Tensor, tgt_heatmaps: &Tensor) -> Result<Tensor> {
    Ok(Tensor::cat(&[src_in, candidate, tgt_heatmaps], 1)?)
}
