//! Block networks: four (conv, conv, batch norm, pool) blocks, a hidden dense
//! layer and a single output unit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv::{conv3d_backward_with, conv3d_forward_with, ConvFilter, ConvWorkspace};
use crate::error::{arg_err, format_err, shape_err, Result};
use crate::layers::{
    batchnorm_backward, batchnorm_forward, dense_backward, dense_forward, elu_backward, elu_forward, maxpool3d_backward,
    maxpool3d_forward, mse, mse_grad, pool_extent, BatchNormState, BnCache, DenseLayer, Mode, PoolIndices,
};
use crate::rng::{rng_uniform, Rng};
use crate::segmentation::{make_plan, SegmentationPlan, DEFAULT_BOUNDARY};
use crate::tensor::{DType, Scalar, Tensor};

pub const KERNEL_SIDE: usize = 3;
pub const OUTPUT_UNITS: usize = 1;
pub const BLOCKS: usize = 4;
pub const DEFAULT_HIDDEN_UNITS: usize = 256;
pub const BRAIN_SHAPE: [usize; 3] = [41, 49, 41];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub block_filters: [usize; BLOCKS],
    /// Segmentation rate; the network sees `k^3` input channels.
    pub k: usize,
    pub boundary: usize,
    pub hidden_units: usize,
    /// Shape of the unsegmented volume.
    pub volume_shape: [usize; 3],
}

pub const INCREASING: [usize; BLOCKS] = [8, 16, 32, 64];
pub const DECREASING: [usize; BLOCKS] = [64, 32, 16, 8];

/// Named architectures and their (k, filters).
pub const PRESETS: [(&str, usize, [usize; BLOCKS]); 4] = [
    ("baseline", 1, INCREASING),
    ("proposed", 2, DECREASING),
    ("seg-only", 2, INCREASING),
    ("reverse-only", 1, DECREASING),
];

impl ArchitectureSpec {
    pub fn new(block_filters: [usize; BLOCKS], k: usize, volume_shape: [usize; 3]) -> Self {
        ArchitectureSpec { block_filters, k, boundary: DEFAULT_BOUNDARY, hidden_units: DEFAULT_HIDDEN_UNITS, volume_shape }
    }

    pub fn baseline(volume_shape: [usize; 3]) -> Self {
        Self::new(INCREASING, 1, volume_shape)
    }

    pub fn proposed(volume_shape: [usize; 3]) -> Self {
        Self::new(DECREASING, 2, volume_shape)
    }

    pub fn preset(name: &str, volume_shape: [usize; 3]) -> Result<Self> {
        PRESETS
            .iter()
            .find(|p| p.0 == name)
            .map(|&(_, k, f)| Self::new(f, k, volume_shape))
            .ok_or_else(|| arg_err!("unknown architecture {:?}", name))
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_hidden_units(mut self, hidden_units: usize) -> Self {
        self.hidden_units = hidden_units;
        self
    }

    /// Short label such as `64-32-16-8/k2/h256`.
    pub fn label(&self) -> String {
        let f: Vec<String> = self.block_filters.iter().map(|f| f.to_string()).collect();
        format!("{}/k{}/h{}", f.join("-"), self.k, self.hidden_units)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_filters.contains(&0) {
            return Err(arg_err!("filter counts must be positive, got {:?}", self.block_filters));
        }
        if self.hidden_units == 0 {
            return Err(arg_err!("hidden units must be positive"));
        }
        self.plan().map(|_| ())
    }

    pub fn plan(&self) -> Result<SegmentationPlan> {
        make_plan(&self.volume_shape, self.k, self.boundary)
    }

    /// Network input `(X', Y', Z', k^3)` for a single sample.
    pub fn input_shape(&self) -> Result<[usize; 4]> {
        let p = self.plan()?;
        Ok([p.region_shape[0], p.region_shape[1], p.region_shape[2], p.channels()])
    }

    /// Spatial extents entering each block, then after the last one.
    pub fn spatial_chain(&self) -> Result<Vec<[usize; 3]>> {
        let s = self.input_shape()?;
        let mut cur = [s[0], s[1], s[2]];
        let mut chain = vec![cur];
        for _ in 0..BLOCKS {
            cur = cur.map(pool_extent);
            chain.push(cur);
        }
        Ok(chain)
    }

    pub fn flatten_size(&self) -> Result<usize> {
        let last = *self.spatial_chain()?.last().expect("non-empty");
        Ok(last.iter().product::<usize>() * self.block_filters[BLOCKS - 1])
    }

    /// Parameter accounting; depends on the spec only.
    pub fn count_params(&self) -> Result<ParamCount> {
        let mut c = self.input_shape()?[3];
        let mut conv_weights = 0;
        let mut biases = 0;
        let mut batchnorm = 0;
        for &m in &self.block_filters {
            conv_weights += c * KERNEL_SIDE.pow(3) * m + m * KERNEL_SIDE.pow(3) * m;
            biases += 2 * m;
            batchnorm += 4 * m;
            c = m;
        }
        let flat = self.flatten_size()?;
        let h = self.hidden_units;
        let fc_weights = flat * h + h * OUTPUT_UNITS;
        biases += h + OUTPUT_UNITS;
        Ok(ParamCount { conv_weights, fc_weights, biases, batchnorm, total: conv_weights + fc_weights + biases + batchnorm })
    }
}

/// Weight counts exclude biases and batch-norm values, which are reported
/// separately. `batchnorm` covers gamma, beta and both running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub conv_weights: usize,
    pub fc_weights: usize,
    pub biases: usize,
    pub batchnorm: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct Block<T = f32> {
    pub convs: [ConvFilter<T>; 2],
    pub bn: BatchNormState<T>,
}

#[derive(Debug, Clone)]
pub struct Network<T = f32> {
    pub spec: ArchitectureSpec,
    pub blocks: Vec<Block<T>>,
    pub hidden: DenseLayer<T>,
    pub output: DenseLayer<T>,
    ws: ConvWorkspace<T>,
}

fn xavier<T: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<Tensor<T>> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng_uniform(rng, shape, -bound, bound)
}

/// Conv weight bound `sqrt(6 / (C*27 + M*27))`.
pub fn conv_init_bound(c: usize, m: usize) -> f64 {
    let taps = KERNEL_SIDE.pow(3);
    (6.0 / (c * taps + m * taps) as f64).sqrt()
}

pub fn build<T: Scalar>(spec: &ArchitectureSpec, seed: u64) -> Result<Network<T>> {
    spec.validate()?;
    let mut rng = Rng::new(seed);
    let taps = KERNEL_SIDE.pow(3);
    let mut c = spec.input_shape()?[3];
    let mut blocks = Vec::with_capacity(BLOCKS);
    for &m in &spec.block_filters {
        let mut conv = |c: usize| -> Result<ConvFilter<T>> {
            let shape = [c, KERNEL_SIDE, KERNEL_SIDE, KERNEL_SIDE, m];
            ConvFilter::new(xavier(&mut rng, &shape, c * taps, m * taps)?, Tensor::zeros(&[m]))
        };
        let first = conv(c)?;
        let second = conv(m)?;
        blocks.push(Block { convs: [first, second], bn: BatchNormState::new(m) });
        c = m;
    }
    let flat = spec.flatten_size()?;
    let h = spec.hidden_units;
    let hidden = DenseLayer::new(xavier(&mut rng, &[flat, h], flat, h)?, Tensor::zeros(&[h]))?;
    let output = DenseLayer::new(xavier(&mut rng, &[h, OUTPUT_UNITS], h, OUTPUT_UNITS)?, Tensor::zeros(&[OUTPUT_UNITS]))?;
    Ok(Network { spec: spec.clone(), blocks, hidden, output, ws: ConvWorkspace::default() })
}

struct BlockTape<T> {
    input: Tensor<T>,
    pre: [Tensor<T>; 2],
    mid: Tensor<T>,
    bn: BnCache<T>,
    pool: PoolIndices,
}

/// Intermediate values kept by a forward pass for the backward pass.
pub struct Tape<T> {
    blocks: Vec<BlockTape<T>>,
    pooled_shape: Vec<usize>,
    flat: Tensor<T>,
    hidden_pre: Tensor<T>,
    hidden: Tensor<T>,
}

/// Gradients in [`Network::trainable_mut`] order.
pub type Gradients<T> = Vec<Tensor<T>>;

impl<T: Scalar> Network<T> {
    pub fn set_threads(&mut self, threads: usize) {
        self.ws.threads = threads.max(1);
    }

    pub fn count_params(&self) -> ParamCount {
        self.spec.count_params().expect("spec validated at build")
    }

    /// Every stored tensor with its file name, in file order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            for (i, conv) in block.convs.iter().enumerate() {
                out.push((format!("block{b}.conv{i}.weights"), &conv.weights));
                out.push((format!("block{b}.conv{i}.bias"), &conv.bias));
            }
            out.push((format!("block{b}.bn.gamma"), &block.bn.gamma));
            out.push((format!("block{b}.bn.beta"), &block.bn.beta));
            out.push((format!("block{b}.bn.running_mean"), &block.bn.running_mean));
            out.push((format!("block{b}.bn.running_var"), &block.bn.running_var));
        }
        out.push(("hidden.weights".into(), &self.hidden.weights));
        out.push(("hidden.bias".into(), &self.hidden.bias));
        out.push(("output.weights".into(), &self.output.weights));
        out.push(("output.bias".into(), &self.output.bias));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            for conv in &mut block.convs {
                out.push(&mut conv.weights);
                out.push(&mut conv.bias);
            }
            let bn = &mut block.bn;
            out.extend([&mut bn.gamma, &mut bn.beta, &mut bn.running_mean, &mut bn.running_var]);
        }
        out.extend([&mut self.hidden.weights, &mut self.hidden.bias, &mut self.output.weights, &mut self.output.bias]);
        out
    }

    /// Copy of every stored tensor, for checkpointing.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.named_tensors().into_iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<T>]) -> Result<()> {
        let mut dst = self.named_tensors_mut();
        if dst.len() != snapshot.len() {
            return Err(shape_err!("snapshot has {} tensors, network {}", snapshot.len(), dst.len()));
        }
        for (d, s) in dst.iter_mut().zip(snapshot) {
            s.expect_shape(d.shape())?;
            d.data_mut().copy_from_slice(s.data());
        }
        Ok(())
    }

    /// Parameters touched by the optimizer (running statistics excluded).
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            for conv in &mut block.convs {
                out.push(&mut conv.weights);
                out.push(&mut conv.bias);
            }
            out.extend([&mut block.bn.gamma, &mut block.bn.beta]);
        }
        out.extend([&mut self.hidden.weights, &mut self.hidden.bias, &mut self.output.weights, &mut self.output.bias]);
        out
    }

    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for block in &self.blocks {
            for conv in &block.convs {
                out.push(&conv.weights);
                out.push(&conv.bias);
            }
            out.extend([&block.bn.gamma, &block.bn.beta]);
        }
        out.extend([&self.hidden.weights, &self.hidden.bias, &self.output.weights, &self.output.bias]);
        out
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.spec.input_shape()?;
        if x.rank() != 5 || x.shape()[1..] != s {
            return Err(shape_err!("network expects (N, {}, {}, {}, {}), got {:?}", s[0], s[1], s[2], s[3], x.shape()));
        }
        Ok(())
    }

    /// Predictions `(N, 1)`. Train mode updates batch-norm running statistics.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward_tape(x, mode)?.0)
    }

    pub fn forward_tape(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(x)?;
        let mut tapes = Vec::with_capacity(BLOCKS);
        let mut cur = x.clone();
        for block in &mut self.blocks {
            let z0 = conv3d_forward_with(&cur, &block.convs[0], &mut self.ws)?;
            let a0 = elu_forward(&z0);
            let z1 = conv3d_forward_with(&a0, &block.convs[1], &mut self.ws)?;
            let a1 = elu_forward(&z1);
            let (normed, bn) = batchnorm_forward(&a1, &mut block.bn, mode)?;
            let (pooled, pool) = maxpool3d_forward(&normed)?;
            tapes.push(BlockTape { input: cur, pre: [z0, z1], mid: a0, bn, pool });
            cur = pooled;
        }
        let pooled_shape = cur.shape().to_vec();
        let flat = crate::layers::flatten(&cur)?;
        let hidden_pre = dense_forward(&flat, &self.hidden)?;
        let hidden = elu_forward(&hidden_pre);
        let out = dense_forward(&hidden, &self.output)?;
        Ok((out, Tape { blocks: tapes, pooled_shape, flat, hidden_pre, hidden }))
    }

    /// Gradients of `<grad_out, forward(x)>` for every trainable tensor.
    pub fn backward(&mut self, tape: &Tape<T>, grad_out: &Tensor<T>) -> Result<Gradients<T>> {
        let out_g = dense_backward(&tape.hidden, &self.output, grad_out)?;
        let hid_pre_g = elu_backward(&tape.hidden_pre, &out_g.input)?;
        let hid_g = dense_backward(&tape.flat, &self.hidden, &hid_pre_g)?;
        let mut g = hid_g.input.reshape(&tape.pooled_shape)?;
        let mut per_block = Vec::with_capacity(BLOCKS);
        for (i, (block, t)) in self.blocks.iter().zip(&tape.blocks).enumerate().rev() {
            let g_norm = maxpool3d_backward(&t.pool, &g)?;
            let bn = batchnorm_backward(&t.bn, &block.bn, &g_norm)?;
            let g_z1 = elu_backward(&t.pre[1], &bn.input)?;
            let c1 = conv3d_backward_with(&t.mid, &block.convs[1], &g_z1, true, &mut self.ws)?;
            let g_z0 = elu_backward(&t.pre[0], &c1.input.expect("requested"))?;
            let c0 = conv3d_backward_with(&t.input, &block.convs[0], &g_z0, i > 0, &mut self.ws)?;
            if let Some(gi) = c0.input {
                g = gi;
            }
            per_block.push([c0.weights, c0.bias, c1.weights, c1.bias, bn.gamma, bn.beta]);
        }
        let mut grads: Gradients<T> = per_block.into_iter().rev().flatten().collect();
        grads.extend([hid_g.weights, hid_g.bias, out_g.weights, out_g.bias]);
        Ok(grads)
    }

    /// Train-mode MSE on `targets` `(N, 1)` and its gradients.
    pub fn loss_and_grads(&mut self, x: &Tensor<T>, targets: &Tensor<T>) -> Result<(T, Gradients<T>)> {
        let (pred, tape) = self.forward_tape(x, Mode::Train)?;
        let loss = mse(&pred, targets)?;
        let grads = self.backward(&tape, &mse_grad(&pred, targets)?)?;
        Ok((loss, grads))
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.weights_bytes())?;
        Ok(())
    }

    pub fn weights_bytes(&self) -> Vec<u8> {
        let tensors = self.named_tensors();
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u16).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.code());
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Header bytes of a weight file for this network (everything but values).
    pub fn weights_header_len(&self) -> usize {
        8 + self.named_tensors().iter().map(|(name, t)| 2 + name.len() + 2 + 4 * t.rank()).sum::<usize>()
    }
}

pub const WEIGHTS_MAGIC: &[u8; 4] = b"RCNW";
pub const WEIGHTS_VERSION: u16 = 1;

/// Load a weight file written for `spec`.
pub fn load_weights<T: Scalar>(path: &Path, spec: &ArchitectureSpec) -> Result<Network<T>> {
    weights_from_bytes(&fs::read(path)?, spec)
}

pub fn weights_from_bytes<T: Scalar>(bytes: &[u8], spec: &ArchitectureSpec) -> Result<Network<T>> {
    let mut net: Network<T> = build(spec, 0)?;
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(format_err!("not a weight file (bad magic)"));
    }
    let version = r.u16()?;
    if version != WEIGHTS_VERSION {
        return Err(format_err!("unsupported weight file version {}", version));
    }
    let count = r.u16()? as usize;
    let names: Vec<(String, Vec<usize>)> =
        net.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    if count != names.len() {
        return Err(format_err!("weight file holds {} tensors, architecture {} needs {}", count, spec.label(), names.len()));
    }
    let mut loaded = Vec::with_capacity(count);
    for (expected_name, expected_shape) in &names {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| format_err!("tensor name is not UTF-8"))?;
        if &name != expected_name {
            return Err(format_err!("layer {}: file has {:?} in its place", expected_name, name));
        }
        let dtype = DType::from_code(r.u8()?).ok_or_else(|| format_err!("layer {}: unknown dtype", name))?;
        if dtype != T::DTYPE {
            return Err(format_err!("layer {}: stored as {:?}, expected {:?}", name, dtype, T::DTYPE));
        }
        let rank = r.u8()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<_>>()?;
        if &shape != expected_shape {
            return Err(format_err!("layer {}: shape {:?}, expected {:?}", name, shape, expected_shape));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * dtype.size())?;
        loaded.push(raw.chunks_exact(dtype.size()).map(T::read_le).collect::<Vec<T>>());
    }
    if r.at != bytes.len() {
        return Err(format_err!("{} trailing bytes after last tensor", bytes.len() - r.at));
    }
    for (t, data) in net.named_tensors_mut().into_iter().zip(loaded) {
        t.data_mut().copy_from_slice(&data);
    }
    Ok(net)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err!("truncated weight file at byte {}", self.at))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
