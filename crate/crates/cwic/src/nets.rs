//! The three networks: convolutional encoder, convolutional decoder, and
//! the importance-map net, plus parameter initialization and the `.cwcm`
//! model file format.
//!
//! Encoder (input `[N, 3, H, W]`, H and W divisible by 8):
//!
//! | layer                          | activation size  |
//! |--------------------------------|------------------|
//! | 8x8x128 conv, pad 2, stride 4  | 128 x H/4 x W/4  |
//! | residual block, 128            | 128 x H/4 x W/4  |
//! | 4x4x256 conv, pad 1, stride 2  | 256 x H/8 x W/8  |
//! | residual block, 256 (x2)       | 256 x H/8 x W/8  |
//! | 1x1xn conv, sigmoid            | n x H/8 x W/8    |
//!
//! The activation after the last residual block (`f`) feeds the
//! importance net: 3x3x128 conv + ReLU, 3x3x128 conv + ReLU, 1x1x1 conv +
//! sigmoid. The decoder mirrors the encoder with depth-to-space
//! upsampling; its final conv has no nonlinearity.
//!
//! Residual blocks are two 3x3 convs without batch normalization:
//! `y = x + conv2(relu(conv1(x)))`.

use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Tape, TensorError, TensorId};

pub const MODEL_MAGIC: [u8; 4] = *b"CWCM";
pub const MODEL_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?} at offset 0, expected \"CWCM\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported model version {0}, expected {MODEL_VERSION}")]
    BadVersion(u8),
    #[error("channel count n={0} not supported (must be 64 or 128)")]
    BadChannelCount(u16),
    #[error("importance levels L={levels} invalid for n={n}")]
    BadLevels { n: usize, levels: usize },
    #[error("model file truncated at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("model file has {extra} trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("encoder input {h}x{w} not divisible by 8")]
    NonDivisibleDims { h: usize, w: usize },
    #[error("decoder expects {expected} code channels, got {got}")]
    CodeChannels { expected: usize, got: usize },
}

/// One convolution layer's parameters and geometry.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub cout: usize,
    pub cin: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub w: Arc<Vec<f64>>,
    pub b: Arc<Vec<f64>>,
}

impl ConvLayer {
    fn zeros(cout: usize, cin: usize, k: usize, stride: usize, pad: usize) -> ConvLayer {
        ConvLayer {
            cout,
            cin,
            k,
            stride,
            pad,
            w: Arc::new(vec![0.0; cout * cin * k * k]),
            b: Arc::new(vec![0.0; cout]),
        }
    }

    fn init(&mut self, rng: &mut ChaCha8Rng) {
        let fan_in = (self.cin * self.k * self.k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let w = Arc::make_mut(&mut self.w);
        for v in w.iter_mut() {
            // Snapped to the f32 grid so the on-disk format roundtrips
            // bit-exactly.
            *v = rng.gen_range(-bound..bound) as f32 as f64;
        }
        Arc::make_mut(&mut self.b).fill(0.0);
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin, self.k, self.k]
    }
}

/// Two 3x3 convs with an additive skip; no batch normalization.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

impl ResidualBlock {
    fn zeros(channels: usize) -> ResidualBlock {
        ResidualBlock {
            conv1: ConvLayer::zeros(channels, channels, 3, 1, 1),
            conv2: ConvLayer::zeros(channels, channels, 3, 1, 1),
        }
    }
}

/// Importance levels paired with each supported channel count.
pub fn levels_for(n: usize) -> Result<usize, ModelError> {
    match n {
        64 => Ok(16),
        128 => Ok(32),
        other => Err(ModelError::BadChannelCount(other as u16)),
    }
}

/// All learnable parameters. Values are kept f32-representable so the
/// on-disk format loses nothing.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub n: usize,
    pub levels: usize,
    /// Cleared for the baseline trained without the importance map; the
    /// mask is then all ones and no importance payload is coded.
    pub importance_enabled: bool,

    pub enc_conv1: ConvLayer,
    pub enc_res1: ResidualBlock,
    pub enc_conv2: ConvLayer,
    pub enc_res2: ResidualBlock,
    pub enc_res3: ResidualBlock,
    pub enc_conv3: ConvLayer,

    pub imp_conv1: ConvLayer,
    pub imp_conv2: ConvLayer,
    pub imp_conv3: ConvLayer,

    pub dec_conv1: ConvLayer,
    pub dec_res1: ResidualBlock,
    pub dec_res2: ResidualBlock,
    pub dec_conv2: ConvLayer,
    pub dec_res3: ResidualBlock,
    pub dec_conv3: ConvLayer,
    pub dec_conv4: ConvLayer,
}

impl ModelParams {
    /// All-zero parameters with the right shapes.
    pub fn zeros(n: usize) -> Result<ModelParams, ModelError> {
        let levels = levels_for(n)?;
        Ok(ModelParams {
            n,
            levels,
            importance_enabled: true,
            enc_conv1: ConvLayer::zeros(128, 3, 8, 4, 2),
            enc_res1: ResidualBlock::zeros(128),
            enc_conv2: ConvLayer::zeros(256, 128, 4, 2, 1),
            enc_res2: ResidualBlock::zeros(256),
            enc_res3: ResidualBlock::zeros(256),
            enc_conv3: ConvLayer::zeros(n, 256, 1, 1, 0),
            imp_conv1: ConvLayer::zeros(128, 256, 3, 1, 1),
            imp_conv2: ConvLayer::zeros(128, 128, 3, 1, 1),
            imp_conv3: ConvLayer::zeros(1, 128, 1, 1, 0),
            dec_conv1: ConvLayer::zeros(512, n, 1, 1, 0),
            dec_res1: ResidualBlock::zeros(512),
            dec_res2: ResidualBlock::zeros(512),
            dec_conv2: ConvLayer::zeros(256, 128, 3, 1, 1),
            dec_res3: ResidualBlock::zeros(256),
            dec_conv3: ConvLayer::zeros(32, 16, 3, 1, 1),
            dec_conv4: ConvLayer::zeros(3, 32, 3, 1, 1),
        })
    }

    /// Deterministic initialization: weights uniform in
    /// `+-1/sqrt(fan_in)`, biases zero.
    pub fn init(seed: u64, n: usize) -> Result<ModelParams, ModelError> {
        let mut params = ModelParams::zeros(n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in params.layers_mut() {
            layer.init(&mut rng);
        }
        Ok(params)
    }

    /// Layers in the canonical (serialization) order: encoder, importance
    /// net, decoder, each in architecture-table order.
    pub fn layers(&self) -> Vec<&ConvLayer> {
        vec![
            &self.enc_conv1,
            &self.enc_res1.conv1,
            &self.enc_res1.conv2,
            &self.enc_conv2,
            &self.enc_res2.conv1,
            &self.enc_res2.conv2,
            &self.enc_res3.conv1,
            &self.enc_res3.conv2,
            &self.enc_conv3,
            &self.imp_conv1,
            &self.imp_conv2,
            &self.imp_conv3,
            &self.dec_conv1,
            &self.dec_res1.conv1,
            &self.dec_res1.conv2,
            &self.dec_res2.conv1,
            &self.dec_res2.conv2,
            &self.dec_conv2,
            &self.dec_res3.conv1,
            &self.dec_res3.conv2,
            &self.dec_conv3,
            &self.dec_conv4,
        ]
    }

    pub fn layers_mut(&mut self) -> Vec<&mut ConvLayer> {
        vec![
            &mut self.enc_conv1,
            &mut self.enc_res1.conv1,
            &mut self.enc_res1.conv2,
            &mut self.enc_conv2,
            &mut self.enc_res2.conv1,
            &mut self.enc_res2.conv2,
            &mut self.enc_res3.conv1,
            &mut self.enc_res3.conv2,
            &mut self.enc_conv3,
            &mut self.imp_conv1,
            &mut self.imp_conv2,
            &mut self.imp_conv3,
            &mut self.dec_conv1,
            &mut self.dec_res1.conv1,
            &mut self.dec_res1.conv2,
            &mut self.dec_res2.conv1,
            &mut self.dec_res2.conv2,
            &mut self.dec_conv2,
            &mut self.dec_res3.conv1,
            &mut self.dec_res3.conv2,
            &mut self.dec_conv3,
            &mut self.dec_conv4,
        ]
    }

    /// Canonical serialization, identical to the on-disk format:
    /// magic, version, n, L, flags, then per layer the weights and biases
    /// as little-endian f32 in row-major order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MODEL_MAGIC);
        out.push(MODEL_VERSION);
        out.push(self.n as u8);
        out.push(self.levels as u8);
        out.push(u8::from(self.importance_enabled));
        for layer in self.layers() {
            for &v in layer.w.iter() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            for &v in layer.b.iter() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams, ModelError> {
        let mut r = Cursor { bytes, offset: 0 };
        let magic = r.take::<4>()?;
        if magic != MODEL_MAGIC {
            return Err(ModelError::BadMagic { found: magic });
        }
        let version = r.take::<1>()?[0];
        if version != MODEL_VERSION {
            return Err(ModelError::BadVersion(version));
        }
        let n = r.take::<1>()?[0] as usize;
        let levels = r.take::<1>()?[0] as usize;
        if levels_for(n)? != levels {
            return Err(ModelError::BadLevels { n, levels });
        }
        let importance_enabled = r.take::<1>()?[0] != 0;
        let mut params = ModelParams::zeros(n)?;
        params.importance_enabled = importance_enabled;
        for layer in params.layers_mut() {
            let w = Arc::make_mut(&mut layer.w);
            for v in w.iter_mut() {
                *v = f32::from_le_bytes(r.take::<4>()?) as f64;
            }
            let b = Arc::make_mut(&mut layer.b);
            for v in b.iter_mut() {
                *v = f32::from_le_bytes(r.take::<4>()?) as f64;
            }
        }
        if r.offset != bytes.len() {
            return Err(ModelError::TrailingBytes {
                offset: r.offset,
                extra: bytes.len() - r.offset,
            });
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<ModelParams, ModelError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        ModelParams::from_bytes(&bytes)
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.w.len() + l.b.len()).sum()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], ModelError> {
        if self.offset + N > self.bytes.len() {
            return Err(ModelError::Truncated {
                offset: self.bytes.len(),
                needed: self.offset + N - self.bytes.len(),
            });
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.offset..self.offset + N]);
        self.offset += N;
        Ok(out)
    }
}

/// Tape ids of one uploaded conv layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub w: TensorId,
    pub b: TensorId,
    stride: usize,
    pad: usize,
}

/// All parameter tensors of a model uploaded onto one tape, in canonical
/// layer order.
pub struct NetIds {
    pub layers: Vec<LayerIds>,
}

const ENC: std::ops::Range<usize> = 0..9;
const IMP: std::ops::Range<usize> = 9..12;
const DEC: std::ops::Range<usize> = 12..22;

/// Put every parameter tensor on the tape. Buffers are shared, not
/// copied; `trainable` controls whether gradients are recorded.
pub fn upload(tape: &mut Tape, params: &ModelParams, trainable: bool) -> NetIds {
    let layers = params
        .layers()
        .into_iter()
        .map(|l| LayerIds {
            w: tape.input_shared(&l.weight_shape(), Arc::clone(&l.w), trainable),
            b: tape.input_shared(&[l.cout], Arc::clone(&l.b), trainable),
            stride: l.stride,
            pad: l.pad,
        })
        .collect();
    NetIds { layers }
}

fn conv(tape: &mut Tape, x: TensorId, l: &LayerIds) -> Result<TensorId, ModelError> {
    Ok(tape.conv2d(x, l.w, l.b, l.stride, l.pad)?)
}

fn residual(
    tape: &mut Tape,
    x: TensorId,
    c1: &LayerIds,
    c2: &LayerIds,
) -> Result<TensorId, ModelError> {
    let h = conv(tape, x, c1)?;
    let h = tape.relu(h);
    let h = conv(tape, h, c2)?;
    Ok(tape.add(x, h)?)
}

/// Encoder forward pass; returns the code activations `e` in `(0,1)` with
/// shape `[N, n, H/8, W/8]` and the intermediate features `f` that feed
/// the importance net.
pub fn encode(
    tape: &mut Tape,
    x: TensorId,
    ids: &NetIds,
) -> Result<(TensorId, TensorId), ModelError> {
    let shape = tape.shape(x).to_vec();
    let (h, w) = (shape[2], shape[3]);
    if h % 8 != 0 || w % 8 != 0 {
        return Err(ModelError::NonDivisibleDims { h, w });
    }
    let l: Vec<LayerIds> = ids.layers[ENC].to_vec();
    let h1 = conv(tape, x, &l[0])?;
    let h1 = tape.relu(h1);
    let r1 = residual(tape, h1, &l[1], &l[2])?;
    let h2 = conv(tape, r1, &l[3])?;
    let h2 = tape.relu(h2);
    let r2 = residual(tape, h2, &l[4], &l[5])?;
    let f = residual(tape, r2, &l[6], &l[7])?;
    let e = conv(tape, f, &l[8])?;
    let e = tape.sigmoid(e);
    Ok((e, f))
}

/// Importance net: `f` to a one-channel map in `(0,1)` with the encoder
/// output's spatial size.
pub fn importance(tape: &mut Tape, f: TensorId, ids: &NetIds) -> Result<TensorId, ModelError> {
    let l: Vec<LayerIds> = ids.layers[IMP].to_vec();
    let h = conv(tape, f, &l[0])?;
    let h = tape.relu(h);
    let h = conv(tape, h, &l[1])?;
    let h = tape.relu(h);
    let p = conv(tape, h, &l[2])?;
    Ok(tape.sigmoid(p))
}

/// Decoder forward pass; `c` is `[N, n, h, w]`, output is `[N, 3, 8h, 8w]`
/// and unclamped (evaluation clamps outside the graph).
pub fn decode(
    tape: &mut Tape,
    c: TensorId,
    ids: &NetIds,
    n: usize,
) -> Result<TensorId, ModelError> {
    let shape = tape.shape(c).to_vec();
    if shape.len() != 4 || shape[1] != n {
        return Err(ModelError::CodeChannels {
            expected: n,
            got: if shape.len() == 4 { shape[1] } else { 0 },
        });
    }
    let l: Vec<LayerIds> = ids.layers[DEC].to_vec();
    let h = conv(tape, c, &l[0])?;
    let h = tape.relu(h);
    let h = residual(tape, h, &l[1], &l[2])?;
    let h = residual(tape, h, &l[3], &l[4])?;
    let h = tape.depth_to_space(h, 2)?;
    let h = conv(tape, h, &l[5])?;
    let h = tape.relu(h);
    let h = residual(tape, h, &l[6], &l[7])?;
    let h = tape.depth_to_space(h, 4)?;
    let h = conv(tape, h, &l[8])?;
    let h = tape.relu(h);
    conv(tape, h, &l[9])
}
