//! The `.cwic` stream format and the compress/decompress pipeline.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CWIC"
//! 4       1     version (1)
//! 5       1     flags
//! 6       2     original width  (u16)
//! 8       2     original height (u16)
//! 10      1     n   (code channels)
//! 11      1     L   (importance levels)
//! 12      1     n_b (importance bitplanes)
//! 13      4     CRC-32 of the model file bytes
//! 17      4     CRC-32 of the entropy-model file bytes (0 if unused)
//! 21      4     importance payload length
//! 25      ...   importance payload
//! ...     4     code payload length
//! ...     ...   code payload
//! ```
//!
//! Flag bits: 0 = code payload entropy-coded, 1 = importance map
//! disabled, 2 = importance payload entropy-coded, 3 = adaptive
//! frequency-table coding (no entropy-model file involved). A payload
//! whose entropy coding would enlarge it is stored raw with its flag bit
//! clear, independently of the other payload.

use super::{crc32, ppm::RawImage, ContainerError};
use crate::entropy::{self, EntropyModel, Predictor};
use crate::nets::{self, ModelParams};
use crate::quant::{self, CodeBundle};
use crate::tensor::Tape;

pub const STREAM_MAGIC: [u8; 4] = *b"CWIC";
pub const STREAM_VERSION: u8 = 1;
/// Fixed header bytes before the first payload length field.
pub const HEADER_LEN: usize = 21;

pub const FLAG_CODES_CODED: u8 = 1 << 0;
pub const FLAG_IMPORTANCE_DISABLED: u8 = 1 << 1;
pub const FLAG_IMP_CODED: u8 = 1 << 2;
pub const FLAG_FREQ_TABLE: u8 = 1 << 3;

/// A parsed `.cwic` stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedStream {
    pub version: u8,
    pub flags: u8,
    pub width: u16,
    pub height: u16,
    pub n: u8,
    pub levels: u8,
    pub n_b: u8,
    pub model_crc: u32,
    pub entropy_crc: u32,
    pub imp_payload: Vec<u8>,
    pub code_payload: Vec<u8>,
}

impl CompressedStream {
    pub fn total_bytes(&self) -> usize {
        HEADER_LEN + 4 + self.imp_payload.len() + 4 + self.code_payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_bytes());
        out.extend_from_slice(&STREAM_MAGIC);
        out.push(self.version);
        out.push(self.flags);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.n);
        out.push(self.levels);
        out.push(self.n_b);
        out.extend_from_slice(&self.model_crc.to_le_bytes());
        out.extend_from_slice(&self.entropy_crc.to_le_bytes());
        out.extend_from_slice(&(self.imp_payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.imp_payload);
        out.extend_from_slice(&(self.code_payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.code_payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CompressedStream, ContainerError> {
        let mut offset = 0usize;
        let take = |offset: &mut usize, n: usize| -> Result<&[u8], ContainerError> {
            if *offset + n > bytes.len() {
                return Err(ContainerError::Truncated {
                    offset: bytes.len(),
                    needed: *offset + n - bytes.len(),
                });
            }
            let s = &bytes[*offset..*offset + n];
            *offset += n;
            Ok(s)
        };
        let magic: [u8; 4] = take(&mut offset, 4)?.try_into().unwrap();
        if magic != STREAM_MAGIC {
            return Err(ContainerError::BadMagic { found: magic });
        }
        let version = take(&mut offset, 1)?[0];
        if version != STREAM_VERSION {
            return Err(ContainerError::BadVersion(version));
        }
        let flags = take(&mut offset, 1)?[0];
        let width = u16::from_le_bytes(take(&mut offset, 2)?.try_into().unwrap());
        let height = u16::from_le_bytes(take(&mut offset, 2)?.try_into().unwrap());
        let n = take(&mut offset, 1)?[0];
        let levels = take(&mut offset, 1)?[0];
        let n_b = take(&mut offset, 1)?[0];
        let model_crc = u32::from_le_bytes(take(&mut offset, 4)?.try_into().unwrap());
        let entropy_crc = u32::from_le_bytes(take(&mut offset, 4)?.try_into().unwrap());
        let imp_len = u32::from_le_bytes(take(&mut offset, 4)?.try_into().unwrap()) as usize;
        let imp_payload = take(&mut offset, imp_len)?.to_vec();
        let code_len = u32::from_le_bytes(take(&mut offset, 4)?.try_into().unwrap()) as usize;
        let code_payload = take(&mut offset, code_len)?.to_vec();
        if offset != bytes.len() {
            return Err(ContainerError::TrailingBytes {
                offset,
                extra: bytes.len() - offset,
            });
        }
        Ok(CompressedStream {
            version,
            flags,
            width,
            height,
            n,
            levels,
            n_b,
            model_crc,
            entropy_crc,
            imp_payload,
            code_payload,
        })
    }
}

/// Payload handling choices for [`compress`].
#[derive(Debug, Clone, Copy)]
pub struct CompressOpts {
    /// Entropy-code the trimmed binary codes (raw otherwise).
    pub entropy_codes: bool,
    /// Entropy-code the importance bitplanes (raw otherwise).
    pub entropy_importance: bool,
    /// Use fresh adaptive frequency tables (the small-context CABAC
    /// baseline) instead of a trained entropy model.
    pub use_freq_table: bool,
}

impl Default for CompressOpts {
    fn default() -> Self {
        CompressOpts {
            entropy_codes: true,
            entropy_importance: true,
            use_freq_table: false,
        }
    }
}

fn padded(dim: usize) -> usize {
    dim.div_ceil(8) * 8
}

/// Planar image padded to multiples of 8 by edge replication.
pub(crate) fn pad_planes(image: &RawImage) -> (Vec<f64>, usize, usize) {
    let (w, h) = (image.width, image.height);
    let (pw, ph) = (padded(w), padded(h));
    let mut out = vec![0.0; 3 * pw * ph];
    for c in 0..3 {
        for y in 0..ph {
            let sy = y.min(h - 1);
            for x in 0..pw {
                let sx = x.min(w - 1);
                out[(c * ph + y) * pw + x] = image.rgb[(sy * w + sx) * 3 + c] as f64 / 255.0;
            }
        }
    }
    (out, pw, ph)
}

/// Run the analysis half of the codec: encoder, importance map,
/// quantization, masking, trimming. The returned bundle covers the padded
/// image (`ceil(W/8) x ceil(H/8)` code positions).
pub fn analyze(image: &RawImage, params: &ModelParams) -> Result<CodeBundle, ContainerError> {
    if image.width == 0 || image.height == 0 {
        return Err(ContainerError::ZeroDimension {
            width: image.width,
            height: image.height,
        });
    }
    let (planes, pw, ph) = pad_planes(image);
    let mut tape = Tape::new();
    let ids = nets::upload(&mut tape, params, false);
    let x = tape.input(&[1, 3, ph, pw], planes, false);
    let (e, f) = nets::encode(&mut tape, x, &ids)?;
    let raw_codes: Vec<u8> = tape
        .data(e)
        .iter()
        .map(|&v| quant::binarize_value(v))
        .collect();
    let (h, w) = (ph / 8, pw / 8);
    if params.importance_enabled {
        let p = nets::importance(&mut tape, f, &ids)?;
        let mut imp_q = Vec::with_capacity(h * w);
        for &v in tape.data(p) {
            // The sigmoid output is in (0,1) mathematically; the clamp
            // guards against f64 saturation under extreme weights.
            let v = v.clamp(1e-12, 1.0 - 1e-12);
            imp_q.push(quant::quantize_importance(v, params.levels)? as u8);
        }
        Ok(CodeBundle::build(
            params.n,
            params.levels,
            h,
            w,
            raw_codes,
            imp_q,
        )?)
    } else {
        Ok(CodeBundle {
            n: params.n,
            levels: params.levels,
            h,
            w,
            codes: raw_codes,
            imp_q: Vec::new(),
            mask: vec![1; params.n * h * w],
        })
    }
}

/// Compress one image. `entropy_model` may be `None` only when no payload
/// asks for model-based entropy coding.
pub fn compress(
    image: &RawImage,
    params: &ModelParams,
    entropy_model: Option<&EntropyModel>,
    opts: &CompressOpts,
) -> Result<CompressedStream, ContainerError> {
    if image.width > u16::MAX as usize || image.height > u16::MAX as usize {
        return Err(ContainerError::BadGeometry(format!(
            "image {}x{} exceeds the u16 header fields",
            image.width, image.height
        )));
    }
    let bundle = analyze(image, params)?;
    let imp_disabled = !params.importance_enabled;

    let wants_model = !opts.use_freq_table && (opts.entropy_codes || opts.entropy_importance);
    if wants_model && entropy_model.is_none() {
        return Err(ContainerError::BadGeometry(
            "entropy coding requested but no entropy model supplied".into(),
        ));
    }

    let codes_predictor = || -> Predictor {
        if opts.use_freq_table {
            Predictor::Freq(entropy::FreqTable::new())
        } else {
            entropy_model.unwrap().codes.clone()
        }
    };
    let imp_predictor = || -> Predictor {
        if opts.use_freq_table {
            Predictor::Freq(entropy::FreqTable::new())
        } else {
            entropy_model.unwrap().importance.clone()
        }
    };

    let mut flags = 0u8;
    if imp_disabled {
        flags |= FLAG_IMPORTANCE_DISABLED;
    }
    if opts.use_freq_table {
        flags |= FLAG_FREQ_TABLE;
    }

    // Importance payload, with per-payload raw fallback.
    let imp_payload = if imp_disabled {
        Vec::new()
    } else {
        let raw = entropy::raw_importance_payload(&bundle.imp_q, bundle.levels)?;
        if opts.entropy_importance {
            let coded = entropy::encode_importance_payload(
                &bundle.imp_q,
                bundle.h,
                bundle.w,
                bundle.levels,
                &mut imp_predictor(),
            )?;
            if coded.len() < raw.len() {
                flags |= FLAG_IMP_CODED;
                coded
            } else {
                raw
            }
        } else {
            raw
        }
    };

    // Code payload, same fallback.
    let code_payload = {
        let raw = entropy::raw_code_payload(&bundle);
        if opts.entropy_codes {
            let coded = entropy::encode_code_payload(&bundle, &mut codes_predictor());
            if coded.len() < raw.len() {
                flags |= FLAG_CODES_CODED;
                coded
            } else {
                raw
            }
        } else {
            raw
        }
    };

    let model_was_used = !opts.use_freq_table && (flags & (FLAG_CODES_CODED | FLAG_IMP_CODED)) != 0;
    let entropy_crc = if model_was_used {
        crc32(&entropy_model.unwrap().to_bytes())
    } else {
        0
    };

    Ok(CompressedStream {
        version: STREAM_VERSION,
        flags,
        width: image.width as u16,
        height: image.height as u16,
        n: params.n as u8,
        levels: params.levels as u8,
        n_b: entropy::bitplane_count(params.levels) as u8,
        model_crc: crc32(&params.to_bytes()),
        entropy_crc,
        imp_payload,
        code_payload,
    })
}

/// The decode-side state recovered losslessly from a stream.
pub struct RecoveredBundle {
    pub bundle: CodeBundle,
    pub padded_w: usize,
    pub padded_h: usize,
}

/// Rebuild the code bundle (importance map, mask, trimmed codes) from a
/// stream without running the decoder network.
pub fn recover_bundle(
    stream: &CompressedStream,
    params: &ModelParams,
    entropy_model: Option<&EntropyModel>,
) -> Result<RecoveredBundle, ContainerError> {
    if stream.width == 0 || stream.height == 0 {
        return Err(ContainerError::ZeroDimension {
            width: stream.width as usize,
            height: stream.height as usize,
        });
    }
    if stream.n as usize != params.n || stream.levels as usize != params.levels {
        return Err(ContainerError::BadGeometry(format!(
            "stream is n={} L={} but the model is n={} L={}",
            stream.n, stream.levels, params.n, params.levels
        )));
    }
    if stream.n_b as usize != entropy::bitplane_count(params.levels) {
        return Err(ContainerError::BadGeometry(format!(
            "stream declares {} bitplanes, expected {}",
            stream.n_b,
            entropy::bitplane_count(params.levels)
        )));
    }
    let model_crc = crc32(&params.to_bytes());
    if stream.model_crc != model_crc {
        return Err(ContainerError::ModelChecksum {
            stream: stream.model_crc,
            model: model_crc,
        });
    }
    let imp_disabled = stream.flags & FLAG_IMPORTANCE_DISABLED != 0;
    let freq = stream.flags & FLAG_FREQ_TABLE != 0;
    let needs_model = !freq && stream.flags & (FLAG_CODES_CODED | FLAG_IMP_CODED) != 0;
    if needs_model {
        let model = entropy_model.ok_or_else(|| {
            ContainerError::BadGeometry("stream needs an entropy model to decode".into())
        })?;
        let crc = crc32(&model.to_bytes());
        if stream.entropy_crc != crc {
            return Err(ContainerError::EntropyChecksum {
                stream: stream.entropy_crc,
                model: crc,
            });
        }
    }

    let (pw, ph) = (
        padded(stream.width as usize),
        padded(stream.height as usize),
    );
    let (h, w) = (ph / 8, pw / 8);
    let n = params.n;
    let levels = params.levels;

    let codes_predictor = || -> Predictor {
        if freq {
            Predictor::Freq(entropy::FreqTable::new())
        } else {
            entropy_model.unwrap().codes.clone()
        }
    };
    let imp_predictor = || -> Predictor {
        if freq {
            Predictor::Freq(entropy::FreqTable::new())
        } else {
            entropy_model.unwrap().importance.clone()
        }
    };

    let (imp_q, mask) = if imp_disabled {
        if !stream.imp_payload.is_empty() {
            return Err(ContainerError::BadGeometry(
                "importance disabled but the stream carries an importance payload".into(),
            ));
        }
        (Vec::new(), vec![1u8; n * h * w])
    } else {
        let imp_q = if stream.flags & FLAG_IMP_CODED != 0 {
            entropy::decode_importance_payload(
                &stream.imp_payload,
                h,
                w,
                levels,
                &mut imp_predictor(),
            )?
        } else {
            let expect = (stream.n_b as usize * h * w).div_ceil(8);
            if stream.imp_payload.len() != expect {
                return Err(ContainerError::BitCountMismatch {
                    expected: expect * 8,
                    got: stream.imp_payload.len() * 8,
                });
            }
            entropy::unpack_importance_payload(&stream.imp_payload, h, w, levels)?
        };
        for &q in &imp_q {
            if q as usize >= levels {
                return Err(ContainerError::BadGeometry(format!(
                    "importance level {q} out of range (L={levels})"
                )));
            }
        }
        let mask = quant::build_mask(&imp_q, h, w, n, levels)?;
        (imp_q, mask)
    };

    let coded_bits: usize = mask.iter().map(|&m| m as usize).sum();
    let codes = if stream.flags & FLAG_CODES_CODED != 0 {
        entropy::decode_code_payload(&stream.code_payload, &mask, n, h, w, &mut codes_predictor())?
    } else {
        let expect = coded_bits.div_ceil(8);
        if stream.code_payload.len() != expect {
            return Err(ContainerError::BitCountMismatch {
                expected: expect * 8,
                got: stream.code_payload.len() * 8,
            });
        }
        entropy::unpack_code_payload(&stream.code_payload, &mask, n, h, w)?
    };

    Ok(RecoveredBundle {
        bundle: CodeBundle {
            n,
            levels,
            h,
            w,
            codes,
            imp_q,
            mask,
        },
        padded_w: pw,
        padded_h: ph,
    })
}

/// Full decompression: recover the bundle, run the decoder network, crop
/// the padding, quantize to 8-bit RGB.
pub fn decompress(
    stream: &CompressedStream,
    params: &ModelParams,
    entropy_model: Option<&EntropyModel>,
) -> Result<RawImage, ContainerError> {
    let recovered = recover_bundle(stream, params, entropy_model)?;
    let bundle = &recovered.bundle;
    let (pw, ph) = (recovered.padded_w, recovered.padded_h);

    let mut tape = Tape::new();
    let ids = nets::upload(&mut tape, params, false);
    let code_data: Vec<f64> = bundle.codes.iter().map(|&b| b as f64).collect();
    let c = tape.input(&[1, params.n, bundle.h, bundle.w], code_data, false);
    let xhat = nets::decode(&mut tape, c, &ids, params.n)?;
    let planes = tape.data(xhat);

    let (w, h) = (stream.width as usize, stream.height as usize);
    let mut cropped = vec![0.0; 3 * w * h];
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                cropped[(ch * h + y) * w + x] = planes[(ch * ph + y) * pw + x];
            }
        }
    }
    Ok(RawImage::from_planes(w, h, &cropped))
}
