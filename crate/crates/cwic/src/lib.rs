//! Content-weighted learned image compression.
//!
//! A convolutional encoder maps an image to binary codes; a learned
//! importance map decides, per spatial location, how many code channels
//! are kept. The trimmed codes and the quantized importance map are then
//! losslessly recompressed with context-adaptive binary arithmetic coding
//! and written to a compact container format.
//!
//! The crate is organized as:
//!
//! * [`tensor`] — a minimal reverse-mode autodiff tape for dense f64
//!   tensors (convolution, elementwise ops, straight-through units).
//! * [`nets`] — the encoder, decoder, and importance-map networks, with
//!   parameter initialization and the `.cwcm` model file format.
//! * [`quant`] — binarizer, importance quantizer, mask construction, and
//!   the straight-through gradients that make them trainable.
//! * [`train`] — rate-distortion objective, ADAM, the learning-rate
//!   ladder, and patch-dataset ingestion.
//! * [`entropy`] — context extraction, learned and frequency-table bit
//!   predictors, the binary range coder, and importance-map bitplanes.
//! * [`container`] — the `.cwic` stream format, PPM I/O, and the
//!   end-to-end compress/decompress orchestration.
//! * [`metrics`] — MSE / PSNR / SSIM / bpp and rate-distortion CSV
//!   emission.

pub mod cli;
pub mod container;
pub mod entropy;
pub mod metrics;
pub mod nets;
pub mod quant;
pub mod tensor;
pub mod train;

/// Parallelism cap shared by batch sharding and the `curves` command.
///
/// Reads `CWIC_THREADS`; falls back to the number of available cores.
pub fn thread_cap() -> usize {
    std::env::var("CWIC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}
