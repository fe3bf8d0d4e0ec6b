//! Evaluation metrics (MSE, PSNR, SSIM, bpp) and rate-distortion CSV
//! emission.
//!
//! MSE is the mean squared sample difference on the 0..255 scale; PSNR is
//! `10*log10(255^2 / mse)` with `+inf` for identical images. SSIM runs on
//! the channel-mean gray image with the standard 11x11 Gaussian window
//! (sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 255), averaged over
//! fully-covered window positions.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::container::{self, CompressOpts, ContainerError, RawImage};
use crate::entropy::EntropyModel;
use crate::nets::ModelParams;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimMismatch(usize, usize, usize, usize),
    #[error("image {0}x{1} smaller than the 11x11 SSIM window")]
    TooSmall(usize, usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// One operating point of one codec on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RDPoint {
    pub image: String,
    pub codec: String,
    pub bpp: f64,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub const CSV_HEADER: &str = "image,codec,bpp,mse_255,psnr_db,ssim";

fn check_dims(a: &RawImage, b: &RawImage) -> Result<(), MetricsError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricsError::DimMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    Ok(())
}

/// Mean squared sample difference on the 0..255 scale.
pub fn mse(a: &RawImage, b: &RawImage) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    let total: f64 = a
        .rgb
        .iter()
        .zip(&b.rgb)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(total / a.rgb.len() as f64)
}

/// `10*log10(255^2 / mse)`; identical images report `+inf`.
pub fn psnr(a: &RawImage, b: &RawImage) -> Result<f64, MetricsError> {
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / err).log10())
}

fn to_gray(image: &RawImage) -> Vec<f64> {
    image
        .rgb
        .chunks_exact(3)
        .map(|px| (px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0)
        .collect()
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian filter; output is
/// `(h - 10) x (w - 10)`.
fn gauss_valid(img: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let ow = w - SSIM_WINDOW + 1;
    // Horizontal pass.
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * img[y * w + x + t];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // Vertical pass.
    let oh = h - SSIM_WINDOW + 1;
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + t) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean local SSIM between the channel-mean gray images.
pub fn ssim(a: &RawImage, b: &RawImage) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(MetricsError::TooSmall(a.width, a.height));
    }
    let (w, h) = (a.width, a.height);
    let x = to_gray(a);
    let y = to_gray(b);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();

    let mu_x = gauss_valid(&x, w, h);
    let mu_y = gauss_valid(&y, w, h);
    let e_xx = gauss_valid(&xx, w, h);
    let e_yy = gauss_valid(&yy, w, h);
    let e_xy = gauss_valid(&xy, w, h);

    let c1 = (SSIM_K1 * 255.0) * (SSIM_K1 * 255.0);
    let c2 = (SSIM_K2 * 255.0) * (SSIM_K2 * 255.0);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = e_xx[i] - mx * mx;
        let var_y = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
    }
    Ok(total / mu_x.len() as f64)
}

/// File bits per pixel: `8 * bytes / (width * height)` of the original
/// image.
pub fn bpp(stream_bytes: usize, width: usize, height: usize) -> f64 {
    8.0 * stream_bytes as f64 / (width * height) as f64
}

/// Measure one original/reconstruction pair against its stream size.
pub fn rd_point(
    image_id: &str,
    codec: &str,
    orig: &RawImage,
    recon: &RawImage,
    stream_bytes: usize,
) -> Result<RDPoint, MetricsError> {
    Ok(RDPoint {
        image: image_id.to_string(),
        codec: codec.to_string(),
        bpp: bpp(stream_bytes, orig.width, orig.height),
        mse: mse(orig, recon)?,
        psnr: psnr(orig, recon)?,
        ssim: ssim(orig, recon)?,
    })
}

/// One codec entry for [`rd_curve`]: a label, the model, and the entropy
/// model to compress with (freq-table coding when absent).
pub struct CurveCodec {
    pub label: String,
    pub params: ModelParams,
    pub entropy: Option<EntropyModel>,
}

/// Compress + decompress every PPM under `dir` with every codec and
/// measure it. Rows come back ordered by (image, codec); per-codec mean
/// rows (image id "mean") are appended. Unreadable images are skipped
/// with a warning.
pub fn rd_curve(dir: &Path, codecs: &[CurveCodec]) -> Result<Vec<RDPoint>, MetricsError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("ppm"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();

    let mut images = Vec::new();
    for path in paths {
        match container::read_ppm(&path) {
            Ok(img) => {
                let id = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.display().to_string());
                images.push((id, img));
            }
            Err(err) => eprintln!("warning: skipping {}: {err}", path.display()),
        }
    }

    let workers = crate::thread_cap().min(images.len()).max(1);
    let chunk = images.len().div_ceil(workers).max(1);
    let results: Vec<Result<Vec<RDPoint>, MetricsError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = images
            .chunks(chunk)
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|(id, img)| measure_image(id, img, codecs))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("curve worker panicked"))
            .collect()
    });

    let mut rows = Vec::new();
    for result in results {
        rows.extend(result?);
    }
    rows.extend(mean_rows(&rows, codecs));
    Ok(rows)
}

fn measure_image(
    id: &str,
    img: &RawImage,
    codecs: &[CurveCodec],
) -> Result<Vec<RDPoint>, MetricsError> {
    let mut out = Vec::new();
    for codec in codecs {
        let opts = CompressOpts {
            use_freq_table: codec.entropy.is_none(),
            ..CompressOpts::default()
        };
        let stream = container::compress(img, &codec.params, codec.entropy.as_ref(), &opts)?;
        let recon = container::decompress(&stream, &codec.params, codec.entropy.as_ref())?;
        out.push(rd_point(
            id,
            &codec.label,
            img,
            &recon,
            stream.total_bytes(),
        )?);
    }
    Ok(out)
}

fn mean_rows(rows: &[RDPoint], codecs: &[CurveCodec]) -> Vec<RDPoint> {
    codecs
        .iter()
        .filter_map(|codec| {
            let of_codec: Vec<&RDPoint> = rows.iter().filter(|r| r.codec == codec.label).collect();
            if of_codec.is_empty() {
                return None;
            }
            let count = of_codec.len() as f64;
            Some(RDPoint {
                image: "mean".to_string(),
                codec: codec.label.clone(),
                bpp: of_codec.iter().map(|r| r.bpp).sum::<f64>() / count,
                mse: of_codec.iter().map(|r| r.mse).sum::<f64>() / count,
                psnr: of_codec.iter().map(|r| r.psnr).sum::<f64>() / count,
                ssim: of_codec.iter().map(|r| r.ssim).sum::<f64>() / count,
            })
        })
        .collect()
}

pub fn format_row(row: &RDPoint) -> String {
    format!(
        "{},{},{},{},{},{}",
        row.image, row.codec, row.bpp, row.mse, row.psnr, row.ssim
    )
}

/// Write rows under the standard header.
pub fn write_csv(path: &Path, rows: &[RDPoint]) -> Result<(), MetricsError> {
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&format_row(row));
        text.push('\n');
    }
    Ok(std::fs::write(path, text)?)
}

/// Read rows in the same format (used to ingest external-codec
/// baselines, which pass through unchanged).
pub fn read_csv(path: &Path) -> Result<Vec<RDPoint>, MetricsError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header.trim() == CSV_HEADER => {}
        other => {
            return Err(MetricsError::Csv(format!(
                "expected header \"{CSV_HEADER}\", got {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(MetricsError::Csv(format!(
                "line {}: expected 6 columns, got {}",
                idx + 2,
                parts.len()
            )));
        }
        let num = |s: &str| -> Result<f64, MetricsError> {
            s.trim()
                .parse()
                .map_err(|_| MetricsError::Csv(format!("line {}: bad number \"{s}\"", idx + 2)))
        };
        rows.push(RDPoint {
            image: parts[0].trim().to_string(),
            codec: parts[1].trim().to_string(),
            bpp: num(parts[2])?,
            mse: num(parts[3])?,
            psnr: num(parts[4])?,
            ssim: num(parts[5])?,
        });
    }
    Ok(rows)
}
