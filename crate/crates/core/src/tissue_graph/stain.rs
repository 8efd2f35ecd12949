use crate::data::RgbImage;
use crate::error::{Error, Result};

// BT.601 full-range
fn to_ycbcr([r, g, b]: [f64; 3]) -> [f64; 3] {
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b,
        128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b,
    ]
}

fn to_rgb([y, cb, cr]: [f64; 3]) -> [f64; 3] {
    let (cb, cr) = (cb - 128.0, cr - 128.0);
    [y + 1.402 * cr, y - 0.344_136 * cb - 0.714_136 * cr, y + 1.772 * cb]
}

/// Image pixels in luminance-chrominance space, one `[Y, Cb, Cr]` per pixel.
pub fn ycbcr_pixels(img: &RgbImage) -> Vec<[f64; 3]> {
    img.as_standard_layout()
        .as_slice()
        .expect("standard layout")
        .chunks_exact(3)
        .map(|p| to_ycbcr([p[0] as f64, p[1] as f64, p[2] as f64]))
        .collect()
}

/// Per-channel population mean and standard deviation.
pub fn channel_stats(px: &[[f64; 3]]) -> ([f64; 3], [f64; 3]) {
    let n = px.len().max(1) as f64;
    let mut mean = [0.0; 3];
    for p in px {
        for k in 0..3 {
            mean[k] += p[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 3];
    for p in px {
        for k in 0..3 {
            var[k] += (p[k] - mean[k]).powi(2);
        }
    }
    (mean, var.map(|v| (v / n).sqrt()))
}

/// Statistical colour transfer: each YCbCr channel of `image` is rescaled to
/// the reference's mean and standard deviation. A flat source channel is
/// only shifted.
pub fn stain_normalize(image: &RgbImage, reference: &RgbImage) -> Result<RgbImage> {
    if image.dim().2 != 3 || reference.dim().2 != 3 {
        return Err(Error::shape("stain normalization needs RGB images"));
    }
    if image.is_empty() || reference.is_empty() {
        return Err(Error::EmptyInput);
    }
    let src = ycbcr_pixels(image);
    let (ref_mean, ref_std) = channel_stats(&ycbcr_pixels(reference));
    if ref_std.iter().all(|&s| s == 0.0) {
        return Err(Error::DegenerateReference);
    }
    let (src_mean, src_std) = channel_stats(&src);
    let mut out = image.clone();
    let (h, w, _) = image.dim();
    for (i, p) in src.iter().enumerate() {
        let mut q = [0.0; 3];
        for k in 0..3 {
            let centred = p[k] - src_mean[k];
            let scaled = if src_std[k] > 0.0 {
                centred / src_std[k] * ref_std[k]
            } else {
                centred
            };
            q[k] = scaled + ref_mean[k];
        }
        let rgb = to_rgb(q);
        for k in 0..3 {
            out[[i / w, i % w, k]] = rgb[k].round().clamp(0.0, 255.0) as u8;
        }
    }
    debug_assert_eq!(out.dim(), (h, w, 3));
    Ok(out)
}
