//! In-memory images and the bilinear resampling shared by preprocessing,
//! feature merging and map upsampling.

use crate::error::{invalid, Result};

/// Interleaved RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Single-channel image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

fn check_unit_range(data: &[f32]) -> Result<()> {
    if let Some((i, v)) = data
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(invalid(format!("pixel value {v} at index {i} outside [0,1]")));
    }
    Ok(())
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(invalid(format!(
                "{height}x{width} rgb image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        check_unit_range(&data)?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Sets a channel value, clamping into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v.clamp(0.0, 1.0);
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Planar `(3, H, W)` copy, the layout used in PNIT files.
    pub fn to_planar(&self) -> Vec<f32> {
        let n = self.height * self.width;
        let mut out = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                out[c * n + i] = self.data[i * 3 + c];
            }
        }
        out
    }

    pub fn from_planar(height: usize, width: usize, planar: &[f32]) -> Result<Self> {
        let n = height * width;
        if planar.len() != 3 * n {
            return Err(invalid("planar buffer size mismatch"));
        }
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                data[i * 3 + c] = planar[c * n + i];
            }
        }
        Self::new(height, width, data)
    }

    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid("gray image size mismatch"));
        }
        check_unit_range(&data)?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_rgb(&self) -> RgbImage {
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for &v in &self.data {
            data.extend_from_slice(&[v, v, v]);
        }
        RgbImage {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Source taps for half-pixel-center bilinear resampling of one axis.
///
/// Output sample `i` reads source coordinate `(i + 0.5) * in / out - 0.5`,
/// clamped to `[0, in - 1]`.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resampling of `planes` planar channels of size `h x w`.
pub(crate) fn resize_planes(
    src: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    debug_assert_eq!(src.len(), planes * h * w);
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = vec![0.0; planes * out_h * out_w];
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Bilinear resize to `out_h x out_w`.
pub fn resize_bilinear(img: &RgbImage, out_h: usize, out_w: usize) -> Result<RgbImage> {
    if out_h == 0 || out_w == 0 || img.height == 0 || img.width == 0 {
        return Err(invalid("resize to or from an empty image"));
    }
    let planar: Vec<f64> = img.to_planar().into_iter().map(f64::from).collect();
    let out = resize_planes(&planar, 3, img.height, img.width, out_h, out_w);
    let out: Vec<f32> = out.into_iter().map(|v| (v as f32).clamp(0.0, 1.0)).collect();
    RgbImage::from_planar(out_h, out_w, &out)
}

/// Centered `size x size` crop.
pub fn center_crop(img: &RgbImage, size: usize) -> Result<RgbImage> {
    if size > img.height || size > img.width {
        return Err(invalid(format!(
            "crop {size} larger than {}x{} image",
            img.height, img.width
        )));
    }
    let y0 = (img.height - size) / 2;
    let x0 = (img.width - size) / 2;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in y0..y0 + size {
        let row = &img.data[(y * img.width + x0) * 3..(y * img.width + x0 + size) * 3];
        data.extend_from_slice(row);
    }
    Ok(RgbImage {
        height: size,
        width: size,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_identity_when_sizes_match() {
        for (i, (lo, hi, f)) in bilinear_taps(5, 5).into_iter().enumerate() {
            assert_eq!(lo, i);
            assert!(hi == i || hi == i + 1);
            assert_eq!(f, 0.0);
        }
    }

    #[test]
    fn planar_round_trip() {
        let img = RgbImage::new(1, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let p = img.to_planar();
        assert_eq!(p, vec![0.1, 0.4, 0.2, 0.5, 0.3, 0.6]);
        assert_eq!(RgbImage::from_planar(1, 2, &p).unwrap(), img);
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(RgbImage::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
    }

    #[test]
    fn crop_is_centered() {
        let mut img = RgbImage::filled(4, 4, [0.0; 3]);
        img.set(1, 1, 0, 1.0);
        let c = center_crop(&img, 2).unwrap();
        assert_eq!(c.get(0, 0, 0), 1.0);
        assert!(center_crop(&img, 5).is_err());
    }
}
