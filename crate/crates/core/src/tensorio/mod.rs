//! File formats: PNIT tensors, sidecar index arrays, PGM/PPM images and
//! rendered heatmaps.

mod index;
mod pnit;
mod pnm;

use std::path::Path;

pub use index::{
    decode_index_arrays, encode_index_arrays, read_index_file, write_index_file, INDEX_MAGIC,
};
pub use pnit::{read_tensor, read_tensor_strict, write_tensor, Tensor, MAGIC, MAX_NDIM, VERSION};
pub use pnm::{
    color_ramp, quantize_unit, read_gray, read_pnm, read_rgb, write_pgm, write_pnm, write_ppm,
    Pnm,
};

use crate::error::{invalid, shape, Result};
use crate::image::RgbImage;
use crate::map::ScoreMap;

/// Render a map as an 8-bit heatmap. Values are clamped to `[min, max]` and
/// linearly quantized with round-half-up. A `.ppm` path gets a color ramp,
/// anything else a grayscale PGM.
pub fn write_map_image(path: impl AsRef<Path>, map: &ScoreMap, min: f64, max: f64) -> Result<()> {
    let path = path.as_ref();
    let pnm = render_map(
        map,
        min,
        max,
        path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")),
    )?;
    write_pnm(path, &pnm)
}

pub fn render_map(map: &ScoreMap, min: f64, max: f64, color: bool) -> Result<Pnm> {
    if !(min < max) {
        return Err(invalid(format!("heatmap range needs min < max, got [{min}, {max}]")));
    }
    let span = max - min;
    let unit = map.data().iter().map(|&v| (v.clamp(min, max) - min) / span);
    let samples = if color {
        unit.flat_map(|t| color_ramp(t).map(quantize_unit)).collect()
    } else {
        unit.map(quantize_unit).collect()
    };
    Ok(Pnm {
        channels: if color { 3 } else { 1 },
        height: map.height(),
        width: map.width(),
        samples,
    })
}

/// `(H, W)` tensor view of a map (values narrowed to `f32`).
pub fn map_to_tensor(map: &ScoreMap) -> Tensor {
    Tensor::new(
        vec![map.height(), map.width()],
        map.data().iter().map(|&v| v as f32).collect(),
    )
    .expect("map dims are consistent")
}

pub fn tensor_to_map(t: &Tensor) -> Result<ScoreMap> {
    match *t.dims() {
        [h, w] => ScoreMap::new(h, w, t.data().iter().map(|&v| v as f64).collect()),
        [1, h, w] => ScoreMap::new(h, w, t.data().iter().map(|&v| v as f64).collect()),
        _ => Err(shape(format!("expected a (H, W) map tensor, got {:?}", t.dims()))),
    }
}

pub fn write_map(path: impl AsRef<Path>, map: &ScoreMap) -> Result<()> {
    write_tensor(path, &map_to_tensor(map))
}

pub fn read_map(path: impl AsRef<Path>) -> Result<ScoreMap> {
    tensor_to_map(&read_tensor_strict(path)?)
}

/// `(3, H, W)` tensor of an RGB image.
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    Tensor::new(vec![3, img.height(), img.width()], img.to_planar()).expect("consistent dims")
}

pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    match *t.dims() {
        [3, h, w] => RgbImage::from_planar(h, w, t.data()),
        _ => Err(shape(format!("expected a (3, H, W) image tensor, got {:?}", t.dims()))),
    }
}
