//! Binary PGM (`P5`) and PPM (`P6`) images with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{GrayImage, RgbImage};

/// Round-half-up quantization of a `[0, 1]` value to `0..=255`.
#[inline]
pub fn quantize_unit(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Raw decoded PNM: channel count (1 or 3), dims and 8-bit samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<u8>,
}

impl Pnm {
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.samples);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::CorruptHeader(format!("pnm: {m}"));
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(bad("expected P5 or P6 magic")),
        };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in fields.iter_mut() {
            // whitespace and comments
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(_) => break,
                    None => return Err(bad("truncated header")),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                return Err(bad("expected a number"));
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .unwrap()
                .parse()
                .map_err(|_| bad("number out of range"))?;
        }
        let [width, height, maxval] = fields;
        if maxval == 0 || maxval > 255 {
            return Err(bad("only 8-bit samples are supported"));
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(bad("missing separator before raster"));
        }
        pos += 1;
        let expected = width * height * channels;
        let raster = &bytes[pos..];
        if raster.len() != expected {
            return Err(Error::PayloadMismatch {
                expected,
                actual: raster.len(),
            });
        }
        let samples = if maxval == 255 {
            raster.to_vec()
        } else {
            raster
                .iter()
                .map(|&s| ((s as u32 * 255 + maxval as u32 / 2) / maxval as u32) as u8)
                .collect()
        };
        Ok(Self {
            channels,
            height,
            width,
            samples,
        })
    }
}

pub fn write_pnm(path: impl AsRef<Path>, pnm: &Pnm) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, pnm.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Pnm> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Pnm::decode(&bytes)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let samples = img.data().iter().map(|&v| quantize_unit(v as f64)).collect();
    write_pnm(
        path,
        &Pnm {
            channels: 3,
            height: img.height(),
            width: img.width(),
            samples,
        },
    )
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let samples = img.data().iter().map(|&v| quantize_unit(v as f64)).collect();
    write_pnm(
        path,
        &Pnm {
            channels: 1,
            height: img.height(),
            width: img.width(),
            samples,
        },
    )
}

/// Reads a PPM, or a PGM expanded to three equal channels.
pub fn read_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let pnm = read_pnm(path)?;
    let data: Vec<f32> = pnm.samples.iter().map(|&s| s as f32 / 255.0).collect();
    match pnm.channels {
        3 => RgbImage::new(pnm.height, pnm.width, data),
        _ => Ok(GrayImage::new(pnm.height, pnm.width, data)?.to_rgb()),
    }
}

pub fn read_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let pnm = read_pnm(path)?;
    if pnm.channels != 1 {
        return Err(Error::InvalidArgument("expected a PGM image".into()));
    }
    let data = pnm.samples.iter().map(|&s| s as f32 / 255.0).collect();
    GrayImage::new(pnm.height, pnm.width, data)
}

/// Blue → cyan → green → yellow → red ramp.
pub fn color_ramp(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0) * 4.0;
    let seg = (t.floor() as usize).min(3);
    let f = t - seg as f64;
    match seg {
        0 => [0.0, f, 1.0],
        1 => [0.0, 1.0, 1.0 - f],
        2 => [f, 1.0, 0.0],
        _ => [1.0, 1.0 - f, 0.0],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_round_half_up() {
        assert_eq!(quantize_unit(0.0), 0);
        assert_eq!(quantize_unit(1.0), 255);
        assert_eq!(quantize_unit(0.5), 128);
        assert_eq!(quantize_unit(-3.0), 0);
    }

    #[test]
    fn decode_with_comment_and_low_maxval() {
        let mut bytes = b"P5 # c\n2 1\n# x\n15\n".to_vec();
        bytes.extend_from_slice(&[0, 15]);
        let p = Pnm::decode(&bytes).unwrap();
        assert_eq!((p.width, p.height, p.channels), (2, 1, 1));
        assert_eq!(p.samples, vec![0, 255]);
    }

    #[test]
    fn encode_decode() {
        let p = Pnm {
            channels: 3,
            height: 2,
            width: 1,
            samples: vec![1, 2, 3, 4, 5, 6],
        };
        assert_eq!(Pnm::decode(&p.encode()).unwrap(), p);
    }

    #[test]
    fn short_raster_is_payload_mismatch() {
        let bytes = b"P6\n2 2\n255\n\x01\x02".to_vec();
        assert!(matches!(
            Pnm::decode(&bytes),
            Err(Error::PayloadMismatch { .. })
        ));
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(color_ramp(0.0), [0.0, 0.0, 1.0]);
        assert_eq!(color_ramp(1.0), [1.0, 0.0, 0.0]);
    }
}
