//! 8-bit PNG input and output. Images live in memory as `[1, C, H, W]` maps
//! with values in [0, 1].

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::numerics::FeatureMap;

pub type Image = FeatureMap<f32>;

fn image_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads an 8-bit PNG as RGB; gray is replicated and alpha dropped.
pub fn load_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e.to_string()))?;
    if reader.info().bit_depth == BitDepth::Sixteen {
        return Err(image_err(path, "unsupported bit depth 16; only 8-bit PNG is accepted"));
    }
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| image_err(path, e.to_string()))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let stride = match frame.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(image_err(path, "palette was not expanded")),
    };
    if frame.bit_depth != BitDepth::Eight {
        return Err(image_err(path, format!("unsupported bit depth {:?}", frame.bit_depth)));
    }
    let bytes = &buf[..frame.line_size * h];
    Ok(FeatureMap::from_fn([1, 3, h, w], |[_, c, y, x]| {
        let px = &bytes[y * frame.line_size + x * stride..];
        let v = if stride < 3 { px[0] } else { px[c] };
        v as f32 / 255.0
    }))
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the first batch item as an 8-bit RGB PNG, clamping to [0, 1].
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let [_, c, h, w] = img.shape();
    if c != 3 {
        return Err(image_err(path, format!("expected 3 channels, got {c}")));
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                data.push(to_u8(img.at(0, ch, y, x)));
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(ColorType::Rgb);
    enc.set_depth(BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e.to_string()))?;
    writer
        .write_image_data(&data)
        .map_err(|e| image_err(path, e.to_string()))
}
