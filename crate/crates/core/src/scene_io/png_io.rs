use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::image::Image;
use crate::{Error, Result};

/// Quantizes to 8 bits, rounding half up.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 255.0
}

pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_png(image, &mut out).map_err(|e| Error::invalid("png", e.to_string()))?;
    Ok(out)
}

fn write_png(image: &Image, w: impl std::io::Write) -> std::result::Result<(), png::EncodingError> {
    let mut encoder = png::Encoder::new(w, image.width, image.height);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    let bytes: Vec<u8> = image.data.iter().map(|&v| to_byte(v)).collect();
    writer.write_image_data(&bytes)?;
    writer.finish()
}

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_png(image, BufWriter::new(file)).map_err(|e| Error::format(path, e.to_string()))
}

pub fn decode_png(bytes: &[u8]) -> std::result::Result<Image, String> {
    read_png(std::io::Cursor::new(bytes))
}

pub fn load_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_png(BufReader::new(file)).map_err(|reason| Error::format(path, reason))
}

fn read_png(r: impl std::io::BufRead + std::io::Seek) -> std::result::Result<Image, String> {
    let mut decoder = png::Decoder::new(r);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader.output_buffer_size().ok_or("image too large")?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(format!("unsupported color type {other:?}")),
    };
    let mut data = Vec::with_capacity(info.width as usize * info.height as usize * 3);
    for row in buf[..info.buffer_size()].chunks_exact(info.line_size) {
        for px in row[..info.width as usize * channels].chunks_exact(channels) {
            if channels < 3 {
                data.extend([from_byte(px[0]); 3]);
            } else {
                data.extend(px[..3].iter().map(|&b| from_byte(b)));
            }
        }
    }
    Image::new(info.width, info.height, data).map_err(|e| e.to_string())
}
