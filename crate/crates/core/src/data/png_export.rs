use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::{DatasetShard, PaletteColor, ShapeKind, TextureKind, IMAGE_SIZE, PIXELS};
use crate::error::{Error, Result};

#[derive(Serialize)]
struct MetaLine<'a> {
    index: usize,
    class_label: u32,
    shape_id: u32,
    shape: &'a str,
    texture_id: u32,
    texture: &'a str,
    fg_color: &'a str,
    bg_color: &'a str,
    image: String,
    fg_mask: String,
}

/// 8-bit quantization, rounding half up.
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn write_png(path: &Path, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, IMAGE_SIZE as u32, IMAGE_SIZE as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::Io(e.into()))?;
    w.write_image_data(data).map_err(|e| Error::Io(e.into()))?;
    Ok(())
}

/// Writes `img_NNNNN.png`, `mask_NNNNN.png`, and `meta.jsonl` into `dir`.
pub fn export_png(shard: &DatasetShard, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut meta = BufWriter::new(File::create(dir.join("meta.jsonl"))?);
    for i in 0..shard.len() {
        let img = shard.image(i);
        let mut rgb = Vec::with_capacity(3 * PIXELS);
        for p in 0..PIXELS {
            for ch in 0..3 {
                rgb.push(quantize(img[ch * PIXELS + p]));
            }
        }
        let image = format!("img_{i:05}.png");
        let fg_mask = format!("mask_{i:05}.png");
        write_png(&dir.join(&image), png::ColorType::Rgb, &rgb)?;
        let mask: Vec<u8> = shard.mask(i).iter().map(|&m| m * 255).collect();
        write_png(&dir.join(&fg_mask), png::ColorType::Grayscale, &mask)?;
        let line = MetaLine {
            index: i,
            class_label: shard.labels[i],
            shape_id: shard.shape_ids[i],
            shape: ShapeKind::ALL[shard.shape_ids[i] as usize].name(),
            texture_id: shard.texture_ids[i],
            texture: TextureKind::ALL[shard.texture_ids[i] as usize].name(),
            fg_color: PaletteColor::ALL[shard.fg_colors[i] as usize].name(),
            bg_color: PaletteColor::ALL[shard.bg_colors[i] as usize].name(),
            image,
            fg_mask,
        };
        serde_json::to_writer(&mut meta, &line)?;
        meta.write_all(b"\n")?;
    }
    meta.flush()?;
    Ok(())
}

/// Reads an exported RGB PNG back into channel-first `[3, 32, 32]` floats.
pub fn import_png(path: &Path) -> Result<Vec<f32>> {
    let dec = png::Decoder::new(File::open(path)?);
    let mut reader = dec.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.width as usize != IMAGE_SIZE || info.height as usize != IMAGE_SIZE {
        return Err(Error::Format(format!("{} is not a 32×32 RGB image", path.display())));
    }
    let mut out = vec![0.0f32; 3 * PIXELS];
    for p in 0..PIXELS {
        for ch in 0..3 {
            out[ch * PIXELS + p] = buf[p * 3 + ch] as f32 / 255.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::quantize;

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(0.49 / 255.0), 0);
    }
}
