//! PNG encodings of the three map types.
//!
//! - segmentation: 8-bit indexed, index = label id (8-bit gray is also accepted on read)
//! - depth: 16-bit gray, `0` = near, `65535` = far
//! - image: 8-bit RGB, `[-1, 1]` mapped linearly onto `0..=255`

use std::io::Cursor;
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::types::{DepthMap, ImageTensor, LabelSet, SegmentationMap};

/// Display colours for the default labels; extra labels cycle through them.
const PALETTE: [[u8; 3]; 7] = [
    [135, 190, 235],
    [110, 110, 130],
    [34, 100, 40],
    [90, 170, 60],
    [140, 100, 60],
    [40, 80, 160],
    [120, 115, 105],
];

fn encode(width: usize, height: usize, color: ColorType, depth: BitDepth, palette: Option<Vec<u8>>, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        if let Some(p) = palette {
            enc.set_palette(p);
        }
        let mut writer = enc.write_header().expect("in-memory PNG header");
        writer.write_image_data(data).expect("in-memory PNG data");
    }
    out
}

struct Decoded {
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    data: Vec<u8>,
}

fn decode(bytes: &[u8]) -> std::result::Result<Decoded, String> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let size = reader.output_buffer_size().ok_or("image too large")?;
    let mut data = vec![0; size];
    let info = reader.next_frame(&mut data).map_err(|e| e.to_string())?;
    data.truncate(info.line_size * info.height as usize);
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data,
    })
}

fn bad(what: &str, msg: impl std::fmt::Display) -> Error {
    Error::ShapeMismatch(format!("{what} PNG: {msg}"))
}

pub fn encode_segmentation(seg: &SegmentationMap) -> Vec<u8> {
    let palette: Vec<u8> = (0..seg.num_labels()).flat_map(|i| PALETTE[i % PALETTE.len()]).collect();
    encode(seg.width(), seg.height(), ColorType::Indexed, BitDepth::Eight, Some(palette), seg.labels())
}

pub fn decode_segmentation(bytes: &[u8], label_set: &LabelSet) -> Result<SegmentationMap> {
    let d = decode(bytes).map_err(|e| bad("segmentation", e))?;
    if d.depth != BitDepth::Eight || !matches!(d.color, ColorType::Indexed | ColorType::Grayscale) {
        return Err(bad(
            "segmentation",
            format!("expected 8-bit indexed or gray, got {:?} {:?}", d.color, d.depth),
        ));
    }
    SegmentationMap::new(d.height, d.width, d.data, label_set.clone())
}

pub fn encode_depth(depth: &DepthMap) -> Vec<u8> {
    let data: Vec<u8> = depth
        .values()
        .iter()
        .flat_map(|&v| ((v as f64 * 65535.0).round() as u16).to_be_bytes())
        .collect();
    encode(depth.width(), depth.height(), ColorType::Grayscale, BitDepth::Sixteen, None, &data)
}

pub fn decode_depth(bytes: &[u8]) -> Result<DepthMap> {
    let d = decode(bytes).map_err(|e| bad("depth", e))?;
    if d.depth != BitDepth::Sixteen || d.color != ColorType::Grayscale {
        return Err(bad("depth", format!("expected 16-bit gray, got {:?} {:?}", d.color, d.depth)));
    }
    let values = d
        .data
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0)
        .collect();
    DepthMap::new(d.height, d.width, values)
}

/// Quantise one network-range value to a byte.
pub fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn encode_image(img: &ImageTensor) -> Vec<u8> {
    let plane = img.height() * img.width();
    let v = img.values();
    let data: Vec<u8> = (0..plane)
        .flat_map(|p| [to_byte(v[p]), to_byte(v[plane + p]), to_byte(v[2 * plane + p])])
        .collect();
    encode(img.width(), img.height(), ColorType::Rgb, BitDepth::Eight, None, &data)
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor> {
    let d = decode(bytes).map_err(|e| bad("image", e))?;
    if d.depth != BitDepth::Eight || d.color != ColorType::Rgb {
        return Err(bad("image", format!("expected 8-bit RGB, got {:?} {:?}", d.color, d.depth)));
    }
    let plane = d.width * d.height;
    let mut values = vec![0.0; 3 * plane];
    for (p, px) in d.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            values[c * plane + p] = px[c] as f32 / 255.0 * 2.0 - 1.0;
        }
    }
    ImageTensor::new(d.height, d.width, values)
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::file(path, e))
}

/// Write `bytes` unless the file already holds exactly them.
/// Returns whether anything was written.
pub fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    if let Ok(existing) = std::fs::read(path) {
        if existing == bytes {
            return Ok(false);
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::file(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))?;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segmentation_round_trip_is_exact() {
        let seg = SegmentationMap::new(8, 8, (0..64).map(|i| (i % 7) as u8).collect(), LabelSet::default()).unwrap();
        let back = decode_segmentation(&encode_segmentation(&seg), &LabelSet::default()).unwrap();
        assert_eq!(back, seg);
    }

    #[test]
    fn depth_round_trip_within_one_level() {
        let d = DepthMap::new(8, 8, (0..64).map(|i| i as f32 / 63.0 * 0.999).collect()).unwrap();
        let back = decode_depth(&encode_depth(&d)).unwrap();
        for (a, b) in d.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 1.0 / 65535.0);
        }
        assert!(decode_depth(&encode_segmentation(
            &SegmentationMap::new(8, 8, vec![0; 64], LabelSet::default()).unwrap()
        ))
        .is_err());
    }

    #[test]
    fn image_round_trip_within_quantisation() {
        let img = ImageTensor::new(8, 8, (0..192).map(|i| (i as f32 / 191.0) * 2.0 - 1.0).collect()).unwrap();
        let back = decode_image(&encode_image(&img)).unwrap();
        for (a, b) in img.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        assert!(decode_image(b"not a png").is_err());
    }
}
