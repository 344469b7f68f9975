//! Binary PPM (P6) images and PGM (P5) class maps, 8-bit only. PNG is
//! available behind the `png` feature.

use std::path::Path;

use super::{ImageBuffer, MapRaster};
use crate::error::{Error, Result};

pub fn encode_ppm(img: &ImageBuffer) -> Vec<u8> {
    let (w, h) = (img.width(), img.height());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            for v in img.pixel(x, y) {
                out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

pub fn encode_pgm(map: &MapRaster) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend_from_slice(map.classes());
    out
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::Format("file too short for a PNM header".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated PNM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad number in PNM header".into()))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Format("missing separator after PNM header".into()));
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        offset: pos + 1,
    })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageBuffer> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" {
        return Err(Error::Format("expected a binary PPM (P6)".into()));
    }
    let n = h.width * h.height;
    let body = bytes
        .get(h.offset..h.offset + 3 * n)
        .ok_or_else(|| Error::Format("truncated PPM data".into()))?;
    let scale = h.maxval as f32;
    let mut data = vec![0.0; 3 * n];
    for (i, px) in body.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f32 / scale;
        }
    }
    ImageBuffer::new(h.width, h.height, data)
}

pub fn decode_pgm(bytes: &[u8], num_classes: usize) -> Result<MapRaster> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err(Error::Format("expected a binary PGM (P5)".into()));
    }
    let n = h.width * h.height;
    let body = bytes
        .get(h.offset..h.offset + n)
        .ok_or_else(|| Error::Format("truncated PGM data".into()))?;
    MapRaster::new(h.width, h.height, body.to_vec(), num_classes)
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    if is_png(path) {
        return png::read_image(path);
    }
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_image(img: &ImageBuffer, path: &Path) -> Result<()> {
    if is_png(path) {
        return png::write_image(img, path);
    }
    std::fs::write(path, encode_ppm(img))?;
    Ok(())
}

pub fn read_map(path: &Path, num_classes: usize) -> Result<MapRaster> {
    decode_pgm(&std::fs::read(path)?, num_classes)
}

pub fn write_map(map: &MapRaster, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(map))?;
    Ok(())
}

#[cfg(feature = "png")]
mod png {
    use super::*;

    pub fn read_image(path: &Path) -> Result<ImageBuffer> {
        let img = image::open(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let n = w * h;
        let mut data = vec![0.0; 3 * n];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * n + i] = px[c] as f32 / 255.0;
            }
        }
        ImageBuffer::new(w, h, data)
    }

    pub fn write_image(img: &ImageBuffer, path: &Path) -> Result<()> {
        let mut out = image::RgbImage::new(img.width() as u32, img.height() as u32);
        for (x, y, px) in out.enumerate_pixels_mut() {
            let v = img.pixel(x as usize, y as usize);
            *px = image::Rgb(v.map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8));
        }
        out.save(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[cfg(not(feature = "png"))]
mod png {
    use super::*;

    pub fn read_image(path: &Path) -> Result<ImageBuffer> {
        Err(Error::Config(format!(
            "{}: PNG support requires the `png` feature",
            path.display()
        )))
    }

    pub fn write_image(_: &ImageBuffer, path: &Path) -> Result<()> {
        read_image(path).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_at_8_bits() {
        let data: Vec<f32> = (0..12).map(|i| i as f32 / 255.0).collect();
        let img = ImageBuffer::new(2, 2, data).unwrap();
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        assert!(back.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn pgm_with_comment_header() {
        let mut bytes = b"P5\n# synthetic\n3 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 2, 1]);
        let m = decode_pgm(&bytes, 4).unwrap();
        assert_eq!(m.classes(), &[0, 2, 1]);
        assert!(decode_pgm(&bytes[..bytes.len() - 1], 4).is_err());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let bytes = encode_pgm(&MapRaster::uniform(2, 2, 0, 4).unwrap());
        assert!(decode_ppm(&bytes).is_err());
    }
}
