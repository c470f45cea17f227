//! Flow file formats (Middlebury `.flo`, KITTI 16-bit PNG), 8-bit RGB
//! image I/O and the Middlebury colour coding.

use std::fs::{self, File};
use std::io::{BufWriter, Read};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::tensor::Tensor;

/// Leading float of every `.flo` file ("PIEH" in ASCII).
pub const FLO_SENTINEL: f32 = 202021.25;
/// KITTI encodes `v·64 + 2¹⁵` in 16 bits.
pub const KITTI_SCALE: f32 = 64.0;
pub const KITTI_OFFSET: f32 = 32768.0;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowFile {
    pub width: usize,
    pub height: usize,
    /// `2×H×W`: u plane then v plane.
    pub flow: Tensor<f32>,
    pub valid: Option<Mask>,
}

impl FlowFile {
    pub fn new(flow: Tensor<f32>) -> Result<Self> {
        let s = flow.shape();
        if s.len() != 3 || s[0] != 2 {
            return Err(Error::Shape(format!("flow must be 2×H×W, got {s:?}")));
        }
        Ok(Self {
            width: s[2],
            height: s[1],
            flow,
            valid: None,
        })
    }
}

// ---- .flo ----------------------------------------------------------------

pub fn encode_flo(f: &FlowFile) -> Vec<u8> {
    let (w, h) = (f.width, f.height);
    let n = w * h;
    let mut out = Vec::with_capacity(12 + 8 * n);
    out.extend_from_slice(&FLO_SENTINEL.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    let d = f.flow.data();
    for i in 0..n {
        out.extend_from_slice(&d[i].to_le_bytes());
        out.extend_from_slice(&d[n + i].to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowFile> {
    if bytes.len() < 12 {
        return Err(Error::Truncated(format!(".flo header needs 12 bytes, got {}", bytes.len())));
    }
    let word = |i: usize| -> [u8; 4] { bytes[4 * i..4 * i + 4].try_into().unwrap() };
    if f32::from_le_bytes(word(0)) != FLO_SENTINEL {
        return Err(Error::Format("bad .flo sentinel".into()));
    }
    let (w, h) = (i32::from_le_bytes(word(1)), i32::from_le_bytes(word(2)));
    if w <= 0 || h <= 0 {
        return Err(Error::Format(format!("bad .flo dimensions {w}×{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let n = w
        .checked_mul(h)
        .ok_or_else(|| Error::Format("oversized .flo header".into()))?;
    let need = n
        .checked_mul(8)
        .and_then(|b| b.checked_add(12))
        .ok_or_else(|| Error::Format("oversized .flo header".into()))?;
    if bytes.len() < need {
        return Err(Error::Truncated(format!(
            ".flo {w}×{h} needs {need} bytes, got {}",
            bytes.len()
        )));
    }
    if bytes.len() > need {
        return Err(Error::Format(format!(
            ".flo {w}×{h} has {} trailing bytes",
            bytes.len() - need
        )));
    }
    let mut data = vec![0.0f32; 2 * n];
    for i in 0..n {
        data[i] = f32::from_le_bytes(word(3 + 2 * i));
        data[n + i] = f32::from_le_bytes(word(4 + 2 * i));
    }
    FlowFile::new(Tensor::new(&[2, h, w], data)?)
}

pub fn write_flo(path: impl AsRef<Path>, f: &FlowFile) -> Result<()> {
    fs::write(path, encode_flo(f))?;
    Ok(())
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowFile> {
    decode_flo(&fs::read(path)?)
}

// ---- KITTI PNG -------------------------------------------------------------

/// 16-bit encoding of one flow component.
pub fn kitti_encode(v: f32) -> Result<u16> {
    // f64 keeps the rounding error at exactly half a step
    let q = (f64::from(v) * f64::from(KITTI_SCALE) + f64::from(KITTI_OFFSET)).round();
    if !q.is_finite() || !(0.0..=65535.0).contains(&q) {
        return Err(Error::Range(format!("{v} px does not fit the KITTI encoding")));
    }
    Ok(q as u16)
}

pub fn kitti_decode(q: u16) -> f32 {
    (f32::from(q) - KITTI_OFFSET) / KITTI_SCALE
}

pub fn write_kitti_png(path: impl AsRef<Path>, f: &FlowFile) -> Result<()> {
    let (w, h) = (f.width, f.height);
    let n = w * h;
    let d = f.flow.data();
    let mut buf = Vec::with_capacity(6 * n);
    for i in 0..n {
        let ok = f.valid.as_ref().map_or(true, |m| m.data[i]);
        let (u, v) = if ok {
            (kitti_encode(d[i])?, kitti_encode(d[n + i])?)
        } else {
            (0, 0)
        };
        for c in [u, v, u16::from(ok)] {
            buf.extend_from_slice(&c.to_be_bytes());
        }
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(ColorType::Rgb);
    enc.set_depth(BitDepth::Sixteen);
    let mut wr = enc.write_header().map_err(png_err)?;
    wr.write_image_data(&buf).map_err(png_err)?;
    wr.finish().map_err(png_err)?;
    Ok(())
}

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("png: {e}"))
}

struct RawPng {
    w: usize,
    h: usize,
    color: ColorType,
    depth: BitDepth,
    data: Vec<u8>,
}

fn read_png_raw(path: impl AsRef<Path>) -> Result<RawPng> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut dec = png::Decoder::new(bytes.as_slice());
    dec.set_transformations(Transformations::IDENTITY);
    let mut rd = dec.read_info().map_err(png_err)?;
    if rd.info().interlaced {
        return Err(Error::Format("interlaced PNGs are not supported".into()));
    }
    let mut data = vec![0u8; rd.output_buffer_size()];
    let fr = rd.next_frame(&mut data).map_err(png_err)?;
    data.truncate(fr.buffer_size());
    Ok(RawPng {
        w: fr.width as usize,
        h: fr.height as usize,
        color: fr.color_type,
        depth: fr.bit_depth,
        data,
    })
}

pub fn read_kitti_png(path: impl AsRef<Path>) -> Result<FlowFile> {
    let p = read_png_raw(path)?;
    if p.color != ColorType::Rgb || p.depth != BitDepth::Sixteen {
        return Err(Error::Format(format!(
            "KITTI flow must be 16-bit RGB, got {:?} at {:?}",
            p.color, p.depth
        )));
    }
    let n = p.w * p.h;
    let mut flow = vec![0.0f32; 2 * n];
    let mut valid = Vec::with_capacity(n);
    for i in 0..n {
        let ch = |c: usize| u16::from_be_bytes([p.data[6 * i + 2 * c], p.data[6 * i + 2 * c + 1]]);
        let ok = ch(2) > 0;
        if ok {
            flow[i] = kitti_decode(ch(0));
            flow[n + i] = kitti_decode(ch(1));
        }
        valid.push(ok);
    }
    let mut f = FlowFile::new(Tensor::new(&[2, p.h, p.w], flow)?)?;
    f.valid = Some(Mask::new(p.h, p.w, valid)?);
    Ok(f)
}

// ---- 8-bit images ----------------------------------------------------------

/// Writes a `3×H×W` image with values in [0, 1].
pub fn write_rgb_png(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("image must be 3×H×W, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let d = img.data();
    let buf: Vec<u8> = (0..3 * n)
        .map(|i| {
            let (p, c) = (i / 3, i % 3);
            (d[c * n + p].clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    write_rgb8(path, w, h, &buf)
}

pub fn write_rgb8(path: impl AsRef<Path>, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(ColorType::Rgb);
    enc.set_depth(BitDepth::Eight);
    let mut wr = enc.write_header().map_err(png_err)?;
    wr.write_image_data(rgb).map_err(png_err)?;
    wr.finish().map_err(png_err)?;
    Ok(())
}

/// Reads an 8-bit grey, RGB or RGBA PNG as `3×H×W` in [0, 1].
pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let p = read_png_raw(path)?;
    if p.depth != BitDepth::Eight {
        return Err(Error::Format(format!("expected an 8-bit image, got {:?}", p.depth)));
    }
    let stride = match p.color {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(Error::Format("palette images are not supported".into())),
    };
    let n = p.w * p.h;
    Tensor::new(
        &[3, p.h, p.w],
        (0..3 * n)
            .map(|i| {
                let (c, px) = (i / n, i % n);
                let ch = if stride >= 3 { c } else { 0 };
                f32::from(p.data[px * stride + ch]) / 255.0
            })
            .collect(),
    )
}

// ---- colour coding ---------------------------------------------------------

/// The 55-entry Middlebury colour wheel.
pub fn color_wheel() -> Vec<[f32; 3]> {
    const SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];
    let mut wheel = Vec::with_capacity(55);
    for (seg, &n) in SEGMENTS.iter().enumerate() {
        for i in 0..n {
            let ramp = 255.0 * i as f32 / n as f32;
            wheel.push(match seg {
                0 => [255.0, ramp, 0.0],
                1 => [255.0 - ramp, 255.0, 0.0],
                2 => [0.0, 255.0, ramp],
                3 => [0.0, 255.0 - ramp, 255.0],
                4 => [ramp, 0.0, 255.0],
                _ => [255.0, 0.0, 255.0 - ramp],
            });
        }
    }
    wheel
}

/// Colour codes a `2×H×W` flow as interleaved 8-bit RGB. `max_rad` of
/// `None` normalizes by the largest magnitude present.
pub fn flow_to_color(flow: &Tensor<f32>, max_rad: Option<f32>) -> Result<Vec<u8>> {
    let s = flow.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::Shape(format!("flow must be 2×H×W, got {s:?}")));
    }
    if !flow.all_finite() {
        return Err(Error::NonFinite("flow to colour".into()));
    }
    let n = s[1] * s[2];
    let d = flow.data();
    let mag = |i: usize| d[i].hypot(d[n + i]);
    let max_rad = match max_rad {
        Some(r) if r > 0.0 => r,
        _ => {
            let m = (0..n).map(mag).fold(0.0f32, f32::max);
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
    };
    let wheel = color_wheel();
    let ncols = wheel.len();
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        let (u, v) = (d[i] / max_rad, d[n + i] / max_rad);
        let rad = u.hypot(v);
        let a = (-v).atan2(-u) / std::f32::consts::PI;
        let fk = (a + 1.0) / 2.0 * (ncols - 1) as f32;
        let k0 = (fk.floor() as usize).min(ncols - 1);
        let k1 = (k0 + 1) % ncols;
        let f = fk - k0 as f32;
        for c in 0..3 {
            let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
            let col = if rad <= 1.0 {
                1.0 - rad * (1.0 - col)
            } else {
                col * 0.75
            };
            out.push((255.0 * col).floor() as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_flo() {
        let f = FlowFile::new(Tensor::zeros(&[2, 1, 1])).unwrap();
        let b = encode_flo(&f);
        assert_eq!(b.len(), 20);
        assert_eq!(&b[..4], b"PIEH");
        assert_eq!(decode_flo(&b).unwrap(), f);
    }

    #[test]
    fn flo_truncation() {
        let f = FlowFile::new(Tensor::zeros(&[2, 2, 3])).unwrap();
        let b = encode_flo(&f);
        // header (3, 2) followed by only 10 floats
        let cut = &b[..12 + 40];
        assert!(matches!(decode_flo(cut), Err(Error::Truncated(_))));
        let mut bad = b.clone();
        bad[0] ^= 1;
        assert!(matches!(decode_flo(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn kitti_offsets() {
        assert_eq!(kitti_encode(0.0).unwrap(), 32768);
        assert_eq!(kitti_encode(1.0).unwrap(), 32832);
        assert!(kitti_encode(600.0).is_err());
        assert_eq!(kitti_decode(32832), 1.0);
    }

    #[test]
    fn wheel_and_white_center() {
        assert_eq!(color_wheel().len(), 55);
        let z = flow_to_color(&Tensor::zeros(&[2, 2, 2]), None).unwrap();
        assert!(z.iter().all(|&c| c == 255));
        let f = Tensor::new(&[2, 1, 2], vec![3.0, -3.0, 0.0, 0.0]).unwrap();
        let c = flow_to_color(&f, None).unwrap();
        assert_ne!(&c[..3], &c[3..]);
    }
}
