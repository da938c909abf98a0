//! Core image/flow data types, file formats, and flow visualization.
//!
//! Flow interchange uses the Middlebury `.flo` layout (little-endian:
//! float32 sentinel 202021.25, int32 width, int32 height, then row-major
//! interleaved (u, v) float32 pairs). Frames and visualizations are 8-bit
//! PNG.

use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const FLO_SENTINEL: f32 = 202021.25;

#[derive(Debug, thiserror::Error)]
pub enum FlowIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad flow file: {0}")]
    Format(String),
    #[error("truncated flow file: expected {expected} bytes of payload, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("flow field with invalid pixels cannot be written to .flo")]
    UnsupportedMask,
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("bad frame: {0}")]
    Frame(String),
}

/// RGB image, channels-first `(3, H, W)`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub data: Tensor<f32>,
}

impl Frame {
    pub fn new(data: Tensor<f32>) -> Result<Self, FlowIoError> {
        let (c, ..) = data.dims3();
        if c != 3 {
            return Err(FlowIoError::Frame(format!("expected 3 channels, got {c}")));
        }
        if !data.all_finite() {
            return Err(FlowIoError::Frame("non-finite pixel values".into()));
        }
        if data.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(FlowIoError::Frame("pixel values outside [0, 1]".into()));
        }
        Ok(Frame { data })
    }

    /// Height and width in pixels.
    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dims3();
        (h, w)
    }
}

/// Per-pixel 2D displacement map with validity mask. `uv` has shape
/// `(2, H, W)`: channel 0 is horizontal (u), channel 1 vertical (v).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub uv: Tensor<f32>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn new(uv: Tensor<f32>, valid: Vec<bool>) -> Self {
        let (c, h, w) = uv.dims3();
        assert_eq!(c, 2, "flow must have two channels");
        assert_eq!(valid.len(), h * w, "validity mask size mismatch");
        for p in 0..h * w {
            if valid[p] {
                assert!(
                    uv.data()[p].is_finite() && uv.data()[h * w + p].is_finite(),
                    "non-finite flow at a valid pixel"
                );
            }
        }
        FlowField { uv, valid }
    }

    pub fn all_valid(uv: Tensor<f32>) -> Self {
        let (_, h, w) = uv.dims3();
        Self::new(uv, vec![true; h * w])
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.uv.dims3();
        (h, w)
    }

    pub fn is_all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    #[inline]
    pub fn u(&self, y: usize, x: usize) -> f32 {
        self.uv.at3(0, y, x)
    }

    #[inline]
    pub fn v(&self, y: usize, x: usize) -> f32 {
        self.uv.at3(1, y, x)
    }
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField, FlowIoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 12];
    r.read_exact(&mut head)
        .map_err(|_| FlowIoError::Format("file shorter than the 12-byte header".into()))?;
    let sentinel = f32::from_le_bytes(head[0..4].try_into().unwrap());
    if sentinel != FLO_SENTINEL {
        return Err(FlowIoError::Format(format!(
            "bad sentinel {sentinel} (expected {FLO_SENTINEL})"
        )));
    }
    let width = i32::from_le_bytes(head[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(head[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 || width > 1 << 16 || height > 1 << 16 {
        return Err(FlowIoError::Format(format!("implausible dimensions {width}x{height}")));
    }
    let (w, h) = (width as usize, height as usize);
    let expected = h * w * 2 * 4;
    let mut payload = Vec::with_capacity(expected);
    r.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(FlowIoError::Truncated { expected, got: payload.len() });
    }
    let mut uv = Tensor::zeros(vec![2, h, w]);
    for y in 0..h {
        for x in 0..w {
            let off = (y * w + x) * 8;
            let u = f32::from_le_bytes(payload[off..off + 4].try_into().unwrap());
            let v = f32::from_le_bytes(payload[off + 4..off + 8].try_into().unwrap());
            uv.set3(0, y, x, u);
            uv.set3(1, y, x, v);
        }
    }
    Ok(FlowField::all_valid(uv))
}

pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<(), FlowIoError> {
    if !flow.is_all_valid() {
        return Err(FlowIoError::UnsupportedMask);
    }
    let (h, w) = flow.dims();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&FLO_SENTINEL.to_le_bytes())?;
    out.write_all(&(w as i32).to_le_bytes())?;
    out.write_all(&(h as i32).to_le_bytes())?;
    for y in 0..h {
        for x in 0..w {
            out.write_all(&flow.u(y, x).to_le_bytes())?;
            out.write_all(&flow.v(y, x).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Middlebury-style color wheel: RY/YG/GC/CB/BM/MR segments, 55 entries.
/// Within each segment one channel holds at 1 while another ramps.
fn color_wheel() -> Vec<[f32; 3]> {
    // (length, held channel, ramped channel, ramp rises)
    const SEGMENTS: [(usize, usize, usize, bool); 6] = [
        (15, 0, 1, true),  // red -> yellow
        (6, 1, 0, false),  // yellow -> green
        (4, 1, 2, true),   // green -> cyan
        (11, 2, 1, false), // cyan -> blue
        (13, 2, 0, true),  // blue -> magenta
        (6, 0, 2, false),  // magenta -> red
    ];
    let mut wheel = Vec::with_capacity(55);
    for (len, hold, ramp, rises) in SEGMENTS {
        for i in 0..len {
            let f = i as f32 / len as f32;
            let mut c = [0.0f32; 3];
            c[hold] = 1.0;
            c[ramp] = if rises { f } else { 1.0 - f };
            wheel.push(c);
        }
    }
    wheel
}

/// Hue/saturation encoding of a flow field. Direction maps to hue, magnitude
/// (clipped at `max_magnitude`, auto = 99th percentile) to saturation.
/// Invalid pixels render black.
pub fn flow_to_color(flow: &FlowField, max_magnitude: Option<f32>) -> Frame {
    let (h, w) = flow.dims();
    let wheel = color_wheel();
    let ncols = wheel.len();

    let max_mag = match max_magnitude {
        Some(m) => m,
        None => {
            let mut mags: Vec<f32> = (0..h * w)
                .filter(|&p| flow.valid[p])
                .map(|p| {
                    let u = flow.uv.data()[p];
                    let v = flow.uv.data()[h * w + p];
                    (u * u + v * v).sqrt()
                })
                .collect();
            mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if mags.is_empty() {
                1.0
            } else {
                mags[((mags.len() - 1) as f32 * 0.99) as usize]
            }
        }
    };
    let max_mag = if max_mag > 1e-9 { max_mag } else { 1.0 };

    let mut out = Tensor::zeros(vec![3, h, w]);
    for p in 0..h * w {
        if !flow.valid[p] {
            continue;
        }
        let u = flow.uv.data()[p] / max_mag;
        let v = flow.uv.data()[h * w + p] / max_mag;
        let rad = (u * u + v * v).sqrt().min(1.0);
        let angle = (-v).atan2(-u) / std::f32::consts::PI;
        let fk = (angle + 1.0) / 2.0 * (ncols as f32 - 1.0);
        let k0 = fk.floor() as usize % ncols;
        let k1 = (k0 + 1) % ncols;
        let f = fk - fk.floor();
        for c in 0..3 {
            let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
            // Whiten toward the wheel center for small magnitudes.
            let val = 1.0 - rad * (1.0 - col);
            out.data_mut()[c * h * w + p] = val.clamp(0.0, 1.0);
        }
    }
    Frame { data: out }
}

/// Amounts of replicate padding added at the right and bottom edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadRecord {
    pub right: usize,
    pub bottom: usize,
}

impl PadRecord {
    /// Crop a `(c, H+bottom, W+right)` tensor back to the pre-pad size.
    pub fn crop<TensorT: CropTarget>(&self, t: &TensorT) -> TensorT {
        t.crop_by(self)
    }
}

pub trait CropTarget: Sized {
    fn crop_by(&self, pad: &PadRecord) -> Self;
}

impl CropTarget for Tensor<f32> {
    fn crop_by(&self, pad: &PadRecord) -> Self {
        let (c, h, w) = self.dims3();
        crop_tensor(self, c, h - pad.bottom, w - pad.right)
    }
}

impl CropTarget for Frame {
    fn crop_by(&self, pad: &PadRecord) -> Self {
        Frame { data: self.data.crop_by(pad) }
    }
}

impl CropTarget for FlowField {
    fn crop_by(&self, pad: &PadRecord) -> Self {
        let (_, h, w) = self.uv.dims3();
        let (nh, nw) = (h - pad.bottom, w - pad.right);
        let uv = crop_tensor(&self.uv, 2, nh, nw);
        let mut valid = Vec::with_capacity(nh * nw);
        for y in 0..nh {
            for x in 0..nw {
                valid.push(self.valid[y * w + x]);
            }
        }
        FlowField::new(uv, valid)
    }
}

fn crop_tensor(t: &Tensor<f32>, c: usize, nh: usize, nw: usize) -> Tensor<f32> {
    let (_, h, w) = t.dims3();
    assert!(nh <= h && nw <= w);
    let mut out = Tensor::zeros(vec![c, nh, nw]);
    for ch in 0..c {
        for y in 0..nh {
            let src = &t.data()[(ch * h + y) * w..(ch * h + y) * w + nw];
            out.data_mut()[(ch * nh + y) * nw..(ch * nh + y + 1) * nw].copy_from_slice(src);
        }
    }
    out
}

/// Replicate-pad right/bottom so both dimensions are multiples of `m`.
pub fn pad_to_multiple(frame: &Frame, m: usize) -> (Frame, PadRecord) {
    assert!(m >= 1);
    let (h, w) = frame.dims();
    let bottom = (m - h % m) % m;
    let right = (m - w % m) % m;
    if bottom == 0 && right == 0 {
        return (frame.clone(), PadRecord { right: 0, bottom: 0 });
    }
    let (nh, nw) = (h + bottom, w + right);
    let mut out = Tensor::zeros(vec![3, nh, nw]);
    for c in 0..3 {
        for y in 0..nh {
            let sy = y.min(h - 1);
            for x in 0..nw {
                let sx = x.min(w - 1);
                let v = frame.data.at3(c, sy, sx);
                out.set3(c, y, x, v);
            }
        }
    }
    (Frame { data: out }, PadRecord { right, bottom })
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Frame, FlowIoError> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Tensor::zeros(vec![3, h, w]);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data.set3(c, y as usize, x as usize, px.0[c] as f32 / 255.0);
        }
    }
    Frame::new(data)
}

pub fn write_png(frame: &Frame, path: impl AsRef<Path>) -> Result<(), FlowIoError> {
    let (h, w) = frame.dims();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (frame.data.at3(0, y, x) * 255.0).round().clamp(0.0, 255.0) as u8,
                (frame.data.at3(1, y, x) * 255.0).round().clamp(0.0, 255.0) as u8,
                (frame.data.at3(2, y, x) * 255.0).round().clamp(0.0, 255.0) as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Write a boolean mask as an 8-bit grayscale PNG (true = white).
pub fn write_mask_png(
    mask: &[bool],
    h: usize,
    w: usize,
    path: impl AsRef<Path>,
) -> Result<(), FlowIoError> {
    assert_eq!(mask.len(), h * w);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([if mask[y * w + x] { 255 } else { 0 }]));
        }
    }
    img.save(path)?;
    Ok(())
}
