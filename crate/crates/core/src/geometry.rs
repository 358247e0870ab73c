//! Box algebra, overlap and center-error primitives, and the square crop
//! geometry shared by the template and search branches.
//!
//! Coordinates are continuous: pixel `i` spans `[i, i + 1)` and its center
//! sits at `i + 0.5`. Boxes are stored in center form.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TsfError};

/// Axis-aligned box in center form, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    /// From top-left corner plus size, the `x,y,w,h` form used by result files.
    pub fn from_corner(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    /// From a corner pair `(x1, y1)`–`(x2, y2)`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        BBox::from_corner(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite();
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(TsfError::InvalidBox(format!(
                "({}, {}, {}, {}) must be finite with positive size",
                self.cx, self.cy, self.w, self.h
            )));
        }
        Ok(())
    }

    /// `[x, y, w, h]` with `(x, y)` the top-left corner.
    pub fn to_corner(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h]
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let [x, y, w, h] = self.to_corner();
        (x, y, x + w, y + h)
    }

    pub fn area(&self) -> f64 {
        let (x1, y1, x2, y2) = self.corners();
        (x2 - x1) * (y2 - y1)
    }

    /// Clamp the center into the frame and the size into `[1, frame size]`.
    pub fn clamp_to_frame(&self, width: usize, height: usize) -> BBox {
        let (fw, fh) = (width as f64, height as f64);
        BBox {
            cx: self.cx.clamp(0.0, fw),
            cy: self.cy.clamp(0.0, fh),
            w: self.w.clamp(1.0, fw.max(1.0)),
            h: self.h.clamp(1.0, fh.max(1.0)),
        }
    }
}

/// Intersection over union of two axis-aligned boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Euclidean distance between box centers.
pub fn center_error(a: &BBox, b: &BBox) -> f64 {
    (a.cx - b.cx).hypot(a.cy - b.cy)
}

/// Side of the square exemplar region: `sqrt((w + p)(h + p))`, `p = (w + h) / 2`.
pub fn exemplar_side(b: &BBox) -> f64 {
    let p = (b.w + b.h) / 2.0;
    ((b.w + p) * (b.h + p)).sqrt()
}

/// Side of the square search region, `exemplar_side * instance_size / template_size`.
pub fn instance_side(b: &BBox, template_size: usize, instance_size: usize) -> f64 {
    exemplar_side(b) * instance_size as f64 / template_size as f64
}

/// Planar (channel-major) image with intensities on a 0–255 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(TsfError::InvalidArgument(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(TsfError::ShapeMismatch(format!(
                "image data has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Replicate a single channel to three; three-channel images pass through.
    pub fn to_rgb(self) -> Self {
        if self.channels == 3 {
            return self;
        }
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        Image {
            channels: 3,
            data,
            ..self
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Per-channel mean intensity, used as the crop padding value.
    pub fn channel_means(&self) -> Vec<f32> {
        (0..self.channels)
            .map(|c| {
                let ch = self.channel(c);
                let s: f64 = ch.iter().map(|&v| v as f64).sum();
                (s / ch.len().max(1) as f64) as f32
            })
            .collect()
    }
}

/// Square crop centered on a box center, resampled to `out_size` pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSpec {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    pub out_size: usize,
}

impl CropSpec {
    pub fn new(center: &BBox, side: f64, out_size: usize) -> Result<Self> {
        let spec = CropSpec {
            cx: center.cx,
            cy: center.cy,
            side,
            out_size,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.side > 0.0 && self.side.is_finite()) {
            return Err(TsfError::InvalidArgument(format!(
                "crop side must be positive, got {}",
                self.side
            )));
        }
        if self.out_size == 0 {
            return Err(TsfError::InvalidArgument("crop out_size must be positive".into()));
        }
        Ok(())
    }

    /// Patch pixels per frame pixel.
    pub fn scale(&self) -> f64 {
        self.out_size as f64 / self.side
    }

    pub fn patch_to_frame(&self, px: f64, py: f64) -> (f64, f64) {
        let s = self.side / self.out_size as f64;
        (
            self.cx - self.side / 2.0 + px * s,
            self.cy - self.side / 2.0 + py * s,
        )
    }

    pub fn frame_to_patch(&self, fx: f64, fy: f64) -> (f64, f64) {
        let s = self.scale();
        (
            (fx - self.cx + self.side / 2.0) * s,
            (fy - self.cy + self.side / 2.0) * s,
        )
    }

    /// Map a box from patch coordinates back to frame coordinates.
    pub fn box_to_frame(&self, b: &BBox) -> BBox {
        let (cx, cy) = self.patch_to_frame(b.cx, b.cy);
        let s = self.side / self.out_size as f64;
        BBox {
            cx,
            cy,
            w: b.w * s,
            h: b.h * s,
        }
    }

    pub fn box_to_patch(&self, b: &BBox) -> BBox {
        let (cx, cy) = self.frame_to_patch(b.cx, b.cy);
        let s = self.scale();
        BBox {
            cx,
            cy,
            w: b.w * s,
            h: b.h * s,
        }
    }
}

/// Extract the square region described by `spec`, padding out-of-frame
/// pixels with `pad_value` (one value per channel), and resample it to
/// `out_size x out_size` with bilinear interpolation.
pub fn crop_patch(img: &Image, spec: &CropSpec, pad_value: &[f32]) -> Result<Image> {
    spec.validate()?;
    if pad_value.len() != img.channels {
        return Err(TsfError::ShapeMismatch(format!(
            "pad value has {} channels, image has {}",
            pad_value.len(),
            img.channels
        )));
    }
    let n = spec.out_size;
    let step = spec.side / n as f64;
    let x0 = spec.cx - spec.side / 2.0;
    let y0 = spec.cy - spec.side / 2.0;

    // Sample positions in pixel-index space (pixel centers at integers).
    let taps = |origin: f64| -> Vec<(isize, f64)> {
        (0..n)
            .map(|p| {
                let f = origin + (p as f64 + 0.5) * step - 0.5;
                let i = f.floor();
                (i as isize, f - i)
            })
            .collect()
    };
    let xs = taps(x0);
    let ys = taps(y0);

    let (w, h) = (img.width as isize, img.height as isize);
    let mut out = Image::filled(n, n, img.channels, 0.0);
    for c in 0..img.channels {
        let ch = img.channel(c);
        let pad = pad_value[c] as f64;
        let fetch = |y: isize, x: isize| -> f64 {
            if x < 0 || y < 0 || x >= w || y >= h {
                pad
            } else {
                ch[(y * w + x) as usize] as f64
            }
        };
        for (py, &(iy, fy)) in ys.iter().enumerate() {
            for (px, &(ix, fx)) in xs.iter().enumerate() {
                let v = if fx == 0.0 && fy == 0.0 {
                    fetch(iy, ix)
                } else {
                    let top = fetch(iy, ix) * (1.0 - fx) + fetch(iy, ix + 1) * fx;
                    let bot = fetch(iy + 1, ix) * (1.0 - fx) + fetch(iy + 1, ix + 1) * fx;
                    top * (1.0 - fy) + bot * fy
                };
                out.set(c, py, px, v as f32);
            }
        }
    }
    Ok(out)
}
