//! Dataset ingestion, synthetic sequences and result files.
//!
//! Directory layouts:
//!
//! ```text
//! vot_tir/<seq>/groundtruth.txt     x,y,w,h or x1,y1,...,x4,y4 per line
//! vot_tir/<seq>/*.png|jpg|bmp       frames, sorted by file name (or under img/ or color/)
//! vot_tir/<seq>/<attr>.tag          optional per-frame 0/1 flags
//! gtot/<seq>/groundTruth_i.txt      x1 y1 x2 y2 per line (whitespace or commas)
//! gtot/<seq>/i/*                    thermal frames (v/ is ignored)
//! synthetic/<seq>/img/00000001.png  frames
//! synthetic/<seq>/groundtruth.txt   x,y,w,h per line
//! <any>/<seq>/attributes.txt        optional attribute names, one per line or comma separated
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TsfError};
use crate::geometry::{BBox, Image};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    VotTir,
    Gtot,
    Synthetic,
}

impl std::str::FromStr for DatasetKind {
    type Err = TsfError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vot_tir" | "vot" => Ok(DatasetKind::VotTir),
            "gtot" => Ok(DatasetKind::Gtot),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(TsfError::InvalidArgument(format!(
                "unknown dataset kind {other:?} (expected vot_tir, gtot or synthetic)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Frames {
    Files(Vec<PathBuf>),
    Memory(Vec<Image>),
}

#[derive(Debug, Clone)]
pub struct SequenceRecord {
    pub id: String,
    pub frames: Frames,
    /// `None` marks frames without a usable annotation.
    pub gt: Vec<Option<BBox>>,
    pub attributes: BTreeSet<String>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.gt.iter().map(Option::is_some).collect()
    }

    /// The first-frame box; records always carry one.
    pub fn init_box(&self) -> Result<BBox> {
        self.gt
            .first()
            .copied()
            .flatten()
            .ok_or_else(|| TsfError::MissingData(format!("{}: first frame has no annotation", self.id)))
    }

    /// Frames in order, decoded on demand.
    pub fn frame_iter(&self) -> Box<dyn Iterator<Item = Result<Image>> + '_> {
        match &self.frames {
            Frames::Files(paths) => Box::new(paths.iter().map(|p| load_image(p))),
            Frames::Memory(imgs) => Box::new(imgs.iter().cloned().map(Ok)),
        }
    }

    pub fn frame(&self, i: usize) -> Result<Image> {
        match &self.frames {
            Frames::Files(paths) => load_image(&paths[i]),
            Frames::Memory(imgs) => Ok(imgs[i].clone()),
        }
    }

    fn check(&self) -> Result<()> {
        let n = match &self.frames {
            Frames::Files(p) => p.len(),
            Frames::Memory(m) => m.len(),
        };
        if n != self.gt.len() {
            return Err(TsfError::MissingData(format!(
                "{}: {} frames but {} annotations",
                self.id,
                n,
                self.gt.len()
            )));
        }
        self.init_box()?;
        Ok(())
    }
}

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> TsfError {
    TsfError::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Decimal number: optional sign, digits with optional fraction, optional exponent; or `nan`.
fn parse_number(tok: &str) -> Option<f64> {
    let t = tok.trim_matches(|c| c == ' ' || c == '\t' || c == '\r');
    if t.eq_ignore_ascii_case("nan") {
        return Some(f64::NAN);
    }
    let b = t.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    let int_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let int_digits = i - int_start;
    let mut frac_digits = 0;
    if i < b.len() && b[i] == b'.' {
        i += 1;
        let s = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        frac_digits = i - s;
    }
    if int_digits + frac_digits == 0 {
        return None;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        let s = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == s {
            return None;
        }
    }
    if i != b.len() {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Lines of a text annotation file: a single trailing newline is allowed, blank lines are not.
fn annotation_lines(text: &str) -> Vec<&str> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Vec::new();
    }
    body.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l)).collect()
}

/// Parse VOT-style annotations: `x,y,w,h` corner form or an 8-value polygon
/// reduced to its min/max envelope. NaN or all-zero lines yield `None`.
pub fn parse_vot_groundtruth(text: &str, path: &str) -> Result<Vec<Option<BBox>>> {
    let mut out = Vec::new();
    for (i, line) in annotation_lines(text).into_iter().enumerate() {
        let ln = i + 1;
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| parse_number(t).ok_or_else(|| parse_err(path, ln, format!("bad number {:?}", t.trim()))))
            .collect::<Result<_>>()?;
        if vals.len() != 4 && vals.len() != 8 {
            return Err(parse_err(path, ln, format!("expected 4 or 8 values, found {}", vals.len())));
        }
        if vals.iter().any(|v| v.is_nan()) || vals.iter().all(|&v| v == 0.0) {
            out.push(None);
            continue;
        }
        let b = if vals.len() == 4 {
            let (w, h) = (vals[2], vals[3]);
            if w < 0.0 || h < 0.0 {
                return Err(parse_err(path, ln, format!("negative size {w}x{h}")));
            }
            if w == 0.0 || h == 0.0 {
                None
            } else {
                Some(BBox::from_corner(vals[0], vals[1], w, h).map_err(|e| parse_err(path, ln, e.to_string()))?)
            }
        } else {
            let xs = [vals[0], vals[2], vals[4], vals[6]];
            let ys = [vals[1], vals[3], vals[5], vals[7]];
            let x1 = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let x2 = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let y1 = ys.iter().cloned().fold(f64::INFINITY, f64::min);
            let y2 = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if x2 <= x1 || y2 <= y1 {
                None
            } else {
                Some(BBox::from_corners(x1, y1, x2, y2).map_err(|e| parse_err(path, ln, e.to_string()))?)
            }
        };
        out.push(b);
    }
    Ok(out)
}

/// Parse GTOT annotations: `x1 y1 x2 y2` per line, whitespace and/or comma separated.
pub fn parse_gtot_groundtruth(text: &str, path: &str) -> Result<Vec<BBox>> {
    let mut out = Vec::new();
    for (i, line) in annotation_lines(text).into_iter().enumerate() {
        let ln = i + 1;
        let toks: Vec<&str> = line
            .split(|c: char| c == ',' || c == ' ' || c == '\t')
            .filter(|t| !t.is_empty())
            .collect();
        if toks.len() != 4 {
            return Err(parse_err(path, ln, format!("expected 4 values, found {}", toks.len())));
        }
        let mut v = [0.0; 4];
        for (slot, t) in v.iter_mut().zip(&toks) {
            *slot = parse_number(t)
                .filter(|x| !x.is_nan())
                .ok_or_else(|| parse_err(path, ln, format!("bad number {t:?}")))?;
        }
        if v[2] <= v[0] || v[3] <= v[1] {
            return Err(parse_err(path, ln, format!("corner pair is not ordered: {v:?}")));
        }
        out.push(BBox::from_corners(v[0], v[1], v[2], v[3]).map_err(|e| parse_err(path, ln, e.to_string()))?);
    }
    Ok(out)
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| TsfError::MissingData(format!("{}: {e}", path.display())))
}

/// Decode an image file. Single-channel images are replicated to three channels.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| TsfError::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let gray = matches!(
        img.color(),
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
    );
    let (w, h) = (img.width() as usize, img.height() as usize);
    if gray {
        let l = img.to_luma8();
        let plane: Vec<f32> = l.into_raw().into_iter().map(f32::from).collect();
        Image::new(h, w, 1, plane).map(Image::to_rgb)
    } else {
        let rgb = img.to_rgb8().into_raw();
        let mut data = vec![0.0f32; 3 * w * h];
        for (p, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * w * h + p] = f32::from(px[c]);
            }
        }
        Image::new(h, w, 3, data)
    }
}

/// Save channel 0 (or RGB when three channels differ) as PNG; intensities are rounded.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let to_u8 = |v: f32| v.round().clamp(0.0, 255.0) as u8;
    let (w, h) = (img.width as u32, img.height as u32);
    let gray = img.channels == 1 || (img.channel(0) == img.channel(1) && img.channel(1) == img.channel(2));
    let res = if gray {
        let buf: Vec<u8> = img.channel(0).iter().map(|&v| to_u8(v)).collect();
        image::GrayImage::from_raw(w, h, buf).expect("buffer size").save(path)
    } else {
        let n = img.width * img.height;
        let mut buf = Vec::with_capacity(3 * n);
        for p in 0..n {
            for c in 0..3 {
                buf.push(to_u8(img.data[c * n + p]));
            }
        }
        image::RgbImage::from_raw(w, h, buf).expect("buffer size").save(path)
    };
    res.map_err(|e| TsfError::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn read_attributes(dir: &Path, n_frames: usize) -> Result<BTreeSet<String>> {
    let mut attrs = BTreeSet::new();
    let file = dir.join("attributes.txt");
    if file.is_file() {
        for a in read_text(&file)?.split([',', '\n']) {
            let a = a.trim();
            if !a.is_empty() {
                attrs.insert(a.to_string());
            }
        }
    }
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.extension().and_then(|e| e.to_str()) != Some("tag") {
            continue;
        }
        let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let text = read_text(&p)?;
        let flags = annotation_lines(&text);
        if flags.len() > n_frames {
            log::warn!("{}: {} flags for {} frames", p.display(), flags.len(), n_frames);
        }
        if flags.iter().any(|f| f.trim() == "1") {
            attrs.insert(name);
        }
    }
    Ok(attrs)
}

fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(TsfError::MissingData(format!("dataset root {} does not exist", root.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn load_one(dir: &Path, kind: DatasetKind) -> Result<Option<SequenceRecord>> {
    let id = dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    let (gt, frames) = match kind {
        DatasetKind::VotTir | DatasetKind::Synthetic => {
            let gt_path = dir.join("groundtruth.txt");
            if !gt_path.is_file() {
                return Ok(None);
            }
            let gt = parse_vot_groundtruth(&read_text(&gt_path)?, &gt_path.display().to_string())?;
            let mut frames = if kind == DatasetKind::Synthetic { Vec::new() } else { image_files(dir)? };
            for sub in ["img", "color"] {
                if frames.is_empty() && dir.join(sub).is_dir() {
                    frames = image_files(&dir.join(sub))?;
                }
            }
            (gt, frames)
        }
        DatasetKind::Gtot => {
            let gt_path = dir.join("groundTruth_i.txt");
            if !gt_path.is_file() {
                return Ok(None);
            }
            let gt = parse_gtot_groundtruth(&read_text(&gt_path)?, &gt_path.display().to_string())?
                .into_iter()
                .map(Some)
                .collect();
            let thermal = dir.join("i");
            let frames = if thermal.is_dir() { image_files(&thermal)? } else { Vec::new() };
            (gt, frames)
        }
    };
    let attributes = read_attributes(dir, frames.len())?;
    let rec = SequenceRecord {
        id,
        frames: Frames::Files(frames),
        gt,
        attributes,
    };
    rec.check()?;
    Ok(Some(rec))
}

/// Records found under `root`, sorted by id, plus warnings for sequences that were skipped.
#[derive(Debug, Default)]
pub struct DatasetLoad {
    pub records: Vec<SequenceRecord>,
    pub warnings: Vec<String>,
}

pub fn load_dataset(root: &Path, kind: DatasetKind) -> Result<DatasetLoad> {
    let mut load = DatasetLoad::default();
    for dir in sequence_dirs(root)? {
        match load_one(&dir, kind) {
            Ok(Some(r)) => load.records.push(r),
            Ok(None) => {}
            Err(e) => load.warnings.push(format!("{}: {e}", dir.display())),
        }
    }
    if load.records.is_empty() {
        load.warnings.push(format!("no sequences found under {}", root.display()));
    }
    for w in &load.warnings {
        log::warn!("{w}");
    }
    Ok(load)
}

/// Parameters of one synthetic infrared sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub length: usize,
    /// Target centers spread evenly over the sequence; one point means a static target.
    pub waypoints: Vec<[f64; 2]>,
    /// Blob sigma at the first and last frame (linear schedule).
    pub sigma: [f64; 2],
    /// Horizontal over vertical sigma.
    #[serde(default = "one")]
    pub aspect: f64,
    /// Peak intensity above background at the first and last frame.
    pub intensity: [f64; 2],
    pub background: f64,
    /// Amplitude of the static low-frequency background texture.
    pub texture: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub distractors: usize,
    #[serde(default)]
    pub attributes: Vec<String>,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TsfError::InvalidArgument(format!("synthetic spec {}: {m}", self.id)));
        if self.width == 0 || self.height == 0 || self.length == 0 {
            return bad("frame size and length must be positive".into());
        }
        if self.waypoints.is_empty() {
            return bad("at least one waypoint is required".into());
        }
        if !(self.aspect > 0.0) || self.sigma.iter().any(|s| !(*s > 0.0)) {
            return bad("sigma and aspect must be positive".into());
        }
        let (sx, sy) = self.sigmas(self.sigma[0].max(self.sigma[1]));
        if 4.0 * sx > self.width as f64 || 4.0 * sy > self.height as f64 {
            return bad("target extent exceeds the frame".into());
        }
        if !(self.noise_sigma >= 0.0) || !(self.texture >= 0.0) {
            return bad("noise and texture must be non-negative".into());
        }
        Ok(())
    }

    fn sigmas(&self, s: f64) -> (f64, f64) {
        let r = self.aspect.sqrt();
        (s * r, s / r)
    }

    fn progress(&self, t: usize) -> f64 {
        if self.length <= 1 {
            0.0
        } else {
            t as f64 / (self.length - 1) as f64
        }
    }

    /// Ground-truth box at frame `t`: the blob's 2-sigma extent, kept inside the frame.
    pub fn box_at(&self, t: usize) -> BBox {
        let u = self.progress(t);
        let s = self.sigma[0] + (self.sigma[1] - self.sigma[0]) * u;
        let (sx, sy) = self.sigmas(s);
        let (cx, cy) = if self.waypoints.len() == 1 {
            (self.waypoints[0][0], self.waypoints[0][1])
        } else {
            let pos = u * (self.waypoints.len() - 1) as f64;
            let k = (pos.floor() as usize).min(self.waypoints.len() - 2);
            let f = pos - k as f64;
            let (a, b) = (self.waypoints[k], self.waypoints[k + 1]);
            (a[0] + (b[0] - a[0]) * f, a[1] + (b[1] - a[1]) * f)
        };
        let cx = cx.clamp(2.0 * sx, self.width as f64 - 2.0 * sx);
        let cy = cy.clamp(2.0 * sy, self.height as f64 - 2.0 * sy);
        BBox {
            cx,
            cy,
            w: 4.0 * sx,
            h: 4.0 * sy,
        }
    }
}

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

struct Distractor {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    sigma: f64,
}

fn add_blob(plane: &mut [f64], w: usize, h: usize, cx: f64, cy: f64, sx: f64, sy: f64, peak: f64) {
    let rx = (4.0 * sx).ceil() as isize;
    let ry = (4.0 * sy).ceil() as isize;
    let (x0, y0) = (cx.floor() as isize, cy.floor() as isize);
    for y in (y0 - ry).max(0)..(y0 + ry + 1).min(h as isize) {
        for x in (x0 - rx).max(0)..(x0 + rx + 1).min(w as isize) {
            let dx = (x as f64 + 0.5 - cx) / sx;
            let dy = (y as f64 + 0.5 - cy) / sy;
            plane[y as usize * w + x as usize] += peak * (-(dx * dx + dy * dy) / 2.0).exp();
        }
    }
}

/// Render a synthetic sequence: a Gaussian hot spot over a smooth textured
/// background with per-frame sensor noise and optional dimmer distractors.
/// Frames are single-channel with integer intensities in `[0, 255]`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SequenceRecord> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let waves: Vec<Wave> = (0..6)
        .map(|_| {
            let period = rng.random_range(20.0..80.0);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let k = 2.0 * std::f64::consts::PI / period;
            Wave {
                kx: k * theta.cos(),
                ky: k * theta.sin(),
                phase: rng.random_range(0.0..2.0 * std::f64::consts::PI),
                amp: spec.texture / 6.0_f64.sqrt() * rng.random_range(0.5..1.0),
            }
        })
        .collect();
    let mut base = vec![spec.background; w * h];
    for y in 0..h {
        for x in 0..w {
            base[y * w + x] += waves
                .iter()
                .map(|wv| wv.amp * (wv.kx * x as f64 + wv.ky * y as f64 + wv.phase).sin())
                .sum::<f64>();
        }
    }
    let mut distractors: Vec<Distractor> = (0..spec.distractors)
        .map(|_| Distractor {
            x: rng.random_range(0.0..w as f64),
            y: rng.random_range(0.0..h as f64),
            vx: rng.random_range(-1.0..1.0),
            vy: rng.random_range(-1.0..1.0),
            sigma: spec.sigma[0] * rng.random_range(0.6..1.2),
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");

    let mut frames = Vec::with_capacity(spec.length);
    let mut gt = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        let u = spec.progress(t);
        let b = spec.box_at(t);
        let peak = spec.intensity[0] + (spec.intensity[1] - spec.intensity[0]) * u;
        let mut plane = base.clone();
        for d in &distractors {
            add_blob(&mut plane, w, h, d.x, d.y, d.sigma, d.sigma, 0.5 * peak);
        }
        add_blob(&mut plane, w, h, b.cx, b.cy, b.w / 4.0, b.h / 4.0, peak);
        let data: Vec<f32> = plane
            .iter()
            .map(|v| {
                let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (v + n).round().clamp(0.0, 255.0) as f32
            })
            .collect();
        frames.push(Image::new(h, w, 1, data)?);
        gt.push(Some(b));
        for d in distractors.iter_mut() {
            d.x += d.vx;
            d.y += d.vy;
        }
    }
    Ok(SequenceRecord {
        id: spec.id.clone(),
        frames: Frames::Memory(frames),
        gt,
        attributes: spec.attributes.iter().cloned().collect(),
    })
}

/// Random specs for the built-in synthetic suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteProfile {
    /// Mixed motion, size change and distractors.
    Train,
    /// Motion plus size change; the held-out evaluation suite.
    MotionSize,
    /// Target never moves.
    Static,
}

pub fn synthetic_suite(profile: SuiteProfile, count: usize, length: usize, seed: u64) -> Vec<SynthSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (192usize, 160usize);
    (0..count)
        .map(|i| {
            let s0: f64 = rng.random_range(4.0..7.0);
            let grow = match profile {
                SuiteProfile::Static => 1.0,
                _ => {
                    let g: f64 = rng.random_range(1.4..1.9);
                    if rng.random_bool(0.5) {
                        g
                    } else {
                        1.0 / g
                    }
                }
            };
            let s1 = s0 * grow;
            let aspect = rng.random_range(0.7..1.4);
            let margin = 2.5 * s0.max(s1) * 1.2 + 4.0;
            let point = |rng: &mut ChaCha8Rng| {
                [
                    rng.random_range(margin..w as f64 - margin),
                    rng.random_range(margin..h as f64 - margin),
                ]
            };
            let waypoints = match profile {
                SuiteProfile::Static => vec![point(&mut rng)],
                _ => {
                    // consecutive waypoints at least 40 px apart, so a frozen box loses the target
                    let mut pts = vec![point(&mut rng)];
                    let mut tries = 0;
                    while pts.len() < 3 {
                        let p = point(&mut rng);
                        let last = pts[pts.len() - 1];
                        let d = (p[0] - last[0]).hypot(p[1] - last[1]);
                        tries += 1;
                        if (40.0..90.0).contains(&d) || tries > 200 {
                            pts.push(p);
                        }
                    }
                    pts
                }
            };
            let mut attributes = Vec::new();
            if profile != SuiteProfile::Static {
                attributes.push("motion".to_string());
                attributes.push(if grow > 1.0 { "size_increase" } else { "size_decrease" }.to_string());
                attributes.push("scale_variation".to_string());
            } else {
                attributes.push("static".to_string());
            }
            let distractors = if profile == SuiteProfile::Static { 0 } else { rng.random_range(0..3) };
            if distractors > 0 {
                attributes.push("distractor".to_string());
            }
            let peak = rng.random_range(110.0..170.0);
            SynthSpec {
                id: format!("{}_{i:03}", profile_name(profile)),
                width: w,
                height: h,
                length,
                waypoints,
                sigma: [s0, s1],
                aspect,
                intensity: [peak, peak * rng.random_range(0.8..1.1)],
                background: rng.random_range(50.0..80.0),
                texture: rng.random_range(8.0..20.0),
                noise_sigma: rng.random_range(2.0..5.0),
                distractors,
                attributes,
                seed: rng.random(),
            }
        })
        .collect()
}

fn profile_name(p: SuiteProfile) -> &'static str {
    match p {
        SuiteProfile::Train => "train",
        SuiteProfile::MotionSize => "motion",
        SuiteProfile::Static => "static",
    }
}

/// Write `x,y,w,h` corner-form lines with shortest round-trip formatting.
pub fn format_vot_groundtruth(gt: &[Option<BBox>]) -> String {
    let mut s = String::new();
    for b in gt {
        match b {
            Some(b) => {
                let [x, y, w, h] = b.to_corner();
                s.push_str(&format!("{x},{y},{w},{h}\n"));
            }
            None => s.push_str("nan,nan,nan,nan\n"),
        }
    }
    s
}

/// Write 8-value axis-aligned polygons (`x1,y1,x2,y1,x2,y2,x1,y2`, clockwise from top-left).
pub fn format_vot_polygon(gt: &[Option<BBox>]) -> String {
    let mut s = String::new();
    for b in gt {
        match b {
            Some(b) => {
                let (x1, y1, x2, y2) = b.corners();
                s.push_str(&format!("{x1},{y1},{x2},{y1},{x2},{y2},{x1},{y2}\n"));
            }
            None => s.push_str("nan,nan,nan,nan,nan,nan,nan,nan\n"),
        }
    }
    s
}

/// Write GTOT `x1 y1 x2 y2` lines.
pub fn format_gtot_groundtruth(gt: &[BBox]) -> String {
    let mut s = String::new();
    for b in gt {
        let (x1, y1, x2, y2) = b.corners();
        s.push_str(&format!("{x1} {y1} {x2} {y2}\n"));
    }
    s
}

/// Materialize a record as `<root>/<id>/img/NNNNNNNN.png` + `groundtruth.txt` + `attributes.txt`.
pub fn write_sequence(root: &Path, rec: &SequenceRecord) -> Result<PathBuf> {
    let dir = root.join(&rec.id);
    let img_dir = dir.join("img");
    fs::create_dir_all(&img_dir)?;
    for (i, frame) in rec.frame_iter().enumerate() {
        save_image(&frame?, &img_dir.join(format!("{:08}.png", i + 1)))?;
    }
    fs::write(dir.join("groundtruth.txt"), format_vot_groundtruth(&rec.gt))?;
    let attrs: Vec<&str> = rec.attributes.iter().map(String::as_str).collect();
    fs::write(dir.join("attributes.txt"), attrs.join("\n") + if attrs.is_empty() { "" } else { "\n" })?;
    Ok(dir)
}

/// Write via a temporary file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_file_name(format!(
        ".{}.tmp",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("out")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Tracker output for one sequence: boxes, scores and timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSidecar {
    pub sequence: String,
    pub frames: usize,
    pub scores: Vec<f64>,
    pub seconds: Vec<f64>,
    pub fps: f64,
}

/// One `x1,y1,w,h` line per frame.
pub fn format_results(boxes: &[BBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let [x, y, w, h] = b.to_corner();
        s.push_str(&format!("{x},{y},{w},{h}\n"));
    }
    s
}

/// Read a result file written by [`format_results`] (or any `x,y,w,h` file,
/// comma, tab or space separated).
pub fn parse_results(text: &str, path: &str) -> Result<Vec<BBox>> {
    let mut out = Vec::new();
    for (i, line) in annotation_lines(text).into_iter().enumerate() {
        let toks: Vec<&str> = line
            .split(|c: char| c == ',' || c == ' ' || c == '\t')
            .filter(|t| !t.is_empty())
            .collect();
        if toks.len() != 4 {
            return Err(parse_err(path, i + 1, format!("expected 4 values, found {}", toks.len())));
        }
        let mut v = [0.0; 4];
        for (slot, t) in v.iter_mut().zip(&toks) {
            *slot = parse_number(t)
                .filter(|x| !x.is_nan())
                .ok_or_else(|| parse_err(path, i + 1, format!("bad number {t:?}")))?;
        }
        // predictions may be degenerate; keep them, with sizes floored at zero
        out.push(BBox {
            cx: v[0] + v[2].max(0.0) / 2.0,
            cy: v[1] + v[3].max(0.0) / 2.0,
            w: v[2].max(0.0),
            h: v[3].max(0.0),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vot_four_values() {
        let gt = parse_vot_groundtruth("10,20,30,40\n", "gt").unwrap();
        assert_eq!(gt, vec![Some(BBox { cx: 25.0, cy: 40.0, w: 30.0, h: 40.0 })]);
    }

    #[test]
    fn vot_polygons() {
        let gt = parse_vot_groundtruth("0,0,4,0,4,2,0,2", "gt").unwrap();
        assert_eq!(gt[0].unwrap().to_corner(), [0.0, 0.0, 4.0, 2.0]);
        let rot = parse_vot_groundtruth("5,0,10,5,5,10,0,5", "gt").unwrap();
        assert_eq!(rot[0].unwrap().to_corner(), [0.0, 0.0, 10.0, 10.0]);
    }

    #[test]
    fn vot_invalid_markers_and_errors() {
        let gt = parse_vot_groundtruth("1,2,3,4\nnan,nan,nan,nan\n0,0,0,0\n", "gt").unwrap();
        assert_eq!(gt.iter().map(Option::is_some).collect::<Vec<_>>(), vec![true, false, false]);
        match parse_vot_groundtruth("1,2,3,4\n1,2,3\n", "gt") {
            Err(TsfError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_vot_groundtruth("1,2,x,4", "gt").is_err());
        assert!(parse_vot_groundtruth("1,2,3,4\n\n5,6,7,8\n", "gt").is_err());
        assert!(parse_vot_groundtruth("1,2,-3,4", "gt").is_err());
        assert!(parse_vot_groundtruth("1,2,inf,4", "gt").is_err());
    }

    #[test]
    fn gtot_corner_pairs() {
        let gt = parse_gtot_groundtruth("10 20 40 60\n", "gt").unwrap();
        assert_eq!(gt[0], BBox { cx: 25.0, cy: 40.0, w: 30.0, h: 40.0 });
        let min = parse_gtot_groundtruth("0 0 1 1", "gt").unwrap();
        assert_eq!((min[0].w, min[0].h), (1.0, 1.0));
        assert_eq!(parse_gtot_groundtruth("10,20,40,60", "gt").unwrap(), gt);
        assert_eq!(parse_gtot_groundtruth("10\t20  40 , 60", "gt").unwrap(), gt);
        assert!(parse_gtot_groundtruth("10 20 10 60", "gt").is_err());
        assert!(parse_gtot_groundtruth("10 20 40", "gt").is_err());
    }

    fn static_spec() -> SynthSpec {
        SynthSpec {
            id: "s".into(),
            width: 64,
            height: 48,
            length: 5,
            waypoints: vec![[30.0, 20.0]],
            sigma: [4.0, 4.0],
            aspect: 1.0,
            intensity: [150.0, 150.0],
            background: 60.0,
            texture: 10.0,
            noise_sigma: 0.0,
            distractors: 0,
            attributes: vec![],
            seed: 9,
        }
    }

    #[test]
    fn static_synthetic_is_constant() {
        let rec = generate_synthetic(&static_spec()).unwrap();
        let frames: Vec<Image> = rec.frame_iter().map(|f| f.unwrap()).collect();
        assert!(frames.windows(2).all(|p| p[0] == p[1]));
        assert!(rec.gt.windows(2).all(|p| p[0] == p[1]));
        assert_eq!(rec.gt[0].unwrap(), BBox { cx: 30.0, cy: 20.0, w: 16.0, h: 16.0 });
    }

    #[test]
    fn size_schedule_doubles_box() {
        let mut spec = static_spec();
        spec.sigma = [3.0, 6.0];
        spec.waypoints = vec![[32.0, 24.0]];
        let rec = generate_synthetic(&spec).unwrap();
        let (a, b) = (rec.gt[0].unwrap(), rec.gt[4].unwrap());
        assert_eq!((b.w, b.h), (2.0 * a.w, 2.0 * a.h));
    }

    #[test]
    fn synthetic_is_seed_deterministic_and_inside_frame() {
        for spec in synthetic_suite(SuiteProfile::Train, 4, 12, 5) {
            let a = generate_synthetic(&spec).unwrap();
            let b = generate_synthetic(&spec).unwrap();
            for i in 0..a.len() {
                assert_eq!(a.frame(i).unwrap(), b.frame(i).unwrap());
                let g = a.gt[i].unwrap();
                let (x1, y1, x2, y2) = g.corners();
                assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= spec.width as f64 && y2 <= spec.height as f64);
            }
        }
    }

    #[test]
    fn results_round_trip() {
        let boxes = vec![BBox { cx: 10.25, cy: 3.5, w: 4.5, h: 7.0 }, BBox { cx: 0.1, cy: 0.2, w: 1.0, h: 1.0 }];
        let back = parse_results(&format_results(&boxes), "r").unwrap();
        for (a, b) in boxes.iter().zip(&back) {
            assert!((a.cx - b.cx).abs() < 1e-12 && (a.w - b.w).abs() < 1e-12);
        }
    }
}
