//! Deterministic synthetic talking-face corpus with a closed-form ground truth.
//!
//! Each video has one emotion and one face identity. Audio is a harmonic
//! tone whose carrier frequency encodes the emotion and whose amplitude,
//! piecewise constant per video frame, follows a syllable-like envelope. The
//! mouth opening of the landmark face equals that envelope; the emotion sets
//! brow height and lip-corner offsets. Frames are flat-shaded renderings of
//! the landmarks.
//!
//! Layout written by [`generate_corpus`]:
//!
//! ```text
//! <out>/manifest.json
//! <out>/videos/<id>/audio.wav
//! <out>/videos/<id>/landmarks.jsonl      pixel coordinates
//! <out>/videos/<id>/frames/000000.png
//! <out>/videos/<id>/reference.png        neutral, closed-mouth face
//! <out>/videos/<id>/reference.jsonl
//! ```

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio_features::{
    video_frames_for_samples, write_wav, MfccConfig, Waveform, SAMPLE_RATE_HZ, VIDEO_FPS,
};
use crate::error::{Error, Result};
use crate::imaging::FrameImage;
use crate::landmarks::{
    to_canvas, write_jsonl, CoordSpace, LandmarkFrame, LandmarkRecord, NUM_LANDMARKS,
};
use crate::msef::{emotion_index, EMOTIONS, NUM_EMOTIONS};

/// Carrier frequency per emotion, in [`EMOTIONS`] order. Multiples of the
/// frame rate so every frame holds whole carrier cycles.
pub const EMOTION_CARRIER_HZ: [f64; NUM_EMOTIONS] = [200.0, 350.0, 550.0, 800.0, 1100.0, 1500.0, 2000.0, 2700.0];
/// Relative amplitude of the second harmonic.
pub const SECOND_HARMONIC: f64 = 0.35;
pub const AMPLITUDE_REST: f64 = 0.1;
pub const AMPLITUDE_GAIN: f64 = 0.5;
/// Lower-lip travel at full opening, in inter-ocular units.
pub const MAX_MOUTH_OPENING: f64 = 0.3;

pub fn samples_per_frame() -> usize {
    (SAMPLE_RATE_HZ / VIDEO_FPS) as usize
}

/// RMS of the unit-amplitude carrier.
fn carrier_rms() -> f64 {
    ((1.0 + SECOND_HARMONIC * SECOND_HARMONIC) / 2.0).sqrt()
}

/// Geometric signature of an emotion, in inter-ocular units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmotionStyle {
    /// Vertical brow shift; negative raises.
    pub brow: f64,
    /// Outward shift of the lip corners.
    pub corner_dx: f64,
    /// Vertical lip-corner shift; negative lifts.
    pub corner_dy: f64,
}

pub const EMOTION_STYLES: [EmotionStyle; NUM_EMOTIONS] = [
    EmotionStyle { brow: 0.10, corner_dx: -0.04, corner_dy: 0.05 },  // angry
    EmotionStyle { brow: 0.0, corner_dx: 0.06, corner_dy: -0.06 },   // contempt
    EmotionStyle { brow: 0.06, corner_dx: -0.06, corner_dy: 0.10 },  // disgusted
    EmotionStyle { brow: -0.12, corner_dx: 0.08, corner_dy: 0.06 },  // fear
    EmotionStyle { brow: -0.05, corner_dx: 0.10, corner_dy: -0.12 }, // happy
    EmotionStyle { brow: 0.0, corner_dx: 0.0, corner_dy: 0.0 },      // neutral
    EmotionStyle { brow: -0.06, corner_dx: -0.05, corner_dy: 0.12 }, // sad
    EmotionStyle { brow: -0.20, corner_dx: -0.06, corner_dy: 0.0 },  // surprised
];

/// Colour ranges faces are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacePalette {
    pub skin_lo: [f32; 3],
    pub skin_hi: [f32; 3],
    pub background_lo: [f32; 3],
    pub background_hi: [f32; 3],
    pub lip: [f32; 3],
}

impl Default for FacePalette {
    fn default() -> Self {
        Self {
            skin_lo: [0.55, 0.38, 0.28],
            skin_hi: [0.95, 0.80, 0.68],
            background_lo: [0.05, 0.10, 0.20],
            background_hi: [0.35, 0.50, 0.60],
            lip: [0.70, 0.22, 0.25],
        }
    }
}

fn default_emotions() -> Vec<String> {
    EMOTIONS.iter().map(|s| s.to_string()).collect()
}

fn default_image_size() -> usize {
    128
}

fn default_tracker_noise() -> f64 {
    0.002
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_videos: usize,
    pub seconds_per_video: f64,
    pub seed: u64,
    #[serde(default = "default_emotions")]
    pub emotion_set: Vec<String>,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    /// Standard deviation of per-frame landmark jitter in normalised units,
    /// mimicking tracker noise.
    #[serde(default = "default_tracker_noise")]
    pub tracker_noise: f64,
    #[serde(default)]
    pub face_palette: FacePalette,
}

impl SynthSpec {
    pub fn new(n_videos: usize, seconds_per_video: f64, seed: u64) -> Self {
        Self {
            n_videos,
            seconds_per_video,
            seed,
            emotion_set: default_emotions(),
            image_size: default_image_size(),
            tracker_noise: default_tracker_noise(),
            face_palette: FacePalette::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_videos == 0 {
            return Err(Error::InvalidInput("n_videos must be at least 1".into()));
        }
        if self.emotion_set.is_empty() {
            return Err(Error::InvalidInput("emotion_set is empty".into()));
        }
        for e in &self.emotion_set {
            emotion_index(e)?;
        }
        if self.image_size < 32 {
            return Err(Error::InvalidInput(format!("image_size {} is below 32", self.image_size)));
        }
        if !(self.tracker_noise >= 0.0 && self.tracker_noise.is_finite()) {
            return Err(Error::InvalidInput("tracker_noise must be non-negative".into()));
        }
        let frames = self.frames_per_video()?;
        if frames == 0 {
            return Err(Error::InvalidInput(format!(
                "{} s of audio is shorter than one video frame",
                self.seconds_per_video
            )));
        }
        Ok(())
    }

    pub fn samples_per_video(&self) -> usize {
        (self.seconds_per_video.max(0.0) * SAMPLE_RATE_HZ as f64).round() as usize
    }

    /// Video frames the MFCC alignment yields for one clip.
    pub fn frames_per_video(&self) -> Result<usize> {
        video_frames_for_samples(self.samples_per_video(), &MfccConfig::default(), VIDEO_FPS)
    }
}

/// Per-video face geometry and colours.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceIdentity {
    pub width: f64,
    pub height: f64,
    pub mouth_width: f64,
    /// Fraction of the lip travel the chin follows.
    pub jaw_drop: f64,
    /// Static per-point offsets.
    pub offsets: Vec<[f64; 2]>,
    pub skin: [f32; 3],
    pub background: [f32; 3],
    pub lip: [f32; 3],
}

impl FaceIdentity {
    /// The template face with no individual variation.
    pub fn mean() -> Self {
        let p = FacePalette::default();
        let mid = |a: [f32; 3], b: [f32; 3]| [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), 0.5 * (a[2] + b[2])];
        Self {
            width: 1.0,
            height: 1.0,
            mouth_width: 1.0,
            jaw_drop: 0.45,
            offsets: vec![[0.0; 2]; NUM_LANDMARKS],
            skin: mid(p.skin_lo, p.skin_hi),
            background: mid(p.background_lo, p.background_hi),
            lip: p.lip,
        }
    }

    pub fn sample(rng: &mut impl Rng, palette: &FacePalette) -> Self {
        let mut colour = |lo: [f32; 3], hi: [f32; 3]| {
            let t: f32 = rng.random_range(0.0..1.0);
            [0, 1, 2].map(|c| lo[c] + t * (hi[c] - lo[c]))
        };
        let skin = colour(palette.skin_lo, palette.skin_hi);
        let background = colour(palette.background_lo, palette.background_hi);
        Self {
            width: rng.random_range(0.9..1.1),
            height: rng.random_range(0.92..1.08),
            mouth_width: rng.random_range(0.85..1.15),
            jaw_drop: rng.random_range(0.3..0.6),
            offsets: (0..NUM_LANDMARKS)
                .map(|_| [rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02)])
                .collect(),
            skin,
            background,
            lip: palette.lip,
        }
    }
}

/// Template face in inter-ocular units, x right and y down.
pub fn template() -> Vec<[f64; 2]> {
    let mut p = Vec::with_capacity(NUM_LANDMARKS);
    for i in 0..17 {
        let t = PI * i as f64 / 16.0;
        p.push([-0.95 * t.cos(), -0.15 + 1.25 * t.sin()]);
    }
    for j in 0..5 {
        p.push([-0.85 + 0.16 * j as f64, -0.62 - 0.08 * (PI * j as f64 / 4.0).sin()]);
    }
    for j in 0..5 {
        p.push([0.21 + 0.16 * j as f64, -0.62 - 0.08 * (PI * j as f64 / 4.0).sin()]);
    }
    for j in 0..4 {
        p.push([0.0, -0.38 + 0.14 * j as f64]);
    }
    for j in 0..5 {
        let d = (j as f64 - 2.0).abs();
        p.push([-0.18 + 0.09 * j as f64, 0.16 + 0.04 * (1.0 - d / 2.0)]);
    }
    p.extend_from_slice(&[
        [-0.72, -0.33],
        [-0.58, -0.40],
        [-0.42, -0.40],
        [-0.28, -0.33],
        [-0.42, -0.27],
        [-0.58, -0.27],
        [0.28, -0.33],
        [0.42, -0.40],
        [0.58, -0.40],
        [0.72, -0.33],
        [0.58, -0.27],
        [0.42, -0.27],
    ]);
    p.extend_from_slice(&[
        [-0.40, 0.55],
        [-0.26, 0.48],
        [-0.11, 0.45],
        [0.0, 0.47],
        [0.11, 0.45],
        [0.26, 0.48],
        [0.40, 0.55],
        [0.26, 0.64],
        [0.12, 0.68],
        [0.0, 0.69],
        [-0.12, 0.68],
        [-0.26, 0.64],
    ]);
    p.extend_from_slice(&[
        [-0.32, 0.55],
        [-0.12, 0.548],
        [0.0, 0.548],
        [0.12, 0.548],
        [0.32, 0.55],
        [0.12, 0.552],
        [0.0, 0.552],
        [-0.12, 0.552],
    ]);
    p
}

/// Per-point weight of the mouth-opening displacement (downwards positive).
fn opening_weight(i: usize, jaw_drop: f64) -> f64 {
    match i {
        4..=12 => jaw_drop * (1.0 - (i as f64 - 8.0).abs() / 5.0),
        55 | 59 => 0.8,
        56 | 58 => 0.95,
        57 | 66 => 1.0,
        65 | 67 => 0.95,
        48 | 54 | 60 | 64 => 0.35,
        49..=53 | 61..=63 => -0.08,
        _ => 0.0,
    }
}

/// Closed-form face shape for one frame, normalised.
pub fn face_shape(identity: &FaceIdentity, emotion: usize, opening: f64) -> Result<LandmarkFrame> {
    if emotion >= NUM_EMOTIONS {
        return Err(Error::InvalidInput(format!("emotion index {emotion} out of range")));
    }
    let style = EMOTION_STYLES[emotion];
    let m = opening.clamp(0.0, 1.0);
    let pts = template()
        .into_iter()
        .enumerate()
        .map(|(i, [x0, y0])| {
            let (mut x, mut y) = (x0, y0);
            if (48..68).contains(&i) {
                x *= identity.mouth_width;
            }
            if (17..27).contains(&i) {
                y += style.brow;
            }
            match i {
                48 | 60 => {
                    x -= style.corner_dx;
                    y += style.corner_dy;
                }
                54 | 64 => {
                    x += style.corner_dx;
                    y += style.corner_dy;
                }
                49 | 59 | 53 | 55 => y += 0.5 * style.corner_dy,
                _ => {}
            }
            y += m * MAX_MOUTH_OPENING * opening_weight(i, identity.jaw_drop);
            [
                x * identity.width + identity.offsets[i][0],
                y * identity.height + identity.offsets[i][1],
            ]
        })
        .collect();
    LandmarkFrame::new(pts, CoordSpace::Pixel)?.normalize()
}

/// Syllable-like envelope: segments of 2–7 frames, a quarter of them silent.
pub fn random_envelope(rng: &mut impl Rng, frames: usize) -> Vec<f64> {
    let mut env = Vec::with_capacity(frames);
    while env.len() < frames {
        let len = rng.random_range(2..8);
        let level = if rng.random_bool(0.25) {
            0.0
        } else {
            rng.random_range(0.15..1.0)
        };
        env.extend(std::iter::repeat_n(level, len));
    }
    env.truncate(frames);
    env
}

/// Tone for `total_samples` samples; frame `v` uses `envelope[v]` (the last
/// value holds for trailing samples).
pub fn synth_audio(envelope: &[f64], emotion: usize, total_samples: usize) -> Result<Waveform> {
    if emotion >= NUM_EMOTIONS {
        return Err(Error::InvalidInput(format!("emotion index {emotion} out of range")));
    }
    if envelope.is_empty() {
        return Err(Error::InvalidInput("envelope is empty".into()));
    }
    let f = EMOTION_CARRIER_HZ[emotion];
    let spf = samples_per_frame();
    let sr = SAMPLE_RATE_HZ as f64;
    let samples = (0..total_samples)
        .map(|i| {
            let env = envelope[(i / spf).min(envelope.len() - 1)];
            let amp = AMPLITUDE_REST + AMPLITUDE_GAIN * env;
            let ph = 2.0 * PI * f * i as f64 / sr;
            (amp * (ph.sin() + SECOND_HARMONIC * (2.0 * ph).sin())) as f32
        })
        .collect();
    Waveform::new(samples, SAMPLE_RATE_HZ)
}

/// Per-frame RMS over `frames` whole frames.
pub fn frame_rms(audio: &Waveform, frames: usize) -> Vec<f64> {
    let spf = samples_per_frame();
    let s = audio.samples();
    (0..frames)
        .map(|v| {
            let lo = (v * spf).min(s.len());
            let hi = ((v + 1) * spf).min(s.len());
            if hi == lo {
                return 0.0;
            }
            (s[lo..hi].iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / (hi - lo) as f64).sqrt()
        })
        .collect()
}

/// Inverts the amplitude law; silence maps to 0.
pub fn envelope_from_audio(audio: &Waveform, frames: usize) -> Vec<f64> {
    frame_rms(audio, frames)
        .into_iter()
        .map(|r| ((r / carrier_rms() - AMPLITUDE_REST) / AMPLITUDE_GAIN).clamp(0.0, 1.0))
        .collect()
}

/// Ground-truth landmarks the generator assigns to `audio`, before tracker
/// noise.
pub fn oracle_landmarks(audio: &Waveform, emotion: &str, identity: &FaceIdentity) -> Result<Vec<LandmarkFrame>> {
    let e = emotion_index(emotion)?;
    let frames = video_frames_for_samples(audio.len(), &MfccConfig::default(), VIDEO_FPS)?;
    envelope_from_audio(audio, frames)
        .into_iter()
        .map(|m| face_shape(identity, e, m))
        .collect()
}

/// Pixel-space placement used for every synthetic frame: the normalised
/// shape on the sketch canvas.
pub fn to_pixel_frame(f: &LandmarkFrame, size: usize) -> Result<LandmarkFrame> {
    LandmarkFrame::new(f.points().iter().map(|&p| to_canvas(p, size)).collect(), CoordSpace::Pixel)
}

struct Raster {
    size: usize,
    ss: usize,
    /// Sample colours, `(size·ss)²`.
    buf: Vec<[f32; 3]>,
}

impl Raster {
    fn new(size: usize, ss: usize, bg: [f32; 3]) -> Self {
        Self {
            size,
            ss,
            buf: vec![bg; size * size * ss * ss],
        }
    }

    fn n(&self) -> usize {
        self.size * self.ss
    }

    fn sample_pos(&self, sx: usize, sy: usize) -> [f64; 2] {
        let step = 1.0 / self.ss as f64;
        [(sx as f64 + 0.5) * step, (sy as f64 + 0.5) * step]
    }

    fn bbox_samples(&self, lo: [f64; 2], hi: [f64; 2]) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let n = self.n() as f64;
        let s = self.ss as f64;
        let cl = |v: f64| v.clamp(0.0, n) as usize;
        (cl((lo[0] * s).floor())..cl((hi[0] * s).ceil() + 1.0), cl((lo[1] * s).floor())..cl((hi[1] * s).ceil() + 1.0))
    }

    fn fill_polygon(&mut self, poly: &[[f64; 2]], colour: [f32; 3]) {
        let lo = poly.iter().fold([f64::MAX; 2], |a, p| [a[0].min(p[0]), a[1].min(p[1])]);
        let hi = poly.iter().fold([f64::MIN; 2], |a, p| [a[0].max(p[0]), a[1].max(p[1])]);
        let (xs, ys) = self.bbox_samples(lo, hi);
        let n = self.n();
        for sy in ys {
            for sx in xs.clone() {
                let p = self.sample_pos(sx, sy);
                if point_in_polygon(p, poly) {
                    self.buf[sy * n + sx] = colour;
                }
            }
        }
    }

    fn stroke(&mut self, pts: &[[f64; 2]], width: f64, colour: [f32; 3]) {
        let r = width / 2.0;
        let n = self.n();
        for seg in pts.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let lo = [a[0].min(b[0]) - r, a[1].min(b[1]) - r];
            let hi = [a[0].max(b[0]) + r, a[1].max(b[1]) + r];
            let (xs, ys) = self.bbox_samples(lo, hi);
            for sy in ys {
                for sx in xs.clone() {
                    if segment_distance(self.sample_pos(sx, sy), a, b) <= r {
                        self.buf[sy * n + sx] = colour;
                    }
                }
            }
        }
    }

    fn disc(&mut self, c: [f64; 2], r: f64, colour: [f32; 3]) {
        let (xs, ys) = self.bbox_samples([c[0] - r, c[1] - r], [c[0] + r, c[1] + r]);
        let n = self.n();
        for sy in ys {
            for sx in xs.clone() {
                let p = self.sample_pos(sx, sy);
                if (p[0] - c[0]).hypot(p[1] - c[1]) <= r {
                    self.buf[sy * n + sx] = colour;
                }
            }
        }
    }

    fn resolve(&self) -> FrameImage {
        let (size, ss) = (self.size, self.ss);
        let mut img = FrameImage::new(size, size);
        let norm = 1.0 / (ss * ss) as f32;
        for y in 0..size {
            for x in 0..size {
                let mut acc = [0.0f32; 3];
                for dy in 0..ss {
                    for dx in 0..ss {
                        let c = self.buf[(y * ss + dy) * size * ss + x * ss + dx];
                        (0..3).for_each(|k| acc[k] += c[k]);
                    }
                }
                img.set_rgb(x, y, acc.map(|v| v * norm));
            }
        }
        img
    }
}

fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (a[0] + t * dx - p[0]).hypot(a[1] + t * dy - p[1])
}

fn shade(c: [f32; 3], k: f32) -> [f32; 3] {
    c.map(|v| (v * k).clamp(0.0, 1.0))
}

/// Flat-shaded face drawn from pixel-space landmarks, 2×2 supersampled.
pub fn render_face(frame: &LandmarkFrame, identity: &FaceIdentity, size: usize) -> Result<FrameImage> {
    if frame.space() != CoordSpace::Pixel {
        return Err(Error::InvalidInput("render_face expects pixel-space landmarks".into()));
    }
    let p = frame.points();
    let iod = frame.inter_ocular();
    let mut r = Raster::new(size, 2, identity.background);

    // Head: jaw line closed by an elliptical forehead arc.
    let (l, rt) = (p[0], p[16]);
    let centre = [0.5 * (l[0] + rt[0]), 0.5 * (l[1] + rt[1])];
    let rx = 0.5 * (rt[0] - l[0]).hypot(rt[1] - l[1]);
    let brow_top = p[17..27].iter().map(|q| q[1]).fold(f64::MAX, f64::min);
    let ry = (centre[1] - brow_top) + 0.35 * iod;
    let mut head: Vec<[f64; 2]> = p[0..17].to_vec();
    for k in 1..16 {
        let t = PI * k as f64 / 16.0;
        head.push([centre[0] + rx * t.cos(), centre[1] - ry * t.sin()]);
    }
    r.fill_polygon(&head, identity.skin);

    let dark = shade(identity.skin, 0.35);
    r.stroke(&p[17..22], 0.07 * iod, dark);
    r.stroke(&p[22..27], 0.07 * iod, dark);
    let nose = shade(identity.skin, 0.75);
    r.stroke(&p[27..31], 0.04 * iod, nose);
    r.stroke(&p[31..36], 0.04 * iod, nose);
    for eye in [&p[36..42], &p[42..48]] {
        r.fill_polygon(eye, [0.95, 0.95, 0.92]);
        let c = eye.iter().fold([0.0; 2], |a, q| [a[0] + q[0] / 6.0, a[1] + q[1] / 6.0]);
        r.disc(c, 0.065 * iod, [0.12, 0.08, 0.05]);
    }
    r.fill_polygon(&p[48..60], identity.lip);
    r.fill_polygon(&p[60..68], [0.18, 0.05, 0.06]);
    Ok(r.resolve())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub emotion: String,
    pub split: Split,
    pub n_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub spec: SynthSpec,
    pub image_size: usize,
    pub fps: u32,
    pub sample_rate_hz: u32,
    pub videos: Vec<VideoEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

impl Manifest {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let path = root.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::InvalidInput(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn video_dir(root: impl AsRef<Path>, id: &str) -> PathBuf {
        root.as_ref().join("videos").join(id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoEntry> {
        self.videos.iter().filter(move |v| v.split == split)
    }
}

/// Identity, emotion and envelope of video `index`; a pure function of the
/// spec seed and the index.
pub struct VideoPlan {
    pub id: String,
    pub emotion: usize,
    pub identity: FaceIdentity,
    pub envelope: Vec<f64>,
    noise_seed: u64,
}

pub fn plan_video(spec: &SynthSpec, index: usize) -> Result<VideoPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let emotion = emotion_index(&spec.emotion_set[index % spec.emotion_set.len()])?;
    let identity = FaceIdentity::sample(&mut rng, &spec.face_palette);
    let envelope = random_envelope(&mut rng, spec.frames_per_video()?);
    Ok(VideoPlan {
        id: format!("v{index:03}"),
        emotion,
        identity,
        envelope,
        noise_seed: rng.random(),
    })
}

/// Disjoint 8:2 train/test assignment by video; at least one test video
/// once there are two or more videos.
pub fn split_assignment(n: usize, seed: u64) -> Vec<Split> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_test = if n >= 2 { ((n as f64) * 0.2).round().max(1.0) as usize } else { 0 };
    let mut out = vec![Split::Train; n];
    for &i in &idx[..n_test] {
        out[i] = Split::Test;
    }
    out
}

/// Writes one video's files under `dir` and returns its manifest entry.
pub fn write_video(spec: &SynthSpec, plan: &VideoPlan, split: Split, dir: &Path) -> Result<VideoEntry> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let size = spec.image_size;
    let n_frames = plan.envelope.len();

    let audio = synth_audio(&plan.envelope, plan.emotion, spec.samples_per_video())?;
    write_wav(dir.join("audio.wav"), &audio)?;

    let mut noise = ChaCha8Rng::seed_from_u64(plan.noise_seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 {
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    };
    let mut records = Vec::with_capacity(n_frames);
    for (v, &m) in plan.envelope.iter().enumerate() {
        let clean = face_shape(&plan.identity, plan.emotion, m)?;
        let jittered: Vec<[f64; 2]> = clean
            .points()
            .iter()
            .map(|q| [q[0] + spec.tracker_noise * normal(&mut noise), q[1] + spec.tracker_noise * normal(&mut noise)])
            .collect();
        let shape = LandmarkFrame::new(jittered, CoordSpace::Normalized)?;
        let px = to_pixel_frame(&shape, size)?;
        render_face(&px, &plan.identity, size)?.save_png(frames_dir.join(format!("{v:06}.png")))?;
        records.push(LandmarkRecord::from_frame(v, size as u32, size as u32, &px));
    }
    write_jsonl(dir.join("landmarks.jsonl"), &records)?;

    let neutral = emotion_index("neutral")?;
    let reference = to_pixel_frame(&face_shape(&plan.identity, neutral, 0.0)?, size)?;
    render_face(&reference, &plan.identity, size)?.save_png(dir.join("reference.png"))?;
    write_jsonl(
        dir.join("reference.jsonl"),
        &[LandmarkRecord::from_frame(0, size as u32, size as u32, &reference)],
    )?;

    Ok(VideoEntry {
        id: plan.id.clone(),
        emotion: EMOTIONS[plan.emotion].to_string(),
        split,
        n_frames,
    })
}

pub fn generate_corpus(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let splits = split_assignment(spec.n_videos, spec.seed);
    let mut videos = Vec::with_capacity(spec.n_videos);
    for (i, split) in splits.into_iter().enumerate() {
        let plan = plan_video(spec, i)?;
        log::debug!("writing synthetic video {}", plan.id);
        videos.push(write_video(spec, &plan, split, &Manifest::video_dir(out, &plan.id))?);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        spec: spec.clone(),
        image_size: spec.image_size,
        fps: VIDEO_FPS,
        sample_rate_hz: SAMPLE_RATE_HZ,
        videos,
    };
    let path = out.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_features::load_wav;
    use crate::landmarks::{read_jsonl, PcaBasis};

    #[test]
    fn template_has_unit_inter_ocular_distance() {
        let f = LandmarkFrame::new(template(), CoordSpace::Pixel).unwrap();
        assert!((f.inter_ocular() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn emotion_styles_are_pairwise_distinguishable() {
        for a in 0..NUM_EMOTIONS {
            for b in a + 1..NUM_EMOTIONS {
                let (x, y) = (EMOTION_STYLES[a], EMOTION_STYLES[b]);
                let d = (x.brow - y.brow)
                    .abs()
                    .max((x.corner_dx - y.corner_dx).abs())
                    .max((x.corner_dy - y.corner_dy).abs());
                assert!(d >= 0.05 - 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn happy_and_sad_differ_only_in_styled_points() {
        let mut id = FaceIdentity::mean();
        id.offsets = vec![[0.0; 2]; NUM_LANDMARKS];
        let h = face_shape(&id, emotion_index("happy").unwrap(), 0.4).unwrap();
        let s = face_shape(&id, emotion_index("sad").unwrap(), 0.4).unwrap();
        let styled: Vec<usize> = (17..27).chain([48, 49, 53, 54, 55, 59, 60, 64]).collect();
        let mut max_other = 0.0f64;
        let mut max_styled = 0.0f64;
        // Normalisation shifts the centroid; compare relative to the nose tip.
        for i in 0..NUM_LANDMARKS {
            let dh = [h.points()[i][0] - h.points()[30][0], h.points()[i][1] - h.points()[30][1]];
            let ds = [s.points()[i][0] - s.points()[30][0], s.points()[i][1] - s.points()[30][1]];
            let d = (dh[0] - ds[0]).hypot(dh[1] - ds[1]);
            if styled.contains(&i) {
                max_styled = max_styled.max(d);
            } else {
                max_other = max_other.max(d);
            }
        }
        assert!(max_other < 1e-12, "{max_other}");
        assert!(max_styled >= 0.05);
    }

    #[test]
    fn oracle_opening_examples() {
        let id = FaceIdentity::mean();
        let e = emotion_index("neutral").unwrap();
        let rest = face_shape(&id, e, 0.0).unwrap();
        let full = face_shape(&id, e, 1.0).unwrap();
        let half = face_shape(&id, e, 0.5).unwrap();
        let gap = |f: &LandmarkFrame| f.points()[66][1] - f.points()[62][1];
        assert!(gap(&rest) < 0.01);
        assert!((gap(&full) - gap(&rest) - MAX_MOUTH_OPENING * 1.08).abs() < 1e-9);
        for i in 0..NUM_LANDMARKS {
            for c in 0..2 {
                let lerp = 0.5 * (rest.points()[i][c] + full.points()[i][c]);
                assert!((half.points()[i][c] - lerp).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn silence_keeps_the_mouth_at_rest() {
        let frames = 10;
        let silent = Waveform::new(vec![0.0; frames * samples_per_frame() + 240], SAMPLE_RATE_HZ).unwrap();
        let id = FaceIdentity::mean();
        let lms = oracle_landmarks(&silent, "sad", &id).unwrap();
        let rest = face_shape(&id, 6, 0.0).unwrap();
        assert!(!lms.is_empty());
        assert!(lms.iter().all(|f| f == &rest));
        assert!(oracle_landmarks(&silent, "bored", &id).is_err());
    }

    #[test]
    fn audio_envelope_roundtrips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let env = random_envelope(&mut rng, 30);
        for e in 0..NUM_EMOTIONS {
            let a = synth_audio(&env, e, 30 * samples_per_frame()).unwrap();
            let back = envelope_from_audio(&a, 30);
            for (x, y) in env.iter().zip(&back) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    fn small_spec(n: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            image_size: 64,
            ..SynthSpec::new(n, 0.5, seed)
        }
    }

    #[test]
    fn corpus_is_byte_identical_for_a_seed() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = small_spec(3, 11);
        let ma = generate_corpus(&spec, a.path()).unwrap();
        let mb = generate_corpus(&spec, b.path()).unwrap();
        assert_eq!(ma, mb);
        let files = |root: &Path| -> Vec<(PathBuf, Vec<u8>)> {
            let mut out = Vec::new();
            let mut stack = vec![root.to_path_buf()];
            while let Some(d) = stack.pop() {
                for e in std::fs::read_dir(&d).unwrap() {
                    let p = e.unwrap().path();
                    if p.is_dir() {
                        stack.push(p);
                    } else {
                        out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
                    }
                }
            }
            out.sort();
            out
        };
        assert_eq!(files(a.path()), files(b.path()));
        let c = tempfile::tempdir().unwrap();
        generate_corpus(&small_spec(3, 12), c.path()).unwrap();
        assert_ne!(files(a.path()), files(c.path()));
    }

    #[test]
    fn corpus_layout_and_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(&small_spec(2, 5), dir.path()).unwrap();
        assert_eq!(Manifest::load(dir.path()).unwrap(), m);
        let v = &m.videos[0];
        assert_eq!(v.n_frames, 12);
        let vd = Manifest::video_dir(dir.path(), &v.id);
        let lms = read_jsonl(vd.join("landmarks.jsonl")).unwrap();
        assert_eq!(lms.len(), v.n_frames);
        assert_eq!((lms[0].w, lms[0].h), (64, 64));
        assert_eq!(std::fs::read_dir(vd.join("frames")).unwrap().count(), v.n_frames);
        let img = FrameImage::load_png(vd.join("frames/000000.png")).unwrap();
        assert_eq!((img.width, img.height), (64, 64));
        let wav = load_wav(vd.join("audio.wav")).unwrap();
        assert_eq!(wav.len(), 8000);
        assert_eq!(read_jsonl(vd.join("reference.jsonl")).unwrap().len(), 1);
        assert!(vd.join("reference.png").is_file());
        assert!(generate_corpus(&SynthSpec::new(0, 1.0, 0), dir.path()).is_err());
        assert!(generate_corpus(&SynthSpec::new(1, 0.01, 0), dir.path()).is_err());
    }

    #[test]
    fn split_is_eight_to_two_and_disjoint() {
        let s = split_assignment(50, 0);
        assert_eq!(s.iter().filter(|&&x| x == Split::Test).count(), 10);
        assert_eq!(split_assignment(1, 0), vec![Split::Train]);
        assert_eq!(split_assignment(5, 0).iter().filter(|&&x| x == Split::Test).count(), 1);
        assert_eq!(s, split_assignment(50, 0));
    }

    /// Least-squares fit of `y ≈ a·x + b`, returning R².
    fn linear_r2(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let slope = sxy / sxx;
        let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - (my + slope * (a - mx))).powi(2)).sum();
        let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        1.0 - ss_res / ss_tot
    }

    #[test]
    fn linear_probe_from_audio_rms_to_mouth_opening() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            image_size: 32,
            ..SynthSpec::new(4, 2.0, 21)
        };
        let m = generate_corpus(&spec, dir.path()).unwrap();
        // Identity changes the slope, so the probe is fitted per video.
        for v in &m.videos {
            let vd = Manifest::video_dir(dir.path(), &v.id);
            let wav = load_wav(vd.join("audio.wav")).unwrap();
            let xs = frame_rms(&wav, v.n_frames);
            let ys: Vec<f64> = read_jsonl(vd.join("landmarks.jsonl"))
                .unwrap()
                .iter()
                .map(|rec| {
                    let f = rec.to_frame().unwrap().normalize().unwrap();
                    f.points()[66][1] - f.points()[62][1]
                })
                .collect();
            let r2 = linear_r2(&xs, &ys);
            assert!(r2 > 0.99, "{}: R² = {r2}", v.id);
        }
    }

    #[test]
    fn landmark_corpus_supports_twenty_components() {
        let spec = SynthSpec::new(10, 0.5, 0);
        let mut frames = Vec::new();
        let mut noise = ChaCha8Rng::seed_from_u64(1);
        for i in 0..spec.n_videos {
            let plan = plan_video(&spec, i).unwrap();
            for &m in &plan.envelope {
                let f = face_shape(&plan.identity, plan.emotion, m).unwrap();
                let j: Vec<[f64; 2]> = f
                    .points()
                    .iter()
                    .map(|q| [q[0] + noise.random_range(-0.003..0.003), q[1] + noise.random_range(-0.003..0.003)])
                    .collect();
                frames.push(LandmarkFrame::new(j, CoordSpace::Normalized).unwrap());
            }
        }
        assert!(PcaBasis::fit(&frames, 20).is_ok());
    }

    #[test]
    fn rendering_is_in_range_and_mouth_visible() {
        let id = FaceIdentity::mean();
        let closed = to_pixel_frame(&face_shape(&id, 5, 0.0).unwrap(), 64).unwrap();
        let open = to_pixel_frame(&face_shape(&id, 5, 1.0).unwrap(), 64).unwrap();
        let a = render_face(&closed, &id, 64).unwrap();
        let b = render_face(&open, &id, 64).unwrap();
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let diff: f32 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 10.0);
        assert!(render_face(&face_shape(&id, 5, 0.0).unwrap(), &id, 64).is_err());
    }
}
