//! Landmark distance, SSIM and PSNR, and directory-level evaluation runs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::imaging::FrameImage;
use crate::landmarks::{read_jsonl, LandmarkFrame, LIP_RANGE, NUM_LANDMARKS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LandmarkSubset {
    Full,
    Lips,
}

/// Mean Euclidean point distance over frames and the chosen points.
pub fn lmd(pred: &[LandmarkFrame], gt: &[LandmarkFrame], subset: LandmarkSubset) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} frames", gt.len()), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("landmark sequences are empty".into()));
    }
    let range = match subset {
        LandmarkSubset::Full => 0..NUM_LANDMARKS,
        LandmarkSubset::Lips => LIP_RANGE,
    };
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        if p.space() != g.space() {
            return Err(Error::InvalidInput("landmark frames are in different coordinate spaces".into()));
        }
        for i in range.clone() {
            let (a, b) = (p.points()[i], g.points()[i]);
            sum += (a[0] - b[0]).hypot(a[1] - b[1]);
        }
    }
    Ok(sum / (pred.len() * range.len()) as f64)
}

/// PSNR in dB, or not applicable for identical images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Db(f64),
    NotApplicable,
}

impl Psnr {
    pub fn db(&self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(*v),
            Psnr::NotApplicable => None,
        }
    }

    /// Mean of the finite values; not applicable when there are none.
    pub fn mean<'a>(values: impl IntoIterator<Item = &'a Psnr>) -> Psnr {
        let dbs: Vec<f64> = values.into_iter().filter_map(Psnr::db).collect();
        if dbs.is_empty() {
            Psnr::NotApplicable
        } else {
            Psnr::Db(dbs.iter().sum::<f64>() / dbs.len() as f64)
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v:.2}"),
            Psnr::NotApplicable => f.write_str("N/A"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Db(v) => s.serialize_f64(*v),
            Psnr::NotApplicable => s.serialize_str("N/A"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Db(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Db(v) => Ok(Psnr::Db(v)),
            Repr::Text(t) if t == "N/A" => Ok(Psnr::NotApplicable),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("invalid PSNR value {t:?}"))),
        }
    }
}

/// PSNR with pixel values scaled to 0–255.
pub fn psnr(a: &FrameImage, b: &FrameImage) -> Result<Psnr> {
    if !a.same_shape(b) {
        return Err(Error::shape(
            format!("{}x{}", a.width, a.height),
            format!("{}x{}", b.width, b.height),
        ));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = 255.0 * (*x as f64 - *y as f64);
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        Ok(Psnr::NotApplicable)
    } else {
        Ok(Psnr::Db(10.0 * (255.0f64 * 255.0 / mse).log10()))
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `h × w` plane.
fn filter_valid(img: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// SSIM of two grayscale planes with values on a 0–255 scale.
pub fn ssim_gray(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<f64> {
    if a.len() != w * h || b.len() != w * h {
        return Err(Error::shape(w * h, a.len().max(b.len())));
    }
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "image {w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(a, w, h, &taps);
    let mu_b = filter_valid(b, w, h, &taps);
    let e_aa = filter_valid(&prod(a, a), w, h, &taps);
    let e_bb = filter_valid(&prod(b, b), w, h, &taps);
    let e_ab = filter_valid(&prod(a, b), w, h, &taps);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / mu_a.len() as f64)
}

/// SSIM on the channel-mean grayscale images.
pub fn ssim(a: &FrameImage, b: &FrameImage) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape(
            format!("{}x{}", a.width, a.height),
            format!("{}x{}", b.width, b.height),
        ));
    }
    let scale = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|p| 255.0 * p).collect() };
    ssim_gray(&scale(a.to_gray()), &scale(b.to_gray()), a.width, a.height)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub frames: usize,
    pub f_lmd: f64,
    pub m_lmd: f64,
    /// Absent when either side has no frames directory.
    pub ssim: Option<f64>,
    pub psnr: Option<Psnr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub f_lmd: f64,
    pub m_lmd: f64,
    pub ssim: Option<f64>,
    pub psnr: Option<Psnr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_video: BTreeMap<String, VideoMetrics>,
    pub aggregate: AggregateMetrics,
}

impl MetricsReport {
    /// Aggregate values are plain means of the per-video values.
    pub fn from_videos(per_video: BTreeMap<String, VideoMetrics>) -> Result<Self> {
        if per_video.is_empty() {
            return Err(Error::InvalidInput("no videos to aggregate".into()));
        }
        let n = per_video.len() as f64;
        let f_lmd = per_video.values().map(|v| v.f_lmd).sum::<f64>() / n;
        let m_lmd = per_video.values().map(|v| v.m_lmd).sum::<f64>() / n;
        let ssims: Vec<f64> = per_video.values().filter_map(|v| v.ssim).collect();
        let ssim = (!ssims.is_empty()).then(|| ssims.iter().sum::<f64>() / ssims.len() as f64);
        let psnrs: Vec<Psnr> = per_video.values().filter_map(|v| v.psnr).collect();
        let psnr = (!psnrs.is_empty()).then(|| Psnr::mean(&psnrs));
        Ok(Self {
            aggregate: AggregateMetrics {
                f_lmd,
                m_lmd,
                ssim,
                psnr,
            },
            per_video,
        })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
    }
}

pub const LANDMARKS_FILE: &str = "landmarks.jsonl";
pub const FRAMES_DIR: &str = "frames";

/// Video directories under `root`: `root` itself if it holds a landmark
/// file, otherwise its subdirectories (looking inside `videos/` when present).
pub fn discover_videos(root: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !root.is_dir() {
        return Err(Error::InvalidInput(format!("{} is not a directory", root.display())));
    }
    let mut out = BTreeMap::new();
    if root.join(LANDMARKS_FILE).is_file() {
        let name = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "video".into());
        out.insert(name, root.to_path_buf());
        return Ok(out);
    }
    let base = if root.join("videos").is_dir() {
        root.join("videos")
    } else {
        root.to_path_buf()
    };
    for entry in std::fs::read_dir(&base).map_err(|e| Error::io(&base, e))? {
        let entry = entry.map_err(|e| Error::io(&base, e))?;
        let path = entry.path();
        if path.join(LANDMARKS_FILE).is_file() {
            out.insert(entry.file_name().to_string_lossy().into_owned(), path);
        }
    }
    Ok(out)
}

/// Frame images `frames/*.png` sorted by file name.
pub fn load_frames(dir: &Path) -> Result<Option<Vec<FrameImage>>> {
    let frames = dir.join(FRAMES_DIR);
    if !frames.is_dir() {
        return Ok(None);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&frames)
        .map_err(|e| Error::io(&frames, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    paths.sort();
    Ok(Some(paths.iter().map(FrameImage::load_png).collect::<Result<_>>()?))
}

/// Metrics of one predicted video against its ground truth. Landmarks of
/// both sides are mapped into the normalised space of the ground-truth frame.
pub fn evaluate_video(pred_dir: &Path, gt_dir: &Path) -> Result<VideoMetrics> {
    let pred = read_jsonl(pred_dir.join(LANDMARKS_FILE))?;
    let gt = read_jsonl(gt_dir.join(LANDMARKS_FILE))?;
    if pred.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "{} has {} landmark frames but {} has {}",
            pred_dir.display(),
            pred.len(),
            gt_dir.display(),
            gt.len()
        )));
    }
    let mut p_norm = Vec::with_capacity(pred.len());
    let mut g_norm = Vec::with_capacity(gt.len());
    for (p, g) in pred.iter().zip(&gt) {
        let g = g.to_frame()?;
        let n = g.normalization()?;
        p_norm.push(n.normalize_frame(&p.to_frame()?));
        g_norm.push(n.normalize_frame(&g));
    }
    let f_lmd = lmd(&p_norm, &g_norm, LandmarkSubset::Full)?;
    let m_lmd = lmd(&p_norm, &g_norm, LandmarkSubset::Lips)?;

    let (mut ssim_v, mut psnr_v) = (None, None);
    if let (Some(pf), Some(gf)) = (load_frames(pred_dir)?, load_frames(gt_dir)?) {
        if pf.len() != gf.len() {
            return Err(Error::InvalidInput(format!(
                "{} has {} frames but {} has {}",
                pred_dir.display(),
                pf.len(),
                gt_dir.display(),
                gf.len()
            )));
        }
        if !pf.is_empty() {
            let mut s = 0.0;
            let mut ps = Vec::with_capacity(pf.len());
            for (a, b) in pf.iter().zip(&gf) {
                s += ssim(a, b)?;
                ps.push(psnr(a, b)?);
            }
            ssim_v = Some(s / pf.len() as f64);
            psnr_v = Some(Psnr::mean(&ps));
        }
    }
    Ok(VideoMetrics {
        frames: pred.len(),
        f_lmd,
        m_lmd,
        ssim: ssim_v,
        psnr: psnr_v,
    })
}

/// Evaluates every video present on both sides. Two single-video
/// directories are paired regardless of their names.
pub fn evaluate_run(pred_root: &Path, gt_root: &Path) -> Result<MetricsReport> {
    let pred = discover_videos(pred_root)?;
    let gt = discover_videos(gt_root)?;
    let pairs: Vec<(String, PathBuf, PathBuf)> =
        if pred_root.join(LANDMARKS_FILE).is_file() && gt_root.join(LANDMARKS_FILE).is_file() {
            let (name, p) = pred.into_iter().next().expect("one video");
            vec![(name, p, gt_root.to_path_buf())]
        } else {
            pred.into_iter()
                .filter_map(|(name, p)| gt.get(&name).map(|g| (name, p, g.clone())))
                .collect()
        };
    if pairs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no videos in common between {} and {}",
            pred_root.display(),
            gt_root.display()
        )));
    }
    let mut per_video = BTreeMap::new();
    for (name, p, g) in pairs {
        log::info!("evaluating {name}");
        per_video.insert(name, evaluate_video(&p, &g)?);
    }
    MetricsReport::from_videos(per_video)
}
