use std::path::{Path, PathBuf};

use crate::audio_features::{align_to_video, extract_mfcc, load_wav, FrameAlignedAudio, MfccConfig};
use crate::imaging::FrameImage;
use crate::landmarks::{read_jsonl, LandmarkFrame};
use crate::metrics::{FRAMES_DIR, LANDMARKS_FILE};
use crate::msef::emotion_index;
use crate::synthdata::{Manifest, Split, VideoEntry};
use crate::{Error, Result};

pub const AUDIO_FILE: &str = "audio.wav";
pub const REFERENCE_IMAGE: &str = "reference.png";
pub const REFERENCE_LANDMARKS: &str = "reference.jsonl";

/// One video with its audio features and normalised landmark track.
#[derive(Debug, Clone)]
pub struct VideoData {
    pub id: String,
    pub dir: PathBuf,
    pub emotion: usize,
    /// Trimmed to the landmark count when the audio runs longer.
    pub audio: FrameAlignedAudio,
    pub landmarks: Vec<LandmarkFrame>,
    pub reference: LandmarkFrame,
}

impl VideoData {
    pub fn n_frames(&self) -> usize {
        self.landmarks.len()
    }

    pub fn frame_path(&self, v: usize) -> PathBuf {
        self.dir.join(FRAMES_DIR).join(format!("{v:06}.png"))
    }

    pub fn reference_image(&self) -> Result<FrameImage> {
        FrameImage::load_png(self.dir.join(REFERENCE_IMAGE))
    }
}

/// Reads the first record of a landmark file and normalises it.
pub fn load_reference_landmarks(path: impl AsRef<Path>) -> Result<LandmarkFrame> {
    let path = path.as_ref();
    let first = read_jsonl(path)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidInput(format!("{} holds no landmarks", path.display())))?;
    first.to_frame()?.normalize()
}

pub fn audio_features(path: impl AsRef<Path>, n_mfcc: usize, fps: u32) -> Result<FrameAlignedAudio> {
    let wave = load_wav(path)?;
    align_to_video(&extract_mfcc(&wave, &MfccConfig::with_n_mfcc(n_mfcc))?, fps)
}

pub fn load_video(root: &Path, entry: &VideoEntry, n_mfcc: usize, fps: u32) -> Result<VideoData> {
    let dir = Manifest::video_dir(root, &entry.id);
    let landmarks = read_jsonl(dir.join(LANDMARKS_FILE))?
        .iter()
        .map(|r| r.to_frame()?.normalize())
        .collect::<Result<Vec<_>>>()?;
    let mut audio = audio_features(dir.join(AUDIO_FILE), n_mfcc, fps)?;
    if audio.n_frames() < landmarks.len() {
        return Err(Error::InvalidInput(format!(
            "video {}: audio covers {} frames but {} landmark frames exist",
            entry.id,
            audio.n_frames(),
            landmarks.len()
        )));
    }
    audio.truncate(landmarks.len());
    let ref_path = dir.join(REFERENCE_LANDMARKS);
    let reference = if ref_path.exists() {
        load_reference_landmarks(&ref_path)?
    } else {
        landmarks
            .first()
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("video {} has no frames", entry.id)))?
    };
    Ok(VideoData {
        id: entry.id.clone(),
        dir,
        emotion: emotion_index(&entry.emotion)?,
        audio,
        landmarks,
        reference,
    })
}

/// Loads the videos of one split in manifest order, optionally on worker
/// threads. The result order never depends on `parallel`.
pub fn load_split(
    root: &Path,
    manifest: &Manifest,
    split: Split,
    n_mfcc: usize,
    max_videos: Option<usize>,
    parallel: bool,
) -> Result<Vec<VideoData>> {
    let entries: Vec<&VideoEntry> = manifest
        .split(split)
        .take(max_videos.unwrap_or(usize::MAX))
        .collect();
    if entries.is_empty() {
        return Err(Error::InvalidInput(format!("corpus {} has no {split:?} videos", root.display())));
    }
    let fps = manifest.fps;
    if !parallel {
        return entries.iter().map(|e| load_video(root, e, n_mfcc, fps)).collect();
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(entries.len());
    let chunk = entries.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = entries
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|e| load_video(root, e, n_mfcc, fps)).collect::<Vec<_>>()))
            .collect();
        let mut out = Vec::with_capacity(entries.len());
        for h in handles {
            for v in h.join().map_err(|_| Error::InvalidInput("data loader thread panicked".into()))? {
                out.push(v?);
            }
        }
        Ok(out)
    })
}
