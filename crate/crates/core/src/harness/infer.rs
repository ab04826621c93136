use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::data::load_reference_landmarks;
use super::stage1::LandmarkModel;
use super::stage2::RenderModel;
use crate::audio_features::{align_to_video, extract_mfcc, load_wav, MfccConfig, Waveform, VIDEO_FPS};
use crate::imaging::FrameImage;
use crate::landmarks::{rasterize, read_jsonl, write_jsonl, LandmarkFrame, LandmarkRecord};
use crate::metrics::{FRAMES_DIR, LANDMARKS_FILE};
use crate::{Error, Result};

pub const INDEX_FILE: &str = "index.json";
const RENDER_CHUNK: usize = 8;

/// Written next to the frames as `index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferIndex {
    pub n_frames: usize,
    pub fps: u32,
    pub width: usize,
    pub height: usize,
    pub frames: Vec<String>,
    pub landmarks: String,
}

/// Predicts normalised landmarks for a waveform.
pub fn predict_landmarks(model: &LandmarkModel, wave: &Waveform, reference: &LandmarkFrame) -> Result<Vec<LandmarkFrame>> {
    let dim = model.net().config.mfcc_dim;
    let audio = align_to_video(&extract_mfcc(wave, &mfcc_config_for(model)?)?, VIDEO_FPS)?;
    if audio.row_dim() != dim {
        return Err(Error::shape(format!("MFCC width {dim}"), audio.row_dim()));
    }
    Ok(model.predict(reference, &audio)?.landmark_seq)
}

fn mfcc_config_for(model: &LandmarkModel) -> Result<MfccConfig> {
    let cfg = MfccConfig::default();
    let per_frame = crate::audio_features::windows_per_frame(VIDEO_FPS, cfg.hop_ms)?;
    let dim = model.net().config.mfcc_dim;
    if !dim.is_multiple_of(per_frame) {
        return Err(Error::Checkpoint(format!("MFCC width {dim} is not a multiple of {per_frame}")));
    }
    Ok(MfccConfig::with_n_mfcc(dim / per_frame))
}

/// Runs both stages and writes `frames/NNNNNN.png`, `landmarks.jsonl` (pixel
/// coordinates of the reference image) and `index.json` under `out_dir`.
///
/// Sketches are drawn on the normalised canvas, so the reference image is
/// expected to be framed the way the training data was.
pub fn infer(
    audio: &Path,
    ref_image: &Path,
    ref_landmarks: &Path,
    lm_ckpt: &Checkpoint,
    render_ckpt: &Checkpoint,
    out_dir: &Path,
) -> Result<InferIndex> {
    for (what, p) in [("audio", audio), ("reference image", ref_image), ("reference landmarks", ref_landmarks)] {
        if !p.exists() {
            return Err(Error::InvalidInput(format!("{what} {} does not exist", p.display())));
        }
    }
    let lm_model = LandmarkModel::from_checkpoint(lm_ckpt)?;
    let render = RenderModel::from_checkpoint(render_ckpt)?;
    let size = render.net().config().size;

    let reference = FrameImage::load_png(ref_image)?;
    if reference.width != size || reference.height != size {
        return Err(Error::InvalidInput(format!(
            "reference image is {}x{} but the translator expects {size}x{size}",
            reference.width, reference.height
        )));
    }
    let ref_pixel = read_jsonl(ref_landmarks)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidInput(format!("{} holds no landmarks", ref_landmarks.display())))?;
    let placement = ref_pixel.to_frame()?.normalization()?;
    let ref_norm = load_reference_landmarks(ref_landmarks)?;

    let wave = load_wav(audio)?;
    let shapes = predict_landmarks(&lm_model, &wave, &ref_norm)?;
    log::info!("predicted {} frames from {:.2} s of audio", shapes.len(), wave.duration_secs());

    let sketches = shapes.iter().map(|f| rasterize(f, size)).collect::<Result<Vec<_>>>()?;
    let frames = render.render(&sketches, &reference, RENDER_CHUNK)?;

    let frames_dir = out_dir.join(FRAMES_DIR);
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let mut names = Vec::with_capacity(frames.len());
    for (v, img) in frames.iter().enumerate() {
        let name = format!("{v:06}.png");
        img.save_png(frames_dir.join(&name))?;
        names.push(format!("{FRAMES_DIR}/{name}"));
    }
    let records: Vec<LandmarkRecord> = shapes
        .iter()
        .enumerate()
        .map(|(v, f)| LandmarkRecord::from_frame(v, size as u32, size as u32, &placement.denormalize(f)))
        .collect();
    write_jsonl(out_dir.join(LANDMARKS_FILE), &records)?;

    let index = InferIndex {
        n_frames: frames.len(),
        fps: VIDEO_FPS,
        width: size,
        height: size,
        frames: names,
        landmarks: LANDMARKS_FILE.to_string(),
    };
    let path: PathBuf = out_dir.join(INDEX_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}
