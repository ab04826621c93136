//! Audio front end: WAV ingestion, MFCC extraction and alignment of MFCC
//! windows to video frames.
//!
//! All audio is brought to 16 kHz mono before feature extraction. MFCCs use
//! 25 ms windows with a 10 ms hop, so at 25 fps every video frame owns four
//! consecutive MFCC rows.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rubato::audioadapter_buffers::direct::SequentialSliceOfVecs;
use rubato::{Fft, FixedSync, Resampler};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const SAMPLE_RATE_HZ: u32 = 16_000;
pub const VIDEO_FPS: u32 = 25;

const MFCC_MAGIC: &[u8; 10] = b"EMOTK-MFCC";
const MFCC_VERSION: u8 = 1;

/// Mono audio at [`SAMPLE_RATE_HZ`].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate_hz: u32,
}

impl Waveform {
    /// Wraps 16 kHz samples. Fails on an empty buffer or any other rate.
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Audio("waveform has no samples".into()));
        }
        if sample_rate_hz != SAMPLE_RATE_HZ {
            return Err(Error::Audio(format!(
                "waveform must be {SAMPLE_RATE_HZ} Hz, got {sample_rate_hz} Hz (use resample_to_16k)"
            )));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    /// Resamples arbitrary-rate mono audio to 16 kHz.
    pub fn resample_to_16k(samples: &[f32], rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Audio("waveform has no samples".into()));
        }
        if rate_hz == SAMPLE_RATE_HZ {
            return Self::new(samples.to_vec(), SAMPLE_RATE_HZ);
        }
        let input: Vec<Vec<f64>> = vec![samples.iter().map(|&s| s as f64).collect()];
        let adapter = SequentialSliceOfVecs::new(&input, 1, samples.len())
            .map_err(|e| Error::Audio(format!("resampler input: {e:?}")))?;
        let mut resampler = Fft::<f64>::new(
            rate_hz as usize,
            SAMPLE_RATE_HZ as usize,
            1024,
            1,
            FixedSync::Input,
        )
        .map_err(|e| Error::Audio(format!("cannot resample from {rate_hz} Hz: {e}")))?;
        let out = resampler
            .process_all(&adapter, samples.len(), None)
            .map_err(|e| Error::Audio(format!("resampling failed: {e}")))?;
        let resampled = out
            .take_data()
            .into_iter()
            .map(|s| s.clamp(-1.0, 1.0) as f32)
            .collect();
        Self::new(resampled, SAMPLE_RATE_HZ)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Reads a PCM (8/16/24/32-bit integer) or 32-bit float WAV file, averages
/// channels and resamples to 16 kHz.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::Unsupported => Error::Audio(format!(
            "{}: unsupported WAV encoding (only PCM integer and 32-bit float are accepted)",
            path.display()
        )),
        other => Error::Audio(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Audio(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Int => {
            if !(8..=32).contains(&spec.bits_per_sample) {
                return Err(Error::Audio(format!(
                    "{}: unsupported PCM bit depth {}",
                    path.display(),
                    spec.bits_per_sample
                )));
            }
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| (v as f64 / scale) as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?
        }
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(Error::Audio(format!(
                    "{}: unsupported float bit depth {}",
                    path.display(),
                    spec.bits_per_sample
                )));
            }
            reader
                .into_samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?
        }
    };
    if interleaved.is_empty() {
        return Err(Error::Audio(format!("{}: no audio samples", path.display())));
    }
    let mono: Vec<f32> = interleaved
        .chunks_exact(channels)
        .map(|frame| {
            let sum: f64 = frame.iter().map(|&s| s as f64).sum();
            ((sum / channels as f64) as f32).clamp(-1.0, 1.0)
        })
        .collect();
    Waveform::resample_to_16k(&mono, spec.sample_rate)
}

/// Writes a waveform as 16-bit PCM mono.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let map = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio(format!("{}: {other}", path.display())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(map)?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) as f64 * 32767.0).round() as i16;
        writer.write_sample(v).map_err(map)?;
    }
    writer.finalize().map_err(map)
}

/// MFCC front-end parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccConfig {
    pub n_mfcc: usize,
    pub n_mels: usize,
    pub pre_emphasis: f64,
    pub window_ms: u32,
    pub hop_ms: u32,
    pub n_fft: usize,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            n_mfcc: 13,
            n_mels: 26,
            pre_emphasis: 0.97,
            window_ms: 25,
            hop_ms: 10,
            n_fft: 512,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn with_n_mfcc(n_mfcc: usize) -> Self {
        Self {
            n_mfcc,
            ..Self::default()
        }
    }

    pub fn window_samples(&self) -> usize {
        (SAMPLE_RATE_HZ as usize * self.window_ms as usize) / 1000
    }

    pub fn hop_samples(&self) -> usize {
        (SAMPLE_RATE_HZ as usize * self.hop_ms as usize) / 1000
    }

    /// Number of analysis windows for a signal of `num_samples`.
    pub fn num_windows(&self, num_samples: usize) -> usize {
        let win = self.window_samples();
        if num_samples < win {
            0
        } else {
            1 + (num_samples - win) / self.hop_samples()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return Err(Error::InvalidInput(format!(
                "n_mfcc must be in 1..={}, got {}",
                self.n_mels, self.n_mfcc
            )));
        }
        if self.n_fft < self.window_samples() {
            return Err(Error::InvalidInput("n_fft shorter than the window".into()));
        }
        if self.hop_samples() == 0 {
            return Err(Error::InvalidInput("hop must be at least one sample".into()));
        }
        Ok(())
    }
}

/// Row-major `T × C` matrix of cepstral coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccSequence {
    coeffs: Vec<f64>,
    n_frames: usize,
    n_coeffs: usize,
    pub window_ms: u32,
    pub hop_ms: u32,
}

impl MfccSequence {
    pub fn from_rows(coeffs: Vec<f64>, n_coeffs: usize, window_ms: u32, hop_ms: u32) -> Result<Self> {
        if n_coeffs == 0 || !coeffs.len().is_multiple_of(n_coeffs) {
            return Err(Error::shape(
                format!("multiple of {n_coeffs} values"),
                coeffs.len(),
            ));
        }
        if coeffs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("MFCC contains non-finite values".into()));
        }
        Ok(Self {
            n_frames: coeffs.len() / n_coeffs,
            coeffs,
            n_coeffs,
            window_ms,
            hop_ms,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_coeffs(&self) -> usize {
        self.n_coeffs
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.coeffs[t * self.n_coeffs..(t + 1) * self.n_coeffs]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coeffs
    }

    /// Writes the binary cache format: magic, version byte, `T` and `C` as
    /// little-endian u32, then row-major little-endian f32.
    pub fn write_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(19 + self.coeffs.len() * 4);
        buf.extend_from_slice(MFCC_MAGIC);
        buf.push(MFCC_VERSION);
        buf.extend_from_slice(&(self.n_frames as u32).to_le_bytes());
        buf.extend_from_slice(&(self.n_coeffs as u32).to_le_bytes());
        for &v in &self.coeffs {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_cache(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        if buf.len() < 19 || &buf[..10] != MFCC_MAGIC {
            return Err(Error::Checkpoint(format!("{}: not an MFCC cache", path.display())));
        }
        if buf[10] != MFCC_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported MFCC cache version {}",
                path.display(),
                buf[10]
            )));
        }
        let t = u32::from_le_bytes(buf[11..15].try_into().unwrap()) as usize;
        let c = u32::from_le_bytes(buf[15..19].try_into().unwrap()) as usize;
        let body = &buf[19..];
        if body.len() != t * c * 4 {
            return Err(Error::Checkpoint(format!(
                "{}: expected {} payload bytes, found {}",
                path.display(),
                t * c * 4,
                body.len()
            )));
        }
        let coeffs = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Self::from_rows(coeffs, c, 25, 10)
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters spanning 0 Hz to Nyquist, evaluated at FFT bin
/// frequencies. Returned as `n_mels` rows of `n_fft/2 + 1` weights.
pub fn mel_filterbank(cfg: &MfccConfig) -> Vec<Vec<f64>> {
    let n_bins = cfg.n_fft / 2 + 1;
    let nyquist = SAMPLE_RATE_HZ as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    (0..cfg.n_mels)
        .map(|m| {
            let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * SAMPLE_RATE_HZ as f64 / cfg.n_fft as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= centre {
                        (f - lo) / (centre - lo)
                    } else {
                        (hi - f) / (hi - centre)
                    }
                })
                .collect()
        })
        .collect()
}

/// Centre frequency (Hz) of every mel filter.
pub fn mel_centres_hz(cfg: &MfccConfig) -> Vec<f64> {
    let mel_max = hz_to_mel(SAMPLE_RATE_HZ as f64 / 2.0);
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(mel_max * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Per-window log mel energies (`T × n_mels`), the stage before the DCT.
pub fn log_mel_energies(wave: &Waveform, cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let win = cfg.window_samples();
    let hop = cfg.hop_samples();
    if wave.len() < win {
        return Err(Error::Audio(format!(
            "waveform has {} samples, shorter than one {}-sample window",
            wave.len(),
            win
        )));
    }
    let x = wave.samples();
    let mut emphasized = Vec::with_capacity(x.len());
    emphasized.push(x[0] as f64);
    for i in 1..x.len() {
        emphasized.push(x[i] as f64 - cfg.pre_emphasis * x[i - 1] as f64);
    }

    let window = hann(win);
    let filters = mel_filterbank(cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let n_bins = cfg.n_fft / 2 + 1;
    let n_windows = cfg.num_windows(x.len());
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut power = vec![0.0; n_bins];
    let mut out = Vec::with_capacity(n_windows);
    for t in 0..n_windows {
        let start = t * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < win {
                Complex::new(emphasized[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr() / cfg.n_fft as f64;
        }
        let row = filters
            .iter()
            .map(|filt| {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                e.max(cfg.log_floor).ln()
            })
            .collect();
        out.push(row);
    }
    Ok(out)
}

/// Standard MFCC pipeline: pre-emphasis, Hann-windowed 25 ms frames with a
/// 10 ms hop, power spectrum, mel filterbank, log, orthonormal DCT-II.
pub fn extract_mfcc(wave: &Waveform, cfg: &MfccConfig) -> Result<MfccSequence> {
    let log_mel = log_mel_energies(wave, cfg)?;
    let n = cfg.n_mels;
    let dct: Vec<Vec<f64>> = (0..cfg.n_mfcc)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            (0..n)
                .map(|m| scale * (PI * k as f64 * (m as f64 + 0.5) / n as f64).cos())
                .collect()
        })
        .collect();
    let mut coeffs = Vec::with_capacity(log_mel.len() * cfg.n_mfcc);
    for row in &log_mel {
        for basis in &dct {
            coeffs.push(basis.iter().zip(row).map(|(b, v)| b * v).sum());
        }
    }
    MfccSequence::from_rows(coeffs, cfg.n_mfcc, cfg.window_ms, cfg.hop_ms)
}

/// MFCC rows grouped into contiguous, non-overlapping per-video-frame blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAlignedAudio {
    data: Vec<f64>,
    n_frames: usize,
    windows_per_frame: usize,
    n_coeffs: usize,
    pub fps: u32,
}

impl FrameAlignedAudio {
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn windows_per_frame(&self) -> usize {
        self.windows_per_frame
    }

    pub fn n_coeffs(&self) -> usize {
        self.n_coeffs
    }

    /// Width of one row, `W·C`.
    pub fn row_dim(&self) -> usize {
        self.windows_per_frame * self.n_coeffs
    }

    /// True when the audio was too short to fill a single video frame.
    pub fn is_empty(&self) -> bool {
        self.n_frames == 0
    }

    pub fn row(&self, v: usize) -> &[f64] {
        let d = self.row_dim();
        &self.data[v * d..(v + 1) * d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Keeps only the first `n` frames.
    pub fn truncate(&mut self, n: usize) {
        if n < self.n_frames {
            self.n_frames = n;
            self.data.truncate(n * self.row_dim());
        }
    }
}

/// Windows per video frame for a given frame rate and hop. Fails unless the
/// frame period is a whole number of hops.
pub fn windows_per_frame(fps: u32, hop_ms: u32) -> Result<usize> {
    if fps == 0 || hop_ms == 0 || 1000 % fps != 0 || !(1000 / fps).is_multiple_of(hop_ms) {
        return Err(Error::InvalidInput(format!(
            "frame period of {fps} fps is not a whole number of {hop_ms} ms hops"
        )));
    }
    Ok(((1000 / fps) / hop_ms) as usize)
}

/// Groups MFCC rows into blocks of `W = (1000/fps)/hop_ms`; a trailing
/// partial block is dropped.
pub fn align_to_video(mfcc: &MfccSequence, fps: u32) -> Result<FrameAlignedAudio> {
    let w = windows_per_frame(fps, mfcc.hop_ms)?;
    let v = mfcc.n_frames() / w;
    let data = mfcc.as_slice()[..v * w * mfcc.n_coeffs()].to_vec();
    Ok(FrameAlignedAudio {
        data,
        n_frames: v,
        windows_per_frame: w,
        n_coeffs: mfcc.n_coeffs(),
        fps,
    })
}

/// Number of video frames produced by `num_samples` of 16 kHz audio.
pub fn video_frames_for_samples(num_samples: usize, cfg: &MfccConfig, fps: u32) -> Result<usize> {
    Ok(cfg.num_windows(num_samples) / windows_per_frame(fps, cfg.hop_ms)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tone(freq: f64, secs: f64, rate: u32) -> Vec<f32> {
        let n = (secs * rate as f64).round() as usize;
        (0..n)
            .map(|i| (0.5 * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as f32)
            .collect()
    }

    fn write_pcm16(path: &Path, channels: u16, rate: u32, frames: &[Vec<f32>]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for frame in frames {
            for &s in frame {
                w.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
                    .unwrap();
            }
        }
        w.finalize().unwrap();
    }

    fn naive_dft_peak_hz(frame: &[f64], n_fft: usize) -> f64 {
        let mut best = (0, 0.0);
        for k in 0..=n_fft / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in frame.iter().enumerate() {
                let ang = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            let p = re * re + im * im;
            if p > best.1 {
                best = (k, p);
            }
        }
        best.0 as f64 * SAMPLE_RATE_HZ as f64 / n_fft as f64
    }

    #[test]
    fn silence_wav_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_pcm16(&p, 1, 16_000, &[vec![0.0; 16_000]]);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.len(), 16_000);
        assert!(w.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stereo_channels_are_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        let frames: Vec<Vec<f32>> = (0..16_000).map(|_| vec![0.5, -0.5]).collect();
        write_pcm16(&p, 2, 16_000, &frames);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.len(), 16_000);
        assert!(w.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn resampling_8k_doubles_length_and_keeps_tone() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t8k.wav");
        let t = tone(440.0, 0.5, 8000);
        write_pcm16(&p, 1, 8000, &[t]);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.len(), 8000);
        // Dominant bin of a 2048-point window in the middle of the clip.
        let mid: Vec<f64> = w.samples()[3000..3000 + 2048]
            .iter()
            .map(|&s| s as f64)
            .collect();
        let peak = naive_dft_peak_hz(&mid, 2048);
        assert!((peak - 440.0).abs() <= 16_000.0 / 2048.0, "peak at {peak} Hz");
    }

    #[test]
    fn float_wav_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut wr = hound::WavWriter::create(&p, spec).unwrap();
        for _ in 0..800 {
            wr.write_sample(0.25f32).unwrap();
        }
        wr.finalize().unwrap();
        let w = load_wav(&p).unwrap();
        assert!(w.samples().iter().all(|&s| s == 0.25));
    }

    #[test]
    fn unreadable_and_non_pcm_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_wav(dir.path().join("missing.wav")),
            Err(Error::Io { .. })
        ));
        // Minimal RIFF header declaring format tag 2 (ADPCM).
        let p = dir.path().join("adpcm.wav");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&36u32.to_le_bytes());
        bytes.extend_from_slice(b"WAVEfmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&16_000u32.to_le_bytes());
        bytes.extend_from_slice(&32_000u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        let err = load_wav(&p).unwrap_err();
        assert!(matches!(err, Error::Audio(_)), "{err}");
    }

    #[test]
    fn silence_gives_98_identical_rows() {
        let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        let m = extract_mfcc(&w, &MfccConfig::default()).unwrap();
        assert_eq!(m.n_frames(), 98);
        assert_eq!(m.n_coeffs(), 13);
        for t in 1..m.n_frames() {
            assert_eq!(m.row(t), m.row(0));
        }
    }

    #[test]
    fn tone_peaks_in_the_filter_covering_its_frequency() {
        let cfg = MfccConfig::default();
        let w = Waveform::new(tone(440.0, 1.0, 16_000), 16_000).unwrap();
        let log_mel = log_mel_energies(&w, &cfg).unwrap();
        assert_eq!(log_mel.len(), 98);
        let filters = mel_filterbank(&cfg);
        let win = hann(cfg.window_samples());
        let x = w.samples();
        for t in [5usize, 40, 90] {
            // Oracle: naive DFT of the same emphasised, windowed frame.
            let start = t * cfg.hop_samples();
            let frame: Vec<f64> = (0..cfg.window_samples())
                .map(|i| {
                    let n = start + i;
                    let prev = if n == 0 { 0.0 } else { x[n - 1] as f64 };
                    (x[n] as f64 - cfg.pre_emphasis * prev) * win[i]
                })
                .collect();
            let peak_hz = naive_dft_peak_hz(&frame, cfg.n_fft);
            let peak_bin = (peak_hz * cfg.n_fft as f64 / SAMPLE_RATE_HZ as f64).round() as usize;
            let expected = (0..filters.len())
                .max_by(|&a, &b| filters[a][peak_bin].total_cmp(&filters[b][peak_bin]))
                .unwrap();
            let got = (0..log_mel[t].len())
                .max_by(|&a, &b| log_mel[t][a].total_cmp(&log_mel[t][b]))
                .unwrap();
            assert_eq!(got, expected, "window {t}");
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let w = Waveform::new(tone(523.0, 0.3, 16_000), 16_000).unwrap();
        let a = extract_mfcc(&w, &MfccConfig::default()).unwrap();
        let b = extract_mfcc(&w, &MfccConfig::default()).unwrap();
        assert!(a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn too_short_waveform_is_rejected() {
        let w = Waveform::new(vec![0.1; 399], 16_000).unwrap();
        assert!(extract_mfcc(&w, &MfccConfig::default()).is_err());
    }

    #[test]
    fn hop_shift_offsets_rows_by_one() {
        let cfg = MfccConfig::default();
        let base: Vec<f32> = (0..8000)
            .map(|i| {
                let t = i as f64 / 16_000.0;
                (0.3 * (2.0 * PI * 300.0 * t).sin() + 0.2 * (2.0 * PI * 1250.0 * t).sin()) as f32
            })
            .collect();
        let mut shifted = vec![0.05f32; 160];
        shifted.extend_from_slice(&base);
        let a = extract_mfcc(&Waveform::new(base, 16_000).unwrap(), &cfg).unwrap();
        let b = extract_mfcc(&Waveform::new(shifted, 16_000).unwrap(), &cfg).unwrap();
        assert_eq!(b.n_frames(), a.n_frames() + 1);
        for t in 1..a.n_frames() {
            for (x, y) in a.row(t).iter().zip(b.row(t + 1)) {
                assert!((x - y).abs() < 1e-9, "row {t}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn alignment_examples() {
        let m = MfccSequence::from_rows(vec![0.0; 98 * 13], 13, 25, 10).unwrap();
        let a = align_to_video(&m, 25).unwrap();
        assert_eq!((a.windows_per_frame(), a.n_frames()), (4, 24));

        let m = MfccSequence::from_rows(vec![0.0; 4 * 13], 13, 25, 10).unwrap();
        assert_eq!(align_to_video(&m, 25).unwrap().n_frames(), 1);

        let m = MfccSequence::from_rows(vec![0.0; 3 * 13], 13, 25, 10).unwrap();
        let a = align_to_video(&m, 25).unwrap();
        assert!(a.is_empty());

        assert!(align_to_video(&m, 30).is_err());
        assert!(align_to_video(&m, 7).is_err());
    }

    #[test]
    fn mfcc_cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.mfcc");
        let vals: Vec<f64> = (0..26).map(|i| i as f64 * 0.5 - 3.0).collect();
        let m = MfccSequence::from_rows(vals, 13, 25, 10).unwrap();
        m.write_cache(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..10], b"EMOTK-MFCC");
        assert_eq!(bytes[10], 1);
        assert_eq!(u32::from_le_bytes(bytes[11..15].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[15..19].try_into().unwrap()), 13);
        assert_eq!(bytes.len(), 19 + 26 * 4);
        assert_eq!(MfccSequence::read_cache(&p).unwrap(), m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn frame_count_formula(n in 400usize..6000) {
            let cfg = MfccConfig::default();
            let w = Waveform::new(vec![0.01; n], 16_000).unwrap();
            let m = extract_mfcc(&w, &cfg).unwrap();
            prop_assert_eq!(m.n_frames(), 1 + (n - 400) / 160);
        }

        #[test]
        fn aligned_rows_are_exact_slices(t in 0usize..60, c in 1usize..14) {
            let vals: Vec<f64> = (0..t * c).map(|i| i as f64).collect();
            let m = MfccSequence::from_rows(vals, c, 25, 10).unwrap();
            let a = align_to_video(&m, 25).unwrap();
            prop_assert_eq!(a.n_frames(), t / 4);
            let cat: Vec<f64> = (0..a.n_frames()).flat_map(|v| a.row(v).to_vec()).collect();
            prop_assert_eq!(&cat[..], &m.as_slice()[..a.n_frames() * 4 * c]);
        }
    }
}
