//! Waveform front end: resampling, Hamming-windowed log-mel spectrograms,
//! WAV input and the `LSPA` binary mel container.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Input("sample_rate must be positive".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate_hz: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub fft_size: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
    /// First-order pre-emphasis coefficient; 0 disables it.
    pub preemphasis: f64,
    /// Pad half a window of zeros on both ends before framing.
    pub center: bool,
    /// Subtract the per-utterance mean of each mel band.
    pub mean_normalize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate_hz: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 40,
            fft_size: 512,
            fmin_hz: 20.0,
            fmax_hz: 7600.0,
            log_floor: 1e-10,
            preemphasis: 0.0,
            center: false,
            mean_normalize: false,
        }
    }
}

impl FeatureConfig {
    pub fn window_samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("features: {m}")));
        if self.sample_rate_hz == 0 {
            return bad("sample_rate_hz must be positive");
        }
        if !(self.hop_ms > 0.0 && self.window_ms > self.hop_ms) {
            return bad("require window_ms > hop_ms > 0");
        }
        if self.hop_samples() == 0 {
            return bad("hop shorter than one sample");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1");
        }
        if self.fft_size < self.window_samples() {
            return bad("fft_size must cover the window");
        }
        if !(self.fmin_hz >= 0.0
            && self.fmin_hz < self.fmax_hz
            && self.fmax_hz <= self.sample_rate_hz as f64 / 2.0)
        {
            return bad("require 0 <= fmin_hz < fmax_hz <= sample_rate_hz/2");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    /// Frames produced from `n` samples (before centering is applied).
    pub fn frame_count(&self, n: usize) -> usize {
        let w = self.window_samples();
        let n = if self.center { n + 2 * (w / 2) } else { n };
        if n < w {
            0
        } else {
            (n - w) / self.hop_samples() + 1
        }
    }
}

/// T×M log-mel matrix, row-major (one row per frame).
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    frames: Vec<f32>,
    n_frames: usize,
    n_mels: usize,
    /// Front-end settings the frames came from. Containers do not carry
    /// them, so decoded spectrograms get defaults with `n_mels` filled in.
    pub config: FeatureConfig,
}

impl MelSpectrogram {
    pub fn from_frames(n_frames: usize, n_mels: usize, frames: Vec<f32>) -> Result<Self> {
        if frames.len() != n_frames * n_mels {
            return Err(Error::shape("mel frames", n_frames * n_mels, frames.len()));
        }
        if let Some(i) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("mel entry {i}")));
        }
        Ok(MelSpectrogram {
            frames,
            n_frames,
            n_mels,
            config: FeatureConfig {
                n_mels,
                ..FeatureConfig::default()
            },
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Per-band mean over time.
    pub fn mean_frame(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n_mels];
        for t in 0..self.n_frames {
            for (acc, v) in m.iter_mut().zip(self.frame(t)) {
                *acc += *v as f64;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.n_frames as f64);
        m
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited resampling with a Hann-windowed sinc kernel.
pub fn resample(wave: &Waveform, target_rate: u32) -> Result<Waveform> {
    if wave.samples.is_empty() {
        return Err(Error::Input("cannot resample an empty waveform".into()));
    }
    if target_rate == 0 {
        return Err(Error::Input("target sample rate must be positive".into()));
    }
    if wave.sample_rate == target_rate {
        return Ok(wave.clone());
    }
    const ZERO_CROSSINGS: f64 = 16.0;
    const ROLLOFF: f64 = 0.95;

    let src = wave.sample_rate as f64;
    let dst = target_rate as f64;
    let step = src / dst;
    // cutoff in cycles per input sample
    let fc = 0.5 * (dst / src).min(1.0) * ROLLOFF;
    let half_width = ZERO_CROSSINGS / (2.0 * fc);
    let n_in = wave.samples.len();
    let n_out = ((n_in as f64) * dst / src).round().max(1.0) as usize;

    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out {
        let x = n as f64 * step;
        let lo = ((x - half_width).ceil().max(0.0)) as usize;
        let hi = ((x + half_width).floor() as usize).min(n_in - 1);
        let mut acc = 0.0;
        for k in lo..=hi {
            let d = x - k as f64;
            let u = d / half_width;
            let window = 0.5 * (1.0 + (PI * u).cos());
            acc += wave.samples[k] as f64 * 2.0 * fc * sinc(2.0 * fc * d) * window;
        }
        out.push(acc as f32);
    }
    Waveform::new(out, target_rate)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters over `fft_size/2 + 1` power bins,
/// returned as `n_mels` rows.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Vec<Vec<f64>> {
    let n_bins = cfg.fft_size / 2 + 1;
    let lo = hz_to_mel(cfg.fmin_hz);
    let hi = hz_to_mel(cfg.fmax_hz);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate_hz as f64 / cfg.fft_size as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - l) / (c - l);
                    let down = (r - f) / (r - c);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

pub fn mel_spectrogram(wave: &Waveform, cfg: &FeatureConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if wave.sample_rate != cfg.sample_rate_hz {
        return Err(Error::Input(format!(
            "waveform is {} Hz, front end expects {} Hz",
            wave.sample_rate, cfg.sample_rate_hz
        )));
    }
    if let Some(i) = wave.samples.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite(format!("waveform sample {i}")));
    }
    let w = cfg.window_samples();
    let hop = cfg.hop_samples();

    let mut signal: Vec<f64> = wave.samples.iter().map(|&v| v as f64).collect();
    if cfg.preemphasis != 0.0 {
        for i in (1..signal.len()).rev() {
            signal[i] -= cfg.preemphasis * signal[i - 1];
        }
    }
    if cfg.center {
        let pad = vec![0.0; w / 2];
        signal = [pad.as_slice(), signal.as_slice(), pad.as_slice()].concat();
    }
    if signal.len() < w {
        return Err(Error::Input(format!(
            "waveform has {} samples, shorter than one {w}-sample window",
            wave.samples.len()
        )));
    }
    let n_frames = (signal.len() - w) / hop + 1;

    let window = hamming(w);
    let bank = mel_filterbank(cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let n_bins = cfg.fft_size / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut power = vec![0.0; n_bins];
    let mut frames = Vec::with_capacity(n_frames * cfg.n_mels);

    for t in 0..n_frames {
        let seg = &signal[t * hop..t * hop + w];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < w {
                Complex::new(seg[i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        for filt in &bank {
            let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
            frames.push(e.max(cfg.log_floor).ln() as f32);
        }
    }

    if cfg.mean_normalize {
        let m = cfg.n_mels;
        for b in 0..m {
            let mean = (0..n_frames).map(|t| frames[t * m + b] as f64).sum::<f64>() / n_frames as f64;
            for t in 0..n_frames {
                frames[t * m + b] = (frames[t * m + b] as f64 - mean) as f32;
            }
        }
    }

    let mut mel = MelSpectrogram::from_frames(n_frames, cfg.n_mels, frames)?;
    mel.config = cfg.clone();
    Ok(mel)
}

/// Reads a mono WAV file (16-bit integer or 32-bit float PCM).
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let fmt_err = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| fmt_err(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(fmt_err(format!("expected mono, found {} channels", spec.channels)));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect(),
        (f, b) => return Err(fmt_err(format!("unsupported sample format {f:?}/{b}-bit"))),
    }
    .map_err(|e| fmt_err(e.to_string()))?;
    if samples.is_empty() {
        return Err(fmt_err("no samples".into()));
    }
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit mono PCM, clipping to [-1, 1].
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io_err = |e: hound::Error| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(io_err)?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(io_err)?;
    }
    w.finalize().map_err(io_err)
}

pub const MEL_MAGIC: &[u8; 4] = b"LSPA";
pub const MEL_VERSION: u32 = 1;

/// `LSPA` container: magic, version, T, M (u32 LE), then T·M f32 LE row-major.
pub fn encode_mel(mel: &MelSpectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * mel.frames.len());
    out.extend_from_slice(MEL_MAGIC);
    out.extend_from_slice(&MEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(mel.n_frames as u32).to_le_bytes());
    out.extend_from_slice(&(mel.n_mels as u32).to_le_bytes());
    for v in &mel.frames {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_mel(bytes: &[u8]) -> std::result::Result<MelSpectrogram, String> {
    if bytes.len() < 16 {
        return Err("truncated header".into());
    }
    if &bytes[0..4] != MEL_MAGIC {
        return Err("bad magic".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != MEL_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let (t, m) = (u32_at(8) as usize, u32_at(12) as usize);
    let body = &bytes[16..];
    if body.len() != 4 * t * m {
        return Err(format!("expected {} payload bytes, found {}", 4 * t * m, body.len()));
    }
    let frames = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MelSpectrogram::from_frames(t, m, frames).map_err(|e| e.to_string())
}

pub fn write_mel(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    std::fs::write(path, encode_mel(mel)).map_err(|e| Error::io(path, e))
}

pub fn read_mel(path: &Path) -> Result<MelSpectrogram> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mel(&bytes).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}
