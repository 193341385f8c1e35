//! Deterministic stand-ins for the text and audio encoders.
//!
//! Text tokens map to fixed random vectors seeded by a hash of the token;
//! audio is a synthetic per-frame feature stream with a beat pulse.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::resample_rows;
use crate::numerics::hash::fnv1a64;
use crate::numerics::{SplitMix64, Tensor};
use crate::numerics::checkpoint::write_atomic;

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextCondition {
    pub tokens: Vec<String>,
    /// `tokens × width`, one row per token.
    pub embedding: Tensor,
}

/// Random-projection embedding: each token's row is a standard normal
/// vector drawn from a generator seeded by the token's hash and `seed`.
pub fn embed_text(text: &str, width: usize, seed: u64) -> Result<TextCondition> {
    if width == 0 {
        return Err(Error::invalid("text embedding width must be positive"));
    }
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::invalid(format!("text {text:?} has no tokens")));
    }
    let mut data = Vec::with_capacity(tokens.len() * width);
    for tok in &tokens {
        let mut rng = SplitMix64::derive(seed, fnv1a64(tok.as_bytes()));
        data.extend(rng.normals(width));
    }
    let embedding = Tensor::new(&[tokens.len(), width], data)?;
    Ok(TextCondition { tokens, embedding })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AudioSource {
    #[default]
    Music,
    Speech,
}

/// Per-frame audio features with their beat grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatures {
    pub fps: f64,
    /// `frames × channels`
    pub features: Tensor,
    /// Beat times in seconds, strictly increasing.
    pub beats: Vec<f64>,
    pub source: AudioSource,
}

impl AudioFeatures {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    /// Truncates or edge-pads to exactly `frames` rows.
    pub fn fit_length(&self, frames: usize) -> Result<AudioFeatures> {
        let (n, c) = self.features.dims2()?;
        if n == 0 || frames == 0 {
            return Err(Error::invalid("cannot fit empty audio"));
        }
        let mut data = Vec::with_capacity(frames * c);
        for t in 0..frames {
            data.extend_from_slice(self.features.row(t.min(n - 1)));
        }
        Ok(AudioFeatures {
            features: Tensor::new(&[frames, c], data)?,
            ..self.clone()
        })
    }

    /// Linear interpolation onto a `dst_fps` grid.
    pub fn downsample(&self, dst_fps: f64) -> Result<AudioFeatures> {
        Ok(AudioFeatures {
            fps: dst_fps,
            features: downsample_audio(&self.features, self.fps, dst_fps)?,
            ..self.clone()
        })
    }
}

/// Layout and scale of [`synth_audio_features`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioSynthConfig {
    pub channels: usize,
    pub fps: f64,
    /// Height of the pulse at beat frames.
    pub pulse_amplitude: f64,
    /// Standard deviation of the filler channels.
    pub noise_scale: f64,
}

impl Default for AudioSynthConfig {
    fn default() -> Self {
        AudioSynthConfig {
            channels: 64,
            fps: 20.0,
            pulse_amplitude: 1.0,
            noise_scale: 0.1,
        }
    }
}

/// Channel 0 of synthetic audio: the beat pulse.
pub const PULSE_CHANNEL: usize = 0;

/// Synthetic audio at `cfg.fps` with beats at `offset + k·60/bpm`.
///
/// Channels: 0 is the pulse (`pulse_amplitude` on the frame nearest each
/// beat, 0 elsewhere); 1 and 2 are sin and cos of the beat phase; 3 is the
/// tempo over 120 bpm; the rest are seeded Gaussian filler.
pub fn synth_audio(bpm: f64, duration_s: f64, offset: f64, cfg: &AudioSynthConfig, seed: u64) -> Result<AudioFeatures> {
    if !(bpm > 0.0 && bpm.is_finite()) {
        return Err(Error::invalid(format!("bpm must be positive, got {bpm}")));
    }
    if !(duration_s > 0.0) || !(offset >= 0.0) || cfg.channels == 0 || !(cfg.fps > 0.0) {
        return Err(Error::invalid("audio needs positive duration, channels and fps"));
    }
    let frames = (duration_s * cfg.fps).round().max(1.0) as usize;
    let period = 60.0 / bpm;
    let beats: Vec<f64> = (0..)
        .map(|k| offset + k as f64 * period)
        .take_while(|&b| b < duration_s - 1e-9)
        .collect();
    let mut rng = SplitMix64::new(seed);
    let c = cfg.channels;
    let mut data = vec![0.0; frames * c];
    for t in 0..frames {
        let row = &mut data[t * c..(t + 1) * c];
        let phase = (t as f64 / cfg.fps - offset) / period;
        let fixed = [0.0, (TAU * phase).sin(), (TAU * phase).cos(), bpm / 120.0];
        for (k, v) in row.iter_mut().enumerate() {
            *v = if k < fixed.len() { fixed[k] } else { cfg.noise_scale * rng.normal() };
        }
    }
    for &b in &beats {
        let f = (b * cfg.fps).round() as usize;
        if f < frames {
            data[f * c + PULSE_CHANNEL] = cfg.pulse_amplitude;
        }
    }
    Ok(AudioFeatures {
        fps: cfg.fps,
        features: Tensor::new(&[frames, c], data)?,
        beats,
        source: AudioSource::Music,
    })
}

/// [`synth_audio`] with the first beat at 0 and default layout.
pub fn synth_audio_features(bpm: f64, duration_s: f64, channels: usize, seed: u64) -> Result<AudioFeatures> {
    let cfg = AudioSynthConfig {
        channels,
        ..AudioSynthConfig::default()
    };
    synth_audio(bpm, duration_s, 0.0, &cfg, seed)
}

/// Linearly interpolates a `frames × channels` stream from `src_fps` to
/// `dst_fps` (not above `src_fps`).
pub fn downsample_audio(features: &Tensor, src_fps: f64, dst_fps: f64) -> Result<Tensor> {
    if src_fps < dst_fps {
        return Err(Error::invalid(format!("cannot downsample {src_fps} fps to {dst_fps} fps")));
    }
    let (n, c) = features.dims2()?;
    if n < 2 {
        return Err(Error::invalid("audio needs at least two frames to resample"));
    }
    if src_fps == dst_fps {
        return Ok(features.clone());
    }
    let (data, frames) = resample_rows(features.data(), n, c, src_fps, dst_fps)?;
    Tensor::new(&[frames, c], data)
}

/// Beat times recovered from the pulse channel by thresholding at half
/// the pulse height.
pub fn pulse_beats(audio: &AudioFeatures, pulse_amplitude: f64) -> Vec<f64> {
    (0..audio.frames())
        .filter(|&t| audio.features.at(t, PULSE_CHANNEL) > 0.5 * pulse_amplitude)
        .map(|t| t as f64 / audio.fps)
        .collect()
}

/// Columnar text form: a header line `# fps=F channels=C [beats=b1,b2,...]
/// [source=music|speech]` followed by one whitespace-separated row per frame.
pub fn audio_to_text(a: &AudioFeatures) -> String {
    let mut s = format!("# fps={} channels={}", a.fps, a.channels());
    if !a.beats.is_empty() {
        let beats: Vec<String> = a.beats.iter().map(|b| format!("{b}")).collect();
        let _ = write!(s, " beats={}", beats.join(","));
    }
    let source = match a.source {
        AudioSource::Music => "music",
        AudioSource::Speech => "speech",
    };
    let _ = writeln!(s, " source={source}");
    for t in 0..a.frames() {
        let row: Vec<String> = a.features.row(t).iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn audio_from_text(text: &str) -> Result<AudioFeatures> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Format("empty audio file".into()))?;
    let header = header
        .strip_prefix('#')
        .ok_or_else(|| Error::Format("audio header must start with '#'".into()))?;
    let (mut fps, mut channels, mut beats, mut source) = (None, None, Vec::new(), AudioSource::Music);
    for field in header.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header field {field:?}")))?;
        let bad = |_| Error::Format(format!("bad value in header field {field:?}"));
        match k {
            "fps" => fps = Some(v.parse::<f64>().map_err(bad)?),
            "channels" => channels = Some(v.parse::<usize>().map_err(|_| Error::Format(format!("bad channels {v:?}")))?),
            "beats" => {
                beats = v
                    .split(',')
                    .map(|b| b.parse::<f64>().map_err(|_| Error::Format(format!("bad beat {b:?}"))))
                    .collect::<Result<_>>()?
            }
            "source" => {
                source = match v {
                    "music" => AudioSource::Music,
                    "speech" => AudioSource::Speech,
                    _ => return Err(Error::Format(format!("unknown audio source {v:?}"))),
                }
            }
            _ => {}
        }
    }
    let fps = fps.filter(|f| *f > 0.0).ok_or_else(|| Error::Format("header needs a positive fps".into()))?;
    let channels = channels.filter(|c| *c > 0).ok_or_else(|| Error::Format("header needs channels".into()))?;
    if beats.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Format("beat times must increase".into()));
    }
    let mut data = Vec::new();
    let mut frames = 0;
    for (i, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("row {i}: bad value {v:?}"))))
            .collect::<Result<_>>()?;
        if row.len() != channels {
            return Err(Error::Format(format!("row {i} has {} values, expected {channels}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("row {i} is not finite")));
        }
        data.extend(row);
        frames += 1;
    }
    if frames == 0 {
        return Err(Error::Format("audio file has no frames".into()));
    }
    Ok(AudioFeatures {
        fps,
        features: Tensor::new(&[frames, channels], data)?,
        beats,
        source,
    })
}

pub fn save_audio(path: &Path, a: &AudioFeatures) -> Result<()> {
    write_atomic(path, audio_to_text(a).as_bytes())
}

pub fn load_audio(path: &Path) -> Result<AudioFeatures> {
    audio_from_text(&std::fs::read_to_string(path)?)
}
