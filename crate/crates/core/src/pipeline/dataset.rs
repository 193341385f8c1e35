use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::conditions::{embed_text, load_audio, save_audio, synth_audio, AudioFeatures, AudioSource};
use crate::error::{Error, Result};
use crate::motion::io::{load_motion, save_motion};
use crate::motion::synth::{Style, StyleParams};
use crate::motion::{encode, MotionSeq, Skeleton, DEFAULT_CONTACT_THRESHOLD, FEATURE_WIDTH, FPS};
use crate::numerics::checkpoint::write_atomic;
use crate::numerics::{SplitMix64, Tensor};
use crate::train::Example;

/// One (motion, text, audio) triple.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub text: String,
    pub motion: MotionSeq,
    /// Length-matched to `motion` at 20 FPS.
    pub audio: Option<AudioFeatures>,
    /// Motion halts on the audio beats.
    pub beat_locked: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SyntheticDataset {
    pub items: Vec<Item>,
}

/// Style of the `index`-th label.
pub fn label_style(label: &str, index: usize) -> Style {
    Style::from_label(label).unwrap_or(Style::fallback(index))
}

/// Procedural dataset: item `i` carries label `i mod L` with jittered style
/// parameters. Every item gets audio; dance items halt on its beats.
pub fn gen_dataset(cfg: &ExperimentConfig, skeleton: &Skeleton, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let d = &cfg.data;
    let duration = d.frames as f64 / FPS;
    let mut items = Vec::with_capacity(d.sequences);
    for i in 0..d.sequences {
        let li = i % d.labels.len();
        let text = d.labels[li].clone();
        let style = label_style(&text, li);
        let mut rng = SplitMix64::derive(seed, i as u64);
        let bpm = d.bpms[rng.below(d.bpms.len())];
        let params = StyleParams {
            amplitude: rng.range(0.8, 1.2),
            frequency: rng.range(0.7, 1.1),
            phase: rng.range(0.0, TAU),
            speed: rng.range(1.0, 1.4),
            turn_rate: 0.0,
            bpm,
            beat_offset: rng.range(0.0, 60.0 / bpm),
        };
        let positions = style.generate(skeleton, d.frames, FPS, &params);
        let motion = encode(&positions, skeleton, DEFAULT_CONTACT_THRESHOLD)?;
        let mut audio = synth_audio(bpm, duration, params.beat_offset, &d.audio, rng.next())?;
        if audio.fps != FPS {
            audio = audio.downsample(FPS)?;
        }
        audio = audio.fit_length(d.frames)?;
        if rng.uniform() >= d.music_ratio {
            audio.source = AudioSource::Speech;
        }
        items.push(Item {
            text,
            motion,
            audio: Some(audio),
            beat_locked: style.is_beat_locked(),
        });
    }
    Ok(SyntheticDataset { items })
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    text: String,
    motion: String,
    audio: Option<String>,
    beat_locked: bool,
}

#[derive(Serialize, Deserialize)]
struct Index {
    config_hash: String,
    items: Vec<IndexEntry>,
}

pub const INDEX_FILE: &str = "index.json";

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Distinct texts in first-seen order.
    pub fn texts(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for it in &self.items {
            if !out.contains(&it.text) {
                out.push(it.text.clone());
            }
        }
        out
    }

    /// Writes `index.json`, `motions/NNNN.mot` and `audio/NNNN.txt`.
    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        std::fs::create_dir_all(dir.join("motions"))?;
        std::fs::create_dir_all(dir.join("audio"))?;
        let mut entries = Vec::with_capacity(self.items.len());
        for (i, it) in self.items.iter().enumerate() {
            let motion = format!("motions/{i:04}.mot");
            save_motion(&dir.join(&motion), &it.motion)?;
            let audio = match &it.audio {
                Some(a) => {
                    let rel = format!("audio/{i:04}.txt");
                    save_audio(&dir.join(&rel), a)?;
                    Some(rel)
                }
                None => None,
            };
            entries.push(IndexEntry {
                text: it.text.clone(),
                motion,
                audio,
                beat_locked: it.beat_locked,
            });
        }
        let index = Index {
            config_hash: config_hash.to_string(),
            items: entries,
        };
        let json = serde_json::to_string_pretty(&index).expect("index serialises");
        write_atomic(&dir.join(INDEX_FILE), json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(INDEX_FILE))?;
        let index: Index = serde_json::from_str(&text).map_err(|e| Error::Format(format!("dataset index: {e}")))?;
        let mut items = Vec::with_capacity(index.items.len());
        for e in index.items {
            let motion = load_motion(&dir.join(&e.motion))?;
            let audio = e.audio.map(|a| load_audio(&dir.join(a))).transpose()?;
            if let Some(a) = &audio {
                if a.frames() != motion.frames() {
                    return Err(Error::Format(format!("{}: audio and motion lengths differ", e.motion)));
                }
            }
            items.push(Item {
                text: e.text,
                motion,
                audio,
                beat_locked: e.beat_locked,
            });
        }
        if items.is_empty() {
            return Err(Error::Format("dataset has no items".into()));
        }
        Ok(SyntheticDataset { items })
    }
}

/// Per-channel standardisation of motion features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Smallest std used, so near-constant channels are not blown up.
pub const STD_FLOOR: f64 = 1e-2;

impl Normalizer {
    pub fn identity() -> Self {
        Normalizer {
            mean: vec![0.0; FEATURE_WIDTH],
            std: vec![1.0; FEATURE_WIDTH],
        }
    }

    pub fn fit(motions: &[&MotionSeq]) -> Result<Self> {
        let n: usize = motions.iter().map(|m| m.frames()).sum();
        if n == 0 {
            return Err(Error::invalid("cannot fit a normalizer on no frames"));
        }
        let mut mean = vec![0.0; FEATURE_WIDTH];
        for m in motions {
            for t in 0..m.frames() {
                for (s, x) in mean.iter_mut().zip(m.frame(t)) {
                    *s += x;
                }
            }
        }
        mean.iter_mut().for_each(|s| *s /= n as f64);
        let mut var = vec![0.0; FEATURE_WIDTH];
        for m in motions {
            for t in 0..m.frames() {
                for ((v, x), mu) in var.iter_mut().zip(m.frame(t)).zip(&mean) {
                    *v += (x - mu) * (x - mu);
                }
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Normalizer { mean, std })
    }

    fn check(&self, t: &Tensor) -> Result<usize> {
        let (rows, w) = t.dims2()?;
        if w != self.mean.len() || w != self.std.len() {
            return Err(Error::shape("normalizer", t.shape(), &[rows, self.mean.len()]));
        }
        Ok(rows)
    }

    pub fn normalize(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let w = self.mean.len();
        let data = t.data().iter().enumerate().map(|(i, x)| (x - self.mean[i % w]) / self.std[i % w]).collect();
        Tensor::new(t.shape(), data)
    }

    pub fn denormalize(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let w = self.mean.len();
        let data = t.data().iter().enumerate().map(|(i, x)| x * self.std[i % w] + self.mean[i % w]).collect();
        Tensor::new(t.shape(), data)
    }
}

/// Training examples in model space; audio kept only when `with_audio`.
pub fn to_examples(
    items: &[&Item],
    norm: &Normalizer,
    context_width: usize,
    text_seed: u64,
    with_audio: bool,
) -> Result<Vec<Example>> {
    items
        .iter()
        .map(|it| {
            let audio = match (&it.audio, with_audio) {
                (Some(a), true) => Some(a.fit_length(it.motion.frames())?.features),
                _ => None,
            };
            Ok(Example {
                x0: norm.normalize(&it.motion.features)?,
                context: embed_text(&it.text, context_width, text_seed)?.embedding,
                audio,
            })
        })
        .collect()
}
