use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, MAX_FRAMES};
use super::dataset::{gen_dataset, to_examples, Item, Normalizer, SyntheticDataset};
use super::embedder::{KineticPrototypeEmbedder, RetrievalEmbedder};
use super::model::{Model, ModelKind, ModelMeta, TrainedModel};
use crate::attention::{BlockOrder, BlockSpec, BranchModel, Mwnet};
use crate::conditions::{load_audio, AudioFeatures, AudioSource};
use crate::control::{finetune_single_branch, train_control_stage, DualBranchModel, SingleBranchModel};
use crate::diffusion::{DiffusionSchedule, SampleOptions};
use crate::error::{Error, Result};
use crate::metrics::{
    beat_align_score, diversity, frechet_distance_of, geometric_features, kinematic_beats, kinetic_features, multimodality,
    r_precision_mm_dist, MetricsReport,
};
use crate::motion::io::{features_csv, load_motion, positions_json, save_motion};
use crate::motion::{decode, MotionSeq, Skeleton};
use crate::numerics::checkpoint::{params_to_bytes, write_atomic};
use crate::numerics::{SplitMix64, Tensor};
use crate::par::Parallelism;
use crate::train::{train, Example};

/// Skeleton named by the config, or the built-in one.
pub fn skeleton_of(cfg: &ExperimentConfig) -> Result<Skeleton> {
    match &cfg.skeleton {
        Some(p) => Skeleton::load(p),
        None => Ok(Skeleton::smpl22()),
    }
}

/// Generates the synthetic dataset of `cfg` into `out`.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<SyntheticDataset> {
    let ds = gen_dataset(cfg, &skeleton_of(cfg)?, cfg.seed)?;
    ds.save(out, &cfg.hash_hex())?;
    Ok(ds)
}

/// Loss log written next to a checkpoint: `<ckpt>.loss.csv`.
pub fn loss_log_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

pub fn write_loss_log(path: &Path, losses: &[f64]) -> Result<()> {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    write_atomic(path, s.as_bytes())
}

/// Outcome of a training command.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: TrainedModel,
    pub losses: Vec<f64>,
}

fn motions_of(ds: &SyntheticDataset) -> Vec<&MotionSeq> {
    ds.items.iter().map(|i| &i.motion).collect()
}

fn check_frames(ds: &SyntheticDataset) -> Result<()> {
    match ds.items.iter().find(|i| i.motion.frames() > MAX_FRAMES) {
        Some(_) => Err(Error::invalid(format!("dataset clips exceed {MAX_FRAMES} frames"))),
        None => Ok(()),
    }
}

/// Text-stage training of a fresh main branch on every item.
pub fn train_main_on(cfg: &ExperimentConfig, ds: &SyntheticDataset, par: Parallelism) -> Result<TrainReport> {
    cfg.validate()?;
    check_frames(ds)?;
    let norm = Normalizer::fit(&motions_of(ds))?;
    let items: Vec<&Item> = ds.items.iter().collect();
    let examples = to_examples(&items, &norm, cfg.model.context_width, cfg.data.text_seed, false)?;
    let sched = DiffusionSchedule::from_config(&cfg.schedule)?;
    let mut rng = SplitMix64::derive(cfg.seed, 1);
    let mut model = Mwnet::init(cfg.model.clone(), &mut rng)?;
    let arch = model.clone();
    let losses = train(&mut model.params, &examples, &sched, &cfg.train_main, par, |g, b, ex, x_t, t| {
        arch.forward(g, b, x_t, t, g.constant(ex.context.clone()))
    })?;
    let meta = ModelMeta {
        kind: ModelKind::Main,
        spec: cfg.model.clone(),
        schedule: cfg.schedule,
        normalizer: norm,
        text_seed: cfg.data.text_seed,
        audio_width: 0,
    };
    Ok(TrainReport {
        model: TrainedModel {
            meta,
            model: Model::Main(model),
            config_hash: cfg.hash(),
            seed: cfg.seed,
        },
        losses,
    })
}

pub fn train_main(cfg: &ExperimentConfig, data: &Path, out: &Path, par: Parallelism) -> Result<TrainReport> {
    let ds = SyntheticDataset::load(data)?;
    let r = train_main_on(cfg, &ds, par)?;
    r.model.save(out)?;
    write_loss_log(&loss_log_path(out), &r.losses)?;
    Ok(r)
}

fn main_of(m: &TrainedModel) -> Result<&Mwnet> {
    match &m.model {
        Model::Main(net) => Ok(net),
        _ => Err(Error::invalid("expected a main-branch checkpoint")),
    }
}

/// Audio-bearing examples for the second stage.
fn audio_examples(cfg: &ExperimentConfig, ds: &SyntheticDataset, m: &TrainedModel) -> Result<Vec<Example>> {
    let items: Vec<&Item> = ds
        .items
        .iter()
        .filter(|i| i.audio.is_some() && (!cfg.data.control_beat_locked_only || i.beat_locked))
        .collect();
    if items.is_empty() {
        return Err(Error::invalid("no audio-bearing items for the control stage"));
    }
    let width = items[0].audio.as_ref().map(AudioFeatures::channels).unwrap_or(0);
    if items.iter().any(|i| i.audio.as_ref().map(AudioFeatures::channels) != Some(width)) {
        return Err(Error::Format("audio channel counts differ across items".into()));
    }
    to_examples(&items, &m.meta.normalizer, m.meta.spec.context_width, m.meta.text_seed, true)
}

/// Control stage on a trained main branch.
pub fn train_control_on(
    cfg: &ExperimentConfig,
    ds: &SyntheticDataset,
    main: &TrainedModel,
    par: Parallelism,
) -> Result<TrainReport> {
    cfg.validate()?;
    let net = main_of(main)?;
    let examples = audio_examples(cfg, ds, main)?;
    let audio_width = examples[0].audio.as_ref().map(Tensor::cols).unwrap_or(0);
    let mut rng = SplitMix64::derive(cfg.seed, 2);
    let mut dual = DualBranchModel::new(net.clone(), audio_width, &mut rng);
    let sched = main.schedule()?;
    let losses = train_control_stage(&mut dual, &examples, &sched, &cfg.train_control, par)?;
    let meta = ModelMeta {
        kind: ModelKind::Dual,
        audio_width,
        ..main.meta.clone()
    };
    Ok(TrainReport {
        model: TrainedModel {
            meta,
            model: Model::Dual(dual),
            config_hash: cfg.hash(),
            seed: cfg.seed,
        },
        losses,
    })
}

/// Single-branch baseline: the main branch itself is finetuned with audio.
pub fn finetune_single_on(
    cfg: &ExperimentConfig,
    ds: &SyntheticDataset,
    main: &TrainedModel,
    par: Parallelism,
) -> Result<TrainReport> {
    cfg.validate()?;
    let net = main_of(main)?;
    let examples = audio_examples(cfg, ds, main)?;
    let audio_width = examples[0].audio.as_ref().map(Tensor::cols).unwrap_or(0);
    let mut rng = SplitMix64::derive(cfg.seed, 2);
    let mut single = SingleBranchModel::new(net.clone(), audio_width, &mut rng);
    let sched = main.schedule()?;
    let losses = finetune_single_branch(&mut single, &examples, &sched, &cfg.train_control, par)?;
    let meta = ModelMeta {
        kind: ModelKind::Single,
        audio_width,
        ..main.meta.clone()
    };
    Ok(TrainReport {
        model: TrainedModel {
            meta,
            model: Model::Single(single),
            config_hash: cfg.hash(),
            seed: cfg.seed,
        },
        losses,
    })
}

fn load_main(path: &Path) -> Result<TrainedModel> {
    if !path.exists() {
        return Err(Error::invalid(format!("main checkpoint {} does not exist", path.display())));
    }
    TrainedModel::load(path)
}

pub fn train_control(cfg: &ExperimentConfig, data: &Path, main_ckpt: &Path, out: &Path, par: Parallelism) -> Result<TrainReport> {
    let main = load_main(main_ckpt)?;
    let r = train_control_on(cfg, &SyntheticDataset::load(data)?, &main, par)?;
    r.model.save(out)?;
    write_loss_log(&loss_log_path(out), &r.losses)?;
    Ok(r)
}

pub fn finetune_single(cfg: &ExperimentConfig, data: &Path, main_ckpt: &Path, out: &Path, par: Parallelism) -> Result<TrainReport> {
    let main = load_main(main_ckpt)?;
    let r = finetune_single_on(cfg, &SyntheticDataset::load(data)?, &main, par)?;
    r.model.save(out)?;
    write_loss_log(&loss_log_path(out), &r.losses)?;
    Ok(r)
}

/// Arguments of [`sample_cmd`].
#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub text: String,
    pub audio: Option<PathBuf>,
    pub frames: usize,
    pub seed: u64,
    pub options: SampleOptions,
    pub out: PathBuf,
    /// Decoded joint positions as JSON.
    pub positions: Option<PathBuf>,
}

/// Samples one clip. Text only runs the text branch; audio routes a dual
/// checkpoint through both branches.
pub fn sample_cmd(ckpt: &Path, req: &SampleRequest, skeleton: &Skeleton) -> Result<MotionSeq> {
    if req.frames == 0 || req.frames > MAX_FRAMES {
        return Err(Error::invalid(format!("frames must lie in 1..={MAX_FRAMES}, got {}", req.frames)));
    }
    let model = TrainedModel::load(ckpt)?;
    let audio = req.audio.as_deref().map(load_audio).transpose()?;
    let m = model.sample_motion(&req.text, audio.as_ref(), req.frames, req.seed, &req.options)?;
    save_motion(&req.out, &m)?;
    if let Some(p) = &req.positions {
        let pos = decode(&m, skeleton)?;
        write_atomic(p, positions_json(&pos, &skeleton.parents).as_bytes())?;
    }
    Ok(m)
}

/// What [`evaluate_on`] scores.
pub enum Subject<'a> {
    /// The dataset clips themselves.
    GroundTruth,
    Model(&'a TrainedModel),
}

/// Generated clips, one per dataset item plus `samples_per_text` per
/// distinct text, in deterministic order.
struct Generated {
    per_item: Vec<MotionSeq>,
    per_text: Vec<Vec<MotionSeq>>,
}

fn generate(
    cfg: &ExperimentConfig,
    ds: &SyntheticDataset,
    model: &TrainedModel,
    par: Parallelism,
) -> Result<Generated> {
    let texts = ds.texts();
    let uses_audio = model.meta.kind != ModelKind::Main;
    let mut jobs: Vec<(String, Option<&AudioFeatures>, usize, u64)> = Vec::new();
    for (i, it) in ds.items.iter().enumerate() {
        let audio = if uses_audio { it.audio.as_ref() } else { None };
        jobs.push((it.text.clone(), audio, it.motion.frames(), SplitMix64::derive(cfg.eval.seed, i as u64).next()));
    }
    let frames = ds.items[0].motion.frames();
    for (ti, text) in texts.iter().enumerate() {
        for k in 0..cfg.eval.samples_per_text {
            let seed = SplitMix64::derive(cfg.eval.seed ^ 0x5eed, (ti * 1_000_003 + k) as u64).next();
            jobs.push((text.clone(), None, frames, seed));
        }
    }
    let opts = cfg.sampling;
    let out = par.map(jobs, |(text, audio, frames, seed)| model.sample_motion(&text, audio, frames, seed, &opts));
    let mut out = out.into_iter().collect::<Result<Vec<_>>>()?;
    let per_text_flat = out.split_off(ds.len());
    let per_text = per_text_flat
        .chunks(cfg.eval.samples_per_text.max(1))
        .map(<[MotionSeq]>::to_vec)
        .take(if cfg.eval.samples_per_text == 0 { 0 } else { texts.len() })
        .collect();
    Ok(Generated { per_item: out, per_text })
}

/// Full metric suite over `ds`. Metrics that cannot be computed from the
/// available samples are reported absent.
pub fn evaluate_on(cfg: &ExperimentConfig, ds: &SyntheticDataset, subject: Subject<'_>, par: Parallelism) -> Result<MetricsReport> {
    cfg.validate()?;
    let sk = skeleton_of(cfg)?;
    let e = &cfg.eval;
    let mut report = MetricsReport {
        config_hash: cfg.hash_hex(),
        ..MetricsReport::default()
    };
    let (generated, per_text) = match &subject {
        Subject::GroundTruth => {
            let by_text = ds
                .texts()
                .iter()
                .map(|t| ds.items.iter().filter(|i| &i.text == t).map(|i| i.motion.clone()).collect())
                .collect();
            (ds.items.iter().map(|i| i.motion.clone()).collect::<Vec<_>>(), by_text)
        }
        Subject::Model(m) => {
            let g = generate(cfg, ds, m, par)?;
            (g.per_item, g.per_text)
        }
    };
    report.echo("subject", if matches!(subject, Subject::GroundTruth) { "ground_truth" } else { "model" });
    report.echo("items", ds.len());
    report.echo("samples_per_text", e.samples_per_text);
    report.echo("retrieval_pool", e.retrieval_pool);
    report.echo("order", cfg.model.order.to_string());

    let kin = |ms: &[MotionSeq]| ms.iter().map(|m| kinetic_features(m, &sk)).collect::<Result<Vec<_>>>();
    let geo = |ms: &[MotionSeq]| ms.iter().map(|m| geometric_features(m, &sk)).collect::<Result<Vec<_>>>();
    let gt: Vec<MotionSeq> = ds.items.iter().map(|i| i.motion.clone()).collect();
    let (gt_k, gen_k) = (kin(&gt)?, kin(&generated)?);
    let (gt_g, gen_g) = (geo(&gt)?, geo(&generated)?);
    let mut rng = SplitMix64::derive(e.seed, 7);
    report.set("fid_k", frechet_distance_of(&gen_k, &gt_k));
    report.set("fid_g", frechet_distance_of(&gen_g, &gt_g));
    report.set("diversity_k", diversity(&gen_k, e.diversity_pairs, &mut rng));
    report.set("diversity_g", diversity(&gen_g, e.diversity_pairs, &mut rng));
    let groups = per_text.iter().map(|g| kin(g)).collect::<Result<Vec<_>>>()?;
    report.set("multimodality", multimodality(&groups, e.multimodality_pairs, &mut rng));

    let mut bas = Vec::new();
    for (it, m) in ds.items.iter().zip(&generated) {
        if let Some(a) = it.audio.as_ref().filter(|a| it.beat_locked && a.source == AudioSource::Music) {
            let beats = kinematic_beats(m, &sk, e.beat_window)?;
            bas.push(beat_align_score(&beats, &a.beats, e.beat_sigma)?);
        }
    }
    report.set(
        "bas",
        if bas.is_empty() {
            Err(Error::invalid("no beat-locked music items"))
        } else {
            Ok(bas.iter().sum::<f64>() / bas.len() as f64)
        },
    );

    let embedder = KineticPrototypeEmbedder::fit(ds, &sk)?;
    let text_emb: Vec<Vec<f64>> = ds.items.iter().map(|i| embedder.embed_text(&i.text)).collect::<Result<_>>()?;
    let motion_emb: Vec<Vec<f64>> = generated.iter().map(|m| embedder.embed_motion(m)).collect::<Result<_>>()?;
    let retrieval = r_precision_mm_dist(&text_emb, &motion_emb, e.retrieval_pool, &mut rng);
    for (key, pick) in [
        ("r_precision_top1", 0usize),
        ("r_precision_top2", 1),
        ("r_precision_top3", 2),
        ("mm_dist", 3),
    ] {
        let v = retrieval.as_ref().map(|r| [r.top1, r.top2, r.top3, r.mm_dist][pick]).map_err(|e| Error::invalid(e.to_string()));
        report.set(key, v);
    }
    Ok(report)
}

/// Evaluates `ckpt` (or the ground truth when `None`) and writes the
/// `key=value` report and its JSON twin.
pub fn evaluate_cmd(
    cfg: &ExperimentConfig,
    ckpt: Option<&Path>,
    data: &Path,
    out_kv: Option<&Path>,
    out_json: Option<&Path>,
    par: Parallelism,
) -> Result<MetricsReport> {
    let ds = SyntheticDataset::load(data)?;
    let model = ckpt.map(TrainedModel::load).transpose()?;
    let subject = match &model {
        Some(m) => Subject::Model(m),
        None => Subject::GroundTruth,
    };
    let report = evaluate_on(cfg, &ds, subject, par)?;
    if let Some(p) = out_kv {
        write_atomic(p, report.to_kv().as_bytes())?;
    }
    if let Some(p) = out_json {
        write_atomic(p, report.to_json().as_bytes())?;
    }
    Ok(report)
}

/// One ablation entry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationEntry {
    /// Text-stage training with a given block order.
    Order(String),
    /// Control stage on top of the configured main branch.
    Mcm,
    /// Single-branch finetune of the configured main branch.
    Finetune,
}

impl std::str::FromStr for AblationEntry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mcm" | "dual" => Ok(AblationEntry::Mcm),
            "finetune" | "single" => Ok(AblationEntry::Finetune),
            other => {
                other.parse::<BlockOrder>()?;
                Ok(AblationEntry::Order(other.to_string()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    /// Mean loss over the last tenth of training.
    pub final_loss: f64,
    /// Every loss finite.
    pub trainable: bool,
    /// Main-branch bytes unchanged by the stage; absent for order rows.
    pub freeze_intact: Option<bool>,
    pub metrics: BTreeMap<String, Option<f64>>,
}

fn tail_mean(losses: &[f64]) -> f64 {
    let k = (losses.len() / 10).max(1).min(losses.len());
    if k == 0 {
        return f64::NAN;
    }
    losses[losses.len() - k..].iter().sum::<f64>() / k as f64
}

/// Trains every entry under the same budget and reports losses plus
/// FID_k, diversity and BAS. Rows keep the order of `grid`.
pub fn ablation_on(cfg: &ExperimentConfig, ds: &SyntheticDataset, grid: &[AblationEntry], par: Parallelism) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    if grid.is_empty() {
        return Err(Error::invalid("empty ablation grid"));
    }
    let mut eval_cfg = cfg.clone();
    eval_cfg.eval.samples_per_text = 0;
    let pick = |r: &MetricsReport| -> BTreeMap<String, Option<f64>> {
        ["fid_k", "diversity_k", "bas"].iter().map(|k| (k.to_string(), r.get(k))).collect()
    };
    let needs_main = grid.iter().any(|g| !matches!(g, AblationEntry::Order(_)));
    let base = if needs_main { Some(train_main_on(cfg, ds, par)?) } else { None };
    let mut rows = Vec::with_capacity(grid.len());
    for entry in grid {
        let row = match entry {
            AblationEntry::Order(order) => {
                let mut c = cfg.clone();
                c.model = BlockSpec {
                    order: order.parse()?,
                    ..cfg.model.clone()
                };
                let r = train_main_on(&c, ds, par)?;
                let report = evaluate_on(&eval_cfg, ds, Subject::Model(&r.model), par)?;
                AblationRow {
                    label: order.clone(),
                    final_loss: tail_mean(&r.losses),
                    trainable: r.losses.iter().all(|l| l.is_finite()),
                    freeze_intact: None,
                    metrics: pick(&report),
                }
            }
            AblationEntry::Mcm | AblationEntry::Finetune => {
                let main = base.as_ref().expect("main trained");
                let before = params_to_bytes(&main_of(&main.model)?.params);
                let (label, r) = if *entry == AblationEntry::Mcm {
                    ("mcm", train_control_on(cfg, ds, &main.model, par)?)
                } else {
                    ("finetune", finetune_single_on(cfg, ds, &main.model, par)?)
                };
                let after = params_to_bytes(&r.model.text_branch().params);
                let report = evaluate_on(&eval_cfg, ds, Subject::Model(&r.model), par)?;
                AblationRow {
                    label: label.to_string(),
                    final_loss: tail_mean(&r.losses),
                    trainable: r.losses.iter().all(|l| l.is_finite()),
                    freeze_intact: Some(before == after),
                    metrics: pick(&report),
                }
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

/// Tab-separated table with a header row.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let keys: Vec<String> = rows.first().map(|r| r.metrics.keys().cloned().collect()).unwrap_or_default();
    let mut s = format!("label\tfinal_loss\ttrainable\tfreeze_intact\t{}\n", keys.join("\t"));
    for r in rows {
        let freeze = r.freeze_intact.map(|b| b.to_string()).unwrap_or_else(|| "-".into());
        let metrics: Vec<String> = keys
            .iter()
            .map(|k| r.metrics.get(k).copied().flatten().map(|v| format!("{v:.6}")).unwrap_or_else(|| "absent".into()))
            .collect();
        s.push_str(&format!("{}\t{:.6}\t{}\t{}\t{}\n", r.label, r.final_loss, r.trainable, freeze, metrics.join("\t")));
    }
    s
}

pub fn ablation_cmd(cfg: &ExperimentConfig, data: &Path, grid: &[AblationEntry], out: Option<&Path>, par: Parallelism) -> Result<Vec<AblationRow>> {
    let rows = ablation_on(cfg, &SyntheticDataset::load(data)?, grid, par)?;
    if let Some(p) = out {
        write_atomic(p, ablation_table(&rows).as_bytes())?;
    }
    Ok(rows)
}

/// Converts a motion file to feature CSV and/or joint-position JSON.
pub fn export_cmd(motion: &Path, skeleton: &Skeleton, csv: Option<&Path>, json: Option<&Path>) -> Result<()> {
    if csv.is_none() && json.is_none() {
        return Err(Error::invalid("export needs --csv and/or --json"));
    }
    let m = load_motion(motion)?;
    if let Some(p) = csv {
        write_atomic(p, features_csv(&m).as_bytes())?;
    }
    if let Some(p) = json {
        let pos = decode(&m, skeleton)?;
        write_atomic(p, positions_json(&pos, &skeleton.parents).as_bytes())?;
    }
    Ok(())
}
