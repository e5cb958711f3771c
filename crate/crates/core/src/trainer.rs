//! Training configuration, the optimisation step, and the end-to-end run.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, Variant};
use crate::checkpoint::{load_pretrained, Checkpoint};
use crate::config::KvFile;
use crate::data::{self, Batch, InputSize, SpectralTriplet, Split};
use crate::error::{Error, Result};
use crate::evaluator::{self, EmbeddingRecord, Metrics, RankingResult};
use crate::fce::MaskMode;
use crate::losses::{IcReduction, LossBreakdown, LossWeights};
use crate::mfmp::MaskLayout;
use crate::model::{Ablation, BatchInputs, FaceNet, ModelConfig};
use crate::nn::{ParamStore, Session};
use crate::optim::{Adam, AdamConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const LOSS_FILE: &str = "loss.csv";
pub const HISTORY_FILE: &str = "metrics_history.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const RANKING_FILE: &str = "ranking.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Identities per batch.
    pub p: usize,
    /// Images per identity.
    pub k: usize,
    /// 0 means one pass over the train split, `len / (p·k)` rounded up.
    pub steps_per_epoch: usize,
    pub margin: f64,
    pub backbone: Variant,
    pub plug_layer: usize,
    pub embedding_dim: usize,
    pub ablation: Ablation,
    pub mask_layout: MaskLayout,
    pub fce_mask_mode: MaskMode,
    pub ic_reduction: IcReduction,
    pub pseudo_label_bar: f64,
    pub loss_weights: LossWeights,
    pub adam: AdamConfig,
    pub seed: u64,
    pub image_height: u32,
    pub image_width: u32,
    pub flip_probability: f64,
    /// Evaluate after every `eval_every` epochs and after the last; 0 means
    /// only after the last.
    pub eval_every: usize,
    pub eval_batch_size: usize,
    pub pretrained_weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        TrainConfig {
            epochs: 120,
            lr: 3.5e-4,
            lr_decay_epochs: vec![40, 70],
            lr_decay_factor: 0.1,
            p: 8,
            k: 4,
            steps_per_epoch: 0,
            margin: crate::losses::DEFAULT_MARGIN,
            backbone: bb.variant,
            plug_layer: bb.plug_layer,
            embedding_dim: bb.embedding_dim,
            ablation: Ablation::FULL,
            mask_layout: MaskLayout::Channelwise,
            fce_mask_mode: MaskMode::Binary,
            ic_reduction: IcReduction::PerSample,
            pseudo_label_bar: crate::pseudo_label::DEFAULT_BAR,
            loss_weights: LossWeights::default(),
            adam: AdamConfig::default(),
            seed: 0,
            image_height: 256,
            image_width: 128,
            flip_probability: 0.5,
            eval_every: 10,
            eval_batch_size: 32,
            pretrained_weights: None,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "lr",
    "lr_decay_epochs",
    "lr_decay_factor",
    "identities_per_batch",
    "images_per_identity",
    "steps_per_epoch",
    "margin",
    "backbone",
    "plug_layer",
    "embedding_dim",
    "use_mfmp",
    "use_fmi",
    "use_fce",
    "use_ic",
    "mask_layout",
    "fce_mask_mode",
    "ic_reduction",
    "pseudo_label_bar",
    "weight_id",
    "weight_tri",
    "weight_flare",
    "weight_ic",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "weight_decay",
    "seed",
    "image_height",
    "image_width",
    "flip_probability",
    "eval_every",
    "eval_batch_size",
    "pretrained_weights",
];

impl TrainConfig {
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.reject_unknown(TRAIN_KEYS)?;
        let d = TrainConfig::default();
        let flag = |key: &str, default: bool| kv.get_bool(key).map(|v| v.unwrap_or(default));
        let c = TrainConfig {
            epochs: kv.get("epochs")?.unwrap_or(d.epochs),
            lr: kv.get("lr")?.unwrap_or(d.lr),
            lr_decay_epochs: kv.get_list("lr_decay_epochs")?.unwrap_or(d.lr_decay_epochs),
            lr_decay_factor: kv.get("lr_decay_factor")?.unwrap_or(d.lr_decay_factor),
            p: kv.get("identities_per_batch")?.unwrap_or(d.p),
            k: kv.get("images_per_identity")?.unwrap_or(d.k),
            steps_per_epoch: kv.get("steps_per_epoch")?.unwrap_or(d.steps_per_epoch),
            margin: kv.get("margin")?.unwrap_or(d.margin),
            backbone: kv.get("backbone")?.unwrap_or(d.backbone),
            plug_layer: kv.get("plug_layer")?.unwrap_or(d.plug_layer),
            embedding_dim: kv.get("embedding_dim")?.unwrap_or(d.embedding_dim),
            ablation: Ablation {
                use_mfmp: flag("use_mfmp", true)?,
                use_fmi: flag("use_fmi", true)?,
                use_fce: flag("use_fce", true)?,
                use_ic: flag("use_ic", true)?,
            },
            mask_layout: kv.get("mask_layout")?.unwrap_or(d.mask_layout),
            fce_mask_mode: kv.get("fce_mask_mode")?.unwrap_or(d.fce_mask_mode),
            ic_reduction: kv.get("ic_reduction")?.unwrap_or(d.ic_reduction),
            pseudo_label_bar: kv.get("pseudo_label_bar")?.unwrap_or(d.pseudo_label_bar),
            loss_weights: LossWeights {
                id: kv.get("weight_id")?.unwrap_or(1.0),
                tri: kv.get("weight_tri")?.unwrap_or(1.0),
                flare: kv.get("weight_flare")?.unwrap_or(1.0),
                ic: kv.get("weight_ic")?.unwrap_or(1.0),
            },
            adam: AdamConfig {
                beta1: kv.get("adam_beta1")?.unwrap_or(d.adam.beta1),
                beta2: kv.get("adam_beta2")?.unwrap_or(d.adam.beta2),
                eps: kv.get("adam_eps")?.unwrap_or(d.adam.eps),
                weight_decay: kv.get("weight_decay")?.unwrap_or(d.adam.weight_decay),
            },
            seed: kv.get("seed")?.unwrap_or(d.seed),
            image_height: kv.get("image_height")?.unwrap_or(d.image_height),
            image_width: kv.get("image_width")?.unwrap_or(d.image_width),
            flip_probability: kv.get("flip_probability")?.unwrap_or(d.flip_probability),
            eval_every: kv.get("eval_every")?.unwrap_or(d.eval_every),
            eval_batch_size: kv.get("eval_batch_size")?.unwrap_or(d.eval_batch_size),
            pretrained_weights: kv.raw("pretrained_weights").filter(|s| !s.is_empty()).map(PathBuf::from),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvFile::parse(text)?)
    }

    /// Text form accepted by [`TrainConfig::parse`]; stored in checkpoints.
    pub fn to_kv_string(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
        let mut lines = vec![
            format!("epochs = {}", self.epochs),
            format!("lr = {:?}", self.lr),
            format!("lr_decay_epochs = {}", list(&self.lr_decay_epochs)),
            format!("lr_decay_factor = {:?}", self.lr_decay_factor),
            format!("identities_per_batch = {}", self.p),
            format!("images_per_identity = {}", self.k),
            format!("steps_per_epoch = {}", self.steps_per_epoch),
            format!("margin = {:?}", self.margin),
            format!("backbone = {}", self.backbone.as_str()),
            format!("plug_layer = {}", self.plug_layer),
            format!("embedding_dim = {}", self.embedding_dim),
            format!("use_mfmp = {}", self.ablation.use_mfmp),
            format!("use_fmi = {}", self.ablation.use_fmi),
            format!("use_fce = {}", self.ablation.use_fce),
            format!("use_ic = {}", self.ablation.use_ic),
            format!("mask_layout = {}", self.mask_layout.as_str()),
            format!("fce_mask_mode = {}", self.fce_mask_mode.as_str()),
            format!("ic_reduction = {}", self.ic_reduction.as_str()),
            format!("pseudo_label_bar = {:?}", self.pseudo_label_bar),
            format!("weight_id = {:?}", self.loss_weights.id),
            format!("weight_tri = {:?}", self.loss_weights.tri),
            format!("weight_flare = {:?}", self.loss_weights.flare),
            format!("weight_ic = {:?}", self.loss_weights.ic),
            format!("adam_beta1 = {:?}", self.adam.beta1),
            format!("adam_beta2 = {:?}", self.adam.beta2),
            format!("adam_eps = {:?}", self.adam.eps),
            format!("weight_decay = {:?}", self.adam.weight_decay),
            format!("seed = {}", self.seed),
            format!("image_height = {}", self.image_height),
            format!("image_width = {}", self.image_width),
            format!("flip_probability = {:?}", self.flip_probability),
            format!("eval_every = {}", self.eval_every),
            format!("eval_batch_size = {}", self.eval_batch_size),
        ];
        if let Some(p) = &self.pretrained_weights {
            lines.push(format!("pretrained_weights = \"{}\"", p.display()));
        }
        lines.join("\n") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidValue(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return bad("lr_decay_factor must be positive".into());
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_decay_epochs must be strictly increasing".into());
        }
        if self.p < 2 || self.k < 2 {
            return bad("identities_per_batch and images_per_identity must be at least 2".into());
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad("margin must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.pseudo_label_bar) {
            return bad("pseudo_label_bar must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return bad("flip_probability must lie in [0, 1]".into());
        }
        let w = self.loss_weights;
        if [w.id, w.tri, w.flare, w.ic].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("loss weights must be non-negative".into());
        }
        let a = self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0 && a.weight_decay >= 0.0) {
            return bad("invalid Adam settings".into());
        }
        if self.image_height < 8 || self.image_width < 8 {
            return bad("image size must be at least 8x8".into());
        }
        if self.eval_batch_size == 0 {
            return bad("eval_batch_size must be positive".into());
        }
        if self.pretrained_weights.as_ref().is_some_and(|p| p.to_string_lossy().contains('"')) {
            return bad("pretrained_weights may not contain `\"`".into());
        }
        self.backbone_config().validate()?;
        self.ablation.validate()
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            variant: self.backbone,
            plug_layer: self.plug_layer,
            embedding_dim: self.embedding_dim,
        }
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone_config(),
            num_classes,
            mask_layout: self.mask_layout,
            ablation: self.ablation,
            fce_mask_mode: self.fce_mask_mode,
            ic_reduction: self.ic_reduction,
            margin: self.margin,
            loss_weights: self.loss_weights,
            pseudo_bar: self.pseudo_label_bar,
        }
    }

    pub fn input_size(&self) -> InputSize {
        InputSize {
            width: self.image_width,
            height: self.image_height,
        }
    }
}

/// Learning rate for a 1-based epoch: `lr · factor^n`, `n` the number of
/// decay epochs already reached.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let n = config.lr_decay_epochs.iter().filter(|&&d| epoch >= d).count() as i32;
    // dividing by 10 lands on 3.5e-5 exactly where multiplying by 0.1 does not
    let inv = 1.0 / config.lr_decay_factor;
    if inv.fract() == 0.0 && inv.is_finite() {
        config.lr / inv.powi(n)
    } else {
        config.lr * config.lr_decay_factor.powi(n)
    }
}

fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finaliser over the three inputs
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: FaceNet,
    pub store: ParamStore,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: usize,
    /// Identity of each class index.
    pub label_map: Vec<u32>,
}

impl TrainState {
    /// Fresh initialisation; classes are the train identities in ascending
    /// order.
    pub fn new(config: &TrainConfig, train: &[SpectralTriplet]) -> Result<Self> {
        config.validate()?;
        let mut ids: Vec<u32> = train.iter().map(|t| t.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            return Err(Error::Empty("train split"));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 1, 0));
        let model = FaceNet::new(&mut store, config.model_config(ids.len()), &mut rng)?;
        if let Some(path) = &config.pretrained_weights {
            load_pretrained(&mut store, path)?;
        }
        Ok(TrainState {
            config: config.clone(),
            model,
            store,
            adam: Adam::new(config.adam),
            epoch: 0,
            global_step: 0,
            label_map: ids,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let config = TrainConfig::parse(&ckpt.config_text)?;
        if ckpt.label_map.is_empty() {
            return Err(Error::Checkpoint("empty label map".into()));
        }
        let mut scratch = ParamStore::new();
        let model = FaceNet::new(
            &mut scratch,
            config.model_config(ckpt.label_map.len()),
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        for (name, t) in scratch.iter() {
            match ckpt.params.get(name) {
                Some(c) if c.shape() == t.shape() => {}
                Some(c) => {
                    return Err(Error::Checkpoint(format!(
                        "`{name}` has shape {:?}, model expects {:?}",
                        c.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
            }
        }
        if let Some(extra) = ckpt.params.names().find(|n| scratch.get(n).is_none()) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        let mut adam = ckpt.adam;
        adam.config = config.adam;
        Ok(TrainState {
            config,
            model,
            store: ckpt.params,
            adam,
            epoch: ckpt.epoch,
            global_step: ckpt.global_step,
            label_map: ckpt.label_map,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.store.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            global_step: self.global_step,
            label_map: self.label_map.clone(),
            config_text: self.config.to_kv_string(),
        }
    }

    pub fn class_labels(&self, batch: &Batch) -> Result<Vec<usize>> {
        batch
            .triplets
            .iter()
            .map(|t| {
                self.label_map.binary_search(&t.identity).map_err(|_| Error::Validation {
                    sample_id: t.sample_id.clone(),
                    detail: format!("identity {} is not a train class", t.identity),
                })
            })
            .collect()
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        match self.config.steps_per_epoch {
            0 => train_len.div_ceil(self.config.p * self.config.k).max(1),
            n => n,
        }
    }

    /// Batch and mirroring flags for the next step; a pure function of the
    /// seed and the step counter, so resumed runs draw the same batches.
    pub fn next_batch<'a>(&self, train: &'a [SpectralTriplet]) -> Result<(Batch<'a>, Vec<bool>)> {
        let step = self.global_step as u64;
        let batch = data::sample_pk_batch(train, self.config.p, self.config.k, mix(self.config.seed, 2, step))?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, 3, step));
        let flip = (0..batch.len()).map(|_| rng.gen_bool(self.config.flip_probability)).collect();
        Ok((batch, flip))
    }
}

/// One forward/backward pass and Adam update at the current epoch's rate.
pub fn train_step(state: &mut TrainState, batch: &Batch, flip: &[bool]) -> Result<LossBreakdown> {
    batch.validate()?;
    let labels = state.class_labels(batch)?;
    let inputs = BatchInputs::new(&batch.triplets, labels, flip, state.config.pseudo_label_bar)?;
    let mut s = Session::training(&state.store);
    let fwd = state.model.forward(&mut s, &inputs)?;
    let (loss, breakdown) = state.model.loss(&mut s, &fwd, &inputs)?;
    if !breakdown.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.global_step,
            batch: batch.describe(),
            breakdown: breakdown.to_string(),
        });
    }
    let grads = s.graph.backward(loss);
    let grads = s.param_grads(&grads);
    drop(s);
    let lr = lr_at(state.epoch + 1, &state.config);
    state.adam.step(&mut state.store, &grads, lr);
    state.global_step += 1;
    Ok(breakdown)
}

/// Embeddings of `triplets` as evaluator records.
pub fn embed_records(model: &FaceNet, store: &ParamStore, triplets: &[&SpectralTriplet], chunk: usize) -> Result<Vec<EmbeddingRecord>> {
    let vectors = model.embed(store, triplets, chunk)?;
    Ok(triplets
        .iter()
        .zip(vectors)
        .map(|(t, vector)| EmbeddingRecord {
            sample_id: t.sample_id.clone(),
            identity: t.identity,
            camera: t.camera,
            vector,
        })
        .collect())
}

pub fn evaluate_model(
    model: &FaceNet,
    store: &ParamStore,
    queries: &[&SpectralTriplet],
    gallery: &[&SpectralTriplet],
    chunk: usize,
) -> Result<(Metrics, Vec<RankingResult>)> {
    let g = embed_records(model, store, gallery, chunk)?;
    let by_id: BTreeMap<&str, &EmbeddingRecord> = g.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    // queries are gallery members, so reuse their embeddings where possible
    let mut q = Vec::with_capacity(queries.len());
    let missing: Vec<&SpectralTriplet> = queries.iter().copied().filter(|t| !by_id.contains_key(t.sample_id.as_str())).collect();
    let mut extra = embed_records(model, store, &missing, chunk)?.into_iter();
    for t in queries {
        let rec = match by_id.get(t.sample_id.as_str()) {
            Some(r) => EmbeddingRecord {
                identity: t.identity,
                camera: t.camera,
                ..(*r).clone()
            },
            None => extra.next().ok_or(Error::Empty("query embeddings"))?,
        };
        q.push(rec);
    }
    let rankings = evaluator::rank(&q, &g)?;
    Ok((evaluator::evaluate(&rankings)?, rankings))
}

/// Query and gallery sets of a loaded dataset. Without an evaluation split
/// the train split serves as both.
pub fn eval_sets(all: &[SpectralTriplet]) -> (Vec<&SpectralTriplet>, Vec<&SpectralTriplet>) {
    let pick = |s: Split| all.iter().filter(|t| t.split == s).collect::<Vec<_>>();
    let (q, g) = (pick(Split::Query), pick(Split::Gallery));
    if q.is_empty() || g.is_empty() {
        let t = pick(Split::Train);
        (t.clone(), t)
    } else {
        (q, g)
    }
}

#[derive(Clone, Debug)]
pub enum Progress<'a> {
    Step {
        epoch: usize,
        step: usize,
        loss: &'a LossBreakdown,
    },
    Eval {
        epoch: usize,
        metrics: &'a Metrics,
    },
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub state: TrainState,
    pub losses: Vec<LossBreakdown>,
    pub history: Vec<(usize, Metrics)>,
    pub final_metrics: Metrics,
    pub checkpoint: PathBuf,
}

/// Train on `dataset_root`, writing the checkpoint, loss log, metrics
/// history and final metrics into `out_dir`. With `resume`, training
/// continues from that checkpoint (its stored config wins).
pub fn run(
    config: &TrainConfig,
    dataset_root: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    progress: &mut dyn FnMut(Progress<'_>),
) -> Result<RunOutput> {
    let mut state = match resume {
        Some(p) => Some(TrainState::from_checkpoint(Checkpoint::load(p)?)?),
        None => None,
    };
    let cfg = state.as_ref().map_or(config, |s| &s.config).clone();
    let manifest = std::fs::read_to_string(dataset_root.join(data::MANIFEST_FILE))?;
    data::DatasetSplit::from_rows(&data::parse_manifest(&manifest)?)?;
    let all = data::load_dataset(dataset_root, cfg.input_size())?;
    let train: Vec<SpectralTriplet> = all.iter().filter(|t| t.split == Split::Train).cloned().collect();
    let mut state = match state.take() {
        Some(s) => s,
        None => TrainState::new(&cfg, &train)?,
    };
    std::fs::create_dir_all(out_dir)?;
    let loss_path = out_dir.join(LOSS_FILE);
    let fresh_log = state.global_step == 0 || !loss_path.exists();
    let mut loss_log = csv::Writer::from_writer(
        OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh_log)
            .truncate(fresh_log)
            .open(&loss_path)?,
    );
    if fresh_log {
        loss_log.write_record(LossBreakdown::CSV_HEADER)?;
    }
    let history_path = out_dir.join(HISTORY_FILE);
    let mut history_log = csv::Writer::from_writer(
        OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh_log)
            .truncate(fresh_log)
            .open(&history_path)?,
    );
    if fresh_log {
        history_log.write_record(["epoch", "mAP", "R1", "R5", "R10"])?;
    }
    let (queries, gallery) = eval_sets(&all);
    let steps = state.steps_per_epoch(train.len());
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let mut losses = Vec::new();
    let mut history = Vec::new();
    let mut last = None;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        for _ in 0..steps {
            let (batch, flip) = state.next_batch(&train)?;
            let b = train_step(&mut state, &batch, &flip)?;
            let step = state.global_step;
            loss_log.write_record([
                step.to_string(),
                b.l_id.to_string(),
                b.l_tri.to_string(),
                b.l_f.to_string(),
                b.l_ic.to_string(),
                b.l_all.to_string(),
            ])?;
            progress(Progress::Step { epoch, step, loss: &b });
            losses.push(b);
        }
        loss_log.flush()?;
        state.epoch = epoch;
        state.checkpoint().save(&ckpt_path)?;
        let due = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        if due {
            let (m, rankings) = evaluate_model(&state.model, &state.store, &queries, &gallery, cfg.eval_batch_size)?;
            history_log.write_record([
                epoch.to_string(),
                m.map.to_string(),
                m.r1.to_string(),
                m.r5.to_string(),
                m.r10.to_string(),
            ])?;
            history_log.flush()?;
            progress(Progress::Eval { epoch, metrics: &m });
            history.push((epoch, m.clone()));
            last = Some((m, rankings));
        }
    }
    let (final_metrics, rankings) = match last {
        Some(l) => l,
        None => evaluate_model(&state.model, &state.store, &queries, &gallery, cfg.eval_batch_size)?,
    };
    evaluator::write_metrics_json(&out_dir.join(METRICS_FILE), &final_metrics)?;
    evaluator::write_ranking_csv(&out_dir.join(RANKING_FILE), &rankings)?;
    Ok(RunOutput {
        state,
        losses,
        history,
        final_metrics,
        checkpoint: ckpt_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule() {
        let c = TrainConfig::default();
        for (e, want) in [(1, 3.5e-4), (39, 3.5e-4), (40, 3.5e-5), (69, 3.5e-5), (70, 3.5e-6), (120, 3.5e-6)] {
            assert_eq!(lr_at(e, &c), want, "epoch {e}");
        }
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = TrainConfig::default();
        c.ablation.use_ic = false;
        c.lr_decay_epochs = vec![5];
        c.fce_mask_mode = MaskMode::Soft;
        c.pretrained_weights = Some("w.safetensors".into());
        assert_eq!(TrainConfig::parse(&c.to_kv_string()).unwrap(), c);
        assert_eq!(TrainConfig::parse("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn config_rejects_bad_values() {
        for text in [
            "epochs = 0",
            "lr = -1",
            "lr_decay_epochs = 70, 40",
            "identities_per_batch = 1",
            "use_mfmp = false\nuse_fce = true",
            "plug_layer = 5",
            "backbone = vgg",
            "flip_probability = 2",
            "learning_rate = 0.1",
        ] {
            assert!(TrainConfig::parse(text).is_err(), "{text}");
        }
    }
}
