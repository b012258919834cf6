//! Weakly supervised optimisation: configuration, the stepwise learning-rate
//! schedule, single-image steps, the full loop with checkpoints and metrics,
//! and a finite-difference gradient checker.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{attribute_weights, build_vocabulary, AttributeTable, Scene};
use crate::error::{Error, Result};
use crate::eval;
use crate::graph::Graph;
use crate::model::{ArnModel, ModelConfig, TrainingQuery};
use crate::params::{Adam, AdamConfig, Gradients, ParamStore};
use crate::proposal_encoder::SceneGeometry;
use crate::query_encoder::Vocabulary;
use crate::reconstruction::{LossBreakdown, LossWeights};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ARNC";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Step of the five-point central-difference stencil.
pub const FD_STEP: f64 = 1e-5;
/// Magnitude below which gradient entries are compared absolutely.
pub const FD_FLOOR: f64 = 1e-4;

/// Flat training configuration, read from TOML with the same field names.
/// Loss weights left out of a file default according to `context_enabled`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub lr0: f64,
    pub decay_every: u64,
    pub decay_factor: f64,
    pub max_iters: u64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub subject_dim: usize,
    pub attention_hidden: usize,
    pub decoder_hidden: usize,
    pub context_enabled: bool,
    pub seed: u64,
    pub min_token_count: usize,
    pub use_attributes: bool,
    pub log_every: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub clip_norm: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::CONTEXT_ENABLED_DEFAULT;
        let adam = AdamConfig::default();
        Self {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            lambda: w.lambda,
            lr0: 4e-4,
            decay_every: 8000,
            decay_factor: 0.1,
            max_iters: 30_000,
            embed_dim: 512,
            hidden_dim: 512,
            subject_dim: 512,
            attention_hidden: 512,
            decoder_hidden: 512,
            context_enabled: true,
            seed: 0,
            min_token_count: 1,
            use_attributes: true,
            log_every: 100,
            eval_every: 1000,
            checkpoint_every: 0,
            clip_norm: None,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
        }
    }
}

impl TrainConfig {
    /// Default configuration with loss weights matching `context_enabled`.
    pub fn for_context(context_enabled: bool) -> Self {
        Self {
            context_enabled,
            ..Self::default()
        }
        .with_weights(LossWeights::for_context(context_enabled))
    }

    pub fn with_weights(mut self, w: LossWeights) -> Self {
        self.alpha = w.alpha;
        self.beta = w.beta;
        self.gamma = w.gamma;
        self.lambda = w.lambda;
        self
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            lambda: self.lambda,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let context = match table.get("context_enabled") {
            Some(toml::Value::Boolean(b)) => *b,
            Some(other) => {
                return Err(Error::Config(format!(
                    "context_enabled must be a boolean, got {other}"
                )))
            }
            None => true,
        };
        let w = LossWeights::for_context(context);
        for (key, value) in [
            ("alpha", w.alpha),
            ("beta", w.beta),
            ("gamma", w.gamma),
            ("lambda", w.lambda),
        ] {
            table.entry(key).or_insert(toml::Value::Float(value));
        }
        let config: Self = table
            .try_into()
            .map_err(|e| Error::Config(format!("{e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !self.weights().is_valid() {
            return bad("loss weights must be finite and non-negative");
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return bad("lr0 must be finite and non-negative");
        }
        if self.decay_every == 0 {
            return bad("decay_every must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay_factor must lie in (0, 1]");
        }
        let dims = [
            self.embed_dim,
            self.hidden_dim,
            self.subject_dim,
            self.attention_hidden,
            self.decoder_hidden,
        ];
        if dims.contains(&0) {
            return bad("layer sizes must be positive");
        }
        if self.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return bad("clip_norm must be positive when set");
        }
        Ok(())
    }

    pub fn model_config(
        &self,
        vocab_size: usize,
        visual_dim: usize,
        attribute_count: usize,
    ) -> ModelConfig {
        ModelConfig {
            vocab_size,
            visual_dim,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            subject_dim: self.subject_dim,
            attention_hidden: self.attention_hidden,
            decoder_hidden: self.decoder_hidden,
            attribute_count,
            context_enabled: self.context_enabled,
        }
    }
}

/// `lr0 · decay_factor^⌊iteration / decay_every⌋`.
pub fn lr_at(iteration: u64, config: &TrainConfig) -> f64 {
    let drops = (iteration / config.decay_every) as i32;
    config.lr0 * config.decay_factor.powi(drops)
}

/// A scene reduced to what training may see.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub image_id: String,
    pub geometry: SceneGeometry,
    pub queries: Vec<TrainingQuery>,
}

/// Converts a scene into training inputs. Only token strings and attribute
/// strings are consulted.
pub fn prepare_scene(
    scene: &Scene,
    vocab: &Vocabulary,
    attributes: Option<&AttributeTable>,
) -> Result<PreparedScene> {
    let geometry = SceneGeometry::new(&scene.proposals, scene.width, scene.height)?;
    let queries = scene
        .queries
        .iter()
        .map(|q| {
            let text = q.training_text();
            TrainingQuery {
                tokens: vocab.encode(text.tokens),
                attributes: attributes.and_then(|t| t.multi_hot(text.attributes)),
            }
        })
        .collect();
    Ok(PreparedScene {
        image_id: scene.image_id.clone(),
        geometry,
        queries,
    })
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: ArnModel,
    pub params: ParamStore,
    pub vocab: Vocabulary,
    pub attributes: Option<AttributeTable>,
    class_weights: Vec<f64>,
    adam: Adam,
    iteration: u64,
    skipped: u64,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        vocab: Vocabulary,
        attributes: Option<AttributeTable>,
        visual_dim: usize,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let attribute_count = attributes.as_ref().map_or(0, AttributeTable::len);
        let model = ArnModel::new(
            &mut params,
            config.model_config(vocab.len(), visual_dim, attribute_count),
            &mut rng,
        );
        let adam = Adam::new(&params, config.adam());
        let class_weights = attributes
            .as_ref()
            .map_or_else(Vec::new, AttributeTable::weights);
        Ok(Self {
            config,
            model,
            params,
            vocab,
            attributes,
            class_weights,
            adam,
            iteration: 0,
            skipped: 0,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Scenes passed over because they had no queries.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn class_weights(&self) -> &[f64] {
        &self.class_weights
    }

    pub fn prepare(&self, scene: &Scene) -> Result<PreparedScene> {
        prepare_scene(scene, &self.vocab, self.attributes.as_ref())
    }

    /// Loss of a scene at the current parameters, without updating them.
    pub fn loss(&self, scene: &PreparedScene) -> Result<LossBreakdown> {
        let mut g = Graph::new(&self.params);
        let vars = self.model.scene_loss_on(
            &mut g,
            &scene.geometry,
            &scene.queries,
            &self.class_weights,
            self.config.weights(),
            None,
        )?;
        Ok(vars.breakdown(&g, self.config.weights()))
    }

    /// One image, one Adam step at the scheduled rate. A scene without
    /// queries is skipped and counted, returning `None`.
    pub fn train_step(&mut self, scene: &PreparedScene) -> Result<Option<LossBreakdown>> {
        if scene.queries.is_empty() {
            self.skipped += 1;
            return Ok(None);
        }
        let weights = self.config.weights();
        let (breakdown, mut grads) = {
            let mut g = Graph::new(&self.params);
            let vars = self.model.scene_loss_on(
                &mut g,
                &scene.geometry,
                &scene.queries,
                &self.class_weights,
                weights,
                None,
            )?;
            let breakdown = vars.breakdown(&g, weights);
            if !g.scalar(vars.total).is_finite() {
                return Err(Error::NonFiniteLoss(self.iteration));
            }
            (breakdown, g.backward(vars.total))
        };
        if let Some(limit) = self.config.clip_norm {
            let norm = grads.global_norm();
            if norm > limit {
                grads.scale(limit / norm);
            }
        }
        let lr = lr_at(self.iteration, &self.config);
        self.adam.step(&mut self.params, &grads, lr);
        self.iteration += 1;
        Ok(Some(breakdown))
    }

    /// Snapshot of the current state; parameters are rounded to `f32`.
    pub fn checkpoint(&self, rng: &ChaCha8Rng) -> Checkpoint {
        let mut params = self.params.clone();
        params.quantize_f32();
        Checkpoint {
            iteration: self.iteration,
            train: self.config.clone(),
            model: self.model.config.clone(),
            vocab: self.vocab.words().to_vec(),
            attributes: self.attributes.clone(),
            rng: RngState::capture(rng),
            params,
        }
    }
}

/// Position of a `ChaCha8Rng` stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    train: TrainConfig,
    model: ModelConfig,
    vocab: Vec<String>,
    attributes: Option<AttributeTable>,
    rng: RngState,
}

/// Everything needed to resume training or to ground queries.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    pub attributes: Option<AttributeTable>,
    pub rng: RngState,
    pub params: ParamStore,
}

impl Checkpoint {
    /// Binary layout: magic, version (u32), iteration (u64), JSON metadata
    /// (u32 length + bytes), block count (u32), then per block its name
    /// (u32 length + bytes), rows and cols (u32) and row-major f32 values.
    /// All integers and floats are little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = CheckpointMeta {
            train: self.train.clone(),
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            attributes: self.attributes.clone(),
            rng: self.rng.clone(),
        };
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, name, value) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(value.cols() as u32).to_le_bytes());
            for &v in value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("missing ARNC header".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let iteration = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let blocks = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..blocks {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(4 * rows * cols)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            if params.id(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate block {name}")));
            }
            params.add(name, Tensor::new(rows, cols, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            iteration,
            train: meta.train,
            model: meta.model,
            vocab: meta.vocab,
            attributes: meta.attributes,
            rng: meta.rng,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.vocab.iter())
    }

    /// Rebuilds the network and binds the stored parameter values to it.
    pub fn restore(&self) -> Result<(ArnModel, ParamStore)> {
        let mut params = ParamStore::new();
        // initial values are discarded; only the layout matters
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = ArnModel::new(&mut params, self.model.clone(), &mut rng);
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter blocks, found {}",
                params.len(),
                self.params.len()
            )));
        }
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let name = params.name(id).to_string();
            let stored = self
                .params
                .id(&name)
                .map(|s| self.params.get(s))
                .ok_or_else(|| Error::Checkpoint(format!("missing block {name}")))?;
            let target = params.get_mut(id);
            if target.shape() != stored.shape() {
                return Err(Error::Checkpoint(format!(
                    "block {name} has shape {:?}, expected {:?}",
                    stored.shape(),
                    target.shape()
                )));
            }
            *target = stored.clone();
        }
        Ok((model, params))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// One line of the metrics log: component means over the logging window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: u64,
    pub avis: f64,
    pub alan: f64,
    pub adp: f64,
    pub lan: f64,
    pub att: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Default)]
struct Window {
    count: usize,
    avis: f64,
    alan: f64,
    adp: f64,
    lan: f64,
    att: f64,
    att_count: usize,
    total: f64,
}

impl Window {
    fn push(&mut self, b: &LossBreakdown) {
        self.count += 1;
        self.avis += b.avis;
        self.alan += b.alan;
        self.adp += b.adp;
        self.lan += b.lan;
        self.total += b.total;
        if let Some(a) = b.att {
            self.att += a;
            self.att_count += 1;
        }
    }

    fn record(&self, iteration: u64, lr: f64, val_accuracy: Option<f64>) -> MetricRecord {
        let n = self.count.max(1) as f64;
        MetricRecord {
            iteration,
            avis: self.avis / n,
            alan: self.alan / n,
            adp: self.adp / n,
            lan: self.lan / n,
            att: (self.att_count > 0).then(|| self.att / self.att_count as f64),
            total: self.total / n,
            lr,
            val_accuracy,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
    pub skipped: u64,
}

/// Trains on `train` for `config.max_iters` single-image steps, visiting
/// scenes in a seeded shuffled order per epoch. When `out` is given, writes
/// `vocab.txt`, `attributes.tsv` (if any), `metrics.jsonl`, periodic
/// `checkpoint_<iter>.arnc` files and the final `checkpoint.arnc`.
pub fn run_training(
    train: &[Scene],
    val: &[Scene],
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainingOutcome> {
    config.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::Config("no training scenes".into()))?;
    let visual_dim = first.proposals[0].subject_raw.len();
    let vocab = build_vocabulary(train, config.min_token_count);
    let attributes = if config.use_attributes {
        match attribute_weights(train) {
            Ok(t) => Some(t),
            Err(Error::EmptyAttributeSet) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let mut trainer = Trainer::new(config.clone(), vocab, attributes, visual_dim)?;
    let prepared = train
        .iter()
        .map(|s| trainer.prepare(s))
        .collect::<Result<Vec<_>>>()?;

    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            trainer.vocab.save(&dir.join("vocab.txt"))?;
            if let Some(t) = &trainer.attributes {
                t.save(&dir.join("attributes.tsv"))?;
            }
            Some(BufWriter::new(fs::File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };

    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut metrics = Vec::new();
    let mut window = Window::default();

    while trainer.iteration() < config.max_iters {
        if cursor == order.len() {
            order = (0..prepared.len()).collect();
            order.shuffle(&mut order_rng);
            cursor = 0;
        }
        let scene = &prepared[order[cursor]];
        cursor += 1;
        let lr = lr_at(trainer.iteration(), config);
        let Some(breakdown) = trainer.train_step(scene)? else {
            if trainer.skipped() as usize >= prepared.len() && window.count == 0 {
                return Err(Error::Config("no training scene has queries".into()));
            }
            continue;
        };
        window.push(&breakdown);
        let it = trainer.iteration();
        let eval_now = config.eval_every > 0 && it % config.eval_every == 0 && !val.is_empty();
        let log_now =
            (config.log_every > 0 && it % config.log_every == 0) || it == config.max_iters;
        if log_now || eval_now {
            let val_accuracy = if eval_now {
                let report =
                    eval::evaluate(val, &trainer.model, &trainer.params, &trainer.vocab, "val")?;
                Some(report.accuracy)
            } else {
                None
            };
            let record = window.record(it, lr, val_accuracy);
            log::info!(
                "iter {it}: total {:.4} lan {:.4} adp {:.4} lr {:.2e}{}",
                record.total,
                record.lan,
                record.adp,
                record.lr,
                val_accuracy.map_or(String::new(), |a| format!(" val {a:.4}"))
            );
            if let Some(w) = log.as_mut() {
                writeln!(
                    w,
                    "{}",
                    serde_json::to_string(&record).expect("record serializes")
                )?;
            }
            metrics.push(record);
            window = Window::default();
        }
        if let Some(dir) = out {
            if config.checkpoint_every > 0 && it % config.checkpoint_every == 0 {
                trainer
                    .checkpoint(&order_rng)
                    .save(&dir.join(format!("checkpoint_{it}.arnc")))?;
            }
        }
    }

    let checkpoint = trainer.checkpoint(&order_rng);
    if let Some(dir) = out {
        if let Some(w) = log.as_mut() {
            w.flush()?;
        }
        checkpoint.save(&dir.join("checkpoint.arnc"))?;
    }
    Ok(TrainingOutcome {
        checkpoint,
        metrics,
        skipped: trainer.skipped(),
    })
}

/// Largest relative discrepancy within one parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockError {
    pub name: String,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockError>,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.relative_error < self.tolerance)
    }

    pub fn failing(&self) -> Vec<&BlockError> {
        self.blocks
            .iter()
            .filter(|b| b.relative_error.is_nan() || b.relative_error >= self.tolerance)
            .collect()
    }

    pub fn worst(&self) -> Option<&BlockError> {
        self.blocks
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// Per block, the largest `|a − n| / max(|a|, |n|, FD_FLOOR)` over its entries.
pub fn compare_gradients(
    params: &ParamStore,
    analytic: &Gradients,
    numeric: &Gradients,
    tolerance: f64,
) -> GradientReport {
    let blocks = params
        .ids()
        .map(|id| {
            let a = analytic.get(id).data();
            let n = numeric.get(id).data();
            let relative_error = a
                .iter()
                .zip(n)
                .map(|(&a, &n)| {
                    let err = (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR);
                    if err.is_nan() {
                        f64::INFINITY
                    } else {
                        err
                    }
                })
                .fold(0.0, f64::max);
            BlockError {
                name: params.name(id).to_string(),
                relative_error,
            }
        })
        .collect();
    GradientReport { tolerance, blocks }
}

fn frozen_loss(
    model: &ArnModel,
    params: &ParamStore,
    scene: &PreparedScene,
    class_weights: &[f64],
    weights: LossWeights,
    frozen: &[Vec<Option<usize>>],
) -> Result<f64> {
    let mut g = Graph::new(params);
    let vars = model.scene_loss_on(
        &mut g,
        &scene.geometry,
        &scene.queries,
        class_weights,
        weights,
        Some(frozen),
    )?;
    Ok(g.scalar(vars.total))
}

/// Analytic gradients of the total loss and the context choices they were taken at.
pub fn analytic_gradients(
    model: &ArnModel,
    params: &ParamStore,
    scene: &PreparedScene,
    class_weights: &[f64],
    weights: LossWeights,
) -> Result<(Gradients, Vec<Vec<Option<usize>>>)> {
    let mut g = Graph::new(params);
    let vars = model.scene_loss_on(
        &mut g,
        &scene.geometry,
        &scene.queries,
        class_weights,
        weights,
        None,
    )?;
    if !g.scalar(vars.total).is_finite() {
        return Err(Error::NonFiniteLoss(0));
    }
    Ok((g.backward(vars.total), vars.context_choices))
}

/// Central differences of the total loss with context choices held at `frozen`.
pub fn numeric_gradients(
    model: &ArnModel,
    params: &ParamStore,
    scene: &PreparedScene,
    class_weights: &[f64],
    weights: LossWeights,
    frozen: &[Vec<Option<usize>>],
) -> Result<Gradients> {
    let mut grads = params.zero_gradients();
    let mut probe = params.clone();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for k in 0..params.get(id).len() {
            let original = params.get(id).data()[k];
            let mut at = |offset: f64| -> Result<f64> {
                probe.get_mut(id).data_mut()[k] = original + offset;
                let loss = frozen_loss(model, &probe, scene, class_weights, weights, frozen)?;
                if loss.is_finite() {
                    Ok(loss)
                } else {
                    Err(Error::NonFiniteLoss(0))
                }
            };
            let (p1, m1) = (at(FD_STEP)?, at(-FD_STEP)?);
            let (p2, m2) = (at(2.0 * FD_STEP)?, at(-2.0 * FD_STEP)?);
            probe.get_mut(id).data_mut()[k] = original;
            grads.get_mut(id).data_mut()[k] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * FD_STEP);
        }
    }
    Ok(grads)
}

/// Compares analytic and central-difference gradients of the total loss for
/// every parameter block.
pub fn gradient_check(
    model: &ArnModel,
    params: &ParamStore,
    scene: &PreparedScene,
    class_weights: &[f64],
    weights: LossWeights,
    tolerance: f64,
) -> Result<GradientReport> {
    let (analytic, frozen) = analytic_gradients(model, params, scene, class_weights, weights)?;
    let numeric = numeric_gradients(model, params, scene, class_weights, weights, &frozen)?;
    Ok(compare_gradients(params, &analytic, &numeric, tolerance))
}
