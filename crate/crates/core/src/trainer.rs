//! Batching, the training loop and the ablation schedules.
//!
//! A schedule is a sequence of phases. Each phase runs `epochs` epochs with a
//! fresh optimizer state, using either one loss at the full dimension or the
//! nested composite over every configured dimension.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RelevanceRecord;
use crate::encoder::{features, EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::eval::{delta_report, format_delta, relative_delta, sequential_evaluate, EvalConfig, MetricsReport, DEFAULT_CORPUS_CAP, DEFAULT_KS};
use crate::losses::{
    mrl_compose, multitask_step_loss, LossOutput, LossWarning, MnrlHinge, MrlConfig, OnlineContrastive, PairBatch,
    TripletBatch, DEFAULT_MARGIN, DEFAULT_MARGIN_C,
};
use crate::nested::DimSet;
use crate::optim::{adamw_step, AdamWConfig, OptimizerState};

pub const DEFAULT_MAX_NEGATIVES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Ranking loss, then nested training on the ranking loss.
    MnrlNear2,
    /// Contrastive loss, then nested training on the contrastive loss.
    OclNear2,
    /// Both losses, then nested training on both.
    MnrlOclNear2,
    /// Nested training on both losses, then both losses at full dimension.
    MrlFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Mnrl,
    Ocl,
    Multitask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phase {
    pub name: &'static str,
    pub task: TaskKind,
    /// Compose over all configured dimensions rather than the full one only.
    pub nested: bool,
}

impl Schedule {
    pub const ALL: [Schedule; 4] = [
        Schedule::MnrlNear2,
        Schedule::OclNear2,
        Schedule::MnrlOclNear2,
        Schedule::MrlFirst,
    ];

    pub fn phases(self) -> [Phase; 2] {
        let p = |name, task, nested| Phase { name, task, nested };
        match self {
            Schedule::MnrlNear2 => [p("mnrl", TaskKind::Mnrl, false), p("near2", TaskKind::Mnrl, true)],
            Schedule::OclNear2 => [p("ocl", TaskKind::Ocl, false), p("near2", TaskKind::Ocl, true)],
            Schedule::MnrlOclNear2 => [
                p("mnrl+ocl", TaskKind::Multitask, false),
                p("near2", TaskKind::Multitask, true),
            ],
            Schedule::MrlFirst => [
                p("mrl", TaskKind::Multitask, true),
                p("mnrl+ocl", TaskKind::Multitask, false),
            ],
        }
    }

    /// Short name used on the command line.
    pub fn name(self) -> &'static str {
        match self {
            Schedule::MnrlNear2 => "mnrl-near2",
            Schedule::OclNear2 => "ocl-near2",
            Schedule::MnrlOclNear2 => "mnrl-ocl-near2",
            Schedule::MrlFirst => "mrl-first",
        }
    }

    /// Row label for comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Schedule::MnrlNear2 => "MNRL",
            Schedule::OclNear2 => "OCL",
            Schedule::MnrlOclNear2 => "MNRL + OCL",
            Schedule::MrlFirst => "MRL: MNRL + OCL",
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Schedule::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Schedule::ALL.iter().map(|x| x.name()).collect();
                Error::InvalidConfig(format!("unknown schedule {s:?}; expected one of {names:?}"))
            })
    }
}

fn default_max_negatives() -> usize {
    DEFAULT_MAX_NEGATIVES
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub margin_c: f64,
    pub lambda_ocl: f64,
    pub dims: DimSet,
    /// Per-dimension loss weights, aligned with `dims`; uniform when absent.
    #[serde(default)]
    pub dim_weights: Option<Vec<f64>>,
    pub seed: u64,
    pub schedule: Schedule,
    #[serde(default = "default_max_negatives")]
    pub max_negatives: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub eval_ks: Vec<usize>,
    pub corpus_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        TrainConfig {
            epochs: 2,
            batch_size: 32,
            learning_rate: adam.lr,
            margin: DEFAULT_MARGIN,
            margin_c: DEFAULT_MARGIN_C,
            lambda_ocl: 1.0,
            dims: EncoderConfig::default().dims,
            dim_weights: None,
            seed: 42,
            schedule: Schedule::MnrlOclNear2,
            max_negatives: DEFAULT_MAX_NEGATIVES,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            eval_ks: DEFAULT_KS.to_vec(),
            corpus_cap: DEFAULT_CORPUS_CAP,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn mrl_config(&self) -> Result<MrlConfig> {
        match &self.dim_weights {
            Some(w) => MrlConfig::new(self.dims.clone(), w.clone()),
            None => Ok(MrlConfig::uniform(self.dims.clone())),
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            ks: self.eval_ks.clone(),
            corpus_cap: self.corpus_cap,
            seed: self.seed,
            ..EvalConfig::new(self.dims.clone())
        }
    }

    pub fn validate(&self, model: &EncoderModel) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if self.max_negatives == 0 {
            return bad("max negatives must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate {} must be > 0", self.learning_rate));
        }
        if !(0.0..=2.0).contains(&self.margin) {
            return bad(format!("margin {} outside [0, 2]", self.margin));
        }
        if !(self.margin_c > 0.0 && self.margin_c < 2.0) {
            return bad(format!("contrastive margin {} outside (0, 2)", self.margin_c));
        }
        if !(self.lambda_ocl >= 0.0) {
            return bad(format!("lambda_ocl {} must be >= 0", self.lambda_ocl));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("invalid optimizer hyperparameters".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be >= 0".into());
        }
        if self.dims.full() != model.full_dim() || !self.dims.is_subset_of(model.dims()) {
            return bad(format!(
                "training dims {} must be a subset of model dims {} with the same maximum",
                self.dims,
                model.dims()
            ));
        }
        self.mrl_config()?;
        Ok(())
    }
}

/// Texts for one query's ranking triplets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletTexts {
    pub qid: String,
    pub query: String,
    /// `(title_id, title)`
    pub positives: Vec<(String, String)>,
    pub negatives: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairText {
    pub query: String,
    pub title_id: String,
    pub title: String,
    pub central: bool,
}

/// One optimizer step's worth of data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextBatch {
    pub triplets: Vec<TripletTexts>,
    pub pairs: Vec<PairText>,
}

pub fn build_batches(records: &[RelevanceRecord], batch_size: usize, seed: u64) -> Result<Vec<TextBatch>> {
    build_batches_with(records, batch_size, DEFAULT_MAX_NEGATIVES, seed)
}

/// Groups records by query, keeps queries with at least one positive
/// (grade > 3) and one negative (grade < 3), drops grade-3 rows, samples at
/// most `max_negatives` negatives per query, shuffles and chunks. Each batch
/// also carries the centrality-labeled rows of its queries.
pub fn build_batches_with(
    records: &[RelevanceRecord],
    batch_size: usize,
    max_negatives: usize,
    seed: u64,
) -> Result<Vec<TextBatch>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be >= 1".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&RelevanceRecord>> = BTreeMap::new();
    for r in records {
        if features(&r.query).is_empty() || features(&r.title).is_empty() {
            continue;
        }
        let g = groups.entry(r.qid.as_str()).or_default();
        if g.is_empty() {
            order.push(r.qid.as_str());
        }
        g.push(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut usable: Vec<(TripletTexts, Vec<PairText>)> = Vec::new();
    for qid in order {
        let rows = &groups[qid];
        let positives: Vec<(String, String)> = rows
            .iter()
            .filter(|r| r.is_positive())
            .map(|r| (r.title_id.clone(), r.title.clone()))
            .collect();
        let mut negatives: Vec<(String, String)> = rows
            .iter()
            .filter(|r| r.is_negative())
            .map(|r| (r.title_id.clone(), r.title.clone()))
            .collect();
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        if negatives.len() > max_negatives {
            negatives.shuffle(&mut rng);
            negatives.truncate(max_negatives);
        }
        let pairs = rows
            .iter()
            .filter(|r| r.is_positive() || r.is_negative())
            .filter_map(|r| {
                r.central.map(|c| PairText {
                    query: r.query.clone(),
                    title_id: r.title_id.clone(),
                    title: r.title.clone(),
                    central: c == 1,
                })
            })
            .collect();
        usable.push((
            TripletTexts {
                qid: qid.to_owned(),
                query: rows[0].query.clone(),
                positives,
                negatives,
            },
            pairs,
        ));
    }
    if usable.is_empty() {
        return Err(Error::NoUsableQueries(
            "no query has both a title graded above 3 and one graded below 3".into(),
        ));
    }
    usable.shuffle(&mut rng);
    let batches = usable
        .chunks(batch_size)
        .map(|chunk| TextBatch {
            triplets: chunk.iter().map(|(t, _)| t.clone()).collect(),
            pairs: chunk.iter().flat_map(|(_, p)| p.iter().cloned()).collect(),
        })
        .collect();
    Ok(batches)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: String,
    /// 1-based within the phase.
    pub epoch: usize,
    /// 1-based over the whole run.
    pub step: usize,
    pub loss: f64,
    pub per_dim: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<LossWarning>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub phase: String,
    pub epoch: usize,
    pub dim: usize,
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub mrr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum HistoryLine<'a> {
    Step(&'a StepRecord),
    Validation(&'a ValidationRecord),
}

impl TrainHistory {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty() && self.validations.is_empty()
    }

    /// Mean step loss of one epoch of one phase.
    pub fn epoch_mean_loss(&self, phase: &str, epoch: usize) -> Option<f64> {
        let losses: Vec<f64> = self
            .steps
            .iter()
            .filter(|s| s.phase == phase && s.epoch == epoch)
            .map(|s| s.loss)
            .collect();
        if losses.is_empty() {
            None
        } else {
            Some(losses.iter().sum::<f64>() / losses.len() as f64)
        }
    }

    /// JSON lines: every step, then every validation row, each tagged with
    /// `"type"`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut w, &HistoryLine::Step(s))?;
            writeln!(w)?;
        }
        for v in &self.validations {
            serde_json::to_writer(&mut w, &HistoryLine::Validation(v))?;
            writeln!(w)?;
        }
        Ok(())
    }
}

fn derive_seed(seed: u64, phase: usize, epoch: usize) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for x in [seed, phase as u64, epoch as u64] {
        for b in x.to_le_bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn texts_for(batch: &TextBatch, task: TaskKind) -> Vec<&str> {
    let mut texts = Vec::new();
    if task != TaskKind::Ocl {
        for t in &batch.triplets {
            texts.push(t.query.as_str());
            texts.extend(t.positives.iter().map(|p| p.1.as_str()));
            texts.extend(t.negatives.iter().map(|n| n.1.as_str()));
        }
    }
    if task != TaskKind::Mnrl {
        for p in &batch.pairs {
            texts.push(p.query.as_str());
            texts.push(p.title.as_str());
        }
    }
    texts
}

fn step_loss(
    batch: &TextBatch,
    embeddings: Vec<crate::nested::NestedEmbedding>,
    task: TaskKind,
    mrl: &MrlConfig,
    config: &TrainConfig,
) -> Result<Option<LossOutput>> {
    let mut it = embeddings.into_iter();
    let triplets = if task != TaskKind::Ocl {
        let mut q = Vec::new();
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for t in &batch.triplets {
            q.push(it.next().expect("layout"));
            pos.push(it.by_ref().take(t.positives.len()).collect());
            neg.push(it.by_ref().take(t.negatives.len()).collect());
        }
        Some(TripletBatch::new(q, pos, neg)?)
    } else {
        None
    };
    let pairs = if task != TaskKind::Mnrl {
        let mut left = Vec::new();
        let mut right = Vec::new();
        let mut labels = Vec::new();
        for p in &batch.pairs {
            left.push(it.next().expect("layout"));
            right.push(it.next().expect("layout"));
            labels.push(p.central);
        }
        if left.is_empty() {
            PairBatch::empty()
        } else {
            PairBatch::new(left, right, labels)?
        }
    } else {
        PairBatch::empty()
    };
    let out = match task {
        TaskKind::Mnrl => mrl_compose(&MnrlHinge { margin: config.margin }, triplets.as_ref().expect("built"), mrl)?,
        TaskKind::Ocl => {
            if pairs.is_empty() {
                return Ok(None);
            }
            mrl_compose(&OnlineContrastive { margin: config.margin_c }, &pairs, mrl)?
        }
        TaskKind::Multitask => multitask_step_loss(
            triplets.as_ref().expect("built"),
            &pairs,
            mrl,
            config.margin,
            config.margin_c,
            config.lambda_ocl,
        )?,
    };
    Ok(Some(out))
}

/// Runs every phase of `config.schedule` for `config.epochs` epochs each,
/// validating on `valid` after every epoch when given.
pub fn train(
    mut model: EncoderModel,
    train_records: &[RelevanceRecord],
    valid: Option<&[RelevanceRecord]>,
    config: &TrainConfig,
) -> Result<(EncoderModel, TrainHistory)> {
    config.validate(&model)?;
    let mut history = TrainHistory::default();
    if config.epochs == 0 {
        return Ok((model, history));
    }
    // Fail early on unusable data.
    build_batches_with(train_records, config.batch_size, config.max_negatives, config.seed)?;

    let nested = config.mrl_config()?;
    let plain = MrlConfig::uniform(DimSet::single(model.full_dim())?);
    let hyper = config.optimizer();
    let eval_cfg = config.eval_config();
    let mut global_step = 0;

    for (phase_idx, phase) in config.schedule.phases().iter().enumerate() {
        let mrl = if phase.nested { &nested } else { &plain };
        let mut state = OptimizerState::new(model.param_count());
        for epoch in 1..=config.epochs {
            let seed = derive_seed(config.seed, phase_idx, epoch);
            let batches = build_batches_with(train_records, config.batch_size, config.max_negatives, seed)?;
            for batch in &batches {
                let texts = texts_for(batch, phase.task);
                let encoded = model.encode_for_backward(&texts)?;
                let Some(out) = step_loss(batch, encoded.embeddings.clone(), phase.task, mrl, config)? else {
                    log::warn!("phase {} epoch {epoch}: batch without pairs skipped", phase.name);
                    continue;
                };
                if !out.value.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {} at phase {} epoch {epoch} step {}",
                        out.value,
                        phase.name,
                        global_step + 1
                    )));
                }
                let grads = model.backward_encoded(&encoded, &out.gradients)?;
                adamw_step(model.params_mut(), &grads.values, &mut state, &hyper)?;
                global_step += 1;
                history.steps.push(StepRecord {
                    phase: phase.name.to_owned(),
                    epoch,
                    step: global_step,
                    loss: out.value,
                    per_dim: out.per_dim,
                    warnings: out.warnings,
                });
            }
            if let Some(mean) = history.epoch_mean_loss(phase.name, epoch) {
                log::info!("phase {} epoch {epoch}: mean loss {mean:.6}", phase.name);
            }
            if let Some(valid) = valid {
                let report = sequential_evaluate(&model, valid, &eval_cfg)?;
                history.validations.extend(report.rows.into_iter().map(|r| ValidationRecord {
                    phase: phase.name.to_owned(),
                    epoch,
                    dim: r.dim,
                    k: r.k,
                    precision: r.precision,
                    recall: r.recall,
                    ndcg: r.ndcg,
                    mrr: r.mrr,
                }));
            }
        }
    }
    Ok((model, history))
}

/// Train/validation/test records for an ablation run.
#[derive(Clone, Copy, Debug)]
pub struct AblationData<'a> {
    pub train: &'a [RelevanceRecord],
    pub valid: Option<&'a [RelevanceRecord]>,
    pub test: &'a [RelevanceRecord],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub dim: usize,
    pub ndcg_at_5: f64,
    pub mrr_at_10: f64,
    pub delta_ndcg_at_5: Option<f64>,
    pub delta_mrr_at_10: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub schedule: Schedule,
    pub label: String,
    pub cells: Vec<AblationCell>,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline: MetricsReport,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// One row per schedule; for each dimension the NDCG@5 and MRR@10
    /// deltas against the untrained baseline.
    pub fn to_csv(&self) -> String {
        let dims: Vec<usize> = self
            .rows
            .first()
            .map(|r| r.cells.iter().map(|c| c.dim).collect())
            .unwrap_or_default();
        let mut out = String::from("schedule");
        for d in &dims {
            out.push_str(&format!(",ndcg@5_{d},mrr@10_{d}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.label);
            for c in &r.cells {
                out.push_str(&format!(",{},{}", format_delta(c.delta_ndcg_at_5), format_delta(c.delta_mrr_at_10)));
            }
            out.push('\n');
        }
        out
    }
}

/// Trains one model per schedule from the same initialization and compares
/// NDCG@5 and MRR@10 on the test split against the untrained model.
pub fn run_ablation(
    data: AblationData<'_>,
    model_config: &EncoderConfig,
    base_config: &TrainConfig,
    schedules: &[Schedule],
) -> Result<AblationReport> {
    let mut eval_cfg = base_config.eval_config();
    for k in [5, 10] {
        if !eval_cfg.ks.contains(&k) {
            eval_cfg.ks.push(k);
        }
    }
    eval_cfg.ks.sort_unstable();
    let untrained = EncoderModel::new(model_config)?;
    let baseline = sequential_evaluate(&untrained, data.test, &eval_cfg)?;
    let mut rows = Vec::with_capacity(schedules.len());
    for &schedule in schedules {
        let config = TrainConfig {
            schedule,
            ..base_config.clone()
        };
        let (model, _) = train(untrained.clone(), data.train, data.valid, &config)?;
        let report = sequential_evaluate(&model, data.test, &eval_cfg)?;
        delta_report(&report, &baseline)?;
        let cells = eval_cfg
            .dims
            .iter()
            .map(|m| {
                let r5 = report.get(m, 5).expect("k=5 evaluated");
                let r10 = report.get(m, 10).expect("k=10 evaluated");
                let b5 = baseline.get(m, 5).expect("k=5 evaluated");
                let b10 = baseline.get(m, 10).expect("k=10 evaluated");
                AblationCell {
                    dim: m,
                    ndcg_at_5: r5.ndcg,
                    mrr_at_10: r10.mrr,
                    delta_ndcg_at_5: relative_delta(r5.ndcg, b5.ndcg),
                    delta_mrr_at_10: relative_delta(r10.mrr, b10.mrr),
                }
            })
            .collect();
        rows.push(AblationRow {
            schedule,
            label: schedule.label().to_owned(),
            cells,
            report,
        });
    }
    Ok(AblationReport { baseline, rows })
}
