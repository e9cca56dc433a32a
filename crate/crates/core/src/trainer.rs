//! Student optimization: batch assembly over prediction shards, copy strategies,
//! λ-weighted gold + distillation loss, backprop and the parameter update.
//!
//! Per-example gradients are computed in fixed-size chunks that may run on any
//! worker; chunk gradients are summed in chunk order, so results are identical
//! for every worker count.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{LanguageSampler, MaskedExample};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::loss::{
    add_cross_entropy_grad, gold_term, kd_term, l_all, normalize_topk, LambdaSchedule, LanguageLoss, LossBreakdown,
    NormalizedTeacherDist,
};
use crate::rng::{self, StreamRng};
use crate::student::{StudentConfig, StudentModel};
use crate::teacher::{best_copy_index, ShardMeta, ShardRecord};
use crate::vocab::TeacherId;

/// Entries per gradient chunk. Fixed so the reduction order never depends on
/// the number of workers.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopyStrategy {
    /// Every teacher's copy of a sampled example enters the batch.
    AllCopies,
    /// Only the copy whose teacher had the lowest loss on it.
    BestCopy,
    /// Only the copy of the lowest-id teacher.
    SingleTeacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    GoldOnly,
    GoldPlusTeacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub total_steps: u64,
    /// Raw examples drawn per step.
    pub batch_size: usize,
    pub top_k: usize,
    /// Language smoothing exponent; manifests set it from their `[sampling]` section.
    #[serde(skip)]
    pub alpha: f64,
    pub copy_strategy: CopyStrategy,
    pub label_mode: LabelMode,
    pub learning_rate: f64,
    pub seed: u64,
    pub lambda_schedule: LambdaSchedule,
    pub optimizer: OptimizerKind,
    /// Start a freshly shuffled pass when a language runs out of examples.
    pub reshuffle: bool,
    /// Write a checkpoint every this many steps; 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
    pub student: StudentConfig,
    #[serde(skip)]
    pub exec: ExecMode,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            batch_size: 32,
            top_k: 8,
            alpha: 0.7,
            copy_strategy: CopyStrategy::BestCopy,
            label_mode: LabelMode::GoldPlusTeacher,
            learning_rate: 0.2,
            seed: 0,
            lambda_schedule: LambdaSchedule::Linear,
            optimizer: OptimizerKind::Sgd,
            reshuffle: true,
            checkpoint_every: 0,
            student: StudentConfig::default(),
            exec: ExecMode::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::invalid("top_k must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid("alpha must be in (0, 1]"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and nonnegative"));
        }
        if self.student.dim == 0 {
            return Err(Error::invalid("student dim must be at least 1"));
        }
        if let LambdaSchedule::Constant(l) = self.lambda_schedule {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::invalid("constant lambda must be in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn lambda_for_step(&self, step: u64) -> Result<f64> {
        match self.label_mode {
            LabelMode::GoldOnly => Ok(0.0),
            LabelMode::GoldPlusTeacher => self.lambda_schedule.at(step, self.total_steps.max(1)),
        }
    }
}

/// One teacher's copy of a raw example, in student id space.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleCopy {
    pub teacher_id: TeacherId,
    pub teacher_loss: f32,
    pub example: MaskedExample,
    pub teacher: Vec<NormalizedTeacherDist>,
}

impl ExampleCopy {
    pub fn from_record(meta: &ShardMeta, record: &ShardRecord) -> Self {
        Self {
            teacher_id: meta.teacher_id,
            teacher_loss: record.teacher_loss,
            example: record.to_example(meta.teacher_id),
            teacher: record.predictions.iter().map(normalize_topk).collect(),
        }
    }
}

/// Identifies a consumed copy for auditing.
#[derive(Debug, Clone, PartialEq)]
pub struct CopyRef {
    pub language: String,
    pub example_id: u64,
    pub teacher_id: TeacherId,
    pub teacher_loss: f32,
}

#[derive(Debug, Clone, Default)]
struct LanguagePool {
    language: String,
    /// example id → copies sorted by teacher id
    examples: BTreeMap<u64, Vec<ExampleCopy>>,
}

/// All training copies, grouped by language and raw example.
#[derive(Debug, Clone, Default)]
pub struct TrainingPool {
    languages: Vec<LanguagePool>,
    vocab_checksum: Option<u64>,
}

impl TrainingPool {
    pub fn new(languages: &[String]) -> Self {
        Self {
            languages: languages
                .iter()
                .map(|l| LanguagePool {
                    language: l.clone(),
                    examples: BTreeMap::new(),
                })
                .collect(),
            vocab_checksum: None,
        }
    }

    pub fn languages(&self) -> Vec<&str> {
        self.languages.iter().map(|l| l.language.as_str()).collect()
    }

    pub fn vocab_checksum(&self) -> Option<u64> {
        self.vocab_checksum
    }

    pub fn example_count(&self, language: usize) -> usize {
        self.languages[language].examples.len()
    }

    pub fn copies(&self, language: usize, example_id: u64) -> Option<&[ExampleCopy]> {
        self.languages[language].examples.get(&example_id).map(Vec::as_slice)
    }

    pub fn add_shard(&mut self, meta: &ShardMeta, records: &[ShardRecord]) -> Result<()> {
        match self.vocab_checksum {
            Some(sum) if sum != meta.vocab_checksum => {
                return Err(Error::Checksum {
                    expected: sum,
                    found: meta.vocab_checksum,
                })
            }
            _ => self.vocab_checksum = Some(meta.vocab_checksum),
        }
        for rec in records {
            let lang = self
                .languages
                .iter_mut()
                .find(|l| l.language == rec.language)
                .ok_or_else(|| Error::invalid(format!("shard language {:?} is not in the manifest", rec.language)))?;
            let copies = lang.examples.entry(rec.example_id).or_default();
            if copies.iter().any(|c| c.teacher_id == meta.teacher_id) {
                return Err(Error::Format(format!(
                    "duplicate copy of example {} for teacher {} in language {}",
                    rec.example_id, meta.teacher_id, rec.language
                )));
            }
            let copy = ExampleCopy::from_record(meta, rec);
            let at = copies.partition_point(|c| c.teacher_id < meta.teacher_id);
            copies.insert(at, copy);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LanguageCursor {
    order: Vec<u64>,
    next: usize,
    pass: u64,
}

/// Mutable optimization state. Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub model: StudentModel,
    pub examples_seen: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    rng: StreamRng,
    cursors: Vec<LanguageCursor>,
    sampler: LanguageSampler,
    seed: u64,
}

fn shuffled_order(pool: &LanguagePool, seed: u64, pass: u64) -> Vec<u64> {
    let mut order: Vec<u64> = pool.examples.keys().copied().collect();
    order.shuffle(&mut rng::stream(seed, &[rng::str_coord(&pool.language), pass]));
    order
}

impl TrainState {
    /// `language_weights` are the smoothed sampling probabilities, one per pool language.
    pub fn new(
        cfg: &TrainingConfig,
        pool: &TrainingPool,
        model: StudentModel,
        language_weights: &[f64],
    ) -> Result<Self> {
        cfg.validate()?;
        if language_weights.len() != pool.languages.len() {
            return Err(Error::invalid("one sampling weight per language is required"));
        }
        let sampler = LanguageSampler::new(language_weights)?;
        let cursors = pool
            .languages
            .iter()
            .map(|l| LanguageCursor {
                order: shuffled_order(l, cfg.seed, 0),
                next: 0,
                pass: 0,
            })
            .collect();
        let n = model.params().len();
        Ok(Self {
            step: 0,
            model,
            examples_seen: 0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            rng: rng::stream(cfg.seed, &[rng::str_coord("batches")]),
            cursors,
            sampler,
            seed: cfg.seed,
        })
    }
}

/// A batch entry: one copy plus where it came from.
#[derive(Debug, Clone)]
pub struct BatchEntry<'a> {
    pub source: CopyRef,
    pub copy: &'a ExampleCopy,
}

/// Draw `batch_size` raw examples (language by smoothed sampling, then the next
/// example of that language's shuffled pass) and expand them by copy strategy.
pub fn assemble_batch<'a>(
    pool: &'a TrainingPool,
    cfg: &TrainingConfig,
    state: &mut TrainState,
) -> Result<Vec<BatchEntry<'a>>> {
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let li = state.sampler.sample(&mut state.rng);
        let lang = &pool.languages[li];
        let cursor = &mut state.cursors[li];
        if cursor.next >= cursor.order.len() {
            if !cfg.reshuffle || cursor.order.is_empty() {
                return Err(Error::invalid(format!(
                    "training data for language {} exhausted",
                    lang.language
                )));
            }
            cursor.pass += 1;
            cursor.order = shuffled_order(lang, state.seed, cursor.pass);
            cursor.next = 0;
        }
        let example_id = cursor.order[cursor.next];
        cursor.next += 1;
        let copies = &lang.examples[&example_id];
        let chosen: Vec<&ExampleCopy> = match cfg.copy_strategy {
            CopyStrategy::AllCopies => copies.iter().collect(),
            CopyStrategy::BestCopy => {
                let i = best_copy_index(copies.iter().map(|c| (c.teacher_id, c.teacher_loss as f64)))
                    .expect("pooled examples have at least one copy");
                vec![&copies[i]]
            }
            CopyStrategy::SingleTeacher => vec![&copies[0]],
        };
        batch.extend(chosen.into_iter().map(|copy| BatchEntry {
            source: CopyRef {
                language: lang.language.clone(),
                example_id,
                teacher_id: copy.teacher_id,
                teacher_loss: copy.teacher_loss,
            },
            copy,
        }));
    }
    Ok(batch)
}

struct EntryResult {
    gold_terms: Vec<f64>,
    kd_terms: Vec<f64>,
}

impl EntryResult {
    fn mean_gold(&self) -> f64 {
        self.gold_terms.iter().sum::<f64>() / self.gold_terms.len() as f64
    }

    fn mean_kd(&self) -> f64 {
        self.kd_terms.iter().sum::<f64>() / self.kd_terms.len().max(1) as f64
    }
}

/// Loss weights for one entry: the factor on its mean gold term and its mean KD term.
#[derive(Clone, Copy)]
struct EntryWeights {
    gold: f64,
    kd: f64,
}

fn entry_weights(batch: &[BatchEntry<'_>], lambda: f64, with_kd: bool) -> Vec<EntryWeights> {
    let mut per_lang: BTreeMap<&str, (usize, BTreeMap<TeacherId, usize>)> = BTreeMap::new();
    for e in batch {
        let g = per_lang.entry(&e.source.language).or_default();
        g.0 += 1;
        *g.1.entry(e.copy.teacher_id).or_default() += 1;
    }
    let n_langs = per_lang.len() as f64;
    batch
        .iter()
        .map(|e| {
            let (count, teachers) = &per_lang[e.source.language.as_str()];
            let gold = (1.0 - lambda) / (n_langs * *count as f64);
            let kd = if with_kd {
                lambda / (n_langs * teachers.len() as f64 * teachers[&e.copy.teacher_id] as f64)
            } else {
                0.0
            };
            EntryWeights { gold, kd }
        })
        .collect()
}

/// Loss terms and the summed parameter gradient of the weighted objective.
fn evaluate_entries(
    model: &StudentModel,
    batch: &[BatchEntry<'_>],
    weights: &[EntryWeights],
    with_kd: bool,
    mode: ExecMode,
) -> Result<(Vec<EntryResult>, Vec<f64>)> {
    let idx: Vec<usize> = (0..batch.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(GRAD_CHUNK).collect();
    let parts = exec::map_ordered(mode, &chunks, |_, chunk| -> Result<(Vec<EntryResult>, Vec<f64>)> {
        let mut grad = vec![0.0; model.params().len()];
        let mut results = Vec::with_capacity(chunk.len());
        for &i in chunk.iter() {
            let ex = &batch[i].copy.example;
            let w = weights[i];
            let fwd = model.forward_example(ex)?;
            let n = ex.n_masked() as f64;
            let mut gold_terms = Vec::with_capacity(ex.n_masked());
            let mut kd_terms = Vec::new();
            let mut dlogits = Vec::with_capacity(ex.n_masked());
            for (pi, row) in fwd.logits.iter().enumerate() {
                let gold = ex.gold_ids[pi];
                gold_terms.push(gold_term(row, gold)?);
                let mut d = vec![0.0; row.len()];
                add_cross_entropy_grad(row, &[(gold, 1.0)], w.gold / n, &mut d);
                if with_kd {
                    let t = &batch[i].copy.teacher[pi];
                    kd_terms.push(kd_term(row, t)?);
                    let target: Vec<(u32, f64)> = t.ids.iter().copied().zip(t.probs.iter().copied()).collect();
                    add_cross_entropy_grad(row, &target, w.kd / n, &mut d);
                }
                dlogits.push(d);
            }
            model.backward(&ex.input_ids, &ex.masked_positions, &fwd, &dlogits, &mut grad);
            results.push(EntryResult { gold_terms, kd_terms });
        }
        Ok((results, grad))
    });
    let mut all = Vec::with_capacity(batch.len());
    let mut total = vec![0.0; model.params().len()];
    for part in parts {
        let (results, grad) = part?;
        all.extend(results);
        for (t, g) in total.iter_mut().zip(&grad) {
            *t += g;
        }
    }
    Ok((all, total))
}

/// Per-example gold means and per-teacher KD means of one language.
type LanguageTerms = (Vec<f64>, BTreeMap<TeacherId, Vec<f64>>);

/// Batch losses and the parameter gradient of `l_all`, without updating anything.
pub fn loss_and_gradient(
    model: &StudentModel,
    batch: &[BatchEntry<'_>],
    lambda: f64,
    label_mode: LabelMode,
    mode: ExecMode,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let with_kd = label_mode == LabelMode::GoldPlusTeacher;
    if with_kd {
        if let Some(e) = batch.iter().find(|e| e.copy.teacher.len() != e.copy.example.n_masked()) {
            return Err(Error::invalid(format!(
                "example {} of {} lacks teacher distributions for gold_plus_teacher training",
                e.source.example_id, e.source.language
            )));
        }
    }
    let weights = entry_weights(batch, lambda, with_kd);
    let (results, grad) = evaluate_entries(model, batch, &weights, with_kd, mode)?;

    let mut groups: BTreeMap<&str, LanguageTerms> = BTreeMap::new();
    for (e, r) in batch.iter().zip(&results) {
        let g = groups.entry(&e.source.language).or_default();
        g.0.push(r.mean_gold());
        if with_kd {
            g.1.entry(e.copy.teacher_id).or_default().push(r.mean_kd());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let languages: Vec<LanguageLoss> = groups
        .iter()
        .map(|(lang, (gold, kd))| LanguageLoss {
            language: lang.to_string(),
            l_mlm: mean(gold),
            l_kd: kd.iter().map(|(t, v)| (*t, mean(v))).collect(),
        })
        .collect();
    let total = l_all(&languages, lambda)?;
    let mut per_teacher: BTreeMap<TeacherId, Vec<f64>> = BTreeMap::new();
    for l in &languages {
        for &(t, v) in &l.l_kd {
            per_teacher.entry(t).or_default().push(v);
        }
    }
    let breakdown = LossBreakdown {
        gold_terms: results.iter().flat_map(|r| r.gold_terms.iter().copied()).collect(),
        kd_terms: batch
            .iter()
            .zip(&results)
            .flat_map(|(e, r)| r.kd_terms.iter().map(move |&k| (e.copy.teacher_id, k)))
            .collect(),
        l_mlm: mean(&languages.iter().map(|l| l.l_mlm).collect::<Vec<_>>()),
        l_kd_per_teacher: per_teacher.into_iter().map(|(t, v)| (t, mean(&v))).collect(),
        l_kd: mean(&languages.iter().map(LanguageLoss::mean_kd).collect::<Vec<_>>()),
        l_all: total,
        lambda,
    };
    Ok((breakdown, grad))
}

/// One optimizer update on `batch` with λ taken from the schedule at the
/// current step.
pub fn train_step(state: &mut TrainState, batch: &[BatchEntry<'_>], cfg: &TrainingConfig) -> Result<LossBreakdown> {
    let lambda = cfg.lambda_for_step(state.step)?;
    let (breakdown, grad) = loss_and_gradient(&state.model, batch, lambda, cfg.label_mode, cfg.exec)?;
    if !breakdown.l_all.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            step: state.step,
            detail: format!(
                "l_all = {}, l_mlm = {}, l_kd = {}",
                breakdown.l_all, breakdown.l_mlm, breakdown.l_kd
            ),
        });
    }
    let lr = cfg.learning_rate;
    match cfg.optimizer {
        OptimizerKind::Sgd => {
            for (p, g) in state.model.params_mut().iter_mut().zip(&grad) {
                *p -= lr * g;
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let t = (state.step + 1) as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let params = state.model.params_mut();
            for i in 0..params.len() {
                let g = grad[i];
                state.first_moment[i] = beta1 * state.first_moment[i] + (1.0 - beta1) * g;
                state.second_moment[i] = beta2 * state.second_moment[i] + (1.0 - beta2) * g * g;
                let m = state.first_moment[i] / c1;
                let v = state.second_moment[i] / c2;
                params[i] -= lr * m / (v.sqrt() + eps);
            }
        }
    }
    if !state.model.is_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            detail: "parameters became non-finite after the update".into(),
        });
    }
    state.step += 1;
    state.examples_seen += batch.len() as u64;
    Ok(breakdown)
}

/// One line of the loss CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub lambda: f64,
    pub l_mlm: f64,
    pub l_kd: f64,
    pub l_all: f64,
    pub examples_seen: u64,
}

pub const LOSS_CSV_HEADER: &str = "step,lambda,l_mlm,l_kd,l_all,examples_seen";

impl LossRow {
    pub fn write_csv<W: Write>(rows: &[LossRow], mut w: W) -> std::io::Result<()> {
        writeln!(w, "{LOSS_CSV_HEADER}")?;
        for r in rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.step, r.lambda, r.l_mlm, r.l_kd, r.l_all, r.examples_seen
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub rows: Vec<LossRow>,
    /// Every copy that entered a batch, in consumption order.
    pub consumed: Vec<CopyRef>,
}

/// Run from `state.step` to `cfg.total_steps`. `on_step` sees the state after
/// each update together with that update's loss row.
pub fn train<F>(
    cfg: &TrainingConfig,
    pool: &TrainingPool,
    state: &mut TrainState,
    mut on_step: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&TrainState, &LossRow) -> Result<()>,
{
    let mut out = TrainOutcome::default();
    while state.step < cfg.total_steps {
        let batch = assemble_batch(pool, cfg, state)?;
        let step = state.step;
        let b = train_step(state, &batch, cfg)?;
        let row = LossRow {
            step,
            lambda: b.lambda,
            l_mlm: b.l_mlm,
            l_kd: b.l_kd,
            l_all: b.l_all,
            examples_seen: state.examples_seen,
        };
        out.consumed.extend(batch.into_iter().map(|e| e.source));
        on_step(state, &row)?;
        out.rows.push(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::student::init_params;
    use crate::teacher::TopKPrediction;

    fn record(lang: &str, id: u64, loss: f32, gold: u32) -> ShardRecord {
        ShardRecord {
            example_id: id,
            language: lang.into(),
            teacher_loss: loss,
            input_ids: vec![5, 4, 7, (id % 3) as u32 + 5],
            masked_positions: vec![1],
            gold_ids: vec![gold],
            predictions: vec![TopKPrediction {
                position: 1,
                ids: vec![gold, 8],
                logits: vec![1.0, 0.0],
            }],
        }
    }

    fn meta(t: u32) -> ShardMeta {
        ShardMeta {
            teacher_id: TeacherId(t),
            k: 2,
            vocab_checksum: 1,
        }
    }

    fn cfg() -> TrainingConfig {
        TrainingConfig {
            total_steps: 10,
            batch_size: 4,
            learning_rate: 0.5,
            student: StudentConfig { dim: 4, window: 1 },
            ..Default::default()
        }
    }

    fn two_teacher_pool() -> TrainingPool {
        let mut pool = TrainingPool::new(&["a".into(), "b".into()]);
        let a0: Vec<_> = (0..6).map(|i| record("a", i, 1.2, 6)).collect();
        let a1: Vec<_> = (0..6).map(|i| record("a", i, 0.9, 7)).collect();
        let b0: Vec<_> = (0..4).map(|i| record("b", i, 0.5, 9)).collect();
        pool.add_shard(&meta(0), &a0).unwrap();
        pool.add_shard(&meta(1), &a1).unwrap();
        pool.add_shard(&meta(0), &b0).unwrap();
        pool
    }

    fn model() -> StudentModel {
        init_params(10, StudentConfig { dim: 4, window: 1 }, 1).unwrap()
    }

    #[test]
    fn copy_strategies() {
        let pool = two_teacher_pool();
        let mut c = cfg();
        let mut st = TrainState::new(&c, &pool, model(), &[1.0, 0.0]).unwrap();

        c.copy_strategy = CopyStrategy::BestCopy;
        let b = assemble_batch(&pool, &c, &mut st).unwrap();
        assert_eq!(b.len(), 4);
        assert!(b
            .iter()
            .all(|e| e.source.teacher_id == TeacherId(1) && e.source.teacher_loss == 0.9));
        assert!(b.iter().all(|e| e.source.language == "a"));

        c.copy_strategy = CopyStrategy::AllCopies;
        let b = assemble_batch(&pool, &c, &mut st).unwrap();
        assert_eq!(b.len(), 8);

        c.copy_strategy = CopyStrategy::SingleTeacher;
        let b = assemble_batch(&pool, &c, &mut st).unwrap();
        assert_eq!(b.len(), 4);
        assert!(b.iter().all(|e| e.source.teacher_id == TeacherId(0)));
    }

    #[test]
    fn exhaustion_without_reshuffle() {
        let pool = two_teacher_pool();
        let mut c = cfg();
        c.reshuffle = false;
        let mut st = TrainState::new(&c, &pool, model(), &[0.0, 1.0]).unwrap();
        assemble_batch(&pool, &c, &mut st).unwrap();
        assert!(assemble_batch(&pool, &c, &mut st).is_err());

        c.reshuffle = true;
        let mut st = TrainState::new(&c, &pool, model(), &[0.0, 1.0]).unwrap();
        for _ in 0..5 {
            let b = assemble_batch(&pool, &c, &mut st).unwrap();
            let mut ids: Vec<u64> = b.iter().map(|e| e.source.example_id).collect();
            ids.sort();
            assert_eq!(ids, vec![0, 1, 2, 3], "each pass visits every example once");
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let pool = two_teacher_pool();
        let mut c = cfg();
        c.learning_rate = 0.0;
        let m = model();
        let mut st = TrainState::new(&c, &pool, m.clone(), &[0.5, 0.5]).unwrap();
        let b = assemble_batch(&pool, &c, &mut st).unwrap();
        train_step(&mut st, &b, &c).unwrap();
        assert_eq!(st.model, m);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn lambda_zero_matches_gold_only_update() {
        let pool = two_teacher_pool();
        let mut kd = cfg();
        kd.lambda_schedule = LambdaSchedule::Constant(0.0);
        let mut gold = cfg();
        gold.label_mode = LabelMode::GoldOnly;
        let mut s1 = TrainState::new(&kd, &pool, model(), &[0.5, 0.5]).unwrap();
        let mut s2 = TrainState::new(&gold, &pool, model(), &[0.5, 0.5]).unwrap();
        let b1 = assemble_batch(&pool, &kd, &mut s1).unwrap();
        let b2 = assemble_batch(&pool, &gold, &mut s2).unwrap();
        train_step(&mut s1, &b1, &kd).unwrap();
        train_step(&mut s2, &b2, &gold).unwrap();
        assert_eq!(s1.model, s2.model);
    }

    #[test]
    fn missing_teacher_data_is_rejected() {
        let pool = two_teacher_pool();
        let c = cfg();
        let mut st = TrainState::new(&c, &pool, model(), &[1.0, 0.0]).unwrap();
        let b = assemble_batch(&pool, &c, &mut st).unwrap();
        let mut stripped = b[0].copy.clone();
        stripped.teacher.clear();
        let entry = BatchEntry {
            source: b[0].source.clone(),
            copy: &stripped,
        };
        assert!(train_step(&mut st, &[entry.clone()], &c).is_err());
        let mut gold = c.clone();
        gold.label_mode = LabelMode::GoldOnly;
        assert!(train_step(&mut st, &[entry], &gold).is_ok());
    }

    #[test]
    fn overfits_one_batch() {
        let pool = two_teacher_pool();
        let mut c = cfg();
        c.label_mode = LabelMode::GoldOnly;
        let mut st = TrainState::new(&c, &pool, model(), &[0.5, 0.5]).unwrap();
        let b = assemble_batch(&pool, &c, &mut st).unwrap();
        let first = train_step(&mut st, &b, &c).unwrap().l_all;
        let mut last = first;
        for _ in 0..49 {
            last = train_step(&mut st, &b, &c).unwrap().l_all;
        }
        assert!(last < first * 0.5, "loss {first} -> {last}");
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let pool = two_teacher_pool();
        let mut c = cfg();
        c.batch_size = 16;
        c.copy_strategy = CopyStrategy::AllCopies;
        let run = |mode: ExecMode| {
            let mut cc = c.clone();
            cc.exec = mode;
            let mut st = TrainState::new(&cc, &pool, model(), &[0.6, 0.4]).unwrap();
            let out = train(&cc, &pool, &mut st, |_, _| Ok(())).unwrap();
            (st.model, out.rows)
        };
        assert_eq!(run(ExecMode::Sequential), run(ExecMode::Parallel));
    }

    #[test]
    fn loss_rows_track_lambda_and_l_all() {
        let pool = two_teacher_pool();
        let mut c = cfg();
        c.copy_strategy = CopyStrategy::AllCopies;
        let mut st = TrainState::new(&c, &pool, model(), &[0.5, 0.5]).unwrap();
        let out = train(&c, &pool, &mut st, |_, _| Ok(())).unwrap();
        assert_eq!(out.rows.len(), 10);
        for r in &out.rows {
            assert_eq!(r.lambda, crate::loss::lambda_at(r.step, 10).unwrap());
            let combined = r.lambda * r.l_kd + (1.0 - r.lambda) * r.l_mlm;
            assert!((combined - r.l_all).abs() < 1e-12);
        }
        let mut csv = Vec::new();
        LossRow::write_csv(&out.rows, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with(LOSS_CSV_HEADER));
        assert_eq!(text.lines().count(), 11);
    }

    #[test]
    fn pool_rejects_duplicates_and_unknown_languages() {
        let mut pool = TrainingPool::new(&["a".into()]);
        pool.add_shard(&meta(0), &[record("a", 0, 1.0, 6)]).unwrap();
        assert!(pool.add_shard(&meta(0), &[record("a", 0, 1.0, 6)]).is_err());
        assert!(pool.add_shard(&meta(1), &[record("zz", 0, 1.0, 6)]).is_err());
        let mut other = meta(1);
        other.vocab_checksum = 2;
        assert!(matches!(
            pool.add_shard(&other, &[record("a", 1, 1.0, 6)]),
            Err(Error::Checksum { .. })
        ));
    }
}
