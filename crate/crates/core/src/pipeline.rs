//! Manifest-driven pipeline stages: merge vocabularies, prepare prediction
//! shards, train the student, evaluate it.
//!
//! Every stage loads and checks all of its inputs before it creates or replaces
//! any output, and every artifact is tied to the student vocabulary checksum.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! vocab/student.vocab           union vocabulary
//! vocab/<teacher>.map.tsv       teacher id → student id
//! shards/train/*.mdsh           top-k predictions, one shard set per (language, teacher)
//! shards/heldout/*.mdsh
//! train/loss.csv, train/ckpt-<step>.mdck, train/final.mdck
//! eval/metrics.csv, eval/metrics.txt
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{compute_sampling_weights, mask_example, LanguageCorpus, MaskingConfig, SamplingConfig};
use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::{self, MetricsReport};
use crate::rng;
use crate::student::{init_params, StudentModel};
use crate::teacher::{
    evaluate_with_loss, parse_shard_file_name, read_shard, shard_file_name, write_shard, ModelTeacher, ShardMeta,
    ShardRecord, TableTeacher, TeacherOracle, SHARD_EXTENSION,
};
use crate::trainer::{
    self, CopyRef, CopyStrategy, ExampleCopy, LabelMode, LossRow, TrainState, TrainingConfig, TrainingPool,
};
use crate::vocab::{
    build_union_vocab, load_vocab, map_example, map_predictions, tokenize, TeacherId, VocabMapping, Vocabulary,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSpec {
    /// A lookup table in the `mdtable` text format.
    Table { path: PathBuf },
    /// A student-format checkpoint over the teacher's own vocabulary.
    Model { checkpoint: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub name: String,
    pub vocab: PathBuf,
    pub oracle: OracleSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub tag: String,
    pub corpus: PathBuf,
    /// Teacher names trained on this language.
    pub teachers: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    /// Trailing fraction of each corpus kept out of training for evaluation.
    pub heldout_fraction: f64,
    pub records_per_shard: usize,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            heldout_fraction: 0.1,
            records_per_shard: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub alpha: f64,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            alpha: SamplingConfig::default().alpha,
        }
    }
}

/// The declarative description of a run. Relative paths resolve against the
/// directory holding the manifest file. `training.seed` is the run seed: it
/// drives masking, initialization, shuffling and language sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub masking: MaskingConfig,
    #[serde(default)]
    pub prepare: PrepareConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    pub teachers: Vec<TeacherSpec>,
    pub languages: Vec<LanguageSpec>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Scalar fields the command line may override.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub total_steps: Option<u64>,
    pub batch_size: Option<usize>,
    pub top_k: Option<usize>,
    pub learning_rate: Option<f64>,
    pub alpha: Option<f64>,
    pub label_mode: Option<LabelMode>,
    pub copy_strategy: Option<CopyStrategy>,
    pub sequential: bool,
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl Manifest {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut m: Manifest = toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.base_dir = base_dir.into();
        m.training.alpha = m.sampling.alpha;
        Ok(m)
    }

    /// Read, apply overrides, and validate.
    pub fn load(path: impl AsRef<Path>, overrides: &Overrides) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::Manifest(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut m = Self::parse(&text, base)?;
        m.apply(overrides);
        m.validate()?;
        Ok(m)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = o.seed {
            self.training.seed = v;
        }
        if let Some(v) = o.total_steps {
            self.training.total_steps = v;
        }
        if let Some(v) = o.batch_size {
            self.training.batch_size = v;
        }
        if let Some(v) = o.top_k {
            self.training.top_k = v;
        }
        if let Some(v) = o.learning_rate {
            self.training.learning_rate = v;
        }
        if let Some(v) = o.alpha {
            self.sampling.alpha = v;
        }
        if let Some(v) = o.label_mode {
            self.training.label_mode = v;
        }
        if let Some(v) = o.copy_strategy {
            self.training.copy_strategy = v;
        }
        if o.sequential {
            self.training.exec = exec::ExecMode::Sequential;
        }
        self.training.alpha = self.sampling.alpha;
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn out(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn sampling_config(&self) -> SamplingConfig {
        SamplingConfig {
            alpha: self.sampling.alpha,
            seed: self.training.seed,
        }
    }

    pub fn teacher_id(&self, name: &str) -> Option<TeacherId> {
        self.teachers
            .iter()
            .position(|t| t.name == name)
            .map(|i| TeacherId(i as u32))
    }

    /// Structural checks plus existence of every referenced input file.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Manifest(msg));
        if self.output_dir.as_os_str().is_empty() {
            return bad("output_dir is empty".into());
        }
        if self.teachers.is_empty() {
            return bad("at least one teacher is required".into());
        }
        if self.languages.is_empty() {
            return bad("at least one language is required".into());
        }
        self.sampling_config().validate()?;
        self.masking.validate()?;
        self.training.validate()?;
        if !(0.0..1.0).contains(&self.prepare.heldout_fraction) {
            return bad("prepare.heldout_fraction must be in [0, 1)".into());
        }
        if self.prepare.records_per_shard == 0 {
            return bad("prepare.records_per_shard must be at least 1".into());
        }

        let must_exist = |what: &str, p: &Path| -> Result<()> {
            let full = self.resolve(p);
            if full.is_file() {
                Ok(())
            } else {
                Err(Error::Manifest(format!("{what} {} does not exist", full.display())))
            }
        };
        let mut names = HashSet::new();
        for t in &self.teachers {
            if !valid_name(&t.name) {
                return bad(format!("teacher name {:?} must be non-empty [A-Za-z0-9_-]", t.name));
            }
            if !names.insert(t.name.as_str()) {
                return bad(format!("duplicate teacher {:?}", t.name));
            }
            must_exist(&format!("vocab of teacher {}", t.name), &t.vocab)?;
            match &t.oracle {
                OracleSpec::Table { path } => must_exist(&format!("table of teacher {}", t.name), path)?,
                OracleSpec::Model { checkpoint } => {
                    must_exist(&format!("checkpoint of teacher {}", t.name), checkpoint)?
                }
            }
        }
        let mut tags = HashSet::new();
        for l in &self.languages {
            if !valid_name(&l.tag) {
                return bad(format!("language tag {:?} must be non-empty [A-Za-z0-9_-]", l.tag));
            }
            if !tags.insert(l.tag.as_str()) {
                return bad(format!("duplicate language {:?}", l.tag));
            }
            must_exist(&format!("corpus of language {}", l.tag), &l.corpus)?;
            if l.teachers.is_empty() {
                return bad(format!("language {} has no teachers", l.tag));
            }
            let mut seen = HashSet::new();
            for t in &l.teachers {
                if !names.contains(t.as_str()) {
                    return bad(format!("language {} names unknown teacher {t:?}", l.tag));
                }
                if !seen.insert(t.as_str()) {
                    return bad(format!("language {} lists teacher {t:?} twice", l.tag));
                }
            }
        }
        Ok(())
    }

    pub fn student_vocab_path(&self) -> PathBuf {
        self.out().join("vocab").join("student.vocab")
    }

    pub fn mapping_path(&self, teacher: &str) -> PathBuf {
        self.out().join("vocab").join(format!("{teacher}.map.tsv"))
    }

    pub fn train_shard_dir(&self) -> PathBuf {
        self.out().join("shards").join("train")
    }

    pub fn heldout_shard_dir(&self) -> PathBuf {
        self.out().join("shards").join("heldout")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.out().join("train")
    }

    pub fn final_checkpoint_path(&self) -> PathBuf {
        self.train_dir().join("final.mdck")
    }

    pub fn loss_csv_path(&self) -> PathBuf {
        self.train_dir().join("loss.csv")
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.train_dir().join(format!("ckpt-{step:06}.mdck"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out().join("eval")
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Remove then recreate, so no stale files from an earlier run survive.
fn fresh_dir(p: &Path) -> Result<()> {
    if p.exists() {
        fs::remove_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    create_dir(p)
}

fn write_file(p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

fn load_teacher_vocabs(m: &Manifest) -> Result<Vec<Vocabulary>> {
    m.teachers.iter().map(|t| load_vocab(m.resolve(&t.vocab))).collect()
}

#[derive(Debug, Clone)]
pub struct MergeSummary {
    pub student_vocab: PathBuf,
    pub size: usize,
    pub checksum: u64,
}

pub fn cmd_merge_vocab(m: &Manifest) -> Result<MergeSummary> {
    let vocabs = load_teacher_vocabs(m)?;
    let refs: Vec<&Vocabulary> = vocabs.iter().collect();
    let (student, mappings) = build_union_vocab(&refs)?;
    create_dir(&m.out().join("vocab"))?;
    let path = m.student_vocab_path();
    student.write(&path)?;
    for (t, map) in m.teachers.iter().zip(&mappings) {
        map.write(m.mapping_path(&t.name))?;
    }
    Ok(MergeSummary {
        student_vocab: path,
        size: student.len(),
        checksum: student.checksum(),
    })
}

/// Everything a stage after merge-vocab needs about vocabularies, cross-checked
/// against the files merge-vocab wrote.
struct VocabState {
    teachers: Vec<Vocabulary>,
    student: Vocabulary,
    mappings: Vec<VocabMapping>,
}

fn load_vocab_state(m: &Manifest) -> Result<VocabState> {
    let teachers = load_teacher_vocabs(m)?;
    let refs: Vec<&Vocabulary> = teachers.iter().collect();
    let (expected, mappings) = build_union_vocab(&refs)?;
    let path = m.student_vocab_path();
    if !path.is_file() {
        return Err(Error::invalid(format!(
            "merged vocabulary {} is missing; run merge-vocab first",
            path.display()
        )));
    }
    let student = load_vocab(&path)?;
    if student.checksum() != expected.checksum() {
        return Err(Error::Checksum {
            expected: expected.checksum(),
            found: student.checksum(),
        });
    }
    for (i, (t, map)) in m.teachers.iter().zip(&mappings).enumerate() {
        let stored = VocabMapping::read(m.mapping_path(&t.name), TeacherId(i as u32))?;
        if stored.to_file_bytes() != map.to_file_bytes() {
            return Err(Error::Format(format!("mapping file for teacher {} is stale", t.name)));
        }
    }
    Ok(VocabState {
        teachers,
        student,
        mappings,
    })
}

fn load_oracle(m: &Manifest, idx: usize, vocab: Vocabulary) -> Result<Box<dyn TeacherOracle>> {
    let id = TeacherId(idx as u32);
    Ok(match &m.teachers[idx].oracle {
        OracleSpec::Table { path } => Box::new(TableTeacher::load(id, vocab, m.resolve(path))?),
        OracleSpec::Model { checkpoint } => {
            let model = StudentModel::load(m.resolve(checkpoint))?;
            Box::new(ModelTeacher::new(id, vocab, model)?)
        }
    })
}

/// Number of leading lines used for training; the rest are held out.
pub fn train_line_count(lines: usize, heldout_fraction: f64) -> usize {
    lines - (lines as f64 * heldout_fraction).floor() as usize
}

fn load_corpora(m: &Manifest) -> Result<Vec<LanguageCorpus>> {
    m.languages
        .iter()
        .map(|l| LanguageCorpus::load(&l.tag, m.resolve(&l.corpus)))
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct PrepareSummary {
    pub shard_files: Vec<PathBuf>,
    pub train_records: usize,
    pub heldout_records: usize,
    /// Lines with no usable tokens under some teacher, or containing a literal `[MASK]`.
    pub skipped_lines: usize,
}

/// Mask, evaluate and remap one line under one teacher. `None` when the line
/// has nothing to mask under this teacher.
#[allow(clippy::too_many_arguments)]
fn prepare_line(
    m: &Manifest,
    oracle: &dyn TeacherOracle,
    mapping: &VocabMapping,
    language: &str,
    line_idx: usize,
    line: &str,
    k: usize,
) -> Result<Option<ShardRecord>> {
    let vocab = oracle.vocab();
    let ids = tokenize(line, vocab);
    if ids.is_empty() || ids.contains(&vocab.special().mask) {
        return Ok(None);
    }
    let tid = oracle.teacher_id();
    let mut r = rng::stream(
        m.training.seed,
        &[rng::str_coord(language), tid.0 as u64, line_idx as u64],
    );
    let ex = mask_example(&ids, vocab, &m.masking, &mut r, language, tid)?;
    let (preds, loss) = evaluate_with_loss(oracle, &ex, k)?;
    let student_ex = map_example(&ex, mapping)?;
    let preds = map_predictions(&preds, mapping)?;
    Ok(Some(ShardRecord {
        example_id: line_idx as u64,
        language: language.to_string(),
        teacher_loss: loss as f32,
        input_ids: student_ex.input_ids,
        masked_positions: student_ex.masked_positions.iter().map(|&p| p as u32).collect(),
        gold_ids: student_ex.gold_ids,
        predictions: preds,
    }))
}

pub fn cmd_prepare(m: &Manifest) -> Result<PrepareSummary> {
    let vs = load_vocab_state(m)?;
    let oracles: Vec<Box<dyn TeacherOracle>> = vs
        .teachers
        .iter()
        .enumerate()
        .map(|(i, v)| load_oracle(m, i, v.clone()))
        .collect::<Result<_>>()?;
    let corpora = load_corpora(m)?;
    let checksum = vs.student.checksum();

    // (dir, file name, meta, records), written only once everything succeeded
    let mut pending: Vec<(PathBuf, String, ShardMeta, Vec<ShardRecord>)> = Vec::new();
    let mut summary = PrepareSummary::default();
    for (lang, corpus) in m.languages.iter().zip(&corpora) {
        let n_train = train_line_count(corpus.lines.len(), m.prepare.heldout_fraction);
        for name in &lang.teachers {
            let tid = m.teacher_id(name).expect("validated");
            let oracle = oracles[tid.0 as usize].as_ref();
            let mut k = m.training.top_k;
            if k > oracle.vocab().len() {
                log::warn!(
                    "top_k {k} exceeds the {}-token vocabulary of teacher {name}; clamping",
                    oracle.vocab().len()
                );
                k = oracle.vocab().len();
            }
            let meta = ShardMeta {
                teacher_id: tid,
                k: k as u32,
                vocab_checksum: checksum,
            };
            let mapping = &vs.mappings[tid.0 as usize];
            let results = exec::map_ordered(m.training.exec, &corpus.lines, |i, line| {
                prepare_line(m, oracle, mapping, &lang.tag, i, line, k)
            });
            let mut train = Vec::new();
            let mut heldout = Vec::new();
            for (i, r) in results.into_iter().enumerate() {
                match r? {
                    Some(rec) if i < n_train => train.push(rec),
                    Some(rec) => heldout.push(rec),
                    None => summary.skipped_lines += 1,
                }
            }
            summary.train_records += train.len();
            summary.heldout_records += heldout.len();
            for (dir, recs) in [(m.train_shard_dir(), train), (m.heldout_shard_dir(), heldout)] {
                for (idx, chunk) in recs.chunks(m.prepare.records_per_shard).enumerate() {
                    pending.push((dir.clone(), shard_file_name(&lang.tag, tid, idx), meta, chunk.to_vec()));
                }
            }
        }
    }
    if summary.skipped_lines > 0 {
        log::warn!(
            "{} (line, teacher) pairs had nothing to mask and were skipped",
            summary.skipped_lines
        );
    }

    fresh_dir(&m.train_shard_dir())?;
    fresh_dir(&m.heldout_shard_dir())?;
    for (dir, name, meta, recs) in pending {
        let path = dir.join(name);
        write_shard(&path, &meta, &recs)?;
        summary.shard_files.push(path);
    }
    Ok(summary)
}

/// Shard files in a directory, sorted by name.
pub fn list_shards(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let named = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(parse_shard_file_name);
        if path.extension().is_some_and(|e| e == SHARD_EXTENSION) && named.is_some() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn read_shard_dir(dir: &Path, checksum: u64) -> Result<Vec<(ShardMeta, Vec<ShardRecord>)>> {
    list_shards(dir)?
        .iter()
        .map(|p| read_shard(p, Some(checksum)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub rows: Vec<LossRow>,
    /// Every copy that entered a batch, in consumption order.
    pub consumed: Vec<CopyRef>,
    pub final_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
}

pub fn cmd_train(m: &Manifest) -> Result<TrainSummary> {
    let vs = load_vocab_state(m)?;
    let checksum = vs.student.checksum();
    let shards = read_shard_dir(&m.train_shard_dir(), checksum)?;
    if shards.is_empty() {
        return Err(Error::invalid(format!(
            "no training shards in {}; run prepare first",
            m.train_shard_dir().display()
        )));
    }
    let tags: Vec<String> = m.languages.iter().map(|l| l.tag.clone()).collect();
    let mut pool = TrainingPool::new(&tags);
    for (meta, recs) in &shards {
        pool.add_shard(meta, recs)?;
    }
    let corpora: Vec<LanguageCorpus> = load_corpora(m)?
        .into_iter()
        .map(|c| {
            let n = train_line_count(c.lines.len(), m.prepare.heldout_fraction);
            LanguageCorpus::from_lines(c.language, c.lines[..n].to_vec())
        })
        .collect();
    let weights = compute_sampling_weights(&corpora, &m.sampling_config())?;

    let cfg = &m.training;
    let mut model = init_params(vs.student.len(), cfg.student, cfg.seed)?;
    model.vocab_checksum = checksum;
    let mut state = TrainState::new(cfg, &pool, model, &weights)?;

    let dir = m.train_dir();
    fresh_dir(&dir)?;
    let outcome = trainer::train(cfg, &pool, &mut state, |st, row| {
        if cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0 {
            st.model.save(m.checkpoint_path(st.step))?;
        }
        if row.step % 100 == 0 {
            log::info!("step {} lambda {:.4} l_all {:.5}", row.step, row.lambda, row.l_all);
        }
        Ok(())
    })?;
    let mut csv = Vec::new();
    LossRow::write_csv(&outcome.rows, &mut csv)?;
    write_file(&m.loss_csv_path(), csv)?;
    state.model.save(m.final_checkpoint_path())?;
    Ok(TrainSummary {
        rows: outcome.rows,
        consumed: outcome.consumed,
        final_checkpoint: m.final_checkpoint_path(),
        loss_csv: m.loss_csv_path(),
    })
}

/// Held-out copies in student space, in shard-name order.
pub fn load_heldout(m: &Manifest, checksum: u64) -> Result<Vec<ExampleCopy>> {
    Ok(read_shard_dir(&m.heldout_shard_dir(), checksum)?
        .iter()
        .flat_map(|(meta, recs)| recs.iter().map(|r| ExampleCopy::from_record(meta, r)))
        .collect())
}

/// Accuracy and KL of `checkpoint` on the held-out shards, plus RDT when a score
/// table is given. Writes nothing.
pub fn evaluate_checkpoint(m: &Manifest, checkpoint: &Path, scores: Option<&Path>) -> Result<MetricsReport> {
    let vs = load_vocab_state(m)?;
    let checksum = vs.student.checksum();
    if !checkpoint.is_file() {
        return Err(Error::invalid(format!(
            "{} is missing; run train first",
            checkpoint.display()
        )));
    }
    let model = StudentModel::load(checkpoint)?;
    if model.vocab_checksum != checksum {
        return Err(Error::Checksum {
            expected: checksum,
            found: model.vocab_checksum,
        });
    }
    let copies = load_heldout(m, checksum)?;
    if copies.is_empty() {
        return Err(Error::invalid("the held-out set is empty"));
    }
    let rdt = match scores {
        Some(p) => metrics::rdt_report(&metrics::read_score_table(p)?)?,
        None => Vec::new(),
    };
    let examples: Vec<_> = copies.iter().map(|c| c.example.clone()).collect();
    Ok(MetricsReport {
        mlm_top1_accuracy: metrics::mlm_accuracy(&model, &examples, m.training.exec)?,
        mean_kl_to_teacher: metrics::mean_kl(&model, &copies, m.training.exec)?,
        masked_positions: examples.iter().map(|e| e.n_masked()).sum(),
        rdt,
    })
}

/// Evaluate the final checkpoint and write `eval/metrics.{csv,txt}`.
pub fn cmd_eval(m: &Manifest, scores: Option<&Path>) -> Result<MetricsReport> {
    let report = evaluate_checkpoint(m, &m.final_checkpoint_path(), scores)?;
    let dir = m.eval_dir();
    create_dir(&dir)?;
    write_file(&dir.join("metrics.csv"), report.to_csv())?;
    write_file(&dir.join("metrics.txt"), report.to_string())?;
    Ok(report)
}

/// RDT per task from a score table.
pub fn cmd_rdt(scores: &Path) -> Result<Vec<(String, f64)>> {
    metrics::rdt_report(&metrics::read_score_table(scores)?)
}
