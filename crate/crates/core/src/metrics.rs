//! Evaluation: MLM top-1 accuracy, KL divergence to the teacher on held-out
//! masks, and relative deviation from teachers (RDT) over score tables.

use std::fmt;
use std::path::Path;

use serde::Deserialize;

use crate::corpus::MaskedExample;
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::loss::{log_softmax, NormalizedTeacherDist};
use crate::student::StudentModel;
use crate::teacher::{ShardMeta, ShardRecord};
use crate::trainer::ExampleCopy;

#[derive(Debug, Clone, PartialEq)]
pub struct RdtEntry {
    pub language: String,
    pub student_score: f64,
    /// `(teacher name, teacher score)`
    pub teachers: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdtInput {
    pub task: String,
    pub entries: Vec<RdtEntry>,
}

/// Mean relative deviation of the student from each teacher, in percent:
/// `100 / N · Σ (P_S − P_T) / P_T` over all N (language, teacher) pairs.
/// Positive means the student scores higher.
pub fn rdt(input: &RdtInput) -> Result<f64> {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for e in &input.entries {
        if e.teachers.is_empty() {
            return Err(Error::invalid(format!(
                "{}/{}: no teacher scores",
                input.task, e.language
            )));
        }
        for (name, t) in &e.teachers {
            if t.is_nan() || *t <= 0.0 {
                return Err(Error::invalid(format!(
                    "{}/{}: teacher {name} has nonpositive score {t}",
                    input.task, e.language
                )));
            }
            sum += (e.student_score - t) / t;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::invalid(format!("task {} has no score pairs", input.task)));
    }
    Ok(100.0 * sum / pairs as f64)
}

#[derive(Debug, Deserialize)]
struct ScoreRow {
    task: String,
    language: String,
    student_score: f64,
    teacher_id: String,
    teacher_score: f64,
}

/// Parse a CSV score table with header `task,language,student_score,teacher_id,teacher_score`.
/// Tasks and languages keep their first-seen order.
pub fn parse_score_table<R: std::io::Read>(reader: R) -> Result<Vec<RdtInput>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut tasks: Vec<RdtInput> = Vec::new();
    for (i, row) in rdr.deserialize::<ScoreRow>().enumerate() {
        let row = row.map_err(|e| Error::invalid(format!("score table row {}: {e}", i + 2)))?;
        let task = match tasks.iter_mut().position(|t| t.task == row.task) {
            Some(p) => &mut tasks[p],
            None => {
                tasks.push(RdtInput {
                    task: row.task.clone(),
                    entries: Vec::new(),
                });
                tasks.last_mut().unwrap()
            }
        };
        match task.entries.iter_mut().find(|e| e.language == row.language) {
            Some(e) if e.student_score != row.student_score => {
                return Err(Error::invalid(format!(
                    "score table row {}: conflicting student scores for {}/{}",
                    i + 2,
                    row.task,
                    row.language
                )))
            }
            Some(e) => e.teachers.push((row.teacher_id, row.teacher_score)),
            None => task.entries.push(RdtEntry {
                language: row.language,
                student_score: row.student_score,
                teachers: vec![(row.teacher_id, row.teacher_score)],
            }),
        }
    }
    Ok(tasks)
}

pub fn read_score_table(path: impl AsRef<Path>) -> Result<Vec<RdtInput>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_score_table(file)
}

pub fn rdt_report(tasks: &[RdtInput]) -> Result<Vec<(String, f64)>> {
    tasks.iter().map(|t| Ok((t.task.clone(), rdt(t)?))).collect()
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of masked positions whose highest student logit is the gold id.
/// Ties resolve to the lowest id.
pub fn mlm_accuracy(model: &StudentModel, examples: &[MaskedExample], mode: ExecMode) -> Result<f64> {
    let counts = exec::map_ordered(mode, examples, |_, ex| -> Result<(usize, usize)> {
        let fwd = model.forward_example(ex)?;
        let hits = fwd
            .logits
            .iter()
            .zip(&ex.gold_ids)
            .filter(|(row, &g)| argmax_lowest(row) == g as usize)
            .count();
        Ok((hits, ex.n_masked()))
    });
    let (mut hits, mut total) = (0usize, 0usize);
    for c in counts {
        let (h, t) = c?;
        hits += h;
        total += t;
    }
    if total == 0 {
        return Err(Error::invalid("accuracy over an empty evaluation set"));
    }
    Ok(hits as f64 / total as f64)
}

/// `Σ_j Q(j) · log(Q(j) / p(j))` over the teacher's support for one position.
pub fn kl_divergence(teacher: &NormalizedTeacherDist, student_logits: &[f64]) -> Result<f64> {
    let ls = log_softmax(student_logits);
    let mut kl = 0.0;
    for (&id, &q) in teacher.ids.iter().zip(&teacher.probs) {
        let lp = *ls.get(id as usize).ok_or(Error::IdOutOfRange {
            id,
            size: student_logits.len(),
        })?;
        if q > 0.0 {
            kl += q * (q.ln() - lp);
        }
    }
    Ok(kl)
}

/// Mean KL to the teacher over every masked position of `copies`.
pub fn mean_kl(model: &StudentModel, copies: &[ExampleCopy], mode: ExecMode) -> Result<f64> {
    let parts = exec::map_ordered(mode, copies, |_, c| -> Result<(f64, usize)> {
        if c.teacher.len() != c.example.n_masked() {
            return Err(Error::invalid(
                "copy has no teacher distribution for every masked position",
            ));
        }
        let fwd = model.forward_example(&c.example)?;
        let mut s = 0.0;
        for (row, t) in fwd.logits.iter().zip(&c.teacher) {
            s += kl_divergence(t, row)?;
        }
        Ok((s, c.teacher.len()))
    });
    let (mut sum, mut n) = (0.0, 0usize);
    for p in parts {
        let (s, c) = p?;
        sum += s;
        n += c;
    }
    if n == 0 {
        return Err(Error::invalid("KL over an empty evaluation set"));
    }
    Ok(sum / n as f64)
}

/// [`mean_kl`] over one shard, after checking it shares the model's vocabulary.
pub fn kl_to_teacher(model: &StudentModel, meta: &ShardMeta, records: &[ShardRecord], mode: ExecMode) -> Result<f64> {
    if meta.vocab_checksum != model.vocab_checksum {
        return Err(Error::Checksum {
            expected: model.vocab_checksum,
            found: meta.vocab_checksum,
        });
    }
    let copies: Vec<ExampleCopy> = records.iter().map(|r| ExampleCopy::from_record(meta, r)).collect();
    mean_kl(model, &copies, mode)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mlm_top1_accuracy: f64,
    pub mean_kl_to_teacher: f64,
    pub masked_positions: usize,
    /// `(task, RDT %)`
    pub rdt: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("mlm_top1_accuracy,{}\n", self.mlm_top1_accuracy));
        out.push_str(&format!("mean_kl_to_teacher,{}\n", self.mean_kl_to_teacher));
        out.push_str(&format!("masked_positions,{}\n", self.masked_positions));
        for (task, v) in &self.rdt {
            out.push_str(&format!("rdt:{task},{v}\n"));
        }
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "held-out masked positions : {}", self.masked_positions)?;
        writeln!(f, "MLM top-1 accuracy        : {:.4}", self.mlm_top1_accuracy)?;
        writeln!(f, "mean KL to teacher        : {:.4}", self.mean_kl_to_teacher)?;
        for (task, v) in &self.rdt {
            writeln!(f, "RDT {task:<22}: {v:+.1}%")?;
        }
        Ok(())
    }
}
