//! Teacher oracles, offline top-k evaluation, per-copy teacher loss, best-copy
//! selection and the binary prediction shard.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::MaskedExample;
use crate::error::{Error, Result};
use crate::loss::log_softmax;
use crate::student::StudentModel;
use crate::vocab::{TeacherId, Vocabulary};

/// Anything that maps a masked input to full logit vectors over its own vocabulary.
pub trait TeacherOracle: Send + Sync {
    fn teacher_id(&self) -> TeacherId;

    fn vocab(&self) -> &Vocabulary;

    /// One logit vector of length `vocab().len()` per entry of `positions`.
    fn predict(&self, input_ids: &[u32], positions: &[usize]) -> Result<Vec<Vec<f32>>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopKPrediction {
    pub position: usize,
    /// Distinct ids, ordered by descending logit then ascending id.
    pub ids: Vec<u32>,
    pub logits: Vec<f32>,
}

impl TopKPrediction {
    pub fn k(&self) -> usize {
        self.ids.len()
    }
}

fn rank_order(logits: &[f32]) -> impl Fn(&u32, &u32) -> Ordering + '_ {
    move |&a, &b| logits[b as usize].total_cmp(&logits[a as usize]).then(a.cmp(&b))
}

/// The `k` highest logits, ties broken toward the lower id.
pub fn top_k(logits: &[f32], k: usize) -> (Vec<u32>, Vec<f32>) {
    let k = k.min(logits.len());
    if k == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut ids: Vec<u32> = (0..logits.len() as u32).collect();
    let order = rank_order(logits);
    if k < ids.len() {
        ids.select_nth_unstable_by(k - 1, &order);
        ids.truncate(k);
    }
    ids.sort_unstable_by(&order);
    let vals = ids.iter().map(|&i| logits[i as usize]).collect();
    (ids, vals)
}

fn check_example(t: &dyn TeacherOracle, ex: &MaskedExample) -> Result<()> {
    if ex.teacher_id != t.teacher_id() {
        return Err(Error::TeacherMismatch {
            example: ex.teacher_id.0,
            given: t.teacher_id().0,
        });
    }
    if let Some(&p) = ex.masked_positions.iter().find(|&&p| p >= ex.input_ids.len()) {
        return Err(Error::invalid(format!("masked position {p} out of range")));
    }
    Ok(())
}

fn predict_checked(t: &dyn TeacherOracle, ex: &MaskedExample) -> Result<Vec<Vec<f32>>> {
    check_example(t, ex)?;
    let rows = t.predict(&ex.input_ids, &ex.masked_positions)?;
    let v = t.vocab().len();
    if rows.len() != ex.masked_positions.len() || rows.iter().any(|r| r.len() != v) {
        return Err(Error::invalid(format!(
            "teacher {} returned logits of the wrong shape",
            t.teacher_id()
        )));
    }
    Ok(rows)
}

/// Top-k `(id, logit)` pairs per masked position. `k` is clamped to the teacher
/// vocabulary size.
pub fn evaluate_masked(t: &dyn TeacherOracle, ex: &MaskedExample, k: usize) -> Result<Vec<TopKPrediction>> {
    if k == 0 {
        return Err(Error::invalid("top-k requires k >= 1"));
    }
    let rows = predict_checked(t, ex)?;
    Ok(ex
        .masked_positions
        .iter()
        .zip(&rows)
        .map(|(&position, row)| {
            let (ids, logits) = top_k(row, k);
            TopKPrediction { position, ids, logits }
        })
        .collect())
}

/// Mean over masked positions of `−log softmax(teacher logits)[gold]`, with the
/// softmax taken over the full teacher vocabulary.
pub fn teacher_example_loss(t: &dyn TeacherOracle, ex: &MaskedExample) -> Result<f64> {
    let rows = predict_checked(t, ex)?;
    teacher_loss_from_logits(&rows, &ex.gold_ids, t.vocab().len())
}

fn teacher_loss_from_logits(rows: &[Vec<f32>], gold: &[u32], v: usize) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::invalid("example has no masked positions"));
    }
    let mut sum = 0.0;
    for (row, &g) in rows.iter().zip(gold) {
        if g as usize >= v {
            return Err(Error::IdOutOfRange { id: g, size: v });
        }
        let z: Vec<f64> = row.iter().map(|&x| x as f64).collect();
        sum -= log_softmax(&z)[g as usize];
    }
    Ok(sum / rows.len() as f64)
}

/// Top-k predictions and teacher loss from a single oracle call.
pub fn evaluate_with_loss(t: &dyn TeacherOracle, ex: &MaskedExample, k: usize) -> Result<(Vec<TopKPrediction>, f64)> {
    if k == 0 {
        return Err(Error::invalid("top-k requires k >= 1"));
    }
    let rows = predict_checked(t, ex)?;
    let loss = teacher_loss_from_logits(&rows, &ex.gold_ids, t.vocab().len())?;
    let preds = ex
        .masked_positions
        .iter()
        .zip(&rows)
        .map(|(&position, row)| {
            let (ids, logits) = top_k(row, k);
            TopKPrediction { position, ids, logits }
        })
        .collect();
    Ok((preds, loss))
}

/// Index of the minimum-loss copy; ties go to the lower teacher id, NaN losses lose.
pub fn best_copy_index<I>(copies: I) -> Option<usize>
where
    I: IntoIterator<Item = (TeacherId, f64)>,
{
    let key = |l: f64| if l.is_nan() { f64::INFINITY } else { l };
    copies
        .into_iter()
        .enumerate()
        .min_by(|(_, (ta, la)), (_, (tb, lb))| key(*la).total_cmp(&key(*lb)).then(ta.cmp(tb)))
        .map(|(i, _)| i)
}

pub fn select_best_copy(copies: &[(MaskedExample, f64)]) -> Result<&MaskedExample> {
    best_copy_index(copies.iter().map(|(ex, l)| (ex.teacher_id, *l)))
        .map(|i| &copies[i].0)
        .ok_or_else(|| Error::invalid("no copies to choose from"))
}

/// Logits looked up from the token immediately left of each masked position
/// (a dedicated row serves position 0). Exact and cheap; used as the reference
/// teacher in tests and synthetic runs.
#[derive(Debug, Clone)]
pub struct TableTeacher {
    id: TeacherId,
    vocab: Vocabulary,
    /// `(|V| + 1) × |V|`, row `|V|` is the sentence-start row.
    table: Vec<f32>,
}

/// Logit given to special tokens by fitted tables.
const SPECIAL_LOGIT: f32 = -30.0;

impl TableTeacher {
    pub fn new(id: TeacherId, vocab: Vocabulary, table: Vec<f32>) -> Result<Self> {
        let v = vocab.len();
        if table.len() != (v + 1) * v {
            return Err(Error::invalid(format!(
                "table teacher needs {} logits, got {}",
                (v + 1) * v,
                table.len()
            )));
        }
        Ok(Self { id, vocab, table })
    }

    /// Smoothed bigram log-probabilities fitted on token sequences. The `[MASK]`
    /// row holds unigram log-probabilities, since a masked neighbor reveals nothing.
    pub fn fit_bigram(id: TeacherId, vocab: Vocabulary, sequences: &[Vec<u32>], smoothing: f64) -> Result<Self> {
        let v = vocab.len();
        let start = v;
        let mut counts = vec![0.0f64; (v + 1) * v];
        let mut unigram = vec![0.0f64; v];
        for seq in sequences {
            let mut prev = start;
            for &tok in seq {
                if tok as usize >= v {
                    return Err(Error::IdOutOfRange { id: tok, size: v });
                }
                counts[prev * v + tok as usize] += 1.0;
                unigram[tok as usize] += 1.0;
                prev = tok as usize;
            }
        }
        let mask = vocab.special().mask as usize;
        counts[mask * v..(mask + 1) * v].copy_from_slice(&unigram);
        let regular: Vec<usize> = (0..v).filter(|&j| !vocab.is_special(j as u32)).collect();
        let mut table = vec![SPECIAL_LOGIT; (v + 1) * v];
        for row in 0..=v {
            let r = &counts[row * v..(row + 1) * v];
            let total: f64 = regular.iter().map(|&j| r[j] + smoothing).sum();
            if total <= 0.0 {
                continue;
            }
            for &j in &regular {
                table[row * v + j] = ((r[j] + smoothing) / total).ln() as f32;
            }
        }
        Self::new(id, vocab, table)
    }

    pub fn table(&self) -> &[f32] {
        &self.table
    }

    /// Text form: a header line `mdtable <rows> <cols> <vocab checksum hex>` and one
    /// whitespace-separated row of logits per line.
    pub fn to_text(&self) -> String {
        let v = self.vocab.len();
        let mut out = format!("mdtable {} {} {:016x}\n", v + 1, v, self.vocab.checksum());
        for row in self.table.chunks(v) {
            for (j, x) in row.iter().enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                write!(out, "{x}").expect("writing to a String cannot fail");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(id: TeacherId, vocab: Vocabulary, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |why: &str| Error::Format(format!("{}: {why}", path.display()));
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or_default().split_whitespace().collect();
        let [tag, rows, cols, sum] = header[..] else {
            return Err(bad("malformed header"));
        };
        if tag != "mdtable" {
            return Err(bad("not a table teacher file"));
        }
        let found = u64::from_str_radix(sum, 16).map_err(|_| bad("bad checksum field"))?;
        if found != vocab.checksum() {
            return Err(Error::Checksum {
                expected: vocab.checksum(),
                found,
            });
        }
        let v = vocab.len();
        if rows.parse::<usize>().ok() != Some(v + 1) || cols.parse::<usize>().ok() != Some(v) {
            return Err(bad("table dimensions do not match vocabulary"));
        }
        let mut table = Vec::with_capacity((v + 1) * v);
        for line in lines {
            for tok in line.split_whitespace() {
                table.push(tok.parse::<f32>().map_err(|_| bad("bad logit"))?);
            }
        }
        Self::new(id, vocab, table)
    }
}

impl TeacherOracle for TableTeacher {
    fn teacher_id(&self) -> TeacherId {
        self.id
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn predict(&self, input_ids: &[u32], positions: &[usize]) -> Result<Vec<Vec<f32>>> {
        let v = self.vocab.len();
        positions
            .iter()
            .map(|&p| {
                let row = match p {
                    0 => v,
                    _ => {
                        let left = *input_ids
                            .get(p - 1)
                            .ok_or_else(|| Error::invalid(format!("position {p} out of range")))?;
                        if left as usize >= v {
                            return Err(Error::IdOutOfRange { id: left, size: v });
                        }
                        left as usize
                    }
                };
                Ok(self.table[row * v..(row + 1) * v].to_vec())
            })
            .collect()
    }
}

/// A trained tiny MLM over the teacher's own vocabulary.
#[derive(Debug, Clone)]
pub struct ModelTeacher {
    id: TeacherId,
    vocab: Vocabulary,
    model: StudentModel,
}

impl ModelTeacher {
    pub fn new(id: TeacherId, vocab: Vocabulary, model: StudentModel) -> Result<Self> {
        if model.vocab_size() != vocab.len() {
            return Err(Error::invalid("model teacher vocabulary size mismatch"));
        }
        if model.vocab_checksum != vocab.checksum() {
            return Err(Error::Checksum {
                expected: vocab.checksum(),
                found: model.vocab_checksum,
            });
        }
        Ok(Self { id, vocab, model })
    }
}

impl TeacherOracle for ModelTeacher {
    fn teacher_id(&self) -> TeacherId {
        self.id
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn predict(&self, input_ids: &[u32], positions: &[usize]) -> Result<Vec<Vec<f32>>> {
        let fwd = self.model.forward(input_ids, positions)?;
        Ok(fwd
            .logits
            .into_iter()
            .map(|row| row.into_iter().map(|x| x as f32).collect())
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Prediction shards
// ---------------------------------------------------------------------------

pub const SHARD_MAGIC: &[u8; 4] = b"MDSH";
pub const SHARD_VERSION: u16 = 1;
pub const SHARD_HEADER_LEN: usize = 40;
pub const SHARD_EXTENSION: &str = "mdsh";

/// Header fields that identify a shard's producer and id space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardMeta {
    pub teacher_id: TeacherId,
    /// Effective k: every stored prediction has exactly this many entries.
    pub k: u32,
    /// Checksum of the vocabulary the stored ids index into.
    pub vocab_checksum: u64,
}

/// One masked copy of a raw example plus what its teacher predicted.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardRecord {
    /// Index of the raw example within its language; shared by all copies.
    pub example_id: u64,
    pub language: String,
    pub teacher_loss: f32,
    pub input_ids: Vec<u32>,
    pub masked_positions: Vec<u32>,
    pub gold_ids: Vec<u32>,
    /// One per masked position, in the same order.
    pub predictions: Vec<TopKPrediction>,
}

impl ShardRecord {
    pub fn to_example(&self, teacher_id: TeacherId) -> MaskedExample {
        MaskedExample {
            language: self.language.clone(),
            teacher_id,
            input_ids: self.input_ids.clone(),
            masked_positions: self.masked_positions.iter().map(|&p| p as usize).collect(),
            gold_ids: self.gold_ids.clone(),
        }
    }

    fn validate(&self, k: u32) -> Result<()> {
        let n = self.masked_positions.len();
        if self.gold_ids.len() != n || self.predictions.len() != n {
            return Err(Error::Format(format!(
                "record {}: masked positions, gold ids and predictions differ in count",
                self.example_id
            )));
        }
        for (pred, &pos) in self.predictions.iter().zip(&self.masked_positions) {
            if pred.position != pos as usize {
                return Err(Error::Format(format!(
                    "record {}: prediction position {} does not match masked position {pos}",
                    self.example_id, pred.position
                )));
            }
            if pred.ids.len() != k as usize || pred.logits.len() != k as usize {
                return Err(Error::Format(format!(
                    "record {}: prediction has {} entries, header k is {k}",
                    self.example_id,
                    pred.ids.len()
                )));
            }
        }
        if self.language.len() > u16::MAX as usize {
            return Err(Error::Format("language tag too long".into()));
        }
        Ok(())
    }

    fn body_len(&self, k: u32) -> usize {
        let n = self.masked_positions.len();
        8 + 2 + self.language.len() + 4 + 4 + 4 * self.input_ids.len() + 4 + 8 * n + n * 8 * k as usize
    }
}

fn header_digest(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// Shard byte layout, all integers little-endian:
///
/// ```text
/// header (40 bytes)
///   0  magic "MDSH"        4  version u16      6  reserved u16 (0)
///   8  teacher id u32     12  k u32           16  vocab checksum u64
///  24  record count u64   32  header digest u64 (SHA-256 of bytes 0..32, first 8 bytes LE)
/// record (repeated)
///   u32 byte length of the rest of the record
///   u64 example id
///   u16 language length, language bytes (UTF-8)
///   f32 teacher loss
///   u32 sequence length L, L × u32 input ids
///   u32 masked count n, n × u32 positions, n × u32 gold ids
///   n × (k × u32 ids, k × f32 logits)
/// ```
pub fn encode_header(meta: &ShardMeta, record_count: u64) -> [u8; SHARD_HEADER_LEN] {
    let mut h = [0u8; SHARD_HEADER_LEN];
    h[0..4].copy_from_slice(SHARD_MAGIC);
    h[4..6].copy_from_slice(&SHARD_VERSION.to_le_bytes());
    h[8..12].copy_from_slice(&meta.teacher_id.0.to_le_bytes());
    h[12..16].copy_from_slice(&meta.k.to_le_bytes());
    h[16..24].copy_from_slice(&meta.vocab_checksum.to_le_bytes());
    h[24..32].copy_from_slice(&record_count.to_le_bytes());
    let digest = header_digest(&h[..32]);
    h[32..40].copy_from_slice(&digest.to_le_bytes());
    h
}

pub fn write_records<W: Write>(mut w: W, meta: &ShardMeta, records: &[ShardRecord]) -> Result<()> {
    for r in records {
        r.validate(meta.k)?;
    }
    w.write_all(&encode_header(meta, records.len() as u64))?;
    for r in records {
        w.write_all(&(r.body_len(meta.k) as u32).to_le_bytes())?;
        w.write_all(&r.example_id.to_le_bytes())?;
        w.write_all(&(r.language.len() as u16).to_le_bytes())?;
        w.write_all(r.language.as_bytes())?;
        w.write_all(&r.teacher_loss.to_le_bytes())?;
        w.write_all(&(r.input_ids.len() as u32).to_le_bytes())?;
        for id in &r.input_ids {
            w.write_all(&id.to_le_bytes())?;
        }
        w.write_all(&(r.masked_positions.len() as u32).to_le_bytes())?;
        for p in &r.masked_positions {
            w.write_all(&p.to_le_bytes())?;
        }
        for g in &r.gold_ids {
            w.write_all(&g.to_le_bytes())?;
        }
        for pred in &r.predictions {
            for id in &pred.ids {
                w.write_all(&id.to_le_bytes())?;
            }
            for l in &pred.logits {
                w.write_all(&l.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn encode_shard(meta: &ShardMeta, records: &[ShardRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_records(&mut out, meta, records)?;
    Ok(out)
}

pub fn write_shard(path: impl AsRef<Path>, meta: &ShardMeta, records: &[ShardRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(BufWriter::new(file), meta, records).map_err(|e| match e {
        Error::Stream(io) => Error::io(path, io),
        other => other,
    })
}

/// Streaming reader over a shard; yields records one at a time.
pub struct ShardReader<R: Read> {
    inner: R,
    meta: ShardMeta,
    remaining: u64,
    done: bool,
}

fn truncated(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format("shard truncated".into())
    } else {
        Error::Stream(e)
    }
}

impl<R: Read> ShardReader<R> {
    /// Parse and verify the header. When `expected_vocab` is given, the shard's
    /// vocabulary checksum must equal it.
    pub fn new(mut inner: R, expected_vocab: Option<u64>) -> Result<Self> {
        let mut h = [0u8; SHARD_HEADER_LEN];
        inner.read_exact(&mut h).map_err(truncated)?;
        if &h[0..4] != SHARD_MAGIC {
            return Err(Error::Format("not a prediction shard (bad magic)".into()));
        }
        let stored = u64::from_le_bytes(h[32..40].try_into().unwrap());
        let computed = header_digest(&h[..32]);
        if stored != computed {
            return Err(Error::Checksum {
                expected: stored,
                found: computed,
            });
        }
        let version = u16::from_le_bytes(h[4..6].try_into().unwrap());
        if version != SHARD_VERSION {
            return Err(Error::Version {
                expected: SHARD_VERSION,
                found: version,
            });
        }
        let meta = ShardMeta {
            teacher_id: TeacherId(u32::from_le_bytes(h[8..12].try_into().unwrap())),
            k: u32::from_le_bytes(h[12..16].try_into().unwrap()),
            vocab_checksum: u64::from_le_bytes(h[16..24].try_into().unwrap()),
        };
        if let Some(expected) = expected_vocab {
            if expected != meta.vocab_checksum {
                return Err(Error::Checksum {
                    expected,
                    found: meta.vocab_checksum,
                });
            }
        }
        let remaining = u64::from_le_bytes(h[24..32].try_into().unwrap());
        Ok(Self {
            inner,
            meta,
            remaining,
            done: false,
        })
    }

    pub fn meta(&self) -> ShardMeta {
        self.meta
    }

    pub fn remaining(&self) -> u64 {
        self.remaining
    }

    fn read_record(&mut self) -> Result<ShardRecord> {
        let len = u32::from_le_bytes(read_array(&mut self.inner)?) as usize;
        let mut body = vec![0u8; len];
        self.inner.read_exact(&mut body).map_err(truncated)?;
        decode_record(&body, self.meta.k)
    }

    fn check_trailing(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::Format("trailing bytes after last record".into())),
            Err(e) => Err(Error::Stream(e)),
        }
    }
}

impl<R: Read> Iterator for ShardReader<R> {
    type Item = Result<ShardRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if self.remaining == 0 {
            self.done = true;
            return self.check_trailing().err().map(Err);
        }
        self.remaining -= 1;
        let r = self.read_record();
        if r.is_err() {
            self.done = true;
        }
        Some(r)
    }
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b)
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Format("record shorter than its declared contents".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let raw = self.bytes(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.bytes(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn decode_record(body: &[u8], k: u32) -> Result<ShardRecord> {
    let mut c = Cursor { buf: body };
    let example_id = c.u64()?;
    let lang_len = c.u16()? as usize;
    let language = std::str::from_utf8(c.bytes(lang_len)?)
        .map_err(|_| Error::Format("language tag is not UTF-8".into()))?
        .to_string();
    let teacher_loss = c.f32()?;
    let seq_len = c.u32()? as usize;
    let input_ids = c.u32s(seq_len)?;
    let n = c.u32()? as usize;
    let masked_positions = c.u32s(n)?;
    let gold_ids = c.u32s(n)?;
    let mut predictions = Vec::with_capacity(n);
    for &pos in &masked_positions {
        let ids = c.u32s(k as usize)?;
        let logits = c.f32s(k as usize)?;
        predictions.push(TopKPrediction {
            position: pos as usize,
            ids,
            logits,
        });
    }
    if !c.buf.is_empty() {
        return Err(Error::Format("record longer than its declared contents".into()));
    }
    Ok(ShardRecord {
        example_id,
        language,
        teacher_loss,
        input_ids,
        masked_positions,
        gold_ids,
        predictions,
    })
}

pub fn decode_shard(bytes: &[u8], expected_vocab: Option<u64>) -> Result<(ShardMeta, Vec<ShardRecord>)> {
    let reader = ShardReader::new(bytes, expected_vocab)?;
    let meta = reader.meta();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((meta, records))
}

pub fn read_shard(path: impl AsRef<Path>, expected_vocab: Option<u64>) -> Result<(ShardMeta, Vec<ShardRecord>)> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = ShardReader::new(BufReader::new(file), expected_vocab)?;
    let meta = reader.meta();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((meta, records))
}

/// `<language>.t<teacher id>.<shard index>.mdsh`
pub fn shard_file_name(language: &str, teacher: TeacherId, index: usize) -> String {
    format!("{language}.t{}.{index:04}.{SHARD_EXTENSION}", teacher.0)
}

pub fn parse_shard_file_name(name: &str) -> Option<(String, TeacherId, usize)> {
    let stem = name.strip_suffix(&format!(".{SHARD_EXTENSION}"))?;
    let (rest, index) = stem.rsplit_once('.')?;
    let (language, teacher) = rest.rsplit_once(".t")?;
    Some((
        language.to_string(),
        TeacherId(teacher.parse().ok()?),
        index.parse().ok()?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::vocab::SPECIAL_TOKENS;
    use rand::Rng;

    fn vocab(n: usize) -> Vocabulary {
        let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        Vocabulary::from_tokens(SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(words), "##").unwrap()
    }

    /// Returns the same fixed logits for every position.
    struct Fixed {
        vocab: Vocabulary,
        logits: Vec<f32>,
    }

    impl TeacherOracle for Fixed {
        fn teacher_id(&self) -> TeacherId {
            TeacherId(0)
        }
        fn vocab(&self) -> &Vocabulary {
            &self.vocab
        }
        fn predict(&self, _: &[u32], positions: &[usize]) -> Result<Vec<Vec<f32>>> {
            Ok(positions.iter().map(|_| self.logits.clone()).collect())
        }
    }

    fn example(teacher: u32, positions: Vec<usize>, gold: Vec<u32>) -> MaskedExample {
        MaskedExample {
            language: "xx".into(),
            teacher_id: TeacherId(teacher),
            input_ids: vec![5; 6],
            masked_positions: positions,
            gold_ids: gold,
        }
    }

    #[test]
    fn top_k_by_construction_and_ties() {
        let mut logits = vec![f32::NEG_INFINITY; 10];
        logits[4] = 3.0;
        logits[2] = 1.0;
        let t = Fixed {
            vocab: vocab(5),
            logits,
        };
        let p = evaluate_masked(&t, &example(0, vec![1], vec![5]), 2).unwrap();
        assert_eq!(p[0].ids, vec![4, 2]);
        assert_eq!(p[0].logits, vec![3.0, 1.0]);

        let mut tied = vec![0.0f32; 10];
        tied[5] = 2.0;
        tied[9] = 2.0;
        assert_eq!(top_k(&tied, 1).0, vec![5]);
        assert_eq!(top_k(&tied, 3).0, vec![5, 9, 0]);
    }

    #[test]
    fn k_is_clamped_and_full_k_is_a_distribution() {
        let t = Fixed {
            vocab: vocab(3),
            logits: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
        };
        let p = evaluate_masked(&t, &example(0, vec![0, 2], vec![5, 6]), 100).unwrap();
        assert_eq!(p[0].k(), 8);
        let z: Vec<f64> = p[0].logits.iter().map(|&x| x as f64).collect();
        let s: f64 = crate::loss::softmax(&z).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(evaluate_masked(&t, &example(0, vec![0], vec![5]), 0).is_err());
    }

    #[test]
    fn mismatch_and_range_errors() {
        let t = Fixed {
            vocab: vocab(3),
            logits: vec![0.0; 8],
        };
        assert!(matches!(
            evaluate_masked(&t, &example(1, vec![0], vec![5]), 2),
            Err(Error::TeacherMismatch { .. })
        ));
        assert!(evaluate_masked(&t, &example(0, vec![6], vec![5]), 2).is_err());
        assert!(teacher_example_loss(&t, &example(0, vec![0], vec![50])).is_err());
    }

    #[test]
    fn teacher_loss_values() {
        // uniform over 4 ids
        let t = Fixed {
            vocab: vocab(0),
            logits: vec![0.0, 0.0, 0.0, 0.0, f32::NEG_INFINITY],
        };
        let l = teacher_example_loss(&t, &example(0, vec![1], vec![2])).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        // probability 0.5 on id 0 and 0.25 on ids 1 and 2
        let half = Fixed {
            vocab: vocab(0),
            logits: vec![
                0.5f32.ln(),
                0.25f32.ln(),
                0.25f32.ln(),
                f32::NEG_INFINITY,
                f32::NEG_INFINITY,
            ],
        };
        let l = teacher_example_loss(&half, &example(0, vec![1, 3], vec![0, 1])).unwrap();
        assert!((l - 1.0397).abs() < 1e-4);

        let sure = Fixed {
            vocab: vocab(0),
            logits: vec![0.0, -1e30, -1e30, -1e30, -1e30],
        };
        assert_eq!(teacher_example_loss(&sure, &example(0, vec![1], vec![0])).unwrap(), 0.0);
    }

    #[test]
    fn best_copy_rules() {
        let a = example(0, vec![1], vec![5]);
        let b = example(1, vec![2], vec![5]);
        assert_eq!(select_best_copy(&[(a.clone(), 1.2), (b.clone(), 0.9)]).unwrap(), &b);
        assert_eq!(select_best_copy(&[(a.clone(), 1.2)]).unwrap(), &a);
        assert_eq!(select_best_copy(&[(b.clone(), 0.7), (a.clone(), 0.7)]).unwrap(), &a);
        assert_eq!(
            select_best_copy(&[(a.clone(), f64::NAN), (b.clone(), 3.0)]).unwrap(),
            &b
        );
        assert!(select_best_copy(&[]).is_err());
    }

    #[test]
    fn fitted_table_is_a_log_distribution() {
        let v = vocab(4);
        let seqs = vec![vec![5, 6, 7], vec![5, 6, 8], vec![6, 5]];
        let t = TableTeacher::fit_bigram(TeacherId(0), v.clone(), &seqs, 0.1).unwrap();
        let n = v.len();
        for row in t.table().chunks(n) {
            let z: f64 = row
                .iter()
                .enumerate()
                .filter(|(j, _)| !v.is_special(*j as u32))
                .map(|(_, &l)| (l as f64).exp())
                .sum();
            assert!((z - 1.0).abs() < 1e-5);
        }
        // after w0 (id 5) the fitted teacher prefers w1 (id 6)
        let p = evaluate_masked(
            &t,
            &MaskedExample {
                language: "xx".into(),
                teacher_id: TeacherId(0),
                input_ids: vec![5, 4],
                masked_positions: vec![1],
                gold_ids: vec![6],
            },
            1,
        )
        .unwrap();
        assert_eq!(p[0].ids, vec![6]);
    }

    #[test]
    fn table_text_round_trip_and_checksum() {
        let v = vocab(3);
        let t = TableTeacher::fit_bigram(TeacherId(2), v.clone(), &[vec![5, 6, 7]], 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.table");
        t.save(&p).unwrap();
        let back = TableTeacher::load(TeacherId(2), v, &p).unwrap();
        assert_eq!(back.table(), t.table());
        assert!(matches!(
            TableTeacher::load(TeacherId(2), vocab(4), &p),
            Err(Error::Checksum { .. })
        ));
    }

    fn random_record(r: &mut impl Rng, k: u32, id: u64) -> ShardRecord {
        let len = r.gen_range(1..=16usize);
        let input_ids = (0..len).map(|_| r.gen()).collect();
        let mut masked_positions: Vec<u32> = (0..len as u32).filter(|_| r.gen_bool(0.5)).collect();
        if masked_positions.is_empty() {
            masked_positions.push(r.gen_range(0..len as u32));
        }
        let gold_ids = masked_positions.iter().map(|_| r.gen()).collect();
        let predictions = masked_positions
            .iter()
            .map(|&p| TopKPrediction {
                position: p as usize,
                ids: (0..k).map(|_| r.gen()).collect(),
                logits: (0..k).map(|_| f32::from_bits(r.gen())).collect(),
            })
            .collect();
        ShardRecord {
            example_id: id,
            language: ["en", "de", "日本"][r.gen_range(0..3)].into(),
            teacher_loss: r.gen(),
            input_ids,
            masked_positions,
            gold_ids,
            predictions,
        }
    }

    #[test]
    fn shard_round_trip_is_bit_exact() {
        let mut r = rng::stream(1, &[]);
        let meta = ShardMeta {
            teacher_id: TeacherId(3),
            k: 4,
            vocab_checksum: 0xabcdef,
        };
        let recs: Vec<ShardRecord> = (0..200).map(|i| random_record(&mut r, 4, i)).collect();
        let bytes = encode_shard(&meta, &recs).unwrap();
        let (m, back) = decode_shard(&bytes, Some(0xabcdef)).unwrap();
        assert_eq!(m, meta);
        assert_eq!(encode_shard(&m, &back).unwrap(), bytes);
    }

    #[test]
    fn shard_integrity_errors() {
        let mut r = rng::stream(2, &[]);
        let meta = ShardMeta {
            teacher_id: TeacherId(0),
            k: 2,
            vocab_checksum: 7,
        };
        let recs: Vec<ShardRecord> = (0..5).map(|i| random_record(&mut r, 2, i)).collect();
        let bytes = encode_shard(&meta, &recs).unwrap();

        for i in 4..SHARD_HEADER_LEN {
            let mut bad = bytes.clone();
            bad[i] ^= 0x01;
            assert!(
                matches!(decode_shard(&bad, None), Err(Error::Checksum { .. })),
                "byte {i}"
            );
        }
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_shard(&bad_magic, None), Err(Error::Format(_))));
        assert!(matches!(decode_shard(&bytes, Some(8)), Err(Error::Checksum { .. })));
        assert!(matches!(
            decode_shard(&bytes[..bytes.len() - 3], None),
            Err(Error::Format(_))
        ));
        assert!(matches!(decode_shard(&bytes[..20], None), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_shard(&extra, None).is_err());

        let mut v2 = encode_header(&meta, 0);
        v2[4] = 2;
        let digest = header_digest(&v2[..32]);
        v2[32..40].copy_from_slice(&digest.to_le_bytes());
        assert!(matches!(decode_shard(&v2, None), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn write_rejects_malformed_records() {
        let mut r = rng::stream(3, &[]);
        let meta = ShardMeta {
            teacher_id: TeacherId(0),
            k: 2,
            vocab_checksum: 7,
        };
        let mut rec = random_record(&mut r, 2, 0);
        rec.predictions[0].position += 100;
        assert!(encode_shard(&meta, &[rec]).is_err());
        let rec = random_record(&mut r, 3, 0);
        assert!(encode_shard(&meta, &[rec]).is_err());
    }

    #[test]
    fn shard_names() {
        let name = shard_file_name("pt-BR", TeacherId(12), 3);
        assert_eq!(name, "pt-BR.t12.0003.mdsh");
        assert_eq!(parse_shard_file_name(&name), Some(("pt-BR".into(), TeacherId(12), 3)));
        assert_eq!(parse_shard_file_name("x.mdsh"), None);
    }
}
