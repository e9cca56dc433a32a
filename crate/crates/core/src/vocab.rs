//! WordPiece vocabularies, greedy longest-match tokenization, union
//! vocabularies and teacher-to-student id remapping.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::MaskedExample;
use crate::error::{Error, Result};
use crate::teacher::TopKPrediction;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Canonical special-token order used when pinning specials in a union vocabulary.
pub const SPECIAL_TOKENS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

pub const DEFAULT_CONTINUATION_PREFIX: &str = "##";

/// Words longer than this many characters are emitted as a single `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

/// Position of a teacher in the manifest. Lower ids win ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TeacherId(pub u32);

impl fmt::Display for TeacherId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
}

impl SpecialIds {
    pub fn contains(&self, id: u32) -> bool {
        [self.pad, self.unk, self.cls, self.sep, self.mask].contains(&id)
    }
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    special: SpecialIds,
    continuation_prefix: String,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.continuation_prefix == other.continuation_prefix
    }
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I, continuation_prefix: &str) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::build(
            tokens.into_iter().map(Into::into).collect(),
            continuation_prefix,
            "<memory>",
        )
    }

    fn build(tokens: Vec<String>, continuation_prefix: &str, origin: &str) -> Result<Self> {
        let fail = |reason: String| Error::Vocab {
            origin: origin.to_string(),
            reason,
        };
        if tokens.is_empty() {
            return Err(fail("empty vocabulary".into()));
        }
        if continuation_prefix.is_empty() {
            return Err(fail("empty continuation prefix".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.contains('\n') {
                return Err(fail(format!("invalid token at line {}", i + 1)));
            }
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(fail(format!("duplicate token {tok:?} at line {}", i + 1)));
            }
        }
        let lookup = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| fail(format!("missing special token {s}")))
        };
        let special = SpecialIds {
            pad: lookup(PAD)?,
            unk: lookup(UNK)?,
            cls: lookup(CLS)?,
            sep: lookup(SEP)?,
            mask: lookup(MASK)?,
        };
        Ok(Self {
            tokens,
            index,
            special,
            continuation_prefix: continuation_prefix.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    pub fn continuation_prefix(&self) -> &str {
        &self.continuation_prefix
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.special.contains(id)
    }

    /// The file form: one token per line, each line LF-terminated.
    pub fn to_file_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for t in &self.tokens {
            out.extend_from_slice(t.as_bytes());
            out.push(b'\n');
        }
        out
    }

    /// First eight bytes (little-endian) of the SHA-256 of the file form.
    /// Every downstream artifact carries this to detect stage mismatches.
    pub fn checksum(&self) -> u64 {
        let digest = Sha256::digest(self.to_file_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_file_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocabulary> {
    load_vocab_with_prefix(path, DEFAULT_CONTINUATION_PREFIX)
}

pub fn load_vocab_with_prefix(path: impl AsRef<Path>, continuation_prefix: &str) -> Result<Vocabulary> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tokens = Vec::new();
    for line in BufReader::new(file).lines() {
        tokens.push(line.map_err(|e| Error::io(path, e))?);
    }
    Vocabulary::build(tokens, continuation_prefix, &path.display().to_string())
}

/// Greedy longest-match-first WordPiece segmentation of each whitespace-separated
/// word. A word with no complete segmentation becomes a single `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    let mut out = Vec::new();
    let mut piece = String::new();
    for word in text.split_whitespace() {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(vocab.special.unk);
            continue;
        }
        let word_start = out.len();
        let mut start = 0usize;
        let mut ok = true;
        while start < chars.len() {
            let begin = chars[start].0;
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                let stop = chars.get(end).map_or(word.len(), |c| c.0);
                piece.clear();
                if start > 0 {
                    piece.push_str(&vocab.continuation_prefix);
                }
                piece.push_str(&word[begin..stop]);
                if let Some(id) = vocab.id(&piece) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            out.truncate(word_start);
            out.push(vocab.special.unk);
        }
    }
    out
}

/// Inverse of [`tokenize`] for in-vocabulary pieces: word-initial pieces start a
/// new space-separated word, continuation pieces are glued on without their prefix.
pub fn detokenize(ids: &[u32], vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        let tok = vocab.token(id).ok_or(Error::IdOutOfRange { id, size: vocab.len() })?;
        match tok.strip_prefix(vocab.continuation_prefix.as_str()) {
            Some(rest) if !out.is_empty() => out.push_str(rest),
            _ => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
    }
    Ok(out)
}

/// Total, string-preserving map from one teacher's token ids to student ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabMapping {
    pub teacher_id: TeacherId,
    pub map: Vec<u32>,
}

impl VocabMapping {
    pub fn identity(teacher_id: TeacherId, size: usize) -> Self {
        Self {
            teacher_id,
            map: (0..size as u32).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &s)| i as u32 == s)
    }

    pub fn map_id(&self, id: u32) -> Result<u32> {
        self.map.get(id as usize).copied().ok_or(Error::IdOutOfRange {
            id,
            size: self.map.len(),
        })
    }

    fn map_all(&self, ids: &[u32]) -> Result<Vec<u32>> {
        ids.iter().map(|&i| self.map_id(i)).collect()
    }

    /// Tab-separated `teacher_id<TAB>student_id` lines sorted by teacher id.
    pub fn to_file_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (t, s) in self.map.iter().enumerate() {
            writeln!(out, "{t}\t{s}").expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_file_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>, teacher_id: TeacherId) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: usize, why: &str| Error::Format(format!("{}:{line}: {why}", path.display()));
        let mut map = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| bad(n + 1, "expected two columns"))?;
            let t: usize = a.parse().map_err(|_| bad(n + 1, "bad teacher id"))?;
            let s: u32 = b.parse().map_err(|_| bad(n + 1, "bad student id"))?;
            if t != map.len() {
                return Err(bad(n + 1, "teacher ids must be dense and sorted"));
            }
            map.push(s);
        }
        Ok(Self { teacher_id, map })
    }
}

/// Union of all teacher vocabularies.
///
/// The five specials come first in canonical order, followed by every teacher's
/// tokens in (teacher order, teacher id order), keeping the first occurrence of
/// each string. Mappings are returned in teacher order with `TeacherId(i)`.
pub fn build_union_vocab(teachers: &[&Vocabulary]) -> Result<(Vocabulary, Vec<VocabMapping>)> {
    let first = teachers
        .first()
        .ok_or_else(|| Error::invalid("union of zero vocabularies"))?;
    let prefix = first.continuation_prefix.clone();
    if let Some(other) = teachers.iter().find(|t| t.continuation_prefix != prefix) {
        return Err(Error::Vocab {
            origin: "union".into(),
            reason: format!(
                "conflicting continuation prefixes {:?} and {:?}",
                prefix, other.continuation_prefix
            ),
        });
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut index: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    let mut mappings = Vec::with_capacity(teachers.len());
    for (ti, teacher) in teachers.iter().enumerate() {
        let mut map = Vec::with_capacity(teacher.len());
        for tok in &teacher.tokens {
            let id = *index.entry(tok.clone()).or_insert_with(|| {
                tokens.push(tok.clone());
                (tokens.len() - 1) as u32
            });
            map.push(id);
        }
        mappings.push(VocabMapping {
            teacher_id: TeacherId(ti as u32),
            map,
        });
    }
    let student = Vocabulary::build(tokens, &prefix, "union")?;
    Ok((student, mappings))
}

/// Rewrite an example's input and gold ids from teacher space to student space.
pub fn map_example(ex: &MaskedExample, mapping: &VocabMapping) -> Result<MaskedExample> {
    if ex.teacher_id != mapping.teacher_id {
        return Err(Error::TeacherMismatch {
            example: ex.teacher_id.0,
            given: mapping.teacher_id.0,
        });
    }
    Ok(MaskedExample {
        language: ex.language.clone(),
        teacher_id: ex.teacher_id,
        input_ids: mapping.map_all(&ex.input_ids)?,
        masked_positions: ex.masked_positions.clone(),
        gold_ids: mapping.map_all(&ex.gold_ids)?,
    })
}

/// Rewrite the token ids of stored teacher predictions into student space.
/// Logits and positions are untouched.
pub fn map_predictions(preds: &[TopKPrediction], mapping: &VocabMapping) -> Result<Vec<TopKPrediction>> {
    preds
        .iter()
        .map(|p| {
            Ok(TopKPrediction {
                position: p.position,
                ids: mapping.map_all(&p.ids)?,
                logits: p.logits.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(extra: &[&str]) -> Vocabulary {
        let toks = SPECIAL_TOKENS.iter().chain(extra.iter()).copied();
        Vocabulary::from_tokens(toks, "##").unwrap()
    }

    fn write_tmp(lines: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(lines.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_assigns_line_numbers() {
        let f = write_tmp("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\na\n");
        let v = load_vocab(f.path()).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.special().mask, 4);
    }

    #[test]
    fn load_rejects_duplicates_missing_specials_and_empty() {
        let dup = write_tmp("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\na\na\n");
        assert!(matches!(load_vocab(dup.path()), Err(Error::Vocab { reason, .. }) if reason.contains("duplicate")));
        let no_mask = write_tmp("[PAD]\n[UNK]\n[CLS]\n[SEP]\na\n");
        assert!(matches!(load_vocab(no_mask.path()), Err(Error::Vocab { reason, .. }) if reason.contains("[MASK]")));
        let empty = write_tmp("");
        assert!(load_vocab(empty.path()).is_err());
    }

    #[test]
    fn greedy_longest_match() {
        let v = vocab(&["hug", "##s", "h"]);
        let ids = tokenize("hugs", &v);
        assert_eq!(ids, vec![v.id("hug").unwrap(), v.id("##s").unwrap()]);
        assert!(tokenize("", &v).is_empty());
        assert_eq!(tokenize("qqq", &v), vec![v.special().unk]);
        // partial match followed by a dead end still degrades the whole word
        assert_eq!(tokenize("hugx hug", &v), vec![v.special().unk, v.id("hug").unwrap()]);
    }

    #[test]
    fn overlong_word_is_unk() {
        let v = vocab(&["a", "##a"]);
        let long = "a".repeat(MAX_WORD_CHARS + 1);
        assert_eq!(tokenize(&long, &v), vec![v.special().unk]);
        let ok = "a".repeat(MAX_WORD_CHARS);
        assert_eq!(tokenize(&ok, &v).len(), MAX_WORD_CHARS);
    }

    #[test]
    fn multibyte_words() {
        let v = vocab(&["мир", "##ы", "日本", "##語"]);
        assert_eq!(detokenize(&tokenize("миры 日本語", &v), &v).unwrap(), "миры 日本語");
    }

    #[test]
    fn union_of_overlapping_teachers() {
        let a = vocab(&["a", "b"]);
        let b = vocab(&["b", "c"]);
        let (s, maps) = build_union_vocab(&[&a, &b]).unwrap();
        let expected: Vec<&str> = SPECIAL_TOKENS.iter().copied().chain(["a", "b", "c"]).collect();
        assert_eq!(s.tokens(), expected.as_slice());
        assert_eq!(maps[1].map[b.id("b").unwrap() as usize], s.id("b").unwrap());
        assert_eq!(maps[1].map[b.id("c").unwrap() as usize], 7);
        assert!(maps[0].is_identity());
    }

    #[test]
    fn union_pins_specials_first() {
        let t = Vocabulary::from_tokens(["x", "[MASK]", "[PAD]", "y", "[SEP]", "[UNK]", "[CLS]"], "##").unwrap();
        let (s, maps) = build_union_vocab(&[&t]).unwrap();
        assert_eq!(&s.tokens()[..5], &SPECIAL_TOKENS.map(String::from));
        assert_eq!(s.tokens()[5..], ["x".to_string(), "y".to_string()]);
        assert!(!maps[0].is_identity());
        for (i, tok) in t.tokens().iter().enumerate() {
            assert_eq!(s.token(maps[0].map[i]), Some(tok.as_str()));
        }
    }

    #[test]
    fn union_rejects_prefix_conflict() {
        let a = vocab(&["a"]);
        let b = Vocabulary::from_tokens(SPECIAL_TOKENS.iter().copied().chain(["@@a"]), "@@").unwrap();
        assert!(build_union_vocab(&[&a, &b]).is_err());
        assert!(build_union_vocab(&[]).is_err());
    }

    #[test]
    fn mapping_file_round_trip() {
        let a = vocab(&["a", "b"]);
        let b = vocab(&["b", "c"]);
        let (_, maps) = build_union_vocab(&[&a, &b]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        maps[1].write(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("0\t0\n"));
        assert_eq!(VocabMapping::read(&p, TeacherId(1)).unwrap(), maps[1]);
    }

    fn example(teacher: u32, input: Vec<u32>, pos: Vec<usize>, gold: Vec<u32>) -> MaskedExample {
        MaskedExample {
            language: "xx".into(),
            teacher_id: TeacherId(teacher),
            input_ids: input,
            masked_positions: pos,
            gold_ids: gold,
        }
    }

    #[test]
    fn map_example_cases() {
        let ex = example(0, vec![4, 1, 2], vec![1, 2], vec![1, 2]);
        let id = VocabMapping::identity(TeacherId(0), 10);
        assert_eq!(map_example(&ex, &id).unwrap(), ex);

        let mut m = VocabMapping::identity(TeacherId(0), 10);
        m.map[1] = 7;
        m.map[2] = 9;
        let mapped = map_example(&ex, &m).unwrap();
        assert_eq!(mapped.gold_ids, vec![7, 9]);
        assert_eq!(mapped.masked_positions, ex.masked_positions);

        let other = VocabMapping::identity(TeacherId(1), 10);
        assert!(matches!(map_example(&ex, &other), Err(Error::TeacherMismatch { .. })));

        let short = VocabMapping::identity(TeacherId(0), 2);
        assert!(matches!(map_example(&ex, &short), Err(Error::IdOutOfRange { .. })));
    }

    #[test]
    fn map_example_preserves_detokenized_text() {
        let a = vocab(&["un", "##able", "x"]);
        let b = vocab(&["zz", "x", "##able", "un"]);
        let (s, maps) = build_union_vocab(&[&a, &b]).unwrap();
        let ids = tokenize("unable x", &b);
        let ex = example(1, ids.clone(), vec![0], vec![ids[0]]);
        let mapped = map_example(&ex, &maps[1]).unwrap();
        assert_eq!(
            detokenize(&mapped.input_ids, &s).unwrap(),
            detokenize(&ids, &b).unwrap()
        );
    }

    #[test]
    fn union_build_is_byte_deterministic() {
        let a = vocab(&["q", "w", "##e"]);
        let b = vocab(&["w", "r"]);
        let (s1, _) = build_union_vocab(&[&a, &b]).unwrap();
        let (s2, _) = build_union_vocab(&[&a, &b]).unwrap();
        assert_eq!(s1.to_file_bytes(), s2.to_file_bytes());
        assert_eq!(s1.checksum(), s2.checksum());
    }

    fn word_strategy() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec("[a-d]{1,3}", 1..12)
    }

    proptest! {
        #[test]
        fn union_is_string_preserving_and_bounded(sets in prop::collection::vec(word_strategy(), 1..4)) {
            let vocabs: Vec<Vocabulary> = sets
                .iter()
                .map(|words| {
                    let mut seen = std::collections::BTreeSet::new();
                    let uniq: Vec<&str> = words.iter().map(String::as_str).filter(|w| seen.insert(*w)).collect();
                    vocab(&uniq)
                })
                .collect();
            let refs: Vec<&Vocabulary> = vocabs.iter().collect();
            let (s, maps) = build_union_vocab(&refs).unwrap();
            for (v, m) in vocabs.iter().zip(&maps) {
                prop_assert_eq!(m.map.len(), v.len());
                let mut seen = std::collections::HashSet::new();
                for (i, tok) in v.tokens().iter().enumerate() {
                    prop_assert_eq!(s.id(tok), Some(m.map[i]));
                    prop_assert!(seen.insert(m.map[i]));
                }
            }
            let total: usize = vocabs.iter().map(|v| v.len() - SPECIAL_TOKENS.len()).sum();
            let mut all = std::collections::HashSet::new();
            for v in &vocabs { for t in &v.tokens()[SPECIAL_TOKENS.len()..] { all.insert(t.clone()); } }
            prop_assert!(s.len() - SPECIAL_TOKENS.len() <= total);
            prop_assert_eq!(s.len() - SPECIAL_TOKENS.len() == total, all.len() == total);
        }

        #[test]
        fn retokenizing_detokenized_output_is_stable(words in prop::collection::vec("[a-c]{1,6}", 0..8)) {
            let v = vocab(&["a", "b", "c", "ab", "##a", "##b", "##c", "##bc"]);
            let ids = tokenize(&words.join(" "), &v);
            let text = detokenize(&ids, &v).unwrap();
            prop_assert_eq!(&text, &words.join(" "));
            prop_assert_eq!(tokenize(&text, &v), ids);
        }
    }
}
