//! Synthetic multilingual setups for demos and end-to-end tests.
//!
//! Each language is a first-order Markov chain over its own made-up words
//! built from consonant-vowel syllables. Every language gets a monolingual
//! teacher whose vocabulary holds its whole words; optionally a shared
//! multilingual teacher segments all languages into syllable pieces. Teachers
//! are bigram tables fitted on separate text drawn from the same chains.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::MaskingConfig;
use crate::error::{Error, Result};
use crate::pipeline::{LanguageSpec, Manifest, OracleSpec, PrepareConfig, SamplingSection, TeacherSpec};
use crate::rng::{self, StreamRng};
use crate::teacher::TableTeacher;
use crate::trainer::TrainingConfig;
use crate::vocab::{tokenize, TeacherId, Vocabulary, DEFAULT_CONTINUATION_PREFIX, SPECIAL_TOKENS};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone)]
pub struct SynthLanguage {
    pub tag: String,
    /// Lines in the transfer corpus.
    pub sentences: usize,
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub languages: Vec<SynthLanguage>,
    pub words_per_language: usize,
    /// Lines per language used to fit the teachers.
    pub teacher_sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Add one syllable-level teacher assigned to every language.
    pub shared_teacher: bool,
    pub smoothing: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            languages: vec![
                SynthLanguage {
                    tag: "xa".into(),
                    sentences: 600,
                },
                SynthLanguage {
                    tag: "yo".into(),
                    sentences: 150,
                },
            ],
            words_per_language: 24,
            teacher_sentences: 3000,
            min_len: 6,
            max_len: 14,
            shared_teacher: false,
            smoothing: 0.05,
            seed: 7,
        }
    }
}

/// A language's generator: words and the transition table (row `words.len()` is
/// the sentence start).
struct Chain {
    words: Vec<String>,
    syllables: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Chain {
    fn new(lang_index: usize, n_words: usize, r: &mut StreamRng) -> Self {
        // each language draws from its own consonant slice so vocabularies overlap little
        let start = (lang_index * 4) % CONSONANTS.len();
        let syllables: Vec<String> = (0..4)
            .flat_map(|i| {
                let c = CONSONANTS[(start + i) % CONSONANTS.len()] as char;
                VOWELS.iter().map(move |&v| format!("{c}{}", v as char))
            })
            .collect();
        let mut words = Vec::with_capacity(n_words);
        while words.len() < n_words {
            let n = r.gen_range(2..=3);
            let w: String = (0..n).map(|_| syllables.choose(r).unwrap().as_str()).collect();
            if !words.contains(&w) {
                words.push(w);
            }
        }
        let rows = (0..=n_words)
            .map(|_| {
                let mut row = vec![0.1 / n_words as f64; n_words];
                let preferred: Vec<usize> = (0..n_words)
                    .collect::<Vec<_>>()
                    .choose_multiple(r, 3)
                    .copied()
                    .collect();
                let raw: Vec<f64> = preferred.iter().map(|_| r.gen_range(1.0..4.0)).collect();
                let z: f64 = raw.iter().sum();
                for (&j, w) in preferred.iter().zip(raw) {
                    row[j] += 0.9 * w / z;
                }
                row
            })
            .collect();
        Self { words, syllables, rows }
    }

    fn sentence(&self, len: usize, r: &mut StreamRng) -> String {
        let mut prev = self.words.len();
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let u: f64 = r.gen();
            let mut acc = 0.0;
            let mut next = self.words.len() - 1;
            for (j, p) in self.rows[prev].iter().enumerate() {
                acc += p;
                if u < acc {
                    next = j;
                    break;
                }
            }
            out.push(self.words[next].as_str());
            prev = next;
        }
        out.join(" ")
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Write corpora, teacher vocabularies and tables, and `manifest.toml` under `dir`.
/// Returns the manifest path.
pub fn generate(dir: impl AsRef<Path>, cfg: &SynthConfig, training: TrainingConfig) -> Result<PathBuf> {
    let dir = dir.as_ref();
    if cfg.languages.is_empty() || cfg.words_per_language < 3 || cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::invalid(
            "synthetic setup needs languages, >= 3 words, and 1 <= min_len <= max_len",
        ));
    }
    for sub in ["corpus", "teachers"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }

    let mut r = rng::stream(cfg.seed, &[rng::str_coord("synth")]);
    let chains: Vec<Chain> = (0..cfg.languages.len())
        .map(|i| Chain::new(i, cfg.words_per_language, &mut r))
        .collect();

    let mut teacher_text: Vec<Vec<String>> = Vec::new();
    let mut languages = Vec::new();
    for (lang, chain) in cfg.languages.iter().zip(&chains) {
        let mut lr = rng::stream(cfg.seed, &[rng::str_coord(&lang.tag), 1]);
        let lines: Vec<String> = (0..lang.sentences)
            .map(|_| {
                let len = lr.gen_range(cfg.min_len..=cfg.max_len);
                chain.sentence(len, &mut lr)
            })
            .collect();
        let path = dir.join("corpus").join(format!("{}.txt", lang.tag));
        write(&path, lines.join("\n") + "\n")?;

        let mut tr = rng::stream(cfg.seed, &[rng::str_coord(&lang.tag), 2]);
        teacher_text.push(
            (0..cfg.teacher_sentences)
                .map(|_| {
                    let len = tr.gen_range(cfg.min_len..=cfg.max_len);
                    chain.sentence(len, &mut tr)
                })
                .collect(),
        );
        let mut assigned = vec![format!("mono_{}", lang.tag)];
        if cfg.shared_teacher {
            assigned.push("shared".into());
        }
        languages.push(LanguageSpec {
            tag: lang.tag.clone(),
            corpus: PathBuf::from("corpus").join(format!("{}.txt", lang.tag)),
            teachers: assigned,
        });
    }

    let mut teachers = Vec::new();
    let mut fit_and_write = |name: String, vocab: Vocabulary, text: Vec<&String>| -> Result<()> {
        let seqs: Vec<Vec<u32>> = text.iter().map(|l| tokenize(l, &vocab)).collect();
        let id = TeacherId(teachers.len() as u32);
        let table = TableTeacher::fit_bigram(id, vocab.clone(), &seqs, cfg.smoothing)?;
        let vocab_rel = PathBuf::from("teachers").join(format!("{name}.vocab"));
        let table_rel = PathBuf::from("teachers").join(format!("{name}.table"));
        vocab.write(dir.join(&vocab_rel))?;
        table.save(dir.join(&table_rel))?;
        teachers.push(TeacherSpec {
            name,
            vocab: vocab_rel,
            oracle: OracleSpec::Table { path: table_rel },
        });
        Ok(())
    };

    for ((lang, chain), text) in cfg.languages.iter().zip(&chains).zip(&teacher_text) {
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(chain.words.iter().cloned());
        let vocab = Vocabulary::from_tokens(tokens, DEFAULT_CONTINUATION_PREFIX)?;
        fit_and_write(format!("mono_{}", lang.tag), vocab, text.iter().collect())?;
    }
    if cfg.shared_teacher {
        let mut pieces: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for chain in &chains {
            for s in &chain.syllables {
                if !pieces.contains(s) {
                    pieces.push(s.clone());
                }
            }
        }
        let conts: Vec<String> = pieces[SPECIAL_TOKENS.len()..]
            .iter()
            .map(|s| format!("{DEFAULT_CONTINUATION_PREFIX}{s}"))
            .collect();
        pieces.extend(conts);
        let vocab = Vocabulary::from_tokens(pieces, DEFAULT_CONTINUATION_PREFIX)?;
        fit_and_write("shared".into(), vocab, teacher_text.iter().flatten().collect())?;
    }

    let manifest = Manifest {
        output_dir: PathBuf::from("run"),
        sampling: SamplingSection { alpha: training.alpha },
        masking: MaskingConfig::default(),
        prepare: PrepareConfig::default(),
        training,
        teachers,
        languages,
        base_dir: PathBuf::new(),
    };
    let path = dir.join("manifest.toml");
    write(&path, manifest.to_toml()?)?;
    Ok(path)
}
