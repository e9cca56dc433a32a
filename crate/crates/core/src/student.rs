//! The student: a single-mixing-layer masked LM over the union vocabulary.
//!
//! For a masked position `p` with visible context `x`:
//!
//! ```text
//! h_p      = E[x_p] + c + Σ_{o ∈ ±1..±w} W_o · E[x_{p+o}]     (in-bounds offsets only)
//! logits_v = E[v] · h_p + b_v                                   (output tied to E)
//! ```
//!
//! `E` is the `|V| × d` embedding table, `W_o` one `d × d` matrix per relative
//! offset inside the context window `w`, `c` a hidden bias and `b` an output bias.
//! All parameters live in one flat `f64` buffer so optimizers and checkpoints
//! can treat them uniformly.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::MaskedExample;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub dim: usize,
    pub window: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self { dim: 16, window: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    vocab_size: usize,
    cfg: StudentConfig,
    /// Checksum of the vocabulary the rows of `E` index into.
    pub vocab_checksum: u64,
    params: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    emb: usize,
    mix: usize,
    hidden_bias: usize,
    out_bias: usize,
    total: usize,
}

impl Layout {
    fn new(vocab_size: usize, cfg: StudentConfig) -> Self {
        let d = cfg.dim;
        let emb = 0;
        let mix = emb + vocab_size * d;
        let hidden_bias = mix + 2 * cfg.window * d * d;
        let out_bias = hidden_bias + d;
        Self {
            emb,
            mix,
            hidden_bias,
            out_bias,
            total: out_bias + vocab_size,
        }
    }
}

/// Per-example forward results kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// One row of `|V|` logits per masked position.
    pub logits: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
}

pub fn init_params(vocab_size: usize, cfg: StudentConfig, seed: u64) -> Result<StudentModel> {
    let mut model = StudentModel::zeros(vocab_size, cfg)?;
    let layout = model.layout();
    let mut r = rng::stream(seed, &[0x5eed]);
    let emb_scale = 1.0 / (cfg.dim as f64).sqrt();
    let mix_scale = emb_scale / (2 * cfg.window).max(1) as f64;
    for (i, p) in model.params[..layout.hidden_bias].iter_mut().enumerate() {
        let scale = if i < layout.mix { emb_scale } else { mix_scale };
        *p = r.gen_range(-scale..scale);
    }
    Ok(model)
}

impl StudentModel {
    pub fn zeros(vocab_size: usize, cfg: StudentConfig) -> Result<Self> {
        if vocab_size == 0 || cfg.dim == 0 {
            return Err(Error::invalid("student vocab size and dim must be at least 1"));
        }
        let total = Layout::new(vocab_size, cfg).total;
        Ok(Self {
            vocab_size,
            cfg,
            vocab_checksum: 0,
            params: vec![0.0; total],
        })
    }

    fn layout(&self) -> Layout {
        Layout::new(self.vocab_size, self.cfg)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn config(&self) -> StudentConfig {
        self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn embeddings(&self) -> &[f64] {
        let l = self.layout();
        &self.params[l.emb..l.mix]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn offsets(&self) -> impl Iterator<Item = (usize, isize)> {
        let w = self.cfg.window as isize;
        (-w..=w).filter(|&o| o != 0).enumerate()
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&i| i as usize >= self.vocab_size) {
            Some(&id) => Err(Error::IdOutOfRange {
                id,
                size: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    pub fn forward(&self, input_ids: &[u32], positions: &[usize]) -> Result<ForwardPass> {
        self.check_ids(input_ids)?;
        if let Some(&p) = positions.iter().find(|&&p| p >= input_ids.len()) {
            return Err(Error::invalid(format!(
                "position {p} beyond input of length {}",
                input_ids.len()
            )));
        }
        let l = self.layout();
        let d = self.cfg.dim;
        let emb = |id: u32| &self.params[l.emb + id as usize * d..l.emb + (id as usize + 1) * d];
        let mut logits = Vec::with_capacity(positions.len());
        let mut hidden = Vec::with_capacity(positions.len());
        for &p in positions {
            let mut h: Vec<f64> = self.params[l.hidden_bias..l.hidden_bias + d].to_vec();
            for (hv, ev) in h.iter_mut().zip(emb(input_ids[p])) {
                *hv += ev;
            }
            for (j, o) in self.offsets() {
                let Some(q) = p.checked_add_signed(o).filter(|&q| q < input_ids.len()) else {
                    continue;
                };
                let w = &self.params[l.mix + j * d * d..l.mix + (j + 1) * d * d];
                let e = emb(input_ids[q]);
                for (r, hv) in h.iter_mut().enumerate() {
                    *hv += dot(&w[r * d..(r + 1) * d], e);
                }
            }
            let row: Vec<f64> = (0..self.vocab_size)
                .map(|v| dot(emb(v as u32), &h) + self.params[l.out_bias + v])
                .collect();
            logits.push(row);
            hidden.push(h);
        }
        Ok(ForwardPass { logits, hidden })
    }

    pub fn forward_example(&self, ex: &MaskedExample) -> Result<ForwardPass> {
        self.forward(&ex.input_ids, &ex.masked_positions)
    }

    /// Accumulate into `grad` the parameter gradient of a scalar whose gradient
    /// with respect to `fwd.logits` is `dlogits`.
    pub fn backward(
        &self,
        input_ids: &[u32],
        positions: &[usize],
        fwd: &ForwardPass,
        dlogits: &[Vec<f64>],
        grad: &mut [f64],
    ) {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer has wrong length");
        let l = self.layout();
        let d = self.cfg.dim;
        let mut dh = vec![0.0; d];
        for ((&p, h), g) in positions.iter().zip(&fwd.hidden).zip(dlogits) {
            dh.iter_mut().for_each(|x| *x = 0.0);
            for (v, &gv) in g.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                grad[l.out_bias + v] += gv;
                let base = l.emb + v * d;
                for k in 0..d {
                    grad[base + k] += gv * h[k];
                    dh[k] += gv * self.params[base + k];
                }
            }
            for k in 0..d {
                grad[l.hidden_bias + k] += dh[k];
                grad[l.emb + input_ids[p] as usize * d + k] += dh[k];
            }
            for (j, o) in self.offsets() {
                let Some(q) = p.checked_add_signed(o).filter(|&q| q < input_ids.len()) else {
                    continue;
                };
                let wbase = l.mix + j * d * d;
                let ebase = l.emb + input_ids[q] as usize * d;
                for r in 0..d {
                    for c in 0..d {
                        // dW[r][c] += dh[r] * e[c];  dE[c] += W[r][c] * dh[r]
                        grad[wbase + r * d + c] += dh[r] * self.params[ebase + c];
                        grad[ebase + c] += self.params[wbase + r * d + c] * dh[r];
                    }
                }
            }
        }
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CHECKPOINT_HEADER_LEN + self.params.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&DTYPE_F64.to_le_bytes());
        out.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.cfg.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.cfg.window as u32).to_le_bytes());
        out.extend_from_slice(&self.vocab_checksum.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a student checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes(take(&mut r)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let dtype = u16::from_le_bytes(take(&mut r)?);
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("unsupported parameter dtype {dtype}")));
        }
        let vocab_size = u32::from_le_bytes(take(&mut r)?) as usize;
        let dim = u32::from_le_bytes(take(&mut r)?) as usize;
        let window = u32::from_le_bytes(take(&mut r)?) as usize;
        let vocab_checksum = u64::from_le_bytes(take(&mut r)?);
        let count = u64::from_le_bytes(take(&mut r)?) as usize;
        let mut model =
            StudentModel::zeros(vocab_size, StudentConfig { dim, window }).map_err(|e| Error::Format(e.to_string()))?;
        if count != model.params.len() || r.len() != count * 8 {
            return Err(Error::Format("parameter blob length does not match header dims".into()));
        }
        for (p, chunk) in model.params.iter_mut().zip(r.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        }
        model.vocab_checksum = vocab_checksum;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

/// Checkpoint layout (little-endian):
///
/// | offset | size | field                    |
/// |--------|------|--------------------------|
/// | 0      | 4    | magic `MDCK`             |
/// | 4      | 2    | version (1)              |
/// | 6      | 2    | dtype (2 = f64)          |
/// | 8      | 4    | vocab size               |
/// | 12     | 4    | dim                      |
/// | 16     | 4    | window                   |
/// | 20     | 8    | vocab checksum           |
/// | 28     | 8    | parameter count          |
/// | 36     | 8·n  | parameters               |
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDCK";
pub const CHECKPOINT_VERSION: u16 = 1;
const DTYPE_F64: u16 = 2;
const CHECKPOINT_HEADER_LEN: usize = 36;

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("checkpoint truncated".into()))
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
