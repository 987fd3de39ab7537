//! The parametric language model and encoder: a small gated recurrent
//! network whose final hidden state is the context encoding and whose output
//! softmax is the next-token distribution.
//!
//! Parameters are stored as 32-bit floats (matching the checkpoint format);
//! all arithmetic runs in f64 so that analytic gradients verify cleanly
//! against central finite differences.

mod generate;
mod train;

pub use generate::{GenConfig, GenStrategy, DEFAULT_REPETITION_PENALTY};
pub(crate) use generate::{decode, TokenScorer};
pub use train::{training_windows, TrainConfig, TrainWindow};

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSeq, Vocabulary, BOS_ID, EOS_ID};

/// Probabilities below this floor clamp before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// Clamps a probability to the log floor. Non-finite values pass through so
/// a diverged model surfaces as a non-finite loss instead of a floored one.
pub(crate) fn floor_prob(p: f64) -> f64 {
    if p.is_finite() {
        p.max(LOG_FLOOR)
    } else {
        p
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"VELUMLM1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("invalid token id {id} (vocabulary size {vocab})")]
    InvalidTokenId { id: u32, vocab: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty sequence")]
    EmptySequence,
    #[error("divergence: non-finite loss at epoch {0}")]
    Divergence(usize),
    #[error("beam width must be at least 1")]
    ZeroBeamWidth,
    #[error("beam width {width} exceeds vocabulary size {vocab}")]
    BeamTooWide { width: usize, vocab: usize },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("repetition penalty must be positive, got {0}")]
    BadPenalty(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error(transparent)]
    Vocab(#[from] crate::corpus::CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub context_window: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden_dim: 64,
            context_window: 32,
            seed: 0,
        }
    }
}

/// All weights of the model. Block layout (row-major):
///
/// - `embed`: vocab x embed
/// - update gate `w_z`: hidden x embed, `u_z`: hidden x hidden, `b_z`: hidden
/// - candidate `w_h`: hidden x embed, `u_h`: hidden x hidden, `b_h`: hidden
/// - output `w_out`: vocab x hidden, `b_out`: vocab
#[derive(Debug, Clone, PartialEq)]
pub struct LmParams {
    pub config: LmConfig,
    pub vocab_size: usize,
    pub(crate) embed: Vec<f32>,
    pub(crate) w_z: Vec<f32>,
    pub(crate) u_z: Vec<f32>,
    pub(crate) b_z: Vec<f32>,
    pub(crate) w_h: Vec<f32>,
    pub(crate) u_h: Vec<f32>,
    pub(crate) b_h: Vec<f32>,
    pub(crate) w_out: Vec<f32>,
    pub(crate) b_out: Vec<f32>,
}

impl LmParams {
    /// Fresh parameters drawn uniformly from [-0.08, 0.08] using the config
    /// seed.
    pub fn init(config: LmConfig, vocab: &Vocabulary) -> LmParams {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let v = vocab.len();
        let e = config.embed_dim;
        let h = config.hidden_dim;
        let mut draw = |n: usize| -> Vec<f32> {
            (0..n).map(|_| rng.random_range(-0.08f32..=0.08)).collect()
        };
        LmParams {
            config,
            vocab_size: v,
            embed: draw(v * e),
            w_z: draw(h * e),
            u_z: draw(h * h),
            b_z: draw(h),
            w_h: draw(h * e),
            u_h: draw(h * h),
            b_h: draw(h),
            w_out: draw(v * h),
            b_out: draw(v),
        }
    }

    /// Zero-weight parameters (uniform output distribution); used by tests
    /// and oracles.
    pub fn zeros(config: LmConfig, vocab_size: usize) -> LmParams {
        let e = config.embed_dim;
        let h = config.hidden_dim;
        LmParams {
            config,
            vocab_size,
            embed: vec![0.0; vocab_size * e],
            w_z: vec![0.0; h * e],
            u_z: vec![0.0; h * h],
            b_z: vec![0.0; h],
            w_h: vec![0.0; h * e],
            u_h: vec![0.0; h * h],
            b_h: vec![0.0; h],
            w_out: vec![0.0; vocab_size * h],
            b_out: vec![0.0; vocab_size],
        }
    }

    pub(crate) fn blocks(&self) -> [&[f32]; 9] {
        [
            &self.embed,
            &self.w_z,
            &self.u_z,
            &self.b_z,
            &self.w_h,
            &self.u_h,
            &self.b_h,
            &self.w_out,
            &self.b_out,
        ]
    }

    pub(crate) fn blocks_mut(&mut self) -> [&mut Vec<f32>; 9] {
        [
            &mut self.embed,
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_h,
            &mut self.u_h,
            &mut self.b_h,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub(crate) fn get_flat(&self, mut i: usize) -> f32 {
        for block in self.blocks() {
            if i < block.len() {
                return block[i];
            }
            i -= block.len();
        }
        panic!("flat index out of range");
    }

    pub(crate) fn set_flat(&mut self, mut i: usize, v: f32) {
        for block in self.blocks_mut() {
            if i < block.len() {
                block[i] = v;
                return;
            }
            i -= block.len();
        }
        panic!("flat index out of range");
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), LmError> {
        match ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            Some(&id) => Err(LmError::InvalidTokenId {
                id,
                vocab: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// One recurrent cell update, in place.
    fn step(&self, h: &mut [f64], token: u32) {
        let e_dim = self.config.embed_dim;
        let h_dim = self.config.hidden_dim;
        let x = &self.embed[token as usize * e_dim..(token as usize + 1) * e_dim];
        let mut h_new = vec![0.0f64; h_dim];
        for j in 0..h_dim {
            let mut a = self.b_z[j] as f64;
            let mut c = self.b_h[j] as f64;
            let wz = &self.w_z[j * e_dim..(j + 1) * e_dim];
            let wh = &self.w_h[j * e_dim..(j + 1) * e_dim];
            for e in 0..e_dim {
                let xe = x[e] as f64;
                a += wz[e] as f64 * xe;
                c += wh[e] as f64 * xe;
            }
            let uz = &self.u_z[j * h_dim..(j + 1) * h_dim];
            let uh = &self.u_h[j * h_dim..(j + 1) * h_dim];
            for i in 0..h_dim {
                a += uz[i] as f64 * h[i];
                c += uh[i] as f64 * h[i];
            }
            let z = sigmoid(a);
            let g = c.tanh();
            h_new[j] = (1.0 - z) * h[j] + z * g;
        }
        h.copy_from_slice(&h_new);
    }

    fn logits(&self, h: &[f64]) -> Vec<f64> {
        let h_dim = self.config.hidden_dim;
        let mut out = Vec::with_capacity(self.vocab_size);
        for v in 0..self.vocab_size {
            let row = &self.w_out[v * h_dim..(v + 1) * h_dim];
            let mut l = self.b_out[v] as f64;
            for j in 0..h_dim {
                l += row[j] as f64 * h[j];
            }
            out.push(l);
        }
        out
    }

    /// Encodes a context to its final hidden state.
    ///
    /// A `<bos>` token is prepended internally (so the empty context is
    /// representable) and only the last `context_window` tokens of the
    /// resulting sequence are consumed, starting from a zero state.
    pub fn encode(&self, context: &TokenSeq) -> Result<Vec<f32>, LmError> {
        Ok(self.state(context.as_slice())?.hidden_f32())
    }

    /// Next-token distribution after `context`: softmax over the output
    /// projection of the encoding, computed with max subtraction.
    pub fn next_dist(&self, context: &TokenSeq) -> Result<Vec<f64>, LmError> {
        let st = self.state(context.as_slice())?;
        Ok(self.state_probs(&st))
    }

    pub(crate) fn state(&self, context: &[u32]) -> Result<LmState, LmError> {
        self.check_ids(context)?;
        let mut history = Vec::with_capacity(context.len() + 1);
        history.push(BOS_ID);
        history.extend_from_slice(context);
        let mut st = LmState {
            history,
            h: vec![0.0; self.config.hidden_dim],
        };
        self.state_recompute(&mut st);
        Ok(st)
    }

    fn state_recompute(&self, st: &mut LmState) {
        let w = self.config.context_window;
        let tail = &st.history[st.history.len().saturating_sub(w)..];
        st.h.iter_mut().for_each(|x| *x = 0.0);
        for &tok in tail {
            self.step(&mut st.h, tok);
        }
    }

    /// Appends one token to the state. While the consumed sequence fits in
    /// the context window this is a single cell update; beyond that the
    /// window is re-run so the state always equals `encode` of the suffix.
    pub(crate) fn state_advance(&self, st: &mut LmState, token: u32) {
        debug_assert!((token as usize) < self.vocab_size);
        st.history.push(token);
        if st.history.len() <= self.config.context_window {
            self.step(&mut st.h, token);
        } else {
            self.state_recompute(st);
        }
    }

    pub(crate) fn state_probs(&self, st: &LmState) -> Vec<f64> {
        softmax(&self.logits(&st.h))
    }

    /// Exponentiated mean negative log-likelihood of `seq` under this model,
    /// with `<bos>` prepended and log-domain accumulation.
    pub fn sequence_perplexity(&self, seq: &TokenSeq) -> Result<f64, LmError> {
        if seq.is_empty() {
            return Err(LmError::EmptySequence);
        }
        self.check_ids(seq.as_slice())?;
        let mut st = self.state(&[])?;
        let mut nll = 0.0f64;
        for &y in seq.as_slice() {
            let p = floor_prob(self.state_probs(&st)[y as usize]);
            nll -= p.ln();
            self.state_advance(&mut st, y);
        }
        Ok((nll / seq.len() as f64).exp())
    }

    /// Decodes a continuation of `prompt` (beam search or seeded sampling).
    pub fn generate(&self, prompt: &TokenSeq, gen: &GenConfig) -> Result<TokenSeq, LmError> {
        let st = self.state(prompt.as_slice())?;
        Ok(TokenSeq::new(decode(self, st, gen, EOS_ID)?))
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        let mut name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        name.push_str(".json");
        path.with_file_name(name)
    }

    /// Writes the binary checkpoint plus a `<file>.json` sidecar holding the
    /// config and vocabulary.
    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<(), LmError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for dim in [
            self.config.embed_dim,
            self.config.hidden_dim,
            self.config.context_window,
            self.vocab_size,
        ] {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for block in self.blocks() {
            for w in block {
                buf.extend_from_slice(&w.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        let sidecar = Sidecar {
            config: self.config,
            vocab: vocab.clone(),
        };
        fs::write(
            Self::sidecar_path(path),
            serde_json::to_string(&sidecar)?,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(LmParams, Vocabulary), LmError> {
        let sidecar: Sidecar =
            serde_json::from_str(&fs::read_to_string(Self::sidecar_path(path))?)?;
        let mut file = fs::File::open(path)?;
        let mut data = Vec::new();
        file.read_to_end(&mut data)?;
        let mut off = 0usize;
        let take = |data: &[u8], off: &mut usize, n: usize| -> Result<Vec<u8>, LmError> {
            if *off + n > data.len() {
                return Err(LmError::BadCheckpoint("truncated file".into()));
            }
            let out = data[*off..*off + n].to_vec();
            *off += n;
            Ok(out)
        };
        let magic = take(&data, &mut off, 8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(LmError::BadCheckpoint("bad magic".into()));
        }
        let read_u32 = |off: &mut usize| -> Result<u32, LmError> {
            let b = take(&data, off, 4)?;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };
        let version = read_u32(&mut off)?;
        if version != CHECKPOINT_VERSION {
            return Err(LmError::BadCheckpoint(format!("unknown version {version}")));
        }
        let embed_dim = read_u32(&mut off)? as usize;
        let hidden_dim = read_u32(&mut off)? as usize;
        let context_window = read_u32(&mut off)? as usize;
        let vocab_size = read_u32(&mut off)? as usize;
        if embed_dim != sidecar.config.embed_dim
            || hidden_dim != sidecar.config.hidden_dim
            || vocab_size != sidecar.vocab.len()
        {
            return Err(LmError::BadCheckpoint(
                "header disagrees with sidecar".into(),
            ));
        }
        let mut params = LmParams::zeros(
            LmConfig {
                embed_dim,
                hidden_dim,
                context_window,
                seed: sidecar.config.seed,
            },
            vocab_size,
        );
        for block in params.blocks_mut() {
            for w in block.iter_mut() {
                let b = if off + 4 <= data.len() {
                    let v = f32::from_le_bytes([
                        data[off],
                        data[off + 1],
                        data[off + 2],
                        data[off + 3],
                    ]);
                    off += 4;
                    v
                } else {
                    return Err(LmError::BadCheckpoint("truncated weight block".into()));
                };
                *w = b;
            }
        }
        if off != data.len() {
            return Err(LmError::BadCheckpoint("trailing bytes".into()));
        }
        Ok((params, sidecar.vocab))
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: LmConfig,
    vocab: Vocabulary,
}

/// Streaming evaluation state: the consumed sequence (with the implicit
/// `<bos>`) plus the current hidden vector.
#[derive(Debug, Clone)]
pub(crate) struct LmState {
    history: Vec<u32>,
    h: Vec<f64>,
}

impl LmState {
    pub(crate) fn hidden_f32(&self) -> Vec<f32> {
        self.h.iter().map(|&x| x as f32).collect()
    }
}

impl TokenScorer for LmParams {
    type State = LmState;

    fn vocab(&self) -> usize {
        self.vocab_size
    }

    fn dist(&self, st: &LmState) -> Vec<f64> {
        self.state_probs(st)
    }

    fn push(&self, st: &mut LmState, token: u32) {
        self.state_advance(st, token);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Softmax with max subtraction.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}
