//! SGD training with truncated backpropagation, plus a finite-difference
//! gradient check.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{floor_prob, sigmoid, softmax, LmError, LmParams};
use crate::corpus::{Corpus, BOS_ID};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub gradient_clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 10,
            batch_size: 16,
            gradient_clip_norm: 1.0,
            seed: 0,
        }
    }
}

/// One training window: aligned input and next-token target ids, at most
/// `context_window` positions, starting from a zero hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainWindow {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

/// Chunks every document into consecutive training windows. Each document
/// contributes the stream `<bos> t_1 .. t_n` predicting `t_1 .. t_n`.
pub fn training_windows(corpus: &Corpus, window: usize) -> Vec<TrainWindow> {
    let mut out = Vec::new();
    for doc in &corpus.documents {
        if doc.tokens.is_empty() {
            continue;
        }
        let mut stream = Vec::with_capacity(doc.tokens.len() + 1);
        stream.push(BOS_ID);
        stream.extend_from_slice(doc.tokens.as_slice());
        let n = stream.len() - 1;
        let mut start = 0;
        while start < n {
            let end = (start + window).min(n);
            out.push(TrainWindow {
                inputs: stream[start..end].to_vec(),
                targets: stream[start + 1..end + 1].to_vec(),
            });
            start = end;
        }
    }
    out
}

/// f64 mirror of the parameter blocks, used for gradient accumulation.
struct Grads {
    embed: Vec<f64>,
    w_z: Vec<f64>,
    u_z: Vec<f64>,
    b_z: Vec<f64>,
    w_h: Vec<f64>,
    u_h: Vec<f64>,
    b_h: Vec<f64>,
    w_out: Vec<f64>,
    b_out: Vec<f64>,
}

impl Grads {
    fn zeros_like(p: &LmParams) -> Self {
        Self {
            embed: vec![0.0; p.embed.len()],
            w_z: vec![0.0; p.w_z.len()],
            u_z: vec![0.0; p.u_z.len()],
            b_z: vec![0.0; p.b_z.len()],
            w_h: vec![0.0; p.w_h.len()],
            u_h: vec![0.0; p.u_h.len()],
            b_h: vec![0.0; p.b_h.len()],
            w_out: vec![0.0; p.w_out.len()],
            b_out: vec![0.0; p.b_out.len()],
        }
    }

    fn blocks_mut(&mut self) -> [&mut Vec<f64>; 9] {
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

    fn blocks(&self) -> [&Vec<f64>; 9] {
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

    fn scale(&mut self, s: f64) {
        for block in self.blocks_mut() {
            block.iter_mut().for_each(|g| *g *= s);
        }
    }

    fn global_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    fn get_flat(&self, mut i: usize) -> f64 {
        for block in self.blocks() {
            if i < block.len() {
                return block[i];
            }
            i -= block.len();
        }
        panic!("flat index out of range");
    }
}

impl LmParams {
    /// Forward and backward over one window. Accumulates unscaled gradients
    /// of the summed cross-entropy into `grads` and returns (nll sum, token
    /// count).
    fn window_backward(&self, window: &TrainWindow, grads: &mut Grads) -> (f64, usize) {
        let e_dim = self.config.embed_dim;
        let h_dim = self.config.hidden_dim;
        let v_dim = self.vocab_size;
        let t_len = window.inputs.len();

        // Forward, retaining everything the backward pass needs.
        let mut hs: Vec<Vec<f64>> = Vec::with_capacity(t_len + 1);
        hs.push(vec![0.0; h_dim]);
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        let mut gs: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        let mut ps: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        let mut nll = 0.0f64;
        for t in 0..t_len {
            let tok = window.inputs[t] as usize;
            let x = &self.embed[tok * e_dim..(tok + 1) * e_dim];
            let h_prev = &hs[t];
            let mut z = vec![0.0f64; h_dim];
            let mut g = vec![0.0f64; h_dim];
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
                    a += uz[i] as f64 * h_prev[i];
                    c += uh[i] as f64 * h_prev[i];
                }
                z[j] = sigmoid(a);
                g[j] = c.tanh();
                h_new[j] = (1.0 - z[j]) * h_prev[j] + z[j] * g[j];
            }
            let probs = softmax(&self.logits(&h_new));
            nll -= floor_prob(probs[window.targets[t] as usize]).ln();
            hs.push(h_new);
            zs.push(z);
            gs.push(g);
            ps.push(probs);
        }

        // Backward.
        let mut dh_next = vec![0.0f64; h_dim];
        for t in (0..t_len).rev() {
            let tok = window.inputs[t] as usize;
            let x = &self.embed[tok * e_dim..(tok + 1) * e_dim];
            let h_prev = &hs[t];
            let h_cur = &hs[t + 1];
            let mut dlogits = ps[t].clone();
            dlogits[window.targets[t] as usize] -= 1.0;

            let mut dh = dh_next.clone();
            for v in 0..v_dim {
                let dl = dlogits[v];
                if dl == 0.0 {
                    continue;
                }
                let row = &self.w_out[v * h_dim..(v + 1) * h_dim];
                let grow = &mut grads.w_out[v * h_dim..(v + 1) * h_dim];
                for j in 0..h_dim {
                    grow[j] += dl * h_cur[j];
                    dh[j] += row[j] as f64 * dl;
                }
                grads.b_out[v] += dl;
            }

            let mut da = vec![0.0f64; h_dim];
            let mut dc = vec![0.0f64; h_dim];
            let mut dh_prev = vec![0.0f64; h_dim];
            for j in 0..h_dim {
                let dz = dh[j] * (gs[t][j] - h_prev[j]);
                let dg = dh[j] * zs[t][j];
                dh_prev[j] = dh[j] * (1.0 - zs[t][j]);
                da[j] = dz * zs[t][j] * (1.0 - zs[t][j]);
                dc[j] = dg * (1.0 - gs[t][j] * gs[t][j]);
            }
            let mut dx = vec![0.0f64; e_dim];
            for j in 0..h_dim {
                let (daj, dcj) = (da[j], dc[j]);
                let wz = &self.w_z[j * e_dim..(j + 1) * e_dim];
                let wh = &self.w_h[j * e_dim..(j + 1) * e_dim];
                let gwz = &mut grads.w_z[j * e_dim..(j + 1) * e_dim];
                let gwh = &mut grads.w_h[j * e_dim..(j + 1) * e_dim];
                for e in 0..e_dim {
                    let xe = x[e] as f64;
                    gwz[e] += daj * xe;
                    gwh[e] += dcj * xe;
                    dx[e] += wz[e] as f64 * daj + wh[e] as f64 * dcj;
                }
                let uz = &self.u_z[j * h_dim..(j + 1) * h_dim];
                let uh = &self.u_h[j * h_dim..(j + 1) * h_dim];
                let guz = &mut grads.u_z[j * h_dim..(j + 1) * h_dim];
                let guh = &mut grads.u_h[j * h_dim..(j + 1) * h_dim];
                for i in 0..h_dim {
                    guz[i] += daj * h_prev[i];
                    guh[i] += dcj * h_prev[i];
                    dh_prev[i] += uz[i] as f64 * daj + uh[i] as f64 * dcj;
                }
                grads.b_z[j] += daj;
                grads.b_h[j] += dcj;
            }
            let gx = &mut grads.embed[tok * e_dim..(tok + 1) * e_dim];
            for e in 0..e_dim {
                gx[e] += dx[e];
            }
            dh_next = dh_prev;
        }
        (nll, t_len)
    }

    fn batch_loss(&self, windows: &[&TrainWindow]) -> (f64, usize) {
        let mut grads = Grads::zeros_like(self);
        let mut nll = 0.0;
        let mut tokens = 0;
        for w in windows {
            let (l, t) = self.window_backward(w, &mut grads);
            nll += l;
            tokens += t;
        }
        (nll, tokens)
    }

    /// Trains a copy of the parameters by SGD over document windows:
    /// per-token mean cross-entropy, per-batch global-norm gradient clipping,
    /// window order reshuffled each epoch from the config seed. Returns the
    /// trained parameters and the per-epoch mean loss history.
    pub fn train(
        &self,
        corpus: &Corpus,
        cfg: &TrainConfig,
    ) -> Result<(LmParams, Vec<f64>), LmError> {
        if corpus.documents.is_empty() {
            return Err(LmError::EmptyCorpus);
        }
        for doc in &corpus.documents {
            self.check_ids(doc.tokens.as_slice())?;
        }
        let windows = training_windows(corpus, self.config.context_window);
        if windows.is_empty() {
            return Err(LmError::EmptyCorpus);
        }
        let batch_size = cfg.batch_size.max(1);
        let mut params = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..windows.len()).collect();
            order.shuffle(&mut rng);
            let mut epoch_nll = 0.0f64;
            let mut epoch_tokens = 0usize;
            for batch in order.chunks(batch_size) {
                let mut grads = Grads::zeros_like(&params);
                let mut batch_tokens = 0usize;
                for &wi in batch {
                    let (nll, tokens) = params.window_backward(&windows[wi], &mut grads);
                    epoch_nll += nll;
                    batch_tokens += tokens;
                }
                epoch_tokens += batch_tokens;
                grads.scale(1.0 / batch_tokens as f64);
                let norm = grads.global_norm();
                if norm > cfg.gradient_clip_norm {
                    grads.scale(cfg.gradient_clip_norm / norm);
                }
                let lr = cfg.learning_rate;
                for (block, gblock) in params.blocks_mut().into_iter().zip(grads.blocks()) {
                    for (w, g) in block.iter_mut().zip(gblock.iter()) {
                        *w = (*w as f64 - lr * g) as f32;
                    }
                }
            }
            let mean = epoch_nll / epoch_tokens as f64;
            if !mean.is_finite() {
                return Err(LmError::Divergence(epoch));
            }
            history.push(mean);
        }
        Ok((params, history))
    }

    /// Compares analytic gradients against central finite differences with
    /// step `h` on `coords` randomly chosen coordinates; returns the largest
    /// relative error.
    pub fn grad_check_with(
        &self,
        windows: &[TrainWindow],
        coords: usize,
        h: f64,
    ) -> Result<f64, LmError> {
        if windows.is_empty() {
            return Err(LmError::EmptyCorpus);
        }
        let refs: Vec<&TrainWindow> = windows.iter().collect();
        let mut grads = Grads::zeros_like(self);
        let mut total_tokens = 0usize;
        for w in windows {
            let (_, t) = self.window_backward(w, &mut grads);
            total_tokens += t;
        }
        grads.scale(1.0 / total_tokens as f64);

        let n = self.n_params();
        let picks = rand::seq::index::sample(
            &mut ChaCha8Rng::seed_from_u64(0x5eed),
            n,
            coords.min(n),
        );
        let mut max_rel = 0.0f64;
        for i in picks {
            let w = self.get_flat(i);
            let wp = (w as f64 + h) as f32;
            let wm = (w as f64 - h) as f32;
            let mut plus = self.clone();
            plus.set_flat(i, wp);
            let mut minus = self.clone();
            minus.set_flat(i, wm);
            let (lp, tp) = plus.batch_loss(&refs);
            let (lm, tm) = minus.batch_loss(&refs);
            let numeric = (lp / tp as f64 - lm / tm as f64) / (wp as f64 - wm as f64);
            let analytic = grads.get_flat(i);
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        Ok(max_rel)
    }

    /// Gradient check at the standard settings (200 coordinates, h = 1e-3).
    pub fn grad_check(&self, windows: &[TrainWindow]) -> Result<f64, LmError> {
        self.grad_check_with(windows, 200, 1e-3)
    }
}
