//! Decoder-only toy language model with editable FFN down-projections.
//!
//! Each block is `x + attn(x)` followed by `x + relu(x W_in + b_in) W_out +
//! b_out`; there is no normalisation layer. The `W_out` matrices of the
//! deepest `edit_layer_count` blocks are editable: an additive overlay can be
//! placed on top of each without touching the base weights.

mod pretrain;
mod vocab;

pub use pretrain::{pretrain, PretrainConfig};
pub use vocab::{Vocab, BOS};

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ckpt::Container;
use crate::tensor::{kernels, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_edit_layers")]
    pub edit_layer_count: usize,
}

fn default_edit_layers() -> usize {
    3
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 || self.d_model == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return fail(format!("degenerate model size {self:?}"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.edit_layer_count == 0 || self.edit_layer_count > self.n_layers
        {
            return fail(format!(
                "edit_layer_count {} must be in 1..={}",
                self.edit_layer_count, self.n_layers
            ));
        }
        Ok(())
    }

    fn first_edit_layer(&self) -> usize {
        self.n_layers - self.edit_layer_count
    }
}

/// A prompt/target pair of token ids. `<bos>` is not stored; it is
/// prepended by [`TokenSeq::input_ids`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
    #[serde(default)]
    pub text: String,
}

impl TokenSeq {
    pub fn new(prompt: Vec<usize>, target: Vec<usize>) -> Result<Self> {
        if target.is_empty() {
            return Err(Error::Tokenize("empty target".into()));
        }
        Ok(Self {
            prompt,
            target,
            text: String::new(),
        })
    }

    pub fn encode(vocab: &Vocab, prompt: &str, target: &str) -> Result<Self> {
        let mut s = Self::new(vocab.encode(prompt)?, vocab.encode(target)?)?;
        s.text = format!("{prompt} {target}");
        Ok(s)
    }

    /// `<bos>`, the prompt and all target tokens but the last.
    pub fn input_ids(&self, bos: usize) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.len());
        ids.push(bos);
        ids.extend_from_slice(&self.prompt);
        ids.extend_from_slice(&self.target[..self.target.len() - 1]);
        ids
    }

    /// Input positions whose next-token prediction is a target token.
    pub fn target_positions(&self) -> Range<usize> {
        self.prompt.len()..self.prompt.len() + self.target.len()
    }

    /// Length of [`TokenSeq::input_ids`].
    pub fn len(&self) -> usize {
        self.prompt.len() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One editable weight matrix: the FFN down-projection of `layer`
/// (counted from 1), of shape `[d_in, d_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditableMatrix {
    pub index: usize,
    pub layer: usize,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Clone, Debug)]
struct LayerIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    w_in: ParamId,
    b_in: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    tok: ParamId,
    pos: ParamId,
    layers: Vec<LayerIds>,
    unembed: ParamId,
    b_unembed: ParamId,
}

/// Where the editable matrices' overlays come from during a taped forward.
#[derive(Clone, Copy)]
pub enum Overlay<'a, 't> {
    /// The overlays stored on the model, recorded as constants.
    Stored,
    /// Base weights only.
    Off,
    /// One tape variable per editable matrix.
    Vars(&'a [Var<'t>]),
}

/// Outputs of a taped forward pass.
pub struct Trace<'t> {
    pub logits: Var<'t>,
    /// Per editable matrix: its input rows (the FFN hidden activations).
    pub ffn_in: Vec<Var<'t>>,
    /// Per editable matrix: its pre-bias output, watched so the gradient
    /// reaching it can be read after backward.
    pub ffn_out: Vec<Var<'t>>,
}

#[derive(Clone, Debug)]
pub struct EditableLm {
    config: LmConfig,
    params: ParamStore,
    ids: Ids,
    overlays: Vec<Option<Tensor>>,
}

impl EditableLm {
    pub fn new<R: Rng>(config: LmConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let resid = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let mut p = ParamStore::new();
        p.add_normal("tok_emb", &[v, d], 0.1, rng);
        p.add_normal("pos_emb", &[config.max_seq_len, d], 0.1, rng);
        for l in 0..config.n_layers {
            for w in ["wq", "wk", "wv"] {
                p.add_normal(format!("l{l}.{w}"), &[d, d], lin(d), rng);
            }
            p.add_normal(format!("l{l}.wo"), &[d, d], lin(d) * resid, rng);
            p.add_normal(format!("l{l}.w_in"), &[d, f], lin(d), rng);
            p.add_zeros(format!("l{l}.b_in"), &[f]);
            p.add_normal(format!("l{l}.w_out"), &[f, d], lin(f) * resid, rng);
            p.add_zeros(format!("l{l}.b_out"), &[d]);
        }
        p.add_normal("unembed", &[d, v], lin(d), rng);
        p.add_zeros("b_unembed", &[v]);
        Self::from_params(config, p)
    }

    /// A model with every weight zero; its next-token distribution is uniform.
    pub fn zeros(config: LmConfig) -> Result<Self> {
        let mut m = Self::new(config, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        m.params.tensors_mut().for_each(|t| t.data_mut().fill(0.0));
        Ok(m)
    }

    pub fn from_params(config: LmConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let find = |n: &str| {
            params
                .find(n)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{n}`")))
        };
        let layers = (0..config.n_layers)
            .map(|l| {
                Ok(LayerIds {
                    wq: find(&format!("l{l}.wq"))?,
                    wk: find(&format!("l{l}.wk"))?,
                    wv: find(&format!("l{l}.wv"))?,
                    wo: find(&format!("l{l}.wo"))?,
                    w_in: find(&format!("l{l}.w_in"))?,
                    b_in: find(&format!("l{l}.b_in"))?,
                    w_out: find(&format!("l{l}.w_out"))?,
                    b_out: find(&format!("l{l}.b_out"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ids = Ids {
            tok: find("tok_emb")?,
            pos: find("pos_emb")?,
            layers,
            unembed: find("unembed")?,
            b_unembed: find("b_unembed")?,
        };
        let (v, d) = (config.vocab_size, config.d_model);
        if params.get(ids.tok).shape() != [v, d]
            || params.get(ids.pos).shape() != [config.max_seq_len, d]
        {
            return Err(Error::Checkpoint(
                "embedding shapes disagree with config".into(),
            ));
        }
        Ok(Self {
            overlays: vec![None; config.edit_layer_count],
            config,
            params,
            ids,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Editable matrices, shallowest first.
    pub fn editable_matrices(&self) -> Vec<EditableMatrix> {
        let first = self.config.first_edit_layer();
        (0..self.config.edit_layer_count)
            .map(|i| EditableMatrix {
                index: i,
                layer: first + i + 1,
                d_in: self.config.d_ff,
                d_out: self.config.d_model,
            })
            .collect()
    }

    pub fn editable_param(&self, index: usize) -> ParamId {
        self.ids.layers[self.config.first_edit_layer() + index].w_out
    }

    pub fn base_weight(&self, index: usize) -> &Tensor {
        self.params.get(self.editable_param(index))
    }

    pub fn overlay(&self, index: usize) -> Option<&Tensor> {
        self.overlays[index].as_ref()
    }

    pub fn overlays(&self) -> &[Option<Tensor>] {
        &self.overlays
    }

    /// Sets the overlay of editable matrix `index` (the Γ operation).
    pub fn set_overlay(&mut self, index: usize, delta: Tensor) -> Result<()> {
        let shape = self.base_weight(index).shape().to_vec();
        if delta.shape() != shape.as_slice() {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "set_overlay",
                lhs: shape,
                rhs: delta.shape().to_vec(),
            }
            .into());
        }
        self.overlays[index] = Some(delta.with_requires_grad(false));
        Ok(())
    }

    /// Adds `delta` onto the current overlay of `index`.
    pub fn add_overlay(&mut self, index: usize, delta: &Tensor) -> Result<()> {
        let next = match &self.overlays[index] {
            Some(o) => o.add(delta)?,
            None => delta.clone(),
        };
        self.set_overlay(index, next)
    }

    pub fn clear_overlays(&mut self) {
        self.overlays.iter_mut().for_each(|o| *o = None);
    }

    pub fn bos(&self) -> usize {
        0
    }

    /// Records the forward pass of `input` on `tape`.
    pub fn forward_tape<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        input: &[usize],
        overlay: Overlay<'_, 't>,
        capture: bool,
    ) -> Result<Trace<'t>> {
        let c = &self.config;
        if input.is_empty() || input.len() > c.max_seq_len {
            return Err(Error::Tokenize(format!(
                "sequence length {} outside 1..={}",
                input.len(),
                c.max_seq_len
            )));
        }
        if let Some(&bad) = input.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Tokenize(format!(
                "token id {bad} >= vocab size {}",
                c.vocab_size
            )));
        }
        if let Overlay::Vars(v) = overlay {
            if v.len() != c.edit_layer_count {
                return Err(Error::Config(format!(
                    "{} overlay vars for {} editable matrices",
                    v.len(),
                    c.edit_layer_count
                )));
            }
        }
        let positions: Vec<usize> = (0..input.len()).collect();
        let mut x = tape
            .gather_rows(b[self.ids.tok], input)?
            .add(tape.gather_rows(b[self.ids.pos], &positions)?)?;
        let first = c.first_edit_layer();
        let mut ffn_in = Vec::new();
        let mut ffn_out = Vec::new();
        for (li, l) in self.ids.layers.iter().enumerate() {
            x = x.add(self.attention(tape, b, l, x)?)?;
            let hidden = x.matmul(b[l.w_in])?.add_row(b[l.b_in])?.relu();
            let edit = li.checked_sub(first);
            let w = match (edit, overlay) {
                (Some(e), Overlay::Stored) => match &self.overlays[e] {
                    Some(o) => b[l.w_out].add(tape.constant(o))?,
                    None => b[l.w_out],
                },
                (Some(e), Overlay::Vars(v)) => b[l.w_out].add(v[e])?,
                _ => b[l.w_out],
            };
            let mut z = hidden.matmul(w)?;
            if capture && edit.is_some() {
                z = z.watch();
                ffn_in.push(hidden);
                ffn_out.push(z);
            }
            x = x.add(z.add_row(b[l.b_out])?)?;
        }
        let logits = x
            .matmul(b[self.ids.unembed])?
            .add_row(b[self.ids.b_unembed])?;
        Ok(Trace {
            logits,
            ffn_in,
            ffn_out,
        })
    }

    fn attention<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        l: &LayerIds,
        x: Var<'t>,
    ) -> Result<Var<'t>> {
        let h = self.config.n_heads;
        let dh = self.config.d_model / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = x.matmul(b[l.wq])?;
        let k = x.matmul(b[l.wk])?;
        let v = x.matmul(b[l.wv])?;
        let heads = (0..h)
            .map(|i| {
                let (s, e) = (i * dh, (i + 1) * dh);
                let scores = q
                    .slice_cols(s, e)?
                    .matmul(k.slice_cols(s, e)?.t())?
                    .scale(scale);
                scores.causal_mask().softmax(1)?.matmul(v.slice_cols(s, e)?)
            })
            .collect::<crate::tensor::Result<Vec<_>>>()?;
        let cat = if h == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        Ok(cat.matmul(b[l.wo])?)
    }

    /// Logits `[len, vocab]` for `input` (which must already start with `<bos>`).
    pub fn logits(&self, input: &[usize]) -> Result<Tensor> {
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        Ok(self
            .forward_tape(&tape, &b, input, Overlay::Stored, false)?
            .logits
            .value())
    }

    /// Next-token log-probabilities at each target position of `seq`.
    pub fn target_log_probs(&self, seq: &TokenSeq) -> Result<Vec<Vec<f64>>> {
        let logits = self.logits(&seq.input_ids(self.bos()))?;
        Ok(seq
            .target_positions()
            .map(|p| {
                let mut out = vec![0.0; self.config.vocab_size];
                kernels::log_softmax_slice(logits.row(p), &mut out);
                out
            })
            .collect())
    }

    /// Sum of target-token log-probabilities under teacher forcing.
    pub fn log_likelihood(&self, seq: &TokenSeq) -> Result<f64> {
        let lp = self.target_log_probs(seq)?;
        Ok(lp.iter().zip(&seq.target).map(|(row, &t)| row[t]).sum())
    }

    /// Teacher-forced argmax at each target position.
    pub fn target_argmax(&self, seq: &TokenSeq) -> Result<Vec<usize>> {
        let logits = self.logits(&seq.input_ids(self.bos()))?;
        Ok(seq
            .target_positions()
            .map(|p| kernels::argmax(logits.row(p)))
            .collect())
    }

    /// Greedy continuation of `prompt` (without `<bos>`). Stops early at the
    /// context limit.
    pub fn greedy_decode(&self, prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(prompt.len() + 1 + max_new);
        ids.push(self.bos());
        ids.extend_from_slice(prompt);
        let mut out = Vec::with_capacity(max_new);
        while out.len() < max_new && ids.len() < self.config.max_seq_len {
            let logits = self.logits(&ids)?;
            let next = kernels::argmax(logits.row(ids.len() - 1));
            out.push(next);
            ids.push(next);
        }
        Ok(out)
    }

    pub fn to_container(&self, vocab: &Vocab) -> Container {
        let meta = serde_json::json!({ "config": self.config, "vocab": vocab });
        let mut c = Container::new("lm", meta);
        for (name, t) in self.params.iter() {
            c.push(name, t);
        }
        c
    }

    pub fn from_container(c: Container) -> Result<(Self, Vocab)> {
        if c.kind != "lm" {
            return Err(Error::Checkpoint(format!(
                "expected an lm checkpoint, got `{}`",
                c.kind
            )));
        }
        let config: LmConfig = serde_json::from_value(c.meta["config"].clone())?;
        let vocab: Vocab = serde_json::from_value(c.meta["vocab"].clone())?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Checkpoint(
                "vocabulary size disagrees with config".into(),
            ));
        }
        let mut params = ParamStore::new();
        for (name, t) in c.tensors {
            params.add(name, t);
        }
        Ok((Self::from_params(config, params)?, vocab))
    }

    pub fn save(&self, vocab: &Vocab, path: &Path) -> Result<()> {
        self.to_container(vocab).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Vocab)> {
        Self::from_container(Container::load(path)?)
    }
}

/// Negative log-likelihood of `seq`'s targets from taped `logits`; summed
/// over target tokens, or averaged when `mean` is set.
pub fn target_nll<'t>(logits: Var<'t>, seq: &TokenSeq, mean: bool) -> Result<Var<'t>> {
    let (_, v) = logits.dims2();
    let idx: Vec<usize> = seq
        .target_positions()
        .zip(&seq.target)
        .map(|(p, &t)| p * v + t)
        .collect();
    let s = logits.log_softmax_rows().select(&idx)?.sum();
    let scale = if mean { -1.0 / idx.len() as f64 } else { -1.0 };
    Ok(s.scale(scale))
}

/// `KL(p || q)` averaged over `positions`, where `p` holds constant
/// log-probabilities (one row per position) and `q` comes from `logits`.
pub fn kl_to_reference<'t>(
    logits: Var<'t>,
    positions: &[usize],
    p_log: &[Vec<f64>],
) -> Result<Var<'t>> {
    let tape = logits.tape();
    let (_, v) = logits.dims2();
    if positions.len() != p_log.len() || positions.is_empty() {
        return Err(Error::Data(format!(
            "{} reference rows for {} positions",
            p_log.len(),
            positions.len()
        )));
    }
    let idx: Vec<usize> = positions
        .iter()
        .flat_map(|&p| (p * v)..(p + 1) * v)
        .collect();
    let p: Vec<f64> = p_log
        .iter()
        .flat_map(|r| r.iter().map(|x| x.exp()))
        .collect();
    let entropy_term: f64 = p_log
        .iter()
        .flat_map(|r| {
            r.iter().map(|&lp| {
                if lp == f64::NEG_INFINITY {
                    0.0
                } else {
                    lp.exp() * lp
                }
            })
        })
        .sum();
    let q_log = logits.log_softmax_rows().select(&idx)?;
    let cross = q_log.mul(tape.constant_raw(vec![idx.len()], p))?.sum();
    let n = positions.len() as f64;
    Ok(cross.scale(-1.0 / n).add_scalar(entropy_term / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> LmConfig {
        LmConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 4,
            n_heads: 2,
            d_ff: 12,
            max_seq_len: 10,
            edit_layer_count: 3,
        }
    }

    #[test]
    fn editable_layers_are_the_last_ones() {
        let m = EditableLm::zeros(cfg()).unwrap();
        let layers: Vec<usize> = m.editable_matrices().iter().map(|e| e.layer).collect();
        assert_eq!(layers, vec![2, 3, 4]);
        assert_eq!(m.editable_matrices(), m.editable_matrices());
        let one = EditableLm::zeros(LmConfig {
            edit_layer_count: 1,
            ..cfg()
        })
        .unwrap();
        assert_eq!(one.editable_matrices()[0].layer, 4);
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = EditableLm::zeros(cfg()).unwrap();
        let seq = TokenSeq::new(vec![3, 4], vec![5, 6]).unwrap();
        let ll = m.log_likelihood(&seq).unwrap();
        assert!((ll - 2.0 * (1.0f64 / 11.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn causal_logits() {
        let m = EditableLm::new(cfg(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let a = m.logits(&[0, 1, 2, 3, 4]).unwrap();
        let b = m.logits(&[0, 1, 2, 9, 7]).unwrap();
        assert_eq!(&a.data()[..3 * 11], &b.data()[..3 * 11]);
    }

    #[test]
    fn rejects_overlong_and_bad_ids() {
        let m = EditableLm::zeros(cfg()).unwrap();
        assert!(m.logits(&[0; 11]).is_err());
        assert!(m.logits(&[0, 11]).is_err());
        assert!(m.greedy_decode(&[1], 0).unwrap().is_empty());
    }

    #[test]
    fn greedy_ties_pick_lowest_id() {
        let m = EditableLm::zeros(cfg()).unwrap();
        assert_eq!(m.greedy_decode(&[4], 2).unwrap(), vec![0, 0]);
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let m = EditableLm::new(cfg(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let seq = TokenSeq::new(vec![3, 4], vec![5, 6]).unwrap();
        let p = m.target_log_probs(&seq).unwrap();
        let tape = Tape::new();
        let b = m.params().bind_frozen(&tape);
        let tr = m
            .forward_tape(&tape, &b, &seq.input_ids(0), Overlay::Stored, false)
            .unwrap();
        let pos: Vec<usize> = seq.target_positions().collect();
        let kl = kl_to_reference(tr.logits, &pos, &p).unwrap().item();
        assert!(kl.abs() < 1e-12, "{kl}");
    }
}
