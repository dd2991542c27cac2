use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{target_nll, EditableLm, Overlay, TokenSeq};
use crate::tensor::{Adam, AdamConfig, Tape};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Ordinary language modelling with Adam; each sample contributes its mean
/// token NLL. Returns the mean batch loss per step.
pub fn pretrain(
    lm: &mut EditableLm,
    corpus: &[TokenSeq],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if corpus.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("empty corpus or batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), lm.params());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        lm.params_mut().zero_grads();
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let seq = &corpus[order[cursor]];
            cursor += 1;
            let tape = Tape::new();
            let b = lm.params().bind(&tape);
            let tr = lm.forward_tape(&tape, &b, &seq.input_ids(lm.bos()), Overlay::Off, false)?;
            let loss = target_nll(tr.logits, seq, true)?.scale(1.0 / cfg.batch_size as f64);
            tape.backward(loss)?;
            total += loss.item();
            lm.params_mut().accumulate_grads(&b)?;
        }
        opt.step(lm.params_mut())?;
        losses.push(total);
    }
    lm.params_mut().zero_grads();
    Ok(losses)
}
