//! Meta-training of the auxiliary network with a sequence-length curriculum.
//!
//! Each iteration samples `T` uniformly from `1..=T_now`, draws `T` distinct
//! records, captures their signals, runs the network over them in order and
//! applies the final running delta to the frozen model. The loss is the sum
//! of edit NLL, rephrase NLL and the KL from the pre-edit model on locality
//! probes. Captured signals are treated as constants.
//!
//! The gradient is taken in two stages: the model loss is differentiated
//! with respect to each final running delta `ΔW̃_m`, then `Σ ΔW̃_m ⊙ G_m`
//! is differentiated on the network's own tape.

mod run;

pub use run::{checkpoint_path, select_best, IterLog, Snapshot, Trainer};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::EditRecord;
use crate::lm::{kl_to_reference, target_nll, EditableLm, Overlay, TokenSeq};
use crate::net::{DafnetParams, Stream};
use crate::signal::{capture_signal, EditSignal};
use crate::tensor::{kernels, Adam, Tape, Tensor};
use crate::{Error, Result};

/// Which model the signals of a batch are captured against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureMode {
    /// Fact `t` against the model carrying the running delta of facts
    /// `1..t`, as at serving time.
    #[default]
    Progressive,
    /// Every fact against the unedited model.
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub t_max: usize,
    pub ema_alpha: f64,
    /// Initial and reset value of the EMA trackers; `ln V + 1` when unset.
    pub l_ini: Option<f64>,
    pub i_inc: usize,
    pub gamma: f64,
    /// Hard cap on iterations.
    pub i_max: usize,
    /// Iterations run after `T_now` reaches `t_max`.
    pub extra_iters: usize,
    pub checkpoint_every: usize,
    pub lr: f64,
    pub seed: u64,
    pub capture: CaptureMode,
    /// Average NLL over a sample's target tokens instead of summing.
    pub mean_nll: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_max: 50,
            ema_alpha: 0.01,
            l_ini: None,
            i_inc: 100,
            gamma: 0.25,
            i_max: 5000,
            extra_iters: 3000,
            checkpoint_every: 100,
            lr: 3e-4,
            seed: 0,
            capture: CaptureMode::Progressive,
            mean_nll: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) || self.gamma <= 0.0 || self.t_max == 0
        {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub t_now: usize,
    pub l_ema: f64,
    pub l_min: f64,
    pub i_min: usize,
    /// Iterations completed.
    pub iter: usize,
    pub l_ini: f64,
}

impl CurriculumState {
    pub fn new(l_ini: f64) -> Self {
        Self {
            t_now: 1,
            l_ema: l_ini,
            l_min: l_ini,
            i_min: 1,
            iter: 0,
            l_ini,
        }
    }
}

/// Records iteration `state.iter + 1` with loss `l_total`.
pub fn curriculum_update(
    state: &CurriculumState,
    l_total: f64,
    cfg: &TrainConfig,
) -> CurriculumState {
    let mut s = state.clone();
    s.iter += 1;
    let i = s.iter;
    s.l_ema = (1.0 - cfg.ema_alpha) * s.l_ema + cfg.ema_alpha * l_total;
    if s.l_ema < s.l_min {
        s.l_min = s.l_ema;
        s.i_min = i;
    }
    if i - s.i_min > cfg.i_inc && s.t_now < cfg.t_max {
        let step = 10.max((cfg.gamma * s.t_now as f64).floor() as usize);
        s.t_now = (s.t_now + step).min(cfg.t_max);
        s.l_min = s.l_ini;
        s.l_ema = s.l_ini;
        s.i_min = i;
    }
    s
}

/// A locality probe with the pre-edit model's log-probabilities at every
/// input position.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalityProbe {
    pub seq: TokenSeq,
    pub reference: Vec<Vec<f64>>,
}

impl LocalityProbe {
    pub fn new(lm: &EditableLm, seq: TokenSeq) -> Result<Self> {
        let tape = Tape::new();
        let b = lm.params().bind_frozen(&tape);
        let logits = lm
            .forward_tape(&tape, &b, &seq.input_ids(lm.bos()), Overlay::Off, false)?
            .logits
            .value();
        let (rows, v) = logits.dims2().expect("matrix");
        let reference = (0..rows)
            .map(|r| {
                let mut out = vec![0.0; v];
                kernels::log_softmax_slice(logits.row(r), &mut out);
                out
            })
            .collect();
        Ok(Self { seq, reference })
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.reference.len()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub edit: TokenSeq,
    pub generality: Vec<TokenSeq>,
    pub locality: Vec<LocalityProbe>,
}

impl TrainRecord {
    /// Caches the base model's locality distributions for `r`.
    pub fn prepare(lm: &EditableLm, r: &EditRecord) -> Result<Self> {
        Ok(Self {
            edit: r.edit.clone(),
            generality: r.generality.clone(),
            locality: r
                .locality
                .iter()
                .map(|s| LocalityProbe::new(lm, s.clone()))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub rel: f64,
    pub gen: f64,
    pub loc: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.rel + self.gen + self.loc
    }
}

/// Summed (per-sample mean or summed) target NLL of `seqs` under `lm` with
/// its stored overlays.
pub fn loss_nll(lm: &EditableLm, seqs: &[TokenSeq], mean: bool) -> Result<f64> {
    let mut total = 0.0;
    for s in seqs {
        let ll = lm.log_likelihood(s)?;
        total -= if mean { ll / s.target.len() as f64 } else { ll };
    }
    Ok(total)
}

/// Reliability loss: NLL of the edit samples under the edited model.
pub fn loss_reliability(ft: &EditableLm, edits: &[TokenSeq], mean: bool) -> Result<f64> {
    loss_nll(ft, edits, mean)
}

/// Generality loss: NLL of every edit's rephrases.
pub fn loss_generality(ft: &EditableLm, rephrases: &[Vec<TokenSeq>], mean: bool) -> Result<f64> {
    rephrases.iter().map(|g| loss_nll(ft, g, mean)).sum()
}

/// Locality loss: position-averaged `KL(f || f_T)` per probe, summed.
pub fn loss_locality(ft: &EditableLm, probes: &[LocalityProbe]) -> Result<f64> {
    let mut total = 0.0;
    for p in probes {
        let tape = Tape::new();
        let b = ft.params().bind_frozen(&tape);
        let tr = ft.forward_tape(
            &tape,
            &b,
            &p.seq.input_ids(ft.bos()),
            Overlay::Stored,
            false,
        )?;
        total += kl_to_reference(tr.logits, &p.positions(), &p.reference)?.item();
    }
    Ok(total)
}

/// Model losses for the final running deltas, and optionally their
/// gradients with respect to each delta.
fn model_losses(
    lm: &EditableLm,
    batch: &[&TrainRecord],
    deltas: &[Tensor],
    mean: bool,
    want_grad: bool,
) -> Result<(LossParts, Vec<Tensor>)> {
    let mut grads: Vec<Tensor> = deltas.iter().map(|d| Tensor::zeros(d.shape())).collect();
    let mut parts = LossParts::default();
    let mut run = |seq: &TokenSeq, probe: Option<&LocalityProbe>| -> Result<f64> {
        let tape = Tape::new();
        let b = lm.params().bind_frozen(&tape);
        let vars: Vec<_> = deltas
            .iter()
            .map(|d| {
                if want_grad {
                    tape.leaf(&d.clone().with_requires_grad(true))
                } else {
                    tape.constant(d)
                }
            })
            .collect();
        let tr = lm.forward_tape(
            &tape,
            &b,
            &seq.input_ids(lm.bos()),
            Overlay::Vars(&vars),
            false,
        )?;
        let loss = match probe {
            Some(p) => kl_to_reference(tr.logits, &p.positions(), &p.reference)?,
            None => target_nll(tr.logits, seq, mean)?,
        };
        if want_grad {
            tape.backward(loss)?;
            for (g, v) in grads.iter_mut().zip(&vars) {
                if let Some(dg) = v.grad() {
                    *g = g.add(&dg)?;
                }
            }
        }
        Ok(loss.item())
    };
    for r in batch {
        parts.rel += run(&r.edit, None)?;
        for g in &r.generality {
            parts.gen += run(g, None)?;
        }
        for p in &r.locality {
            parts.loc += run(&p.seq, Some(p))?;
        }
    }
    Ok((parts, grads))
}

/// Signals of `batch`, per fact and editable matrix. In progressive mode
/// the network is run forward so that each fact sees the running delta of
/// the facts before it.
pub fn capture_batch(
    lm: &EditableLm,
    net: &DafnetParams,
    batch: &[&TrainRecord],
    mode: CaptureMode,
) -> Result<Vec<Vec<EditSignal>>> {
    let mats = lm.editable_matrices();
    let mut work = lm.clone();
    work.clear_overlays();
    if mode == CaptureMode::Batch {
        return batch
            .iter()
            .map(|r| capture_signal(&work, &r.edit))
            .collect();
    }
    let tapes: Vec<Tape> = mats.iter().map(|_| Tape::new()).collect();
    let bounds: Vec<_> = tapes.iter().map(|t| net.store().bind_frozen(t)).collect();
    let mut streams = mats
        .iter()
        .map(|m| Stream::new(net, m.d_in, m.d_out))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(batch.len());
    for r in batch {
        let signals = capture_signal(&work, &r.edit)?;
        for (m, s) in mats.iter().zip(&signals) {
            let step = streams[m.index].step(net, &bounds[m.index], s)?;
            work.set_overlay(m.index, step.accum.value())?;
        }
        out.push(signals);
    }
    Ok(out)
}

/// `L_total` for fixed signals, and when `accumulate` is set its gradient
/// added into the network's parameter gradients.
pub fn batch_loss(
    lm: &EditableLm,
    net: &mut DafnetParams,
    batch: &[&TrainRecord],
    signals: &[Vec<EditSignal>],
    mean: bool,
    accumulate: bool,
) -> Result<LossParts> {
    if signals.len() != batch.len() || batch.is_empty() {
        return Err(Error::Data(format!(
            "{} signal sets for {} records",
            signals.len(),
            batch.len()
        )));
    }
    let mats = lm.editable_matrices();
    let tapes: Vec<Tape> = mats.iter().map(|_| Tape::new()).collect();
    let bounds: Vec<_> = tapes
        .iter()
        .map(|t| {
            if accumulate {
                net.store().bind(t)
            } else {
                net.store().bind_frozen(t)
            }
        })
        .collect();
    let mut finals = Vec::with_capacity(mats.len());
    for m in &mats {
        let mut stream = Stream::new(net, m.d_in, m.d_out)?;
        for sig in signals {
            stream.step(net, &bounds[m.index], &sig[m.index])?;
        }
        finals.push(stream.accum().expect("nonempty batch"));
    }
    let deltas: Vec<Tensor> = finals.iter().map(|v| v.value()).collect();
    let (parts, grads) = model_losses(lm, batch, &deltas, mean, accumulate)?;
    if accumulate {
        for ((tape, fin), g) in tapes.iter().zip(&finals).zip(&grads) {
            let surrogate = fin.mul(tape.constant(g))?.sum();
            tape.backward(surrogate)?;
        }
        for b in &bounds {
            net.store_mut().accumulate_grads(b)?;
        }
    }
    Ok(parts)
}

/// Deterministic batch for iteration `iter` (from 1): `T` and record indices.
pub fn sample_batch(
    seed: u64,
    iter: usize,
    t_now: usize,
    n_records: usize,
) -> Result<(usize, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter as u64);
    let t = rng.gen_range(1..=t_now);
    if t > n_records {
        return Err(Error::Data(format!(
            "cannot draw {t} distinct records from {n_records}"
        )));
    }
    Ok((t, sample(&mut rng, n_records, t).into_vec()))
}

/// One optimisation step on `batch` (whose length must not exceed `t_now`).
pub fn train_iteration(
    lm: &EditableLm,
    net: &mut DafnetParams,
    opt: &mut Adam,
    batch: &[&TrainRecord],
    t_now: usize,
    cfg: &TrainConfig,
) -> Result<LossParts> {
    if batch.len() > t_now || batch.is_empty() {
        return Err(Error::Data(format!(
            "batch of {} facts with T_now = {t_now}",
            batch.len()
        )));
    }
    let signals = capture_batch(lm, net, batch, cfg.capture)?;
    net.store_mut().zero_grads();
    let parts = batch_loss(lm, net, batch, &signals, cfg.mean_nll, true)?;
    opt.step(net.store_mut())?;
    net.store_mut().zero_grads();
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(t_max: usize) -> TrainConfig {
        TrainConfig {
            t_max,
            ema_alpha: 0.01,
            i_inc: 3,
            gamma: 0.25,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ema_formula() {
        let s = CurriculumState::new(1.0);
        let n = curriculum_update(&s, 0.5, &cfg(50));
        assert!((n.l_ema - 0.995).abs() < 1e-15);
        assert_eq!(n.i_min, 1);
    }

    #[test]
    fn growth_steps() {
        let c = cfg(1000);
        let mut s = CurriculumState::new(1.0);
        s.t_now = 100;
        s.iter = 10;
        s.i_min = 6;
        let n = curriculum_update(&s, 5.0, &c);
        assert_eq!(n.t_now, 125);
        assert_eq!(n.l_ema, 1.0);
        assert_eq!(n.i_min, 11);
    }

    #[test]
    fn growth_is_capped() {
        let mut s = CurriculumState::new(1.0);
        s.t_now = 45;
        s.iter = 10;
        let n = curriculum_update(&s, 5.0, &cfg(50));
        assert_eq!(n.t_now, 50);
        let mut m = n.clone();
        m.iter = 100;
        assert_eq!(curriculum_update(&m, 5.0, &cfg(50)).t_now, 50);
    }

    #[test]
    fn batch_sampling_is_deterministic() {
        let a = sample_batch(7, 3, 10, 40).unwrap();
        assert_eq!(a, sample_batch(7, 3, 10, 40).unwrap());
        assert!((1..=10).contains(&a.0));
        let mut idx = a.1.clone();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), a.0);
        assert!(sample_batch(7, 3, 10, 0).is_err());
    }
}
