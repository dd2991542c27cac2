//! Sequential editing runtimes.

use serde::{Deserialize, Serialize};

use crate::eval::EditRecord;
use crate::lm::{target_nll, EditableLm, Overlay, TokenSeq};
use crate::net::{DafnetParams, FactCache, Stream};
use crate::signal::capture_signal;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

/// Journal entry for one edit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditLog {
    pub index: usize,
    pub id: String,
    /// `β̄_t` per editable matrix (empty for editors without fusion).
    pub beta_bar: Vec<f64>,
    /// `β^k_t` per editable matrix and inter layer.
    pub betas: Vec<Vec<f64>>,
    /// Frobenius norm of the fact's own delta per matrix.
    pub delta_norm: Vec<f64>,
    /// Frobenius norm of the running delta per matrix after the edit.
    pub accum_norm: Vec<f64>,
}

pub trait Editor {
    fn name(&self) -> &str;
    /// Applies edit number `index` (from 1) to `lm`.
    fn edit(&mut self, lm: &mut EditableLm, record: &EditRecord, index: usize) -> Result<EditLog>;
}

/// Per editable matrix: the running delta and the cached facts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixState {
    pub accum: Option<Tensor>,
    pub history: Vec<FactCache>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EditorState {
    pub t: usize,
    pub matrices: Vec<MatrixState>,
}

impl EditorState {
    pub fn new(matrices: usize) -> Self {
        Self {
            t: 0,
            matrices: vec![MatrixState::default(); matrices],
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// What one edit produced for one matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixOutcome {
    pub beta_bar: f64,
    pub betas: Vec<f64>,
    pub delta: Tensor,
    pub accum: Tensor,
}

pub struct DafnetEditor {
    pub net: DafnetParams,
    pub state: EditorState,
}

impl DafnetEditor {
    pub fn new(net: DafnetParams, lm: &EditableLm) -> Self {
        Self {
            net,
            state: EditorState::new(lm.editable_matrices().len()),
        }
    }

    pub fn with_state(net: DafnetParams, state: EditorState) -> Self {
        Self { net, state }
    }

    /// The `t`-th edit: captures the signal on the current model, runs the
    /// network against the cached history, updates the running delta and
    /// places it on the model.
    pub fn edit_once(
        &mut self,
        lm: &mut EditableLm,
        sample: &TokenSeq,
    ) -> Result<Vec<MatrixOutcome>> {
        let mats = lm.editable_matrices();
        if mats.len() != self.state.matrices.len() {
            return Err(Error::State(format!(
                "state tracks {} matrices, model has {}",
                self.state.matrices.len(),
                mats.len()
            )));
        }
        for (m, st) in mats.iter().zip(&self.state.matrices) {
            if st.history.len() != self.state.t || lm.overlay(m.index) != st.accum.as_ref() {
                return Err(Error::State(format!(
                    "overlay of matrix {} does not match the editor state",
                    m.index
                )));
            }
        }
        let signals = capture_signal(lm, sample)?;
        let mut outcomes = Vec::with_capacity(mats.len());
        for (m, signal) in mats.iter().zip(&signals) {
            let st = &self.state.matrices[m.index];
            let tape = Tape::new();
            let b = self.net.store().bind_frozen(&tape);
            let mut stream = Stream::resume(
                &self.net,
                &b,
                m.d_in,
                m.d_out,
                &st.history,
                st.accum.as_ref(),
            )?;
            let out = stream.step(&self.net, &b, signal)?;
            outcomes.push((
                out.cache,
                MatrixOutcome {
                    beta_bar: out.beta_bar.item(),
                    betas: out.betas,
                    delta: out.delta.value(),
                    accum: out.accum.value(),
                },
            ));
        }
        let mut result = Vec::with_capacity(outcomes.len());
        for (m, (cache, o)) in mats.iter().zip(outcomes) {
            lm.set_overlay(m.index, o.accum.clone())?;
            let st = &mut self.state.matrices[m.index];
            st.accum = Some(o.accum.clone());
            st.history.push(cache);
            result.push(o);
        }
        self.state.t += 1;
        Ok(result)
    }
}

impl Editor for DafnetEditor {
    fn name(&self) -> &str {
        "dafnet"
    }

    fn edit(&mut self, lm: &mut EditableLm, record: &EditRecord, index: usize) -> Result<EditLog> {
        let out = self.edit_once(lm, &record.edit)?;
        Ok(EditLog {
            index,
            id: record.id.clone(),
            beta_bar: out.iter().map(|o| o.beta_bar).collect(),
            betas: out.iter().map(|o| o.betas.clone()).collect(),
            delta_norm: out.iter().map(|o| o.delta.frobenius_norm()).collect(),
            accum_norm: out.iter().map(|o| o.accum.frobenius_norm()).collect(),
        })
    }
}

/// Fine-tuning baseline: plain gradient descent on the editable matrices'
/// overlays for the mean target NLL of each edit.
pub struct FtEditor {
    pub steps: usize,
    pub lr: f64,
}

impl FtEditor {
    pub fn edit_once(&self, lm: &mut EditableLm, sample: &TokenSeq) -> Result<Vec<Tensor>> {
        let n = lm.editable_matrices().len();
        let mut moved: Vec<Tensor> = lm
            .editable_matrices()
            .iter()
            .map(|m| Tensor::zeros(&[m.d_in, m.d_out]))
            .collect();
        for _ in 0..self.steps {
            let tape = Tape::new();
            let b = lm.params().bind_frozen(&tape);
            let vars: Vec<_> = (0..n)
                .map(|i| {
                    let cur = lm
                        .overlay(i)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(lm.base_weight(i).shape()));
                    tape.leaf(&cur.with_requires_grad(true))
                })
                .collect();
            let tr = lm.forward_tape(
                &tape,
                &b,
                &sample.input_ids(lm.bos()),
                Overlay::Vars(&vars),
                false,
            )?;
            let loss = target_nll(tr.logits, sample, true)?;
            tape.backward(loss)?;
            for (i, v) in vars.iter().enumerate() {
                let g = v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()));
                let step = g.scale(-self.lr);
                lm.add_overlay(i, &step)?;
                moved[i] = moved[i].add(&step)?;
            }
        }
        Ok(moved)
    }
}

impl Editor for FtEditor {
    fn name(&self) -> &str {
        "ft"
    }

    fn edit(&mut self, lm: &mut EditableLm, record: &EditRecord, index: usize) -> Result<EditLog> {
        let moved = self.edit_once(lm, &record.edit)?;
        Ok(EditLog {
            index,
            id: record.id.clone(),
            beta_bar: Vec::new(),
            betas: Vec::new(),
            delta_norm: moved.iter().map(Tensor::frobenius_norm).collect(),
            accum_norm: (0..moved.len())
                .map(|i| lm.overlay(i).map_or(0.0, Tensor::frobenius_norm))
                .collect(),
        })
    }
}

/// Leaves the model untouched.
pub struct NullEditor;

impl Editor for NullEditor {
    fn name(&self) -> &str {
        "null"
    }

    fn edit(&mut self, lm: &mut EditableLm, record: &EditRecord, index: usize) -> Result<EditLog> {
        let n = lm.editable_matrices().len();
        Ok(EditLog {
            index,
            id: record.id.clone(),
            beta_bar: Vec::new(),
            betas: Vec::new(),
            delta_norm: vec![0.0; n],
            accum_norm: vec![0.0; n],
        })
    }
}
