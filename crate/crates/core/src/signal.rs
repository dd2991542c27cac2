//! Rank-1 editing signals of the editable matrices.
//!
//! For `z = u W` evaluated at `B` token positions, the gradient of a loss
//! with respect to `W` is `Σ_i u_iᵀ δ_i` where `δ_i` is the gradient reaching
//! row `i` of `z`. A signal stores the `u` and `δ` rows of one sample.

use serde::{Deserialize, Serialize};

use crate::lm::{target_nll, EditableLm, Overlay, TokenSeq};
use crate::tensor::{kernels, Tape, Tensor};
use crate::{Error, Result};

/// `u` is `[B, d_in]`, `delta` is `[B, d_out]`.
///
/// `B` counts every input position of the sample. Positions outside the
/// target still carry gradient in all but the last editable layer, because
/// later attention layers read them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSignal {
    pub u: Tensor,
    pub delta: Tensor,
}

impl EditSignal {
    pub fn new(u: Tensor, delta: Tensor) -> Result<Self> {
        let (bu, _) = u
            .dims2()
            .ok_or_else(|| Error::Data("u must be a matrix".into()))?;
        let (bd, _) = delta
            .dims2()
            .ok_or_else(|| Error::Data("delta must be a matrix".into()))?;
        if bu != bd || u.shape().len() != 2 || delta.shape().len() != 2 {
            return Err(Error::Data(format!(
                "signal rows disagree: u {:?}, delta {:?}",
                u.shape(),
                delta.shape()
            )));
        }
        Ok(Self { u, delta })
    }

    pub fn tokens(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.delta.shape()[1]
    }

    /// `[u; δ]` as one `[B, d_in + d_out]` matrix.
    pub fn joined(&self) -> Tensor {
        let (b, di, dout) = (self.tokens(), self.d_in(), self.d_out());
        let mut data = Vec::with_capacity(b * (di + dout));
        for i in 0..b {
            data.extend_from_slice(self.u.row(i));
            data.extend_from_slice(self.delta.row(i));
        }
        Tensor::matrix(b, di + dout, data).expect("sizes agree")
    }

    /// Root mean square of the `u` and `δ` entries, with 1 standing in for
    /// an all-zero block.
    pub fn scales(&self) -> (f64, f64) {
        let rms = |t: &Tensor| {
            let r = (t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64).sqrt();
            if r > 0.0 {
                r
            } else {
                1.0
            }
        };
        (rms(&self.u), rms(&self.delta))
    }

    /// [`Self::joined`] with each block divided by its scale.
    pub fn joined_normalized(&self) -> Tensor {
        let (su, sd) = self.scales();
        let di = self.d_in();
        let mut j = self.joined();
        let w = di + self.d_out();
        for (k, v) in j.data_mut().iter_mut().enumerate() {
            *v /= if k % w < di { su } else { sd };
        }
        j
    }

    /// Drops tokens whose `δ` row is exactly zero. They add nothing to the
    /// gradient; at least one token is always kept.
    pub fn without_silent_tokens(&self) -> EditSignal {
        let (b, di, dout) = (self.tokens(), self.d_in(), self.d_out());
        let mut keep: Vec<usize> = (0..b)
            .filter(|&i| self.delta.row(i).iter().any(|&v| v != 0.0))
            .collect();
        if keep.len() == b {
            return self.clone();
        }
        if keep.is_empty() {
            keep.push(b - 1);
        }
        let pick = |t: &Tensor, w: usize| {
            let data = keep
                .iter()
                .flat_map(|&i| t.row(i).iter().copied())
                .collect();
            Tensor::matrix(keep.len(), w, data).expect("sizes agree")
        };
        EditSignal {
            u: pick(&self.u, di),
            delta: pick(&self.delta, dout),
        }
    }

    /// `Σ_i u_iᵀ δ_i`, shape `[d_in, d_out]`.
    pub fn reconstruct_gradient(&self) -> Tensor {
        let (b, di, dout) = (self.tokens(), self.d_in(), self.d_out());
        let g = kernels::matmul_tn(self.u.data(), self.delta.data(), b, di, dout);
        Tensor::matrix(di, dout, g).expect("sizes agree")
    }
}

/// Captures one signal per editable matrix of `lm` (with its current
/// overlays) for the summed target NLL of `seq`, keeping the tokens that
/// carry gradient. The model is not modified.
pub fn capture_signal(lm: &EditableLm, seq: &TokenSeq) -> Result<Vec<EditSignal>> {
    if seq.target.is_empty() {
        return Err(Error::Data("sample has no target tokens".into()));
    }
    let tape = Tape::new();
    let b = lm.params().bind_frozen(&tape);
    let tr = lm.forward_tape(&tape, &b, &seq.input_ids(lm.bos()), Overlay::Stored, true)?;
    let loss = target_nll(tr.logits, seq, false)?;
    tape.backward(loss)?;
    tr.ffn_in
        .iter()
        .zip(&tr.ffn_out)
        .map(|(u, z)| {
            let delta = z.grad().unwrap_or_else(|| Tensor::zeros(&z.shape()));
            Ok(EditSignal::new(u.value(), delta)?.without_silent_tokens())
        })
        .collect()
}
