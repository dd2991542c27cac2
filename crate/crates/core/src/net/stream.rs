use serde::{Deserialize, Serialize};

use super::{AttnIds, DafnetParams};
use crate::signal::EditSignal;
use crate::tensor::{Bound, Tensor, Var};
use crate::{Error, Result};

/// Inputs of every attention block for one fact. Keys and values of past
/// facts are recomputed from these when a stream is resumed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactCache {
    /// Per intra layer, the fused fact vector `h̄` fed to its attention.
    pub intra: Vec<Vec<f64>>,
    /// Per inter layer, its input vector.
    pub inter: Vec<Vec<f64>>,
}

#[derive(Default)]
struct KvCache<'t> {
    keys: Vec<Var<'t>>,
    vals: Vec<Var<'t>>,
}

/// Everything produced for one fact.
pub struct StepOutput<'t> {
    /// `ΔW_t`, shape `[d_in, d_out]`.
    pub delta: Var<'t>,
    /// `β̄_t` as a one-element variable.
    pub beta_bar: Var<'t>,
    /// `β^k_t` for each inter layer.
    pub betas: Vec<f64>,
    /// Token weights `α` for each intra layer.
    pub alphas: Vec<Vec<f64>>,
    /// `ΔW̃_t`.
    pub accum: Var<'t>,
    pub cache: FactCache,
}

/// The sequence of facts edited into one matrix, recorded on one tape.
pub struct Stream<'t> {
    remap: usize,
    d_in: usize,
    d_out: usize,
    intra: Vec<KvCache<'t>>,
    inter: Vec<KvCache<'t>>,
    accum: Option<Var<'t>>,
    len: usize,
}

impl<'t> Stream<'t> {
    pub fn new(net: &DafnetParams, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            remap: net.remap_index(d_in, d_out)?,
            d_in,
            d_out,
            intra: net.intra.iter().map(|_| KvCache::default()).collect(),
            inter: net.inter.iter().map(|_| KvCache::default()).collect(),
            accum: None,
            len: 0,
        })
    }

    /// Rebuilds a stream on a fresh tape from cached facts and the running
    /// delta, with the same values a continuous stream would hold.
    pub fn resume(
        net: &DafnetParams,
        b: &Bound<'t>,
        d_in: usize,
        d_out: usize,
        history: &[FactCache],
        accum: Option<&Tensor>,
    ) -> Result<Self> {
        let mut s = Self::new(net, d_in, d_out)?;
        let tape = b[net.intra[0].w1].tape();
        for fact in history {
            if fact.intra.len() != net.intra.len() || fact.inter.len() != net.inter.len() {
                return Err(Error::State(
                    "cached fact does not match the network depth".into(),
                ));
            }
            for ((ids, kv), x) in net
                .intra
                .iter()
                .map(|l| &l.attn)
                .zip(&mut s.intra)
                .zip(&fact.intra)
            {
                push_kv(b, ids, kv, tape.constant(&Tensor::vector(x.clone())))?;
            }
            for ((ids, kv), x) in net.inter.iter().zip(&mut s.inter).zip(&fact.inter) {
                push_kv(b, ids, kv, tape.constant(&Tensor::vector(x.clone())))?;
            }
        }
        s.len = history.len();
        match (accum, history.is_empty()) {
            (Some(a), false) => s.accum = Some(tape.constant(a)),
            (None, true) => {}
            _ => return Err(Error::State("running delta and history disagree".into())),
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn accum(&self) -> Option<Var<'t>> {
        self.accum
    }

    /// Feeds the next fact's signal through the network.
    pub fn step(
        &mut self,
        net: &DafnetParams,
        b: &Bound<'t>,
        signal: &EditSignal,
    ) -> Result<StepOutput<'t>> {
        if signal.d_in() != self.d_in || signal.d_out() != self.d_out {
            return Err(Error::Data(format!(
                "signal of shape [{}, {}] fed to a [{}, {}] stream",
                signal.d_in(),
                signal.d_out(),
                self.d_in,
                self.d_out
            )));
        }
        let bt = signal.tokens();
        if bt == 0 {
            return Err(Error::Data("fact without tokens".into()));
        }
        let tape = b[net.intra[0].w1].tape();
        let d_c = net.d_c();
        let (rin, rout) = net.remap_ids(self.remap);
        let ones = tape.constant(&Tensor::new(vec![1, d_c], vec![1.0; d_c])?);
        let joined = if net.config().normalize {
            signal.joined_normalized()
        } else {
            signal.joined()
        };
        let scale = 1.0 / bt as f64;
        let mut h = tape.constant(&joined).matmul(b[rin])?;
        let mut cache = FactCache {
            intra: Vec::with_capacity(net.intra.len()),
            inter: Vec::with_capacity(net.inter.len()),
        };
        let mut alphas = Vec::with_capacity(net.intra.len());
        let mut fused = None;
        for (ids, kv) in net.intra.iter().zip(&mut self.intra) {
            let hp = h
                .matmul(b[ids.w1])?
                .add_row(b[ids.b1])?
                .relu()
                .matmul(b[ids.w2])?
                .add_row(b[ids.b2])?;
            let scores = hp
                .matmul(b[ids.w3])?
                .add_row(b[ids.b3])?
                .relu()
                .matmul(b[ids.w4])?;
            let alpha = scores.softmax(0)?;
            alphas.push(alpha.data());
            let hhat = alpha.matmul(ones)?.mul(hp)?;
            let hbar = hhat.sum_rows();
            cache.intra.push(hbar.data());
            let (o, _) = attend(b, &ids.attn, kv, hbar, net.config().n_heads)?;
            let hbar_p = hbar.add(o.expect("intra attention has values"))?;
            h = hhat.add(h)?.add_row(hbar_p)?;
            fused = Some(hbar);
        }
        let mut g = fused.expect("at least one intra layer");
        let mut betas = Vec::with_capacity(net.inter.len());
        let mut beta_sum: Option<Var<'t>> = None;
        for (ids, kv) in net.inter.iter().zip(&mut self.inter) {
            cache.inter.push(g.data());
            let (o, diag) = attend(b, ids, kv, g, net.config().n_heads)?;
            betas.push(diag.item());
            beta_sum = Some(match beta_sum {
                Some(s) => s.add(diag)?,
                None => diag,
            });
            if let Some(o) = o {
                g = g.add(o)?;
            }
        }
        let beta_bar = beta_sum
            .expect("at least one inter layer")
            .scale(1.0 / net.inter.len() as f64);
        let out = h.matmul(b[rout])?;
        let u = out.slice_cols(0, self.d_in)?;
        let d = out.slice_cols(self.d_in, self.d_in + self.d_out)?;
        let delta = u.t().matmul(d)?.scale(scale);
        let weighted = delta.scale_by(beta_bar)?;
        let accum = match self.accum {
            Some(prev) => prev
                .scale_by(beta_bar.scale(-1.0).add_scalar(1.0))?
                .add(weighted)?,
            None => weighted,
        };
        self.accum = Some(accum);
        self.len += 1;
        Ok(StepOutput {
            delta,
            beta_bar,
            betas,
            alphas,
            accum,
            cache,
        })
    }
}

fn push_kv<'t>(b: &Bound<'t>, ids: &AttnIds, kv: &mut KvCache<'t>, x: Var<'t>) -> Result<()> {
    kv.keys.push(x.matmul(b[ids.wk])?);
    if let Some(wv) = ids.wv {
        kv.vals.push(x.matmul(b[wv])?);
    }
    Ok(())
}

/// Attention of the newest fact `x` (a `[1, d_c]` row) over all cached facts
/// and itself. Returns the projected output (when the block has values) and
/// the head-averaged weight the newest fact puts on itself.
fn attend<'t>(
    b: &Bound<'t>,
    ids: &AttnIds,
    kv: &mut KvCache<'t>,
    x: Var<'t>,
    heads: usize,
) -> Result<(Option<Var<'t>>, Var<'t>)> {
    let tape = x.tape();
    let q = x.matmul(b[ids.wq])?;
    push_kv(b, ids, kv, x)?;
    let t = kv.keys.len();
    let keys = tape.concat_rows(&kv.keys)?;
    let vals = match ids.wv {
        Some(_) => Some(tape.concat_rows(&kv.vals)?),
        None => None,
    };
    let (_, da) = keys.dims2();
    let dh = da / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut diag: Option<Var<'t>> = None;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let p = q
            .slice_cols(s, e)?
            .matmul(keys.slice_cols(s, e)?.t())?
            .scale(scale)
            .softmax(1)?;
        let self_w = p.select(&[t - 1])?;
        diag = Some(match diag {
            Some(d) => d.add(self_w)?,
            None => self_w,
        });
        if let Some(v) = vals {
            outs.push(p.matmul(v.slice_cols(s, e)?)?);
        }
    }
    let diag = diag.expect("at least one head").scale(1.0 / heads as f64);
    let out = match (ids.wo, outs.len()) {
        (Some(wo), 1) => Some(outs[0].matmul(b[wo])?),
        (Some(wo), _) => Some(tape.concat_cols(&outs)?.matmul(b[wo])?),
        (None, _) => None,
    };
    Ok((out, diag))
}
