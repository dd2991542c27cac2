//! The auxiliary editing network.
//!
//! A fact's signal `[u; δ]` is remapped to the shared width `d_c`, passed
//! through `K` intra layers (token attention `α`, fused fact vector `h̄`, a
//! causal attention step over the fused vectors of earlier facts) and
//! remapped back. The inter stack attends over the facts' fused vectors; the
//! head-averaged self-attention weight of the newest fact, averaged over
//! layers, is its fusion weight `β̄_t`. The fact's delta `ũᵀδ̃ / B` enters
//! the running delta as `(1 - β̄_t) ΔW̃_{t-1} + β̄_t ΔW_t`.
//!
//! Facts are processed one at a time against cached keys and values of
//! earlier facts, so a full training sequence and a stream of single edits
//! execute identical arithmetic.

mod accum;
mod stream;

pub use accum::{accumulate_closed, accumulate_recursive};
pub use stream::{FactCache, StepOutput, Stream};

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ckpt::Container;
use crate::tensor::{ParamId, ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DafnetConfig {
    /// Number of intra layers, and of inter layers.
    pub layers: usize,
    pub n_heads: usize,
    pub d_down: usize,
    /// Query/key/value width of every attention block.
    pub d_attn: usize,
    /// Standard deviation of the MLP weight initialisation.
    pub init_std: f64,
    /// Initial gain of the `δ` block of each output remap. Negative values
    /// make an untrained network take a gradient-descent step.
    pub delta_gain: f64,
    /// Divide the `u` and `δ` blocks by their RMS before the network, so
    /// the size of an update does not follow the size of the signal.
    pub normalize: bool,
    pub seed: u64,
}

impl Default for DafnetConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            n_heads: 2,
            d_down: 64,
            d_attn: 32,
            init_std: 0.02,
            delta_gain: -0.05,
            normalize: true,
            seed: 0,
        }
    }
}

impl DafnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.d_down == 0
            || self.n_heads == 0
            || self.d_attn % self.n_heads != 0
        {
            return Err(Error::Config(format!(
                "invalid auxiliary network config {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    /// Absent on the last inter layer, whose output is never read.
    pub wv: Option<ParamId>,
    pub wo: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub(crate) struct IntraIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
    pub w4: ParamId,
    pub attn: AttnIds,
}

/// Linear, bias-free maps between one matrix shape and the shared width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Remap {
    pub d_in: usize,
    pub d_out: usize,
    #[serde(skip)]
    input: Option<ParamId>,
    #[serde(skip)]
    output: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct DafnetParams {
    config: DafnetConfig,
    store: ParamStore,
    d_c: usize,
    pub(crate) intra: Vec<IntraIds>,
    pub(crate) inter: Vec<AttnIds>,
    remaps: Vec<Remap>,
}

impl DafnetParams {
    /// Builds a network serving the given `(d_in, d_out)` matrix shapes. The
    /// first shape is the reference: its width `d_in + d_out` is `d_c` and
    /// its remaps start as identities.
    pub fn new(config: DafnetConfig, shapes: &[(usize, usize)]) -> Result<Self> {
        config.validate()?;
        let mut uniq: Vec<(usize, usize)> = Vec::new();
        for &s in shapes {
            if !uniq.contains(&s) {
                uniq.push(s);
            }
        }
        let &(ri, ro) = uniq
            .first()
            .ok_or_else(|| Error::Config("no editable matrix shapes".into()))?;
        let d_c = ri + ro;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut remaps = Vec::new();
        for (i, &(di, dout)) in uniq.iter().enumerate() {
            let w = di + dout;
            let (inp, out) = if i == 0 {
                let mut o = Tensor::identity(w);
                for j in di..w {
                    o.data_mut()[j * w + j] = config.delta_gain;
                }
                (
                    store.add(format!("remap{i}.in"), Tensor::identity(w)),
                    store.add(format!("remap{i}.out"), o),
                )
            } else {
                let s_in = 1.0 / (w as f64).sqrt();
                let s_out = 1.0 / (d_c as f64).sqrt();
                (
                    store.add_normal(format!("remap{i}.in"), &[w, d_c], s_in, &mut rng),
                    store.add_normal(format!("remap{i}.out"), &[d_c, w], s_out, &mut rng),
                )
            };
            remaps.push(Remap {
                d_in: di,
                d_out: dout,
                input: Some(inp),
                output: Some(out),
            });
        }
        let (dd, da) = (config.d_down, config.d_attn);
        let s = config.init_std;
        let s_attn = 1.0 / (d_c as f64).sqrt();
        let attn =
            |store: &mut ParamStore, name: String, full: bool, rng: &mut ChaCha8Rng| AttnIds {
                wq: store.add_normal(format!("{name}.wq"), &[d_c, da], s_attn, rng),
                wk: store.add_normal(format!("{name}.wk"), &[d_c, da], s_attn, rng),
                wv: full.then(|| store.add_normal(format!("{name}.wv"), &[d_c, da], s_attn, rng)),
                wo: full.then(|| store.add_normal(format!("{name}.wo"), &[da, d_c], s, rng)),
            };
        let mut intra = Vec::new();
        for k in 0..config.layers {
            let p = format!("intra{k}");
            intra.push(IntraIds {
                w1: store.add_normal(format!("{p}.w1"), &[d_c, dd], s, &mut rng),
                b1: store.add_zeros(format!("{p}.b1"), &[dd]),
                w2: store.add_normal(format!("{p}.w2"), &[dd, d_c], s, &mut rng),
                b2: store.add_zeros(format!("{p}.b2"), &[d_c]),
                w3: store.add_normal(format!("{p}.w3"), &[d_c, dd], s, &mut rng),
                b3: store.add_zeros(format!("{p}.b3"), &[dd]),
                w4: store.add_normal(format!("{p}.w4"), &[dd, 1], s, &mut rng),
                attn: attn(&mut store, format!("{p}.attn"), true, &mut rng),
            });
        }
        let inter = (0..config.layers)
            .map(|k| {
                attn(
                    &mut store,
                    format!("inter{k}"),
                    k + 1 < config.layers,
                    &mut rng,
                )
            })
            .collect();
        Ok(Self {
            config,
            store,
            d_c,
            intra,
            inter,
            remaps,
        })
    }

    pub fn config(&self) -> &DafnetConfig {
        &self.config
    }

    pub fn d_c(&self) -> usize {
        self.d_c
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn remaps(&self) -> &[Remap] {
        &self.remaps
    }

    /// Index of the remap registered for a `[d_in, d_out]` matrix.
    pub fn remap_index(&self, d_in: usize, d_out: usize) -> Result<usize> {
        self.remaps
            .iter()
            .position(|r| r.d_in == d_in && r.d_out == d_out)
            .ok_or_else(|| {
                Error::Config(format!("no remap registered for shape [{d_in}, {d_out}]"))
            })
    }

    pub(crate) fn remap_ids(&self, idx: usize) -> (ParamId, ParamId) {
        let r = &self.remaps[idx];
        (r.input.expect("built"), r.output.expect("built"))
    }

    /// Maps `[u; δ]` rows to the shared width.
    pub fn remap_signal(&self, signal: &crate::signal::EditSignal) -> Result<Tensor> {
        let idx = self.remap_index(signal.d_in(), signal.d_out())?;
        let (inp, _) = self.remap_ids(idx);
        Ok(signal.joined().matmul(self.store.get(inp))?)
    }

    pub fn to_container(&self) -> Container {
        let shapes: Vec<(usize, usize)> = self.remaps.iter().map(|r| (r.d_in, r.d_out)).collect();
        let meta = serde_json::json!({ "config": self.config, "shapes": shapes });
        let mut c = Container::new("dafnet", meta);
        for (name, t) in self.store.iter() {
            c.push(name, t);
        }
        c
    }

    /// Rebuilds a network from a container written by [`Self::to_container`]
    /// (extra tensors in the container are ignored).
    pub fn from_container(c: &Container) -> Result<Self> {
        let config: DafnetConfig = serde_json::from_value(c.meta["config"].clone())?;
        let shapes: Vec<(usize, usize)> = serde_json::from_value(c.meta["shapes"].clone())?;
        let mut net = Self::new(config, &shapes)?;
        let ids: Vec<ParamId> = net.store.ids().collect();
        for id in ids {
            let name = net.store.name(id).to_string();
            let t = c
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != net.store.get(id).shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for `{name}`")));
            }
            *net.store.get_mut(id) = t.clone().with_requires_grad(true);
        }
        Ok(net)
    }
}

/// One row of the attention export: edit index (from 1), inter layer (from
/// 1, or 0 for the layer average `β̄`), matrix index and value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnRow {
    pub edit: usize,
    pub layer: usize,
    pub matrix: usize,
    pub value: f64,
}

pub fn write_attn_csv<W: Write>(mut w: W, rows: &[AttnRow]) -> std::io::Result<()> {
    writeln!(w, "edit,layer,matrix,value")?;
    for r in rows {
        writeln!(w, "{},{},{},{:?}", r.edit, r.layer, r.matrix, r.value)?;
    }
    Ok(())
}
