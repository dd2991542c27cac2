//! Fixtures and reference implementations shared by the integration and
//! acceptance tests. The references use plain nested vectors and never touch
//! the tape.
#![allow(dead_code)]

use dafnet::eval::{EditRecord, Predictor};
use dafnet::lm::{EditableLm, LmConfig, TokenSeq};
use dafnet::net::{DafnetConfig, DafnetParams};
use dafnet::signal::EditSignal;
use dafnet::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn tiny_lm_config() -> LmConfig {
    LmConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 3,
        n_heads: 2,
        d_ff: 12,
        max_seq_len: 12,
        edit_layer_count: 2,
    }
}

pub fn tiny_lm(seed: u64) -> EditableLm {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EditableLm::new(tiny_lm_config(), &mut rng).unwrap()
}

/// Random prompt/target pair over the non-`<bos>` tokens.
pub fn random_seq<R: Rng>(
    rng: &mut R,
    vocab: usize,
    max_prompt: usize,
    max_target: usize,
) -> TokenSeq {
    let p = rng.gen_range(1..=max_prompt);
    let t = rng.gen_range(1..=max_target);
    let mut tok = || rng.gen_range(1..vocab);
    let prompt = (0..p).map(|_| tok()).collect();
    let target = (0..t).map(|_| tok()).collect();
    TokenSeq::new(prompt, target).unwrap()
}

pub fn random_record<R: Rng>(rng: &mut R, id: usize, vocab: usize) -> EditRecord {
    EditRecord {
        id: format!("r{id}"),
        edit: random_seq(rng, vocab, 4, 2),
        generality: (0..rng.gen_range(1..=2))
            .map(|_| random_seq(rng, vocab, 4, 2))
            .collect(),
        locality: (0..rng.gen_range(1..=2))
            .map(|_| random_seq(rng, vocab, 4, 2))
            .collect(),
    }
}

pub fn small_net_config(seed: u64) -> DafnetConfig {
    DafnetConfig {
        layers: 2,
        n_heads: 2,
        d_down: 8,
        d_attn: 6,
        init_std: 0.3,
        delta_gain: -0.5,
        normalize: true,
        seed,
    }
}

pub fn small_net(lm: &EditableLm, config: DafnetConfig) -> DafnetParams {
    let m = &lm.editable_matrices()[0];
    DafnetParams::new(config, &[(m.d_in, m.d_out)]).unwrap()
}

/// Random signal with `b` tokens.
pub fn random_signal<R: Rng>(rng: &mut R, b: usize, d_in: usize, d_out: usize) -> EditSignal {
    let mut g = |n: usize| {
        (0..n)
            .map(|_| rng.gen_range(-1.5..1.5))
            .collect::<Vec<f64>>()
    };
    EditSignal::new(
        Tensor::matrix(b, d_in, g(b * d_in)).unwrap(),
        Tensor::matrix(b, d_out, g(b * d_out)).unwrap(),
    )
    .unwrap()
}

pub fn to_mat(t: &Tensor) -> Mat {
    let (r, _) = t.dims2().unwrap();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            let mut out = vec![0.0; n];
            for (k, &x) in row.iter().enumerate() {
                for (o, &y) in out.iter_mut().zip(&b[k]) {
                    *o += x * y;
                }
            }
            out
        })
        .collect()
}

fn vecmat(v: &[f64], m: &Mat) -> Vec<f64> {
    matmul(&vec![v.to_vec()], m).remove(0)
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn param(net: &DafnetParams, name: &str) -> Mat {
    let id = net
        .store()
        .find(name)
        .unwrap_or_else(|| panic!("no parameter {name}"));
    let t = net.store().get(id);
    match t.shape() {
        [n] => vec![t.data()[..*n].to_vec()],
        _ => to_mat(t),
    }
}

fn opt_param(net: &DafnetParams, name: &str) -> Option<Mat> {
    net.store().find(name).map(|_| param(net, name))
}

/// Multi-head attention of the last of `xs` over all of `xs`. Returns the
/// projected output (if the block has values) and the head-averaged weight
/// on the last position.
fn attention(
    xs: &[Vec<f64>],
    wq: &Mat,
    wk: &Mat,
    wv: Option<&Mat>,
    wo: Option<&Mat>,
    heads: usize,
) -> (Option<Vec<f64>>, f64) {
    let q = vecmat(xs.last().unwrap(), wq);
    let keys: Vec<Vec<f64>> = xs.iter().map(|x| vecmat(x, wk)).collect();
    let vals: Option<Vec<Vec<f64>>> = wv.map(|w| xs.iter().map(|x| vecmat(x, w)).collect());
    let dh = q.len() / heads;
    let mut self_w = 0.0;
    let mut concat = Vec::new();
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| {
                q[r.clone()]
                    .iter()
                    .zip(&k[r.clone()])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / (dh as f64).sqrt()
            })
            .collect();
        let p = softmax(&scores);
        self_w += p[p.len() - 1] / heads as f64;
        if let Some(v) = &vals {
            for j in r.clone() {
                concat.push(p.iter().zip(v).map(|(pi, vi)| pi * vi[j]).sum::<f64>());
            }
        }
    }
    let out = wo.map(|w| vecmat(&concat, w));
    (out, self_w)
}

#[derive(Debug, Clone)]
pub struct OracleStep {
    pub delta: Mat,
    pub beta_bar: f64,
    pub betas: Vec<f64>,
    pub alphas: Vec<Vec<f64>>,
    pub accum: Mat,
}

/// Direct evaluation of the editor network over a sequence of facts for one
/// matrix shape.
pub fn oracle_stream(net: &DafnetParams, signals: &[EditSignal]) -> Vec<OracleStep> {
    let cfg = net.config().clone();
    let (d_in, d_out) = (signals[0].d_in(), signals[0].d_out());
    let r = net.remap_index(d_in, d_out).unwrap();
    let r_in = param(net, &format!("remap{r}.in"));
    let r_out = param(net, &format!("remap{r}.out"));
    let mut intra_hist: Vec<Vec<Vec<f64>>> = vec![Vec::new(); cfg.layers];
    let mut inter_hist: Vec<Vec<Vec<f64>>> = vec![Vec::new(); cfg.layers];
    let mut prev: Option<Mat> = None;
    let mut out = Vec::new();
    for sig in signals {
        let u = to_mat(&sig.u);
        let d = to_mat(&sig.delta);
        let rms = |m: &Mat| {
            let n = (m.len() * m[0].len()) as f64;
            let r = (m.iter().flatten().map(|v| v * v).sum::<f64>() / n).sqrt();
            if cfg.normalize && r > 0.0 {
                r
            } else {
                1.0
            }
        };
        let (su, sd) = (rms(&u), rms(&d));
        let joined: Mat = u
            .iter()
            .zip(&d)
            .map(|(a, b)| {
                a.iter()
                    .map(|x| x / su)
                    .chain(b.iter().map(|x| x / sd))
                    .collect()
            })
            .collect();
        let mut h = matmul(&joined, &r_in);
        let mut alphas = Vec::new();
        let mut fused = Vec::new();
        for k in 0..cfg.layers {
            let p = |n: &str| param(net, &format!("intra{k}.{n}"));
            let (w1, b1, w2, b2, w3, b3, w4) = (
                p("w1"),
                p("b1"),
                p("w2"),
                p("b2"),
                p("w3"),
                p("b3"),
                p("w4"),
            );
            let hp: Mat = h
                .iter()
                .map(|row| {
                    let a: Vec<f64> = add(&vecmat(row, &w1), &b1[0])
                        .into_iter()
                        .map(|x| x.max(0.0))
                        .collect();
                    add(&vecmat(&a, &w2), &b2[0])
                })
                .collect();
            let scores: Vec<f64> = hp
                .iter()
                .map(|row| {
                    let a: Vec<f64> = add(&vecmat(row, &w3), &b3[0])
                        .into_iter()
                        .map(|x| x.max(0.0))
                        .collect();
                    vecmat(&a, &w4)[0]
                })
                .collect();
            let alpha = softmax(&scores);
            let hhat: Mat = hp
                .iter()
                .zip(&alpha)
                .map(|(row, a)| row.iter().map(|x| a * x).collect())
                .collect();
            let mut hbar = vec![0.0; hhat[0].len()];
            for row in &hhat {
                hbar = add(&hbar, row);
            }
            intra_hist[k].push(hbar.clone());
            let (o, _) = attention(
                &intra_hist[k],
                &p("attn.wq"),
                &p("attn.wk"),
                Some(&p("attn.wv")),
                Some(&p("attn.wo")),
                cfg.n_heads,
            );
            let hbar_p = add(&hbar, &o.unwrap());
            h = hhat
                .iter()
                .zip(&h)
                .map(|(a, b)| add(&add(a, b), &hbar_p))
                .collect();
            alphas.push(alpha);
            fused = hbar;
        }
        let mut g = fused;
        let mut betas = Vec::new();
        for k in 0..cfg.layers {
            inter_hist[k].push(g.clone());
            let p = |n: &str| opt_param(net, &format!("inter{k}.{n}"));
            let (o, b) = attention(
                &inter_hist[k],
                &p("wq").unwrap(),
                &p("wk").unwrap(),
                p("wv").as_ref(),
                p("wo").as_ref(),
                cfg.n_heads,
            );
            betas.push(b);
            if let Some(o) = o {
                g = add(&g, &o);
            }
        }
        let beta_bar = betas.iter().sum::<f64>() / betas.len() as f64;
        let o = matmul(&h, &r_out);
        let bt = o.len() as f64;
        let mut delta = vec![vec![0.0; d_out]; d_in];
        for row in &o {
            for i in 0..d_in {
                for j in 0..d_out {
                    delta[i][j] += row[i] * row[d_in + j] / bt;
                }
            }
        }
        let accum: Mat = match &prev {
            None => delta
                .iter()
                .map(|r| r.iter().map(|x| beta_bar * x).collect())
                .collect(),
            Some(p) => p
                .iter()
                .zip(&delta)
                .map(|(a, b)| {
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| (1.0 - beta_bar) * x + beta_bar * y)
                        .collect()
                })
                .collect(),
        };
        prev = Some(accum.clone());
        out.push(OracleStep {
            delta,
            beta_bar,
            betas,
            alphas,
            accum,
        });
    }
    out
}

pub fn max_abs_diff(a: &Mat, b: &Tensor) -> f64 {
    let bm = to_mat(b);
    a.iter()
        .flatten()
        .zip(bm.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Predictor answering from an explicit table of input → argmax outputs.
pub struct Table(pub Vec<(TokenSeq, Vec<usize>)>);

impl Predictor for Table {
    fn target_argmax(&self, seq: &TokenSeq) -> dafnet::Result<Vec<usize>> {
        Ok(self
            .0
            .iter()
            .find(|(s, _)| s == seq)
            .map(|(_, o)| o.clone())
            .unwrap_or_else(|| vec![0; seq.target.len()]))
    }
}

/// Recounts of the three metrics with explicit loops.
pub fn recount<P: Predictor>(post: &P, pre: &P, records: &[EditRecord]) -> (f64, f64, f64) {
    let hit = |p: &P, s: &TokenSeq| (p.target_argmax(s).unwrap() == s.target) as u32 as f64;
    let mut rel = 0.0;
    let mut gen = 0.0;
    let mut loc = 0.0;
    for r in records {
        rel += hit(post, &r.edit);
        let mut g = 0.0;
        for s in &r.generality {
            g += hit(post, s);
        }
        gen += g / r.generality.len() as f64;
        let mut l = 0.0;
        for s in &r.locality {
            l += (post.target_argmax(s).unwrap() == pre.target_argmax(s).unwrap()) as u32 as f64;
        }
        loc += l / r.locality.len() as f64;
    }
    let n = records.len() as f64;
    (rel / n, gen / n, loc / n)
}
