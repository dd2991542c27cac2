mod common;

use common::*;
use dafnet::editor::DafnetEditor;
use dafnet::net::{accumulate_closed, accumulate_recursive, DafnetParams, Stream};
use dafnet::tensor::{finite_diff_check, FdOptions, Tape, Tensor};
use dafnet::trainer::{batch_loss, capture_batch, CaptureMode, TrainRecord};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn run_stream(
    net: &DafnetParams,
    signals: &[dafnet::signal::EditSignal],
) -> Vec<(Tensor, f64, Vec<f64>, Tensor)> {
    let tape = Tape::new();
    let b = net.store().bind_frozen(&tape);
    let mut s = Stream::new(net, signals[0].d_in(), signals[0].d_out()).unwrap();
    signals
        .iter()
        .map(|sig| {
            let o = s.step(net, &b, sig).unwrap();
            (
                o.delta.value(),
                o.beta_bar.item(),
                o.betas.clone(),
                o.accum.value(),
            )
        })
        .collect()
}

#[test]
fn forward_matches_direct_evaluation() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d_in, d_out) = (rng.gen_range(2..6), rng.gen_range(1..5));
        let mut cfg = small_net_config(seed);
        cfg.layers = rng.gen_range(1..=2);
        cfg.normalize = seed % 2 == 0;
        let net = DafnetParams::new(cfg, &[(d_in, d_out)]).unwrap();
        let t = rng.gen_range(1..=4);
        let signals: Vec<_> = (0..t)
            .map(|_| {
                let b = rng.gen_range(1..=5);
                random_signal(&mut rng, b, d_in, d_out)
            })
            .collect();
        let got = run_stream(&net, &signals);
        let want = oracle_stream(&net, &signals);
        for ((delta, bb, betas, accum), w) in got.iter().zip(&want) {
            assert!(max_abs_diff(&w.delta, delta) < 1e-10, "seed {seed}");
            assert!(max_abs_diff(&w.accum, accum) < 1e-10, "seed {seed}");
            assert!((bb - w.beta_bar).abs() < 1e-10);
            for (a, b) in betas.iter().zip(&w.betas) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn first_fact_attends_only_to_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = DafnetParams::new(small_net_config(4), &[(3, 2)]).unwrap();
    let sig = random_signal(&mut rng, 3, 3, 2);
    let out = run_stream(&net, &[sig]);
    assert_eq!(out[0].1, 1.0);
    assert_eq!(out[0].0, out[0].3);
}

#[test]
fn token_weights_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = DafnetParams::new(small_net_config(5), &[(4, 3)]).unwrap();
    let tape = Tape::new();
    let b = net.store().bind_frozen(&tape);
    let mut s = Stream::new(&net, 4, 3).unwrap();
    for _ in 0..6 {
        let n = rng.gen_range(1..7);
        let sig = random_signal(&mut rng, n, 4, 3);
        let o = s.step(&net, &b, &sig).unwrap();
        for a in &o.alphas {
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(o.beta_bar.item() > 0.0 && o.beta_bar.item() <= 1.0);
    }
}

#[test]
fn untrained_network_takes_a_scaled_gradient_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cfg = small_net_config(8);
    cfg.normalize = false;
    cfg.layers = 1;
    let mut net = DafnetParams::new(cfg.clone(), &[(3, 2)]).unwrap();
    // Silence every residual branch: the remaps are then the whole network.
    let ids: Vec<_> = net.store().ids().collect();
    for id in ids {
        if !net.store().name(id).starts_with("remap") {
            net.store_mut()
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
    }
    let sig = random_signal(&mut rng, 4, 3, 2);
    let out = run_stream(&net, &[sig.clone()]);
    let want = sig.reconstruct_gradient().scale(cfg.delta_gain / 4.0);
    let err = out[0].0.sub(&want).unwrap().frobenius_norm();
    assert!(err < 1e-12, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn closed_form_matches_recursion(seed in any::<u64>(), t in 1usize..=64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let deltas: Vec<Tensor> = (0..t)
            .map(|_| Tensor::matrix(2, 3, (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap())
            .collect();
        let mut beta: Vec<f64> = (0..t).map(|_| rng.gen_range(0.0..=1.0)).collect();
        beta[0] = 1.0;
        let closed = accumulate_closed(&deltas, &beta).unwrap();
        let mut acc = deltas[0].scale(beta[0]);
        for i in 1..t {
            acc = accumulate_recursive(&acc, &deltas[i], beta[i]).unwrap();
        }
        let diff = closed.sub(&acc).unwrap().data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn later_facts_do_not_change_earlier_outputs(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = DafnetParams::new(small_net_config(seed), &[(4, 3)]).unwrap();
        let t = rng.gen_range(2..6);
        let draw = |rng: &mut ChaCha8Rng| {
            let b = rng.gen_range(1..5);
            random_signal(rng, b, 4, 3)
        };
        let a: Vec<_> = (0..t).map(|_| draw(&mut rng)).collect();
        let cut = rng.gen_range(0..t - 1);
        let mut b = a.clone();
        for s in b.iter_mut().skip(cut + 1) {
            *s = draw(&mut rng);
        }
        let ra = run_stream(&net, &a);
        let rb = run_stream(&net, &b);
        for i in 0..=cut {
            prop_assert_eq!(&ra[i], &rb[i]);
        }
    }
}

#[test]
fn resumed_stream_continues_bit_identically() {
    let lm = tiny_lm(3);
    let net = small_net(&lm, small_net_config(3));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<_> = (0..6).map(|_| random_seq(&mut rng, 12, 5, 2)).collect();
    let mut cont = lm.clone();
    let mut ed = DafnetEditor::new(net.clone(), &lm);
    let mut outs = Vec::new();
    for s in &samples {
        outs.push(ed.edit_once(&mut cont, s).unwrap());
    }
    let mut split = lm.clone();
    let mut first = DafnetEditor::new(net.clone(), &lm);
    for s in &samples[..3] {
        first.edit_once(&mut split, s).unwrap();
    }
    let saved = first.state.to_json().unwrap();
    let mut second =
        DafnetEditor::with_state(net, dafnet::editor::EditorState::from_json(&saved).unwrap());
    for (i, s) in samples[3..].iter().enumerate() {
        let o = second.edit_once(&mut split, s).unwrap();
        assert_eq!(o, outs[3 + i]);
    }
    assert_eq!(split.overlays(), cont.overlays());
}

#[test]
fn editor_refuses_foreign_overlays() {
    let lm = tiny_lm(1);
    let net = small_net(&lm, small_net_config(1));
    let mut ed = DafnetEditor::new(net, &lm);
    let mut m = lm.clone();
    let shape = m.base_weight(0).shape().to_vec();
    m.set_overlay(0, Tensor::zeros(&shape)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(ed
        .edit_once(&mut m, &random_seq(&mut rng, 12, 3, 1))
        .is_err());
}

#[test]
fn network_gradient_matches_finite_differences() {
    let lm = tiny_lm(11);
    let mut net = small_net(&lm, small_net_config(11));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let records: Vec<TrainRecord> = (0..3)
        .map(|i| TrainRecord::prepare(&lm, &random_record(&mut rng, i, 12)).unwrap())
        .collect();
    let batch: Vec<&TrainRecord> = records.iter().collect();
    let signals = capture_batch(&lm, &net, &batch, CaptureMode::Progressive).unwrap();
    net.store_mut().zero_grads();
    batch_loss(&lm, &mut net, &batch, &signals, true, true).unwrap();
    let base = net.clone();
    let report = finite_diff_check(
        net.store(),
        |store| {
            let mut n = base.clone();
            *n.store_mut() = store.clone();
            batch_loss(&lm, &mut n, &batch, &signals, true, false)
                .unwrap()
                .total()
        },
        &FdOptions {
            max_coords: 6,
            ..FdOptions::default()
        },
    );
    assert!(report.passes(1e-3), "{:?}", report.failing(1e-3));
    assert_eq!(report.blocks.len(), net.store().len());
}

#[test]
fn container_round_trip_keeps_outputs() {
    let lm = tiny_lm(2);
    let net = small_net(&lm, small_net_config(2));
    let back = DafnetParams::from_container(
        &dafnet::ckpt::Container::from_bytes(&net.to_container().to_bytes().unwrap()).unwrap(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = &lm.editable_matrices()[0];
    let sigs: Vec<_> = (0..3)
        .map(|_| random_signal(&mut rng, 3, m.d_in, m.d_out))
        .collect();
    assert_eq!(run_stream(&net, &sigs), run_stream(&back, &sigs));
}
