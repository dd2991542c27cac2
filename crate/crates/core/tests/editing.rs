mod common;

use common::*;
use dafnet::editor::{DafnetEditor, Editor, FtEditor, NullEditor};
use dafnet::eval::{
    evaluate_sequence, generality, locality, locality_reference, reliability, EditRecord,
};
use dafnet::lm::{target_nll, EditableLm, Overlay, TokenSeq};
use dafnet::net::accumulate_closed;
use dafnet::signal::capture_signal;
use dafnet::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Gradient of the summed target NLL with respect to editable matrix
/// `index`, taken directly on the weight.
fn weight_gradient(lm: &EditableLm, seq: &TokenSeq, index: usize) -> Tensor {
    let tape = Tape::new();
    let b = lm.params().bind(&tape);
    let tr = lm
        .forward_tape(&tape, &b, &seq.input_ids(lm.bos()), Overlay::Stored, false)
        .unwrap();
    tape.backward(target_nll(tr.logits, seq, false).unwrap())
        .unwrap();
    b[lm.editable_param(index)].grad().unwrap()
}

fn rel_frobenius(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-300)
}

#[test]
fn signals_rebuild_the_weight_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for seed in 0..25 {
        let lm = tiny_lm(seed);
        let seq = random_seq(&mut rng, 12, 6, 3);
        for (i, s) in capture_signal(&lm, &seq).unwrap().iter().enumerate() {
            let err = rel_frobenius(&s.reconstruct_gradient(), &weight_gradient(&lm, &seq, i));
            assert!(err < 1e-8, "seed {seed} matrix {i}: {err}");
        }
    }
}

#[test]
fn signals_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lm = tiny_lm(7);
    let seq = random_seq(&mut rng, 12, 5, 2);
    let h = 1e-6;
    for (i, s) in capture_signal(&lm, &seq).unwrap().iter().enumerate() {
        let g = s.reconstruct_gradient();
        let id = lm.editable_param(i);
        for k in (0..g.numel()).step_by(7) {
            let nll = |d: f64| {
                let mut m = lm.clone();
                m.params_mut().get_mut(id).data_mut()[k] += d;
                -m.log_likelihood(&seq).unwrap()
            };
            let fd = (nll(h) - nll(-h)) / (2.0 * h);
            assert!(
                (fd - g.data()[k]).abs() < 1e-6 * (1.0 + fd.abs()),
                "matrix {i} entry {k}"
            );
        }
    }
}

#[test]
fn last_layer_signal_keeps_only_target_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let lm = tiny_lm(2);
    for _ in 0..10 {
        let seq = random_seq(&mut rng, 12, 6, 2);
        let signals = capture_signal(&lm, &seq).unwrap();
        let last = signals.last().unwrap();
        assert_eq!(last.tokens(), seq.target.len());
    }
}

#[test]
fn overlay_acts_like_a_weight_change() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lm = tiny_lm(3);
    let seq = random_seq(&mut rng, 12, 5, 2);
    let shape = lm.base_weight(1).shape().to_vec();
    let delta = random_signal(&mut rng, shape[0], shape[0], shape[1])
        .reconstruct_gradient()
        .scale(0.01);
    let mut overlaid = lm.clone();
    overlaid.set_overlay(1, delta.clone()).unwrap();
    let mut folded = lm.clone();
    let id = folded.editable_param(1);
    let w = folded.base_weight(1).add(&delta).unwrap();
    folded
        .params_mut()
        .get_mut(id)
        .data_mut()
        .copy_from_slice(w.data());
    let input = seq.input_ids(lm.bos());
    let diff = overlaid
        .logits(&input)
        .unwrap()
        .sub(&folded.logits(&input).unwrap())
        .unwrap();
    assert!(diff.frobenius_norm() < 1e-12);
    let mut zero = lm.clone();
    zero.set_overlay(0, Tensor::zeros(&shape)).unwrap();
    assert_eq!(zero.logits(&input).unwrap(), lm.logits(&input).unwrap());
}

fn seq(prompt: &[usize], target: &[usize]) -> TokenSeq {
    TokenSeq::new(prompt.to_vec(), target.to_vec()).unwrap()
}

/// Five hand-built records and two predictors answering from tables.
fn fixture() -> (Vec<EditRecord>, Table, Table) {
    let mut records = Vec::new();
    for i in 0..5usize {
        let p = i + 1;
        records.push(EditRecord {
            id: format!("e{i}"),
            edit: seq(&[p, p], &[p + 1]),
            generality: (0..=(i % 3)).map(|g| seq(&[p, g + 7], &[p + 1])).collect(),
            locality: (0..=((i + 1) % 3))
                .map(|l| seq(&[9, p, l], &[3, 4]))
                .collect(),
        });
    }
    let mut post = Vec::new();
    let mut pre = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let right = i % 2 == 0;
        post.push((
            r.edit.clone(),
            if right {
                r.edit.target.clone()
            } else {
                vec![0]
            },
        ));
        for (g, s) in r.generality.iter().enumerate() {
            post.push((s.clone(), if g == 0 { s.target.clone() } else { vec![5] }));
        }
        for (l, s) in r.locality.iter().enumerate() {
            pre.push((s.clone(), vec![3, 4]));
            post.push((
                s.clone(),
                if (i + l) % 3 == 0 {
                    vec![3, 1]
                } else {
                    vec![3, 4]
                },
            ));
        }
    }
    (records, Table(post), Table(pre))
}

#[test]
fn metrics_equal_a_recount_on_fixtures() {
    let (records, post, pre) = fixture();
    for n in 1..=records.len() {
        let rs = &records[..n];
        let reference = locality_reference(&pre, rs).unwrap();
        let (r, g, l) = recount(&post, &pre, rs);
        assert_eq!(reliability(&post, rs).unwrap(), r);
        assert_eq!(generality(&post, rs).unwrap(), g);
        assert_eq!(locality(&post, rs, &reference).unwrap(), l);
    }
}

#[test]
fn unchanged_model_has_perfect_locality() {
    let (records, post, _) = fixture();
    let reference = locality_reference(&post, &records).unwrap();
    assert_eq!(locality(&post, &records, &reference).unwrap(), 1.0);
    let lm = tiny_lm(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rs: Vec<_> = (0..6).map(|i| random_record(&mut rng, i, 12)).collect();
    let res = evaluate_sequence(&lm, &mut NullEditor, &rs, &[3, 6]).unwrap();
    assert!(res.rows.iter().all(|r| r.loc == 1.0));
    assert!(res.edited.overlays().iter().all(Option::is_none));
}

#[test]
fn metrics_ignore_record_order() {
    let (mut records, post, pre) = fixture();
    let before = recount(&post, &pre, &records);
    records.reverse();
    let reference = locality_reference(&pre, &records).unwrap();
    assert_eq!(reliability(&post, &records).unwrap(), before.0);
    assert_eq!(generality(&post, &records).unwrap(), before.1);
    assert_eq!(locality(&post, &records, &reference).unwrap(), before.2);
}

#[test]
fn sequence_metrics_match_a_recount_of_the_edited_model() {
    let lm = tiny_lm(5);
    let net = small_net(&lm, small_net_config(5));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rs: Vec<_> = (0..5).map(|i| random_record(&mut rng, i, 12)).collect();
    let mut ed = DafnetEditor::new(net, &lm);
    let res = evaluate_sequence(&lm, &mut ed, &rs, &[5]).unwrap();
    let (r, g, l) = recount(&res.edited, &lm, &rs);
    let row = &res.rows[0];
    assert_eq!((row.rel, row.gen, row.loc), (r, g, l));
    assert_eq!(row.avg, (r + g + l) / 3.0);
}

#[test]
fn running_delta_equals_closed_form_of_the_journal() {
    let lm = tiny_lm(6);
    let net = small_net(&lm, small_net_config(6));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ed = DafnetEditor::new(net, &lm);
    let mut m = lm.clone();
    let mut deltas = vec![Vec::new(); lm.editable_matrices().len()];
    let mut betas = vec![Vec::new(); lm.editable_matrices().len()];
    for _ in 0..12 {
        let out = ed
            .edit_once(&mut m, &random_seq(&mut rng, 12, 5, 2))
            .unwrap();
        for (i, o) in out.iter().enumerate() {
            assert!(o.beta_bar > 0.0 && o.beta_bar <= 1.0);
            deltas[i].push(o.delta.clone());
            betas[i].push(o.beta_bar);
            let closed = accumulate_closed(&deltas[i], &betas[i]).unwrap();
            let err = closed
                .sub(m.overlay(i).unwrap())
                .unwrap()
                .data()
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(err < 1e-10, "{err}");
        }
    }
    assert_eq!(betas[0][0], 1.0);
}

#[test]
fn ft_step_is_plain_gradient_descent() {
    let lm = tiny_lm(8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = random_seq(&mut rng, 12, 5, 2);
    let mut m = lm.clone();
    let moved = FtEditor { steps: 1, lr: 0.3 }
        .edit_once(&mut m, &s)
        .unwrap();
    for (i, d) in moved.iter().enumerate() {
        let want = weight_gradient(&lm, &s, i).scale(-0.3 / s.target.len() as f64);
        assert!(rel_frobenius(d, &want) < 1e-10);
        assert_eq!(m.overlay(i), Some(d));
    }
}

#[test]
fn ft_raises_the_edit_likelihood() {
    let lm = tiny_lm(9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let r = random_record(&mut rng, 0, 12);
    let mut m = lm.clone();
    let mut ft = FtEditor { steps: 10, lr: 0.1 };
    ft.edit(&mut m, &r, 1).unwrap();
    assert!(m.log_likelihood(&r.edit).unwrap() > lm.log_likelihood(&r.edit).unwrap());
}
