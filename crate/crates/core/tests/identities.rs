//! Exact structural identities of the model, decoder and checkpoint format.

use reorder_core::checkpoint::{average_checkpoints, Checkpoint};
use reorder_core::decode::{beam_search, greedy, greedy_batch, sequence_log_prob};
use reorder_core::eval::{sim_metric, SimSource};
use reorder_core::train::{total_loss, Dataset, EncodedPair, TrainingBatch};
use reorder_core::*;

fn config(variant: Variant) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_ff: 16,
        heads: 2,
        layers: 2,
        src_vocab: 9,
        tgt_vocab: 7,
        dropout: 0.0,
        max_len: 12,
        variant,
        lambda: 0.0,
        window: WindowConfig::default(),
        seed: 11,
    }
}

fn encoder_output(model: &Model, srcs: &[&[usize]], opts: &ForwardOptions) -> Vec<f64> {
    let tape = Tape::new(0);
    let p = model.bind(&tape);
    model.encode(&p, &SourceBatch::new(srcs), opts).unwrap().output.value()
}

#[test]
fn refsr_gate_extremes_reduce_to_single_passes() {
    let model = Model::new(config(Variant::Refsr)).unwrap();
    let srcs: [&[usize]; 2] = [&[4, 5, 6, 7], &[8, 4]];
    let tape = Tape::new(0);
    let p = model.bind(&tape);
    let batch = SourceBatch::new(&srcs);
    let plain = model.encode_baseline(&p, &batch, &ForwardOptions::eval()).unwrap().value();
    let (reordered, _, _) = model.encode_exgre(&p, &batch, &ForwardOptions::eval()).unwrap();
    let g0 = encoder_output(&model, &srcs, &ForwardOptions { gate: Some(0.0), ..ForwardOptions::eval() });
    let g1 = encoder_output(&model, &srcs, &ForwardOptions { gate: Some(1.0), ..ForwardOptions::eval() });
    assert_eq!(g0, plain);
    assert_eq!(g1, reordered.value());

    // the plain pass of refsr is the baseline encoder with the same weights
    let mut base = Model::new(config(Variant::Baseline)).unwrap();
    let shared = only_shared(&model, &base);
    base.params_mut().copy_values_from(&shared).unwrap();
    assert_eq!(encoder_output(&base, &srcs, &ForwardOptions::eval()), g0);
}

/// Parameters of `model` restricted to the names `like` has.
fn only_shared(model: &Model, like: &Model) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, _) in like.params().iter() {
        let id = model.params().id_of(name).unwrap();
        out.insert(name, model.params().get(id).clone()).unwrap();
    }
    out
}

#[test]
fn both_refsr_passes_share_sublayer_weights() {
    let base = Model::new(config(Variant::Baseline)).unwrap();
    let ex = Model::new(config(Variant::Exgre)).unwrap();
    let re = Model::new(config(Variant::Refsr)).unwrap();
    let (d, n) = (8, 2);
    assert_eq!(ex.params().census() - base.params().census(), n * (d * d + d));
    assert_eq!(re.params().census() - ex.params().census(), 2 * d);
    assert_eq!(re.params().len(), ex.params().len() + 2);
    // no parameter appears twice: the second pass reuses the first pass's sublayers
    let sub: Vec<_> = re.encoder_sublayer_param_ids(0);
    assert!(sub.iter().all(|id| re.params().name(*id).starts_with("enc.0.")));
}

#[test]
fn decoder_is_causal() {
    let model = Model::new(config(Variant::Exgre)).unwrap();
    let src: &[usize] = &[4, 5, 6];
    let logits = |tgt: &[usize]| {
        let tape = Tape::new(0);
        let p = model.bind(&tape);
        let enc = model.encode(&p, &SourceBatch::new(&[src]), &ForwardOptions::eval()).unwrap();
        model.decode(&p, enc.output, &[3], tgt, &[tgt.len()], &ForwardOptions::eval()).unwrap().value()
    };
    let a = logits(&[2, 4, 5, 6]);
    let b = logits(&[2, 4, 6, 4]);
    let v = 7;
    assert_eq!(a[..2 * v], b[..2 * v]);
    assert_ne!(a[2 * v..3 * v], b[2 * v..3 * v]);
}

#[test]
fn packing_order_does_not_change_sentences() {
    for variant in [Variant::Baseline, Variant::Exgre, Variant::Refsr] {
        let model = Model::new(config(variant)).unwrap();
        let (x, y): (&[usize], &[usize]) = (&[4, 5, 6, 7, 8], &[8, 7]);
        let xy = encoder_output(&model, &[x, y], &ForwardOptions::eval());
        let yx = encoder_output(&model, &[y, x], &ForwardOptions::eval());
        let alone = encoder_output(&model, &[x], &ForwardOptions::eval());
        let d = 8;
        assert_eq!(xy[..5 * d], yx[2 * d..]);
        assert_eq!(xy[5 * d..], yx[..2 * d]);
        for (a, b) in xy[..5 * d].iter().zip(&alone) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn source_order_positions_give_plain_sinusoids() {
    let model = Model::new(config(Variant::Exgre)).unwrap();
    let tape = Tape::new(0);
    let p = model.bind(&tape);
    let opts = ForwardOptions { source_order_positions: true, ..ForwardOptions::eval() };
    let enc = model.encode(&p, &SourceBatch::new(&[&[4, 5, 6]]), &opts).unwrap();
    let pr = enc.final_reorder_embedding().unwrap().value();
    for j in 0..3 {
        // a window of half-width 0.5 centred on an integer holds that slot alone with weight 1
        assert_eq!(&pr[j * 8..(j + 1) * 8], model.table().row(j));
    }
}

fn pairs() -> Vec<EncodedPair> {
    vec![
        EncodedPair { src: vec![4, 5, 6], tgt: vec![4, 5], positions: Some(PositionSequence::new(vec![1, 2, 0]).unwrap()) },
        EncodedPair { src: vec![7, 8], tgt: vec![6, 6, 5], positions: Some(PositionSequence::new(vec![1, 0]).unwrap()) },
    ]
}

#[test]
fn zero_lambda_leaves_gradients_untouched() {
    for variant in [Variant::Exgre, Variant::Refsr] {
        let model = Model::new(config(variant)).unwrap();
        let ps = pairs();
        let batch = TrainingBatch::new(&ps.iter().collect::<Vec<_>>()).unwrap();
        let grads = |use_total: bool| {
            let tape = Tape::new(0);
            let p = model.bind(&tape);
            let parts = total_loss(&model, &p, &batch, 0.1, &ForwardOptions::eval()).unwrap();
            assert!(parts.similarity.is_some());
            let g = tape.backward(if use_total { parts.total } else { parts.nll }).unwrap();
            p.iter().map(|&v| g.wrt(v).map(<[f64]>::to_vec)).collect::<Vec<_>>()
        };
        assert_eq!(grads(true), grads(false));
    }
}

#[test]
fn beam_of_one_is_greedy() {
    let model = Model::new(config(Variant::Refsr)).unwrap();
    for src in [&[4usize, 5, 6][..], &[8, 8, 7, 4, 5, 6][..], &[5][..]] {
        let g = greedy(&model, src, None).unwrap();
        let b = beam_search(&model, src, 1, None).unwrap();
        assert_eq!(g.tokens, b.tokens);
        assert_eq!(g.log_prob, b.log_prob);
    }
    let batch = greedy_batch(&model, &[&[4, 5, 6], &[5]], None).unwrap();
    assert_eq!(batch[1], greedy(&model, &[5], None).unwrap());
}

/// Every sequence over the emittable tokens (`<unk>` and real words) of length < `max_len`, followed by `</s>`.
fn all_outputs(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![Vocab::EOS_ID]];
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 1..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for t in std::iter::once(Vocab::UNK_ID).chain(Vocab::EOS_ID + 1..vocab) {
                let mut q = p.clone();
                q.push(t);
                let mut done = q.clone();
                done.push(Vocab::EOS_ID);
                out.push(done);
                next.push(q);
            }
        }
        frontier = next;
    }
    out
}

#[test]
fn wider_beam_never_scores_worse_and_brute_force_bounds_it() {
    let mut cfg = config(Variant::Exgre);
    cfg.tgt_vocab = 6;
    let max_len = 4;
    for seed in 0..4 {
        cfg.seed = seed;
        let model = Model::new(cfg.clone()).unwrap();
        for src in [&[4usize, 5][..], &[6, 7, 8, 4][..]] {
            let b1 = beam_search(&model, src, 1, Some(max_len)).unwrap();
            let b5 = beam_search(&model, src, 5, Some(max_len)).unwrap();
            assert!(b5.score() >= b1.score() - 1e-12);
            let best = all_outputs(cfg.tgt_vocab, max_len)
                .into_iter()
                .map(|y| sequence_log_prob(&model, src, &y).unwrap() / y.len() as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(b5.score() <= best + 1e-9);
            let recomputed = sequence_log_prob(&model, src, &b5.tokens).unwrap();
            assert!((recomputed - b5.log_prob).abs() < 1e-9);
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let model = Model::new(config(Variant::Refsr)).unwrap();
    let sv = Vocab::from_tokens(["a", "b", "c", "d", "e"].map(String::from));
    let tv = Vocab::from_tokens(["x", "y", "z"].map(String::from));
    let ck = Checkpoint::from_model(&model, 42, &sv, &tv);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    let m2 = back.model().unwrap();
    let src: &[usize] = &[4, 5, 6];
    assert_eq!(encoder_output(&m2, &[src], &ForwardOptions::eval()), encoder_output(&model, &[src], &ForwardOptions::eval()));

    let mut bytes = ck.to_bytes().unwrap();
    bytes[0] = b'X';
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    assert!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()[..40]).is_err());
}

#[test]
fn averaging_identical_checkpoints_is_identity() {
    let model = Model::new(config(Variant::Exgre)).unwrap();
    let v = Vocab::from_tokens(["a".to_string()]);
    let ck = Checkpoint::from_model(&model, 1, &v, &v);
    let avg = average_checkpoints(&[ck.clone(), ck.clone()]).unwrap();
    assert_eq!(avg.params, ck.params);
    let other = Checkpoint::from_model(&Model::new(config(Variant::Baseline)).unwrap(), 2, &v, &v);
    assert!(average_checkpoints(&[ck, other]).is_err());
    assert!(average_checkpoints(&[]).is_err());
}

#[test]
fn sim_metric_bounds_and_requirements() {
    let model = Model::new(config(Variant::Exgre)).unwrap();
    let data = Dataset { pairs: pairs() };
    let s = sim_metric(&model, &data, SimSource::Predicted).unwrap();
    assert!((-1.0..=1.0).contains(&s));
    // identity positions against the plain sinusoid rows: every cosine is 1
    let ident = Dataset {
        pairs: pairs()
            .into_iter()
            .map(|p| EncodedPair { positions: Some(PositionSequence::identity(p.src.len())), ..p })
            .collect(),
    };
    assert!((sim_metric(&model, &ident, SimSource::Plain).unwrap() - 1.0).abs() < 1e-12);
    let bare = Dataset { pairs: pairs().into_iter().map(|p| EncodedPair { positions: None, ..p }).collect() };
    assert!(sim_metric(&model, &bare, SimSource::Predicted).is_err());
    let base = Model::new(config(Variant::Baseline)).unwrap();
    assert!(sim_metric(&base, &data, SimSource::Predicted).is_err());
}
