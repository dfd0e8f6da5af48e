use ctxasr::corpus::{generate_corpus, CorpusSpec, FrameSequence};
use ctxasr::ctc::ctc_brute_force;
use ctxasr::encoders::EncoderConfig;
use ctxasr::extractor::{
    extract_context, mam_loss, mask_modality, mlm_loss, modal_ctc_loss, pretrain_loss, sample_modal_mask,
    sample_token_mask, train_extractor, Extractor, ExtractorConfig, ExtractorTrainConfig, MaskPlan, ModalMask,
    PretrainExample,
};
use ctxasr::layers::Pass;
use ctxasr::train::OptimConfig;
use ctxasr::Error;
use ctxasr_nn::{finite_difference_check, Graph, NodeId, ParamStore, SeedTree, Tensor};
use rand::Rng;

fn micro_config(vocab: usize) -> ExtractorConfig {
    let enc = |input_dim| EncoderConfig {
        num_layers: 1,
        num_heads: 2,
        d_model: 4,
        d_ff: 6,
        input_dim,
        dropout: 0.0,
    };
    ExtractorConfig {
        speech: enc(3),
        text: enc(vocab),
        cme_blocks: 1,
        cme_heads: 2,
        cme_d_ff: 6,
        dropout: 0.0,
        ..ExtractorConfig::default()
    }
}

fn micro(vocab: usize, seed: u64) -> (Extractor, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let ext = Extractor::new(&micro_config(vocab), &mut store, SeedTree::new(seed)).unwrap();
    (ext, store)
}

fn frames(rows: usize, dim: usize, seed: u64) -> FrameSequence {
    let mut rng = SeedTree::new(seed).rng();
    FrameSequence::new(rows, dim, (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn value(p: &Pass<f64>, n: NodeId) -> Tensor<f64> {
    p.value(n).unwrap().clone()
}

fn set(store: &mut ParamStore<f64>, name: &str, t: Tensor<f64>) {
    let id = store.id(name).unwrap();
    store.set(id, t).unwrap();
}

#[test]
fn splice_has_combined_length_and_boundary() {
    let (ext, ps) = micro(3, 0);
    let mut p = Pass::eval(&ps);
    let a = ext.encode_speech(&mut p, &frames(5, 3, 1)).unwrap();
    let t = ext.encode_text(&mut p, &[0, 1, 2]).unwrap();
    let out = ext.cme_forward(&mut p, a, t).unwrap();
    assert_eq!((out.len, out.boundary), (8, 5));
    assert_eq!(p.value(out.h).unwrap().shape(), &[8, 4]);
}

#[test]
fn text_rows_influence_speech_rows() {
    let (ext, ps) = micro(3, 0);
    let f = frames(5, 3, 1);
    let speech_rows = |zero_text: bool| {
        let mut p = Pass::eval(&ps);
        let a = ext.encode_speech(&mut p, &f).unwrap();
        let t = if zero_text {
            p.constant(Tensor::zeros(vec![3, 4]))
        } else {
            ext.encode_text(&mut p, &[0, 1, 2]).unwrap()
        };
        let out = ext.cme_forward(&mut p, a, t).unwrap();
        let s = p.g.slice_rows(out.h, 0, 5).unwrap();
        value(&p, s)
    };
    assert!(speech_rows(true).max_abs_diff(&speech_rows(false)) > 1e-4);
    assert_eq!(speech_rows(false).data(), speech_rows(false).data());
}

#[test]
fn token_mask_edge_rates() {
    let mut rng = SeedTree::new(0).rng();
    assert!(sample_token_mask(7, 0.0, &mut rng).unwrap().is_empty());
    assert!(matches!(sample_token_mask(4, 1.0, &mut rng), Err(Error::MaskSaturated(_))));
}

#[test]
fn token_mask_count_is_binomial() {
    let mut rng = SeedTree::new(17).rng();
    let n = sample_token_mask(10_000, 0.3, &mut rng).unwrap().len();
    // mean 3000, sd sqrt(10000 * 0.3 * 0.7) ≈ 45.8
    assert!((2850..=3150).contains(&n), "{n} masked");
}

#[test]
fn modal_selector_statistics() {
    let mut rng = SeedTree::new(3).rng();
    assert!((0..1000).all(|_| sample_modal_mask(0.0, &mut rng).unwrap() == ModalMask::None));
    let mut speech = 0;
    for _ in 0..10_000 {
        match sample_modal_mask(1.0, &mut rng).unwrap() {
            ModalMask::Speech => speech += 1,
            ModalMask::Text => {}
            ModalMask::None => panic!("p = 1 must always mask a modality"),
        }
    }
    // sd = sqrt(10000 / 4) = 50
    assert!((4850..=5150).contains(&speech), "{speech} speech masks");
}

#[test]
fn speech_selector_replaces_every_speech_row() {
    let (ext, ps) = micro(3, 0);
    let mut p = Pass::eval(&ps);
    let a = ext.encode_speech(&mut p, &frames(4, 3, 2)).unwrap();
    let t = ext.encode_text(&mut p, &[2, 0]).unwrap();
    let (am, tm) = mask_modality(&ext, &mut p, a, t, ModalMask::Speech).unwrap();
    assert_eq!(tm, t);
    let mask = ps.get(ps.id("mask.speech").unwrap()).clone();
    let am = value(&p, am);
    for r in 0..4 {
        assert_eq!(am.row_slice(r), mask.data());
    }
}

fn mlm_with_head(w: Tensor<f64>, b: Tensor<f64>, positions: Vec<usize>, targets: &[usize]) -> f64 {
    let (ext, mut ps) = micro(32, 4);
    set(&mut ps, "head.mlm.w", w);
    set(&mut ps, "head.mlm.b", b);
    let mut p = Pass::eval(&ps);
    let a = ext.encode_speech(&mut p, &frames(4, 3, 2)).unwrap();
    let t = ext.encode_text(&mut p, targets).unwrap();
    let loss = mlm_loss(&ext, &mut p, a, t, &MaskPlan::text_only(positions), targets).unwrap();
    p.g.scalar(loss).unwrap()
}

#[test]
fn uniform_head_gives_log_vocabulary() {
    let loss = mlm_with_head(Tensor::zeros(vec![4, 32]), Tensor::zeros(vec![1, 32]), vec![0, 2], &[5, 6, 7]);
    assert!((loss - 32f64.ln()).abs() < 1e-12);
}

#[test]
fn confident_head_gives_vanishing_loss() {
    let mut b = vec![0.0; 32];
    b[9] = 60.0;
    let loss = mlm_with_head(Tensor::zeros(vec![4, 32]), Tensor::row(b), vec![0, 1], &[9, 9, 3]);
    assert!(loss < 1e-20, "{loss}");
}

#[test]
fn masked_character_loss_averages_hand_nlls() {
    let b: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
    let loss = mlm_with_head(Tensor::zeros(vec![4, 32]), Tensor::row(b.clone()), vec![1, 2], &[4, 11, 20]);
    let log_z = b.iter().map(|x| x.exp()).sum::<f64>().ln();
    let expect = ((log_z - b[11]) + (log_z - b[20])) / 2.0;
    assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
}

fn mam_value(h: &[f64], remain: &[f64], other: &[f64], bandwidth: f64) -> f64 {
    let ps = ParamStore::<f64>::new();
    let mut p = Pass::eval(&ps);
    let d = h.len();
    let mut node = |v: &[f64]| p.constant(Tensor::matrix(1, d, v.to_vec()).unwrap());
    let (h, r, o) = (node(h), node(remain), node(other));
    let loss = mam_loss(&mut p, h, r, o, bandwidth).unwrap();
    p.g.scalar(loss).unwrap()
}

#[test]
fn tied_similarities_give_log_two() {
    let h = [0.3, -1.2, 0.8];
    assert!((mam_value(&h, &h, &h, 1.0) - 2f64.ln()).abs() < 1e-9);
}

#[test]
fn distant_negative_gives_vanishing_loss() {
    assert!(mam_value(&[0.0, 0.0], &[0.0, 0.0], &[1e3, -1e3], 1.0) < 1e-300);
}

#[test]
fn two_dimensional_hand_example() {
    let expect = -((-1f64).exp() / ((-1f64).exp() + (-4f64).exp())).ln();
    let got = mam_value(&[0.0, 0.0], &[1.0, 0.0], &[2.0, 2.0], 1.0);
    assert!((got - expect).abs() < 1e-6);
    assert!((got - 0.0486).abs() < 1e-4);
}

fn ctc_setup(seed: u64, uniform: bool) -> (Extractor, ParamStore<f64>) {
    let (ext, mut ps) = micro(2, seed);
    if uniform {
        set(&mut ps, "head.ctc.w", Tensor::zeros(vec![4, 3]));
        set(&mut ps, "head.ctc.b", Tensor::zeros(vec![1, 3]));
    }
    (ext, ps)
}

#[test]
fn uniform_modal_ctc_counts_three_paths() {
    let (ext, ps) = ctc_setup(0, true);
    let mut p = Pass::eval(&ps);
    let a = ext.encode_speech(&mut p, &frames(2, 3, 5)).unwrap();
    let t = ext.encode_text(&mut p, &[0]).unwrap();
    let loss = modal_ctc_loss(&ext, &mut p, a, t, &[0]).unwrap();
    assert!((p.g.scalar(loss).unwrap() - 3f64.ln()).abs() < 1e-12);
    assert!(modal_ctc_loss(&ext, &mut p, a, t, &[]).is_err());
}

#[test]
fn modal_ctc_matches_path_enumeration() {
    for seed in 0..5 {
        let (ext, ps) = ctc_setup(seed, false);
        let mut p = Pass::eval(&ps);
        let a = ext.encode_speech(&mut p, &frames(5, 3, seed + 10)).unwrap();
        let t = ext.encode_text(&mut p, &[1, 0]).unwrap();
        let loss = modal_ctc_loss(&ext, &mut p, a, t, &[1, 0]).unwrap();
        let loss = p.g.scalar(loss).unwrap();
        let out = ext.cme_forward(&mut p, a, t).unwrap();
        let lp = ext.ctc_log_probs(&mut p, &out).unwrap();
        // extractor labels are shifted past the blank
        let brute = ctc_brute_force(p.value(lp).unwrap(), &[2, 1]).unwrap();
        assert!((loss - brute).abs() < 1e-9, "{loss} vs {brute}");
    }
}

fn micro_batch() -> (Vec<FrameSequence>, Vec<Vec<usize>>) {
    (vec![frames(6, 3, 1), frames(5, 3, 2)], vec![vec![0, 2, 1], vec![2, 2]])
}

fn examples<'a>(f: &'a [FrameSequence], c: &'a [Vec<usize>]) -> Vec<PretrainExample<'a>> {
    f.iter().zip(c).map(|(f, c)| PretrainExample { frames: f, chars: c }).collect()
}

fn gradcheck(invariant: &[&str], build: impl Fn(&Extractor, &mut Pass<f64>) -> NodeId) -> f64 {
    let (ext, mut ps) = micro(3, 7);
    // Softmax is invariant to key biases, and losses built from differences
    // of outputs to whatever is listed in `invariant`: those gradients are
    // rounding noise.
    let keys: Vec<_> = ps
        .ids()
        .filter(|&id| ps.name(id).ends_with(".k.b") || invariant.contains(&ps.name(id)))
        .collect();
    for id in keys {
        ps.set_frozen(id, true);
    }
    let report = finite_difference_check(
        |ps: &ParamStore<f64>| -> Result<(Graph<f64>, NodeId), Error> {
            let mut p = Pass::eval(ps);
            let loss = build(&ext, &mut p);
            Ok((p.g, loss))
        },
        &mut ps,
        1e-5,
    )
    .unwrap();
    assert!(report.checked > 300);
    report.max_rel_error
}

#[test]
fn masked_character_gradients() {
    let (f, c) = micro_batch();
    let err = gradcheck(&[], |ext, p| {
        let a = ext.encode_speech(p, &f[0]).unwrap();
        let t = ext.encode_text(p, &c[0]).unwrap();
        let mv = ext.mask_vector(p, ModalMask::Text).unwrap();
        let t_remain = p.g.replace_rows(t, mv, &[1]).unwrap();
        mlm_loss(ext, p, a, t_remain, &MaskPlan::text_only(vec![1]), &c[0]).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn contrastive_gradients() {
    let (f, c) = micro_batch();
    let err = gradcheck(&["cme.norm.bias"], |ext, p| {
        let a0 = ext.encode_speech(p, &f[0]).unwrap();
        let t0 = ext.encode_text(p, &c[0]).unwrap();
        let a1 = ext.encode_speech(p, &f[1]).unwrap();
        let t1 = ext.encode_text(p, &c[1]).unwrap();
        let mv = ext.mask_vector(p, ModalMask::Speech).unwrap();
        let a_remain = p.g.replace_rows(a0, mv, &[1, 4]).unwrap();
        let h = ext.cme_forward(p, a0, t0).unwrap().h;
        let h_remain = ext.cme_forward(p, a_remain, t0).unwrap().h;
        let h_other = ext.cme_forward(p, a1, t1).unwrap().h;
        mam_loss(p, h, h_remain, h_other, 0.5).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn modal_ctc_gradients() {
    let (f, c) = micro_batch();
    let err = gradcheck(&[], |ext, p| {
        let a = ext.encode_speech(p, &f[0]).unwrap();
        let t = ext.encode_text(p, &c[0]).unwrap();
        modal_ctc_loss(ext, p, a, t, &c[0]).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn combined_objective_gradients() {
    let (f, c) = micro_batch();
    let batch = examples(&f, &c);
    let err = gradcheck(&[], |ext, p| pretrain_loss(ext, p, &batch, 0.4, 0.3, SeedTree::new(5)).unwrap().0.total);
    assert!(err < 1e-4, "{err}");
}

fn total_and_terms(alpha: f64, beta: f64) -> (f64, [f64; 3]) {
    let (ext, ps) = micro(3, 7);
    let (f, c) = micro_batch();
    let batch = examples(&f, &c);
    let mut p = Pass::eval(&ps);
    let (_, br) = pretrain_loss(&ext, &mut p, &batch, alpha, beta, SeedTree::new(21)).unwrap();
    (br.total, [br.ctc, br.mlm, br.mam])
}

#[test]
fn single_term_weights_reproduce_that_term_exactly() {
    let (_, terms) = total_and_terms(0.4, 0.3);
    let (ctc_only, ctc_terms) = total_and_terms(1.0, 0.0);
    let (mlm_only, _) = total_and_terms(0.0, 1.0);
    assert_eq!(ctc_terms, terms, "weights must not change the masks");
    assert_eq!(ctc_only.to_bits(), terms[0].to_bits());
    assert_eq!(mlm_only.to_bits(), terms[1].to_bits());
}

#[test]
fn equal_weights_average_the_terms() {
    let third = 1.0 / 3.0;
    let (total, [ctc, mlm, mam]) = total_and_terms(third, third);
    assert!((total - (ctc + mlm + mam) / 3.0).abs() < 1e-12);
}

#[test]
fn contrastive_term_needs_two_examples() {
    let (ext, ps) = micro(3, 7);
    let (f, c) = micro_batch();
    let batch = examples(&f[..1], &c[..1]);
    let mut p = Pass::eval(&ps);
    assert!(pretrain_loss(&ext, &mut p, &batch, 0.4, 0.3, SeedTree::new(0)).is_err());
    assert!(pretrain_loss(&ext, &mut p, &batch, 0.5, 0.5, SeedTree::new(0)).is_ok());
}

#[test]
fn extraction_keeps_speech_length_and_uses_the_dummy() {
    let (ext, ps) = micro(3, 2);
    let f = frames(7, 3, 4);
    let h = extract_context(&ext, &ps, &f).unwrap();
    assert_eq!(h.shape(), &[7, 4]);
    assert_eq!(h.data(), extract_context(&ext, &ps, &f).unwrap().data());

    let mut p = Pass::eval(&ps);
    let a = ext.encode_speech(&mut p, &f).unwrap();
    let t = ext.encode_text(&mut p, &[1, 2, 0]).unwrap();
    let out = ext.cme_forward(&mut p, a, t).unwrap();
    let s = p.g.slice_rows(out.h, 0, 7).unwrap();
    assert!(value(&p, s).max_abs_diff(&h) > 1e-4);
}

fn small_corpus(conversations: usize) -> Vec<ctxasr::corpus::Conversation> {
    generate_corpus(&CorpusSpec {
        num_conversations: conversations,
        ..CorpusSpec::default()
    })
    .unwrap()
}

fn small_training(epochs: usize, batch_size: usize) -> ExtractorTrainConfig {
    ExtractorTrainConfig {
        epochs,
        batch_size,
        optim: OptimConfig {
            warmup_steps: 20,
            ..OptimConfig::default()
        },
        ..ExtractorTrainConfig::default()
    }
}

fn compact_config() -> ExtractorConfig {
    let enc = |input_dim| EncoderConfig {
        num_layers: 1,
        num_heads: 2,
        d_model: 16,
        d_ff: 32,
        input_dim,
        dropout: 0.1,
    };
    ExtractorConfig {
        speech: enc(16),
        text: enc(32),
        cme_blocks: 1,
        cme_heads: 2,
        cme_d_ff: 32,
        ..ExtractorConfig::default()
    }
}

#[test]
fn one_epoch_is_reproducible() {
    let corpus = small_corpus(2);
    let data: Vec<PretrainExample> = corpus
        .iter()
        .flat_map(|c| &c.utterances)
        .take(10)
        .map(|u| PretrainExample {
            frames: &u.frames,
            chars: &u.chars,
        })
        .collect();
    let run = || {
        let (ext, mut ps) = Extractor::init(&compact_config(), 3).unwrap();
        let log = train_extractor(&ext, &mut ps, &data, &small_training(1, 4), SeedTree::new(8), |_| {}).unwrap();
        (log[0].total.to_bits(), ps)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    for (x, y) in pa.entries().iter().zip(pb.entries()) {
        assert_eq!(x.value.data(), y.value.data(), "{}", x.name);
    }
}

#[test]
fn training_reduces_the_objective_and_freezes_modal_encoders() {
    let corpus = small_corpus(12);
    let data: Vec<PretrainExample> = corpus
        .iter()
        .flat_map(|c| &c.utterances)
        .map(|u| PretrainExample {
            frames: &u.frames,
            chars: &u.chars,
        })
        .collect();
    let (ext, mut ps) = Extractor::init(&compact_config(), 1).unwrap();
    let cfg = ExtractorTrainConfig {
        modal_warmup_epochs: 2,
        ..small_training(20, 8)
    };
    let log = train_extractor(&ext, &mut ps, &data, &cfg, SeedTree::new(2), |_| {}).unwrap();
    assert!(log[19].total < log[0].total, "{} -> {}", log[0].total, log[19].total);

    // Rerun only the warm-up epochs; frozen parameters must not move after.
    let (ext2, mut warm) = Extractor::init(&compact_config(), 1).unwrap();
    let warm_cfg = ExtractorTrainConfig { epochs: 2, ..cfg.clone() };
    train_extractor(&ext2, &mut warm, &data, &warm_cfg, SeedTree::new(2), |_| {}).unwrap();
    let mut frozen = 0;
    for (e, w) in ps.entries().iter().zip(warm.entries()) {
        let modal = (e.name.starts_with("speech.") || e.name.starts_with("text.")) && !e.name.starts_with("speech.proj");
        assert_eq!(e.frozen, modal, "{}", e.name);
        if modal {
            frozen += 1;
            assert_eq!(e.value.data(), w.value.data(), "{}", e.name);
        } else {
            assert_ne!(e.value.data(), w.value.data(), "{}", e.name);
        }
    }
    assert!(frozen > 0);
}
