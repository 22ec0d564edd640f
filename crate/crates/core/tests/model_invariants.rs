use proptest::prelude::*;
use satrack::backbone::{AttentionMode, Backbone, BackboneConfig, TextMode};
use satrack::head::{soft_argmax, CornerHead, CornerMaps};
use satrack::nn::Ctx;
use satrack::tensor::{ParamStore, Rng, Tape, Tensor, Var};
use satrack::text::{tokenize, TokenSequence, Vocab, PAD};

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

struct Run {
    template: Vec<f64>,
    search: Vec<f64>,
    text: Vec<f64>,
}

fn run(store: &ParamStore, bb: &Backbone, t: &Tensor, s: &Tensor, tokens: &[TokenSequence]) -> Run {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, store, false);
    let tv = ctx.tape.leaf(t);
    let sv = ctx.tape.leaf(s);
    let out = bb.forward(&mut ctx, tv, sv, tokens).unwrap();
    let get = |v: Var| tape.value(v).to_vec();
    Run {
        template: get(out.template),
        search: get(out.search),
        text: get(out.text),
    }
}

fn setup(cfg: &BackboneConfig, seed: u64) -> (ParamStore, Backbone, Vocab) {
    let vocab = Vocab::builtin();
    let mut store = ParamStore::new(seed);
    let bb = Backbone::new(&mut store, cfg, vocab.len()).unwrap();
    (store, bb, vocab)
}

fn inputs(cfg: &BackboneConfig, b: usize, rng: &mut Rng) -> (Tensor, Tensor) {
    (
        randn(&[b, cfg.template_size, cfg.template_size, 3], rng),
        randn(&[b, cfg.search_size, cfg.search_size, 3], rng),
    )
}

fn bits(a: &[f64]) -> Vec<u64> {
    a.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn pad_embeddings_do_not_reach_real_tokens() {
    for mode in [TextMode::Synchronous, TextMode::Asynchronous] {
        let cfg = BackboneConfig {
            text_mode: mode,
            ..BackboneConfig::desk()
        };
        let (mut store, bb, vocab) = setup(&cfg, 1);
        let tokens = vec![tokenize("the green circle", &vocab, cfg.max_text_len).unwrap()];
        let mut rng = Rng::new(2);
        let (t, s) = inputs(&cfg, 1, &mut rng);
        let before = run(&store, &bb, &t, &s, &tokens);

        let d = cfg.stages[0].dim;
        let embed = store.by_name_mut("backbone.text.embed").unwrap();
        embed.data_mut()[PAD * d..(PAD + 1) * d].iter_mut().for_each(|v| *v += 3.0);
        let real = tokens[0].real_len();
        let pos = store.by_name_mut("backbone.text.pos").unwrap();
        pos.data_mut()[real * d..].iter_mut().for_each(|v| *v -= 1.5);
        let after = run(&store, &bb, &t, &s, &tokens);

        let c3 = cfg.stages[2].dim;
        assert_eq!(bits(&before.text[..real * c3]), bits(&after.text[..real * c3]));
        assert_ne!(bits(&before.text[real * c3..]), bits(&after.text[real * c3..]));
        assert_eq!(bits(&before.search), bits(&after.search));
    }
}

#[test]
fn without_sam_output_ignores_text() {
    let cfg = BackboneConfig {
        sam_enabled: false,
        ..BackboneConfig::desk()
    };
    let (store, bb, vocab) = setup(&cfg, 3);
    let mut rng = Rng::new(4);
    let (t, s) = inputs(&cfg, 2, &mut rng);
    let a: Vec<_> = ["the red circle", "blue square moving up"]
        .iter()
        .map(|d| tokenize(d, &vocab, cfg.max_text_len).unwrap())
        .collect();
    let b: Vec<_> = ["yellow triangle", "the"]
        .iter()
        .map(|d| tokenize(d, &vocab, cfg.max_text_len).unwrap())
        .collect();
    let (ra, rb) = (run(&store, &bb, &t, &s, &a), run(&store, &bb, &t, &s, &b));
    assert_eq!(bits(&ra.search), bits(&rb.search));
    assert_eq!(bits(&ra.template), bits(&rb.template));
}

#[test]
fn self_only_without_sam_is_two_tower() {
    let cfg = BackboneConfig {
        attention: AttentionMode::SelfOnly,
        sam_enabled: false,
        ..BackboneConfig::desk()
    };
    let (store, bb, vocab) = setup(&cfg, 5);
    let tokens = vec![tokenize("the red circle", &vocab, cfg.max_text_len).unwrap()];
    let mut rng = Rng::new(6);
    let (t1, s) = inputs(&cfg, 1, &mut rng);
    let (t2, _) = inputs(&cfg, 1, &mut rng);
    let (r1, r2) = (run(&store, &bb, &t1, &s, &tokens), run(&store, &bb, &t2, &s, &tokens));
    assert_eq!(bits(&r1.search), bits(&r2.search));
    assert_ne!(bits(&r1.template), bits(&r2.template));
}

#[test]
fn symmetric_mode_lets_search_reach_template() {
    let cfg = BackboneConfig {
        attention: AttentionMode::Symmetric,
        ..BackboneConfig::desk()
    };
    let (store, bb, vocab) = setup(&cfg, 7);
    let tokens = vec![tokenize("the red circle", &vocab, cfg.max_text_len).unwrap()];
    let mut rng = Rng::new(8);
    let (t, s1) = inputs(&cfg, 1, &mut rng);
    let (_, s2) = inputs(&cfg, 1, &mut rng);
    let (r1, r2) = (run(&store, &bb, &t, &s1, &tokens), run(&store, &bb, &t, &s2, &tokens));
    assert_ne!(bits(&r1.template), bits(&r2.template));
}

#[test]
fn desk_output_shapes() {
    let cfg = BackboneConfig::desk();
    let (store, bb, vocab) = setup(&cfg, 9);
    let tokens = vec![tokenize("a", &vocab, cfg.max_text_len).unwrap(); 2];
    let mut rng = Rng::new(10);
    let (t, s) = inputs(&cfg, 2, &mut rng);
    let r = run(&store, &bb, &t, &s, &tokens);
    assert_eq!(r.search.len(), 2 * 4 * 4 * 32);
    assert_eq!(r.template.len(), 2 * 2 * 2 * 32);
    assert_eq!(r.text.len(), 2 * cfg.max_text_len * 32);
}

#[test]
fn invalid_inputs_are_rejected() {
    let cfg = BackboneConfig::desk();
    let (store, bb, vocab) = setup(&cfg, 11);
    let mut rng = Rng::new(12);
    let (t, s) = inputs(&cfg, 1, &mut rng);
    let short = vec![tokenize("the red", &vocab, 5).unwrap()];
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, false);
    let tv = ctx.tape.leaf(&t);
    let sv = ctx.tape.leaf(&s);
    assert!(bb.forward(&mut ctx, tv, sv, &short).is_err());

    let bad = BackboneConfig {
        search_size: 60,
        ..BackboneConfig::desk()
    };
    assert!(Backbone::new(&mut ParamStore::new(0), &bad, vocab.len()).is_err());
}

fn corner_maps(tape: &mut Tape, tl: &[f64], br: &[f64], h: usize, w: usize) -> CornerMaps {
    CornerMaps {
        tl: tape.constant(&[1, h * w], tl.to_vec()).unwrap(),
        br: tape.constant(&[1, h * w], br.to_vec()).unwrap(),
        h,
        w,
    }
}

#[test]
fn uniform_maps_give_centered_corners() {
    let mut tape = Tape::new();
    let u = vec![1.0 / 20.0; 20];
    let maps = corner_maps(&mut tape, &u, &u, 4, 5);
    let b = soft_argmax(&mut tape, &maps).unwrap();
    for v in tape.value(b) {
        assert!((v - 0.5).abs() < 1e-15);
    }
}

#[test]
fn uniform_logits_give_uniform_maps() {
    let mut store = ParamStore::new(0);
    let head = CornerHead::new(&mut store, 8, 2).unwrap();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, false);
    let x = ctx.tape.leaf(&Tensor::zeros(&[1, 3, 3, 8]));
    let maps = head.forward(&mut ctx, x).unwrap();
    for v in tape.value(maps.tl).iter().chain(tape.value(maps.br)) {
        assert!((v - 1.0 / 9.0).abs() < 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn peak_shift_moves_corner_by_one_pitch(h in 2usize..9, w in 2usize..9, i in 0usize..8, j in 0usize..8) {
        let (i, j) = (i % (h - 1), j % (w - 1));
        let at = |r: usize, c: usize| {
            let mut m = vec![0.0; h * w];
            m[r * w + c] = 1.0;
            m
        };
        let mut tape = Tape::new();
        let m0 = corner_maps(&mut tape, &at(i, j), &at(i, j), h, w);
        let m1 = corner_maps(&mut tape, &at(i + 1, j + 1), &at(i, j), h, w);
        let b0 = soft_argmax(&mut tape, &m0).unwrap();
        let b1 = soft_argmax(&mut tape, &m1).unwrap();
        let (v0, v1) = (tape.value(b0).to_vec(), tape.value(b1).to_vec());
        prop_assert!((v1[0] - v0[0] - 1.0 / w as f64).abs() < 1e-12);
        prop_assert!((v1[1] - v0[1] - 1.0 / h as f64).abs() < 1e-12);
        prop_assert_eq!(v1[2], v0[2]);
    }

    #[test]
    fn soft_argmax_stays_in_unit_square(seed in 0u64..1000, h in 1usize..8, w in 1usize..8) {
        let mut rng = Rng::new(seed);
        let mut probs = |n: usize| {
            let e: Vec<f64> = (0..n).map(|_| (3.0 * rng.normal()).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let (tl, br) = (probs(h * w), probs(h * w));
        let mut tape = Tape::new();
        let maps = corner_maps(&mut tape, &tl, &br, h, w);
        let b = soft_argmax(&mut tape, &maps).unwrap();
        prop_assert!(tape.value(b).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn compliant_sizes_follow_stride_schedule(k in 1usize..5, m in 1usize..4) {
        let cfg = BackboneConfig {
            search_size: 16 * k,
            template_size: 16 * m,
            ..BackboneConfig::desk()
        };
        let plan = cfg.plan().unwrap();
        let got: Vec<_> = plan.iter().map(|p| (p.search, p.template)).collect();
        prop_assert_eq!(got, vec![(4 * k, 4 * m), (2 * k, 2 * m), (k, m)]);
    }
}
