use proptest::prelude::*;
use satrack::data::{generate_sequence, make_sample, sample_pair, CropConfig, GenSpec};
use satrack::harness::evaluate_predictions;
use satrack::head::BBox;
use satrack::losses::giou_loss;
use satrack::tensor::{Rng, Tape};
use satrack::text::{split_words, tokenize, Vocab, CLS, PAD, SEP};

fn giou(p: BBox, g: BBox) -> f64 {
    let mut tape = Tape::new();
    let pred = tape.constant(&[1, 4], p.to_array().to_vec()).unwrap();
    let l = giou_loss(&mut tape, pred, &[g]).unwrap();
    tape.item(l)
}

fn boxes() -> impl Strategy<Value = BBox> {
    (0.0..1.0f64, 0.0..1.0f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn giou_loss_is_bounded(p in boxes(), g in boxes()) {
        let l = giou(p, g);
        prop_assert!((0.0..=2.0).contains(&l), "loss {l}");
    }

    #[test]
    fn giou_loss_grows_as_box_slides_away(g in boxes(), a in 0.0..3.0f64, d in 0.01..1.0f64) {
        let at = |s: f64| BBox::new(g.x_tl + s, g.y_tl, g.x_br + s, g.y_br);
        prop_assert!(giou(at(a + d), g) >= giou(at(a), g) - 1e-12);
    }

    #[test]
    fn giou_loss_is_symmetric(p in boxes(), g in boxes()) {
        prop_assert!((giou(p, g) - giou(g, p)).abs() < 1e-9);
    }

    #[test]
    fn metrics_are_unit_interval(seed in 0u64..500, n in 2usize..12, noise in 0.0..40.0f64) {
        let mut rng = Rng::new(seed);
        let spec = GenSpec { length: n, ..GenSpec::default() };
        let seq = generate_sequence(seed, 0, &spec).unwrap();
        let pred: Vec<BBox> = seq
            .boxes
            .iter()
            .map(|b| {
                let dx = noise * rng.normal();
                let dy = noise * rng.normal();
                BBox::new(b.x_tl + dx, b.y_tl + dy, b.x_br + dx, b.y_br + dy)
            })
            .collect();
        let r = evaluate_predictions(&[seq], &[pred]).unwrap();
        for v in [r.success, r.precision, r.norm_precision] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn tokenize_layout(text in "[a-zA-Z ,.!]{0,60}", max_len in 3usize..24) {
        let vocab = Vocab::builtin();
        let t = tokenize(&text, &vocab, max_len).unwrap();
        let words = split_words(&text).len().min(max_len - 2);
        prop_assert_eq!(t.len(), max_len);
        prop_assert_eq!(t.real_len(), words + 2);
        prop_assert_eq!(t.ids[0], CLS);
        prop_assert_eq!(t.ids[words + 1], SEP);
        prop_assert!(t.ids[words + 2..].iter().all(|&i| i == PAD));
        prop_assert!(t.mask[..words + 2].iter().all(|&m| m));
        prop_assert!(t.mask[words + 2..].iter().all(|&m| !m));
    }

    #[test]
    fn sample_pair_respects_gap(seed in 0u64..1000, len in 1usize..50, gap in 0usize..40) {
        let mut rng = Rng::new(seed);
        let (t, s) = sample_pair(len, gap, &mut rng);
        prop_assert!(t < len && s < len);
        prop_assert!(t.abs_diff(s) <= gap);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn search_target_projects_back_to_frame(seed in 0u64..10_000, frame in 0usize..8) {
        let spec = GenSpec { length: 8, ..GenSpec::default() };
        let seq = generate_sequence(seed, 3, &spec).unwrap();
        let vocab = Vocab::builtin();
        let tokens = tokenize(&seq.description, &vocab, 8).unwrap();
        let mut rng = Rng::new(seed ^ 0x55);
        let crop = CropConfig::default();
        let s = make_sample(&seq, 0, frame, &crop, (16, 32), &tokens, true, &mut rng, 0).unwrap();
        let back = s.meta.to_frame(&s.gt);
        let b = seq.boxes[frame];
        for (u, v) in back.to_array().iter().zip(b.to_array()) {
            prop_assert!((u - v).abs() <= 0.5, "{back:?} vs {b:?}");
        }
    }
}
