//! Acceptance suite. Every test prints one `PASS`/`FAIL` line (written to
//! the raw stdout handle so it survives test output capture) and then asserts.
//!
//! Pinned tolerances:
//! 1. op gradients < 1e-6, full model < 1e-4, under 300 s
//! 2. exact stage sizes, dims, heads, depths and parameter shapes
//! 3. template and text features bit-identical, search gradients exactly 0
//! 4. attention rows 1 +- 1e-9, gates in (0, 1), corner maps 1 +- 1e-7
//! 5. loss oracles within 1e-9 on 1000 pairs, label counts exact
//! 6. overfit below 10 % of the initial loss within 200 steps, under 120 s
//! 7. full > wo_dm >= w_tem > baseline, full - baseline >= 0.05 and within
//!    0.05 below the pinned first-run margin 0.2824
//! 8. bit-identical checkpoints and reports, resume equals uninterrupted
//! 9. saturated loss < 1e-6, zero score ln 2 +- 1e-9

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use satrack::backbone::{AttentionMode, Backbone, BackboneConfig, IN_CHANNELS};
use satrack::data::{generate_dataset, make_sample, GenSpec, Sequence};
use satrack::harness::{
    build_vocab, evaluate_ope, model_gradcheck, run_ablation, Batch, TrainConfig, Trainer, Variant,
};
use satrack::head::{BBox, CornerHead};
use satrack::losses::{dense_label, dense_matching_loss, giou_loss, LossWeights};
use satrack::nn::{attention, Ctx};
use satrack::tensor::{op_gradchecks, FdOptions, ParamStore, Rng, Tape, Tensor};
use satrack::text::{tokenize, Vocab};

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "acceptance criterion {n} [{name}]: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn random_box(rng: &mut Rng) -> BBox {
    let (a, b) = (rng.uniform(), rng.uniform());
    let (c, d) = (rng.uniform(), rng.uniform());
    BBox::new(a.min(b), c.min(d), a.max(b), c.max(d))
}

fn descriptions(n: usize) -> Vec<String> {
    let words = ["the red circle moving left", "a small blue square", "green triangle", "the"];
    (0..n).map(|i| words[i % words.len()].to_string()).collect()
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let ops = op_gradchecks(0).unwrap();
    let (worst_op, op_err) = ops
        .iter()
        .map(|(n, r)| (*n, r.max_rel_error))
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let opts = FdOptions {
        max_entries_per_param: Some(4),
        ..FdOptions::default()
    };
    let model = model_gradcheck(&TrainConfig::desk(), 2, &opts).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = op_err < 1e-6 && model.max_rel_error < 1e-4 && secs < 300.0;
    report(
        1,
        "gradient suite",
        pass,
        &format!(
            "{} ops, worst {worst_op} {op_err:.2e}; model {} entries, max {:.2e}; {secs:.1}s",
            ops.len(),
            model.entries_checked,
            model.max_rel_error
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_full_scale_schedule() {
    let cfg = BackboneConfig::full();
    let plan = cfg.plan().unwrap();
    let got: Vec<_> = plan.iter().map(|p| (p.search, p.template, p.dim, p.heads, p.depth)).collect();
    let want = vec![(80, 32, 64, 1, 1), (40, 16, 192, 3, 4), (20, 8, 384, 6, 16)];
    let mut store = ParamStore::new(0);
    let backbone = Backbone::new(&mut store, &cfg, Vocab::builtin().len()).unwrap();
    let head = CornerHead::new(&mut store, cfg.stages[2].dim, 4);
    let cte1 = store.by_name("backbone.stage1.cte.w").map(|t| t.shape().to_vec());
    let pass = got == want
        && cfg.max_text_len == 30
        && backbone.cfg == cfg
        && head.is_ok()
        && cte1 == Some(vec![7, 7, IN_CHANNELS, 64]);
    report(
        2,
        "full-scale shape schedule",
        pass,
        &format!("plan {got:?}, {} parameters", store.num_trainable_values()),
    );
    assert!(pass, "plan {got:?}, stage-1 embedding {cte1:?}");
}

#[test]
fn criterion_3_template_isolation() {
    let cfg = BackboneConfig {
        attention: AttentionMode::Asymmetric,
        ..BackboneConfig::desk()
    };
    let vocab = Vocab::builtin();
    let mut store = ParamStore::new(3);
    let backbone = Backbone::new(&mut store, &cfg, vocab.len()).unwrap();
    let tokens: Vec<_> = descriptions(2)
        .iter()
        .map(|d| tokenize(d, &vocab, cfg.max_text_len).unwrap())
        .collect();
    let mut rng = Rng::new(11);
    let template = randn(&[2, cfg.template_size, cfg.template_size, 3], &mut rng);
    let (s, t) = (cfg.search_size, cfg.template_size);

    let mut bits_equal = true;
    let mut outputs: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut max_grad: f64 = 0.0;
    for trial in 0..3 {
        let search = randn(&[2, s, s, 3], &mut rng).with_grad();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, trial == 0);
        let tv = ctx.tape.leaf(&template);
        let sv = ctx.tape.leaf(&search);
        let out = backbone.forward(&mut ctx, tv, sv, &tokens).unwrap();
        let mut feats = vec![out.template, out.text];
        feats.extend(out.diagnostics.stage_outputs.iter().map(|&(_, xt, _)| xt));
        let vals: Vec<Vec<f64>> = feats.iter().map(|&f| tape.value(f).to_vec()).collect();
        let mut acc = None;
        let mut wrng = Rng::new(99);
        for &f in &feats {
            let w = randn(tape.shape(f), &mut wrng);
            let wv = tape.leaf(&w);
            let p = tape.mul(f, wv).unwrap();
            let p = tape.sum(p);
            acc = Some(match acc {
                None => p,
                Some(a) => tape.add(a, p).unwrap(),
            });
        }
        let grads = tape.backward(acc.unwrap()).unwrap();
        let g = grads.wrt_or_zeros(&tape, sv);
        max_grad = g.iter().fold(max_grad, |m, v| m.max(v.abs()));
        if let Some(first) = outputs.first() {
            for (a, b) in first.iter().zip(&vals) {
                bits_equal &= a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
            }
        }
        outputs.push(vals);
        assert_eq!(outputs.last().unwrap()[0].len(), 2 * (t / 16) * (t / 16) * cfg.stages[2].dim);
    }
    let pass = bits_equal && max_grad == 0.0;
    report(
        3,
        "template isolation",
        pass,
        &format!("bit-identical {bits_equal}, max |d/d search| {max_grad:e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_4_attention_and_gate_invariants() {
    let mut rng = Rng::new(4);
    let mut rows = 0usize;
    let mut worst_row: f64 = 0.0;
    while rows < 10_000 {
        let (b, nq, nk, heads, c) = (2, 16, 1 + rng.below(24), 1 + rng.below(3), 12);
        let mut tape = Tape::new();
        let q = tape.leaf(&randn(&[b, nq, c], &mut rng));
        let k = tape.leaf(&randn(&[b, nk, c], &mut rng));
        let v = tape.leaf(&randn(&[b, nk, c], &mut rng));
        let mask: Vec<bool> = (0..b * nk).map(|i| i % nk == 0 || rng.uniform() < 0.7).collect();
        let (_, w) = attention(&mut tape, q, k, v, heads, Some(&mask)).unwrap();
        for (r, row) in tape.value(w).chunks(nk).enumerate() {
            let batch = r / (heads * nq);
            let masked_mass: f64 = row
                .iter()
                .zip(&mask[batch * nk..(batch + 1) * nk])
                .filter(|(_, &m)| !m)
                .map(|(p, _)| *p)
                .sum();
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs()).max(masked_mass);
            rows += 1;
        }
    }

    let cfg = BackboneConfig::desk();
    let vocab = Vocab::builtin();
    let mut store = ParamStore::new(5);
    let backbone = Backbone::new(&mut store, &cfg, vocab.len()).unwrap();
    let head = CornerHead::new(&mut store, cfg.stages[2].dim, 2).unwrap();
    let tokens: Vec<_> = descriptions(3)
        .iter()
        .map(|d| tokenize(d, &vocab, cfg.max_text_len).unwrap())
        .collect();
    let (mut gates_ok, mut gate_count, mut model_rows) = (true, 0usize, 0usize);
    let mut worst_map: f64 = 0.0;
    for trial in 0..4 {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, trial % 2 == 0);
        let t = ctx.tape.leaf(&randn(&[3, cfg.template_size, cfg.template_size, 3], &mut rng));
        let s = ctx.tape.leaf(&randn(&[3, cfg.search_size, cfg.search_size, 3], &mut rng));
        let out = backbone.forward(&mut ctx, t, s, &tokens).unwrap();
        let maps = head.forward(&mut ctx, out.search).unwrap();
        for &(_, _, w) in &out.diagnostics.search_attention {
            let nk = *tape.shape(w).last().unwrap();
            for row in tape.value(w).chunks(nk) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
                model_rows += 1;
            }
        }
        for &(_, g) in &out.diagnostics.gates {
            gate_count += tape.value(g).len();
            gates_ok &= tape.value(g).iter().all(|&v| v > 0.0 && v < 1.0);
        }
        for m in [maps.tl, maps.br] {
            for row in tape.value(m).chunks(maps.h * maps.w) {
                worst_map = worst_map.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    let pass = worst_row <= 1e-9 && gates_ok && gate_count > 0 && worst_map <= 1e-7;
    report(
        4,
        "attention and gate invariants",
        pass,
        &format!(
            "{rows} random rows + {model_rows} model rows, worst deviation {worst_row:.1e}; \
             {gate_count} gates in (0,1): {gates_ok}; worst corner map deviation {worst_map:.1e}"
        ),
    );
    assert!(pass);
}

/// Scalar GIoU loss written independently of the tape ops.
fn giou_oracle(p: &BBox, g: &BBox) -> f64 {
    let iw = (p.x_br.min(g.x_br) - p.x_tl.max(g.x_tl)).max(0.0);
    let ih = (p.y_br.min(g.y_br) - p.y_tl.max(g.y_tl)).max(0.0);
    let inter = iw * ih;
    let pa = (p.x_br - p.x_tl).max(0.0) * (p.y_br - p.y_tl).max(0.0);
    let ga = (g.x_br - g.x_tl) * (g.y_br - g.y_tl);
    let union = pa + ga - inter;
    let cw = p.x_br.max(g.x_br) - p.x_tl.min(g.x_tl);
    let ch = p.y_br.max(g.y_br) - p.y_tl.min(g.y_tl);
    let c = cw * ch;
    1.0 - (inter / union - (c - union) / c)
}

fn bce_oracle(scores: &[f64], labels: &[f64], tau: f64) -> f64 {
    let mut total = 0.0;
    for (&s, &y) in scores.iter().zip(labels) {
        let p = 1.0 / (1.0 + (-s / tau).exp());
        let term = if y > 0.5 { -p.ln() } else { -(1.0 - p).ln() };
        total += term;
    }
    total / scores.len() as f64
}

fn count_inside(g: &BBox, h: usize, w: usize) -> usize {
    let cols = (0..w).filter(|&j| {
        let c = (2 * j + 1) as f64 / (2 * w) as f64;
        g.x_tl <= c && c < g.x_br
    });
    let rows = (0..h).filter(|&i| {
        let c = (2 * i + 1) as f64 / (2 * h) as f64;
        g.y_tl <= c && c < g.y_br
    });
    cols.count() * rows.count()
}

#[test]
fn criterion_5_loss_oracles() {
    let mut rng = Rng::new(5);
    let w = LossWeights::desk();
    let (mut giou_err, mut dm_err): (f64, f64) = (0.0, 0.0);
    let mut labels_exact = true;
    for _ in 0..1000 {
        let (p, g) = (random_box(&mut rng), random_box(&mut rng));
        if g.area() < 1e-6 || p.area() < 1e-6 {
            continue;
        }
        let mut tape = Tape::new();
        let pv = tape.leaf(&Tensor::new(&[1, 4], p.to_array().to_vec()).unwrap());
        let l = giou_loss(&mut tape, pv, &[g]).unwrap();
        giou_err = giou_err.max((tape.item(l) - giou_oracle(&p, &g)).abs());

        let (h, wd) = (1 + rng.below(20), 1 + rng.below(20));
        let scores: Vec<f64> = (0..h * wd).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let sv = tape.leaf(&Tensor::new(&[1, h, wd, 1], scores.clone()).unwrap());
        let l = dense_matching_loss(&mut tape, sv, &[g], &w).unwrap();
        let labels = dense_label(&g, h, wd);
        dm_err = dm_err.max((tape.item(l) - bce_oracle(&scores, &labels, w.tau)).abs());
        let ones = labels.iter().filter(|&&v| v == 1.0).count();
        labels_exact &= ones == count_inside(&g, h, wd) && labels.iter().all(|&v| v == 0.0 || v == 1.0);
    }
    let pass = giou_err <= 1e-9 && dm_err <= 1e-9 && labels_exact;
    report(
        5,
        "loss oracles",
        pass,
        &format!("giou max error {giou_err:.1e}, dense matching max error {dm_err:.1e}, label counts exact {labels_exact}"),
    );
    assert!(pass);
}

#[test]
fn criterion_6_overfit_single_sample() {
    let start = Instant::now();
    let cfg = TrainConfig::desk();
    let seqs = generate_dataset(6, 0, 1, &GenSpec::default()).unwrap();
    let mut trainer = Trainer::new(cfg.clone(), build_vocab(&seqs)).unwrap();
    let tokens = tokenize(&seqs[0].description, &trainer.model.vocab, cfg.backbone.max_text_len).unwrap();
    let sizes = (cfg.backbone.template_size, cfg.backbone.search_size);
    let sample = make_sample(&seqs[0], 0, 5, &cfg.crop, sizes, &tokens, true, &mut Rng::new(0), 0).unwrap();
    let batch = Batch::from_samples(&[sample], &cfg.backbone).unwrap();
    let first = trainer.train_step(&batch, cfg.lr(0)).unwrap().total;
    let mut reached = None;
    for step in 1..200 {
        let l = trainer.train_step(&batch, cfg.lr(0)).unwrap().total;
        if l < 0.1 * first {
            reached = Some((step, l));
            break;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = reached.is_some() && secs < 120.0;
    report(
        6,
        "overfit smoke",
        pass,
        &match reached {
            Some((step, l)) => format!("initial loss {first:.4}, {l:.4} at step {step}, {secs:.1}s"),
            None => format!("initial loss {first:.4}, never below 10% in 200 steps, {secs:.1}s"),
        },
    );
    assert!(pass);
}

/// Training and evaluation benchmark of the ablation criterion.
fn ablation_benchmark() -> (Vec<Sequence>, Vec<Sequence>) {
    let spec = GenSpec::default();
    let train = generate_dataset(7, 0, 200, &spec).unwrap();
    let eval = generate_dataset(7, 100_000, 50, &spec).unwrap();
    (train, eval)
}

fn ablation_config() -> TrainConfig {
    TrainConfig {
        samples_per_epoch: 1000,
        ..TrainConfig::desk()
    }
}

/// Full minus baseline success from the first verified run of this benchmark
/// (baseline 0.4764, w_tem 0.6162, wo_dm 0.7232, full 0.7588).
const PINNED_ABLATION_MARGIN: f64 = 0.2824;
const MARGIN_REGRESSION_SLACK: f64 = 0.05;

#[test]
fn criterion_7_ablation_ordering() {
    let start = Instant::now();
    let (train, eval) = ablation_benchmark();
    let variants = [Variant::Baseline, Variant::WTem, Variant::WoDm, Variant::Full];
    let rows = run_ablation(&variants, &ablation_config(), &train, &eval, None).unwrap();
    let s: Vec<f64> = rows.iter().map(|r| r.success).collect();
    let (base, tem, wo_dm, full) = (s[0], s[1], s[2], s[3]);
    let margin = full - base;
    let pass = full > wo_dm
        && wo_dm >= tem
        && tem > base
        && margin >= 0.05
        && margin >= PINNED_ABLATION_MARGIN - MARGIN_REGRESSION_SLACK;
    report(
        7,
        "ablation ordering",
        pass,
        &format!(
            "success baseline {base:.4}, w_tem {tem:.4}, wo_dm {wo_dm:.4}, full {full:.4}; \
             margin {margin:.4} (pinned {PINNED_ABLATION_MARGIN}); {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

fn small_run_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr_decay_epoch: 2,
        samples_per_epoch: 12,
        batch_size: 4,
        ..TrainConfig::desk()
    }
}

fn files_equal(a: &Path, b: &Path, names: &[&str]) -> bool {
    names
        .iter()
        .all(|n| std::fs::read(a.join(n)).unwrap() == std::fs::read(b.join(n)).unwrap())
}

#[test]
fn criterion_8_determinism_and_resume() {
    let spec = GenSpec {
        length: 8,
        ..GenSpec::default()
    };
    let seqs = generate_dataset(8, 0, 6, &spec).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        let mut t = Trainer::new(small_run_config(3), build_vocab(&seqs)).unwrap();
        t.fit(&seqs, Some(&dir)).unwrap();
        let r = evaluate_ope(&t.model, &seqs[..3], &t.cfg.crop).unwrap();
        r.write_csv(&dir.join("report.csv")).unwrap();
        dir
    };
    let (a, b) = (run("a"), run("b"));
    let ckpt = ["model.bin", "model.json", "optim.bin", "vocab.txt"];
    let identical = files_equal(&a.join("checkpoint"), &b.join("checkpoint"), &ckpt)
        && files_equal(&a, &b, &["report.csv", "losses.csv"]);

    let c = tmp.path().join("c");
    let mut t = Trainer::new(small_run_config(1), build_vocab(&seqs)).unwrap();
    t.fit(&seqs, Some(&c)).unwrap();
    let mut t = Trainer::resume(&c.join("checkpoint"), Some(small_run_config(3))).unwrap();
    t.fit(&seqs, Some(&c)).unwrap();
    let resumed = files_equal(&a.join("checkpoint"), &c.join("checkpoint"), &["model.bin", "optim.bin"])
        && files_equal(&a, &c, &["losses.csv"]);
    let pass = identical && resumed;
    report(
        8,
        "determinism and resume",
        pass,
        &format!("repeat runs identical {identical}, resume equals uninterrupted {resumed}"),
    );
    assert!(pass);
}

#[test]
fn criterion_9_dense_matching_saturation() {
    let w = LossWeights::full();
    let (h, wd) = (w.up_h, w.up_w);
    let g = BBox::new(0.3, 0.25, 0.7, 0.6);
    let labels = dense_label(&g, h, wd);
    let mut tape = Tape::new();
    let sat: Vec<f64> = labels.iter().map(|&y| if y == 1.0 { 50.0 } else { -50.0 }).collect();
    let s = tape.leaf(&Tensor::new(&[1, h, wd, 1], sat).unwrap());
    let l_sat = dense_matching_loss(&mut tape, s, &[g], &w).unwrap();
    let l_sat = tape.item(l_sat);
    let z = tape.leaf(&Tensor::zeros(&[1, h, wd, 1]));
    let l_zero = dense_matching_loss(&mut tape, z, &[g], &w).unwrap();
    let l_zero = tape.item(l_zero);
    let pass = l_sat < 1e-6 && (l_zero - std::f64::consts::LN_2).abs() <= 1e-9;
    report(
        9,
        "dense matching saturation",
        pass,
        &format!("saturated loss {l_sat:.1e}, zero-score loss {l_zero:.12}"),
    );
    assert!(pass);
}
