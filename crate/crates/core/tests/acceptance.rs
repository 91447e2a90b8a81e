//! Acceptance gate for the whole pipeline. Each test covers one numbered
//! criterion and prints a single PASS/FAIL line (visible with --nocapture;
//! the per-test result line carries the same verdict either way).
//!
//! Criteria:
//!   1. analytic gradients match central finite differences on a small
//!      encoder, five seeds, under two minutes
//!   2. with modality-specific attention the visual representation and the
//!      class logits are bitwise independent of the word sequence; with
//!      full cross-attention they are not
//!   3. the per-row selection solver matches exhaustive enumeration exactly
//!      on 200 random instances, under one minute
//!   4. composition weights sum to one, and the worked four-neighbour
//!      example normalizes to the expected weights
//!   5. hubness skewness: zero on uniform counts, 0.70711 on [0, 0, 10],
//!      invariant under permutation
//!   6. the default desk-scale encoder reaches 100% train top-1 on a
//!      noiseless 8-class set within 500 epochs, under five minutes
//!   7. end-to-end zero-shot top-1 over ten half-splits is at least 0.75
//!      (3x the 0.25 chance rate), and the eligibility-constrained transfer
//!      beats the unconstrained ablation on top-1 while keeping hubness
//!      skewness no higher
//!   8. the chained nearest-seen-label baseline never beats the composed
//!      prototypes on the same splits
//!   9. checkpoints and every JSON artifact survive save -> load -> save
//!      byte-identically

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zsar_core::data::{Dataset, RepresentationItem, RepresentationSet};
use zsar_core::embeddings::{to_embedding_file, EmbeddingFile, LabelEmbedding};
use zsar_core::encoder::{
    encode_item, forward, load_checkpoint, loss_cls, loss_mtl, make_masking_plan, register,
    represent, save_checkpoint, total_loss, train, EncoderConfig, ModelParams, OptimAlgorithm,
    OptimizerSettings, Vocabulary,
};
use zsar_core::attention::AttentionScheme;
use zsar_core::eval::{hubness_skewness, run_split_protocol, EvalReport, ProtocolSettings};
use zsar_core::synth::{generate, SynthConfig, SynthOutput};
use zsar_core::tensor::gradcheck::{central_diff, max_rel_err};
use zsar_core::tensor::{Graph, Tensor};
use zsar_core::transfer::{
    build_seen_prototypes, cv_select_params, eligibility, solve, solve_exact_bruteforce,
    transfer_prototypes, CvRow, PrototypeEntry, PrototypeFile, TransferParams,
};

fn verdict(criterion: usize, ok: bool, detail: &str) {
    let word = if ok { "PASS" } else { "FAIL" };
    println!("criterion {criterion} {word}: {detail}");
    assert!(ok, "criterion {criterion} failed: {detail}");
}

/// Small enough for exhaustive finite-difference checking (< 2k scalars).
fn fd_config(seed: u64) -> EncoderConfig {
    let mut c = EncoderConfig::desk(4, 6, 3, 3, 3, seed);
    c.num_layers = 1;
    c.hidden_dim = 8;
    c.num_heads = 2;
    c.mlp_dim = 16;
    c
}

fn rand_frames(rng: &mut ChaCha8Rng, t: usize, p: usize) -> Vec<Vec<f64>> {
    (0..t)
        .map(|_| (0..p).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
        .collect()
}

fn params_to_vec(p: &ModelParams) -> Vec<Tensor> {
    p.named().into_iter().map(|(_, t)| t.clone()).collect()
}

fn params_from_vec(config: &EncoderConfig, vals: &[Tensor]) -> ModelParams {
    let mut p = ModelParams::init(config).unwrap();
    for ((_, t), v) in p.named_mut().into_iter().zip(vals) {
        *t = v.clone();
    }
    p
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in [11u64, 22, 33, 44, 55] {
        let config = fd_config(seed);
        let params = ModelParams::init(&config).unwrap();
        assert!(params.num_scalars() <= 2000, "config outgrew the FD budget");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = rand_frames(&mut rng, 2, 4);
        let word_ids: Vec<usize> = (0..rng.gen_range(1..=3))
            .map(|_| rng.gen_range(0..4))
            .collect();
        let class_id = rng.gen_range(0..config.num_seen_classes);
        let plan = make_masking_plan(&word_ids, config.mask_prob, &mut rng);
        let mid = config.vocab_size - 1;

        let eval_at = |p: &ModelParams| -> f64 {
            let g = Graph::new();
            let pv = register(&g, p, false);
            let enc = encode_item(&g, &pv, &config, mid, &frames, &word_ids, Some(&plan)).unwrap();
            let lc = loss_cls(&g, enc.cls_logits, class_id).unwrap();
            let lm = loss_mtl(&g, enc.mtl_logits.unwrap(), &plan.original_tokens).unwrap();
            g.scalar_value(total_loss(&g, lc, Some(lm), &config).unwrap())
        };

        let g = Graph::new();
        let pv = register(&g, &params, true);
        let enc = encode_item(&g, &pv, &config, mid, &frames, &word_ids, Some(&plan)).unwrap();
        let lc = loss_cls(&g, enc.cls_logits, class_id).unwrap();
        let lm = loss_mtl(&g, enc.mtl_logits.unwrap(), &plan.original_tokens).unwrap();
        let loss = total_loss(&g, lc, Some(lm), &config).unwrap();
        g.backward(loss).unwrap();

        let flat = params_to_vec(&params);
        let numeric = central_diff(&flat, |vals| eval_at(&params_from_vec(&config, vals)), 1e-5);
        let vars = pv.all();
        for i in 0..flat.len() {
            let analytic = g
                .grad(vars[i])
                .unwrap_or_else(|| Tensor::zeros(flat[i].shape()));
            worst = worst.max(max_rel_err(&analytic, &numeric[i]));
        }
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        worst < 1e-4 && elapsed.as_secs() < 120,
        &format!(
            "worst relative gradient error {worst:.3e} over 5 seeds in {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_2_visual_output_is_text_invariant_under_modality_masking() {
    let out = generate(&SynthConfig::desk(9)).unwrap();
    let vocab = Vocabulary::build(&out.seen_labels).unwrap();
    let config = EncoderConfig::desk(16, vocab.len(), 6, 4, 20, 9);
    let params = ModelParams::init(&config).unwrap();
    let mid = vocab.mask_id();
    let mut rng = ChaCha8Rng::seed_from_u64(90);

    let mut invariant = true;
    for _ in 0..3 {
        let frames = rand_frames(&mut rng, 6, 16);
        let base = forward(&params, &config, mid, &frames, &[0, 1], None).unwrap();
        for _ in 0..20 {
            let words: Vec<usize> = (0..rng.gen_range(1..=4))
                .map(|_| rng.gen_range(0..config.vocab_size))
                .collect();
            let sub = forward(&params, &config, mid, &frames, &words, None).unwrap();
            invariant &= sub.x.data() == base.x.data();
            invariant &= sub.cls_logits.data() == base.cls_logits.data();
        }
        let rep = represent(&params, &config, mid, &frames).unwrap();
        invariant &= rep == base.x.data();
    }

    let mut cross_config = config.clone();
    cross_config.attention_scheme = AttentionScheme::FullCross;
    let cross_params = ModelParams::init(&cross_config).unwrap();
    let frames = rand_frames(&mut rng, 6, 16);
    let base = forward(&cross_params, &cross_config, mid, &frames, &[0, 1], None).unwrap();
    let mut leaked = 0usize;
    for _ in 0..20 {
        let words: Vec<usize> = (0..rng.gen_range(1..=4))
            .map(|_| rng.gen_range(0..cross_config.vocab_size))
            .collect();
        let sub = forward(&cross_params, &cross_config, mid, &frames, &words, None).unwrap();
        if sub.x.data() != base.x.data() {
            leaked += 1;
        }
    }

    verdict(
        2,
        invariant && leaked > 0,
        &format!(
            "60 substitutions bitwise-invariant under modality masking; {leaked}/20 moved x under full cross-attention"
        ),
    );
}

#[test]
fn criterion_3_solver_matches_exhaustive_enumeration() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut checked = 0usize;
    let mut agree = true;
    while checked < 200 {
        let rows = rng.gen_range(1..=4);
        let cols = rng.gen_range(1..=6);
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| {
                // Mostly positive with some zero and negative entries so the
                // positivity constraint is exercised too.
                match rng.gen_range(0..10) {
                    0 => 0.0,
                    1 => -rng.gen::<f64>(),
                    _ => rng.gen::<f64>(),
                }
            })
            .collect();
        let m = Tensor::new(vec![rows, cols], data).unwrap();
        let params = TransferParams {
            theta: rng.gen_range(0.05..=1.0),
            k: rng.gen_range(1..=cols + 2),
            rho: rng.gen_range(1..=cols),
        };
        let mask = eligibility(&m, &params).unwrap();
        let fast = solve(&m, &mask, params.rho).unwrap();
        let exact = solve_exact_bruteforce(&m, &mask, params.rho).unwrap();
        agree &= fast.objective == exact.objective;
        agree &= fast.per_row == exact.per_row;
        checked += 1;
    }
    let elapsed = start.elapsed();
    verdict(
        3,
        agree && elapsed.as_secs() < 60,
        &format!(
            "greedy and exhaustive solvers agree exactly on {checked} instances in {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_4_composition_weights_normalize() {
    // Random transfer instances: every composed row's weights sum to one.
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let mut max_dev = 0.0f64;
    for _ in 0..50 {
        let n_seen = rng.gen_range(2..=8);
        let n_unseen = rng.gen_range(1..=5);
        let dim_v = rng.gen_range(2..=6);
        let dim_w = rng.gen_range(2..=6);
        let rand_vec = |rng: &mut ChaCha8Rng, d: usize| -> Vec<f64> {
            (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
        };
        let seen_emb: Vec<LabelEmbedding> = (0..n_seen)
            .map(|i| LabelEmbedding {
                class_id: i,
                label: format!("s{i}"),
                vector: rand_vec(&mut rng, dim_w),
                covered_tokens: 1,
                total_tokens: 1,
            })
            .collect();
        let unseen_emb: Vec<LabelEmbedding> = (0..n_unseen)
            .map(|j| LabelEmbedding {
                class_id: j,
                label: format!("u{j}"),
                vector: rand_vec(&mut rng, dim_w),
                covered_tokens: 1,
                total_tokens: 1,
            })
            .collect();
        let protos = PrototypeFile {
            dim: dim_v,
            entries: (0..n_seen)
                .map(|i| PrototypeEntry {
                    class_id: i,
                    label: format!("s{i}"),
                    vector: rand_vec(&mut rng, dim_v),
                    count: 1,
                })
                .collect(),
        };
        let params = TransferParams {
            theta: rng.gen_range(0.05..=1.0),
            k: rng.gen_range(1..=n_seen),
            rho: rng.gen_range(1..=n_seen),
        };
        let out = transfer_prototypes(&protos, &seen_emb, &unseen_emb, &params).unwrap();
        for row in &out.rows {
            let sum: f64 = row.selected.iter().map(|s| s.weight).sum();
            max_dev = max_dev.max((sum - 1.0).abs());
        }
    }

    // Worked four-neighbour example: relatedness (0.42, 0.48, 0.50, 0.50)
    // must normalize to (0.22105, 0.25263, 0.26316, 0.26316).
    let m_vals = [0.42f64, 0.48, 0.50, 0.50];
    let seen_emb: Vec<LabelEmbedding> = m_vals
        .iter()
        .enumerate()
        .map(|(i, &m)| LabelEmbedding {
            class_id: i,
            label: format!("s{i}"),
            vector: vec![m, (1.0 - m * m).sqrt()],
            covered_tokens: 1,
            total_tokens: 1,
        })
        .collect();
    let unseen_emb = vec![LabelEmbedding {
        class_id: 0,
        label: "u0".into(),
        vector: vec![1.0, 0.0],
        covered_tokens: 1,
        total_tokens: 1,
    }];
    let protos = PrototypeFile {
        dim: 2,
        entries: (0..4)
            .map(|i| PrototypeEntry {
                class_id: i,
                label: format!("s{i}"),
                vector: vec![i as f64, 1.0],
                count: 1,
            })
            .collect(),
    };
    let params = TransferParams { theta: 0.5, k: 4, rho: 4 };
    let out = transfer_prototypes(&protos, &seen_emb, &unseen_emb, &params).unwrap();
    let expected = [0.22105, 0.25263, 0.26316, 0.26316];
    let row = &out.rows[0];
    let example_ok = row.selected.len() == 4
        && row
            .selected
            .iter()
            .zip(expected)
            .all(|(s, e)| (s.weight - e).abs() < 1e-5);

    verdict(
        4,
        max_dev < 1e-9 && example_ok,
        &format!("max |sum - 1| = {max_dev:.2e} over random instances; worked example weights match"),
    );
}

#[test]
fn criterion_5_hubness_skewness_reference_values() {
    let uniform_zero = hubness_skewness(&[7, 7, 7, 7]) == 0.0;
    let spike = hubness_skewness(&[0, 0, 10]);
    let spike_ok = (spike - 0.70711).abs() < 1e-5;

    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut perm_dev = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..=40);
        let counts: Vec<usize> = (0..n).map(|_| rng.gen_range(0..30)).collect();
        let base = hubness_skewness(&counts);
        let mut shuffled = counts.clone();
        for i in (1..shuffled.len()).rev() {
            let j = rng.gen_range(0..=i);
            shuffled.swap(i, j);
        }
        perm_dev = perm_dev.max((hubness_skewness(&shuffled) - base).abs());
    }

    verdict(
        5,
        uniform_zero && spike_ok && perm_dev < 1e-12,
        &format!(
            "uniform -> 0 exactly, [0,0,10] -> {spike:.5}, permutation deviation {perm_dev:.1e}"
        ),
    );
}

#[test]
fn criterion_6_encoder_overfits_noiseless_classes() {
    let start = Instant::now();
    let mut synth = SynthConfig::desk(5);
    synth.num_seen = 8;
    synth.num_unseen = 2;
    synth.instances_per_class = 8;
    synth.noise = 0.0;
    let out = generate(&synth).unwrap();
    let vocab = Vocabulary::build(&out.seen_labels).unwrap();
    let config = EncoderConfig::desk(16, vocab.len(), 6, 1, 8, 11);
    let mut params = ModelParams::init(&config).unwrap();
    let settings = OptimizerSettings {
        algorithm: OptimAlgorithm::AdaptiveMoments,
        learning_rate: 2e-3,
        weight_decay: 0.0,
        epochs: 500,
        batch_size: 8,
    };
    let records = train(&mut params, &config, &vocab, &out.train, &settings).unwrap();
    let first_perfect = records.iter().position(|r| r.train_top1 == 1.0);
    let elapsed = start.elapsed();
    verdict(
        6,
        first_perfect.is_some() && elapsed.as_secs() < 300,
        &format!(
            "100% train top-1 first reached at epoch {:?} of 500 in {:.1}s",
            first_perfect.map(|i| i + 1),
            elapsed.as_secs_f64()
        ),
    );
}

/// Shared end-to-end run for criteria 7 and 8: train once, evaluate the
/// constrained transfer and the unconstrained ablation on the same splits.
struct EndToEnd {
    constrained: EvalReport,
    unconstrained: EvalReport,
}

fn end_to_end() -> &'static EndToEnd {
    static CELL: OnceLock<EndToEnd> = OnceLock::new();
    CELL.get_or_init(|| {
        let out = generate(&SynthConfig::desk(44)).unwrap();
        let vocab = Vocabulary::build(&out.seen_labels).unwrap();
        let config = EncoderConfig::desk(16, vocab.len(), 6, 4, 20, 1);
        let mut params = ModelParams::init(&config).unwrap();
        let settings = OptimizerSettings {
            algorithm: OptimAlgorithm::AdaptiveMoments,
            learning_rate: 2e-3,
            weight_decay: 0.0,
            epochs: 40,
            batch_size: 16,
        };
        train(&mut params, &config, &vocab, &out.train, &settings).unwrap();

        let rep_of = |ds: &Dataset| -> RepresentationSet {
            RepresentationSet {
                dim: config.hidden_dim,
                labels: ds.labels.clone(),
                items: ds
                    .instances
                    .iter()
                    .map(|inst| RepresentationItem {
                        id: inst.id.clone(),
                        class_id: inst.class_id,
                        vector: represent(&params, &config, vocab.mask_id(), &inst.frames)
                            .unwrap(),
                    })
                    .collect(),
            }
        };
        let train_reps = rep_of(&out.train);
        let test_reps = rep_of(&out.test);
        let seen_protos = build_seen_prototypes(&train_reps).unwrap();
        let seen_emb = out.word_vectors.embed_labels(&out.seen_labels).unwrap();
        let unseen_emb = out.word_vectors.embed_labels(&out.unseen_labels).unwrap();
        let cv = cv_select_params(&train_reps, &seen_emb, 7).unwrap();

        let proto_settings = ProtocolSettings {
            fraction: 0.5,
            num_splits: 10,
            seed: 4,
            params: cv.params,
            unconstrained: false,
        };
        let (constrained, _) = run_split_protocol(
            &test_reps,
            &unseen_emb,
            &seen_protos,
            &seen_emb,
            &proto_settings,
        )
        .unwrap();
        let (unconstrained, _) = run_split_protocol(
            &test_reps,
            &unseen_emb,
            &seen_protos,
            &seen_emb,
            &ProtocolSettings { unconstrained: true, ..proto_settings },
        )
        .unwrap();
        EndToEnd { constrained, unconstrained }
    })
}

#[test]
fn criterion_7_end_to_end_beats_chance_and_unconstrained_ablation() {
    let e = end_to_end();
    let c = &e.constrained;
    let u = &e.unconstrained;
    let ok = c.mean_top1 >= 0.75
        && c.mean_top1 >= u.mean_top1
        && c.mean_hubness <= u.mean_hubness;
    verdict(
        7,
        ok,
        &format!(
            "constrained top-1 {:.3}+-{:.3} (chance 0.25), unconstrained {:.3}; hubness skew {:.3} vs {:.3}",
            c.mean_top1, c.std_top1, u.mean_top1, c.mean_hubness, u.mean_hubness
        ),
    );
}

#[test]
fn criterion_8_seen_label_baseline_does_not_beat_composition() {
    let e = end_to_end();
    let c = &e.constrained;
    let ok = c.mean_baseline_top1 <= c.mean_top1;
    verdict(
        8,
        ok,
        &format!(
            "chained nearest-seen-label baseline {:.3} <= composed-prototype {:.3}",
            c.mean_baseline_top1, c.mean_top1
        ),
    );
}

#[test]
fn criterion_9_artifacts_round_trip_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name);
    let bytes = |p: &std::path::Path| std::fs::read(p).unwrap();
    let mut all_ok = true;
    let mut trip = |ok: bool, _what: &str| {
        all_ok &= ok;
    };

    let out: SynthOutput = generate(&SynthConfig::desk(13)).unwrap();

    // Checkpoint: save, load, save again.
    let config = fd_config(17);
    let vocab_labels: Vec<String> = (0..4).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::build(&vocab_labels).unwrap();
    let params = ModelParams::init(&config).unwrap();
    let a = path("a.ckpt.json");
    let b = path("b.ckpt.json");
    save_checkpoint(&params, &config, &vocab, &a).unwrap();
    let (p2, c2, v2) = load_checkpoint(&a).unwrap();
    save_checkpoint(&p2, &c2, &v2, &b).unwrap();
    trip(bytes(&a) == bytes(&b), "checkpoint");

    // Dataset.
    let a = path("a.dataset.json");
    let b = path("b.dataset.json");
    out.train.save(&a).unwrap();
    Dataset::load(&a).unwrap().save(&b).unwrap();
    trip(bytes(&a) == bytes(&b), "dataset");

    // Label embeddings.
    let seen_emb = out.word_vectors.embed_labels(&out.seen_labels).unwrap();
    let unseen_emb = out.word_vectors.embed_labels(&out.unseen_labels).unwrap();
    let a = path("a.emb.json");
    let b = path("b.emb.json");
    to_embedding_file(&seen_emb).unwrap().save(&a).unwrap();
    EmbeddingFile::load(&a).unwrap().save(&b).unwrap();
    trip(bytes(&a) == bytes(&b), "embeddings");

    // Prototypes, transfer output (with a CV table), and the eval report,
    // all built from mean-frame representations so no training is involved.
    let rep_of = |ds: &Dataset| -> RepresentationSet {
        RepresentationSet {
            dim: out.train.feature_dim,
            labels: ds.labels.clone(),
            items: ds
                .instances
                .iter()
                .map(|inst| {
                    let t = inst.frames.len() as f64;
                    let mut mean = vec![0.0; out.train.feature_dim];
                    for frame in &inst.frames {
                        for (m, v) in mean.iter_mut().zip(frame) {
                            *m += v / t;
                        }
                    }
                    RepresentationItem {
                        id: inst.id.clone(),
                        class_id: inst.class_id,
                        vector: mean,
                    }
                })
                .collect(),
        }
    };
    let seen_protos = build_seen_prototypes(&rep_of(&out.train)).unwrap();
    let a = path("a.protos.json");
    let b = path("b.protos.json");
    seen_protos.save(&a).unwrap();
    PrototypeFile::load(&a).unwrap().save(&b).unwrap();
    trip(bytes(&a) == bytes(&b), "prototypes");

    let params = TransferParams { theta: 0.8, k: 5, rho: 3 };
    let mut transfer = transfer_prototypes(&seen_protos, &seen_emb, &unseen_emb, &params).unwrap();
    transfer.cv_table = Some(vec![CvRow { theta: 0.8, k: 5, rho: 3, accuracy: 0.625 }]);
    let a = path("a.transfer.json");
    let b = path("b.transfer.json");
    transfer.save(&a).unwrap();
    zsar_core::transfer::TransferOutput::load(&a)
        .unwrap()
        .save(&b)
        .unwrap();
    trip(bytes(&a) == bytes(&b), "transfer");

    let test_reps = rep_of(&out.test);
    let (report, _) = run_split_protocol(
        &test_reps,
        &unseen_emb,
        &seen_protos,
        &seen_emb,
        &ProtocolSettings {
            fraction: 0.5,
            num_splits: 2,
            seed: 1,
            params,
            unconstrained: false,
        },
    )
    .unwrap();
    let a = path("a.report.json");
    let b = path("b.report.json");
    report.save(&a).unwrap();
    EvalReport::load(&a).unwrap().save(&b).unwrap();
    trip(bytes(&a) == bytes(&b), "report");

    verdict(
        9,
        all_ok,
        "checkpoint, dataset, embeddings, prototypes, transfer, and report all byte-identical",
    );
}
