//! End-to-end acceptance gate. Each test prints one pass/fail line;
//! a shared lock serializes them so the measured runtimes are honest.

use sonalign::audio::{encode_audio, patchify, AudioTowerConfig};
use sonalign::contrastive::{
    classify, contrastive_loss, cosine_similarity, similarity_matrix, SimilarityMatrix,
};
use sonalign::cscm::{self, CscmConfig, HeadKind};
use sonalign::data::fold_split;
use sonalign::dsp::MelSpectrogram;
use sonalign::graph::{Graph, NodeId};
use sonalign::model::{ModelConfig, ParamStore};
use sonalign::ops::Op;
use sonalign::tensor::Tensor;
use sonalign::text::{encode_text, BpeVocab, TextTowerConfig, TokenSequence};
use sonalign::train::{
    evaluate, load_checkpoint, lr_at_epoch, prompt_ablation, save_checkpoint, synth_dataset,
    train, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Mutex;
use std::time::Instant;

static LOCK: Mutex<()> = Mutex::new(());

fn criterion<F: FnOnce() -> Result<(), String>>(n: u32, name: &str, f: F) {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    match f() {
        Ok(()) => println!("criterion {n} ({name}): PASS"),
        Err(msg) => {
            println!("criterion {n} ({name}): FAIL - {msg}");
            panic!("criterion {n} ({name}) failed: {msg}");
        }
    }
}

// ---------------------------------------------------------------- 1

/// Finite-difference check of autodiff parameter gradients for a graph
/// builder, probing a few coordinates of every parameter.
fn fd_check_params<F>(
    store: &ParamStore,
    build: F,
    rng: &mut ChaCha8Rng,
    coords_per_param: usize,
) -> Result<f64, String>
where
    F: Fn(&ParamStore, &mut Graph) -> NodeId,
{
    let eps = 1e-5;
    let loss_of = |s: &ParamStore| -> f64 {
        let mut g = Graph::new();
        let out = build(s, &mut g);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let out = build(store, &mut g);
    let grads = g.backward(out).map_err(|e| e.to_string())?.named(&g);
    let mut worst: f64 = 0.0;
    for (name, grad) in &grads {
        let numel = grad.numel();
        for _ in 0..coords_per_param.min(numel) {
            let idx = rng.gen_range(0..numel);
            let mut plus = store.clone();
            plus.get_mut(name).data_mut()[idx] += eps;
            let mut minus = store.clone();
            minus.get_mut(name).data_mut()[idx] -= eps;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
            let an = grad.data()[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
            if rel > worst {
                worst = rel;
            }
            if rel >= 1e-4 {
                return Err(format!(
                    "{}[{}]: analytic {:.6e} vs fd {:.6e} (rel {:.3e})",
                    name, idx, an, fd, rel
                ));
            }
        }
    }
    Ok(worst)
}

/// Project a vector-valued node to a scalar with fixed weights so the
/// whole output participates in the loss.
fn scalar_probe(g: &mut Graph, out: NodeId, seed: u64) -> NodeId {
    let shape = g.value(out).shape().to_vec();
    let numel: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.leaf(Tensor::uniform(&[numel], 1.0, &mut rng));
    let flat = g.apply(Op::Reshape { shape: vec![numel] }, &[out]).unwrap();
    let prod = g.apply(Op::Mul, &[flat, w]).unwrap();
    let sum = g.apply(Op::MeanPool { axis: 0 }, &[prod]).unwrap();
    g.apply(Op::Reshape { shape: vec![] }, &[sum]).unwrap()
}

#[test]
fn gradient_suite() {
    criterion(1, "gradient suite", || {
        let start = Instant::now();
        // primitive operations, 10 seeds
        for seed in 0..10 {
            for (name, err) in
                sonalign::gradcheck::primitive_suite(seed).map_err(|e| e.to_string())?
            {
                if err >= 1e-4 {
                    return Err(format!("seed {seed} primitive {name}: rel err {err:.3e}"));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(99);

        // text tower (embeddings, attention block, final norm, projection)
        let text_cfg = TextTowerConfig {
            vocab_size: 20,
            max_len: 8,
            width: 16,
            layers: 1,
            heads: 2,
            embed_dim: 12,
        };
        let mut store = ParamStore::new();
        sonalign::text::init_params(&text_cfg, "text", &mut store, &mut rng);
        let tokens = [3usize, 11, 7, 0, 19];
        fd_check_params(
            &store,
            |s, g| {
                let out = encode_text(&text_cfg, "text", s, g, &tokens).unwrap();
                scalar_probe(g, out, 1)
            },
            &mut rng,
            3,
        )?;

        // audio tower (windowed attention + patch merging)
        let audio_cfg = AudioTowerConfig {
            mel_bins: 8,
            frames: 8,
            patch: (2, 2),
            width: 8,
            window: 2,
            stages: 2,
            blocks_per_stage: 1,
            heads: 2,
        };
        let mut store = ParamStore::new();
        sonalign::audio::init_params(&audio_cfg, "audio", &mut store, &mut rng);
        let mel = MelSpectrogram {
            bins: 8,
            frames: 8,
            values: (0..64).map(|i| (i as f64 * 0.37).sin()).collect(),
        };
        let patches = patchify(&mel, (2, 2)).tokens;
        fd_check_params(
            &store,
            |s, g| {
                let p = g.leaf(patches.clone());
                let out = encode_audio(&audio_cfg, "audio", s, g, p).unwrap();
                scalar_probe(g, out, 2)
            },
            &mut rng,
            3,
        )?;

        // similarity head (conv attention + conv stack + projection)
        let head_cfg = CscmConfig {
            depth: 8,
            height: 4,
            width: 4,
            reduction: 2,
            spatial_kernel: 3,
            embed_dim: 6,
        };
        let mut store = ParamStore::new();
        cscm::init_params(&head_cfg, HeadKind::Cscm, "head", &mut store, &mut rng);
        let tokens_t = Tensor::uniform(&[16, 8], 1.0, &mut rng);
        fd_check_params(
            &store,
            |s, g| {
                let t = g.leaf(tokens_t.clone());
                let out =
                    cscm::head_forward(&head_cfg, HeadKind::Cscm, "head", s, g, t).unwrap();
                scalar_probe(g, out, 3)
            },
            &mut rng,
            3,
        )?;

        // contrastive loss through the graph, gradients on both inputs
        let mut store = ParamStore::new();
        store.insert("a", Tensor::uniform(&[4, 6], 1.0, &mut rng));
        store.insert("t", Tensor::uniform(&[4, 6], 1.0, &mut rng));
        fd_check_params(
            &store,
            |s, g| {
                let a = g.bind(s, "a");
                let t = g.bind(s, "t");
                g.apply(Op::ContrastiveLoss { scale: 1.3 }, &[a, t]).unwrap()
            },
            &mut rng,
            8,
        )?;

        let elapsed = start.elapsed();
        if elapsed.as_secs() >= 120 {
            return Err(format!("suite took {:.1}s (budget 120s)", elapsed.as_secs_f64()));
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- 2

/// Independent scalar reimplementation of the symmetric loss:
/// 0.5 * (row-wise CE + column-wise CE) with diagonal targets.
fn oracle_loss(values: &[f64], n: usize, scale: f64) -> f64 {
    let ce = |logit_row: &dyn Fn(usize) -> f64, target: usize| -> f64 {
        let logits: Vec<f64> = (0..n).map(|j| scale * logit_row(j)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
        lse - logits[target]
    };
    let mut row_ce = 0.0;
    let mut col_ce = 0.0;
    for i in 0..n {
        row_ce += ce(&|j| values[i * n + j], i);
        col_ce += ce(&|j| values[j * n + i], i);
    }
    0.5 * (row_ce + col_ce) / n as f64
}

#[test]
fn loss_oracle() {
    criterion(2, "loss oracle", || {
        // exact anchors
        let single = SimilarityMatrix { n: 1, values: vec![0.42] };
        let got = contrastive_loss(&single, 1.0).map_err(|e| e.to_string())?;
        if got != 0.0 {
            return Err(format!("n=1 loss {} != 0", got));
        }
        let zeros = SimilarityMatrix { n: 2, values: vec![0.0; 4] };
        let got = contrastive_loss(&zeros, 1.0).map_err(|e| e.to_string())?;
        if (got - 2f64.ln()).abs() > 1e-15 {
            return Err(format!("n=2 zero matrix loss {} != ln 2", got));
        }
        // random sweep
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for n in 1..=4usize {
            for trial in 0..100 {
                let scale = [0.5, 1.0, 3.0][trial % 3];
                let values: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let s = SimilarityMatrix { n, values: values.clone() };
                let got = contrastive_loss(&s, scale).map_err(|e| e.to_string())?;
                let want = oracle_loss(&values, n, scale);
                if (got - want).abs() > 1e-6 {
                    return Err(format!(
                        "n={} trial {}: {} vs oracle {}",
                        n, trial, got, want
                    ));
                }
            }
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- 3

#[test]
fn similarity_oracle() {
    criterion(3, "similarity oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for n in 1..=16usize {
            let dim = 1 + (n * 7) % 24;
            let gen_batch = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..n)
                    .map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .collect()
            };
            let audio = gen_batch(&mut rng);
            let text = gen_batch(&mut rng);
            let s = similarity_matrix(&audio, &text).map_err(|e| e.to_string())?;
            for i in 0..n {
                for j in 0..n {
                    // brute-force normalized dot product
                    let dot: f64 = audio[i].iter().zip(&text[j]).map(|(a, b)| a * b).sum();
                    let na: f64 = audio[i].iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nt: f64 = text[j].iter().map(|v| v * v).sum::<f64>().sqrt();
                    let want = dot / (na * nt);
                    if (s.get(i, j) - want).abs() > 1e-6 {
                        return Err(format!(
                            "n={} ({},{}): {} vs {}",
                            n,
                            i,
                            j,
                            s.get(i, j),
                            want
                        ));
                    }
                }
            }
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- 4

fn overfit_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 30,
        lr0: 3e-3,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn synthetic_overfit() {
    criterion(4, "synthetic overfit", || {
        let start = Instant::now();
        let vocab = BpeVocab::builtin_small();
        let mut successes = 0;
        for seed in [0u64, 1, 2] {
            let cfg = overfit_config(seed);
            let (spec, samples) = synth_dataset(&cfg).map_err(|e| e.to_string())?;
            let (train_set, eval_set) =
                fold_split(&samples, cfg.eval_fold).map_err(|e| e.to_string())?;
            let ckpt = train(&cfg, &spec, &train_set, &vocab).map_err(|e| e.to_string())?;
            // smoothed (trailing window-5) loss must fall over the first
            // 20 epochs
            let sm: Vec<f64> = (0..ckpt.loss_log.len())
                .map(|i| {
                    let lo = i.saturating_sub(4);
                    ckpt.loss_log[lo..=i].iter().sum::<f64>() / (i - lo + 1) as f64
                })
                .collect();
            for i in 0..19 {
                if sm[i + 1] >= sm[i] {
                    return Err(format!(
                        "seed {}: smoothed loss rose at epoch {} ({} -> {})",
                        seed,
                        i + 1,
                        sm[i],
                        sm[i + 1]
                    ));
                }
            }
            let held_out = evaluate(&ckpt, &spec, &eval_set, &vocab)
                .map_err(|e| e.to_string())?
                .overall_accuracy;
            let train_acc = evaluate(&ckpt, &spec, &train_set, &vocab)
                .map_err(|e| e.to_string())?
                .overall_accuracy;
            println!(
                "  seed {}: train {:.1}%, held-out {:.1}%",
                seed,
                100.0 * train_acc,
                100.0 * held_out
            );
            if train_acc >= 0.95 && held_out >= 0.90 {
                successes += 1;
            }
        }
        let elapsed = start.elapsed();
        if successes < 2 {
            return Err(format!("only {successes}/3 seeds reached the accuracy bars"));
        }
        if elapsed.as_secs() >= 600 {
            return Err(format!("took {:.0}s (budget 600s)", elapsed.as_secs_f64()));
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- 5

#[test]
fn schedule_exactness() {
    criterion(5, "schedule exactness", || {
        let (lr0, gamma) = (8e-5, 0.96);
        let mut product = lr0;
        for k in 0..=100usize {
            let got = lr_at_epoch(lr0, gamma, k);
            let closed = lr0 * gamma.powi(k as i32);
            if got != closed {
                return Err(format!("epoch {}: {} != {}", k, got, closed));
            }
            // iterative product as an independent route (ulp-level drift
            // only)
            let rel = (got - product).abs() / product;
            if rel > 1e-13 {
                return Err(format!("epoch {}: {} vs iterative {}", k, got, product));
            }
            product *= gamma;
        }
        if lr_at_epoch(lr0, gamma, 0) != 8e-5 {
            return Err("epoch 0 is not the initial rate".into());
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- 6

#[test]
fn full_scale_shape_contract() {
    criterion(6, "full-scale shape contract", || {
        let cfg = ModelConfig::full_scale();
        cfg.validate().map_err(|e| e.to_string())?;
        let (count, width, h, w) = cfg.audio.output_grid().map_err(|e| e.to_string())?;
        if (count, width, h, w) != (64, 768, 8, 8) {
            return Err(format!(
                "audio tower yields {} tokens of width {} on {}x{}",
                count, width, h, w
            ));
        }
        if (cfg.cscm.depth, cfg.cscm.height, cfg.cscm.width) != (768, 8, 8) {
            return Err("similarity head map is not 768x8x8".into());
        }
        if cfg.embed_dim != 1024 || cfg.cscm.embed_dim != 1024 || cfg.text.embed_dim != 1024 {
            return Err("shared embedding dimension is not 1024".into());
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- 7

#[test]
fn determinism_and_persistence() {
    criterion(7, "determinism and persistence", || {
        let cfg = TrainConfig {
            batch_size: 2,
            epochs: 2,
            lr0: 1e-3,
            synth_classes: 2,
            synth_clips_per_class: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        let vocab = BpeVocab::builtin_small();
        let (spec, samples) = synth_dataset(&cfg).map_err(|e| e.to_string())?;
        let (train_set, eval_set) =
            fold_split(&samples, cfg.eval_fold).map_err(|e| e.to_string())?;
        let a = train(&cfg, &spec, &train_set, &vocab).map_err(|e| e.to_string())?;
        let b = train(&cfg, &spec, &train_set, &vocab).map_err(|e| e.to_string())?;
        if a.loss_log != b.loss_log {
            return Err(format!("loss logs differ: {:?} vs {:?}", a.loss_log, b.loss_log));
        }
        let before = evaluate(&a, &spec, &eval_set, &vocab).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("round.ckpt");
        save_checkpoint(&a, &path).map_err(|e| e.to_string())?;
        let restored = load_checkpoint(&path).map_err(|e| e.to_string())?;
        let after = evaluate(&restored, &spec, &eval_set, &vocab).map_err(|e| e.to_string())?;
        if before != after {
            return Err("reloaded checkpoint evaluates differently".into());
        }
        // bit-level identity of the per-class numbers
        for (x, y) in before.per_class.iter().zip(&after.per_class) {
            match (x.accuracy, y.accuracy) {
                (Some(p), Some(q)) if p.to_bits() != q.to_bits() => {
                    return Err(format!("class {}: accuracy bits differ", x.class_id))
                }
                _ => {}
            }
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- 8

#[test]
fn ablation_harness() {
    criterion(8, "prompt ablation harness", || {
        let base = TrainConfig {
            batch_size: 2,
            epochs: 2,
            lr0: 1e-3,
            synth_classes: 2,
            synth_clips_per_class: 2,
            ..TrainConfig::default()
        };
        let templates: Vec<String> = sonalign::text::PromptTemplate::standard_set()
            .iter()
            .map(|t| t.pattern().to_string())
            .collect();
        let vocab = BpeVocab::builtin_small();
        let rows = prompt_ablation(&base, &templates, &[0, 1], &vocab)
            .map_err(|e| e.to_string())?;
        if rows.len() != 3 {
            return Err(format!("{} rows for 3 templates", rows.len()));
        }
        for (row, template) in rows.iter().zip(&templates) {
            if &row.template != template {
                return Err(format!("row order broken: {} vs {}", row.template, template));
            }
            if row.accuracies.len() != 2 {
                return Err(format!("{}: {} runs for 2 seeds", row.template, row.accuracies.len()));
            }
            let mean = row.accuracies.iter().sum::<f64>() / 2.0;
            if (row.mean - mean).abs() > 1e-12 || !row.std.is_finite() || row.std < 0.0 {
                return Err(format!("{}: bad statistics", row.template));
            }
            if !(0.0..=1.0).contains(&row.mean) {
                return Err(format!("{}: mean accuracy {} out of range", row.template, row.mean));
            }
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- 9

#[test]
fn invariance_suite() {
    criterion(9, "invariance suite", || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        // cosine scale invariance
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = cosine_similarity(&a, &t).map_err(|e| e.to_string())?;
        for &alpha in &[1e-3, 1.0, 1e3] {
            for &beta in &[1e-3, 1.0, 1e3] {
                let sa: Vec<f64> = a.iter().map(|v| v * alpha).collect();
                let st: Vec<f64> = t.iter().map(|v| v * beta).collect();
                let got = cosine_similarity(&sa, &st).map_err(|e| e.to_string())?;
                if (got - base).abs() > 1e-9 {
                    return Err(format!(
                        "cosine moved by {} under scales ({}, {})",
                        (got - base).abs(),
                        alpha,
                        beta
                    ));
                }
            }
        }
        // loss transpose symmetry
        for trial in 0..20 {
            let n = 2 + trial % 3;
            let s = SimilarityMatrix {
                n,
                values: (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            };
            let l = contrastive_loss(&s, 1.0).map_err(|e| e.to_string())?;
            let lt = contrastive_loss(&s.transposed(), 1.0).map_err(|e| e.to_string())?;
            if (l - lt).abs() > 1e-12 {
                return Err(format!("transpose asymmetry {}", (l - lt).abs()));
            }
        }
        // classify argmax invariance under positive rescaling
        let classes: Vec<(usize, Vec<f64>)> = (0..5)
            .map(|id| (id, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let probe: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (best, scores) = classify(&probe, &classes).map_err(|e| e.to_string())?;
        for &alpha in &[1e-4, 0.5, 1.0, 2.0, 1e4] {
            let scaled: Vec<f64> = probe.iter().map(|v| v * alpha).collect();
            let (b2, s2) = classify(&scaled, &classes).map_err(|e| e.to_string())?;
            if b2 != best {
                return Err(format!("argmax moved under scale {}", alpha));
            }
            for ((i1, v1), (i2, v2)) in scores.iter().zip(&s2) {
                if i1 != i2 || (v1 - v2).abs() > 1e-9 {
                    return Err(format!("scores changed under scale {}", alpha));
                }
            }
        }
        // tokenizer round trip: decode(tokenize(x)) == normalize(x)
        let vocab = BpeVocab::builtin_small();
        for text in [
            "Dog  Bark",
            "an audio clip of rain",
            "tone class 3 849 hz",
            "children playing street music",
        ] {
            let seq: TokenSequence = vocab.tokenize(text, 76).map_err(|e| e.to_string())?;
            let back = vocab.decode(&seq);
            let want = BpeVocab::normalize(text);
            if back != want {
                return Err(format!("round trip {:?} -> {:?}", want, back));
            }
        }
        Ok(())
    });
}
