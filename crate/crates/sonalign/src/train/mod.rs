//! The optimization loop: plain SGD with exponential learning-rate decay,
//! the end-to-end batch pipeline (augment, mel, both towers, contrastive
//! loss), fold-out evaluation with CSV reports, and the prompt-ablation
//! harness.

mod checkpoint;
mod config;

pub use checkpoint::{
    crc32, load_checkpoint, save_checkpoint, Checkpoint, RngState, MAGIC, VERSION,
};
pub use config::{lr_at_epoch, TrainConfig};

use crate::contrastive;
use crate::cscm;
use crate::data::{synth_tone_dataset, BatchSampler, DatasetSpec, Sample, SynthConfig};
use crate::dsp::{augment, fit_frames, mel_spectrogram, resample, AugmentConfig, Waveform};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{forward_pair, ModelConfig, ParamStore};
use crate::ops::Op;
use crate::tensor::Tensor;
use crate::text::{apply_prompt, encode_text, BpeVocab, PromptTemplate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// One plain-SGD update: p <- p - lr * (g + weight_decay * p).
/// Aborts on a non-finite gradient, naming the parameter.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, grad) in grads {
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                what: "gradient".into(),
                context: format!("parameter {}", name),
            });
        }
        let p = params.get_mut(name);
        for (pv, gv) in p.data_mut().iter_mut().zip(grad.data()) {
            *pv -= lr * (gv + weight_decay * *pv);
        }
    }
    Ok(())
}

/// SGD with classical momentum: v <- mu*v + (g + wd*p); p <- p - lr*v.
/// Velocity buffers are created on first touch.
pub fn sgd_step_momentum(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
    velocity: &mut BTreeMap<String, Vec<f64>>,
) -> Result<()> {
    for (name, grad) in grads {
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                what: "gradient".into(),
                context: format!("parameter {}", name),
            });
        }
        let p = params.get_mut(name);
        let v = velocity
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; grad.numel()]);
        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(grad.data()).zip(v.iter_mut()) {
            *vv = momentum * *vv + (gv + weight_decay * *pv);
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Pad (with zeros) or center-crop a waveform to an exact duration.
pub fn fit_duration(w: &Waveform, secs: f64) -> Waveform {
    let target = (w.sample_rate as f64 * secs).round() as usize;
    let n = w.samples.len();
    let samples = if n >= target {
        let start = (n - target) / 2;
        w.samples[start..start + target].to_vec()
    } else {
        let mut s = w.samples.clone();
        s.resize(target, 0.0);
        s
    };
    Waveform::new(samples, w.sample_rate)
}

/// Clip to flattened patch tokens ready for the audio tower. Training
/// passes an rng to enable augmentation; evaluation passes `None`.
fn clip_patches<R: Rng>(
    sample: &Sample,
    sample_rate: u32,
    cfg: &TrainConfig,
    model: &ModelConfig,
    aug: Option<(&AugmentConfig, &mut R)>,
) -> Result<Tensor> {
    let mut w = resample(&sample.waveform()?, sample_rate);
    if cfg.clip_secs > 0.0 {
        w = fit_duration(&w, cfg.clip_secs);
    }
    if let Some((a, rng)) = aug {
        w = augment(&w, a, rng);
    }
    let mel = mel_spectrogram(&w, &cfg.mel)?;
    let mel = fit_frames(&mel, model.audio.frames);
    Ok(crate::audio::patchify(&mel, model.audio.patch).tokens)
}

fn prompt_tokens(
    spec: &DatasetSpec,
    cfg: &TrainConfig,
    model: &ModelConfig,
    vocab: &BpeVocab,
) -> Result<Vec<Vec<usize>>> {
    let template = PromptTemplate::new(cfg.template.as_str())?;
    spec.labels
        .iter()
        .map(|label| {
            let text = apply_prompt(label, &template)?;
            Ok(vocab.tokenize(&text, model.text.max_len)?.ids)
        })
        .collect()
}

const DATA_STREAM: u64 = 1;
const SYNTH_STREAM: u64 = 2;
const LOG_SCALE_PARAM: &str = "loss.log_scale";

/// Build the synthetic tone dataset a config describes, deterministically
/// from the config seed.
pub fn synth_dataset(cfg: &TrainConfig) -> Result<(DatasetSpec, Vec<Sample>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SYNTH_STREAM);
    synth_tone_dataset(
        &SynthConfig {
            n_classes: cfg.synth_classes,
            clips_per_class: cfg.synth_clips_per_class,
            sample_rate: 8000,
            duration_secs: 0.5,
        },
        &mut rng,
    )
}

/// Train from scratch. Fully deterministic for a fixed config: the
/// parameter init, batch order, augmentation draws, and update order all
/// derive from `cfg.seed`.
pub fn train(
    cfg: &TrainConfig,
    spec: &DatasetSpec,
    train_set: &[Sample],
    vocab: &BpeVocab,
) -> Result<Checkpoint> {
    let model = cfg.model_config(vocab)?;
    let mut params = model.init_params(cfg.seed);
    if cfg.learnable_scale {
        params.insert(LOG_SCALE_PARAM, Tensor::scalar(cfg.scale.ln()));
    }
    let prompts = prompt_tokens(spec, cfg, &model, vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(DATA_STREAM);
    let mut sampler = BatchSampler::new(train_set, spec.n_classes, cfg.batch_size)?;
    let batches = sampler.batches_per_epoch(train_set.len());
    let aug = AugmentConfig::default();
    let mut velocity = BTreeMap::new();
    let mut loss_log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg.lr0, cfg.gamma, epoch);
        let mut epoch_loss = 0.0;
        for batch_idx in 0..batches {
            let batch = sampler.next_batch(&mut rng);
            let scale = if cfg.learnable_scale {
                params.get(LOG_SCALE_PARAM).item().exp()
            } else {
                cfg.scale
            };
            let mut g = Graph::new();
            let mut audio_rows = Vec::with_capacity(batch.len());
            let mut text_rows = Vec::with_capacity(batch.len());
            for &i in &batch {
                let sample = &train_set[i];
                let patches = clip_patches(
                    sample,
                    spec.train_sample_rate,
                    cfg,
                    &model,
                    Some((&aug, &mut rng)),
                )?;
                let patches = g.leaf(patches);
                let (a, t) =
                    forward_pair(&model, &params, &mut g, patches, &prompts[sample.class_id])?;
                let c = model.embed_dim;
                audio_rows.push(g.apply(Op::Reshape { shape: vec![1, c] }, &[a])?);
                text_rows.push(g.apply(Op::Reshape { shape: vec![1, c] }, &[t])?);
            }
            let a_mat = g.apply(Op::Concat { axis: 0 }, &audio_rows)?;
            let t_mat = g.apply(Op::Concat { axis: 0 }, &text_rows)?;
            let loss = g.apply(Op::ContrastiveLoss { scale }, &[a_mat, t_mat])?;
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss".into(),
                    context: format!("epoch {} batch {}", epoch, batch_idx),
                });
            }
            epoch_loss += loss_value;
            let backprop = g.backward(loss)?;
            let mut grads = backprop.named(&g);
            if cfg.learnable_scale {
                grads.insert(
                    LOG_SCALE_PARAM.to_string(),
                    log_scale_gradient(&g, a_mat, t_mat, scale)?,
                );
            }
            if cfg.momentum > 0.0 {
                sgd_step_momentum(
                    &mut params,
                    &grads,
                    lr,
                    cfg.weight_decay,
                    cfg.momentum,
                    &mut velocity,
                )?;
            } else {
                sgd_step(&mut params, &grads, lr, cfg.weight_decay)?;
            }
        }
        loss_log.push(epoch_loss / batches as f64);
    }
    Ok(Checkpoint {
        config: cfg.clone(),
        epoch: cfg.epochs as u64,
        rng: RngState::capture(&rng),
        loss_log,
        params,
    })
}

/// d(loss)/d(log scale) for the learnable-scale variant, from the batch
/// embeddings: dL/dscale = sum_ij dL/d(scale*s_ij) * s_ij, and the
/// log-scale chain multiplies by scale.
fn log_scale_gradient(
    g: &Graph,
    a_mat: crate::graph::NodeId,
    t_mat: crate::graph::NodeId,
    scale: f64,
) -> Result<Tensor> {
    let rows = |t: &Tensor| -> Vec<Vec<f64>> {
        let c = t.shape()[1];
        t.data().chunks(c).map(|r| r.to_vec()).collect()
    };
    let s = contrastive::similarity_matrix(&rows(g.value(a_mat)), &rows(g.value(t_mat)))?;
    let (_, grad) = contrastive::contrastive_loss_and_grad(&s, scale)?;
    let n = s.n;
    let mut d_scale = 0.0;
    for i in 0..n {
        for j in 0..n {
            // grad already carries one factor of scale from the chain rule
            d_scale += grad[i * n + j] / scale * s.get(i, j);
        }
    }
    Ok(Tensor::scalar(scale * d_scale))
}

/// Per-class outcome in an evaluation report. `accuracy` is `None` when
/// the class has no clips in the eval set (absent, not zero).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassResult {
    pub class_id: usize,
    pub name: String,
    pub support: usize,
    pub accuracy: Option<f64>,
}

/// Fold-out evaluation outcome. Rows follow dataset class-id order.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    pub per_class: Vec<ClassResult>,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub fold: usize,
    /// CRC-32 of the serialized config that produced the model.
    pub config_hash: u32,
}

impl EvalReport {
    /// Assemble a report from a filled confusion matrix.
    pub fn from_confusion(
        confusion: Vec<Vec<usize>>,
        labels: &[String],
        fold: usize,
        config_hash: u32,
    ) -> Self {
        let mut per_class = Vec::with_capacity(labels.len());
        let mut correct = 0;
        let mut total = 0;
        for (id, name) in labels.iter().enumerate() {
            let support: usize = confusion[id].iter().sum();
            let hits = confusion[id][id];
            correct += hits;
            total += support;
            per_class.push(ClassResult {
                class_id: id,
                name: name.clone(),
                support,
                accuracy: (support > 0).then(|| hits as f64 / support as f64),
            });
        }
        EvalReport {
            overall_accuracy: if total > 0 {
                correct as f64 / total as f64
            } else {
                0.0
            },
            per_class,
            confusion,
            fold,
            config_hash,
        }
    }

    /// Confusion-matrix row sums must equal supports and the overall
    /// accuracy must be recomputable from the matrix.
    pub fn check_consistency(&self) -> Result<()> {
        let mut correct = 0;
        let mut total = 0;
        for r in &self.per_class {
            let row_sum: usize = self.confusion[r.class_id].iter().sum();
            if row_sum != r.support {
                return Err(Error::Dataset(format!(
                    "class {}: confusion row sums to {} but support is {}",
                    r.class_id, row_sum, r.support
                )));
            }
            correct += self.confusion[r.class_id][r.class_id];
            total += r.support;
        }
        let overall = if total > 0 {
            correct as f64 / total as f64
        } else {
            0.0
        };
        if overall != self.overall_accuracy {
            return Err(Error::Dataset(format!(
                "overall accuracy {} disagrees with matrix-derived {}",
                self.overall_accuracy, overall
            )));
        }
        Ok(())
    }

    /// CSV with header `class_id,class_name,support,accuracy`, one row
    /// per class in id order, then a summary line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,class_name,support,accuracy\n");
        for r in &self.per_class {
            let acc = match r.accuracy {
                Some(a) => format!("{:.6}", a),
                None => "absent".to_string(),
            };
            out.push_str(&format!("{},{},{},{}\n", r.class_id, r.name, r.support, acc));
        }
        let total: usize = self.per_class.iter().map(|r| r.support).sum();
        out.push_str(&format!(
            "overall,fold {},{},{:.6}\n",
            self.fold, total, self.overall_accuracy
        ));
        out
    }
}

/// Embed every prompted class label once; returns `(class_id, embedding)`
/// pairs in class-id order.
pub fn class_embeddings(
    ckpt: &Checkpoint,
    spec: &DatasetSpec,
    vocab: &BpeVocab,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let model = ckpt.config.model_config(vocab)?;
    let prompts = prompt_tokens(spec, &ckpt.config, &model, vocab)?;
    let mut out = Vec::with_capacity(prompts.len());
    for (id, tokens) in prompts.iter().enumerate() {
        let mut g = Graph::new();
        let node = encode_text(&model.text, "text", &ckpt.params, &mut g, tokens)?;
        out.push((id, g.value(node).data().to_vec()));
    }
    Ok(out)
}

/// Embed one clip with the audio tower and similarity head (no
/// augmentation; the evaluation path).
pub fn embed_clip(
    ckpt: &Checkpoint,
    sample: &Sample,
    sample_rate: u32,
    vocab: &BpeVocab,
) -> Result<Vec<f64>> {
    let model = ckpt.config.model_config(vocab)?;
    let patches = clip_patches::<ChaCha8Rng>(sample, sample_rate, &ckpt.config, &model, None)?;
    let mut g = Graph::new();
    let patches = g.leaf(patches);
    let tokens = crate::audio::encode_audio(&model.audio, "audio", &ckpt.params, &mut g, patches)?;
    let node = cscm::head_forward(
        &model.cscm,
        model.head,
        "head",
        &ckpt.params,
        &mut g,
        tokens,
    )?;
    Ok(g.value(node).data().to_vec())
}

/// Fold-out evaluation: label embeddings are computed once, every clip is
/// classified by nearest cosine similarity, and the report follows
/// dataset class-id order.
pub fn evaluate(
    ckpt: &Checkpoint,
    spec: &DatasetSpec,
    eval_set: &[Sample],
    vocab: &BpeVocab,
) -> Result<EvalReport> {
    let classes = class_embeddings(ckpt, spec, vocab)?;
    let mut confusion = vec![vec![0usize; spec.n_classes]; spec.n_classes];
    for sample in eval_set {
        let embedding = embed_clip(ckpt, sample, spec.eval_sample_rate, vocab)?;
        let (pred, _) = contrastive::classify(&embedding, &classes)?;
        confusion[sample.class_id][pred] += 1;
    }
    Ok(EvalReport::from_confusion(
        confusion,
        &spec.labels,
        ckpt.config.eval_fold,
        crc32(ckpt.config.serialize().as_bytes()),
    ))
}

/// One row of the prompt-ablation table.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub template: String,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Train and evaluate the synthetic dataset once per (template, seed)
/// and summarize accuracy as mean +- std per template.
pub fn prompt_ablation(
    base: &TrainConfig,
    templates: &[String],
    seeds: &[u64],
    vocab: &BpeVocab,
) -> Result<Vec<AblationRow>> {
    if templates.is_empty() {
        return Err(Error::Config("ablation needs at least one template".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    if seeds.len() == 1 {
        eprintln!("warning: a single seed gives no spread; std will read 0");
    }
    let mut rows = Vec::with_capacity(templates.len());
    for template in templates {
        PromptTemplate::new(template.as_str())?;
        let mut accuracies = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.template = template.clone();
            cfg.seed = seed;
            let (spec, samples) = synth_dataset(&cfg)?;
            let (train_set, eval_set) = crate::data::fold_split(&samples, cfg.eval_fold)?;
            let ckpt = train(&cfg, &spec, &train_set, vocab)?;
            let report = evaluate(&ckpt, &spec, &eval_set, vocab)?;
            accuracies.push(report.overall_accuracy);
        }
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let std = if accuracies.len() > 1 {
            (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        rows.push(AblationRow {
            template: template.clone(),
            accuracies,
            mean,
            std,
        });
    }
    Ok(rows)
}

/// Render the ablation table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("template,runs,mean_accuracy,std\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            r.template,
            r.accuracies.len(),
            r.mean,
            r.std
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads_of(name: &str, shape: &[usize], value: f64) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert(name.to_string(), Tensor::full(shape, value));
        m
    }

    fn store_of(name: &str, shape: &[usize], value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::full(shape, value));
        s
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let mut p = store_of("w", &[3], 2.5);
        sgd_step(&mut p, &grads_of("w", &[3], 1.0), 0.0, 5e-4).unwrap();
        assert_eq!(p.get("w").data(), &[2.5, 2.5, 2.5]);
    }

    #[test]
    fn sgd_weight_decay_hand_value() {
        let mut p = store_of("w", &[1], 1.0);
        sgd_step(&mut p, &grads_of("w", &[1], 0.0), 0.1, 5e-4).unwrap();
        assert!((p.get("w").data()[0] - 0.99995).abs() < 1e-15);
    }

    #[test]
    fn sgd_plain_gradient_step() {
        let mut p = store_of("w", &[1], 2.0);
        sgd_step(&mut p, &grads_of("w", &[1], 1.0), 0.5, 0.0).unwrap();
        assert_eq!(p.get("w").data()[0], 1.5);
    }

    #[test]
    fn sgd_nan_gradient_names_parameter() {
        let mut p = store_of("tower.w3", &[1], 1.0);
        let err = sgd_step(&mut p, &grads_of("tower.w3", &[1], f64::NAN), 0.1, 0.0)
            .unwrap_err()
            .to_string();
        assert!(err.contains("tower.w3"), "{}", err);
    }

    #[test]
    fn weight_decay_contracts_by_fixed_factor() {
        let (lr, wd) = (0.05, 5e-4);
        let mut p = store_of("w", &[4], 3.0);
        for _ in 0..10 {
            sgd_step(&mut p, &grads_of("w", &[4], 0.0), lr, wd).unwrap();
        }
        let expected = 3.0 * (1.0 - lr * wd).powi(10);
        for &v in p.get("w").data() {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = store_of("w", &[1], 0.0);
        let mut vel = BTreeMap::new();
        // two unit-gradient steps with mu=0.5: v=1 then v=1.5
        sgd_step_momentum(&mut p, &grads_of("w", &[1], 1.0), 1.0, 0.0, 0.5, &mut vel).unwrap();
        sgd_step_momentum(&mut p, &grads_of("w", &[1], 1.0), 1.0, 0.0, 0.5, &mut vel).unwrap();
        assert!((p.get("w").data()[0] - (-2.5)).abs() < 1e-15);
    }

    #[test]
    fn fit_duration_pads_and_crops() {
        let w = Waveform::new(vec![1.0; 100], 100);
        assert_eq!(fit_duration(&w, 2.0).samples.len(), 200);
        assert_eq!(fit_duration(&w, 0.5).samples.len(), 50);
        assert_eq!(fit_duration(&w, 1.0).samples, w.samples);
        // padding is silence
        assert_eq!(fit_duration(&w, 2.0).samples[150], 0.0);
    }

    fn micro_config() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 2,
            synth_classes: 2,
            synth_clips_per_class: 2,
            lr0: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_keeps_initial_weights() {
        let mut cfg = micro_config();
        cfg.epochs = 0;
        let vocab = BpeVocab::builtin_small();
        let (spec, samples) = synth_dataset(&cfg).unwrap();
        let (train_set, _) = crate::data::fold_split(&samples, cfg.eval_fold).unwrap();
        let ckpt = train(&cfg, &spec, &train_set, &vocab).unwrap();
        assert!(ckpt.loss_log.is_empty());
        let init = cfg.model_config(&vocab).unwrap().init_params(cfg.seed);
        assert_eq!(ckpt.params.len(), init.len());
        for (name, t) in init.iter() {
            assert_eq!(ckpt.params.get(name).data(), t.data(), "{} drifted", name);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = micro_config();
        let vocab = BpeVocab::builtin_small();
        let (spec, samples) = synth_dataset(&cfg).unwrap();
        let (train_set, _) = crate::data::fold_split(&samples, cfg.eval_fold).unwrap();
        let a = train(&cfg, &spec, &train_set, &vocab).unwrap();
        let b = train(&cfg, &spec, &train_set, &vocab).unwrap();
        assert_eq!(a.loss_log, b.loss_log);
        assert_eq!(a.rng, b.rng);
        for (name, t) in a.params.iter() {
            assert_eq!(t.data(), b.params.get(name).data(), "{} differs", name);
        }
    }

    #[test]
    fn learnable_scale_moves() {
        let mut cfg = micro_config();
        cfg.learnable_scale = true;
        cfg.lr0 = 0.5; // exaggerate so the scalar visibly moves
        let vocab = BpeVocab::builtin_small();
        let (spec, samples) = synth_dataset(&cfg).unwrap();
        let (train_set, _) = crate::data::fold_split(&samples, cfg.eval_fold).unwrap();
        let ckpt = train(&cfg, &spec, &train_set, &vocab).unwrap();
        let v = ckpt.params.get(LOG_SCALE_PARAM).item();
        assert!(v.is_finite());
        assert_ne!(v, cfg.scale.ln());
    }

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("class {}", i)).collect()
    }

    #[test]
    fn always_class_zero_on_balanced_set_scores_quarter() {
        // classifier that always answers 0: first column holds everything
        let confusion = vec![
            vec![5, 0, 0, 0],
            vec![5, 0, 0, 0],
            vec![5, 0, 0, 0],
            vec![5, 0, 0, 0],
        ];
        let r = EvalReport::from_confusion(confusion, &labels(4), 1, 0);
        assert_eq!(r.overall_accuracy, 0.25);
        assert_eq!(r.per_class[0].accuracy, Some(1.0));
        assert_eq!(r.per_class[1].accuracy, Some(0.0));
        r.check_consistency().unwrap();
    }

    #[test]
    fn perfect_diagonal_scores_one() {
        let confusion = vec![vec![3, 0], vec![0, 7]];
        let r = EvalReport::from_confusion(confusion, &labels(2), 4, 0);
        assert_eq!(r.overall_accuracy, 1.0);
        assert!(r.per_class.iter().all(|c| c.accuracy == Some(1.0)));
    }

    #[test]
    fn absent_class_is_marked_not_zero() {
        let confusion = vec![vec![2, 0], vec![0, 0]];
        let r = EvalReport::from_confusion(confusion, &labels(2), 1, 0);
        assert_eq!(r.per_class[1].accuracy, None);
        assert!(r.to_csv().contains("1,class 1,0,absent"));
        r.check_consistency().unwrap();
    }

    #[test]
    fn csv_rows_follow_class_id_order() {
        let confusion = vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]];
        let r = EvalReport::from_confusion(confusion, &labels(3), 2, 0xabcd);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class_id,class_name,support,accuracy");
        for (i, line) in lines[1..4].iter().enumerate() {
            assert!(line.starts_with(&format!("{},class {}", i, i)), "{}", line);
        }
        assert!(lines[4].starts_with("overall,fold 2,3,"));
    }

    #[test]
    fn consistency_check_catches_tampering() {
        let confusion = vec![vec![3, 0], vec![0, 7]];
        let mut r = EvalReport::from_confusion(confusion, &labels(2), 1, 0);
        r.overall_accuracy = 0.5;
        assert!(r.check_consistency().is_err());
    }

    #[test]
    fn end_to_end_micro_run_evaluates() {
        let cfg = micro_config();
        let vocab = BpeVocab::builtin_small();
        let (spec, samples) = synth_dataset(&cfg).unwrap();
        let (train_set, eval_set) = crate::data::fold_split(&samples, cfg.eval_fold).unwrap();
        let ckpt = train(&cfg, &spec, &train_set, &vocab).unwrap();
        assert_eq!(ckpt.loss_log.len(), 1);
        let report = evaluate(&ckpt, &spec, &eval_set, &vocab).unwrap();
        report.check_consistency().unwrap();
        assert_eq!(report.per_class.len(), 2);
        let total: usize = report.per_class.iter().map(|c| c.support).sum();
        assert_eq!(total, eval_set.len());
    }
}
