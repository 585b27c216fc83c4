//! Dataset ingestion: ESC-50 and UrbanSound8K metadata, fold-out splits,
//! a synthetic tone dataset for fast end-to-end checks, and a seeded
//! class-distinct batch sampler.

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Where a clip's audio lives.
#[derive(Clone, Debug, PartialEq)]
pub enum ClipSource {
    File(PathBuf),
    Memory(Waveform),
}

/// One labelled clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub source: ClipSource,
    pub class_id: usize,
    pub label: String,
    /// 1-based fold index.
    pub fold: usize,
}

impl Sample {
    /// Decode the clip (a file read for [`ClipSource::File`], a clone for
    /// in-memory samples).
    pub fn waveform(&self) -> Result<Waveform> {
        match &self.source {
            ClipSource::File(path) => crate::dsp::load_wav(path),
            ClipSource::Memory(w) => Ok(w.clone()),
        }
    }

    /// A stable identity for partition checks: the path for file clips,
    /// the label+fold+address for in-memory ones.
    pub fn identity(&self) -> String {
        match &self.source {
            ClipSource::File(p) => p.display().to_string(),
            ClipSource::Memory(w) => format!(
                "mem:{}:{}:{}:{:x}",
                self.label,
                self.fold,
                w.samples.len(),
                w.samples
                    .iter()
                    .take(8)
                    .fold(0u64, |acc, s| acc.wrapping_mul(31).wrapping_add(s.to_bits()))
            ),
        }
    }
}

/// Static facts about a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    pub n_classes: usize,
    pub n_folds: usize,
    /// Label text per class id, index = class id.
    pub labels: Vec<String>,
    pub train_sample_rate: u32,
    pub eval_sample_rate: u32,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.n_classes {
            return Err(Error::Dataset(format!(
                "{}: {} labels for {} classes",
                self.name,
                self.labels.len(),
                self.n_classes
            )));
        }
        Ok(())
    }
}

fn normalize_label(raw: &str) -> String {
    raw.trim().replace('_', " ").to_lowercase()
}

/// Minimal header-indexed CSV reader for the dataset metadata files
/// (no quoting — neither dataset uses quoted fields).
struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Dataset(format!("{}: empty metadata file", path.display())))?;
        let header: Vec<String> = header_line.split(',').map(|s| s.trim().to_string()).collect();
        let rows = lines
            .map(|l| l.split(',').map(|s| s.trim().to_string()).collect())
            .collect();
        Ok(Csv { header, rows })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Dataset(format!("metadata is missing column {:?}", name)))
    }

    fn field<'a>(&self, row: &'a [String], col: usize, name: &str, line: usize) -> Result<&'a str> {
        row.get(col)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Dataset(format!("row {}: missing column {:?}", line, name)))
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str, line: usize) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Dataset(format!("row {}: bad {} value {:?}", line, what, s)))
}

/// Register a (class id, label) pair, enforcing the id<->label bijection.
fn register_class(
    classes: &mut BTreeMap<usize, String>,
    id: usize,
    label: &str,
    line: usize,
) -> Result<()> {
    match classes.get(&id) {
        Some(existing) if existing != label => Err(Error::Dataset(format!(
            "row {}: class {} is both {:?} and {:?}",
            line, id, existing, label
        ))),
        Some(_) => Ok(()),
        None => {
            classes.insert(id, label.to_string());
            Ok(())
        }
    }
}

fn class_list(classes: BTreeMap<usize, String>, n_classes: usize, name: &str) -> Result<Vec<String>> {
    let mut labels = Vec::with_capacity(n_classes);
    for id in 0..n_classes {
        match classes.get(&id) {
            Some(l) => labels.push(l.clone()),
            None => {
                return Err(Error::Dataset(format!(
                    "{}: class id {} never appears in the metadata",
                    name, id
                )))
            }
        }
    }
    for (&id, _) in classes.range(n_classes..) {
        return Err(Error::Dataset(format!(
            "{}: class id {} exceeds the {} known classes",
            name, id, n_classes
        )));
    }
    Ok(labels)
}

/// Load ESC-50 from `root/meta/esc50.csv` + `root/audio/<filename>`.
/// Trains at 44100 Hz and evaluates at 32000 Hz, matching the published
/// protocol (the rate mismatch is the dataset's, not ours).
pub fn load_esc50(root: &Path) -> Result<(DatasetSpec, Vec<Sample>)> {
    let csv = Csv::read(&root.join("meta").join("esc50.csv"))?;
    let (fcol, foldcol, tcol, ccol) = (
        csv.column("filename")?,
        csv.column("fold")?,
        csv.column("target")?,
        csv.column("category")?,
    );
    if csv.rows.is_empty() {
        return Err(Error::Dataset("esc50: metadata has no rows".into()));
    }
    let mut classes = BTreeMap::new();
    let mut samples = Vec::with_capacity(csv.rows.len());
    for (i, row) in csv.rows.iter().enumerate() {
        let line = i + 2;
        let filename = csv.field(row, fcol, "filename", line)?;
        let fold: usize = parse_num(csv.field(row, foldcol, "fold", line)?, "fold", line)?;
        let class_id: usize = parse_num(csv.field(row, tcol, "target", line)?, "target", line)?;
        let label = normalize_label(csv.field(row, ccol, "category", line)?);
        if !(1..=5).contains(&fold) {
            return Err(Error::Dataset(format!("row {}: fold {} out of 1..=5", line, fold)));
        }
        register_class(&mut classes, class_id, &label, line)?;
        samples.push(Sample {
            source: ClipSource::File(root.join("audio").join(filename)),
            class_id,
            label,
            fold,
        });
    }
    if samples.len() != 2000 {
        eprintln!(
            "warning: esc50 metadata lists {} clips (the full set has 2000)",
            samples.len()
        );
    }
    let spec = DatasetSpec {
        name: "esc50".into(),
        n_classes: 50,
        n_folds: 5,
        labels: class_list(classes, 50, "esc50")?,
        train_sample_rate: 44100,
        eval_sample_rate: 32000,
    };
    Ok((spec, samples))
}

/// Load UrbanSound8K from `root/metadata/UrbanSound8K.csv` +
/// `root/audio/fold{N}/<slice_file_name>`.
pub fn load_us8k(root: &Path) -> Result<(DatasetSpec, Vec<Sample>)> {
    let csv = Csv::read(&root.join("metadata").join("UrbanSound8K.csv"))?;
    let (fcol, foldcol, idcol, ccol) = (
        csv.column("slice_file_name")?,
        csv.column("fold")?,
        csv.column("classID")?,
        csv.column("class")?,
    );
    if csv.rows.is_empty() {
        return Err(Error::Dataset("us8k: metadata has no rows".into()));
    }
    let mut classes = BTreeMap::new();
    let mut samples = Vec::with_capacity(csv.rows.len());
    for (i, row) in csv.rows.iter().enumerate() {
        let line = i + 2;
        let filename = csv.field(row, fcol, "slice_file_name", line)?;
        let fold: usize = parse_num(csv.field(row, foldcol, "fold", line)?, "fold", line)?;
        let class_id: usize = parse_num(csv.field(row, idcol, "classID", line)?, "classID", line)?;
        let label = normalize_label(csv.field(row, ccol, "class", line)?);
        if !(1..=10).contains(&fold) {
            return Err(Error::Dataset(format!("row {}: fold {} out of 1..=10", line, fold)));
        }
        register_class(&mut classes, class_id, &label, line)?;
        samples.push(Sample {
            source: ClipSource::File(
                root.join("audio").join(format!("fold{fold}")).join(filename),
            ),
            class_id,
            label,
            fold,
        });
    }
    let spec = DatasetSpec {
        name: "us8k".into(),
        n_classes: 10,
        n_folds: 10,
        labels: class_list(classes, 10, "us8k")?,
        train_sample_rate: 22050,
        eval_sample_rate: 22050,
    };
    Ok((spec, samples))
}

/// Hold out one fold: eval = samples with `fold == eval_fold`, train =
/// the rest. The two outputs partition the input.
pub fn fold_split(samples: &[Sample], eval_fold: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (eval, train): (Vec<Sample>, Vec<Sample>) =
        samples.iter().cloned().partition(|s| s.fold == eval_fold);
    if eval.is_empty() {
        return Err(Error::Dataset(format!("eval fold {} holds no samples", eval_fold)));
    }
    Ok((train, eval))
}

/// Configuration for the synthetic tone dataset.
#[derive(Clone, Copy, Debug)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub clips_per_class: usize,
    pub sample_rate: u32,
    pub duration_secs: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 4,
            clips_per_class: 32,
            sample_rate: 8000,
            duration_secs: 0.5,
        }
    }
}

/// Center frequency of tone class k: 300 * 2^(k/2) Hz.
pub fn tone_frequency(class: usize) -> f64 {
    300.0 * 2f64.powf(class as f64 / 2.0)
}

/// Build an in-memory dataset of noisy sine tones: class k sits at
/// `tone_frequency(k)` with random phase and +-10% frequency jitter.
/// Clips are spread round-robin over two folds so a fold-out split works.
/// Deterministic for a fixed rng state.
pub fn synth_tone_dataset<R: Rng>(
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<(DatasetSpec, Vec<Sample>)> {
    if cfg.n_classes == 0 || cfg.n_classes > 8 {
        return Err(Error::Dataset(format!(
            "synth supports 1..=8 classes, got {}",
            cfg.n_classes
        )));
    }
    let n = (cfg.sample_rate as f64 * cfg.duration_secs) as usize;
    let labels: Vec<String> = (0..cfg.n_classes)
        .map(|k| format!("tone class {} {} hz", k, tone_frequency(k).round() as u64))
        .collect();
    let mut samples = Vec::with_capacity(cfg.n_classes * cfg.clips_per_class);
    for k in 0..cfg.n_classes {
        let f0 = tone_frequency(k);
        for c in 0..cfg.clips_per_class {
            let freq = f0 * (1.0 + rng.gen_range(-0.1..0.1));
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let noise_amp = rng.gen_range(0.01..0.05);
            let w = freq * std::f64::consts::TAU / cfg.sample_rate as f64;
            let wave: Vec<f64> = (0..n)
                .map(|i| {
                    0.6 * (w * i as f64 + phase).sin() + noise_amp * rng.gen_range(-1.0..1.0)
                })
                .collect();
            samples.push(Sample {
                source: ClipSource::Memory(Waveform::new(wave, cfg.sample_rate)),
                class_id: k,
                label: labels[k].clone(),
                fold: 1 + c % 2,
            });
        }
    }
    let spec = DatasetSpec {
        name: "synth".into(),
        n_classes: cfg.n_classes,
        n_folds: 2,
        labels,
        train_sample_rate: cfg.sample_rate,
        eval_sample_rate: cfg.sample_rate,
    };
    Ok((spec, samples))
}

/// Seeded batch sampler. Batches are class-distinct whenever
/// `batch_size <= n_classes`; within a class, clips rotate through a
/// reshuffled-per-pass order so every clip is visited.
pub struct BatchSampler {
    by_class: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    batch_size: usize,
}

impl BatchSampler {
    pub fn new(samples: &[Sample], n_classes: usize, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Dataset("batch size must be positive".into()));
        }
        let mut by_class = vec![Vec::new(); n_classes];
        for (i, s) in samples.iter().enumerate() {
            if s.class_id >= n_classes {
                return Err(Error::Dataset(format!(
                    "sample class {} out of range ({} classes)",
                    s.class_id, n_classes
                )));
            }
            by_class[s.class_id].push(i);
        }
        by_class.retain(|v| !v.is_empty());
        if by_class.is_empty() {
            return Err(Error::Dataset("no samples to batch".into()));
        }
        let cursors = vec![0; by_class.len()];
        Ok(BatchSampler {
            by_class,
            cursors,
            batch_size,
        })
    }

    /// Number of batches that covers the set once.
    pub fn batches_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.batch_size)
    }

    /// Draw the next batch of sample indices.
    pub fn next_batch<R: Rng>(&mut self, rng: &mut R) -> Vec<usize> {
        let k = self.by_class.len();
        let mut class_order: Vec<usize> = (0..k).collect();
        class_order.shuffle(rng);
        let mut batch = Vec::with_capacity(self.batch_size);
        for slot in 0..self.batch_size {
            let class = class_order[slot % k];
            let pool = &mut self.by_class[class];
            let cur = &mut self.cursors[class];
            if *cur == 0 {
                pool.shuffle(rng);
            }
            batch.push(pool[*cur]);
            *cur = (*cur + 1) % pool.len();
        }
        batch
    }
}
