use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::RunConfig;
use super::metrics::{Entry, MetricsLog, MetricsRecord};
use crate::compress::{iterative_compress, HeadCriterion, StageReport, Technique};
use crate::corpus::{fit_codebook, generate, label_corpus, load_manifest, splice2, write_features, Codebook, Utterance};
use crate::distill::distill as run_distill;
use crate::encoder::{
    eval_masked_loss, file_hash, load_checkpoint, pretrain as run_pretrain, save_checkpoint, weights_hash, EncoderWeights,
};
use crate::error::{Error, Result};
use crate::probe::{train_probe, ProbeResult};
use crate::profile::{compression_report, measure_rtf, CompressionReport};

/// Environment variable that relocates relative output directories.
pub const RUN_ROOT_ENV: &str = "MELCOMPRESS_RUN_ROOT";

/// An open run directory plus the metrics log of the current command.
#[derive(Debug)]
pub struct Session {
    pub config: RunConfig,
    pub root: PathBuf,
    log: MetricsLog,
}

impl Session {
    /// Create the run directory, echo the effective config, and open the log.
    pub fn open(config: RunConfig, command: &str) -> Result<Self> {
        let root = match std::env::var_os(RUN_ROOT_ENV) {
            Some(base) if config.out_dir.is_relative() => PathBuf::from(base).join(&config.out_dir),
            _ => config.out_dir.clone(),
        };
        fs::create_dir_all(&root)?;
        fs::write(root.join("config.json"), serde_json::to_string_pretty(&config)? + "\n")?;
        let log = MetricsLog::open(&root.join("metrics.jsonl"), &config.run_id()?, command)?;
        Ok(Self { config, root, log })
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("corpus").join("manifest.txt")
    }

    pub fn codebook_path(&self) -> PathBuf {
        self.root.join("corpus").join("codebook.json")
    }

    pub fn checkpoint_path(&self, series: &str, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(series).join(format!("{name}.mhck"))
    }

    pub fn pretrained_path(&self) -> PathBuf {
        self.checkpoint_path("pretrain", "final")
    }

    pub fn exports_dir(&self) -> PathBuf {
        self.root.join("exports")
    }

    pub fn log(&mut self, entry: Entry) -> Result<MetricsRecord> {
        self.log.append(entry)
    }

    /// `path` relative to the run directory when it lies inside it.
    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).display().to_string()
    }

    fn save(&self, path: &Path, weights: &EncoderWeights, command: &str, extra: &[(&str, String)]) -> Result<String> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut meta = BTreeMap::new();
        meta.insert("command".to_string(), command.to_string());
        meta.insert("run_id".to_string(), self.config.run_id()?);
        for (k, v) in extra {
            meta.insert(k.to_string(), v.clone());
        }
        save_checkpoint(path, weights, &meta)?;
        Ok(self.relative(path))
    }

    /// Every utterance of the run's corpus, in manifest order.
    pub fn load_corpus(&self) -> Result<Vec<Utterance>> {
        let manifest = self.manifest_path();
        if !manifest.exists() {
            return Err(Error::contract(format!("{} not found; run gen-corpus first", manifest.display())));
        }
        load_manifest(&manifest)
    }

    /// Train and dev utterances with cluster labels attached.
    pub fn labeled_split(&self) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
        let path = self.codebook_path();
        if !path.exists() {
            return Err(Error::contract(format!("{} not found; run kmeans first", path.display())));
        }
        let codebook: Codebook = serde_json::from_str(&fs::read_to_string(&path)?)?;
        let mut utts = self.load_corpus()?;
        label_corpus(&codebook, &mut utts)?;
        split_dev(utts, self.config.corpus.dev_fraction)
    }

    fn load_model(&self, path: Option<&Path>) -> Result<(PathBuf, EncoderWeights)> {
        let path = path.map_or_else(|| self.pretrained_path(), Path::to_path_buf);
        let weights = load_checkpoint(&path)?.weights;
        Ok((path, weights))
    }

    fn rtf_utts<'a>(&self, dev: &'a [Utterance]) -> &'a [Utterance] {
        &dev[..self.config.profile.rtf_utts.clamp(1, dev.len())]
    }
}

/// Trailing `fraction` of the utterances (at least one) become the dev set.
pub fn split_dev(mut utts: Vec<Utterance>, fraction: f64) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    let n_dev = ((utts.len() as f64 * fraction).round() as usize).max(1);
    if n_dev >= utts.len() {
        return Err(Error::contract(format!("{} utterances cannot be split into train and dev", utts.len())));
    }
    let dev = utts.split_off(utts.len() - n_dev);
    Ok((utts, dev))
}

/// Cost metrics of a report; the measured RTF goes to the timing fields.
fn report_entry(mut entry: Entry, report: &CompressionReport) -> Result<Entry> {
    entry = entry
        .metric("params_total", report.params_total as f64)
        .metric("params_nonzero", report.params_nonzero as f64)
        .metric("macs_per_sec", report.macs_per_sec as f64)
        .metric("macs_per_sec_theoretical", report.macs_per_sec_theoretical as f64)
        .metric("macs_attention", report.macs_breakdown.attention as f64)
        .metric("depth", report.depth as f64);
    for (k, v) in &report.densities {
        entry = entry.metric(&format!("density_{k}"), *v);
    }
    if let Some(rtf) = &report.rtf {
        entry = entry
            .timing("rtf_median", rtf.median)
            .timing("rtf_q1", rtf.q1)
            .timing("rtf_q3", rtf.q3);
    }
    let mut structural = report.clone();
    structural.rtf = None;
    entry.detail(structural)
}

pub struct CorpusSummary {
    pub utterances: usize,
    pub frames: usize,
    pub dim: usize,
}

/// Generate (or import) the corpus and write it as feature files.
pub fn gen_corpus(s: &mut Session) -> Result<CorpusSummary> {
    let c = &s.config.corpus;
    let mut utts = match &c.manifest {
        Some(m) => load_manifest(m)?,
        None => generate(&c.generator, c.n_utts)?,
    };
    if c.splice {
        utts = utts.iter().map(splice2).collect::<Result<_>>()?;
    }
    let dir = s.root.join("corpus");
    fs::create_dir_all(&dir)?;
    let mut manifest = String::new();
    for (i, u) in utts.iter().enumerate() {
        let name = format!("utt-{i:05}.mhft");
        write_features(&dir.join(&name), u)?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    fs::write(s.manifest_path(), manifest)?;
    let summary = CorpusSummary {
        utterances: utts.len(),
        frames: utts.iter().map(Utterance::frames).sum(),
        dim: utts.first().map_or(0, Utterance::dim),
    };
    s.log(
        Entry::new("corpus", "corpus")
            .metric("utterances", summary.utterances as f64)
            .metric("frames", summary.frames as f64)
            .metric("dim", summary.dim as f64),
    )?;
    Ok(summary)
}

/// Fit the target codebook on the training split.
pub fn kmeans(s: &mut Session) -> Result<Codebook> {
    let (train, _) = split_dev(s.load_corpus()?, s.config.corpus.dev_fraction)?;
    let k = &s.config.kmeans;
    let fit = fit_codebook(&train, k.clusters, k.iters, k.seed)?;
    fs::write(s.codebook_path(), serde_json::to_string(&fit.codebook)?)?;
    let last = fit.distortion.last().copied().unwrap_or(f64::NAN);
    s.log(
        Entry::new("kmeans", "kmeans")
            .metric("clusters", fit.codebook.k() as f64)
            .metric("distortion", last)
            .detail(&fit.distortion)?,
    )?;
    Ok(fit.codebook)
}

fn check_input_dim(weights: &EncoderWeights, utts: &[Utterance]) -> Result<()> {
    match utts.first() {
        Some(u) if u.dim() != weights.config.input_dim => Err(Error::Config(format!(
            "encoder.input_dim is {} but the corpus has {}-dimensional frames",
            weights.config.input_dim,
            u.dim()
        ))),
        _ => Ok(()),
    }
}

/// Masked-prediction pre-training from scratch.
pub fn pretrain(s: &mut Session) -> Result<EncoderWeights> {
    let (train, dev) = s.labeled_split()?;
    let cfg = s.config.clone();
    let mut weights = EncoderWeights::init(&cfg.encoder, cfg.pretrain.init_seed)?;
    check_input_dim(&weights, &train)?;
    let mut clock = Instant::now();
    run_pretrain(&mut weights, &train, &cfg.pretrain.train, |epoch, w, losses| {
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        let mut entry = Entry::new("epoch", "pretrain")
            .step(epoch)
            .metric("train_loss", mean)
            .metric("steps", losses.len() as f64)
            .timing("seconds", clock.elapsed().as_secs_f64());
        if (epoch + 1) % cfg.pretrain.checkpoint_every == 0 {
            entry = entry
                .metric("dev_loss", eval_masked_loss(w, &dev, cfg.compress.eval_seed)?)
                .checkpoint(s.save(&s.checkpoint_path("pretrain", &format!("epoch-{epoch}")), w, "pretrain", &[])?);
        }
        s.log(entry)?;
        clock = Instant::now();
        Ok(())
    })?;
    let path = s.pretrained_path();
    let ckpt = s.save(&path, &weights, "pretrain", &[])?;
    let dev_loss = eval_masked_loss(&weights, &dev, cfg.compress.eval_seed)?;
    s.log(Entry::new("pretrain", "pretrain").metric("dev_loss", dev_loss).checkpoint(ckpt))?;
    Ok(weights)
}

/// Directory name for a compression series.
pub fn series_name(technique: Technique, config: &RunConfig) -> String {
    match technique {
        Technique::Heads => match config.compress.heads.criterion {
            HeadCriterion::Weight => "heads-weight".into(),
            HeadCriterion::Gradient => "heads-gradient".into(),
        },
        t => t.name().into(),
    }
}

/// Iterative prune-and-retrain starting from `source` (default: the
/// pre-trained checkpoint). Every stage is checkpointed and profiled.
pub fn prune(s: &mut Session, technique: Technique, source: Option<&Path>) -> Result<Vec<StageReport>> {
    let (train, dev) = s.labeled_split()?;
    let (source, mut weights) = s.load_model(source)?;
    check_input_dim(&weights, &train)?;
    let cfg = s.config.clone();
    let series = series_name(technique, &cfg);
    let parent = file_hash(&source)?;
    let rtf_utts = s.rtf_utts(&dev).to_vec();
    let mut clock = Instant::now();
    iterative_compress(&mut weights, technique, &cfg.compress, &train, &dev, |report, w| {
        let seconds = clock.elapsed().as_secs_f64();
        let path = s.checkpoint_path(&series, &format!("stage-{}", report.stage));
        let ckpt = s.save(&path, w, &series, &[("parent", parent.clone())])?;
        let rtf = if cfg.profile.rtf_during_compress {
            Some(measure_rtf(w, &rtf_utts, w.depth(), cfg.profile.repeats)?)
        } else {
            None
        };
        let cost = compression_report(w, None, rtf)?;
        let mut entry = Entry::new("stage", &series)
            .stage(report.stage)
            .metric("density", report.density)
            .metric("dev_loss", report.dev_loss)
            .metric("pruned", report.pruned as f64)
            .metric("retrain_steps", report.retrain_steps as f64)
            .timing("seconds", seconds)
            .checkpoint(ckpt);
        if let Some(t) = report.train_loss {
            entry = entry.metric("train_loss", t);
        }
        if let Some(bp) = report.target_density_bp {
            entry = entry.metric("target_density", bp as f64 / 10_000.0);
        }
        if let Some(fired) = report.triggered {
            entry = entry.metric("triggered", f64::from(u8::from(fired)));
        }
        s.log(report_entry(entry, &cost)?)?;
        clock = Instant::now();
        Ok(())
    })
}

/// Distil a shallower student from `teacher` (default: the pre-trained
/// checkpoint).
pub fn distill(s: &mut Session, teacher: Option<&Path>) -> Result<EncoderWeights> {
    let (train, dev) = s.labeled_split()?;
    let (teacher_path, teacher) = s.load_model(teacher)?;
    check_input_dim(&teacher, &train)?;
    let cfg = s.config.clone();
    let every = cfg.distill.log_every;
    let outcome = run_distill(&teacher, &cfg.distill.train, &train, |step, loss, _| {
        if (step + 1) % every == 0 || step == 0 {
            s.log(Entry::new("step", "distill").step(step).metric("kd_loss", loss))?;
        }
        Ok(())
    })?;
    let student = outcome.student;
    let path = s.checkpoint_path("distill", "student");
    let ckpt = s.save(&path, &student, "distill", &[("student_of", file_hash(&teacher_path)?)])?;
    let rtf = measure_rtf(&student, s.rtf_utts(&dev), student.depth(), cfg.profile.repeats)?;
    let cost = compression_report(&student, None, Some(rtf))?;
    let final_loss = outcome.losses.last().copied().unwrap_or(f64::NAN);
    let entry = Entry::new("distill", "distill")
        .metric("kd_loss", final_loss)
        .metric("density", cost.depth as f64 / teacher.depth() as f64)
        .checkpoint(ckpt);
    s.log(report_entry(entry, &cost)?)?;
    Ok(student)
}

/// Frozen-upstream probes on the first `depth` blocks of `checkpoint`.
pub fn probe(s: &mut Session, checkpoint: Option<&Path>, depth: Option<usize>, series: &str) -> Result<Vec<ProbeResult>> {
    let utts = s.load_corpus()?;
    let (path, weights) = s.load_model(checkpoint)?;
    check_input_dim(&weights, &utts)?;
    let depth = depth.unwrap_or(weights.depth());
    if depth == 0 || depth > weights.depth() {
        return Err(Error::Config(format!("probe depth {depth} outside 1..={}", weights.depth())));
    }
    let before = weights_hash(&weights)?;
    let cfg = s.config.probe.clone();
    let ckpt = s.relative(&path);
    let mut results = Vec::new();
    for &task in &cfg.tasks {
        let r = train_probe(&weights, &utts, task, depth, &cfg.train)?;
        s.log(
            Entry::new("probe", series)
                .metric("accuracy", r.accuracy)
                .metric("dev_accuracy", r.dev_accuracy)
                .metric("depth", depth as f64)
                .checkpoint(ckpt.clone())
                .detail(&r)?,
        )?;
        results.push(r);
    }
    if weights_hash(&weights)? != before {
        return Err(Error::contract("upstream changed while probing"));
    }
    Ok(results)
}

/// Cost report for `checkpoint` run to `depth` blocks, with measured RTF.
pub fn profile(s: &mut Session, checkpoint: Option<&Path>, depth: Option<usize>, series: &str) -> Result<CompressionReport> {
    let (_, dev) = split_dev(s.load_corpus()?, s.config.corpus.dev_fraction)?;
    let (path, weights) = s.load_model(checkpoint)?;
    check_input_dim(&weights, &dev)?;
    let depth = depth.unwrap_or(weights.depth());
    if depth == 0 || depth > weights.depth() {
        return Err(Error::Config(format!("profile depth {depth} outside 1..={}", weights.depth())));
    }
    let rtf = measure_rtf(&weights, s.rtf_utts(&dev), depth, s.config.profile.repeats)?;
    let report = compression_report(&weights, Some(depth), Some(rtf))?;
    let density = report.densities.get("weights").copied().unwrap_or(1.0);
    let entry = Entry::new("profile", series)
        .metric("density", density)
        .checkpoint(s.relative(&path));
    s.log(report_entry(entry, &report)?)?;
    Ok(report)
}
