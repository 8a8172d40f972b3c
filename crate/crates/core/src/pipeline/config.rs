use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::compress::CompressConfig;
use crate::corpus::GeneratorSpec;
use crate::distill::DistillConfig;
use crate::encoder::{EncoderConfig, FramePeriod, MaskingSpec, PretrainConfig};
use crate::error::{Error, Result};
use crate::probe::{ProbeConfig, ProbeTask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub generator: GeneratorSpec,
    pub n_utts: usize,
    /// Read utterances from this manifest instead of generating them.
    pub manifest: Option<PathBuf>,
    /// Splice frame pairs for a 20 ms frame period.
    pub splice: bool,
    /// Trailing fraction of utterances held out as the dev set.
    pub dev_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorSpec::default(),
            n_utts: 200,
            manifest: None,
            splice: false,
            dev_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub clusters: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            clusters: 32,
            iters: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelinePretrainConfig {
    #[serde(flatten)]
    pub train: PretrainConfig,
    /// Write a checkpoint every this many epochs (the final one always).
    pub checkpoint_every: usize,
    pub init_seed: u64,
}

impl Default for PipelinePretrainConfig {
    fn default() -> Self {
        Self {
            train: PretrainConfig::default(),
            checkpoint_every: 50,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineDistillConfig {
    #[serde(flatten)]
    pub train: DistillConfig,
    /// Record the loss every this many steps.
    pub log_every: usize,
}

impl Default for PipelineDistillConfig {
    fn default() -> Self {
        Self {
            train: DistillConfig::default(),
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineProbeConfig {
    #[serde(flatten)]
    pub train: ProbeConfig,
    pub tasks: Vec<ProbeTask>,
}

impl Default for PipelineProbeConfig {
    fn default() -> Self {
        Self {
            train: ProbeConfig::default(),
            tasks: vec![ProbeTask::FrameState, ProbeTask::SeqClass],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileConfig {
    pub repeats: usize,
    /// Dev utterances timed per measurement.
    pub rtf_utts: usize,
    /// Time every compression stage, not only explicit `profile` runs.
    pub rtf_during_compress: bool,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            repeats: 5,
            rtf_utts: 4,
            rtf_during_compress: true,
        }
    }
}

/// Everything a run needs. Sub-seeds are derived from `seed` when the
/// config is resolved, and the resolved copy is what gets echoed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub kmeans: KMeansConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PipelinePretrainConfig,
    pub compress: CompressConfig,
    pub distill: PipelineDistillConfig,
    pub probe: PipelineProbeConfig,
    pub profile: ProfileConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            kmeans: KMeansConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PipelinePretrainConfig::default(),
            compress: CompressConfig::default(),
            distill: PipelineDistillConfig::default(),
            probe: PipelineProbeConfig::default(),
            profile: ProfileConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse a (possibly partial) JSON config, apply `key.path=value`
    /// overrides, and resolve derived fields.
    pub fn load(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let base: RunConfig = match text {
            Some(t) => serde_json::from_str(t).map_err(|e| Error::Config(format!("invalid config: {e}")))?,
            None => RunConfig::default(),
        };
        let mut value = serde_json::to_value(&base)?;
        for o in overrides {
            let key = o.split_once('=').map_or(o.as_str(), |(k, _)| k);
            if key.ends_with(".seed") {
                return Err(Error::config(format!("{key} is derived from the top-level seed; set `seed` instead")));
            }
            apply_override(&mut value, o)?;
        }
        let config: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid override: {e}")))?;
        config.resolved()
    }

    pub fn load_file(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(
                std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            ),
            None => None,
        };
        Self::load(text.as_deref(), overrides)
    }

    /// Fill derived fields and validate.
    pub fn resolved(mut self) -> Result<Self> {
        let s = self.seed;
        self.corpus.generator.seed = s;
        self.kmeans.seed = s.wrapping_add(1);
        self.pretrain.init_seed = s.wrapping_add(2);
        self.pretrain.train.seed = s.wrapping_add(3);
        self.compress.seed = s.wrapping_add(4);
        self.compress.eval_seed = s.wrapping_add(5);
        self.distill.train.seed = s.wrapping_add(6);
        self.probe.train.seed = s.wrapping_add(7);
        if self.corpus.manifest.is_none() {
            let dim = self.corpus.generator.dim;
            self.encoder.input_dim = if self.corpus.splice { 2 * dim } else { dim };
        }
        let period = if self.corpus.splice { FramePeriod::Ms20 } else { FramePeriod::Ms10 };
        if self.encoder.frame_period != period {
            self.encoder.frame_period = period;
            self.encoder.masking = MaskingSpec::for_period(period);
        }
        self.encoder.clusters = self.kmeans.clusters;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.generator.validate()?;
        self.encoder.validate()?;
        self.pretrain.train.hyper.validate()?;
        self.compress.validate()?;
        self.distill.train.validate()?;
        self.probe.train.hyper.validate()?;
        if !(self.corpus.dev_fraction > 0.0 && self.corpus.dev_fraction < 1.0) {
            return Err(Error::config("corpus.dev_fraction must lie in (0, 1)"));
        }
        if self.kmeans.clusters < 2 {
            return Err(Error::config("kmeans.clusters must be at least 2"));
        }
        if self.profile.repeats < 3 {
            return Err(Error::config("profile.repeats must be at least 3"));
        }
        if self.pretrain.checkpoint_every == 0 || self.distill.log_every == 0 {
            return Err(Error::config("checkpoint and log intervals must be positive"));
        }
        Ok(())
    }

    /// Stable identifier: hash of the config without its output location.
    pub fn run_id(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let digest = Sha256::digest(serde_json::to_vec(&c)?);
        Ok(hex::encode(&digest[..8]))
    }
}

/// Set `a.b.c=value` inside `root`. The value is parsed as JSON when
/// possible and taken as a string otherwise. Only existing keys may be set.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("{} is not a section", keys[..i].join("."))))?;
        let known = obj.contains_key(*key);
        // Optional fields serialize as null and may be set to anything.
        if !known {
            return Err(Error::config(format!("unknown config key {path}")));
        }
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*key).expect("checked");
    }
    unreachable!("split yields at least one key")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_defaults_are_explicit() {
        let c = RunConfig::load(None, &[]).unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        for key in ["\"beta1\"", "\"decay\"", "\"mask_prob\"", "\"norm\"", "\"temperature\""] {
            assert!(text.contains(key), "{key} missing from echo");
        }
        assert_eq!(RunConfig::load(Some(&text), &[]).unwrap(), c);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = RunConfig::load(None, &["encoder.layers=3".into(), "compress.weights.stop_density=50".into()]).unwrap();
        assert_eq!(c.encoder.layers, 3);
        assert_eq!(c.compress.weights.stop_density, Some(50.0));
        let c = RunConfig::load(None, &["out_dir=elsewhere".into()]).unwrap();
        assert_eq!(c.out_dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for o in ["encoder.layerz=3", "encoder.heads=5", "nonsense", "seed=-1", "probe.seed=3"] {
            assert!(matches!(RunConfig::load(None, &[o.into()]), Err(Error::Config(_))), "{o}");
        }
        assert!(matches!(RunConfig::load(Some("{\"bogus\": 1}"), &[]), Err(Error::Config(_))));
    }

    #[test]
    fn splicing_switches_to_twenty_ms() {
        let c = RunConfig::load(None, &["corpus.splice=true".into()]).unwrap();
        assert_eq!(c.encoder.frame_period, FramePeriod::Ms20);
        assert_eq!(c.encoder.input_dim, 2 * c.corpus.generator.dim);
        assert_eq!(c.encoder.masking, MaskingSpec::for_period(FramePeriod::Ms20));
    }

    #[test]
    fn run_id_ignores_location() {
        let a = RunConfig::load(None, &["out_dir=a".into()]).unwrap();
        let b = RunConfig::load(None, &["out_dir=b".into()]).unwrap();
        assert_eq!(a.run_id().unwrap(), b.run_id().unwrap());
        let c = RunConfig::load(None, &["seed=9".into()]).unwrap();
        assert_ne!(a.run_id().unwrap(), c.run_id().unwrap());
    }
}
