//! Plain-text experiment configuration.
//!
//! One `key = value` per line, `#` starts a comment, sections are dotted key
//! prefixes (`schedule.T = 80`). Unknown keys, duplicates and bad values are
//! errors carrying the 1-based line number. Overrides given as `key=value`
//! strings replace file values after parsing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::ToyMixture;
use crate::denoiser::Architecture;
use crate::dpo::{DpoConfig, TimestepMode, Variant};
use crate::error::{Error, Result};
use crate::preference::PairStrategy;
use crate::schedule::NoiseSchedule;
use crate::trainer::{AdamWConfig, LrSchedule, PosttrainConfig, PretrainConfig};

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: Option<usize>,
}

/// Raw `key = value` entries before typing.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, Entry>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = split_pair(content).map_err(|m| Error::config(Some(line), m))?;
            if let Some(prev) = kv.entries.get(&key) {
                return Err(Error::config(
                    Some(line),
                    format!("duplicate key {key:?} (first set on line {})", prev.line.unwrap_or(0)),
                ));
            }
            kv.entries.insert(key, Entry { value, line: Some(line) });
        }
        Ok(kv)
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = split_pair(assignment)
            .map_err(|m| Error::config(None, format!("override {assignment:?}: {m}")))?;
        self.entries.insert(key, Entry { value, line: None });
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

fn split_pair(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key = value, got {s:?}"))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_') {
        return Err(format!("invalid key {k:?}"));
    }
    if v.is_empty() {
        return Err(format!("key {k:?} has no value"));
    }
    Ok((k.to_string(), v.to_string()))
}

/// Typed view consumed by [`ExperimentConfig::from_kv`]; tracks which keys
/// were read so leftovers can be reported.
struct Reader<'a> {
    kv: &'a KeyValues,
    used: Vec<&'a str>,
}

impl<'a> Reader<'a> {
    fn get<T: FromStr>(&mut self, key: &'static str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.kv.entries.get_key_value(key) {
            None => Ok(default),
            Some((k, e)) => {
                self.used.push(k.as_str());
                e.value.parse::<T>().map_err(|err| {
                    Error::config(e.line, format!("{key} = {:?}: {err}", e.value))
                })
            }
        }
    }

    fn check(&mut self, key: &'static str, ok: bool, why: &str) -> Result<()> {
        if ok {
            return Ok(());
        }
        let line = self.kv.entries.get(key).and_then(|e| e.line);
        Err(Error::config(line, format!("{key}: {why}")))
    }

    fn list<T: FromStr>(&mut self, key: &'static str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.kv.entries.get_key_value(key) {
            None => Ok(default),
            Some((k, e)) => {
                self.used.push(k.as_str());
                e.value
                    .split(',')
                    .map(|p| {
                        p.trim().parse::<T>().map_err(|err| {
                            Error::config(e.line, format!("{key} element {:?}: {err}", p.trim()))
                        })
                    })
                    .collect()
            }
        }
    }
}

/// Every setting of the toy experiment pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub steps: usize,
    pub alpha_final: f64,
    pub arch: Architecture,
    pub mixture: ToyMixture,
    pub per_condition: usize,
    pub pretrain: PretrainConfig,
    pub pool_size: usize,
    pub pools_per_condition: usize,
    pub strategy: PairStrategy,
    pub posttrain: PosttrainConfig,
    pub eval_per_condition: usize,
    pub eval_seed: u64,
    pub diagnose_steps: Vec<usize>,
    pub diagnose_samples: usize,
    pub diagnose_dumps: usize,
    /// Mean aggregate reward the comparison counts steps to.
    pub reward_threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_kv(&KeyValues::default()).expect("defaults are valid")
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?)
    }

    /// Reads `path` and applies `overrides` in order.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::config(None, format!("cannot read {}: {e}", path.display()))
        })?;
        let mut kv = KeyValues::parse(&text)?;
        for o in overrides {
            kv.set(o)?;
        }
        Self::from_kv(&kv)
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut r = Reader { kv, used: Vec::new() };
        let seed = r.get("seed", 0u64)?;
        let steps = r.get("schedule.T", crate::schedule::DEFAULT_STEPS)?;
        r.check("schedule.T", steps >= 1, "must be at least 1")?;
        let alpha_final = r.get("schedule.alpha_T", crate::schedule::DEFAULT_ALPHA_T)?;
        r.check("schedule.alpha_T", alpha_final > 0.0 && alpha_final < 1.0, "must lie in (0, 1)")?;

        let d = Architecture::default();
        let mixture = ToyMixture {
            modes: r.get("data.modes", ToyMixture::default().modes)?,
            radius: r.get("data.radius", ToyMixture::default().radius)?,
            std: r.get("data.std", ToyMixture::default().std)?,
        };
        mixture
            .validate()
            .map_err(|e| Error::config(None, e.to_string()))?;
        let arch = Architecture {
            data_dim: d.data_dim,
            time_dim: r.get("model.time_dim", d.time_dim)?,
            num_conditions: mixture.modes,
            hidden: r.get("model.hidden", d.hidden)?,
        };
        r.check("model.time_dim", arch.validate().is_ok(), "architecture is invalid (time_dim must be even and >= 4, hidden > 0)")?;
        let per_condition = r.get("data.per_condition", 1024usize)?;
        r.check("data.per_condition", per_condition >= 1, "must be positive")?;

        let pd = PretrainConfig::default();
        let pretrain = PretrainConfig {
            epochs: r.get("pretrain.epochs", pd.epochs)?,
            batch_size: r.get("pretrain.batch_size", pd.batch_size)?,
            optimizer: AdamWConfig {
                lr: r.get("pretrain.lr", pd.optimizer.lr)?,
                weight_decay: r.get("pretrain.weight_decay", pd.optimizer.weight_decay)?,
                ..pd.optimizer
            },
            lr_schedule: r.get::<LrSchedule>("pretrain.lr_schedule", pd.lr_schedule)?,
            log_interval: r.get("pretrain.log_interval", pd.log_interval)?,
            gate: r.get_opt_f64("pretrain.gate", pd.gate)?,
            record_wallclock: r.get("record_wallclock", false)?,
        };
        r.check("pretrain.batch_size", pretrain.batch_size >= 1, "must be positive")?;
        r.check("pretrain.log_interval", pretrain.log_interval >= 1, "must be positive")?;
        r.check("pretrain.lr", pretrain.optimizer.validate().is_ok(), "invalid optimizer settings")?;

        let pool_size = r.get("pairgen.pool_size", crate::preference::DEFAULT_POOL_SIZE)?;
        r.check("pairgen.pool_size", pool_size >= 2, "a pool needs at least 2 candidates")?;
        let pools_per_condition = r.get("pairgen.pools_per_condition", 32usize)?;
        r.check("pairgen.pools_per_condition", pools_per_condition >= 1, "must be positive")?;
        let strategy = r.get("pairgen.strategy", PairStrategy::AllOrdered)?;

        let variant = r.get("posttrain.variant", Variant::InversionDpo)?;
        let mut dpo = DpoConfig::new(variant);
        dpo.beta = r.get("posttrain.beta", dpo.beta)?;
        dpo.inner_sign = r.get("posttrain.inner_sign", dpo.inner_sign)?;
        dpo.timestep_mode = r.get::<TimestepMode>("posttrain.timestep_mode", dpo.timestep_mode)?;
        if let Err(e) = dpo.validate() {
            return Err(Error::config(None, e.to_string()));
        }
        let base = PosttrainConfig::new(dpo);
        let posttrain = PosttrainConfig {
            dpo,
            steps: r.get("posttrain.steps", base.steps)?,
            batch_size: r.get("posttrain.batch_size", base.batch_size)?,
            optimizer: AdamWConfig {
                lr: r.get("posttrain.lr", base.optimizer.lr)?,
                weight_decay: r.get("posttrain.weight_decay", 0.01)?,
                ..base.optimizer
            },
            eval_interval: r.get("posttrain.eval_interval", base.eval_interval)?,
            heldout_fraction: r.get("posttrain.heldout_fraction", base.heldout_fraction)?,
            seed,
            record_wallclock: pretrain.record_wallclock,
        };
        r.check("posttrain.batch_size", posttrain.batch_size >= 1, "must be positive")?;
        r.check("posttrain.eval_interval", posttrain.eval_interval >= 1, "must be positive")?;
        r.check(
            "posttrain.heldout_fraction",
            posttrain.heldout_fraction > 0.0 && posttrain.heldout_fraction < 1.0,
            "must lie in (0, 1)",
        )?;
        r.check("posttrain.lr", posttrain.optimizer.validate().is_ok(), "invalid optimizer settings")?;

        let eval_per_condition = r.get("eval.per_condition", 64usize)?;
        r.check("eval.per_condition", eval_per_condition >= 1, "must be positive")?;
        let eval_seed = r.get("eval.seed", 77u64)?;
        let diagnose_steps = r.list("diagnose.steps", vec![20usize, 40, 80])?;
        r.check(
            "diagnose.steps",
            !diagnose_steps.is_empty() && diagnose_steps.iter().all(|&t| t >= 1),
            "needs positive step counts",
        )?;
        let diagnose_samples = r.get("diagnose.samples", 512usize)?;
        r.check("diagnose.samples", diagnose_samples >= 1, "must be positive")?;
        let diagnose_dumps = r.get("diagnose.dump_trajectories", 4usize)?;
        let reward_threshold = r.get("compare.reward_threshold", -0.25f64)?;
        r.check("compare.reward_threshold", reward_threshold.is_finite(), "must be finite")?;

        let unknown: Vec<&str> = kv.keys().filter(|k| !r.used.contains(k)).collect();
        if let Some(k) = unknown.first() {
            let line = kv.entries.get(*k).and_then(|e| e.line);
            return Err(Error::config(line, format!("unknown key {k:?}")));
        }
        Ok(Self {
            seed,
            steps,
            alpha_final,
            arch,
            mixture,
            per_condition,
            pretrain,
            pool_size,
            pools_per_condition,
            strategy,
            posttrain,
            eval_per_condition,
            eval_seed,
            diagnose_steps,
            diagnose_samples,
            diagnose_dumps,
            reward_threshold,
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::log_linear(self.steps, self.alpha_final)
    }

    /// Same config with a different posttraining variant and its default
    /// timestep mode.
    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut out = self.clone();
        out.posttrain.dpo.variant = variant;
        out.posttrain.dpo.timestep_mode = DpoConfig::new(variant).timestep_mode;
        out
    }
}

impl Reader<'_> {
    /// Optional float where the literal `none` disables the setting.
    fn get_opt_f64(&mut self, key: &'static str, default: Option<f64>) -> Result<Option<f64>> {
        match self.kv.entries.get_key_value(key) {
            None => Ok(default),
            Some((k, e)) if e.value == "none" => {
                self.used.push(k.as_str());
                Ok(None)
            }
            Some(_) => self.get(key, 0.0).map(Some),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_comments() {
        let cfg = ExperimentConfig::parse("# nothing\n\nseed = 5   # trailing\nschedule.T=40\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.steps, 40);
        assert_eq!(cfg.arch, Architecture::default());
        assert_eq!(cfg.posttrain.dpo.variant, Variant::InversionDpo);
        assert_eq!(cfg.posttrain.dpo.beta, 2000.0);
        assert_eq!(cfg.posttrain.eval_interval, 50);
        assert_eq!(cfg.diagnose_steps, vec![20, 40, 80]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = ExperimentConfig::parse("seed = 1\n\nschedule.T = abc\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: Some(3), .. }), "{err}");
        let err = ExperimentConfig::parse("seed = 1\nbogus.key = 2\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: Some(2), .. }), "{err}");
        let err = ExperimentConfig::parse("seed = 1\nseed = 2\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: Some(2), .. }), "{err}");
        let err = ExperimentConfig::parse("just words\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: Some(1), .. }), "{err}");
        let err = ExperimentConfig::parse("pairgen.pool_size = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: Some(1), .. }), "{err}");
        assert!(ExperimentConfig::parse("posttrain.variant = ddpo\n").is_err());
        assert!(ExperimentConfig::parse("posttrain.inner_sign = 0\n").is_err());
    }

    #[test]
    fn overrides_replace_values() {
        let mut kv = KeyValues::parse("seed = 1\nposttrain.steps = 10\n").unwrap();
        kv.set("seed=9").unwrap();
        kv.set("posttrain.variant = diffusion-dpo").unwrap();
        let cfg = ExperimentConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.posttrain.seed, 9);
        assert_eq!(cfg.posttrain.steps, 10);
        assert_eq!(cfg.posttrain.dpo.timestep_mode, TimestepMode::SingleUniformT);
        assert!(kv.set("novalue").is_err());
    }

    #[test]
    fn gate_can_be_disabled_and_lists_parse() {
        let cfg = ExperimentConfig::parse("pretrain.gate = none\ndiagnose.steps = 5, 10\n").unwrap();
        assert_eq!(cfg.pretrain.gate, None);
        assert_eq!(cfg.diagnose_steps, vec![5, 10]);
        assert!(ExperimentConfig::parse("diagnose.steps = 5,x\n").is_err());
    }

    #[test]
    fn with_variant_resets_timestep_mode() {
        let cfg = ExperimentConfig::default().with_variant(Variant::DiffusionDpo);
        assert_eq!(cfg.posttrain.dpo.timestep_mode, TimestepMode::SingleUniformT);
    }
}
