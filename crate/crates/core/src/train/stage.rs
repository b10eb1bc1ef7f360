//! Stage configuration: TOML file layered over preset defaults, then
//! dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::AdamWConfig;
use crate::config::{InputMode, ModelConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Desk,
    Full,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Tiny => ModelConfig::tiny(0),
            Preset::Desk => ModelConfig::desk(0),
            Preset::Full => ModelConfig::full(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Root that image paths in the dataset files are relative to.
    pub corpus_dir: PathBuf,
    /// Directory holding the built dataset files and `vocab.txt`.
    pub dataset_dir: PathBuf,
    pub train: String,
    pub valid: String,
    pub include_findings: bool,
    pub include_impression: bool,
    pub include_past_image: bool,
    pub include_diffqa_in_stage2: bool,
    /// Caps the validation set; 0 keeps everything.
    pub max_valid: usize,
    /// Caps the training set; 0 keeps everything.
    pub max_train: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub preset: Preset,
    pub seed: u64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Steps without a validation improvement before stopping.
    pub patience: usize,
    /// Copies the past time encoding into the current one and freezes both.
    pub tie_time_encodings: bool,
    pub data: DataConfig,
    /// `vocab_size = 0` takes the size of the dataset vocabulary; `mode` is
    /// derived from the stage and `include_past_image`.
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
}

impl StageConfig {
    pub fn new(stage: u8, preset: Preset) -> Self {
        let (train, valid) = match stage {
            1 => ("stage1_train", "stage1_valid"),
            2 => ("stage2", "stage2_valid"),
            _ => ("stage3_train", "stage3_valid"),
        };
        StageConfig {
            stage,
            preset,
            seed: 0,
            batch_size: 16,
            max_steps: 10_000,
            eval_every: 100,
            patience: 500,
            tie_time_encodings: false,
            data: DataConfig {
                corpus_dir: PathBuf::from("corpus"),
                dataset_dir: PathBuf::from("data"),
                train: format!("{train}.jsonl"),
                valid: format!("{valid}.jsonl"),
                include_findings: true,
                include_impression: true,
                include_past_image: true,
                include_diffqa_in_stage2: true,
                max_valid: 0,
                max_train: 0,
            },
            model: preset.model(),
            optimizer: AdamWConfig::default(),
        }
    }

    /// Input mode implied by the stage and the past-image switch.
    pub fn input_mode(&self) -> InputMode {
        match self.stage {
            1 => InputMode::Single,
            2 if !self.data.include_past_image => InputMode::Single,
            _ => InputMode::Dual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::Config(format!("stage must be 1, 2 or 3, got {}", self.stage)));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.max_steps == 0 {
            return Err(Error::Config("batch_size, eval_every and max_steps must be positive".into()));
        }
        if self.stage == 2 && !(self.data.include_findings || self.data.include_impression || self.data.include_diffqa_in_stage2) {
            return Err(Error::Config("stage 2 needs at least one data source".into()));
        }
        self.optimizer.validate()?;
        let mut m = self.model.clone();
        if m.vocab_size == 0 {
            m.vocab_size = crate::text::NUM_SPECIALS + 1;
        }
        m.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("stage config serializes")
    }

    /// Resolves a configuration from optional TOML text and `key=value`
    /// overrides with dotted keys. `stage` and `preset` pick the defaults
    /// that everything else is layered on; an explicit `stage` argument wins
    /// over the one in the text.
    pub fn resolve(stage: Option<u8>, text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut layer = match text {
            Some(t) => t.parse::<toml::Table>().map_err(|e| Error::Config(format!("bad config: {e}")))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut layer, key.trim(), parse_scalar(value.trim()))?;
        }
        let stage = match (stage, layer.get("stage")) {
            (Some(s), _) => s,
            (None, Some(v)) => v
                .as_integer()
                .and_then(|s| u8::try_from(s).ok())
                .ok_or_else(|| Error::Config("stage must be an integer".into()))?,
            (None, None) => return Err(Error::Config("stage is not set".into())),
        };
        let preset = match layer.get("preset") {
            Some(v) => v
                .clone()
                .try_into::<Preset>()
                .map_err(|e| Error::Config(format!("bad preset: {e}")))?,
            None => Preset::Desk,
        };
        let base = toml::Table::try_from(StageConfig::new(stage, preset)).expect("defaults serialize");
        let mut merged = toml::Value::Table(base);
        merge(&mut merged, toml::Value::Table(layer));
        let mut cfg: StageConfig = merged.try_into().map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.stage = stage;
        cfg.model.mode = cfg.input_mode();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::resolve(None, Some(&text), overrides)
    }

    pub fn train_path(&self) -> PathBuf {
        self.data.dataset_dir.join(&self.data.train)
    }

    pub fn valid_path(&self) -> PathBuf {
        self.data.dataset_dir.join(&self.data.valid)
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.data.dataset_dir.join("vocab.txt")
    }
}

/// Reads an override value as a TOML literal, falling back to a bare string.
fn parse_scalar(s: &str) -> toml::Value {
    format!("v = {s}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(s.to_string()))
}

pub(crate) fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(Error::Config(format!("bad override key `{key}`")));
        }
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let next = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table")))?;
    }
    Ok(())
}

fn merge(base: &mut toml::Value, layer: toml::Value) {
    match (base, layer) {
        (toml::Value::Table(b), toml::Value::Table(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_stage() {
        let c = StageConfig::resolve(Some(2), None, &[]).unwrap();
        assert_eq!(c.data.train, "stage2.jsonl");
        assert_eq!(c.model.mode, InputMode::Dual);
        assert_eq!(c.optimizer.lr, 1e-4);
        assert_eq!(c.patience, 500);
        let c = StageConfig::resolve(Some(1), None, &[]).unwrap();
        assert_eq!(c.model.mode, InputMode::Single);
    }

    #[test]
    fn file_then_overrides() {
        let text = "stage = 2\npreset = \"tiny\"\n[optimizer]\nlr = 0.001\n[data]\ninclude_past_image = false\n";
        let over = vec!["optimizer.lr=0.002".to_string(), "data.corpus_dir=/tmp/c".to_string(), "model.d_model = 32".into()];
        let c = StageConfig::resolve(None, Some(text), &over).unwrap();
        assert_eq!(c.optimizer.lr, 0.002);
        assert_eq!(c.optimizer.beta2, 0.999);
        assert_eq!(c.data.corpus_dir, PathBuf::from("/tmp/c"));
        assert_eq!(c.model.d_model, 32);
        assert_eq!(c.model.vision.image_size, 32);
        assert_eq!(c.model.mode, InputMode::Single);
        let again = StageConfig::resolve(None, Some(&c.to_toml()), &[]).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(StageConfig::resolve(Some(3), Some("bogus = 1"), &[]).is_err());
        assert!(StageConfig::resolve(Some(3), None, &["batch_size=0".into()]).is_err());
        assert!(StageConfig::resolve(Some(3), None, &["noequals".into()]).is_err());
        assert!(StageConfig::resolve(None, None, &[]).is_err());
        assert!(StageConfig::resolve(Some(7), None, &[]).is_err());
    }
}
