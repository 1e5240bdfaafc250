//! Versioned run configuration: file sections, flag overrides and the
//! per-run manifest.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

pub const SECTIONS: [&str; 9] = [
    "gen_data",
    "train_ae",
    "train_mlp",
    "eval",
    "sweep",
    "sage",
    "ablate",
    "bend_characterize",
    "export",
];

/// Top-level config file. Each subcommand reads its own section, named
/// after the subcommand with `-` replaced by `_`.
#[derive(Debug, Default, Deserialize)]
pub struct ConfigFile {
    pub version: u32,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    #[serde(flatten)]
    pub sections: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "{}: unsupported config version {} (expected {CONFIG_VERSION})",
                path.display(),
                cfg.version
            )));
        }
        if let Some(k) = cfg.sections.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(CliError::Config(format!("{}: unknown section `{k}`", path.display())));
        }
        Ok(cfg)
    }
}

/// Overlays `patch` onto `base`, rejecting keys `base` does not know.
fn overlay(base: &mut Value, patch: &Value, context: &str) -> Result<(), CliError> {
    let (Value::Object(b), Value::Object(p)) = (base, patch) else {
        return Err(CliError::Config(format!("{context}: expected an object")));
    };
    for (k, v) in p {
        if v.is_null() {
            continue;
        }
        match b.get_mut(k) {
            Some(slot) => *slot = v.clone(),
            None => return Err(CliError::Config(format!("{context}: unknown key `{k}`"))),
        }
    }
    Ok(())
}

/// Settings of type `T`: defaults, then the file section, then flags.
/// `flags` serializes to an object whose `null` entries mean "not given".
pub fn resolve<T: Default + Serialize + DeserializeOwned>(
    file: Option<&ConfigFile>,
    section: &str,
    flags: &impl Serialize,
) -> Result<T, CliError> {
    let mut value = serde_json::to_value(T::default()).expect("settings serialize");
    if let Some(s) = file.and_then(|f| f.sections.get(section)) {
        overlay(&mut value, s, &format!("config section `{section}`"))?;
    }
    let flags = serde_json::to_value(flags).expect("flags serialize");
    overlay(&mut value, &flags, "flags")?;
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("{section}: {e}")))
}

/// Written next to every run's outputs.
#[derive(Debug, Serialize)]
pub struct Manifest<'a, T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'a str,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub config: &'a T,
    /// SHA-256 of the compact JSON of `config`.
    pub config_sha256: String,
}

pub fn config_hash(config: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    struct Settings {
        a: usize,
        b: String,
    }

    #[derive(Serialize)]
    struct Flags {
        a: Option<usize>,
        b: Option<String>,
    }

    fn file(section: Value) -> ConfigFile {
        let mut sections = Map::new();
        sections.insert("demo".into(), section);
        ConfigFile {
            version: 1,
            sections,
            ..ConfigFile::default()
        }
    }

    #[test]
    fn flags_override_file_values() {
        let f = file(serde_json::json!({"a": 3, "b": "file"}));
        let s: Settings = resolve(Some(&f), "demo", &Flags { a: Some(9), b: None }).unwrap();
        assert_eq!(s, Settings { a: 9, b: "file".into() });
        let s: Settings = resolve(None, "demo", &Flags { a: None, b: None }).unwrap();
        assert_eq!(s, Settings::default());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let f = file(serde_json::json!({"c": 1}));
        let err = resolve::<Settings>(Some(&f), "demo", &Flags { a: None, b: None }).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn example_config_resolves() {
        use crate::commands::*;
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/run.example.json");
        let f = ConfigFile::load(&path).unwrap();
        let none = serde_json::json!({});
        let gen: GenDataSettings = resolve(Some(&f), "gen_data", &none).unwrap();
        assert_eq!(gen.families.len(), 5);
        let ae: TrainAeSettings = resolve(Some(&f), "train_ae", &none).unwrap();
        assert_eq!(ae.epochs, 50);
        resolve::<TrainMlpSettings>(Some(&f), "train_mlp", &none).unwrap();
        resolve::<EvalSettings>(Some(&f), "eval", &none).unwrap();
        resolve::<SageSettings>(Some(&f), "sage", &none).unwrap();
        let ablate: AblateSettings = resolve(Some(&f), "ablate", &none).unwrap();
        assert_eq!(ablate.ks.len(), 8);
        resolve::<BendSettings>(Some(&f), "bend_characterize", &none).unwrap();
    }

    #[test]
    fn hash_is_stable() {
        let s = Settings { a: 1, b: "x".into() };
        assert_eq!(config_hash(&s), config_hash(&s));
        assert_eq!(config_hash(&s).len(), 64);
    }
}
