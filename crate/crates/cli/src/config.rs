use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Flat key/value settings merged from an optional JSON file and the
/// command-line flags. Every value that is read gets echoed so the
/// resolved map can be fed back through `--config`.
pub struct Resolver {
    file: Map<String, Value>,
    resolved: Map<String, Value>,
}

impl Resolver {
    /// Loads `path` (if any) and rejects keys outside `allowed`. A
    /// `command` key, when present, must name `command`.
    pub fn new(command: &str, path: Option<&Path>, allowed: &[&str]) -> Result<Self, CliError> {
        let mut file = match path {
            None => Map::new(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                match serde_json::from_str::<Value>(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(CliError::Usage(format!("{}: config must be a JSON object", p.display()))),
                    Err(e) => return Err(CliError::Usage(format!("{}: {e}", p.display()))),
                }
            }
        };
        if let Some(c) = file.remove("command") {
            if c.as_str() != Some(command) {
                return Err(CliError::Usage(format!("config is for command {c}, not \"{command}\"")));
            }
        }
        if let Some(k) = file.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(CliError::Usage(format!("unknown config key \"{k}\" for {command}")));
        }
        let mut resolved = Map::new();
        resolved.insert("command".into(), Value::from(command));
        Ok(Self { file, resolved })
    }

    fn from_file<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.file.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| CliError::Usage(format!("config key \"{key}\": {e}"))),
        }
    }

    /// Flag, else file value, else `None`; the outcome is echoed.
    pub fn opt<T: Serialize + DeserializeOwned>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError> {
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        let echoed = serde_json::to_value(&v).map_err(|e| CliError::Internal(e.to_string()))?;
        self.resolved.insert(key.to_string(), echoed);
        Ok(v)
    }

    /// Flag, else file value, else `default`.
    pub fn get<T: Serialize + DeserializeOwned>(&mut self, key: &str, flag: Option<T>, default: impl FnOnce() -> T) -> Result<T, CliError> {
        let v = self.opt(key, flag)?.unwrap_or_else(default);
        self.set(key, &v)?;
        Ok(v)
    }

    /// Records a derived value.
    pub fn set<T: Serialize>(&mut self, key: &str, value: &T) -> Result<(), CliError> {
        let v = serde_json::to_value(value).map_err(|e| CliError::Internal(e.to_string()))?;
        self.resolved.insert(key.to_string(), v);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.resolved).expect("a JSON map always serializes") + "\n"
    }
}
