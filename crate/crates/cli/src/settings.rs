//! Layered run settings: defaults, then a JSON config file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

/// Overlays `over` onto `base`. Every key in `over` must already exist in
/// `base`; nested objects merge, anything else replaces.
pub fn merge(base: &mut Value, over: Value, at: &str) -> Result<(), String> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let path = if at.is_empty() {
                    k.clone()
                } else {
                    format!("{at}.{k}")
                };
                let Some(slot) = b.get_mut(&k) else {
                    return Err(format!("unknown config key `{path}`"));
                };
                if slot.is_object() && v.is_object() {
                    merge(slot, v, &path)?;
                } else {
                    *slot = v;
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}

/// Defaults of `T` overlaid with the optional config file.
pub fn load<T>(config: Option<&Path>) -> Result<T, CliError>
where
    T: Default + Serialize + DeserializeOwned,
{
    let mut value = serde_json::to_value(T::default()).expect("settings serialize");
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| CliError::read(path, e))?;
        let over: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        if !over.is_object() {
            return Err(CliError::Validation(format!(
                "config {}: top level must be an object",
                path.display()
            )));
        }
        merge(&mut value, over, "")
            .map_err(|m| CliError::Validation(format!("config {}: {m}", path.display())))?;
        return serde_json::from_value(value)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())));
    }
    Ok(serde_json::from_value(value).expect("defaults deserialize"))
}

/// The effective configuration written next to every output.
#[derive(Serialize)]
pub struct Echo<'a, T: Serialize> {
    pub command: &'a str,
    pub inputs: Vec<(&'a str, PathBuf)>,
    pub settings: &'a T,
}

impl<T: Serialize> Echo<'_, T> {
    pub fn to_value(&self) -> Value {
        let inputs: serde_json::Map<String, Value> = self
            .inputs
            .iter()
            .map(|(k, p)| (k.to_string(), Value::String(p.display().to_string())))
            .collect();
        serde_json::json!({
            "command": self.command,
            "inputs": inputs,
            "settings": self.settings,
        })
    }
}
