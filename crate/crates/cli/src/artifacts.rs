use std::path::Path;

use cushion_core::model::{read_container, TransformerModel};
use cushion_core::{Error, Result};
use serde::Serialize;

pub const SCHEMA_VERSION: u32 = 1;

/// Checkpoint of the toy model shipped with the tool (trained on the
/// bundled text; see the README for the recipe).
pub const BUNDLED_MODEL: &[u8] = include_bytes!("../assets/toy-model.cclb");

pub fn bundled_model() -> Result<TransformerModel> {
    let c = read_container(&mut &BUNDLED_MODEL[..])?;
    TransformerModel::from_container(c)
}

/// The model at `path`, or the bundled one.
pub fn load_model(path: Option<&Path>) -> Result<TransformerModel> {
    match path {
        Some(p) => TransformerModel::load(p),
        None => bundled_model(),
    }
}

/// Pretty JSON with `schema_version` and `kind` fields up front.
pub fn to_json<T: Serialize>(kind: &str, value: &T) -> Result<String> {
    let body = serde_json::to_value(value)?;
    let mut map = serde_json::Map::new();
    map.insert("schema_version".into(), SCHEMA_VERSION.into());
    map.insert("kind".into(), kind.into());
    match body {
        serde_json::Value::Object(o) => map.extend(o),
        other => {
            map.insert("data".into(), other);
        }
    }
    let mut s = serde_json::to_string_pretty(&serde_json::Value::Object(map))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, kind: &str, value: &T) -> Result<()> {
    write_text(path, &to_json(kind, value)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let found = v.get("kind").and_then(|k| k.as_str()).unwrap_or("");
    if found != kind {
        return Err(Error::Format(format!("{} holds a `{found}` report, expected `{kind}`", path.display())));
    }
    if v.get("schema_version").and_then(|s| s.as_u64()) != Some(SCHEMA_VERSION as u64) {
        return Err(Error::Format(format!("{}: unsupported schema_version", path.display())));
    }
    serde_json::from_value(v).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Exit status for an error: 2 for configuration and input problems,
/// 3 for unreadable or malformed artifacts, 4 for numerical failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => 4,
        Error::Format(_) | Error::Io(_) | Error::Json(_) => 3,
        _ => 2,
    }
}

pub fn error_json(e: &Error) -> String {
    serde_json::json!({
        "error": {
            "kind": e.kind(),
            "message": e.to_string(),
            "exit_code": exit_code(e),
        }
    })
    .to_string()
}
