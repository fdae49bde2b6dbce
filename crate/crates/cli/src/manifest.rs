//! Manifest loading: an optional `out` and `seed` beside command fields.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};
use serde_path_to_error::Segment;

/// Fields shared by every manifest.
#[derive(Debug, Default)]
pub struct Envelope {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// A parsed manifest split into the shared fields and the command body.
#[derive(Debug)]
pub struct Loaded<T> {
    pub envelope: Envelope,
    pub body: T,
}

/// JSON pointer of a deserialization error location.
pub fn pointer(path: &serde_path_to_error::Path) -> String {
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

/// Deserializes `value` into `T`, reporting failures at their JSON pointer.
pub fn from_value<T: DeserializeOwned>(value: Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let at = pointer(e.path());
        let at = if at.is_empty() { "/".to_owned() } else { at };
        anyhow!("schema error at {at}: {}", e.into_inner())
    })
}

fn take_envelope(map: &mut Map<String, Value>) -> Result<Envelope> {
    let out = match map.remove("out") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(PathBuf::from(s)),
        Some(_) => return Err(anyhow!("schema error at /out: expected a string path")),
    };
    let seed = match map.remove("seed") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            v.as_u64()
                .ok_or_else(|| anyhow!("schema error at /seed: expected an unsigned integer"))?,
        ),
    };
    Ok(Envelope { out, seed })
}

/// Parses manifest text.
pub fn parse<T: DeserializeOwned>(text: &str) -> Result<Loaded<T>> {
    let value: Value = serde_json::from_str(text).context("manifest is not valid JSON")?;
    let Value::Object(mut map) = value else {
        return Err(anyhow!("schema error at /: manifest must be a JSON object"));
    };
    let envelope = take_envelope(&mut map)?;
    let body = from_value(Value::Object(map))?;
    Ok(Loaded { envelope, body })
}

/// Reads a manifest, or uses `T::default()` when none is given.
pub fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<Loaded<T>> {
    match path {
        Some(p) => load(p),
        None => Ok(Loaded {
            envelope: Envelope::default(),
            body: T::default(),
        }),
    }
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<Loaded<T>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading manifest {}", path.display()))?;
    parse(&text).with_context(|| format!("in manifest {}", path.display()))
}
