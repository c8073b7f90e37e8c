//! Provenance envelope around every JSON report the CLI writes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use udsaudit::hash::{fnv1a, hex64};
use udsaudit::io::{read_bytes, read_json, write_json};
use udsaudit::{Error, Result};

pub const STAMP_FORMAT_VERSION: u32 = 1;

/// Named input digests, e.g. `corpus` -> file hash, `full` -> param hash.
pub type Inputs = BTreeMap<String, String>;

#[derive(Debug, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub format_version: u32,
    pub config_digest: String,
    pub inputs: Inputs,
    pub report: T,
}

pub fn write_stamped<T: Serialize>(path: &Path, digest: &str, inputs: &Inputs, report: T) -> Result<()> {
    write_json(
        path,
        &Stamped {
            format_version: STAMP_FORMAT_VERSION,
            config_digest: digest.to_string(),
            inputs: inputs.clone(),
            report,
        },
    )
}

pub fn read_stamped<T: DeserializeOwned>(path: &Path) -> Result<Stamped<T>> {
    let s: Stamped<T> = read_json(path)?;
    if s.format_version != STAMP_FORMAT_VERSION {
        return Err(Error::StaleCache(format!(
            "{}: format_version {} (expected {STAMP_FORMAT_VERSION})",
            path.display(),
            s.format_version
        )));
    }
    Ok(s)
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex64(fnv1a(&read_bytes(path)?)))
}

/// Hard error unless every input in `recorded` that also appears in
/// `current` has the same digest.
pub fn check_inputs(path: &Path, recorded: &Inputs, current: &Inputs) -> Result<()> {
    for (name, now) in current {
        if let Some(then) = recorded.get(name) {
            if then != now {
                return Err(Error::StaleCache(format!(
                    "{} was built from {name} {then}, but the current {name} is {now}",
                    path.display()
                )));
            }
        }
    }
    Ok(())
}
