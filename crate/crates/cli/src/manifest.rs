//! manifest.json: one entry per subcommand run in a directory.

use std::path::Path;
use std::time::Duration;

use ccmia_core::fsio;
use serde_json::{json, Map, Value};

pub struct Entry<'a> {
    pub subcommand: &'a str,
    pub config: Value,
    pub seeds: Value,
    pub artifacts: Vec<String>,
    pub wall_time: Duration,
}

/// Merges `entry` into `<dir>/manifest.json`, replacing any previous entry
/// of the same subcommand.
pub fn record(dir: &Path, entry: Entry) -> ccmia_core::Result<()> {
    let path = dir.join("manifest.json");
    let mut root = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str::<Value>(&text).unwrap_or_else(|_| json!({})),
        Err(_) => json!({}),
    };
    if !root.is_object() {
        root = json!({});
    }
    let obj = root.as_object_mut().expect("object");
    obj.insert(
        "versions".into(),
        json!({ "ccmia": env!("CARGO_PKG_VERSION"), "format": 1 }),
    );
    let runs = obj
        .entry("runs")
        .or_insert_with(|| Value::Object(Map::new()))
        .as_object_mut()
        .expect("runs object");
    let mut artifacts = entry.artifacts;
    artifacts.sort();
    artifacts.dedup();
    runs.insert(
        entry.subcommand.into(),
        json!({
            "config": entry.config,
            "seeds": entry.seeds,
            "artifacts": artifacts,
            "wall_time_s": entry.wall_time.as_secs_f64(),
        }),
    );
    fsio::write_atomic_str(&path, &serde_json::to_string_pretty(&root)?)
}
