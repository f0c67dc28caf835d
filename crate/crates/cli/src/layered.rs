use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use super::{Failure, Res};

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
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

/// Overlays the fields of a JSON config file onto `base`. Unknown fields are
/// rejected by the target type.
pub fn layer_file<T: Serialize + DeserializeOwned>(base: T, file: Option<&Path>) -> Res<T> {
    let Some(path) = file else {
        return Ok(base);
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Data(format!("--config {}: {e}", path.display())))?;
    let over: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Data(format!("--config {}: {e}", path.display())))?;
    if !over.is_object() {
        return Err(Failure::Data(format!("--config {}: expected a JSON object", path.display())));
    }
    let mut merged = serde_json::to_value(base).expect("config serialises");
    merge(&mut merged, over);
    serde_json::from_value(merged)
        .map_err(|e| Failure::Usage(format!("--config {}: {e}", path.display())))
}
