//! JSON Schema (draft 2020-12) of the experiment configuration document.

use serde_json::{json, Value};

fn attention() -> Value {
    json!({
        "type": "object",
        "required": ["heads", "key_dim", "dropout", "residual", "layer_norm", "ff_units", "ff_layers"],
        "properties": {
            "heads": { "type": "integer", "minimum": 1 },
            "key_dim": { "type": "integer", "minimum": 1, "description": "Per-head key and value width." },
            "dropout": { "type": "number", "minimum": 0, "exclusiveMaximum": 1 },
            "residual": { "type": "boolean" },
            "layer_norm": { "type": "boolean" },
            "ff_units": { "type": "integer", "minimum": 1 },
            "ff_layers": { "type": "integer", "minimum": 1 }
        }
    })
}

fn bounds() -> Value {
    json!({ "type": "array", "items": { "type": "number" }, "minItems": 2, "maxItems": 2 })
}

pub fn config_schema() -> Value {
    let architecture = json!({
        "enum": ["only-x", "only-y", "early-x", "early-y", "late", "hybrid", "direct-concat"]
    });
    json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "multinpe experiment configuration",
        "description": "Files may be partial: fields not given are taken from the named profile. Command-line overrides use dotted paths such as train.epochs.",
        "type": "object",
        "additionalProperties": false,
        "required": ["profile", "task", "architectures", "seed", "seeds", "network", "train", "test"],
        "properties": {
            "profile": { "enum": ["exp1-small", "exp1-paper", "exp2-small", "exp2-paper"] },
            "task": {
                "oneOf": [
                    {
                        "type": "object",
                        "additionalProperties": false,
                        "required": ["task", "dim", "rows", "points", "sigma", "horizon", "start"],
                        "properties": {
                            "task": { "const": "exp1" },
                            "dim": { "type": "integer", "minimum": 1 },
                            "rows": { "type": "integer", "minimum": 1, "description": "Rows of the direct source X." },
                            "points": { "type": "integer", "minimum": 2, "description": "Time points of the trajectory Y." },
                            "sigma": { "type": "number", "exclusiveMinimum": 0, "description": "Noise standard deviation of Y." },
                            "horizon": { "type": "number", "exclusiveMinimum": 0 },
                            "start": { "type": "number" }
                        }
                    },
                    {
                        "type": "object",
                        "additionalProperties": false,
                        "required": ["task", "trials", "prior", "missing_rate", "fill", "ddm_step", "max_time"],
                        "properties": {
                            "task": { "const": "exp2" },
                            "trials": { "type": "integer", "minimum": 1 },
                            "prior": {
                                "description": "Uniform bounds for mu, sigma, alpha, tau, beta, eta.",
                                "type": "array", "items": bounds(), "minItems": 6, "maxItems": 6
                            },
                            "missing_rate": bounds(),
                            "fill": { "type": "number" },
                            "ddm_step": { "type": "number", "exclusiveMinimum": 0 },
                            "max_time": { "type": "number", "exclusiveMinimum": 0 }
                        }
                    }
                ]
            },
            "architectures": { "type": "array", "items": architecture, "minItems": 1, "uniqueItems": true },
            "seed": { "type": "integer", "minimum": 0, "description": "Master seed of all simulated data." },
            "seeds": {
                "type": "array", "items": { "type": "integer", "minimum": 0 }, "minItems": 1, "uniqueItems": true,
                "description": "One training run per seed and architecture."
            },
            "network": {
                "type": "object",
                "required": ["model_dim", "embed_dim", "embed_blocks", "embed_attention", "cross_attention", "flow_blocks", "flow_hidden", "flow_clamp"],
                "properties": {
                    "model_dim": { "type": "integer", "minimum": 1 },
                    "embed_dim": { "type": "integer", "minimum": 1 },
                    "embed_blocks": { "type": "integer", "minimum": 0 },
                    "embed_attention": attention(),
                    "cross_attention": attention(),
                    "flow_blocks": { "type": "integer", "minimum": 1 },
                    "flow_hidden": { "type": "integer", "minimum": 1 },
                    "flow_clamp": { "type": "number", "exclusiveMinimum": 0 }
                }
            },
            "train": {
                "type": "object",
                "additionalProperties": false,
                "required": ["simulations", "epochs", "batch_size", "learning_rate", "l2", "validation_fraction"],
                "properties": {
                    "simulations": { "type": "integer", "minimum": 1 },
                    "epochs": { "type": "integer", "minimum": 1 },
                    "batch_size": { "type": "integer", "minimum": 1 },
                    "learning_rate": { "type": "number", "exclusiveMinimum": 0 },
                    "l2": { "type": "number", "minimum": 0 },
                    "validation_fraction": { "type": "number", "exclusiveMinimum": 0 }
                }
            },
            "test": {
                "type": "object",
                "additionalProperties": false,
                "required": ["datasets", "draws", "oracle_draws", "missing_rates"],
                "properties": {
                    "datasets": { "type": "integer", "minimum": 1 },
                    "draws": { "type": "integer", "minimum": 2 },
                    "oracle_draws": { "type": "integer", "minimum": 0 },
                    "missing_rates": {
                        "type": "array", "items": { "type": "number", "minimum": 0, "exclusiveMaximum": 1 },
                        "description": "Rates above 0.1 are reported as extrapolation."
                    }
                }
            },
            "output": { "type": "string" },
            "jobs": { "type": "integer", "minimum": 1 }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;

    /// Every key the config serializes is described by the schema, and every
    /// required key is present.
    fn covers(schema: &Value, doc: &Value, path: &str) {
        if let Some(options) = schema.get("oneOf").and_then(Value::as_array) {
            assert!(options.iter().any(|o| o["properties"]["task"]["const"] == doc["task"]), "no variant for {path}");
            let chosen = options.iter().find(|o| o["properties"]["task"]["const"] == doc["task"]).unwrap();
            return covers(chosen, doc, path);
        }
        let Some(obj) = doc.as_object() else { return };
        let Some(props) = schema.get("properties").and_then(Value::as_object) else { return };
        for (k, v) in obj {
            let sub = props.get(k).unwrap_or_else(|| panic!("{path}.{k} missing from schema"));
            covers(sub, v, &format!("{path}.{k}"));
        }
        for r in schema.get("required").and_then(Value::as_array).into_iter().flatten() {
            assert!(obj.contains_key(r.as_str().unwrap()), "{path}.{r} required but absent");
        }
    }

    #[test]
    fn schema_describes_every_profile() {
        let schema = config_schema();
        for p in Profile::ALL {
            covers(&schema, &serde_json::to_value(p.config()).unwrap(), "$");
        }
    }
}
