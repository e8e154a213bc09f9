//! Canonical JSON emission: object keys in sorted order and every float
//! written with exactly 17 significant digits, so identical values always
//! produce identical bytes and parse back to the same `f64`.

use serde::Serialize;
use serde_json::Value;
use std::fmt::Write;

/// Formats a finite float with 17 significant digits (`d.dddddddddddddddde±x`).
pub fn format_f64(v: f64) -> String {
    assert!(v.is_finite(), "cannot encode non-finite float {v} as JSON");
    format!("{v:.16e}")
}

/// Serializes any `Serialize` value canonically. `pretty` adds newlines
/// and two-space indentation.
pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T, pretty: bool) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&mut out, &v, pretty, 0);
    if pretty {
        out.push('\n');
    }
    Ok(out)
}

fn indent(out: &mut String, pretty: bool, level: usize) {
    if pretty {
        out.push('\n');
        for _ in 0..level {
            out.push_str("  ");
        }
    }
}

fn write_value(out: &mut String, v: &Value, pretty: bool, level: usize) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                write!(out, "{u}").unwrap();
            } else if let Some(i) = n.as_i64() {
                write!(out, "{i}").unwrap();
            } else {
                out.push_str(&format_f64(n.as_f64().expect("finite json number")));
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string encoding")),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            // Arrays of scalars stay on one line.
            let flat = items.iter().all(|i| !i.is_array() && !i.is_object());
            out.push('[');
            for (k, item) in items.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                    if flat && pretty {
                        out.push(' ');
                    }
                }
                if !flat {
                    indent(out, pretty, level + 1);
                }
                write_value(out, item, pretty, level + 1);
            }
            if !flat {
                indent(out, pretty, level);
            }
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (k, key) in keys.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                indent(out, pretty, level + 1);
                out.push_str(&serde_json::to_string(key).expect("key encoding"));
                out.push(':');
                if pretty {
                    out.push(' ');
                }
                write_value(out, &map[key.as_str()], pretty, level + 1);
            }
            indent(out, pretty, level);
            out.push('}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn keys_sorted_and_floats_fixed_width() {
        let v = json!({"b": 0.5, "a": [1, 2.0], "c": {"z": -3, "y": "s"}});
        let s = to_canonical_string(&v, false).unwrap();
        assert_eq!(
            s,
            r#"{"a":[1,2.0000000000000000e0],"b":5.0000000000000000e-1,"c":{"y":"s","z":-3}}"#
        );
    }

    proptest! {
        #[test]
        fn floats_round_trip_exactly(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let s = format_f64(x);
            let back: f64 = serde_json::from_str(&s).unwrap();
            prop_assert_eq!(back.to_bits(), x.to_bits());
        }
    }
}
