//! Canonical single-line JSON encoding shared by the wire protocol and the
//! trace files.
//!
//! Object keys come out sorted, there is no insignificant whitespace, and
//! every floating point number is written with 17 significant digits
//! (`{:.16e}`), which round-trips any `f64` exactly. Integers stay integers.

use std::fmt::Write as _;

use serde::Serialize;
use serde_json::{Number, Value};

use crate::error::Error;

pub fn to_line<T: Serialize + ?Sized>(value: &T) -> Result<String, Error> {
    let value = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&value, &mut out);
    Ok(out)
}

pub fn value_to_line(value: &Value) -> String {
    let mut out = String::new();
    write_value(value, &mut out);
    out
}

pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_number(n: &Number, out: &mut String) {
    if let Some(i) = n.as_i64() {
        let _ = write!(out, "{i}");
    } else if let Some(u) = n.as_u64() {
        let _ = write!(out, "{u}");
    } else if let Some(f) = n.as_f64() {
        out.push_str(&format_f64(f));
    }
}

fn write_value(value: &Value, out: &mut String) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => write_number(n, out),
        Value::String(s) => {
            // serde_json's string escaping is already canonical
            out.push_str(&serde_json::to_string(s).expect("string serialization"))
        }
        Value::Array(items) => {
            out.push('[');
            for (k, item) in items.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            out.push('{');
            for (k, (key, item)) in map.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(key).expect("key serialization"));
                out.push(':');
                write_value(item, out);
            }
            out.push('}');
        }
    }
}
