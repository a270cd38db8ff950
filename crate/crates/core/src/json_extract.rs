//! Lenient JSON extraction from model replies: strips Markdown fences and
//! falls back to the first balanced object or array in the text.

use serde_json::{Map, Value};

pub fn parse_relaxed(input: &str) -> Result<Value, String> {
    let trimmed = strip_fences(input.trim());
    if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        return Ok(v);
    }
    match first_balanced(trimmed) {
        Some(s) => serde_json::from_str(s).map_err(|e| format!("invalid JSON: {e}")),
        None => Err("no JSON object found".into()),
    }
}

fn strip_fences(s: &str) -> &str {
    let s = s
        .strip_prefix("```json")
        .or_else(|| s.strip_prefix("```JSON"))
        .or_else(|| s.strip_prefix("```"))
        .unwrap_or(s);
    s.strip_suffix("```").unwrap_or(s).trim()
}

fn first_balanced(s: &str) -> Option<&str> {
    let mut in_str = false;
    let mut escaped = false;
    let mut stack: Vec<char> = Vec::new();
    let mut start = None;
    for (i, ch) in s.char_indices() {
        if in_str {
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_str = false;
            }
            continue;
        }
        match ch {
            '"' if start.is_some() => in_str = true,
            '{' | '[' => {
                if start.is_none() {
                    start = Some(i);
                }
                stack.push(ch);
            }
            '}' | ']' if start.is_some() => {
                let open = stack.pop();
                let ok = matches!((open, ch), (Some('{'), '}') | (Some('['), ']'));
                if !ok {
                    stack.clear();
                    start = None;
                } else if stack.is_empty() {
                    return start.map(|st| &s[st..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Case-insensitive key lookup.
pub fn get_ci<'a>(map: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    map.get(key)
        .or_else(|| map.iter().find(|(k, _)| k.eq_ignore_ascii_case(key)).map(|(_, v)| v))
}

/// First of `keys` present with a non-empty string (arrays of strings are
/// joined with a space).
pub fn string_field(map: &Map<String, Value>, keys: &[&str]) -> Option<String> {
    keys.iter().find_map(|k| {
        let v = get_ci(map, k)?;
        let s = match v {
            Value::String(s) => s.trim().to_string(),
            Value::Array(items) => items
                .iter()
                .filter_map(Value::as_str)
                .map(str::trim)
                .collect::<Vec<_>>()
                .join(" "),
            Value::Number(n) => n.to_string(),
            _ => return None,
        };
        (!s.is_empty()).then_some(s)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fenced() {
        let v = parse_relaxed("```json\n{\"a\": 1}\n```").unwrap();
        assert_eq!(v["a"], 1);
    }

    #[test]
    fn embedded_in_prose() {
        let v = parse_relaxed("Sure! Here it is: {\"a\": \"}\"} hope that helps").unwrap();
        assert_eq!(v["a"], "}");
    }

    #[test]
    fn garbage() {
        assert!(parse_relaxed("no json here").is_err());
        assert!(parse_relaxed("{\"a\": ").is_err());
    }
}
