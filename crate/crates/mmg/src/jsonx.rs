//! Lenient location of JSON inside model output.

/// The first balanced `{...}` or `[...]` in `text` (string-literal aware),
/// starting at the first occurrence of `open`.
pub fn first_balanced(text: &str, open: char) -> Option<&str> {
    let close = match open {
        '{' => '}',
        '[' => ']',
        _ => return None,
    };
    let mut search = 0;
    while let Some(rel) = text[search..].find(open) {
        let start = search + rel;
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        for (i, c) in text[start..].char_indices() {
            if in_str {
                match c {
                    _ if escaped => escaped = false,
                    '\\' => escaped = true,
                    '"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match c {
                '"' => in_str = true,
                c if c == open => depth += 1,
                c if c == close => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(&text[start..start + i + c.len_utf8()]);
                    }
                }
                _ => {}
            }
        }
        search = start + open.len_utf8();
    }
    None
}

/// Parses the first balanced JSON value opened by `open`.
pub fn parse_first(text: &str, open: char) -> Result<serde_json::Value, String> {
    let slice = first_balanced(text, open).ok_or_else(|| format!("no balanced JSON starting with {open:?}"))?;
    serde_json::from_str(slice).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_object_inside_prose() {
        let text = "Sure! Here you go:\n```json\n{\"decision\": \"search\", \"search_query\": \"a {b}\"}\n```";
        assert_eq!(first_balanced(text, '{'), Some("{\"decision\": \"search\", \"search_query\": \"a {b}\"}"));
    }

    #[test]
    fn nested_and_escaped() {
        let text = r#"x [1, [2, "]"], {"a": "\"]"}] y"#;
        assert_eq!(first_balanced(text, '['), Some(r#"[1, [2, "]"], {"a": "\"]"}]"#));
    }

    #[test]
    fn unbalanced_is_none() {
        assert_eq!(first_balanced("{\"a\": 1", '{'), None);
        assert!(parse_first("nothing here", '{').is_err());
    }
}
