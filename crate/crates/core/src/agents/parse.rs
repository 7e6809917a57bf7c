use serde_json::{Map, Value};

use super::{edge_alias, BoundaryFinding, DescriptionFinding, OcclusionFinding};
use crate::error::{Error, ResponseKind, Result};
use crate::mask::{ExpansionSpec, MAX_EXPANSION};

type Object = Map<String, Value>;

/// Top-level JSON objects embedded in free text, in order of appearance.
/// Prose, code fences and unparseable brace runs between them are skipped.
pub fn extract_json_objects(text: &str) -> Vec<Object> {
    let mut out = Vec::new();
    let mut i = 0;
    while let Some(off) = text[i..].find('{') {
        let start = i + off;
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(obj))) => {
                out.push(obj);
                i = start + stream.byte_offset();
            }
            _ => i = start + 1,
        }
    }
    out
}

/// First embedded object accepted by `validate`; otherwise a parse error
/// carrying the first validation failure.
fn first_valid<T>(
    kind: ResponseKind,
    text: &str,
    validate: impl Fn(&Object) -> std::result::Result<T, String>,
) -> Result<T> {
    let mut first_err = None;
    for obj in extract_json_objects(text) {
        match validate(&obj) {
            Ok(v) => return Ok(v),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    Err(Error::Parse {
        kind,
        message: first_err.unwrap_or_else(|| "no JSON object found".into()),
        raw: text.to_string(),
    })
}

fn string_field<'a>(obj: &'a Object, key: &str) -> std::result::Result<&'a str, String> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(format!("\"{key}\" must be a string")),
        None => Err(format!("missing \"{key}\"")),
    }
}

fn occlusion_from(obj: &Object) -> std::result::Result<OcclusionFinding, String> {
    let target = string_field(obj, "target")?.trim().to_string();
    if target.is_empty() {
        return Err("\"target\" is empty".into());
    }
    let list = match obj.get("occluders") {
        Some(Value::Array(a)) => a,
        Some(_) => return Err("\"occluders\" must be an array of strings".into()),
        None => return Err("missing \"occluders\"".into()),
    };
    let target_key = target.to_lowercase();
    let mut seen = vec![target_key];
    let mut occluders = Vec::new();
    for v in list {
        let s = v.as_str().ok_or("\"occluders\" must be an array of strings")?.trim();
        let key = s.to_lowercase();
        if s.is_empty() || seen.contains(&key) {
            continue;
        }
        seen.push(key);
        occluders.push(s.to_string());
    }
    Ok(OcclusionFinding { target, occluders })
}

fn boundary_from(obj: &Object) -> std::result::Result<BoundaryFinding, String> {
    let truncated = match obj.get("truncated") {
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err("\"truncated\" must be a boolean".into()),
        None => return Err("missing \"truncated\"".into()),
    };
    let exp = match obj.get("expansion") {
        Some(Value::Object(e)) => e,
        Some(_) => return Err("\"expansion\" must be an object".into()),
        None => return Err("missing \"expansion\"".into()),
    };
    let rationale = match obj.get("rationale") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.trim().to_string(),
        Some(_) => return Err("\"rationale\" must be a string".into()),
    };
    let mut warnings = Vec::new();
    let mut expansion = ExpansionSpec::ZERO;
    let mut assigned = Vec::new();
    for (key, v) in exp {
        let raw = v
            .as_f64()
            .ok_or_else(|| format!("expansion \"{key}\" must be a number"))?;
        // "down/left": 0.5 applies to both edges
        for part in key.split(['/', ',', '+', '&']) {
            let edge = edge_alias(part).ok_or_else(|| format!("unknown expansion edge \"{part}\""))?;
            if assigned.contains(&edge) {
                return Err(format!("expansion edge \"{edge}\" given twice"));
            }
            assigned.push(edge);
            let clamped = raw.clamp(0.0, MAX_EXPANSION);
            if clamped != raw {
                let msg = format!("expansion {edge} = {raw} clamped to {clamped}");
                log::warn!("{msg}");
                warnings.push(msg);
            }
            expansion.set(edge, clamped);
        }
    }
    if !truncated && !expansion.is_zero() {
        warnings.push("truncated is false; expansion ignored".into());
        expansion = ExpansionSpec::ZERO;
    }
    Ok(BoundaryFinding {
        truncated,
        expansion,
        rationale,
        warnings,
    })
}

fn description_from(obj: &Object, budget: usize) -> std::result::Result<DescriptionFinding, String> {
    let text = string_field(obj, "description")?.trim();
    if text.is_empty() {
        return Err("\"description\" is empty".into());
    }
    let (prompt_text, truncated) = truncate_to_budget(text, budget);
    Ok(DescriptionFinding {
        prompt_text,
        truncated,
    })
}

/// Cuts `text` to at most `budget` words, preferring the longest prefix of
/// whole sentences. Falls back to a hard word cut when even the first
/// sentence is too long. Returns the text and whether it was shortened.
pub fn truncate_to_budget(text: &str, budget: usize) -> (String, bool) {
    let text = text.trim();
    if text.split_whitespace().count() <= budget {
        return (text.to_string(), false);
    }
    let mut best: Option<&str> = None;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        let at_break = chars.peek().is_none_or(|(_, n)| n.is_whitespace());
        if !at_break {
            continue;
        }
        let prefix = &text[..i + c.len_utf8()];
        if prefix.split_whitespace().count() > budget {
            break;
        }
        best = Some(prefix);
    }
    let out = match best {
        Some(p) => p.to_string(),
        None => text.split_whitespace().take(budget).collect::<Vec<_>>().join(" "),
    };
    (out, true)
}

pub fn parse_occlusion_response(text: &str) -> Result<OcclusionFinding> {
    first_valid(ResponseKind::Occlusion, text, occlusion_from)
}

pub fn parse_boundary_response(text: &str) -> Result<BoundaryFinding> {
    first_valid(ResponseKind::Boundary, text, boundary_from)
}

pub fn parse_description_response(text: &str, budget: usize) -> Result<DescriptionFinding> {
    first_valid(ResponseKind::Description, text, |o| description_from(o, budget))
}

pub fn parse_combined_response(
    text: &str,
    budget: usize,
) -> Result<(OcclusionFinding, BoundaryFinding, DescriptionFinding)> {
    first_valid(ResponseKind::Combined, text, |o| {
        Ok((occlusion_from(o)?, boundary_from(o)?, description_from(o, budget)?))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn occlusion_examples() {
        let f = parse_occlusion_response(r#"{"target":"clock tower","occluders":["trees"]}"#).unwrap();
        assert_eq!(f.target, "clock tower");
        assert_eq!(f.occluders, vec!["trees"]);
        let none = parse_occlusion_response(r#"{"target":"cat","occluders":[]}"#).unwrap();
        assert!(none.occluders.is_empty());
    }

    #[test]
    fn fenced_wrapper_matches_bare_json() {
        let bare = r#"{"target":"clock tower","occluders":["trees","fence"]}"#;
        let wrapped = format!("sure! ```json\n{bare}\n``` hope this helps {{not json}}");
        assert_eq!(
            parse_occlusion_response(&wrapped).unwrap(),
            parse_occlusion_response(bare).unwrap()
        );
    }

    #[test]
    fn occluders_deduplicated_in_order_without_target() {
        let f = parse_occlusion_response(
            r#"{"target":"Cat","occluders":["chair"," Table","chair","cat","","table","plant"]}"#,
        )
        .unwrap();
        assert_eq!(f.occluders, vec!["chair", "Table", "plant"]);
    }

    #[test]
    fn first_valid_object_wins() {
        let text = r#"Example: {"foo": 1}. Answer: {"target":"dog","occluders":["sofa"]} or {"target":"x","occluders":[]}"#;
        assert_eq!(parse_occlusion_response(text).unwrap().target, "dog");
    }

    #[test]
    fn parse_errors_carry_raw_text() {
        for text in ["no json here", r#"{"target": 3, "occluders": []}"#, r#"{"target":"  ","occluders":[]}"#] {
            match parse_occlusion_response(text) {
                Err(Error::Parse { kind, raw, .. }) => {
                    assert_eq!(kind, ResponseKind::Occlusion);
                    assert_eq!(raw, text);
                }
                other => panic!("expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn boundary_examples() {
        let f = parse_boundary_response(r#"{"truncated":true,"expansion":{"down":0.5,"left":0.5}}"#).unwrap();
        assert_eq!(f.expansion, ExpansionSpec::new(0.5, 0.0, 0.0, 0.5).unwrap());
        let g = parse_boundary_response(r#"{"truncated":true,"expansion":{"down/left":0.5}}"#).unwrap();
        assert_eq!(g.expansion, f.expansion);

        let off = parse_boundary_response(r#"{"truncated":false,"expansion":{"left":0.7}}"#).unwrap();
        assert!(off.expansion.is_zero());
        assert!(!off.warnings.is_empty());

        let big = parse_boundary_response(r#"{"truncated":true,"expansion":{"top":3.0,"up":0}}"#);
        assert!(big.is_err(), "top given twice");
        let big = parse_boundary_response(r#"{"truncated":true,"expansion":{"top":3.0,"right":-1}}"#).unwrap();
        assert_eq!(big.expansion, ExpansionSpec::new(0.0, 0.0, 2.0, 0.0).unwrap());
        assert_eq!(big.warnings.len(), 2);

        assert!(parse_boundary_response(r#"{"truncated":true}"#).is_err());
        assert!(parse_boundary_response(r#"{"truncated":true,"expansion":{"north":1}}"#).is_err());
    }

    #[test]
    fn description_examples() {
        let text = "A red-brick clock tower with ornate golden details and a pointed spire.";
        let f = parse_description_response(&format!(r#"{{"description":"  {text} "}}"#), 200).unwrap();
        assert_eq!(f.prompt_text, text);
        assert!(!f.truncated);
        assert!(parse_description_response(r#"{"description":"   "}"#, 200).is_err());
    }

    #[test]
    fn truncation_keeps_whole_sentences() {
        let text = "One two three. Four five six! Seven eight nine ten? Eleven.";
        assert_eq!(truncate_to_budget(text, 6), ("One two three. Four five six!".into(), true));
        assert_eq!(truncate_to_budget(text, 9), ("One two three. Four five six!".into(), true));
        assert_eq!(truncate_to_budget(text, 11), (text.into(), false));
        // decimals are not sentence ends
        assert_eq!(truncate_to_budget("Costs 2.5 units now. Then more.", 4), ("Costs 2.5 units now.".into(), true));
        assert_eq!(truncate_to_budget("one two three four", 2), ("one two".into(), true));
    }

    #[test]
    fn combined_requires_every_section() {
        let ok = r#"{"target":"tower","occluders":["trees"],"truncated":true,
            "expansion":{"left":0.5,"bottom":0.5},"description":"A tall tower."}"#;
        let (o, b, d) = parse_combined_response(ok, 200).unwrap();
        assert_eq!(o.occluders, vec!["trees"]);
        assert_eq!(b.expansion.left, 0.5);
        assert_eq!(d.prompt_text, "A tall tower.");
        let missing = r#"{"target":"tower","occluders":[],"truncated":false,"description":"x"}"#;
        match parse_combined_response(missing, 200) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("expansion")),
            other => panic!("{other:?}"),
        }
    }

    /// Whole-sentence prefixes, computed by splitting on terminators.
    fn sentence_oracle(text: &str, budget: usize) -> String {
        let mut sentences = Vec::new();
        let mut cur = String::new();
        let words: Vec<&str> = text.split_whitespace().collect();
        for w in &words {
            if !cur.is_empty() {
                cur.push(' ');
            }
            cur.push_str(w);
            if w.ends_with(['.', '!', '?']) {
                sentences.push(std::mem::take(&mut cur));
            }
        }
        let mut out = String::new();
        for s in sentences {
            let candidate = if out.is_empty() { s.clone() } else { format!("{out} {s}") };
            if candidate.split_whitespace().count() > budget {
                break;
            }
            out = candidate;
        }
        if out.is_empty() {
            words[..budget.min(words.len())].join(" ")
        } else {
            out
        }
    }

    proptest! {
        #[test]
        fn truncation_matches_sentence_oracle(
            sentences in prop::collection::vec((1usize..8, prop::sample::select(vec!['.', '!', '?'])), 1..8),
            budget in 1usize..30,
        ) {
            let text = sentences
                .iter()
                .enumerate()
                .map(|(i, (n, end))| {
                    let words: Vec<String> = (0..*n).map(|k| format!("w{i}x{k}")).collect();
                    format!("{}{end}", words.join(" "))
                })
                .collect::<Vec<_>>()
                .join(" ");
            let (out, cut) = truncate_to_budget(&text, budget);
            prop_assert!(out.split_whitespace().count() <= budget);
            prop_assert_eq!(cut, text.split_whitespace().count() > budget);
            if cut {
                prop_assert_eq!(out, sentence_oracle(&text, budget));
            } else {
                prop_assert_eq!(out, text);
            }
        }

        #[test]
        fn any_prose_around_one_instance_parses(prefix in "[a-zA-Z ,.:!]{0,40}", suffix in "[a-zA-Z ,.:!]{0,40}") {
            let json = r#"{"target":"cat","occluders":["box"]}"#;
            let f = parse_occlusion_response(&format!("{prefix}```json\n{json}\n```{suffix}")).unwrap();
            prop_assert_eq!(f.occluders, vec!["box".to_string()]);
        }
    }
}
