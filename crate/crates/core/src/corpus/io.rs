//! Line-delimited corpus files.
//!
//! ```text
//! #mre-corpus v1
//! {"tokens":["the","oka","for"],"mentions":[[1,3]],"relations":[],"domain":"bc"}
//! ```
//!
//! The first line is the version header. Every following line is one JSON
//! object with exactly the keys `tokens` (array of strings), `mentions`
//! (array of `[start, end]` half-open token spans), `relations` (array of
//! `[head_mention, tail_mention, label]`) and `domain` (string). Keys are
//! written in that order. An empty file is an empty corpus.

use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use super::{AnnotatedParagraph, RelationInstance, Span};
use crate::error::{Error, Result};

pub const CORPUS_HEADER: &str = "#mre-corpus v1";

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<AnnotatedParagraph>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_records(&text)
}

pub fn write_records(records: &[AnnotatedParagraph], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_records(records)).map_err(|e| Error::file(path, e))
}

pub fn render_records(records: &[AnnotatedParagraph]) -> String {
    let mut out = String::with_capacity(64 + records.len() * 256);
    out.push_str(CORPUS_HEADER);
    out.push('\n');
    for p in records {
        let mentions: Vec<Value> = p.mentions.iter().map(|s| json!([s.start, s.end])).collect();
        let relations: Vec<Value> = p
            .relations
            .iter()
            .map(|r| json!([r.head, r.tail, r.label]))
            .collect();
        // serde_json's default map is ordered by key; build the line by hand to
        // keep the documented field order.
        out.push_str("{\"tokens\":");
        out.push_str(&Value::from(p.tokens.clone()).to_string());
        out.push_str(",\"mentions\":");
        out.push_str(&Value::Array(mentions).to_string());
        out.push_str(",\"relations\":");
        out.push_str(&Value::Array(relations).to_string());
        out.push_str(",\"domain\":");
        out.push_str(&Value::from(p.domain.clone()).to_string());
        out.push_str("}\n");
    }
    out
}

pub fn parse_records(text: &str) -> Result<Vec<AnnotatedParagraph>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        None => return Ok(Vec::new()),
        Some((_, first)) if first.trim_end() == CORPUS_HEADER => {}
        Some((_, first)) => {
            return Err(Error::Record {
                line: 1,
                field: "header".into(),
                msg: format!("expected `{CORPUS_HEADER}`, found `{}`", truncate(first)),
            })
        }
    }
    lines.map(|(idx, line)| parse_line(idx + 1, line)).collect()
}

fn truncate(s: &str) -> String {
    s.chars().take(40).collect()
}

fn parse_line(line_no: usize, line: &str) -> Result<AnnotatedParagraph> {
    let err = |field: &str, msg: String| Error::Record {
        line: line_no,
        field: field.to_string(),
        msg,
    };
    let value: Value =
        serde_json::from_str(line).map_err(|e| err("record", format!("malformed JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| err("record", "expected a JSON object".into()))?;
    if let Some(extra) = obj
        .keys()
        .find(|k| !["tokens", "mentions", "relations", "domain"].contains(&k.as_str()))
    {
        return Err(err(extra, "unknown field".into()));
    }

    let tokens = array(obj, "tokens", line_no)?
        .iter()
        .enumerate()
        .map(|(i, t)| {
            t.as_str()
                .map(str::to_string)
                .ok_or_else(|| err(&format!("tokens[{i}]"), "expected a string".into()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mentions = array(obj, "mentions", line_no)?
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let field = format!("mentions[{i}]");
            match m.as_array().map(Vec::as_slice) {
                Some([s, e]) => match (s.as_u64(), e.as_u64()) {
                    (Some(s), Some(e)) => Ok(Span::new(s as usize, e as usize)),
                    _ => Err(err(&field, "span bounds must be non-negative integers".into())),
                },
                _ => Err(err(&field, "expected [start, end]".into())),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let relations = array(obj, "relations", line_no)?
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let field = format!("relations[{i}]");
            match r.as_array().map(Vec::as_slice) {
                Some([h, t, l]) => match (h.as_u64(), t.as_u64(), l.as_str()) {
                    (Some(h), Some(t), Some(l)) => Ok(RelationInstance {
                        head: h as usize,
                        tail: t as usize,
                        label: l.to_string(),
                    }),
                    _ => Err(err(&field, "expected [int, int, string]".into())),
                },
                _ => Err(err(&field, "expected [head, tail, label]".into())),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let domain = obj
        .get("domain")
        .ok_or_else(|| err("domain", "missing field".into()))?
        .as_str()
        .ok_or_else(|| err("domain", "expected a string".into()))?
        .to_string();

    let p = AnnotatedParagraph {
        tokens,
        mentions,
        relations,
        domain,
    };
    p.validate().map_err(|(field, msg)| err(&field, msg))?;
    Ok(p)
}

fn array<'a>(obj: &'a Map<String, Value>, key: &str, line: usize) -> Result<&'a Vec<Value>> {
    obj.get(key)
        .ok_or_else(|| Error::Record {
            line,
            field: key.into(),
            msg: "missing field".into(),
        })?
        .as_array()
        .ok_or_else(|| Error::Record {
            line,
            field: key.into(),
            msg: "expected an array".into(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::para;

    #[test]
    fn round_trip() {
        let records = vec![
            para(4, &[(0, 1), (2, 4)], &[(0, 1, "PER-near"), (1, 0, "NA")]),
            AnnotatedParagraph {
                tokens: vec!["quote\"d".into(), "tab\tbed".into(), "ünï".into()],
                mentions: vec![Span::new(0, 2)],
                relations: vec![],
                domain: "wl".into(),
            },
        ];
        let text = render_records(&records);
        assert!(text.starts_with("#mre-corpus v1\n"));
        assert!(text.contains(r#"{"tokens":["t0","t1","t2","t3"],"mentions":[[0,1],[2,4]],"relations":[[0,1,"PER-near"],[1,0,"NA"]],"domain":"bc"}"#));
        assert_eq!(parse_records(&text).unwrap(), records);
    }

    #[test]
    fn empty_inputs() {
        assert!(parse_records("").unwrap().is_empty());
        assert!(parse_records("#mre-corpus v1\n").unwrap().is_empty());
    }

    #[test]
    fn truncated_line_names_line() {
        let text = "#mre-corpus v1\n{\"tokens\":[\"a\"],\"mentions\":[],\"relations\":[],\"domain\":\"bc\"}\n{\"tokens\":[\"a\"],\"ment";
        let err = parse_records(text).unwrap_err();
        assert!(matches!(err, Error::Record { line: 3, .. }), "{err}");
    }

    #[test]
    fn bad_fields_are_named() {
        let cases = [
            (r#"{"tokens":["a"],"mentions":[[0]],"relations":[],"domain":"bc"}"#, "mentions[0]"),
            (r#"{"tokens":["a",3],"mentions":[],"relations":[],"domain":"bc"}"#, "tokens[1]"),
            (r#"{"tokens":["a"],"mentions":[],"relations":[],"domain":1}"#, "domain"),
            (r#"{"tokens":["a"],"mentions":[],"relations":[]}"#, "domain"),
            (r#"{"tokens":["a"],"mentions":[[0,1]],"relations":[[0,0,"R"]],"domain":"x"}"#, "relations[0]"),
            (r#"{"tokens":["a"],"mentions":[],"relations":[],"domain":"x","extra":1}"#, "extra"),
        ];
        for (line, field) in cases {
            let text = format!("{CORPUS_HEADER}\n{line}\n");
            match parse_records(&text).unwrap_err() {
                Error::Record { line: 2, field: f, .. } => assert_eq!(f, field, "{line}"),
                other => panic!("unexpected {other}"),
            }
        }
    }

    #[test]
    fn missing_header_is_rejected() {
        let err = parse_records("{}\n").unwrap_err();
        assert!(matches!(err, Error::Record { line: 1, .. }));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let records = vec![para(3, &[(0, 1), (1, 3)], &[(0, 1, "R")])];
        write_records(&records, &path).unwrap();
        assert_eq!(read_records(&path).unwrap(), records);
    }
}
