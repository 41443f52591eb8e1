//! One-way converter for the serialized QT/Openstack release used by DeepJIT
//! and CC2Vec: a pickled 4-sequence `[ids, labels, msgs, codes]` where
//! `codes[i]` lists the files touched by commit `i`.
//!
//! A file entry is either a dict with `added_code` / `removed_code` line
//! lists, or a list of lines carrying `+`/`-` (or `added:`/`removed:`)
//! prefixes.

use std::fs;
use std::path::Path;

use serde_pickle::{DeOptions, HashableValue, Value};

use super::{CommitRecord, CorpusError, Label, Patch, Result, ADDED_MARKER, REMOVED_MARKER};

fn err(path: &Path, message: impl Into<String>) -> CorpusError {
    CorpusError::Legacy {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn as_seq(value: &Value) -> Option<&[Value]> {
    match value {
        Value::List(items) | Value::Tuple(items) => Some(items),
        _ => None,
    }
}

fn as_text(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Bytes(b) => Some(String::from_utf8_lossy(b).into_owned()),
        _ => None,
    }
}

fn as_label(value: &Value) -> Option<i64> {
    match value {
        Value::I64(v) => Some(*v),
        Value::Bool(b) => Some(i64::from(*b)),
        Value::F64(f) if f.fract() == 0.0 => Some(*f as i64),
        _ => None,
    }
}

fn text_lines(value: &Value) -> Option<Vec<String>> {
    match value {
        Value::String(_) | Value::Bytes(_) => {
            Some(as_text(value)?.lines().map(str::to_string).collect())
        }
        other => as_seq(other)?.iter().map(as_text).collect(),
    }
}

fn dict_get<'a>(
    dict: &'a std::collections::BTreeMap<HashableValue, Value>,
    key: &str,
) -> Option<&'a Value> {
    dict.get(&HashableValue::String(key.to_string()))
        .or_else(|| dict.get(&HashableValue::Bytes(key.as_bytes().to_vec())))
}

fn convert_file(entry: &Value) -> std::result::Result<Patch, String> {
    if let Value::Dict(dict) = entry {
        let added = match dict_get(dict, "added_code") {
            Some(v) => text_lines(v).ok_or("`added_code` is not a list of strings")?,
            None => Vec::new(),
        };
        let removed = match dict_get(dict, "removed_code") {
            Some(v) => text_lines(v).ok_or("`removed_code` is not a list of strings")?,
            None => Vec::new(),
        };
        if dict_get(dict, "added_code").is_none() && dict_get(dict, "removed_code").is_none() {
            return Err("file dict has neither `added_code` nor `removed_code`".into());
        }
        let keep = |lines: Vec<String>| -> Vec<String> {
            lines.into_iter().filter(|l| !l.trim().is_empty()).collect()
        };
        return Ok(Patch::from_changes(keep(added), keep(removed)));
    }
    let lines = text_lines(entry).ok_or("file entry is neither a dict nor a list of lines")?;
    let mut marked = Vec::with_capacity(lines.len());
    for line in lines {
        let trimmed = line.trim_start();
        let (marker, body) = if let Some(rest) = trimmed.strip_prefix(ADDED_MARKER) {
            (ADDED_MARKER, rest)
        } else if let Some(rest) = trimmed.strip_prefix(REMOVED_MARKER) {
            (REMOVED_MARKER, rest)
        } else if let Some(rest) = trimmed.strip_prefix('+') {
            (ADDED_MARKER, rest)
        } else if let Some(rest) = trimmed.strip_prefix('-') {
            (REMOVED_MARKER, rest)
        } else if trimmed.is_empty() {
            continue;
        } else {
            return Err(format!("line {line:?} has no added/removed marker"));
        };
        let body = body.split_whitespace().collect::<Vec<_>>().join(" ");
        if body.is_empty() {
            continue;
        }
        marked.push(format!("{marker} {body}"));
    }
    Ok(Patch::new(marked))
}

/// Decodes a legacy pickle into canonical records, in file order.
pub fn convert_legacy_bytes(path: &Path, bytes: &[u8]) -> Result<Vec<CommitRecord>> {
    let value = serde_pickle::value_from_slice(bytes, DeOptions::new().replace_unresolved_globals())
        .map_err(|e| err(path, format!("not a readable pickle: {e}")))?;
    let parts = as_seq(&value).ok_or_else(|| err(path, "top level is not a sequence"))?;
    if parts.len() != 4 {
        return Err(err(
            path,
            format!("expected [ids, labels, msgs, codes], found {} parts", parts.len()),
        ));
    }
    let columns: Vec<&[Value]> = parts
        .iter()
        .zip(["ids", "labels", "msgs", "codes"])
        .map(|(p, name)| as_seq(p).ok_or_else(|| err(path, format!("`{name}` is not a sequence"))))
        .collect::<Result<_>>()?;
    let n = columns[0].len();
    if let Some((i, _)) = columns.iter().enumerate().find(|(_, c)| c.len() != n) {
        return Err(err(
            path,
            format!(
                "column {} has {} entries but `ids` has {n}",
                ["ids", "labels", "msgs", "codes"][i],
                columns[i].len()
            ),
        ));
    }

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let id = match &columns[0][i] {
            Value::I64(v) => v.to_string(),
            other => as_text(other)
                .ok_or_else(|| err(path, format!("record {i}: commit id is not a string")))?,
        };
        let bad = |message: String| err(path, format!("record {i} ({id}): {message}"));
        let raw_label =
            as_label(&columns[1][i]).ok_or_else(|| bad("label is not an integer".into()))?;
        let label = Label::try_from(raw_label).map_err(bad)?;
        let message: Vec<String> = as_text(&columns[2][i])
            .ok_or_else(|| bad("message is not a string".into()))?
            .split_whitespace()
            .map(str::to_string)
            .collect();
        let files = as_seq(&columns[3][i]).ok_or_else(|| bad("code is not a file list".into()))?;
        let mut patches = Vec::with_capacity(files.len());
        for (f, file) in files.iter().enumerate() {
            let patch = convert_file(file).map_err(|m| bad(format!("file {f}: {m}")))?;
            if !patch.is_empty() {
                patches.push(patch);
            }
        }
        records.push(CommitRecord::new(id, label, message, patches));
    }
    Ok(records)
}

pub fn convert_legacy_file(path: impl AsRef<Path>) -> Result<Vec<CommitRecord>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    convert_legacy_bytes(path, &bytes)
}
