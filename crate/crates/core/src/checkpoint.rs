//! Text checkpoint format for [`PolicyTable`].
//!
//! ```text
//! squeezelab-policy v1 vocab=<V> max_len=<T> [terminator=<id>]
//! <prompt_id> <t1,t2,...|-> <logit_0> ... <logit_{V-1}>
//! ```
//!
//! One line per stored prefix in sorted order, `-` for the empty prefix.
//! Logits use Rust's shortest round-trip float formatting, so a load gives
//! back the exact bit patterns.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::policy::{PolicyTable, Prefix, Vocab};

const MAGIC: &str = "squeezelab-policy";
const VERSION: &str = "v1";

pub fn to_string(policy: &PolicyTable) -> String {
    let vocab = policy.vocab();
    let mut out = format!("{MAGIC} {VERSION} vocab={} max_len={}", vocab.size(), policy.max_len());
    if let Some(t) = vocab.terminator() {
        let _ = write!(out, " terminator={t}");
    }
    out.push('\n');
    for (prefix, logits) in policy.iter_stored() {
        let _ = write!(out, "{} ", prefix.prompt_id);
        if prefix.tokens.is_empty() {
            out.push('-');
        } else {
            let toks: Vec<String> = prefix.tokens.iter().map(|t| t.to_string()).collect();
            out.push_str(&toks.join(","));
        }
        for z in logits {
            let _ = write!(out, " {z:?}");
        }
        out.push('\n');
    }
    out
}

fn corrupt(line: usize, reason: impl Into<String>) -> Error {
    Error::CheckpointCorrupt {
        line,
        reason: reason.into(),
    }
}

fn header_field<'a>(field: Option<&'a str>, key: &str) -> Result<&'a str> {
    field
        .and_then(|f| f.strip_prefix(key))
        .and_then(|f| f.strip_prefix('='))
        .ok_or_else(|| corrupt(1, format!("missing `{key}=` in header")))
}

pub fn from_str(text: &str) -> Result<PolicyTable> {
    let mut lines = text.split('\n');
    let header = lines.next().unwrap_or_default();
    let mut fields = header.split(' ');
    if fields.next() != Some(MAGIC) || fields.next() != Some(VERSION) {
        return Err(corrupt(1, format!("expected `{MAGIC} {VERSION}` header")));
    }
    let size: usize = header_field(fields.next(), "vocab")?
        .parse()
        .map_err(|_| corrupt(1, "bad vocab size"))?;
    let max_len: usize = header_field(fields.next(), "max_len")?
        .parse()
        .map_err(|_| corrupt(1, "bad max_len"))?;
    let vocab = match fields.next() {
        Some(f) => {
            let t = header_field(Some(f), "terminator")?
                .parse()
                .map_err(|_| corrupt(1, "bad terminator"))?;
            Vocab::with_terminator(size, t).map_err(|e| corrupt(1, e.to_string()))?
        }
        None => Vocab::new(size).map_err(|e| corrupt(1, e.to_string()))?,
    };
    if fields.next().is_some() {
        return Err(corrupt(1, "trailing header fields"));
    }
    let mut policy = PolicyTable::new(vocab, max_len).map_err(|e| corrupt(1, e.to_string()))?;

    let mut last: Option<Prefix> = None;
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let prompt_id: u32 = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| corrupt(lineno, "bad prompt id"))?;
        let toks = parts.next().ok_or_else(|| corrupt(lineno, "missing prefix"))?;
        let tokens = if toks == "-" {
            Vec::new()
        } else {
            toks.split(',')
                .map(|t| t.parse().map_err(|_| corrupt(lineno, format!("bad token `{t}`"))))
                .collect::<Result<Vec<_>>>()?
        };
        let logits = parts
            .map(|z| {
                z.parse::<f64>()
                    .map_err(|_| corrupt(lineno, format!("bad logit `{z}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if logits.len() != size {
            return Err(corrupt(
                lineno,
                format!("{} logits but header says vocab={size}", logits.len()),
            ));
        }
        let prefix = Prefix::new(prompt_id, tokens);
        if last.as_ref().is_some_and(|l| *l >= prefix) {
            return Err(corrupt(lineno, "prefixes out of order or duplicated"));
        }
        last = Some(prefix.clone());
        policy
            .set_logits(prefix, logits)
            .map_err(|e| corrupt(lineno, e.to_string()))?;
    }
    Ok(policy)
}

pub fn save_checkpoint(policy: &PolicyTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_string(policy)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<PolicyTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text)
}
