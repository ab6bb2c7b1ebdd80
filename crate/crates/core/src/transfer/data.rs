use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    #[default]
    Original,
    Augmented,
}

/// A sentence with a binary sentiment label (0 negative, 1 positive).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub label: u8,
    #[serde(default)]
    pub origin: Origin,
}

impl LabeledExample {
    pub fn new(text: impl Into<String>, label: u8) -> Self {
        LabeledExample { text: text.into(), label, origin: Origin::Original }
    }
}

/// One JSON object per line; blank lines are skipped.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: LabeledExample =
            serde_json::from_str(&line).map_err(|err| Error::format("dataset", format!("line {}: {err}", n + 1)))?;
        if e.label > 1 {
            return Err(Error::format("dataset", format!("line {}: label {} is not 0 or 1", n + 1, e.label)));
        }
        out.push(e);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(data: &[LabeledExample], mut w: W) -> Result<()> {
    for e in data {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_optional() {
        let data = read_jsonl(
            &b"{\"text\": \"a b\", \"label\": 1}\n\n{\"text\":\"c\",\"label\":0,\"origin\":\"augmented\"}\n"[..],
        )
        .unwrap();
        assert_eq!(data[0], LabeledExample::new("a b", 1));
        assert_eq!(data[1].origin, Origin::Augmented);
        let mut buf = Vec::new();
        write_jsonl(&data, &mut buf).unwrap();
        assert_eq!(read_jsonl(&buf[..]).unwrap(), data);
    }

    #[test]
    fn rejects_bad_labels() {
        assert!(read_jsonl(&b"{\"text\": \"a\", \"label\": 2}"[..]).is_err());
        assert!(read_jsonl(&b"{\"text\": \"a\"}"[..]).is_err());
    }
}
