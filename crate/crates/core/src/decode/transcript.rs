//! Line-delimited decode transcripts:
//!
//! ```text
//! {"t":0,"kind":"vocab","id":2,"logit_top5":[{"index":2,"logit":3.1},...]}
//! {"t":1,"kind":"ptr","id":6,"logit_top5":[...]}
//! ```
//!
//! `index` in `logit_top5` is global: patches follow the vocabulary.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::top_k_indices;
use crate::pointer::{AugLogits, AugToken};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopLogit {
    pub index: usize,
    pub logit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub t: usize,
    pub kind: String,
    pub id: u32,
    pub logit_top5: Vec<TopLogit>,
}

/// Entry for token `tok` chosen at step `t`. Masked logits are left out of
/// the top five.
pub fn transcript_entry(t: usize, tok: AugToken, logits: &AugLogits) -> TranscriptEntry {
    let all = logits.concat();
    let (kind, id) = match tok {
        AugToken::Vocab(id) => ("vocab", id),
        AugToken::Ptr(k) => ("ptr", k),
    };
    TranscriptEntry {
        t,
        kind: kind.into(),
        id,
        logit_top5: top_k_indices(&all, 5)
            .into_iter()
            .filter(|&i| all[i].is_finite())
            .map(|i| TopLogit {
                index: i,
                logit: all[i],
            })
            .collect(),
    }
}

pub fn write_transcript<W: Write>(mut w: W, entries: &[TranscriptEntry]) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut w, e).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entry_layout() {
        let l = AugLogits::new(vec![0.5, 2.0, -1.0], vec![3.0, f64::NEG_INFINITY]);
        let e = transcript_entry(4, AugToken::Ptr(0), &l);
        let idx: Vec<usize> = e.logit_top5.iter().map(|x| x.index).collect();
        assert_eq!(idx, vec![3, 1, 0, 2]);
        let mut buf = Vec::new();
        write_transcript(&mut buf, &[e]).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert!(line.starts_with(r#"{"t":4,"kind":"ptr","id":0,"logit_top5":[{"index":3,"logit":3.0}"#));
        assert!(line.ends_with("}\n"));
    }
}
