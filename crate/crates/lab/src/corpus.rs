//! Token-id corpus files: one sequence per line, ids separated by
//! whitespace, blank lines ignored. A line may start with `offset N :`
//! giving the first position that enters a calibration loss.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{LabError, LabResult};
use crate::io::{read_text, write_atomic};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusLine {
    /// 1-based line number in the source file.
    pub line: usize,
    pub tokens: Vec<u32>,
    pub offset: Option<usize>,
}

pub fn parse_corpus(text: &str) -> Result<Vec<CorpusLine>, (usize, String)> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let mut body = raw.trim();
        if body.is_empty() {
            continue;
        }
        let mut offset = None;
        if let Some(rest) = body.strip_prefix("offset") {
            let (n, tail) = rest
                .split_once(':')
                .ok_or((line, "expected `offset N :` before the token ids".to_string()))?;
            let n = n.trim();
            offset = Some(n.parse().map_err(|_| (line, format!("bad offset {n:?}")))?);
            body = tail.trim();
        }
        let tokens = body
            .split_whitespace()
            .map(|t| t.parse::<u32>().map_err(|_| (line, format!("bad token id {t:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if tokens.is_empty() {
            return Err((line, "no token ids".into()));
        }
        out.push(CorpusLine { line, tokens, offset });
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> LabResult<Vec<CorpusLine>> {
    let lines = parse_corpus(&read_text(path)?).map_err(|(line, msg)| LabError::Corpus {
        path: path.to_path_buf(),
        line,
        msg,
    })?;
    if lines.is_empty() {
        return Err(LabError::Corpus {
            path: path.to_path_buf(),
            line: 0,
            msg: "no sequences".into(),
        });
    }
    Ok(lines)
}

/// Checks every id against the vocabulary, reporting the line.
pub fn check_vocab(path: &Path, lines: &[CorpusLine], vocab_size: usize) -> LabResult<()> {
    for l in lines {
        if let Some(t) = l.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(LabError::Corpus {
                path: path.to_path_buf(),
                line: l.line,
                msg: format!("token id {t} outside vocabulary of {vocab_size}"),
            });
        }
    }
    Ok(())
}

pub fn format_corpus(seqs: &[Vec<u32>]) -> String {
    let mut s = String::new();
    for seq in seqs {
        for (i, t) in seq.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            write!(s, "{t}").expect("String write");
        }
        s.push('\n');
    }
    s
}

pub fn save_corpus(path: &Path, seqs: &[Vec<u32>]) -> LabResult<()> {
    write_atomic(path, format_corpus(seqs).as_bytes())
}
