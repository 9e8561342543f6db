//! NLI oracle backed by an external process.
//!
//! Each request is one line `utterance<TAB>sentence`; the process answers
//! with one line holding `+1`, `0` or `-1`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use aop_core::metrics::{Nli, NliOracle};

use crate::error::{Error, Result};

pub struct ProcessOracle {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    requests: usize,
}

impl ProcessOracle {
    /// Starts `program` with `args`, talking over its stdin and stdout.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|source| Error::Io { path: program.into(), source })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(ProcessOracle { child, stdin, stdout, requests: 0 })
    }

    fn ask(&mut self, utterance: &[String], sentence: &[String]) -> std::result::Result<Nli, String> {
        self.requests += 1;
        let clean = |t: &[String]| t.join(" ").replace(['\t', '\n', '\r'], " ");
        writeln!(self.stdin, "{}\t{}", clean(utterance), clean(sentence)).map_err(|e| e.to_string())?;
        self.stdin.flush().map_err(|e| e.to_string())?;
        let mut line = String::new();
        if self.stdout.read_line(&mut line).map_err(|e| e.to_string())? == 0 {
            return Err("oracle closed its output".into());
        }
        parse_judgment(&line).ok_or_else(|| format!("bad oracle answer `{}`", line.trim()))
    }
}

pub fn parse_judgment(line: &str) -> Option<Nli> {
    match line.trim() {
        "+1" | "1" => Some(Nli::Entail),
        "0" => Some(Nli::Independent),
        "-1" => Some(Nli::Contradict),
        _ => None,
    }
}

impl NliOracle for ProcessOracle {
    fn judge(&mut self, utterance: &[String], sentence: &[String]) -> aop_core::error::Result<Nli> {
        self.ask(utterance, sentence).map_err(|detail| aop_core::error::Error::Parse { line: self.requests, detail })
    }
}

impl Drop for ProcessOracle {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn judgments() {
        assert_eq!(parse_judgment("+1\n"), Some(Nli::Entail));
        assert_eq!(parse_judgment(" 0 "), Some(Nli::Independent));
        assert_eq!(parse_judgment("-1"), Some(Nli::Contradict));
        assert_eq!(parse_judgment("2"), None);
    }
}
