//! Adapter for language models running in a separate process.
//!
//! The child reads one request per line on stdin and answers with one line
//! on stdout:
//!
//! ```text
//! DIST <ctx ids>                ->  <p_0> <p_1> ... <p_{V-1}>
//! SCORE <ctx ids> | <resp ids>  ->  <logp_1> ... <logp_K>
//! ```
//!
//! Ids are space-separated decimal token ids of the shared vocabulary;
//! log-probabilities are natural logs. A reply starting with `ERR` is
//! reported as a process error.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use super::{LanguageModel, ProbDist, TokenId};
use crate::corpus::Tokenizer;
use crate::error::{Error, Result};

struct Channel {
    stdin: ChildStdin,
    replies: Receiver<std::io::Result<String>>,
    /// Set after a timeout: a late reply would be paired with the wrong request.
    desynced: bool,
}

pub struct ExternalLm {
    tokenizer: Tokenizer,
    timeout: Duration,
    channel: Mutex<Channel>,
    child: Mutex<Child>,
}

impl ExternalLm {
    pub fn spawn(program: &str, args: &[String], tokenizer: Tokenizer, timeout: Duration) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::ExternalProcess(format!("cannot start {program:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        Ok(Self {
            tokenizer,
            timeout,
            channel: Mutex::new(Channel {
                stdin,
                replies: rx,
                desynced: false,
            }),
            child: Mutex::new(child),
        })
    }

    fn request(&self, line: &str) -> Result<String> {
        let mut ch = self.channel.lock().expect("channel lock");
        if ch.desynced {
            return Err(Error::ExternalProcess("stream unusable after an earlier timeout".into()));
        }
        writeln!(ch.stdin, "{line}")
            .and_then(|_| ch.stdin.flush())
            .map_err(|e| Error::ExternalProcess(format!("write failed: {e}")))?;
        match ch.replies.recv_timeout(self.timeout) {
            Ok(Ok(reply)) => {
                if let Some(msg) = reply.strip_prefix("ERR") {
                    return Err(Error::ExternalProcess(msg.trim().to_string()));
                }
                Ok(reply)
            }
            Ok(Err(e)) => Err(Error::ExternalProcess(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                ch.desynced = true;
                Err(Error::ExternalTimeout(self.timeout))
            }
            Err(RecvTimeoutError::Disconnected) => Err(Error::ExternalProcess("process closed its output".into())),
        }
    }
}

fn join_ids(ids: &[TokenId]) -> String {
    ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_floats(reply: &str) -> Result<Vec<f64>> {
    reply
        .split_whitespace()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::ExternalMalformed(format!("not a number: {s:?}")))
        })
        .collect()
}

impl LanguageModel for ExternalLm {
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn next_token_dist(&self, context: &[TokenId]) -> Result<ProbDist> {
        let reply = self.request(&format!("DIST {}", join_ids(context)))?;
        let probs = parse_floats(&reply)?;
        let v = self.vocab_size();
        if probs.len() != v {
            return Err(Error::ExternalMalformed(format!(
                "expected {v} probabilities, got {}",
                probs.len()
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-3 {
            return Err(Error::ExternalMalformed(format!("probabilities sum to {sum}")));
        }
        ProbDist::from_weights(probs).map_err(|e| Error::ExternalMalformed(e.to_string()))
    }

    fn token_log_probs(&self, context: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>> {
        let reply = self.request(&format!("SCORE {} | {}", join_ids(context), join_ids(response)))?;
        let lps = parse_floats(&reply)?;
        if lps.len() != response.len() {
            return Err(Error::ExternalMalformed(format!(
                "expected {} log-probabilities, got {}",
                response.len(),
                lps.len()
            )));
        }
        if lps.iter().any(|lp| lp.is_nan() || *lp > 0.0) {
            return Err(Error::ExternalMalformed("log-probabilities must be <= 0".into()));
        }
        Ok(lps)
    }
}

impl Drop for ExternalLm {
    fn drop(&mut self) {
        if let Ok(mut child) = self.child.lock() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
