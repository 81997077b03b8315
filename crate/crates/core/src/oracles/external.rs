//! JSON-lines scoring protocol over a child process's standard streams.
//!
//! Requests are `{"id": int, "smiles": string}`, responses
//! `{"id": int, "score": number}` in any order. Standard input is closed
//! after the last request.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use limo_chem::{to_smiles, MolGraph};
use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Direction, ItemScore, PropertyOracle};
use crate::error::{LimoError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalConfig {
    pub name: String,
    /// Program followed by its arguments.
    pub command: Vec<String>,
    pub direction: Direction,
    pub timeout_secs: f64,
    pub in_flight: usize,
}

impl ExternalConfig {
    pub fn new(name: impl Into<String>, command: Vec<String>) -> Self {
        ExternalConfig {
            name: name.into(),
            command,
            direction: Direction::Minimize,
            timeout_secs: 30.0,
            in_flight: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExternalOracle {
    config: ExternalConfig,
}

#[derive(Serialize)]
struct Request<'a> {
    id: usize,
    smiles: &'a str,
}

/// Parses one response line into `(id, score)`; the score side is an error
/// when only the id could be recovered.
fn parse_response(line: &str) -> Option<(usize, ItemScore)> {
    let v: Value = serde_json::from_str(line).ok()?;
    let id = usize::try_from(v.get("id")?.as_u64()?).ok()?;
    let score = match v.get("score").and_then(Value::as_f64) {
        Some(s) if s.is_finite() => Ok(s),
        _ => Err(format!("malformed response: {line}")),
    };
    Some((id, score))
}

struct Session {
    child: Child,
    stdin: Option<ChildStdin>,
}

impl Drop for Session {
    fn drop(&mut self) {
        self.stdin.take();
        if let Ok(None) = self.child.try_wait() {
            let _ = self.child.kill();
        }
        let _ = self.child.wait();
    }
}

impl ExternalOracle {
    pub fn new(config: ExternalConfig) -> Result<Self> {
        if config.command.is_empty() {
            return Err(LimoError::InvalidInput(
                "external oracle command is empty".into(),
            ));
        }
        if config.in_flight == 0 || !(config.timeout_secs > 0.0) {
            return Err(LimoError::InvalidInput(
                "oracle in_flight and timeout must be positive".into(),
            ));
        }
        Ok(ExternalOracle { config })
    }

    pub fn config(&self) -> &ExternalConfig {
        &self.config
    }

    fn spawn(&self) -> Result<(Session, mpsc::Receiver<(usize, ItemScore)>)> {
        let mut child = Command::new(&self.config.command[0])
            .args(&self.config.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| {
                LimoError::Oracle(format!("cannot start {:?}: {e}", self.config.command[0]))
            })?;
        let stdout = child.stdout.take().expect("piped stdout");
        let stdin = child.stdin.take();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if line.trim().is_empty() {
                    continue;
                }
                match parse_response(&line) {
                    Some(item) => {
                        if tx.send(item).is_err() {
                            break;
                        }
                    }
                    None => warn!("unattributable oracle output: {line}"),
                }
            }
        });
        Ok((Session { child, stdin }, rx))
    }
}

impl PropertyOracle for ExternalOracle {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn direction(&self) -> Direction {
        self.config.direction
    }

    fn score_batch(&self, mols: &[MolGraph]) -> Result<Vec<ItemScore>> {
        let mut results: Vec<Option<ItemScore>> = vec![None; mols.len()];
        if mols.is_empty() {
            return Ok(Vec::new());
        }
        let (mut session, rx) = self.spawn()?;
        let timeout = Duration::from_secs_f64(self.config.timeout_secs);
        let mut pending: BTreeMap<usize, Instant> = BTreeMap::new();
        let mut next = 0;
        let mut done = 0;
        while done < mols.len() {
            while pending.len() < self.config.in_flight && next < mols.len() {
                let line = serde_json::to_string(&Request {
                    id: next,
                    smiles: &to_smiles(&mols[next]),
                })
                .expect("plain request serializes");
                let sent = session
                    .stdin
                    .as_mut()
                    .map(|w| writeln!(w, "{line}").and_then(|_| w.flush()).is_ok())
                    .unwrap_or(false);
                if sent {
                    pending.insert(next, Instant::now() + timeout);
                } else {
                    results[next] = Some(Err("oracle process stopped reading".into()));
                    done += 1;
                }
                next += 1;
            }
            if next == mols.len() {
                session.stdin.take();
            }
            let Some(&deadline) = pending.values().min() else {
                continue;
            };
            match rx.recv_timeout(deadline.saturating_duration_since(Instant::now())) {
                Ok((id, score)) => {
                    if pending.remove(&id).is_some() {
                        results[id] = Some(score);
                        done += 1;
                    }
                }
                Err(RecvTimeoutError::Timeout) => {
                    let now = Instant::now();
                    let expired: Vec<usize> = pending
                        .iter()
                        .filter(|(_, &d)| d <= now)
                        .map(|(&id, _)| id)
                        .collect();
                    for id in expired {
                        pending.remove(&id);
                        results[id] = Some(Err("timed out".into()));
                        done += 1;
                    }
                }
                Err(RecvTimeoutError::Disconnected) => {
                    for (id, _) in std::mem::take(&mut pending) {
                        results[id] = Some(Err("no response".into()));
                        done += 1;
                    }
                }
            }
        }
        Ok(results
            .into_iter()
            .map(|r| r.expect("every id resolved"))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_parsing() {
        assert_eq!(
            parse_response(r#"{"id": 3, "score": -1.5}"#),
            Some((3, Ok(-1.5)))
        );
        assert!(matches!(
            parse_response(r#"{"id": 4, "score": "x"}"#),
            Some((4, Err(_)))
        ));
        assert_eq!(parse_response("garbage"), None);
        assert_eq!(parse_response(r#"{"score": 1.0}"#), None);
    }

    #[test]
    fn spawn_failure_is_a_batch_error() {
        let oracle =
            ExternalOracle::new(ExternalConfig::new("x", vec!["/nonexistent/oracle".into()]))
                .unwrap();
        let mut g = MolGraph::new();
        g.add_atom(limo_chem::Element::C);
        assert!(oracle.score_batch(&[g]).is_err());
    }
}
