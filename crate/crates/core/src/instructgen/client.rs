use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;

/// Text generation backend. Must be deterministic for a fixed
/// `(prompt, seed)`.
pub trait TextGenClient {
    fn generate(&self, prompt: &str, seed: u64) -> Result<String, String>;
}

/// Hermetic client that answers from the prompt's own metadata block.
///
/// Query prompts get `Query: [same kind of image but <target caption>]`;
/// attribute prompts get the first target label absent from the source.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockClient;

/// Raw (still escaped) content of `FIELD [...]` in a metadata line.
fn raw_field<'a>(line: &'a str, field: &str) -> Option<&'a str> {
    let start = line.find(&format!("{field} ["))? + field.len() + 2;
    let mut escaped = false;
    for (i, c) in line[start..].char_indices() {
        match (escaped, c) {
            (true, _) => escaped = false,
            (false, '\\') => escaped = true,
            (false, ']') => return Some(&line[start..start + i]),
            _ => {}
        }
    }
    None
}

/// Splits escaped text on unescaped `sep`, unescaping each part.
fn split_unescape(raw: &str, sep: Option<char>) -> Vec<String> {
    let mut parts = vec![String::new()];
    let mut escaped = false;
    for c in raw.chars() {
        match (escaped, c) {
            (true, c) => {
                parts.last_mut().expect("nonempty").push(c);
                escaped = false;
            }
            (false, '\\') => escaped = true,
            (false, c) if Some(c) == sep => parts.push(String::new()),
            (false, c) => parts.last_mut().expect("nonempty").push(c),
        }
    }
    parts
}

fn bracket_field(line: &str, field: &str) -> Option<String> {
    raw_field(line, field).map(|r| split_unescape(r, None).remove(0))
}

fn labels_field(line: &str) -> Vec<String> {
    raw_field(line, "TEXT_LABEL")
        .map(|r| {
            split_unescape(r, Some(','))
                .into_iter()
                .map(|s| s.trim_start().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        })
        .unwrap_or_default()
}

impl TextGenClient for MockClient {
    fn generate(&self, prompt: &str, _seed: u64) -> Result<String, String> {
        let last = |prefix: &str| {
            prompt
                .lines()
                .rev()
                .find(|l| l.starts_with(prefix))
                .ok_or_else(|| format!("prompt has no `{prefix}` line"))
        };
        let target = last("Target Image:")?;
        if prompt.trim_end().ends_with("Attribute:") {
            let source = last("Source Image:")?;
            let src = labels_field(source);
            let tgt = labels_field(target);
            let attr = tgt
                .into_iter()
                .find(|l| !src.contains(l))
                .or_else(|| bracket_field(target, "CAPTION"))
                .unwrap_or_default();
            Ok(format!("Attribute: [{attr}]"))
        } else {
            let caption = bracket_field(target, "CAPTION").unwrap_or_default();
            Ok(format!(
                "Think: the target image differs from the source image.\nQuery: [same kind of image but {caption}]"
            ))
        }
    }
}

pub fn prompt_key(prompt: &str) -> String {
    Sha256::digest(prompt.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// One recorded response, keyed by the SHA-256 of the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub prompt_sha256: String,
    pub response: String,
}

/// Replays responses recorded from any external model.
#[derive(Debug, Clone, Default)]
pub struct ReplayClient {
    responses: HashMap<String, String>,
}

impl ReplayClient {
    pub fn from_entries(entries: Vec<ReplayEntry>) -> Self {
        ReplayClient {
            responses: entries.into_iter().map(|e| (e.prompt_sha256, e.response)).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_entries(io::read_jsonl(path)?))
    }
}

impl TextGenClient for ReplayClient {
    fn generate(&self, prompt: &str, _seed: u64) -> Result<String, String> {
        let key = prompt_key(prompt);
        self.responses
            .get(&key)
            .cloned()
            .ok_or_else(|| format!("no recorded response for prompt {key}"))
    }
}

/// Runs `sh -c <command>` per prompt: the prompt goes to stdin, the raw
/// response is read from stdout, and the seed is exported as
/// `CIRKIT_GEN_SEED`.
#[derive(Debug, Clone)]
pub struct CommandClient {
    pub command: String,
}

impl CommandClient {
    pub fn new(command: impl Into<String>) -> Result<Self> {
        let command = command.into();
        if command.trim().is_empty() {
            return Err(Error::config("external-command client needs a command"));
        }
        Ok(CommandClient { command })
    }
}

impl TextGenClient for CommandClient {
    fn generate(&self, prompt: &str, seed: u64) -> Result<String, String> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .env("CIRKIT_GEN_SEED", seed.to_string())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| format!("spawn `{}`: {e}", self.command))?;
        {
            let mut stdin = child.stdin.take().expect("stdin is piped");
            stdin
                .write_all(prompt.as_bytes())
                .map_err(|e| format!("write prompt: {e}"))?;
        }
        let out = child.wait_with_output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("`{}` exited with {}", self.command, out.status));
        }
        String::from_utf8(out.stdout).map_err(|e| e.to_string())
    }
}
