//! On-disk formats. Every file carries a format name and version.
//!
//! JSON documents are wrapped as `{"format": ..., "version": ..., "payload": ...}`.
//! JSON-lines files start with a header line `{"format": ..., "version": ...}`
//! followed by one record per line. Floats are written in shortest
//! round-trip form, so save/load is exact.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CongradError, Result};
use crate::grad_store::LanguageGradientStore;
use crate::preference::ToyPolicy;
use crate::selfloop::RoundState;

pub const FORMAT_VERSION: u32 = 1;

pub const PROMPTS: &str = "congrad.prompts";
pub const HELDOUT: &str = "congrad.heldout";
pub const PAIRS: &str = "congrad.pairs";
pub const FILTER_REPORT: &str = "congrad.filter-report";
pub const CONFLICTS: &str = "congrad.conflicts";
pub const METRICS: &str = "congrad.metrics";
pub const CHECKPOINT: &str = "congrad.checkpoint";
pub const POLICY: &str = "congrad.policy";
pub const GRAD_STORE: &str = "congrad.grad-store";
pub const ROUND_SUMMARY: &str = "congrad.round-summary";
pub const REPORT: &str = "congrad.report";
pub const MANIFEST: &str = "congrad.manifest";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize)]
struct EnvelopeRef<'a, T> {
    format: &'a str,
    version: u32,
    payload: &'a T,
}

#[derive(Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    payload: T,
}

fn check_header(path: &Path, line: usize, format: &str, version: u32, expected: &str) -> Result<()> {
    if format != expected {
        return Err(CongradError::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("expected format `{expected}`, found `{format}`"),
        });
    }
    if version != FORMAT_VERSION {
        return Err(CongradError::Format(format!(
            "{}: `{format}` version {version} is not supported (expected {FORMAT_VERSION})",
            path.display()
        )));
    }
    Ok(())
}

pub fn to_json_string<T: Serialize>(format: &str, payload: &T) -> String {
    serde_json::to_string(&EnvelopeRef {
        format,
        version: FORMAT_VERSION,
        payload,
    })
    .expect("payload serializes")
}

pub fn from_json_str<T: DeserializeOwned>(path: &Path, format: &str, text: &str) -> Result<T> {
    let env: Envelope<T> = serde_json::from_str(text).map_err(|e| CongradError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    check_header(path, 1, &env.format, env.version, format)?;
    Ok(env.payload)
}

pub fn write_json<T: Serialize>(path: &Path, format: &str, payload: &T) -> Result<()> {
    let mut text = to_json_string(format, payload);
    text.push('\n');
    fs::write(path, text).map_err(|e| CongradError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path, format: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CongradError::io(path, e))?;
    from_json_str(path, format, &text)
}

pub fn write_jsonl<T: Serialize>(path: &Path, format: &str, records: &[T]) -> Result<()> {
    let mut out = String::new();
    out.push_str(
        &serde_json::to_string(&Header {
            format: format.to_string(),
            version: FORMAT_VERSION,
        })
        .expect("header serializes"),
    );
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| CongradError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| CongradError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, format: &str) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| CongradError::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let parse_err = |line: usize, message: String| CongradError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header = match lines.next() {
        Some(l) => l.map_err(|e| CongradError::io(path, e))?,
        None => return Err(parse_err(1, "missing format header".into())),
    };
    let header: Header = serde_json::from_str(&header).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    check_header(path, 1, &header.format, header.version, format)?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| CongradError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e.to_string()))?);
    }
    Ok(out)
}

pub fn save_policy(path: &Path, policy: &ToyPolicy) -> Result<()> {
    write_json(path, POLICY, policy)
}

pub fn load_policy(path: &Path) -> Result<ToyPolicy> {
    let p: ToyPolicy = read_json(path, POLICY)?;
    // re-validate shapes
    ToyPolicy::from_params(p.max_len(), p.first_token().clone(), p.bigram().clone())
}

pub fn save_store(path: &Path, store: &LanguageGradientStore) -> Result<()> {
    write_json(path, GRAD_STORE, store)
}

pub fn load_store(path: &Path) -> Result<LanguageGradientStore> {
    read_json(path, GRAD_STORE)
}

/// State after a completed round together with the config that produced it.
/// `output_dir` is cleared so checkpoints do not depend on where a run lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub state: RoundState,
}

impl Checkpoint {
    pub fn new(config: &ExperimentConfig, state: RoundState) -> Self {
        Self {
            config: portable_config(config),
            state,
        }
    }

    /// True when `config` matches the stored one apart from `output_dir`.
    pub fn matches(&self, config: &ExperimentConfig) -> bool {
        self.config == portable_config(config)
    }
}

pub fn portable_config(config: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        output_dir: Default::default(),
        ..config.clone()
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_json(path, CHECKPOINT, checkpoint)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_json(path, CHECKPOINT)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad_store::{EmaConfig, SyntheticGradientStream};

    #[test]
    fn policy_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = ToyPolicy::random(3, 5, 4, 1.7, 99).unwrap();
        save_policy(&path, &p).unwrap();
        let q = load_policy(&path).unwrap();
        assert_eq!(p, q);
        for (a, b) in p.flat_params().as_slice().iter().zip(q.flat_params().as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn store_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        let mut s = LanguageGradientStore::new(
            "fr",
            &[(9, 7), (1, 4)],
            EmaConfig {
                rank: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let mut a = SyntheticGradientStream::new(9, 7, 1);
        let mut b = SyntheticGradientStream::new(1, 4, 2);
        for _ in 0..3 {
            s.ema_update(&[a.next().unwrap(), b.next().unwrap()]).unwrap();
        }
        save_store(&path, &s).unwrap();
        let t = load_store(&path).unwrap();
        assert_eq!(s, t);
        assert_eq!(s.snapshot().unwrap(), t.snapshot().unwrap());
    }

    #[test]
    fn wrong_format_or_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        save_policy(&path, &ToyPolicy::uniform(1, 2, 2).unwrap()).unwrap();
        assert!(read_json::<ToyPolicy>(&path, GRAD_STORE).is_err());
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"version\":1", "\"version\":9");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_policy(&path), Err(CongradError::Format(_))));
    }

    #[test]
    fn jsonl_parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_jsonl(&path, METRICS, &[1u32, 2, 3]).unwrap();
        assert_eq!(read_jsonl::<u32>(&path, METRICS).unwrap(), vec![1, 2, 3]);
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{oops\n");
        fs::write(&path, text).unwrap();
        match read_jsonl::<u32>(&path, METRICS) {
            Err(CongradError::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        fs::write(&path, "").unwrap();
        assert!(read_jsonl::<u32>(&path, METRICS).is_err());
    }
}
