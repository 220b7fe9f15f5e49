//! JSON-Lines trace files and profile sidecars.
//!
//! Trace line: `{"exec":"<id>","values":{"<dim>":<number|[numbers]>}}`.
//! Profile line: `{"id":..,"subject":..,"dims":[{"name","kind","source","type"}]}`.
//! Integral values are written as JSON integers, everything else in the
//! shortest round-tripping float form, so reading back is lossless.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::ser::{SerializeMap, SerializeSeq};
use serde::{Deserialize, Serialize, Serializer};

use super::{ExecutableProfile, RawTraceEvent, TraceValue};
use crate::error::{Error, Result};

const MAX_EXACT_INT: f64 = 9_007_199_254_740_992.0; // 2^53

struct Num(f64);

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let v = self.0;
        if v.fract() == 0.0 && v.abs() < MAX_EXACT_INT && !(v == 0.0 && v.is_sign_negative()) {
            s.serialize_i64(v as i64)
        } else {
            s.serialize_f64(v)
        }
    }
}

struct ValueOut<'a>(&'a TraceValue);

impl Serialize for ValueOut<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            TraceValue::Scalar(v) => Num(*v).serialize(s),
            TraceValue::List(vs) => {
                let mut seq = s.serialize_seq(Some(vs.len()))?;
                for v in vs {
                    seq.serialize_element(&Num(*v))?;
                }
                seq.end()
            }
        }
    }
}

struct ValuesOut<'a>(&'a BTreeMap<String, TraceValue>);

impl Serialize for ValuesOut<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in self.0 {
            m.serialize_entry(k, &ValueOut(v))?;
        }
        m.end()
    }
}

#[derive(Serialize)]
struct EventOut<'a> {
    exec: &'a str,
    values: ValuesOut<'a>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ValueIn {
    Scalar(f64),
    List(Vec<f64>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EventIn {
    exec: String,
    values: BTreeMap<String, ValueIn>,
}

/// Streaming writer; one event per line.
pub struct TraceWriter<W: Write> {
    out: W,
}

impl TraceWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(BufWriter::new(f)))
    }
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, event: &RawTraceEvent) -> Result<()> {
        if let Some((k, _)) = event
            .values
            .iter()
            .find(|(_, v)| v.values().iter().any(|x| !x.is_finite()))
        {
            return Err(Error::NonFinite(format!(
                "writing `{}` dimension `{k}`",
                event.exec
            )));
        }
        let line = EventOut {
            exec: &event.exec,
            values: ValuesOut(&event.values),
        };
        serde_json::to_writer(&mut self.out, &line)?;
        self.out
            .write_all(b"\n")
            .map_err(|e| Error::io("<trace stream>", e))
    }

    pub fn finish(mut self) -> Result<W> {
        self.out
            .flush()
            .map_err(|e| Error::io("<trace stream>", e))?;
        Ok(self.out)
    }
}

/// Streaming reader validating each event against the known profiles.
pub struct TraceReader<R: BufRead> {
    input: R,
    path: String,
    line_no: usize,
    buf: String,
    profiles: HashMap<String, ExecutableProfile>,
}

impl TraceReader<BufReader<File>> {
    pub fn open(path: &Path, profiles: &[ExecutableProfile]) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(
            BufReader::new(f),
            &path.display().to_string(),
            profiles,
        ))
    }
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(input: R, path: &str, profiles: &[ExecutableProfile]) -> Self {
        Self {
            input,
            path: path.to_string(),
            line_no: 0,
            buf: String::new(),
            profiles: profiles.iter().map(|p| (p.id.clone(), p.clone())).collect(),
        }
    }

    fn malformed(&self, reason: impl ToString) -> Error {
        Error::MalformedLine {
            path: self.path.clone(),
            line: self.line_no,
            reason: reason.to_string(),
        }
    }

    fn parse_line(&self) -> Result<RawTraceEvent> {
        let raw: EventIn = serde_json::from_str(&self.buf).map_err(|e| self.malformed(e))?;
        let profile = self
            .profiles
            .get(&raw.exec)
            .ok_or_else(|| Error::UnknownExecutable(raw.exec.clone()))?;
        let event = RawTraceEvent {
            exec: raw.exec,
            values: raw
                .values
                .into_iter()
                .map(|(k, v)| {
                    let v = match v {
                        ValueIn::Scalar(x) => TraceValue::Scalar(x),
                        ValueIn::List(xs) => TraceValue::List(xs),
                    };
                    (k, v)
                })
                .collect(),
        };
        event.check(profile)?;
        Ok(event)
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<RawTraceEvent>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            self.line_no += 1;
            match self.input.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {
                    if self.buf.trim().is_empty() {
                        continue;
                    }
                    return Some(self.parse_line());
                }
                Err(e) => return Some(Err(Error::io(PathBuf::from(&self.path), e))),
            }
        }
    }
}

pub fn write_traces<'a>(
    path: &Path,
    events: impl IntoIterator<Item = &'a RawTraceEvent>,
) -> Result<()> {
    let mut w = TraceWriter::create(path)?;
    for e in events {
        w.write(e)?;
    }
    w.finish().map(|_| ())
}

pub fn read_traces(path: &Path, profiles: &[ExecutableProfile]) -> Result<Vec<RawTraceEvent>> {
    TraceReader::open(path, profiles)?.collect()
}

pub fn write_profiles(path: &Path, profiles: &[ExecutableProfile]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for p in profiles {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_profiles(path: &Path) -> Result<Vec<ExecutableProfile>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: ExecutableProfile =
            serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        p.validate()?;
        out.push(p);
    }
    Ok(out)
}
