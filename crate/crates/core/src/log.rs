//! JSON-lines persistence of tracking events.
//!
//! Floats are written in shortest round-trip form, so parsing a record gives
//! back bit-identical values. Non-finite floats are written as the strings
//! `"NaN"`, `"Infinity"` and `"-Infinity"`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantities::Reading;

/// One tracking event: an iteration, its wall-clock offset and the readings taken.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackEvent {
    pub iteration: u64,
    #[serde(with = "float")]
    pub time_s: f64,
    pub quantities: BTreeMap<String, Reading>,
}

impl TrackEvent {
    pub fn new(iteration: u64, time_s: f64) -> Self {
        Self {
            iteration,
            time_s,
            quantities: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, reading: Reading) {
        self.quantities.insert(name.into(), reading);
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.quantities.get(name)?.value.as_scalar()
    }
}

pub fn to_line(event: &TrackEvent) -> Result<String> {
    serde_json::to_string(event).map_err(|e| Error::Numeric(e.to_string()))
}

pub fn from_line(line: &str, line_number: usize) -> Result<TrackEvent> {
    serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_number,
        msg: e.to_string(),
    })
}

/// Writes one event per line, flushing after each so a crash leaves whole records.
pub struct LogWriter<W: Write> {
    inner: W,
    written: usize,
}

impl<W: Write> LogWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner, written: 0 }
    }

    pub fn write(&mut self, event: &TrackEvent) -> Result<()> {
        let mut line = to_line(event)?;
        line.push('\n');
        self.inner.write_all(line.as_bytes())?;
        self.inner.flush()?;
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> usize {
        self.written
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Parses a whole log; blank lines are ignored and errors carry 1-based line numbers.
pub fn read_log<R: BufRead>(reader: R) -> Result<Vec<TrackEvent>> {
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(from_line(&line, i + 1)?);
    }
    Ok(events)
}

pub fn write_log<W: Write>(out: W, events: &[TrackEvent]) -> Result<()> {
    let mut writer = LogWriter::new(out);
    for e in events {
        writer.write(e)?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Repr<'a> {
    Number(f64),
    Text(#[serde(borrow)] std::borrow::Cow<'a, str>),
}

fn to_repr(v: f64) -> Repr<'static> {
    if v.is_finite() {
        Repr::Number(v)
    } else if v.is_nan() {
        Repr::Text("NaN".into())
    } else if v > 0.0 {
        Repr::Text("Infinity".into())
    } else {
        Repr::Text("-Infinity".into())
    }
}

fn from_repr<E: serde::de::Error>(r: Repr<'_>) -> std::result::Result<f64, E> {
    match r {
        Repr::Number(v) => Ok(v),
        Repr::Text(s) => match s.as_ref() {
            "NaN" => Ok(f64::NAN),
            "Infinity" => Ok(f64::INFINITY),
            "-Infinity" => Ok(f64::NEG_INFINITY),
            other => Err(E::custom(format!("invalid float {other:?}"))),
        },
    }
}

/// Serde adapter for a single `f64`.
pub mod float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        super::to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        super::from_repr(super::Repr::deserialize(d)?)
    }
}

/// Serde adapter for `Vec<f64>`.
pub mod float_vec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|&x| super::to_repr(x)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<super::Repr>::deserialize(d)?
            .into_iter()
            .map(super::from_repr)
            .collect()
    }
}

/// Serde adapter for `BTreeMap<String, f64>`.
pub mod float_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(m.iter().map(|(k, &v)| (k, super::to_repr(v))))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<String, f64>, D::Error> {
        BTreeMap::<String, super::Repr>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| super::from_repr(v).map(|v| (k, v)))
            .collect()
    }
}
