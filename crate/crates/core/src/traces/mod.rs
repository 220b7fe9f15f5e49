//! Runtime data model: dimensions, executable profiles, raw events and the
//! rectangular datasets the density models are trained on.

mod dataset;
mod io;
mod preprocess;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{explode, TraceDataset, DEFAULT_MIN_ROWS};
pub use io::{
    read_profiles, read_traces, write_profiles, write_traces, TraceReader, TraceWriter,
};
pub use preprocess::{
    compress, decompress, dequantize, standardize, ColumnSpec, Prepared, PrepareConfig,
    Preprocessing, StandardizeReport,
};

/// Logical direction of a dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimKind {
    Input,
    Output,
}

/// Where a value is observed during an invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimSource {
    Parameter,
    ReturnValue,
    PropertyRead,
    PropertyWrite,
    InvocationParam,
    InvocationReturn,
}

impl DimSource {
    /// Parameters, property reads and invocation returns flow into an
    /// executable; everything else flows out.
    pub fn kind(self) -> DimKind {
        match self {
            DimSource::Parameter | DimSource::PropertyRead | DimSource::InvocationReturn => {
                DimKind::Input
            }
            DimSource::ReturnValue | DimSource::PropertyWrite | DimSource::InvocationParam => {
                DimKind::Output
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbstractType {
    Integer,
    Float,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub kind: DimKind,
    pub source: DimSource,
    #[serde(rename = "type")]
    pub abstract_type: AbstractType,
}

impl Dimension {
    pub fn new(name: &str, source: DimSource, abstract_type: AbstractType) -> Self {
        Self {
            name: name.to_string(),
            kind: source.kind(),
            source,
            abstract_type,
        }
    }

    pub fn int(name: &str, source: DimSource) -> Self {
        Self::new(name, source, AbstractType::Integer)
    }
}

/// One modeled executable and its ordered dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutableProfile {
    pub id: String,
    pub subject: String,
    pub dims: Vec<Dimension>,
}

impl ExecutableProfile {
    pub fn new(id: &str, subject: &str, dims: Vec<Dimension>) -> Result<Self> {
        let p = Self {
            id: id.to_string(),
            subject: subject.to_string(),
            dims,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Error::InvalidProfile {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if !self.dims.iter().any(|d| d.kind == DimKind::Input) {
            return Err(bad("no input dimension"));
        }
        if !self.dims.iter().any(|d| d.kind == DimKind::Output) {
            return Err(bad("no output dimension"));
        }
        if let Some(d) = self.dims.iter().find(|d| d.kind != d.source.kind()) {
            return Err(bad(&format!(
                "dimension `{}` has kind {:?} but source {:?}",
                d.name, d.kind, d.source
            )));
        }
        let mut names: Vec<&str> = self.dims.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(bad("duplicate dimension names"));
        }
        Ok(())
    }

    pub fn dim(&self, name: &str) -> Option<&Dimension> {
        self.dims.iter().find(|d| d.name == name)
    }
}

/// A recorded value: a scalar or a list of scalars.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceValue {
    Scalar(f64),
    List(Vec<f64>),
}

impl TraceValue {
    pub fn values(&self) -> &[f64] {
        match self {
            TraceValue::Scalar(v) => std::slice::from_ref(v),
            TraceValue::List(v) => v,
        }
    }
}

impl From<f64> for TraceValue {
    fn from(v: f64) -> Self {
        TraceValue::Scalar(v)
    }
}

impl From<Vec<f64>> for TraceValue {
    fn from(v: Vec<f64>) -> Self {
        TraceValue::List(v)
    }
}

/// One invocation of one executable.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTraceEvent {
    pub exec: String,
    pub values: BTreeMap<String, TraceValue>,
}

impl RawTraceEvent {
    pub fn new(exec: &str) -> Self {
        Self {
            exec: exec.to_string(),
            values: BTreeMap::new(),
        }
    }

    pub fn with(mut self, dim: &str, value: impl Into<TraceValue>) -> Self {
        self.values.insert(dim.to_string(), value.into());
        self
    }

    /// Checks that the keys match the profile's dimension names exactly.
    pub fn check(&self, profile: &ExecutableProfile) -> Result<()> {
        for d in &profile.dims {
            if !self.values.contains_key(&d.name) {
                return Err(Error::MissingDimension {
                    exec: self.exec.clone(),
                    dim: d.name.clone(),
                });
            }
        }
        if let Some(k) = self.values.keys().find(|k| profile.dim(k).is_none()) {
            return Err(Error::UnexpectedDimension {
                exec: self.exec.clone(),
                dim: k.clone(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_follows_source() {
        use DimSource::*;
        for s in [Parameter, PropertyRead, InvocationReturn] {
            assert_eq!(s.kind(), DimKind::Input);
        }
        for s in [ReturnValue, PropertyWrite, InvocationParam] {
            assert_eq!(s.kind(), DimKind::Output);
        }
    }

    #[test]
    fn profile_requires_input_and_output() {
        let only_in = ExecutableProfile::new(
            "f",
            "s",
            vec![Dimension::int("n", DimSource::Parameter)],
        );
        assert!(matches!(only_in, Err(Error::InvalidProfile { .. })));
        let dup = ExecutableProfile::new(
            "f",
            "s",
            vec![
                Dimension::int("n", DimSource::Parameter),
                Dimension::int("n", DimSource::ReturnValue),
            ],
        );
        assert!(dup.is_err());
    }

    #[test]
    fn event_check_names_missing_dimension() {
        let p = ExecutableProfile::new(
            "f",
            "s",
            vec![
                Dimension::int("n", DimSource::Parameter),
                Dimension::int("return", DimSource::ReturnValue),
            ],
        )
        .unwrap();
        let e = RawTraceEvent::new("f").with("n", 3.0);
        match e.check(&p) {
            Err(Error::MissingDimension { dim, .. }) => assert_eq!(dim, "return"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
