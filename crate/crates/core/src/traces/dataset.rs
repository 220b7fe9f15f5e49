use ndarray::Array2;

use super::{Dimension, ExecutableProfile, RawTraceEvent, TraceValue};
use crate::error::{Error, Result};

pub const DEFAULT_MIN_ROWS: usize = 100;

/// Turns one event into rows in profile dimension order.
///
/// List-valued dimensions are paired index-wise; scalars are broadcast to
/// every row. An event without lists yields a single row.
pub fn explode(event: &RawTraceEvent, profile: &ExecutableProfile) -> Result<Vec<Vec<f64>>> {
    event.check(profile)?;
    let mut len: Option<(usize, &str)> = None;
    for d in &profile.dims {
        if let TraceValue::List(xs) = &event.values[&d.name] {
            match len {
                None => len = Some((xs.len(), &d.name)),
                Some((l, _)) if l != xs.len() => {
                    return Err(Error::RaggedLists {
                        exec: event.exec.clone(),
                        dim: d.name.clone(),
                        len: xs.len(),
                        expected: l,
                    })
                }
                Some(_) => {}
            }
        }
    }
    let rows = len.map_or(1, |(l, _)| l);
    Ok((0..rows)
        .map(|i| {
            profile
                .dims
                .iter()
                .map(|d| match &event.values[&d.name] {
                    TraceValue::Scalar(v) => *v,
                    TraceValue::List(xs) => xs[i],
                })
                .collect()
        })
        .collect())
}

/// Raw observations of one executable, one row per exploded event element.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceDataset {
    pub executable_id: String,
    pub columns: Vec<Dimension>,
    pub rows: Array2<f64>,
}

impl TraceDataset {
    pub fn from_events<'a>(
        profile: &ExecutableProfile,
        events: impl IntoIterator<Item = &'a RawTraceEvent>,
    ) -> Result<Self> {
        let mut flat = Vec::new();
        let mut n = 0;
        for e in events.into_iter().filter(|e| e.exec == profile.id) {
            for row in explode(e, profile)? {
                flat.extend(row);
                n += 1;
            }
        }
        let rows = Array2::from_shape_vec((n, profile.dims.len()), flat)
            .expect("exploded rows have profile width");
        Ok(Self {
            executable_id: profile.id.clone(),
            columns: profile.dims.clone(),
            rows,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|d| d.name == name)
    }
}
