//! The eight subject algorithms, instrumented natively.
//!
//! Every executable records one event per invocation, recursive
//! self-calls included. Events are emitted in call-entry order; values are
//! filled in when the call returns.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::traces::{DimSource, Dimension, ExecutableProfile, RawTraceEvent, TraceValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Iterative,
    Recursive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CloneClass {
    A,
    B,
    C,
}

/// Value range a trigger draws from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputDomain {
    /// One integer uniform in `lo..=hi`.
    Scalar { lo: u64, hi: u64 },
    /// An integer array: length uniform in `len_lo..=len_hi`, elements
    /// uniform in `elem_lo..=elem_hi`.
    Array {
        len_lo: usize,
        len_hi: usize,
        elem_lo: i64,
        elem_hi: i64,
    },
}

impl InputDomain {
    fn validate(&self, subject: &str) -> Result<()> {
        let ok = match *self {
            InputDomain::Scalar { lo, hi } => lo >= 1 && lo <= hi,
            InputDomain::Array {
                len_lo,
                len_hi,
                elem_lo,
                elem_hi,
            } => len_lo >= 1 && len_lo <= len_hi && elem_lo >= 0 && elem_lo <= elem_hi,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "input domain {self:?} for `{subject}` must be non-empty and positive"
            )))
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Input {
        match *self {
            InputDomain::Scalar { lo, hi } => Input::Scalar(rng.random_range(lo..=hi)),
            InputDomain::Array {
                len_lo,
                len_hi,
                elem_lo,
                elem_hi,
            } => {
                let n = rng.random_range(len_lo..=len_hi);
                Input::Array((0..n).map(|_| rng.random_range(elem_lo..=elem_hi)).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Input {
    Scalar(u64),
    Array(Vec<i64>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output {
    Scalar(u64),
    Array(Vec<i64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    Factorial,
    Fibonacci,
    BubbleSort,
    MergeSort,
}

/// One executable of a subject with its source-level signature.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutableSpec {
    pub profile: ExecutableProfile,
    /// Declared parameters, including reference-only ones that are not
    /// modeled (scratch buffers).
    pub parameters: Vec<String>,
    pub top_level: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSpec {
    pub name: String,
    pub algorithm: Algorithm,
    pub style: Style,
    pub clone_class: CloneClass,
    pub executables: Vec<ExecutableSpec>,
    pub input_domain: InputDomain,
}

impl SubjectSpec {
    pub fn parameter_count(&self) -> usize {
        self.executables.iter().map(|e| e.parameters.len()).sum()
    }

    pub fn profiles(&self) -> Vec<ExecutableProfile> {
        self.executables.iter().map(|e| e.profile.clone()).collect()
    }

    pub fn top_level(&self) -> &ExecutableSpec {
        self.executables
            .iter()
            .find(|e| e.top_level)
            .expect("every subject has a top-level executable")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriggerConfig {
    pub invocations: usize,
    pub seed: u64,
    /// Per-subject replacement input domains.
    pub domains: BTreeMap<String, InputDomain>,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            invocations: 2000,
            seed: 0,
            domains: BTreeMap::new(),
        }
    }
}

fn scalar_profile(id: &str, subject: &str) -> ExecutableProfile {
    ExecutableProfile::new(
        id,
        subject,
        vec![
            Dimension::int("n", DimSource::Parameter),
            Dimension::int("return", DimSource::ReturnValue),
        ],
    )
    .expect("static profile")
}

fn sort_profile(id: &str, subject: &str) -> ExecutableProfile {
    ExecutableProfile::new(
        id,
        subject,
        vec![
            Dimension::int("arr", DimSource::Parameter),
            Dimension::int("return", DimSource::ReturnValue),
        ],
    )
    .expect("static profile")
}

/// In-place helper over an index range: index parameters, the range's
/// values on entry and the values written back on exit.
fn helper_profile(id: &str, subject: &str, indices: &[&str]) -> ExecutableProfile {
    let mut dims: Vec<Dimension> = indices
        .iter()
        .map(|n| Dimension::int(n, DimSource::Parameter))
        .collect();
    dims.push(Dimension::int("arr", DimSource::Parameter));
    dims.push(Dimension::int("arr_out", DimSource::PropertyWrite));
    ExecutableProfile::new(id, subject, dims).expect("static profile")
}

fn exec(profile: ExecutableProfile, params: &[&str], top_level: bool) -> ExecutableSpec {
    ExecutableSpec {
        profile,
        parameters: params.iter().map(|s| s.to_string()).collect(),
        top_level,
    }
}

const FACTORIAL_DOMAIN: InputDomain = InputDomain::Scalar { lo: 1, hi: 12 };
const FIBONACCI_DOMAIN: InputDomain = InputDomain::Scalar { lo: 1, hi: 15 };
const SORT_DOMAIN: InputDomain = InputDomain::Array {
    len_lo: 2,
    len_hi: 16,
    elem_lo: 0,
    elem_hi: 100,
};

/// The eight subjects in table order.
pub fn list_subjects() -> Vec<SubjectSpec> {
    use Algorithm::*;
    use CloneClass::*;
    use Style::*;
    let scalar = |name: &str, algorithm, style, class, domain| SubjectSpec {
        name: name.to_string(),
        algorithm,
        style,
        clone_class: class,
        executables: vec![exec(scalar_profile(name, name), &["n"], true)],
        input_domain: domain,
    };
    let sort = |name: &str, algorithm, style, helpers: Vec<ExecutableSpec>| {
        let mut executables = vec![exec(sort_profile(name, name), &["arr"], true)];
        executables.extend(helpers);
        SubjectSpec {
            name: name.to_string(),
            algorithm,
            style,
            clone_class: C,
            executables,
            input_domain: SORT_DOMAIN,
        }
    };
    vec![
        scalar("Factorial_iter", Factorial, Iterative, A, FACTORIAL_DOMAIN),
        scalar("Factorial_rec", Factorial, Recursive, A, FACTORIAL_DOMAIN),
        scalar("Fibonacci_iter", Fibonacci, Iterative, B, FIBONACCI_DOMAIN),
        scalar("Fibonacci_rec", Fibonacci, Recursive, B, FIBONACCI_DOMAIN),
        sort("BubbleSort_iter", BubbleSort, Iterative, vec![]),
        sort(
            "BubbleSort_rec",
            BubbleSort,
            Recursive,
            vec![exec(
                helper_profile("BubbleSort_rec.bubble", "BubbleSort_rec", &["n"]),
                &["arr", "n"],
                false,
            )],
        ),
        sort(
            "MergeSort_iter",
            MergeSort,
            Iterative,
            vec![exec(
                helper_profile("MergeSort_iter.merge", "MergeSort_iter", &["lo", "mid", "hi"]),
                &["arr", "temp", "lo", "mid", "hi"],
                false,
            )],
        ),
        sort(
            "MergeSort_rec",
            MergeSort,
            Recursive,
            vec![
                exec(
                    helper_profile("MergeSort_rec.sort_range", "MergeSort_rec", &["l", "r"]),
                    &["arr", "l", "r"],
                    false,
                ),
                exec(
                    helper_profile("MergeSort_rec.merge", "MergeSort_rec", &["l", "m", "r"]),
                    &["arr", "l", "m", "r"],
                    false,
                ),
            ],
        ),
    ]
}

/// Looks subjects up by name; `all` selects every subject.
pub fn select_subjects(names: &[String]) -> Result<Vec<SubjectSpec>> {
    let all = list_subjects();
    if names.is_empty() || names.iter().any(|n| n == "all") {
        return Ok(all);
    }
    names
        .iter()
        .map(|n| {
            all.iter()
                .find(|s| &s.name == n)
                .cloned()
                .ok_or_else(|| Error::UnknownSubject {
                    name: n.clone(),
                    valid: all
                        .iter()
                        .map(|s| s.name.as_str())
                        .collect::<Vec<_>>()
                        .join(", "),
                })
        })
        .collect()
}

/// Every executable of every subject.
pub fn all_profiles() -> Vec<ExecutableProfile> {
    list_subjects().iter().flat_map(|s| s.profiles()).collect()
}

/// Helper pairs across sort implementations that compute the same function
/// of their inputs. Both merges combine two adjacent sorted runs; only the
/// index convention differs (half-open vs inclusive bounds). Other helpers
/// have different contracts (a shrinking bubble prefix, a recursive range
/// sort) and are not listed.
pub fn equivalent_helpers() -> Vec<(&'static str, &'static str)> {
    vec![("MergeSort_iter.merge", "MergeSort_rec.merge")]
}

/// Collects events in call-entry order.
struct Recorder {
    events: Vec<RawTraceEvent>,
}

impl Recorder {
    fn enter(&mut self, exec: &str) -> usize {
        self.events.push(RawTraceEvent::new(exec));
        self.events.len() - 1
    }

    fn set(&mut self, slot: usize, dim: &str, v: impl Into<TraceValue>) {
        self.events[slot].values.insert(dim.to_string(), v.into());
    }
}

fn as_f64(xs: &[i64]) -> Vec<f64> {
    xs.iter().map(|&x| x as f64).collect()
}

fn overflow(exec: &str, input: impl std::fmt::Debug) -> Error {
    Error::Overflow {
        exec: exec.to_string(),
        input: format!("{input:?}"),
    }
}

fn factorial_iter(rec: &mut Recorder, n: u64) -> Result<u64> {
    let slot = rec.enter("Factorial_iter");
    let mut product: u64 = 1;
    let mut i = 2;
    while i <= n {
        product = product
            .checked_mul(i)
            .ok_or_else(|| overflow("Factorial_iter", n))?;
        i += 1;
    }
    rec.set(slot, "n", n as f64);
    rec.set(slot, "return", product as f64);
    Ok(product)
}

fn factorial_rec(rec: &mut Recorder, n: u64) -> Result<u64> {
    let slot = rec.enter("Factorial_rec");
    let out = if n <= 1 {
        1
    } else {
        n.checked_mul(factorial_rec(rec, n - 1)?)
            .ok_or_else(|| overflow("Factorial_rec", n))?
    };
    rec.set(slot, "n", n as f64);
    rec.set(slot, "return", out as f64);
    Ok(out)
}

fn fibonacci_iter(rec: &mut Recorder, n: u64) -> Result<u64> {
    let slot = rec.enter("Fibonacci_iter");
    let (mut a, mut b): (u64, u64) = (0, 1);
    for _ in 0..n {
        let next = a
            .checked_add(b)
            .ok_or_else(|| overflow("Fibonacci_iter", n))?;
        a = b;
        b = next;
    }
    rec.set(slot, "n", n as f64);
    rec.set(slot, "return", a as f64);
    Ok(a)
}

fn fibonacci_rec(rec: &mut Recorder, n: u64) -> Result<u64> {
    let slot = rec.enter("Fibonacci_rec");
    let out = if n < 2 {
        n
    } else {
        let a = fibonacci_rec(rec, n - 1)?;
        let b = fibonacci_rec(rec, n - 2)?;
        a.checked_add(b)
            .ok_or_else(|| overflow("Fibonacci_rec", n))?
    };
    rec.set(slot, "n", n as f64);
    rec.set(slot, "return", out as f64);
    Ok(out)
}

fn bubble_sort_iter(rec: &mut Recorder, arr: &[i64]) -> Vec<i64> {
    let slot = rec.enter("BubbleSort_iter");
    let mut a = arr.to_vec();
    let n = a.len();
    for i in 0..n {
        let mut swapped = false;
        for j in 0..n - 1 - i {
            if a[j] > a[j + 1] {
                a.swap(j, j + 1);
                swapped = true;
            }
        }
        if !swapped {
            break;
        }
    }
    rec.set(slot, "arr", as_f64(arr));
    rec.set(slot, "return", as_f64(&a));
    a
}

fn bubble_sort_rec(rec: &mut Recorder, arr: &[i64]) -> Vec<i64> {
    let slot = rec.enter("BubbleSort_rec");
    let mut a = arr.to_vec();
    let n = a.len();
    bubble_pass(rec, &mut a, n);
    rec.set(slot, "arr", as_f64(arr));
    rec.set(slot, "return", as_f64(&a));
    a
}

/// Bubbles the largest of `a[..n]` to position `n - 1`, then recurses on
/// the shorter prefix.
fn bubble_pass(rec: &mut Recorder, a: &mut [i64], n: usize) {
    let slot = rec.enter("BubbleSort_rec.bubble");
    rec.set(slot, "arr", as_f64(a));
    rec.set(slot, "n", n as f64);
    if n > 1 {
        for j in 0..n - 1 {
            if a[j] > a[j + 1] {
                a.swap(j, j + 1);
            }
        }
        bubble_pass(rec, a, n - 1);
    }
    rec.set(slot, "arr_out", as_f64(a));
}

fn merge_sort_iter(rec: &mut Recorder, arr: &[i64]) -> Vec<i64> {
    let slot = rec.enter("MergeSort_iter");
    let mut a = arr.to_vec();
    let n = a.len();
    let mut temp = vec![0; n];
    let mut width = 1;
    while width < n {
        let mut lo = 0;
        while lo < n - width {
            let mid = lo + width;
            let hi = (lo + 2 * width).min(n);
            merge_runs(rec, &mut a, &mut temp, lo, mid, hi);
            lo += 2 * width;
        }
        width *= 2;
    }
    rec.set(slot, "arr", as_f64(arr));
    rec.set(slot, "return", as_f64(&a));
    a
}

/// Merges the sorted runs `a[lo..mid]` and `a[mid..hi]` through `temp`.
fn merge_runs(rec: &mut Recorder, a: &mut [i64], temp: &mut [i64], lo: usize, mid: usize, hi: usize) {
    let slot = rec.enter("MergeSort_iter.merge");
    rec.set(slot, "arr", as_f64(&a[lo..hi]));
    temp[lo..hi].copy_from_slice(&a[lo..hi]);
    let (mut i, mut j) = (lo, mid);
    for k in lo..hi {
        if i >= mid {
            a[k] = temp[j];
            j += 1;
        } else if j >= hi || temp[i] <= temp[j] {
            a[k] = temp[i];
            i += 1;
        } else {
            a[k] = temp[j];
            j += 1;
        }
    }
    rec.set(slot, "lo", lo as f64);
    rec.set(slot, "mid", mid as f64);
    rec.set(slot, "hi", hi as f64);
    rec.set(slot, "arr_out", as_f64(&a[lo..hi]));
}

fn merge_sort_rec(rec: &mut Recorder, arr: &[i64]) -> Vec<i64> {
    let slot = rec.enter("MergeSort_rec");
    let mut a = arr.to_vec();
    let last = a.len() - 1;
    sort_range(rec, &mut a, 0, last);
    rec.set(slot, "arr", as_f64(arr));
    rec.set(slot, "return", as_f64(&a));
    a
}

/// Sorts `a[l..=r]`.
fn sort_range(rec: &mut Recorder, a: &mut [i64], l: usize, r: usize) {
    let slot = rec.enter("MergeSort_rec.sort_range");
    rec.set(slot, "arr", as_f64(&a[l..=r]));
    if l < r {
        let m = l + (r - l) / 2;
        sort_range(rec, a, l, m);
        sort_range(rec, a, m + 1, r);
        merge(rec, a, l, m, r);
    }
    rec.set(slot, "l", l as f64);
    rec.set(slot, "r", r as f64);
    rec.set(slot, "arr_out", as_f64(&a[l..=r]));
}

/// Merges the sorted runs `a[l..=m]` and `a[m+1..=r]`.
fn merge(rec: &mut Recorder, a: &mut [i64], l: usize, m: usize, r: usize) {
    let slot = rec.enter("MergeSort_rec.merge");
    rec.set(slot, "arr", as_f64(&a[l..=r]));
    let left = a[l..=m].to_vec();
    let right = a[m + 1..=r].to_vec();
    let (mut i, mut j, mut k) = (0, 0, l);
    while i < left.len() && j < right.len() {
        if left[i] <= right[j] {
            a[k] = left[i];
            i += 1;
        } else {
            a[k] = right[j];
            j += 1;
        }
        k += 1;
    }
    for &v in left[i..].iter().chain(&right[j..]) {
        a[k] = v;
        k += 1;
    }
    rec.set(slot, "l", l as f64);
    rec.set(slot, "m", m as f64);
    rec.set(slot, "r", r as f64);
    rec.set(slot, "arr_out", as_f64(&a[l..=r]));
}

/// Runs one top-level invocation, returning its output and every recorded
/// event.
pub fn invoke(spec: &SubjectSpec, input: &Input) -> Result<(Output, Vec<RawTraceEvent>)> {
    let mut rec = Recorder { events: Vec::new() };
    let out = match (spec.algorithm, spec.style, input) {
        (Algorithm::Factorial, Style::Iterative, Input::Scalar(n)) => {
            Output::Scalar(factorial_iter(&mut rec, *n)?)
        }
        (Algorithm::Factorial, Style::Recursive, Input::Scalar(n)) => {
            Output::Scalar(factorial_rec(&mut rec, *n)?)
        }
        (Algorithm::Fibonacci, Style::Iterative, Input::Scalar(n)) => {
            Output::Scalar(fibonacci_iter(&mut rec, *n)?)
        }
        (Algorithm::Fibonacci, Style::Recursive, Input::Scalar(n)) => {
            Output::Scalar(fibonacci_rec(&mut rec, *n)?)
        }
        (Algorithm::BubbleSort, Style::Iterative, Input::Array(a)) if !a.is_empty() => {
            Output::Array(bubble_sort_iter(&mut rec, a))
        }
        (Algorithm::BubbleSort, Style::Recursive, Input::Array(a)) if !a.is_empty() => {
            Output::Array(bubble_sort_rec(&mut rec, a))
        }
        (Algorithm::MergeSort, Style::Iterative, Input::Array(a)) if !a.is_empty() => {
            Output::Array(merge_sort_iter(&mut rec, a))
        }
        (Algorithm::MergeSort, Style::Recursive, Input::Array(a)) if !a.is_empty() => {
            Output::Array(merge_sort_rec(&mut rec, a))
        }
        _ => {
            return Err(Error::Config(format!(
                "input {input:?} does not fit subject `{}`",
                spec.name
            )))
        }
    };
    Ok((out, rec.events))
}

/// Triggers `cfg.invocations` top-level calls with inputs drawn uniformly
/// from the subject's domain.
pub fn run_subject(spec: &SubjectSpec, cfg: &TriggerConfig) -> Result<Vec<RawTraceEvent>> {
    if cfg.invocations == 0 {
        return Err(Error::Config("invocations must be positive".into()));
    }
    let domain = cfg
        .domains
        .get(&spec.name)
        .copied()
        .unwrap_or(spec.input_domain);
    domain.validate(&spec.name)?;
    let mut rng = seed::rng_for(cfg.seed, &["trigger", &spec.name]);
    let mut events = Vec::new();
    for _ in 0..cfg.invocations {
        let input = domain.draw(&mut rng);
        let (_, evs) = invoke(spec, &input)?;
        events.extend(evs);
    }
    Ok(events)
}

/// Reference behavior computed by independent means: iterator product for
/// factorial, fast doubling for Fibonacci, the standard library sort.
pub fn oracle_behavior(spec: &SubjectSpec, input: &Input) -> Result<Output> {
    match (spec.algorithm, input) {
        (Algorithm::Factorial, Input::Scalar(n)) => (1..=*n)
            .try_fold(1u64, |acc, k| acc.checked_mul(k))
            .map(Output::Scalar)
            .ok_or_else(|| overflow("factorial oracle", n)),
        (Algorithm::Fibonacci, Input::Scalar(n)) => fib_doubling(*n)
            .map(|(f, _)| Output::Scalar(f))
            .ok_or_else(|| overflow("fibonacci oracle", n)),
        (Algorithm::BubbleSort | Algorithm::MergeSort, Input::Array(a)) => {
            let mut v = a.clone();
            v.sort_unstable();
            Ok(Output::Array(v))
        }
        _ => Err(Error::Config(format!(
            "input {input:?} does not fit subject `{}`",
            spec.name
        ))),
    }
}

/// `(F(n), F(n + 1))` by fast doubling.
fn fib_doubling(n: u64) -> Option<(u64, u64)> {
    if n == 0 {
        return Some((0, 1));
    }
    let (a, b) = fib_doubling(n / 2)?;
    // F(2k) = F(k) * (2 F(k+1) - F(k)),  F(2k+1) = F(k)^2 + F(k+1)^2
    let c = a.checked_mul(b.checked_mul(2)?.checked_sub(a)?)?;
    let d = a.checked_mul(a)?.checked_add(b.checked_mul(b)?)?;
    if n % 2 == 0 {
        Some((c, d))
    } else {
        Some((d, c.checked_add(d)?))
    }
}
