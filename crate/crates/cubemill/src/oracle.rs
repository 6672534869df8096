//! Independent brute-force cube computation and view diffing.
//!
//! Ground truth for equivalence testing: every cuboid is computed by hash
//! grouping the whole dataset and applying each function definitionally,
//! with no code shared with the cubing pipeline's aggregation path. The
//! MEDIAN convention matches the one documented in [`crate::cubing`]: an
//! even-sized group reports the arithmetic mean of its two middle values
//! (integer when exact).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::cubing::{AggOp, FuncSpec};
use crate::dataio::{Dataset, Schema};
use crate::engine::record::{DimValue, Key, Num};
use crate::error::{Error, Result};
use crate::lattice::Cuboid;

/// Test-size guard for the in-memory oracle.
pub const ORACLE_ROW_CAP: usize = 200_000;

/// Per-cuboid ground truth: group-by key -> one value per function.
#[derive(Debug, Default)]
pub struct OracleResult {
    /// Keyed by the cuboid's rendered name (dimension sequence order).
    pub views: BTreeMap<String, BTreeMap<Key, Vec<Num>>>,
}

/// Computes every requested cuboid definitionally. `cuboids` are dimension
/// sequences (the "all" cuboid as the empty sequence is allowed).
pub fn brute_force_cube(
    dataset: &Dataset,
    schema: &Schema,
    cuboids: &[Cuboid],
    specs: &[FuncSpec],
) -> Result<OracleResult> {
    let mut tuples = Vec::new();
    for tuple in dataset.stream(schema)? {
        match tuple {
            Ok(t) => tuples.push(t),
            Err(_) => continue, // the pipeline skips malformed lines too
        }
        if tuples.len() > ORACLE_ROW_CAP {
            return Err(Error::Config(format!(
                "oracle capped at {ORACLE_ROW_CAP} rows; shrink the dataset"
            )));
        }
    }

    let names = schema.dim_names();
    let mut result = OracleResult::default();
    for cuboid in cuboids {
        let mut groups: BTreeMap<Key, Vec<usize>> = BTreeMap::new();
        for (idx, tuple) in tuples.iter().enumerate() {
            let key = Key(
                cuboid.dims().iter().map(|&d| tuple.dims[d as usize].clone()).collect(),
            );
            groups.entry(key).or_default().push(idx);
        }
        let mut view = BTreeMap::new();
        for (key, members) in groups {
            let values = specs
                .iter()
                .map(|spec| apply_definition(spec, &members, &tuples))
                .collect::<Result<Vec<Num>>>()?;
            view.insert(key, values);
        }
        result.views.insert(cuboid.render(&names), view);
    }
    Ok(result)
}

/// Definitional aggregation over one group, independent of the pipeline's
/// accumulator implementations.
fn apply_definition(
    spec: &FuncSpec,
    members: &[usize],
    tuples: &[crate::dataio::Tuple],
) -> Result<Num> {
    let values = || members.iter().map(|&i| tuples[i].measures[spec.measure.unwrap_or(0)]);
    match spec.op {
        AggOp::Count => Ok(Num::Int(members.len() as i64)),
        AggOp::Sum => Ok(exact_sum(values())),
        AggOp::Min => Ok(values()
            .min_by(|a, b| a.total_cmp(b))
            .ok_or_else(|| Error::Internal("empty group".into()))?),
        AggOp::Max => Ok(values()
            .max_by(|a, b| a.total_cmp(b))
            .ok_or_else(|| Error::Internal("empty group".into()))?),
        AggOp::Avg => {
            let sum = exact_sum(values());
            Ok(Num::Float(sum.as_f64() / members.len() as f64))
        }
        AggOp::Median => {
            let mut sorted: Vec<Num> = values().collect();
            sorted.sort_by(|a, b| a.total_cmp(b));
            let n = sorted.len();
            if n % 2 == 1 {
                Ok(sorted[n / 2])
            } else {
                let (a, b) = (sorted[n / 2 - 1], sorted[n / 2]);
                match (a, b) {
                    (Num::Int(x), Num::Int(y)) => {
                        let sum = x as i128 + y as i128;
                        if sum % 2 == 0 {
                            Ok(Num::Int((sum / 2) as i64))
                        } else {
                            Ok(Num::Float(sum as f64 / 2.0))
                        }
                    }
                    _ => Ok(Num::Float((a.as_f64() + b.as_f64()) / 2.0)),
                }
            }
        }
    }
}

fn exact_sum(values: impl Iterator<Item = Num>) -> Num {
    let mut int_sum: i128 = 0;
    let mut float_sum = 0.0f64;
    let mut saw_float = false;
    for v in values {
        match v {
            Num::Int(i) => int_sum += i as i128,
            Num::Float(f) => {
                saw_float = true;
                float_sum += f;
            }
        }
    }
    if saw_float {
        Num::Float(float_sum + int_sum as f64)
    } else if let Ok(v) = i64::try_from(int_sum) {
        Num::Int(v)
    } else {
        Num::Float(int_sum as f64)
    }
}

/// Comparison tolerances per function position.
#[derive(Debug, Clone)]
pub struct Tolerances {
    /// Relative tolerance per function column; 0 means exact.
    pub relative: Vec<f64>,
}

impl Tolerances {
    /// The standard rule: exact for integer-exact functions, 1e-9 relative
    /// for AVG.
    pub fn standard(specs: &[FuncSpec]) -> Self {
        Tolerances {
            relative: specs
                .iter()
                .map(|s| if s.op == AggOp::Avg { 1e-9 } else { 0.0 })
                .collect(),
        }
    }
}

/// One discrepancy between the engine's views and the oracle.
#[derive(Debug)]
pub struct DiffEntry {
    pub cuboid: String,
    pub detail: String,
}

/// Outcome of a verification pass; empty means the views match.
#[derive(Debug, Default)]
pub struct DiffReport {
    pub entries: Vec<DiffEntry>,
    pub cells_compared: u64,
}

impl DiffReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&format!("mismatch cuboid={} {}\n", entry.cuboid, entry.detail));
        }
        out.push_str(&format!(
            "verify cells={} mismatches={}\n",
            self.cells_compared,
            self.entries.len()
        ));
        out
    }
}

/// Parses one view text file: header `cuboid=<dims> functions=<list>`, then
/// `<dim values TAB-joined> | <agg values TAB-joined>` lines.
pub fn parse_view_file(path: &Path) -> Result<(String, Vec<String>, Vec<(Vec<String>, Vec<Num>)>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config(format!("{}: empty view file", path.display())))?;
    let rest = header
        .strip_prefix("cuboid=")
        .ok_or_else(|| Error::Config(format!("{}: bad view header", path.display())))?;
    let (cuboid, functions) = rest
        .split_once(" functions=")
        .ok_or_else(|| Error::Config(format!("{}: bad view header", path.display())))?;
    let functions: Vec<String> = functions.split(',').map(|s| s.to_string()).collect();
    let mut cells = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let (dims_part, aggs_part) = line
            .rsplit_once(" | ")
            .ok_or_else(|| Error::Config(format!("{}: bad cell line {line:?}", path.display())))?;
        let dims: Vec<String> = if dims_part.is_empty() {
            Vec::new()
        } else {
            dims_part.split('\t').map(|s| s.to_string()).collect()
        };
        let aggs = aggs_part
            .split('\t')
            .map(Num::parse)
            .collect::<Result<Vec<Num>>>()?;
        cells.push((dims, aggs));
    }
    Ok((cuboid.to_string(), functions, cells))
}

/// Compares every `.view` file in a directory against the oracle.
pub fn diff_views(
    views_dir: &Path,
    oracle: &OracleResult,
    schema: &Schema,
    tolerances: &Tolerances,
) -> Result<DiffReport> {
    let mut report = DiffReport::default();
    let mut seen = Vec::new();

    let mut paths: Vec<_> = fs::read_dir(views_dir)
        .map_err(|e| Error::io(views_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "view"))
        .collect();
    paths.sort();

    for path in paths {
        let (cuboid, _functions, cells) = parse_view_file(&path)?;
        seen.push(cuboid.clone());
        let Some(expected) = oracle.views.get(&cuboid) else {
            report.entries.push(DiffEntry {
                cuboid,
                detail: "not requested from the oracle".into(),
            });
            continue;
        };
        let typed: BTreeMap<Key, Vec<Num>> = cells
            .into_iter()
            .map(|(dims, aggs)| (typed_key(&cuboid, &dims, schema), aggs))
            .collect();

        for (key, want) in expected {
            match typed.get(key) {
                None => report.entries.push(DiffEntry {
                    cuboid: cuboid.clone(),
                    detail: format!("missing key {:?}", key.render_tsv()),
                }),
                Some(got) => {
                    report.cells_compared += 1;
                    if got.len() != want.len() {
                        report.entries.push(DiffEntry {
                            cuboid: cuboid.clone(),
                            detail: format!("key {:?}: column count differs", key.render_tsv()),
                        });
                        continue;
                    }
                    for (col, (g, w)) in got.iter().zip(want).enumerate() {
                        let tol = tolerances.relative.get(col).copied().unwrap_or(0.0);
                        if !num_matches(g, w, tol) {
                            report.entries.push(DiffEntry {
                                cuboid: cuboid.clone(),
                                detail: format!(
                                    "key {:?} column {col}: got {} want {}",
                                    key.render_tsv(),
                                    g.render(),
                                    w.render()
                                ),
                            });
                        }
                    }
                }
            }
        }
        for key in typed.keys() {
            if !expected.contains_key(key) {
                report.entries.push(DiffEntry {
                    cuboid: cuboid.clone(),
                    detail: format!("extra key {:?}", key.render_tsv()),
                });
            }
        }
    }
    for cuboid in oracle.views.keys() {
        if !seen.contains(cuboid) {
            report.entries.push(DiffEntry {
                cuboid: cuboid.clone(),
                detail: "view file missing".into(),
            });
        }
    }
    Ok(report)
}

/// Rebuilds a typed key from a view file's rendered dimension values, using
/// the cuboid name to recover per-dimension types.
fn typed_key(cuboid: &str, dims: &[String], schema: &Schema) -> Key {
    let dimensions = schema.dimensions();
    let mut fields = Vec::with_capacity(dims.len());
    let mut rest = cuboid;
    for value in dims {
        // greedy longest-name match over the concatenated cuboid name
        let dim = dimensions
            .iter()
            .filter(|d| rest.starts_with(d.name.as_str()))
            .max_by_key(|d| d.name.len());
        match dim {
            Some(d) => {
                rest = &rest[d.name.len()..];
                let typed = match d.ty {
                    crate::lattice::DimType::Str => DimValue::Str(value.clone()),
                    _ => value
                        .parse::<i64>()
                        .map(DimValue::Int)
                        .unwrap_or_else(|_| DimValue::Str(value.clone())),
                };
                fields.push(typed);
            }
            None => fields.push(DimValue::Str(value.clone())),
        }
    }
    Key(fields)
}

fn num_matches(got: &Num, want: &Num, relative: f64) -> bool {
    if got.eq_exact(want) {
        return true;
    }
    if relative > 0.0 {
        let (g, w) = (got.as_f64(), want.as_f64());
        return (g - w).abs() <= relative * w.abs().max(f64::MIN_POSITIVE);
    }
    false
}
