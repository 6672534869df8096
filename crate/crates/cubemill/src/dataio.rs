//! Dataset input: schema config, TSV parsing, synthetic data generation,
//! and base/delta splitting.
//!
//! Input files are TAB-separated UTF-8 text, one tuple per line, columns in
//! schema declaration order. Dates are carried as `yyyymmdd` integers and
//! accepted either in that form or as `yyyy-mm-dd`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::record::{DimValue, Num};
use crate::error::{Error, Result};
use crate::lattice::{DimType, Dimension, MAX_DIMS};

/// One input column: a typed dimension or a measure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Column {
    Dim { name: String, ty: DimType },
    Measure { name: String },
}

/// Dataset layout: column order in the file plus derived dimension and
/// measure lists.
#[derive(Debug, Clone)]
pub struct Schema {
    pub columns: Vec<Column>,
}

impl Schema {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        let schema = Schema { columns };
        let dims = schema.dimensions();
        if dims.is_empty() || schema.measure_names().is_empty() {
            return Err(Error::Config("schema needs at least 1 dimension and 1 measure".into()));
        }
        if dims.len() > MAX_DIMS {
            return Err(Error::Config(format!("at most {MAX_DIMS} dimensions supported")));
        }
        let mut names: Vec<&str> = schema
            .columns
            .iter()
            .map(|c| match c {
                Column::Dim { name, .. } | Column::Measure { name } => name.as_str(),
            })
            .collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("column names must be unique".into()));
        }
        if dims.iter().any(|d| d.name == "all") {
            return Err(Error::Config("\"all\" is reserved for the grand-total view".into()));
        }
        Ok(schema)
    }

    /// Parses the schema config text: `dim <name> <type>` and
    /// `measure <name>` lines in file column order.
    pub fn parse(text: &str) -> Result<Self> {
        let mut columns = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some("dim"), Some(name), Some(ty)) => {
                    let ty = match ty {
                        "string" => DimType::Str,
                        "int" => DimType::Int,
                        "date" => DimType::Date,
                        other => {
                            return Err(Error::Config(format!(
                                "schema line {}: unknown dimension type {other:?}",
                                lineno + 1
                            )))
                        }
                    };
                    columns.push(Column::Dim { name: name.to_string(), ty });
                }
                (Some("measure"), Some(name), None) => {
                    columns.push(Column::Measure { name: name.to_string() });
                }
                _ => {
                    return Err(Error::Config(format!(
                        "schema line {}: expected `dim <name> <type>` or `measure <name>`",
                        lineno + 1
                    )))
                }
            }
        }
        Schema::new(columns)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Schema::parse(&text)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for column in &self.columns {
            match column {
                Column::Dim { name, ty } => {
                    let ty = match ty {
                        DimType::Str => "string",
                        DimType::Int => "int",
                        DimType::Date => "date",
                    };
                    out.push_str(&format!("dim {name} {ty}\n"));
                }
                Column::Measure { name } => out.push_str(&format!("measure {name}\n")),
            }
        }
        out
    }

    pub fn dimensions(&self) -> Vec<Dimension> {
        self.columns
            .iter()
            .filter_map(|c| match c {
                Column::Dim { name, ty } => Some((name.clone(), *ty)),
                Column::Measure { .. } => None,
            })
            .enumerate()
            .map(|(index, (name, ty))| Dimension { index, name, ty })
            .collect()
    }

    pub fn dim_names(&self) -> Vec<String> {
        self.dimensions().into_iter().map(|d| d.name).collect()
    }

    pub fn measure_names(&self) -> Vec<String> {
        self.columns
            .iter()
            .filter_map(|c| match c {
                Column::Measure { name } => Some(name.clone()),
                Column::Dim { .. } => None,
            })
            .collect()
    }

    pub fn measure_index(&self, name: &str) -> Option<usize> {
        self.measure_names().iter().position(|m| m == name)
    }

    /// Parses one TSV line into dimension values and measures.
    pub fn parse_line(&self, line: &str) -> Result<Tuple> {
        let mut dims = Vec::new();
        let mut measures = Vec::new();
        let mut fields = line.split('\t');
        for column in &self.columns {
            let field = fields
                .next()
                .ok_or_else(|| Error::Config(format!("missing field in line {line:?}")))?;
            match column {
                Column::Dim { ty, name } => dims.push(parse_dim(field, *ty, name)?),
                Column::Measure { name } => {
                    let value = Num::parse(field).map_err(|_| {
                        Error::Config(format!("bad measure {name} value {field:?}"))
                    })?;
                    measures.push(value);
                }
            }
        }
        if fields.next().is_some() {
            return Err(Error::Config(format!("extra fields in line {line:?}")));
        }
        Ok(Tuple { dims, measures })
    }
}

fn parse_dim(field: &str, ty: DimType, name: &str) -> Result<DimValue> {
    match ty {
        DimType::Str => Ok(DimValue::Str(field.to_string())),
        DimType::Int => field
            .parse::<i64>()
            .map(DimValue::Int)
            .map_err(|_| Error::Config(format!("bad int dimension {name} value {field:?}"))),
        DimType::Date => {
            if let Ok(v) = field.parse::<i64>() {
                return Ok(DimValue::Int(v));
            }
            let parts: Vec<&str> = field.split('-').collect();
            if parts.len() == 3 {
                if let (Ok(y), Ok(m), Ok(d)) = (
                    parts[0].parse::<i64>(),
                    parts[1].parse::<i64>(),
                    parts[2].parse::<i64>(),
                ) {
                    return Ok(DimValue::Int(y * 10000 + m * 100 + d));
                }
            }
            Err(Error::Config(format!("bad date dimension {name} value {field:?}")))
        }
    }
}

/// One parsed input row.
#[derive(Debug, Clone)]
pub struct Tuple {
    pub dims: Vec<DimValue>,
    pub measures: Vec<Num>,
}

/// A streaming, splittable handle over one TSV dataset file.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub path: PathBuf,
}

/// Opens a dataset file for streaming reads.
pub fn parse_dataset(path: &Path) -> Result<Dataset> {
    if !path.is_file() {
        return Err(Error::Config(format!("dataset file {} not found", path.display())));
    }
    Ok(Dataset { path: path.to_path_buf() })
}

impl Dataset {
    pub fn bytes(&self) -> Result<u64> {
        Ok(fs::metadata(&self.path).map_err(|e| Error::io(&self.path, e))?.len())
    }

    /// Whole-file tuple stream; malformed lines surface as errors for the
    /// caller to count or reject.
    pub fn stream<'a>(
        &self,
        schema: &'a Schema,
    ) -> Result<impl Iterator<Item = Result<Tuple>> + 'a> {
        let file = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        let reader = BufReader::new(file);
        let path = self.path.clone();
        Ok(reader.lines().map(move |line| {
            let line = line.map_err(|e| Error::io(&path, e))?;
            schema.parse_line(&line)
        }))
    }
}

fn render_dim_value(ty: DimType, value: u64) -> String {
    match ty {
        DimType::Int => value.to_string(),
        DimType::Str => format!("v{value:04}"),
        DimType::Date => {
            let year = 2020 + value / 336;
            let month = 1 + (value % 336) / 28;
            let day = 1 + value % 28;
            format!("{year:04}{month:02}{day:02}")
        }
    }
}

/// Writes `rows` synthetic tuples: dimension values drawn uniformly from
/// their cardinality, integer measures uniform in 1..=50. Deterministic for
/// a given seed.
pub fn generate_synthetic(
    schema: &Schema,
    rows: u64,
    cardinalities: &[u64],
    seed: u64,
    out: &Path,
) -> Result<()> {
    let dims = schema.dimensions();
    if cardinalities.len() != dims.len() {
        return Err(Error::Config(format!(
            "expected {} cardinalities, got {}",
            dims.len(),
            cardinalities.len()
        )));
    }
    if cardinalities.iter().any(|&c| c == 0) {
        return Err(Error::Config("cardinalities must be at least 1".into()));
    }
    let measure_count = schema.measure_names().len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut writer = BufWriter::new(file);
    for _ in 0..rows {
        let mut fields: Vec<String> = Vec::with_capacity(schema.columns.len());
        let mut dim_idx = 0usize;
        let mut measures_written = 0usize;
        for column in &schema.columns {
            match column {
                Column::Dim { ty, .. } => {
                    let card = cardinalities[dim_idx];
                    let value = rng.gen_range(0..card);
                    fields.push(render_dim_value(*ty, value));
                    dim_idx += 1;
                }
                Column::Measure { .. } => {
                    fields.push(rng.gen_range(1..=50i64).to_string());
                    measures_written += 1;
                }
            }
        }
        debug_assert_eq!(measures_written, measure_count);
        writeln!(writer, "{}", fields.join("\t")).map_err(|e| Error::io(out, e))?;
    }
    writer.flush().map_err(|e| Error::io(out, e))?;
    Ok(())
}

/// Splits a dataset into disjoint base and delta files. The delta receives
/// `round(fraction * rows / (1 + fraction))` rows (at least 1 and at most
/// rows - 1 whenever the file has 2+ rows), selected by seeded sampling;
/// both outputs preserve the original line order.
pub fn split_delta(
    input: &Path,
    base_out: &Path,
    delta_out: &Path,
    fraction: f64,
    seed: u64,
) -> Result<(u64, u64)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} out of (0, 1]")));
    }
    let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let lines: Vec<&str> = text.lines().collect();
    let rows = lines.len();

    let mut delta_count = (fraction * rows as f64 / (1.0 + fraction)).round() as usize;
    if rows >= 2 {
        delta_count = delta_count.clamp(1, rows - 1);
    } else {
        delta_count = 0;
    }

    let mut indices: Vec<usize> = (0..rows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    let mut to_delta = vec![false; rows];
    for &idx in indices.iter().take(delta_count) {
        to_delta[idx] = true;
    }

    let mut base = BufWriter::new(File::create(base_out).map_err(|e| Error::io(base_out, e))?);
    let mut delta = BufWriter::new(File::create(delta_out).map_err(|e| Error::io(delta_out, e))?);
    for (idx, line) in lines.iter().enumerate() {
        let w = if to_delta[idx] { &mut delta } else { &mut base };
        writeln!(w, "{line}").map_err(|e| Error::io(delta_out, e))?;
    }
    base.flush().map_err(|e| Error::io(base_out, e))?;
    delta.flush().map_err(|e| Error::io(delta_out, e))?;
    Ok(((rows - delta_count) as u64, delta_count as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lineitem_schema() -> Schema {
        Schema::parse(
            "dim partkey int\ndim orderkey int\ndim suppkey string\ndim shipdate date\nmeasure quantity\n",
        )
        .unwrap()
    }

    #[test]
    fn schema_roundtrip_and_accessors() {
        let schema = lineitem_schema();
        assert_eq!(schema.dim_names(), ["partkey", "orderkey", "suppkey", "shipdate"]);
        assert_eq!(schema.measure_names(), ["quantity"]);
        let reparsed = Schema::parse(&schema.render()).unwrap();
        assert_eq!(reparsed.columns, schema.columns);
    }

    #[test]
    fn schema_rejects_bad_configs() {
        assert!(Schema::parse("dim a int\n").is_err()); // no measure
        assert!(Schema::parse("measure m\n").is_err()); // no dim
        assert!(Schema::parse("dim a int\ndim a string\nmeasure m\n").is_err());
        assert!(Schema::parse("dim all int\nmeasure m\n").is_err());
        assert!(Schema::parse("dim a bogus\nmeasure m\n").is_err());
    }

    #[test]
    fn parse_line_typed_fields() {
        let schema = lineitem_schema();
        let tuple = schema.parse_line("12\t34\tsup-7\t1998-01-02\t5").unwrap();
        assert_eq!(
            tuple.dims,
            vec![
                DimValue::Int(12),
                DimValue::Int(34),
                DimValue::Str("sup-7".into()),
                DimValue::Int(19980102),
            ]
        );
        assert_eq!(tuple.measures, vec![Num::Int(5)]);
        // integer-form date also accepted
        let tuple = schema.parse_line("12\t34\tx\t19980102\t5").unwrap();
        assert_eq!(tuple.dims[3], DimValue::Int(19980102));
    }

    #[test]
    fn parse_line_rejects_malformed() {
        let schema = lineitem_schema();
        assert!(schema.parse_line("12\t34\tx\t19980102").is_err()); // missing measure
        assert!(schema.parse_line("12\t34\tx\t19980102\t5\t6").is_err()); // extra
        assert!(schema.parse_line("oops\t34\tx\t19980102\t5").is_err()); // bad int
        assert!(schema.parse_line("").is_err());
    }

    #[test]
    fn generator_is_deterministic_and_parsable() {
        let dir = tempfile::tempdir().unwrap();
        let schema = lineitem_schema();
        let a = dir.path().join("a.tsv");
        let b = dir.path().join("b.tsv");
        generate_synthetic(&schema, 500, &[50, 100, 25, 30], 7, &a).unwrap();
        generate_synthetic(&schema, 500, &[50, 100, 25, 30], 7, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

        let dataset = parse_dataset(&a).unwrap();
        let tuples: Vec<Tuple> = dataset.stream(&schema).unwrap().map(|t| t.unwrap()).collect();
        assert_eq!(tuples.len(), 500);
        for t in &tuples {
            match t.measures[0] {
                Num::Int(v) => assert!((1..=50).contains(&v)),
                Num::Float(_) => panic!("synthetic measures are integers"),
            }
        }
    }

    #[test]
    fn generator_cardinality_one_collapses_keys() {
        let dir = tempfile::tempdir().unwrap();
        let schema = Schema::parse("dim a int\ndim b string\nmeasure m\n").unwrap();
        let out = dir.path().join("one.tsv");
        generate_synthetic(&schema, 50, &[1, 1], 3, &out).unwrap();
        let dataset = parse_dataset(&out).unwrap();
        let mut keys = std::collections::HashSet::new();
        for t in dataset.stream(&schema).unwrap() {
            keys.insert(t.unwrap().dims.clone());
        }
        assert_eq!(keys.len(), 1);
    }

    #[test]
    fn split_preserves_multiset_union() {
        let dir = tempfile::tempdir().unwrap();
        let schema = lineitem_schema();
        let input = dir.path().join("in.tsv");
        generate_synthetic(&schema, 200, &[5, 5, 5, 5], 11, &input).unwrap();
        let base = dir.path().join("base.tsv");
        let delta = dir.path().join("delta.tsv");
        let (b, d) = split_delta(&input, &base, &delta, 0.2, 42).unwrap();
        assert_eq!(b + d, 200);
        // 0.2 * 200 / 1.2 = 33.3 -> 33
        assert_eq!(d, 33);

        let mut all: Vec<String> = fs::read_to_string(&base)
            .unwrap()
            .lines()
            .chain(fs::read_to_string(&delta).unwrap().lines())
            .map(|s| s.to_string())
            .collect();
        let mut original: Vec<String> =
            fs::read_to_string(&input).unwrap().lines().map(|s| s.to_string()).collect();
        all.sort();
        original.sort();
        assert_eq!(all, original);
    }

    #[test]
    fn split_full_fraction_gives_equal_halves() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.tsv");
        fs::write(&input, (0..10).map(|i| format!("{i}\t1\n")).collect::<String>()).unwrap();
        let (b, d) = split_delta(
            &input,
            &dir.path().join("b.tsv"),
            &dir.path().join("d.tsv"),
            1.0,
            1,
        )
        .unwrap();
        assert_eq!((b, d), (5, 5));
    }

    #[test]
    fn split_tiny_file_keeps_delta_nonempty() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.tsv");
        fs::write(&input, "1\t1\n2\t2\n").unwrap();
        let (b, d) = split_delta(
            &input,
            &dir.path().join("b.tsv"),
            &dir.path().join("d.tsv"),
            0.001,
            1,
        )
        .unwrap();
        assert_eq!((b, d), (1, 1));
    }

    #[test]
    fn missing_dataset_is_a_config_error() {
        assert!(matches!(
            parse_dataset(Path::new("/nonexistent/x.tsv")),
            Err(Error::Config(_))
        ));
    }
}
