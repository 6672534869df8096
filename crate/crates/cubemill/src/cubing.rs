//! The batched cubing job: map emission per batch, offset+hash
//! partitioning, combining, and a streaming reduce that computes every
//! cuboid of a batch from one sorted pass.
//!
//! Records carry one aggregate state per configured function. Sortedness by
//! the descendant's dimensions makes every ancestor's group contiguous, so
//! each ancestor needs exactly one open accumulator: a prefix change marks
//! the open cell ready and emits it. The grand-total ("all") cuboid is
//! computed in a reserved partition one past the allocated reducer range.
//!
//! MEDIAN rule (shared with the verification oracle, implemented
//! independently there): the median of an even-sized group is the
//! arithmetic mean of the two middle values; integer pairs whose sum is
//! even stay integers.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::balancer::AllocationPlan;
use crate::dataio::Schema;
use crate::engine::record::{
    encode_ordered, fnv1a64, read_cell, write_cell, Cell, DimValue, Key, Num, Record,
};
use crate::engine::{GroupIter, JobLogic, MapItem, TaskCtx};
use crate::error::{Error, Result};
use crate::lattice::Cuboid;
use crate::localstore::StoreManager;
use crate::planner::BatchPlan;

/// Holistic accumulators buffer raw values; beyond this many the job aborts
/// rather than silently degrading.
pub const MEDIAN_BUFFER_LIMIT: usize = 1_000_000;

/// Aggregate operator kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggOp {
    Sum,
    Count,
    Min,
    Max,
    Avg,
    Median,
}

/// Aggregate classes: mergeable directly, mergeable via a bounded carrier,
/// or requiring all values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggClass {
    Distributive,
    Algebraic,
    Holistic,
}

/// How a function's views are maintained under deltas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaintMode {
    Incremental,
    Recompute,
}

impl AggOp {
    pub fn name(&self) -> &'static str {
        match self {
            AggOp::Sum => "sum",
            AggOp::Count => "count",
            AggOp::Min => "min",
            AggOp::Max => "max",
            AggOp::Avg => "avg",
            AggOp::Median => "median",
        }
    }

    pub fn parse(name: &str) -> Result<AggOp> {
        match name.to_ascii_lowercase().as_str() {
            "sum" => Ok(AggOp::Sum),
            "count" => Ok(AggOp::Count),
            "min" => Ok(AggOp::Min),
            "max" => Ok(AggOp::Max),
            "avg" => Ok(AggOp::Avg),
            "median" => Ok(AggOp::Median),
            other => Err(Error::Config(format!("unknown aggregate function {other:?}"))),
        }
    }

    pub fn class(&self) -> AggClass {
        match self {
            AggOp::Sum | AggOp::Count | AggOp::Min | AggOp::Max => AggClass::Distributive,
            AggOp::Avg => AggClass::Algebraic,
            AggOp::Median => AggClass::Holistic,
        }
    }

    /// Safe to pre-aggregate in a combiner.
    pub fn combinable(&self) -> bool {
        !matches!(self, AggOp::Median)
    }

    pub fn incremental_capable(&self) -> bool {
        !matches!(self, AggOp::Median)
    }
}

/// One configured aggregate: an operator bound to a measure column plus its
/// maintenance mode.
#[derive(Debug, Clone, PartialEq)]
pub struct FuncSpec {
    pub op: AggOp,
    /// Measure column index in the schema; `None` only for COUNT.
    pub measure: Option<usize>,
    pub measure_name: Option<String>,
    pub maintenance: MaintMode,
}

impl FuncSpec {
    /// Parses `sum(qty)`, `count`, or `sum(qty):recompute`. A bare operator
    /// binds to the first measure; MEDIAN always maintains by recompute.
    pub fn parse(text: &str, schema: &Schema) -> Result<FuncSpec> {
        let (body, mode) = match text.split_once(':') {
            Some((body, mode)) => (body.trim(), Some(mode.trim())),
            None => (text.trim(), None),
        };
        let (op_name, arg) = match body.split_once('(') {
            Some((op, rest)) => {
                let arg = rest
                    .strip_suffix(')')
                    .ok_or_else(|| Error::Config(format!("unbalanced parens in {text:?}")))?;
                (op.trim(), Some(arg.trim()))
            }
            None => (body, None),
        };
        let op = AggOp::parse(op_name)?;
        let (measure, measure_name) = match (op, arg) {
            (AggOp::Count, None) => (None, None),
            (_, Some(name)) => {
                let idx = schema.measure_index(name).ok_or_else(|| {
                    Error::Config(format!("unknown measure {name:?} in {text:?}"))
                })?;
                (Some(idx), Some(name.to_string()))
            }
            (_, None) => {
                let names = schema.measure_names();
                (Some(0), Some(names[0].clone()))
            }
        };
        let maintenance = match mode {
            None => match op {
                AggOp::Median => MaintMode::Recompute,
                _ => MaintMode::Incremental,
            },
            Some("incremental") => {
                if !op.incremental_capable() {
                    return Err(Error::Config(format!(
                        "{} cannot be maintained incrementally",
                        op.name()
                    )));
                }
                MaintMode::Incremental
            }
            Some("recompute") => MaintMode::Recompute,
            Some(other) => {
                return Err(Error::Config(format!("unknown maintenance mode {other:?}")))
            }
        };
        Ok(FuncSpec { op, measure, measure_name, maintenance })
    }

    pub fn render(&self) -> String {
        match &self.measure_name {
            Some(name) => format!("{}({name})", self.op.name()),
            None => self.op.name().to_string(),
        }
    }

    pub fn init_state(&self, measures: &[Num]) -> AggState {
        let value = self.measure.map(|m| measures[m]);
        match self.op {
            AggOp::Sum => AggState::Sum(value.unwrap()),
            AggOp::Count => AggState::Count(1),
            AggOp::Min => AggState::Min(value.unwrap()),
            AggOp::Max => AggState::Max(value.unwrap()),
            AggOp::Avg => AggState::Avg { sum: value.unwrap(), count: 1 },
            AggOp::Median => AggState::Median(vec![value.unwrap()]),
        }
    }
}

/// Parses a comma-separated function list.
pub fn parse_func_specs(text: &str, schema: &Schema) -> Result<Vec<FuncSpec>> {
    let specs: Vec<FuncSpec> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| FuncSpec::parse(s, schema))
        .collect::<Result<_>>()?;
    if specs.is_empty() {
        return Err(Error::Config("at least one aggregate function required".into()));
    }
    Ok(specs)
}

/// Running aggregate state, one per configured function.
#[derive(Debug, Clone, PartialEq)]
pub enum AggState {
    Sum(Num),
    Count(i64),
    Min(Num),
    Max(Num),
    Avg { sum: Num, count: i64 },
    Median(Vec<Num>),
}

impl AggState {
    pub fn merge(&mut self, other: &AggState) -> Result<()> {
        match (self, other) {
            (AggState::Sum(a), AggState::Sum(b)) => *a = a.add(*b),
            (AggState::Count(a), AggState::Count(b)) => *a += b,
            (AggState::Min(a), AggState::Min(b)) => {
                if b.total_cmp(a).is_lt() {
                    *a = *b;
                }
            }
            (AggState::Max(a), AggState::Max(b)) => {
                if b.total_cmp(a).is_gt() {
                    *a = *b;
                }
            }
            (AggState::Avg { sum, count }, AggState::Avg { sum: s2, count: c2 }) => {
                *sum = sum.add(*s2);
                *count += c2;
            }
            (AggState::Median(a), AggState::Median(b)) => {
                if a.len() + b.len() > MEDIAN_BUFFER_LIMIT {
                    return Err(Error::Job(format!(
                        "median accumulator exceeded {MEDIAN_BUFFER_LIMIT} buffered values"
                    )));
                }
                a.extend_from_slice(b);
            }
            (a, b) => {
                return Err(Error::Internal(format!(
                    "mismatched aggregate states {a:?} vs {b:?}"
                )))
            }
        }
        Ok(())
    }

    /// Closes the state into its reported value.
    pub fn finalize(&self) -> Num {
        match self {
            AggState::Sum(v) | AggState::Min(v) | AggState::Max(v) => *v,
            AggState::Count(c) => Num::Int(*c),
            AggState::Avg { sum, count } => Num::Float(sum.as_f64() / *count as f64),
            AggState::Median(values) => median_of(values),
        }
    }

    /// Replaces a holistic buffer with the single value that finalizes to
    /// the same result, shrinking emitted cells.
    pub fn collapse(self) -> AggState {
        match self {
            AggState::Median(values) => AggState::Median(vec![median_of(&values)]),
            other => other,
        }
    }
}

fn median_of(values: &[Num]) -> Num {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        let (a, b) = (sorted[n / 2 - 1], sorted[n / 2]);
        match (a, b) {
            (Num::Int(x), Num::Int(y)) => {
                let sum = x as i128 + y as i128;
                if sum % 2 == 0 {
                    Num::Int((sum / 2) as i64)
                } else {
                    Num::Float(sum as f64 / 2.0)
                }
            }
            _ => Num::Float((a.as_f64() + b.as_f64()) / 2.0),
        }
    }
}

// ----- state vector codec ----------------------------------------------------

fn push_num(buf: &mut Vec<u8>, num: &Num) {
    match num {
        Num::Int(v) => {
            buf.push(0);
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Num::Float(v) => {
            buf.push(1);
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
}

fn pull_num(buf: &[u8], pos: &mut usize) -> Result<Num> {
    let bad = || Error::Internal("truncated aggregate state".into());
    let tag = *buf.get(*pos).ok_or_else(bad)?;
    *pos += 1;
    let bytes: [u8; 8] =
        buf.get(*pos..*pos + 8).ok_or_else(bad)?.try_into().unwrap();
    *pos += 8;
    match tag {
        0 => Ok(Num::Int(i64::from_le_bytes(bytes))),
        1 => Ok(Num::Float(f64::from_bits(u64::from_le_bytes(bytes)))),
        t => Err(Error::Internal(format!("unknown numeric tag {t}"))),
    }
}

pub fn encode_states(states: &[AggState]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(states.len() * 10 + 2);
    buf.extend_from_slice(&(states.len() as u16).to_le_bytes());
    for state in states {
        match state {
            AggState::Sum(v) => {
                buf.push(0);
                push_num(&mut buf, v);
            }
            AggState::Count(c) => {
                buf.push(1);
                buf.extend_from_slice(&c.to_le_bytes());
            }
            AggState::Min(v) => {
                buf.push(2);
                push_num(&mut buf, v);
            }
            AggState::Max(v) => {
                buf.push(3);
                push_num(&mut buf, v);
            }
            AggState::Avg { sum, count } => {
                buf.push(4);
                push_num(&mut buf, sum);
                buf.extend_from_slice(&count.to_le_bytes());
            }
            AggState::Median(values) => {
                buf.push(5);
                buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
                for v in values {
                    push_num(&mut buf, v);
                }
            }
        }
    }
    buf
}

pub fn decode_states(buf: &[u8]) -> Result<Vec<AggState>> {
    let bad = || Error::Internal("truncated aggregate state vector".into());
    let mut pos = 0usize;
    let count =
        u16::from_le_bytes(buf.get(..2).ok_or_else(bad)?.try_into().unwrap()) as usize;
    pos += 2;
    let mut states = Vec::with_capacity(count);
    for _ in 0..count {
        let tag = *buf.get(pos).ok_or_else(bad)?;
        pos += 1;
        let state = match tag {
            0 => AggState::Sum(pull_num(buf, &mut pos)?),
            1 => {
                let bytes: [u8; 8] = buf.get(pos..pos + 8).ok_or_else(bad)?.try_into().unwrap();
                pos += 8;
                AggState::Count(i64::from_le_bytes(bytes))
            }
            2 => AggState::Min(pull_num(buf, &mut pos)?),
            3 => AggState::Max(pull_num(buf, &mut pos)?),
            4 => {
                let sum = pull_num(buf, &mut pos)?;
                let bytes: [u8; 8] = buf.get(pos..pos + 8).ok_or_else(bad)?.try_into().unwrap();
                pos += 8;
                AggState::Avg { sum, count: i64::from_le_bytes(bytes) }
            }
            5 => {
                let len_bytes: [u8; 4] =
                    buf.get(pos..pos + 4).ok_or_else(bad)?.try_into().unwrap();
                pos += 4;
                let len = u32::from_le_bytes(len_bytes) as usize;
                let mut values = Vec::with_capacity(len);
                for _ in 0..len {
                    values.push(pull_num(buf, &mut pos)?);
                }
                AggState::Median(values)
            }
            t => return Err(Error::Internal(format!("unknown state tag {t}"))),
        };
        states.push(state);
    }
    Ok(states)
}

/// Merges every state vector in `values` into one.
pub fn merge_encoded(values: &[Vec<u8>]) -> Result<Vec<u8>> {
    let mut acc = decode_states(&values[0])?;
    for value in &values[1..] {
        let other = decode_states(value)?;
        if other.len() != acc.len() {
            return Err(Error::Internal("state vector arity mismatch".into()));
        }
        for (a, b) in acc.iter_mut().zip(&other) {
            a.merge(b)?;
        }
    }
    Ok(encode_states(&acc))
}

// ----- the cubing job ---------------------------------------------------------

/// What the refresh phase does with reduce output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefreshMode {
    None,
    /// Cache the (projected) reduce output cells as the partition's views.
    CacheViews,
    /// Merge reduce output (a delta view) into the cached views, updating
    /// both the cache and the partition's output cells.
    MergeDeltaViews,
}

/// The cubing job logic driven by the engine.
pub struct CubeGenJob {
    /// Application whose local stores the refresh phase touches.
    pub app: String,
    pub schema: Schema,
    pub plan: BatchPlan,
    pub alloc: AllocationPlan,
    /// Record value layout: one state per carried spec.
    pub carried: Vec<FuncSpec>,
    /// Indices into `carried` whose columns reduce emits to cells.
    pub emitted: Vec<usize>,
    /// Positions within the emitted columns cached as partition views.
    pub cached: Vec<usize>,
    pub refresh_mode: RefreshMode,
    /// Keep one tuple in every `n` (profiling sample); `None` keeps all.
    pub sample_every: Option<u64>,
    /// Number of the "all" cuboid under the plan's numbering.
    all_number: u32,
}

impl CubeGenJob {
    pub fn new(
        app: &str,
        schema: Schema,
        plan: BatchPlan,
        alloc: AllocationPlan,
        carried: Vec<FuncSpec>,
    ) -> Self {
        let emitted = (0..carried.len()).collect();
        let all_number = plan.numbering.len() as u32 - 1;
        CubeGenJob {
            app: app.to_string(),
            schema,
            plan,
            alloc,
            carried,
            emitted,
            cached: Vec::new(),
            refresh_mode: RefreshMode::None,
            sample_every: None,
            all_number,
        }
    }

    /// Total partitions: the allocated reducer range plus the reserved
    /// grand-total unit.
    pub fn partitions(&self) -> u32 {
        self.alloc.total() + 1
    }

    /// The reserved partition (and batch sentinel) for the "all" cuboid.
    pub fn all_unit(&self) -> u32 {
        self.plan.batches.len() as u32
    }

    pub fn combinable(&self) -> bool {
        self.carried.iter().all(|s| s.op.combinable())
    }

    pub fn with_cached_specs(mut self, cached: Vec<usize>, mode: RefreshMode) -> Self {
        self.cached = cached;
        self.refresh_mode = mode;
        self
    }

    fn batch_key(&self, batch_idx: usize, dims: &[DimValue]) -> Key {
        let sort_dims = self.plan.batches[batch_idx].sort_dims();
        Key(sort_dims.dims().iter().map(|&d| dims[d as usize].clone()).collect())
    }

    fn emit_states(&self, measures: &[Num]) -> Vec<u8> {
        let states: Vec<AggState> =
            self.carried.iter().map(|spec| spec.init_state(measures)).collect();
        encode_states(&states)
    }
}

impl JobLogic for CubeGenJob {
    fn map(
        &self,
        item: MapItem<'_>,
        ctx: &mut TaskCtx,
        emit: &mut dyn FnMut(Record),
    ) -> Result<()> {
        let MapItem::Line(line) = item else {
            return Err(Error::Internal("cubing job expects text input".into()));
        };
        if let Some(every) = self.sample_every {
            // systematic 1-in-s sampling over this task's input stream
            let seen = ctx.counters.get("input_tuples_read");
            if (seen - 1) % every != 0 {
                return Ok(());
            }
            ctx.counters.add("sampled_tuples", 1);
        }
        let tuple = match self.schema.parse_line(line) {
            Ok(t) => t,
            Err(e) => {
                ctx.reject(line, &e.to_string());
                return Ok(());
            }
        };
        let value = self.emit_states(&tuple.measures);
        for batch in &self.plan.batches {
            emit(Record {
                key: self.batch_key(batch.index, &tuple.dims),
                batch: batch.index as u32,
                value: value.clone(),
            });
        }
        // the independent grand-total unit
        emit(Record { key: Key(Vec::new()), batch: self.all_unit(), value });
        Ok(())
    }

    fn combine(&self, _key: &Key, _batch: u32, values: &[Vec<u8>]) -> Result<Vec<u8>> {
        merge_encoded(values)
    }

    fn partition(&self, record: &Record) -> Result<u32> {
        if record.batch == self.all_unit() {
            return Ok(self.alloc.total());
        }
        let batch = self
            .plan
            .batches
            .get(record.batch as usize)
            .ok_or_else(|| Error::Job(format!("unknown batch id {}", record.batch)))?;
        let width = batch.partition_dims().arity();
        let hash = fnv1a64(&encode_ordered(record.key.prefix(width)));
        let reducers = self.alloc.reducers(batch.index) as u64;
        Ok(self.alloc.offset(batch.index) + (hash % reducers) as u32)
    }

    fn reduce(
        &self,
        partition: u32,
        groups: &mut GroupIter<'_>,
        out_dir: &Path,
        ctx: &mut TaskCtx,
    ) -> Result<()> {
        if partition == self.alloc.total() {
            return self.reduce_all_unit(partition, groups, out_dir, ctx);
        }
        let batch_idx = self.alloc.batch_of_partition(partition).ok_or_else(|| {
            Error::Internal(format!("partition {partition} outside allocation"))
        })?;
        let batch = &self.plan.batches[batch_idx];
        let descendant = batch.sort_dims();
        let members = batch.cuboids.len() as u64;

        let mut writers = CellWriters::new(out_dir);
        // one open accumulator per ancestor, longest first
        let mut open: Vec<AncestorAcc> = batch.cuboids[1..]
            .iter()
            .map(|cuboid| AncestorAcc {
                number: self.plan.numbering.number_of(cuboid),
                width: cuboid.arity(),
                prefix: None,
                states: Vec::new(),
            })
            .collect();
        ctx.counters.max("accumulators_open_max", open.len() as u64);

        while let Some((key, values)) = groups.next_group()? {
            ctx.counters.add("reduce_groups", 1);
            ctx.counters
                .add(&format!("reduce_processed_records.p{partition}"), values.len() as u64 * members);
            let mut group_states = decode_states(&values[0].1)?;
            for (_, value) in &values[1..] {
                let other = decode_states(value)?;
                for (a, b) in group_states.iter_mut().zip(&other) {
                    a.merge(b)?;
                }
            }
            // the descendant's cell is complete per input group
            self.write_projected(
                &mut writers,
                self.plan.numbering.number_of(descendant),
                &key,
                &group_states,
            )?;
            for acc in &mut open {
                let prefix = key.prefix(acc.width);
                let boundary = acc.prefix.as_deref() != Some(prefix);
                if boundary {
                    if let Some(done) = acc.take()? {
                        self.write_projected(&mut writers, acc.number, &done.0, &done.1)?;
                    }
                    acc.prefix = Some(prefix.to_vec());
                    acc.states = group_states.clone();
                } else {
                    for (a, b) in acc.states.iter_mut().zip(&group_states) {
                        a.merge(b)?;
                    }
                }
            }
        }
        for acc in &mut open {
            if let Some(done) = acc.take()? {
                self.write_projected(&mut writers, acc.number, &done.0, &done.1)?;
            }
        }
        writers.close()
    }

    fn refresh(
        &self,
        partition: u32,
        node: usize,
        out_dir: &Path,
        store: &StoreManager,
        ctx: &mut TaskCtx,
    ) -> Result<Vec<(u32, PathBuf)>> {
        match self.refresh_mode {
            RefreshMode::None => Ok(Vec::new()),
            RefreshMode::CacheViews => self.stage_cached_views(out_dir, ctx),
            RefreshMode::MergeDeltaViews => {
                self.merge_into_cached_views(partition, node, out_dir, store, ctx)
            }
        }
    }
}

struct AncestorAcc {
    number: u32,
    width: usize,
    prefix: Option<Vec<DimValue>>,
    states: Vec<AggState>,
}

impl AncestorAcc {
    fn take(&mut self) -> Result<Option<(Key, Vec<AggState>)>> {
        match self.prefix.take() {
            Some(prefix) => Ok(Some((Key(prefix), std::mem::take(&mut self.states)))),
            None => Ok(None),
        }
    }
}

struct CellWriters {
    dir: PathBuf,
    writers: BTreeMap<u32, BufWriter<File>>,
}

impl CellWriters {
    fn new(dir: &Path) -> Self {
        CellWriters { dir: dir.to_path_buf(), writers: BTreeMap::new() }
    }

    fn write(&mut self, cuboid: u32, cell: &Cell) -> Result<()> {
        if !self.writers.contains_key(&cuboid) {
            let path = self.dir.join(format!("c{cuboid}.cells"));
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            self.writers.insert(cuboid, BufWriter::new(file));
        }
        let writer = self.writers.get_mut(&cuboid).unwrap();
        write_cell(writer, cell).map_err(|e| Error::io(&self.dir, e))?;
        Ok(())
    }

    fn close(mut self) -> Result<()> {
        for (_, writer) in self.writers.iter_mut() {
            writer.flush().map_err(|e| Error::io(&self.dir, e))?;
        }
        Ok(())
    }
}

impl CubeGenJob {
    fn write_projected(
        &self,
        writers: &mut CellWriters,
        cuboid: u32,
        key: &Key,
        states: &[AggState],
    ) -> Result<()> {
        let projected: Vec<AggState> =
            self.emitted.iter().map(|&i| states[i].clone().collapse()).collect();
        writers.write(cuboid, &Cell { key: key.clone(), value: encode_states(&projected) })
    }

    fn reduce_all_unit(
        &self,
        partition: u32,
        groups: &mut GroupIter<'_>,
        out_dir: &Path,
        ctx: &mut TaskCtx,
    ) -> Result<()> {
        let mut acc: Option<Vec<AggState>> = None;
        while let Some((_, values)) = groups.next_group()? {
            ctx.counters.add("reduce_groups", 1);
            ctx.counters
                .add(&format!("reduce_processed_records.p{partition}"), values.len() as u64);
            for (_, value) in &values {
                let states = decode_states(value)?;
                match &mut acc {
                    None => acc = Some(states),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&states) {
                            a.merge(b)?;
                        }
                    }
                }
            }
        }
        let mut writers = CellWriters::new(out_dir);
        if let Some(states) = acc {
            self.write_projected(&mut writers, self.all_number, &Key(Vec::new()), &states)?;
        }
        writers.close()
    }

    /// Projects the emitted cells down to the cached columns and stages
    /// them as the partition's view files.
    fn stage_cached_views(
        &self,
        out_dir: &Path,
        _ctx: &mut TaskCtx,
    ) -> Result<Vec<(u32, PathBuf)>> {
        if self.cached.is_empty() {
            return Ok(Vec::new());
        }
        let mut staged = Vec::new();
        for entry in list_cell_files(out_dir)? {
            let (cuboid, path) = entry;
            let staged_path = out_dir.join(format!(".staged_c{cuboid}.cells"));
            let mut writer = BufWriter::new(
                File::create(&staged_path).map_err(|e| Error::io(&staged_path, e))?,
            );
            let mut reader =
                BufReader::new(File::open(&path).map_err(|e| Error::io(&path, e))?);
            while let Some(cell) = read_cell(&mut reader)? {
                let states = decode_states(&cell.value)?;
                let projected: Vec<AggState> =
                    self.cached.iter().map(|&i| states[i].clone()).collect();
                write_cell(&mut writer, &Cell { key: cell.key, value: encode_states(&projected) })
                    .map_err(|e| Error::io(&staged_path, e))?;
            }
            writer.flush().map_err(|e| Error::io(&staged_path, e))?;
            staged.push((cuboid, staged_path));
        }
        Ok(staged)
    }

    /// Linear merge join of this job's delta view cells with the cached
    /// view cells; rewrites the partition output to the merged views and
    /// stages them for the store.
    fn merge_into_cached_views(
        &self,
        partition: u32,
        node: usize,
        out_dir: &Path,
        store: &StoreManager,
        ctx: &mut TaskCtx,
    ) -> Result<Vec<(u32, PathBuf)>> {
        let entry = store.entry(node, &self.app, partition)?;
        let mut cached_by_cuboid: BTreeMap<u32, PathBuf> = BTreeMap::new();
        if let Some(entry) = &entry {
            for view in &entry.views {
                if let Some(num) = cell_file_number(view) {
                    cached_by_cuboid.insert(num, view.clone());
                }
            }
        }
        let mut delta_by_cuboid: BTreeMap<u32, PathBuf> = BTreeMap::new();
        for (cuboid, path) in list_cell_files(out_dir)? {
            delta_by_cuboid.insert(cuboid, path);
        }

        let mut staged = Vec::new();
        let cuboids: Vec<u32> =
            cached_by_cuboid.keys().chain(delta_by_cuboid.keys()).copied().collect();
        let mut seen = std::collections::BTreeSet::new();
        for cuboid in cuboids {
            if !seen.insert(cuboid) {
                continue;
            }
            let staged_path = out_dir.join(format!(".staged_c{cuboid}.cells"));
            let merges = merge_view_files(
                cached_by_cuboid.get(&cuboid),
                delta_by_cuboid.get(&cuboid),
                &staged_path,
            )?;
            ctx.counters.add("refresh_merges", merges);
            // the merged view is also this partition's final output
            let out_path = out_dir.join(format!("c{cuboid}.cells"));
            fs::copy(&staged_path, &out_path).map_err(|e| Error::io(&staged_path, e))?;
            staged.push((cuboid, staged_path));
        }
        Ok(staged)
    }
}

/// Merges an optional cached view file with an optional delta view file
/// into `out`, applying each function's merge rule on matching keys.
/// Returns the number of keys present on both sides.
fn merge_view_files(
    cached: Option<&PathBuf>,
    delta: Option<&PathBuf>,
    out: &Path,
) -> Result<u64> {
    let mut writer = BufWriter::new(File::create(out).map_err(|e| Error::io(out, e))?);
    let mut merges = 0u64;

    let mut cached_iter = CellFileIter::open(cached)?;
    let mut delta_iter = CellFileIter::open(delta)?;
    let mut left = cached_iter.next_cell()?;
    let mut right = delta_iter.next_cell()?;
    loop {
        match (&left, &right) {
            (None, None) => break,
            (Some(_), None) => {
                write_cell(&mut writer, left.as_ref().unwrap()).map_err(|e| Error::io(out, e))?;
                left = cached_iter.next_cell()?;
            }
            (None, Some(_)) => {
                write_cell(&mut writer, right.as_ref().unwrap()).map_err(|e| Error::io(out, e))?;
                right = delta_iter.next_cell()?;
            }
            (Some(l), Some(r)) => match l.key.cmp(&r.key) {
                std::cmp::Ordering::Less => {
                    write_cell(&mut writer, l).map_err(|e| Error::io(out, e))?;
                    left = cached_iter.next_cell()?;
                }
                std::cmp::Ordering::Greater => {
                    write_cell(&mut writer, r).map_err(|e| Error::io(out, e))?;
                    right = delta_iter.next_cell()?;
                }
                std::cmp::Ordering::Equal => {
                    let mut states = decode_states(&l.value)?;
                    let other = decode_states(&r.value)?;
                    for (a, b) in states.iter_mut().zip(&other) {
                        a.merge(b)?;
                    }
                    write_cell(
                        &mut writer,
                        &Cell { key: l.key.clone(), value: encode_states(&states) },
                    )
                    .map_err(|e| Error::io(out, e))?;
                    merges += 1;
                    left = cached_iter.next_cell()?;
                    right = delta_iter.next_cell()?;
                }
            },
        }
    }
    writer.flush().map_err(|e| Error::io(out, e))?;
    Ok(merges)
}

struct CellFileIter {
    reader: Option<BufReader<File>>,
}

impl CellFileIter {
    fn open(path: Option<&PathBuf>) -> Result<Self> {
        let reader = match path {
            Some(path) => {
                Some(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
            }
            None => None,
        };
        Ok(CellFileIter { reader })
    }

    fn next_cell(&mut self) -> Result<Option<Cell>> {
        match &mut self.reader {
            Some(reader) => read_cell(reader),
            None => Ok(None),
        }
    }
}

/// Cell files named `c<number>.cells` in a directory, ascending by number.
pub fn list_cell_files(dir: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if let Some(num) = cell_file_number(&path) {
            out.push((num, path));
        }
    }
    out.sort();
    Ok(out)
}

fn cell_file_number(path: &Path) -> Option<u32> {
    let name = path.file_name()?.to_str()?;
    let stem = name.strip_suffix(".cells")?;
    stem.strip_prefix('c')?.parse().ok()
}
