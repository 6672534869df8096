//! The single-process map / merge / reduce / refresh framework.
//!
//! A job splits its input into byte ranges, maps each split into typed
//! records, sorts and partitions them into spill runs (combining equal keys
//! when the job allows it), then per partition merge-sorts all runs - plus
//! any cached runs registered in the partition's local store when replay
//! merging is on - and feeds each distinct key's values to the reduce
//! callback in globally non-decreasing key order. An optional refresh phase
//! runs after reduce with access to the local store. Phases are barrier
//! synchronized; tasks within a phase run in parallel.
//!
//! "Cluster" means one process: reducer nodes are long-lived directory
//! owners, mappers are transient tasks, and shuffling hands over immutable
//! sorted-run file references instead of moving bytes.

pub mod record;
pub mod scheduler;
pub mod sort;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::localstore::StoreManager;
use record::{read_cell, Cell, Key, Record};
use scheduler::{NodeLiveness, ScheduleMode, SchedulingFactory};
use sort::{write_sorted_run, MergeIter, RunFile};

/// How tasks within a phase execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    /// Worker-thread count. Without the `parallel` feature this falls back
    /// to sequential execution.
    Parallel(usize),
}

impl ExecMode {
    pub fn workers(&self) -> usize {
        match *self {
            ExecMode::Sequential => 1,
            ExecMode::Parallel(w) => w.max(1),
        }
    }
}

/// Engine-wide settings.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub root: PathBuf,
    /// Long-lived reducer nodes owning local stores.
    pub nodes: usize,
    pub mode: ExecMode,
    /// Per-task sort buffer budget in bytes.
    pub mem_budget: usize,
    /// Transient map tasks per job.
    pub mappers: usize,
    /// When set, fresh scheduling spreads partitions over a seeded node
    /// permutation instead of the identity order.
    pub schedule_seed: Option<u64>,
}

impl EngineConfig {
    pub fn new(root: &Path) -> Self {
        EngineConfig {
            root: root.to_path_buf(),
            nodes: 4,
            mode: ExecMode::Parallel(4),
            mem_budget: 64 << 20,
            mappers: 4,
            schedule_seed: None,
        }
    }
}

/// Kinds of jobs the pipeline runs; carried for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobKind {
    Materialize,
    Profile,
    UpdateRecompute,
    UpdateIncremental,
    RefreshBaseline,
}

impl JobKind {
    pub fn label(&self) -> &'static str {
        match self {
            JobKind::Materialize => "materialize",
            JobKind::Profile => "profile",
            JobKind::UpdateRecompute => "update-recompute",
            JobKind::UpdateIncremental => "update-incremental",
            JobKind::RefreshBaseline => "refresh-baseline",
        }
    }
}

/// Everything the engine needs to run one job.
#[derive(Debug, Clone)]
pub struct JobSpec {
    pub app: String,
    pub kind: JobKind,
    pub schedule: ScheduleMode,
    pub partitions: u32,
    /// Run the job's combine callback on equal keys at spill time.
    pub combine: bool,
    /// Merge runs registered in the local store into each partition's
    /// reduce input.
    pub merge_cached_runs: bool,
    /// Register this job's shuffled runs into the local store after each
    /// partition's reduce succeeds.
    pub register_runs: bool,
    /// Invoke the refresh callback after reduce.
    pub refresh: bool,
    /// Store epoch stamped on successful commits.
    pub epoch: u64,
    /// Test hook: the first reduce attempt of this partition fails.
    pub fail_once_partition: Option<u32>,
}

impl JobSpec {
    pub fn new(app: &str, kind: JobKind, partitions: u32) -> Self {
        JobSpec {
            app: app.to_string(),
            kind,
            schedule: ScheduleMode::Fresh,
            partitions,
            combine: false,
            merge_cached_runs: false,
            register_runs: false,
            refresh: false,
            epoch: 0,
            fail_once_partition: None,
        }
    }
}

/// Job input: line-oriented text datasets or binary cell files.
#[derive(Debug, Clone)]
pub enum JobInput {
    Text(Vec<PathBuf>),
    Cells(Vec<PathBuf>),
}

/// One unit handed to the map callback.
pub enum MapItem<'a> {
    Line(&'a str),
    Cell(&'a Cell),
}

/// Monotonic counter map; rendered as `counter=<name> value=<n>` lines.
#[derive(Debug, Clone, Default)]
pub struct Counters(BTreeMap<String, u64>);

impl Counters {
    pub fn add(&mut self, name: &str, value: u64) {
        *self.0.entry(name.to_string()).or_insert(0) += value;
    }

    /// Keeps the maximum seen value (for gauges).
    pub fn max(&mut self, name: &str, value: u64) {
        let slot = self.0.entry(name.to_string()).or_insert(0);
        *slot = (*slot).max(value);
    }

    pub fn get(&self, name: &str) -> u64 {
        self.0.get(name).copied().unwrap_or(0)
    }

    pub fn merge(&mut self, other: &Counters) {
        for (name, value) in &other.0 {
            *self.0.entry(name.clone()).or_insert(0) += value;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.0.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, value) in &self.0 {
            out.push_str(&format!("counter={name} value={value}\n"));
        }
        out
    }
}

/// Per-task scratch: counters plus rejected input lines.
#[derive(Debug, Default)]
pub struct TaskCtx {
    pub counters: Counters,
    pub bad_records: Vec<String>,
}

impl TaskCtx {
    /// Records a rejected input line for the bad-records sink.
    pub fn reject(&mut self, line: &str, reason: &str) {
        self.counters.add("bad_records", 1);
        self.bad_records.push(format!("{reason}: {line}"));
    }
}

/// Streaming view of one partition's merged reduce input, grouped by key.
pub struct GroupIter<'a> {
    merge: &'a mut MergeIter,
    pending: Option<Record>,
}

impl<'a> GroupIter<'a> {
    pub fn new(merge: &'a mut MergeIter) -> Result<Self> {
        let pending = merge.next_record()?;
        Ok(GroupIter { merge, pending })
    }

    /// The next distinct key with every (batch, value) pair that carries it.
    pub fn next_group(&mut self) -> Result<Option<(Key, Vec<(u32, Vec<u8>)>)>> {
        let Some(first) = self.pending.take() else {
            return Ok(None);
        };
        let key = first.key.clone();
        let mut values = vec![(first.batch, first.value)];
        loop {
            match self.merge.next_record()? {
                Some(rec) if rec.key == key => values.push((rec.batch, rec.value)),
                next => {
                    self.pending = next;
                    break;
                }
            }
        }
        Ok(Some((key, values)))
    }
}

/// Callbacks supplying a job's computation; the engine owns the dataflow.
pub trait JobLogic: Sync {
    /// Processes one input item, emitting zero or more records.
    fn map(&self, item: MapItem<'_>, ctx: &mut TaskCtx, emit: &mut dyn FnMut(Record)) -> Result<()>;

    /// Merges the value payloads of records sharing one key (same batch).
    /// Only called when the job spec enables combining.
    fn combine(&self, _key: &Key, _batch: u32, _values: &[Vec<u8>]) -> Result<Vec<u8>> {
        Err(Error::Internal("job enabled combine without implementing it".into()))
    }

    /// Routes a record to a partition in `0..spec.partitions`.
    fn partition(&self, record: &Record) -> Result<u32>;

    /// Consumes one partition's groups in non-decreasing key order and
    /// writes its outputs under `out_dir`.
    fn reduce(
        &self,
        partition: u32,
        groups: &mut GroupIter<'_>,
        out_dir: &Path,
        ctx: &mut TaskCtx,
    ) -> Result<()>;

    /// Post-reduce phase with store access. Returns staged view files
    /// (cuboid number, finished temp path) for the engine to commit on
    /// success.
    fn refresh(
        &self,
        _partition: u32,
        _node: usize,
        _out_dir: &Path,
        _store: &StoreManager,
        _ctx: &mut TaskCtx,
    ) -> Result<Vec<(u32, PathBuf)>> {
        Ok(Vec::new())
    }
}

/// What a finished job hands back to its caller.
#[derive(Debug)]
pub struct JobResult {
    pub counters: Counters,
    /// partition -> node assignment used.
    pub assignment: Vec<usize>,
    /// Per-partition reduce output directories (may lack files for empty
    /// partitions).
    pub partition_out_dirs: Vec<PathBuf>,
    /// Per-partition merge+reduce+refresh wall time.
    pub reduce_ms: Vec<f64>,
    /// Scratch directory; caller removes it after harvesting outputs.
    pub tmp_dir: PathBuf,
}

impl JobResult {
    pub fn cleanup(&self) {
        let _ = fs::remove_dir_all(&self.tmp_dir);
    }
}

const MAX_TASK_ATTEMPTS: u32 = 3;
/// Bad-input tolerance: beyond this fraction the job aborts.
const MAX_BAD_FRACTION: f64 = 0.01;

/// The simulated cluster: scheduling factory, local stores, node liveness.
pub struct Engine {
    pub cfg: EngineConfig,
    pub factory: SchedulingFactory,
    pub stores: StoreManager,
    pub liveness: NodeLiveness,
    job_seq: AtomicU64,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Self> {
        fs::create_dir_all(&cfg.root).map_err(|e| Error::io(&cfg.root, e))?;
        let factory = SchedulingFactory::new(&cfg.root)?;
        let stores = StoreManager::new(&cfg.root)?;
        #[cfg(feature = "parallel")]
        let pool = match cfg.mode {
            ExecMode::Parallel(workers) => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers.max(1))
                    .build()
                    .map_err(|e| Error::Internal(format!("thread pool: {e}")))?,
            ),
            ExecMode::Sequential => None,
        };
        Ok(Engine {
            cfg,
            factory,
            stores,
            liveness: NodeLiveness::default(),
            job_seq: AtomicU64::new(0),
            #[cfg(feature = "parallel")]
            pool,
        })
    }

    /// Runs `count` independent tasks, in parallel when configured, and
    /// returns their outputs in task order.
    fn run_tasks<T, F>(&self, count: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| (0..count).into_par_iter().map(|i| f(i)).collect());
        }
        (0..count).map(f).collect()
    }

    /// Runs one job through map, merge, reduce, and refresh.
    pub fn run_job(&self, spec: &JobSpec, input: &JobInput, job: &dyn JobLogic) -> Result<JobResult> {
        let seq = self.job_seq.fetch_add(1, AtomicOrdering::SeqCst);
        let tmp_dir = self
            .cfg
            .root
            .join("tmp")
            .join(&spec.app)
            .join(format!("{}-{seq}", spec.kind.label()));
        fs::create_dir_all(&tmp_dir).map_err(|e| Error::io(&tmp_dir, e))?;

        let assignment = self.factory.assign(
            &spec.app,
            spec.schedule,
            spec.partitions,
            self.cfg.nodes,
            &self.liveness,
        )?;

        let mut counters = Counters::default();
        let map_outputs = self.map_phase(spec, input, job, &tmp_dir, &mut counters)?;
        let result =
            self.partition_phase(spec, job, &tmp_dir, &assignment, map_outputs, &mut counters);
        match result {
            Ok((out_dirs, reduce_ms)) => Ok(JobResult {
                counters,
                assignment,
                partition_out_dirs: out_dirs,
                reduce_ms,
                tmp_dir,
            }),
            Err(e) => {
                let _ = fs::remove_dir_all(&tmp_dir);
                Err(e)
            }
        }
    }

    // ----- map phase --------------------------------------------------------

    fn map_phase(
        &self,
        spec: &JobSpec,
        input: &JobInput,
        job: &dyn JobLogic,
        tmp_dir: &Path,
        counters: &mut Counters,
    ) -> Result<Vec<Vec<RunFile>>> {
        let splits = self.make_splits(input)?;
        let mapper_count = splits.len().max(1);
        let parts = spec.partitions as usize;

        struct MapOut {
            runs: Vec<(u32, RunFile)>,
            ctx: TaskCtx,
        }

        let outputs: Vec<MapOut> = self.run_tasks(mapper_count, |m| {
            let mut ctx = TaskCtx::default();
            let mut buffer = MapBuffer::new(spec, job, tmp_dir, m, self.cfg.mem_budget);
            if let Some(split) = splits.get(m) {
                for piece in split {
                    self.feed_split(job, piece, &mut ctx, &mut buffer)?;
                }
            }
            let runs = buffer.finish(&mut ctx)?;
            Ok(MapOut { runs, ctx })
        })?;

        let mut bad_lines = Vec::new();
        let mut per_partition: Vec<Vec<RunFile>> = vec![Vec::new(); parts];
        for out in outputs {
            counters.merge(&out.ctx.counters);
            bad_lines.extend(out.ctx.bad_records);
            for (partition, run) in out.runs {
                per_partition[partition as usize].push(run);
            }
        }

        if !bad_lines.is_empty() {
            self.append_bad_records(&spec.app, &bad_lines)?;
        }
        let read = counters.get("input_tuples_read");
        let bad = counters.get("bad_records");
        if read > 0 && (bad as f64) / (read as f64) > MAX_BAD_FRACTION {
            return Err(Error::Job(format!(
                "{bad} of {read} input records malformed (more than {:.0}%)",
                MAX_BAD_FRACTION * 100.0
            )));
        }
        Ok(per_partition)
    }

    fn feed_split(
        &self,
        job: &dyn JobLogic,
        piece: &SplitPiece,
        ctx: &mut TaskCtx,
        buffer: &mut MapBuffer<'_>,
    ) -> Result<()> {
        match piece {
            SplitPiece::TextRange { path, start, end } => {
                let file = File::open(path).map_err(|e| Error::io(path, e))?;
                let mut reader = BufReader::new(file);
                let mut pos = *start;
                if *start > 0 {
                    // consume the partial line owned by the previous split
                    reader
                        .seek(SeekFrom::Start(start - 1))
                        .map_err(|e| Error::io(path, e))?;
                    let mut skipped = Vec::new();
                    let n = reader
                        .read_until(b'\n', &mut skipped)
                        .map_err(|e| Error::io(path, e))?;
                    pos = start - 1 + n as u64;
                }
                let mut line = String::new();
                while pos < *end {
                    line.clear();
                    let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
                    if n == 0 {
                        break;
                    }
                    pos += n as u64;
                    let trimmed = line.trim_end_matches(['\n', '\r']);
                    ctx.counters.add("input_tuples_read", 1);
                    let mut sink_err = None;
                    job.map(MapItem::Line(trimmed), ctx, &mut |rec| {
                        if let Err(e) = buffer.push(rec) {
                            sink_err.get_or_insert(e);
                        }
                    })?;
                    if let Some(e) = sink_err {
                        return Err(e);
                    }
                }
                Ok(())
            }
            SplitPiece::CellFile { path } => {
                let file = File::open(path).map_err(|e| Error::io(path, e))?;
                let mut reader = BufReader::new(file);
                while let Some(cell) = read_cell(&mut reader)? {
                    ctx.counters.add("input_tuples_read", 1);
                    let mut sink_err = None;
                    job.map(MapItem::Cell(&cell), ctx, &mut |rec| {
                        if let Err(e) = buffer.push(rec) {
                            sink_err.get_or_insert(e);
                        }
                    })?;
                    if let Some(e) = sink_err {
                        return Err(e);
                    }
                }
                Ok(())
            }
        }
    }

    fn make_splits(&self, input: &JobInput) -> Result<Vec<Vec<SplitPiece>>> {
        let mappers = self.cfg.mappers.max(1);
        match input {
            JobInput::Text(paths) => {
                let mut total = 0u64;
                let mut sizes = Vec::with_capacity(paths.len());
                for path in paths {
                    let len = fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
                    sizes.push(len);
                    total += len;
                }
                if total == 0 {
                    return Ok(vec![Vec::new()]);
                }
                let chunk = total.div_ceil(mappers as u64).max(1);
                let mut splits: Vec<Vec<SplitPiece>> = vec![Vec::new(); mappers];
                let mut next = 0usize;
                for (path, len) in paths.iter().zip(sizes) {
                    let mut start = 0u64;
                    while start < len {
                        let end = (start + chunk).min(len);
                        splits[next % mappers].push(SplitPiece::TextRange {
                            path: path.clone(),
                            start,
                            end,
                        });
                        next += 1;
                        start = end;
                    }
                }
                Ok(splits)
            }
            JobInput::Cells(paths) => {
                let mut splits: Vec<Vec<SplitPiece>> = vec![Vec::new(); mappers];
                for (idx, path) in paths.iter().enumerate() {
                    splits[idx % mappers].push(SplitPiece::CellFile { path: path.clone() });
                }
                Ok(splits)
            }
        }
    }

    fn append_bad_records(&self, app: &str, lines: &[String]) -> Result<()> {
        let dir = self.stores.durable_dir(app);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("bad_records.log");
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        for line in lines {
            writeln!(file, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    // ----- merge / reduce / refresh phase ------------------------------------

    #[allow(clippy::type_complexity)]
    fn partition_phase(
        &self,
        spec: &JobSpec,
        job: &dyn JobLogic,
        tmp_dir: &Path,
        assignment: &[usize],
        map_outputs: Vec<Vec<RunFile>>,
        counters: &mut Counters,
    ) -> Result<(Vec<PathBuf>, Vec<f64>)> {
        let parts = spec.partitions as usize;

        struct PartOut {
            out_dir: PathBuf,
            elapsed_ms: f64,
            ctx: TaskCtx,
        }

        let outputs: Vec<PartOut> = self.run_tasks(parts, |p| {
            let partition = p as u32;
            let node = assignment[p];
            let mut ctx = TaskCtx::default();
            let started = Instant::now();

            // shuffled runs from this job's mappers
            let mapper_runs = &map_outputs[p];
            let mut run_paths: Vec<PathBuf> = mapper_runs.iter().map(|r| r.path.clone()).collect();
            let shuffled_bytes: u64 = mapper_runs.iter().map(|r| r.bytes).sum();
            ctx.counters.add("bytes_shuffled", shuffled_bytes);
            ctx.counters
                .add(&format!("reduce_input_records.p{partition}"), mapper_runs.iter().map(|r| r.records).sum());

            // cached runs from the local store, treated as local partitions
            if spec.merge_cached_runs {
                if let Some(entry) = self.stores.entry(node, &spec.app, partition)? {
                    ctx.counters.add("cached_runs_merged", entry.runs.len() as u64);
                    for run in &entry.runs {
                        let bytes = fs::metadata(run).map_err(|e| Error::io(run, e))?.len();
                        ctx.counters.add("cached_bytes_merged", bytes);
                    }
                    run_paths.extend(entry.runs.clone());
                }
            }

            let final_out = tmp_dir.join("out").join(format!("p{partition}"));
            let mut attempt = 0u32;
            loop {
                attempt += 1;
                let attempt_dir = tmp_dir.join("attempts").join(format!("p{partition}-a{attempt}"));
                fs::create_dir_all(&attempt_dir).map_err(|e| Error::io(&attempt_dir, e))?;
                let mut attempt_ctx = TaskCtx::default();
                let outcome = self.run_partition_attempt(
                    spec,
                    job,
                    partition,
                    node,
                    &run_paths,
                    &attempt_dir,
                    attempt,
                    &mut attempt_ctx,
                );
                match outcome {
                    Ok(staged_views) => {
                        // success: commit outputs, then the store
                        if let Some(parent) = final_out.parent() {
                            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                        }
                        fs::rename(&attempt_dir, &final_out)
                            .map_err(|e| Error::io(&attempt_dir, e))?;
                        if spec.register_runs {
                            let paths: Vec<PathBuf> =
                                mapper_runs.iter().map(|r| r.path.clone()).collect();
                            self.stores.register_runs(
                                node,
                                &spec.app,
                                partition,
                                &paths,
                                spec.epoch,
                            )?;
                        }
                        if !staged_views.is_empty() {
                            self.stores.commit_views(
                                node,
                                &spec.app,
                                partition,
                                &staged_views,
                                spec.epoch,
                            )?;
                        }
                        ctx.counters.merge(&attempt_ctx.counters);
                        ctx.bad_records.extend(attempt_ctx.bad_records);
                        break;
                    }
                    Err(e) => {
                        let _ = fs::remove_dir_all(&attempt_dir);
                        ctx.counters.add("task_retries", 1);
                        if attempt >= MAX_TASK_ATTEMPTS {
                            return Err(Error::Job(format!(
                                "partition {partition} failed after {attempt} attempts: {e}"
                            )));
                        }
                    }
                }
            }

            Ok(PartOut { out_dir: final_out, elapsed_ms: started.elapsed().as_secs_f64() * 1e3, ctx })
        })?;

        let mut out_dirs = Vec::with_capacity(parts);
        let mut reduce_ms = Vec::with_capacity(parts);
        for out in outputs {
            counters.merge(&out.ctx.counters);
            out_dirs.push(out.out_dir);
            reduce_ms.push(out.elapsed_ms);
        }
        Ok((out_dirs, reduce_ms))
    }

    #[allow(clippy::too_many_arguments)]
    fn run_partition_attempt(
        &self,
        spec: &JobSpec,
        job: &dyn JobLogic,
        partition: u32,
        node: usize,
        run_paths: &[PathBuf],
        attempt_dir: &Path,
        attempt: u32,
        ctx: &mut TaskCtx,
    ) -> Result<Vec<(u32, PathBuf)>> {
        let mut merge = MergeIter::open(run_paths)?;
        let mut groups = GroupIter::new(&mut merge)?;
        job.reduce(partition, &mut groups, attempt_dir, ctx)?;

        if spec.fail_once_partition == Some(partition) && attempt == 1 {
            return Err(Error::Job(format!(
                "injected failure for partition {partition} attempt {attempt}"
            )));
        }

        let staged = if spec.refresh {
            job.refresh(partition, node, attempt_dir, &self.stores, ctx)?
        } else {
            Vec::new()
        };
        Ok(staged)
    }
}

#[derive(Clone)]
enum SplitPiece {
    TextRange { path: PathBuf, start: u64, end: u64 },
    CellFile { path: PathBuf },
}

/// Mapper-side spill buffer: records accumulate per partition until the
/// memory budget trips, then each partition's slice is sorted (combining
/// equal keys when enabled) and written as one sorted run.
struct MapBuffer<'a> {
    spec: &'a JobSpec,
    job: &'a dyn JobLogic,
    dir: PathBuf,
    budget: usize,
    buffered: usize,
    spills: usize,
    by_partition: Vec<Vec<Record>>,
    finished: Vec<(u32, RunFile)>,
    counters: Counters,
}

impl<'a> MapBuffer<'a> {
    fn new(
        spec: &'a JobSpec,
        job: &'a dyn JobLogic,
        tmp_dir: &Path,
        mapper: usize,
        budget: usize,
    ) -> Self {
        MapBuffer {
            spec,
            job,
            dir: tmp_dir.join("map").join(format!("m{mapper}")),
            budget: budget.max(1),
            buffered: 0,
            spills: 0,
            by_partition: vec![Vec::new(); spec.partitions as usize],
            finished: Vec::new(),
            counters: Counters::default(),
        }
    }

    fn push(&mut self, record: Record) -> Result<()> {
        self.counters.add("map_output_records", 1);
        let partition = self.job.partition(&record)?;
        if partition >= self.spec.partitions {
            return Err(Error::Job(format!(
                "partition {partition} out of range 0..{}",
                self.spec.partitions
            )));
        }
        self.buffered += record.approx_size();
        self.by_partition[partition as usize].push(record);
        if self.buffered >= self.budget {
            self.spill()?;
        }
        Ok(())
    }

    fn spill(&mut self) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let spill = self.spills;
        self.spills += 1;
        for partition in 0..self.by_partition.len() {
            if self.by_partition[partition].is_empty() {
                continue;
            }
            let mut records = std::mem::take(&mut self.by_partition[partition]);
            records.sort_by(|a, b| a.key.cmp(&b.key));
            if self.spec.combine {
                records = self.combine_sorted(records)?;
            }
            let path = self.dir.join(format!("s{spill:03}_p{partition}.run"));
            // already sorted; write_sorted_run's stable re-sort is a no-op
            let run = write_sorted_run(&path, &mut records)?;
            self.counters.add("spill_runs", 1);
            self.finished.push((partition as u32, run));
        }
        self.buffered = 0;
        Ok(())
    }

    fn combine_sorted(&mut self, records: Vec<Record>) -> Result<Vec<Record>> {
        let mut out: Vec<Record> = Vec::with_capacity(records.len());
        let mut iter = records.into_iter();
        let Some(mut current) = iter.next() else { return Ok(out) };
        let mut values: Vec<Vec<u8>> = Vec::new();
        for record in iter {
            if record.key == current.key && record.batch == current.batch {
                values.push(record.value);
            } else {
                out.push(self.fold_group(current, &mut values)?);
                current = record;
            }
        }
        out.push(self.fold_group(current, &mut values)?);
        self.counters.add("combine_output_records", out.len() as u64);
        Ok(out)
    }

    fn fold_group(&self, mut head: Record, tail: &mut Vec<Vec<u8>>) -> Result<Record> {
        if !tail.is_empty() {
            let mut all = Vec::with_capacity(tail.len() + 1);
            all.push(std::mem::take(&mut head.value));
            all.append(tail);
            head.value = self.job.combine(&head.key, head.batch, &all)?;
        }
        Ok(head)
    }

    fn finish(mut self, ctx: &mut TaskCtx) -> Result<Vec<(u32, RunFile)>> {
        if self.by_partition.iter().any(|v| !v.is_empty()) {
            self.spill()?;
        }
        ctx.counters.merge(&self.counters);
        let mut finished = std::mem::take(&mut self.finished);
        finished.sort_by(|a, b| a.1.path.cmp(&b.1.path));
        Ok(finished)
    }
}
