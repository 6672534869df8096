//! Bounded-memory run sorting and k-way merge.
//!
//! Records are buffered until the memory budget is hit, then sorted and
//! spilled as one run file. Merging any set of sorted runs yields a totally
//! key-ordered stream; ties across runs break by run index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::engine::record::{read_run_record, write_run_record, Key, Record};
use crate::error::{Error, Result};

/// A completed sorted run on disk.
#[derive(Debug, Clone)]
pub struct RunFile {
    pub path: PathBuf,
    pub bytes: u64,
    pub records: u64,
}

/// Sorts `records` by key (stable) and writes them as one run file.
pub fn write_sorted_run(path: &Path, records: &mut Vec<Record>) -> Result<RunFile> {
    records.sort_by(|a, b| a.key.cmp(&b.key));
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    let mut bytes = 0u64;
    for rec in records.iter() {
        bytes += write_run_record(&mut writer, rec).map_err(|e| Error::io(path, e))? as u64;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(RunFile { path: path.to_path_buf(), bytes, records: records.len() as u64 })
}

/// Streaming external sorter: feed records, get back sorted run files whose
/// merge is totally ordered. Partial spill files are removed on failure.
pub struct ExternalSorter {
    dir: PathBuf,
    prefix: String,
    budget: usize,
    buffered_bytes: usize,
    buffer: Vec<Record>,
    runs: Vec<RunFile>,
}

impl ExternalSorter {
    pub fn new(dir: &Path, prefix: &str, budget: usize) -> Result<Self> {
        if budget == 0 {
            return Err(Error::Config("sort memory budget must be positive".into()));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(ExternalSorter {
            dir: dir.to_path_buf(),
            prefix: prefix.to_string(),
            budget,
            buffered_bytes: 0,
            buffer: Vec::new(),
            runs: Vec::new(),
        })
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        self.buffered_bytes += record.approx_size();
        self.buffer.push(record);
        if self.buffered_bytes >= self.budget {
            self.spill()?;
        }
        Ok(())
    }

    fn spill(&mut self) -> Result<()> {
        if self.buffer.is_empty() {
            return Ok(());
        }
        let path = self.dir.join(format!("{}_{:04}.run", self.prefix, self.runs.len()));
        match write_sorted_run(&path, &mut self.buffer) {
            Ok(run) => {
                self.runs.push(run);
                self.buffer.clear();
                self.buffered_bytes = 0;
                Ok(())
            }
            Err(e) => {
                let _ = fs::remove_file(&path);
                self.cleanup();
                Err(e)
            }
        }
    }

    fn cleanup(&mut self) {
        for run in self.runs.drain(..) {
            let _ = fs::remove_file(&run.path);
        }
    }

    /// Flushes the tail buffer and returns all run files.
    pub fn finish(mut self) -> Result<Vec<RunFile>> {
        self.spill()?;
        Ok(std::mem::take(&mut self.runs))
    }
}

struct HeapEntry {
    record: Record,
    run: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.record.key == other.record.key && self.run == other.run
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; reverse for ascending order
        other
            .record
            .key
            .cmp(&self.record.key)
            .then_with(|| other.run.cmp(&self.run))
    }
}

/// K-way merge over sorted run files, ascending by key.
pub struct MergeIter {
    readers: Vec<BufReader<File>>,
    heap: BinaryHeap<HeapEntry>,
    last_key: Option<Key>,
}

impl MergeIter {
    pub fn open(paths: &[PathBuf]) -> Result<Self> {
        let mut readers = Vec::with_capacity(paths.len());
        let mut heap = BinaryHeap::with_capacity(paths.len());
        for (run, path) in paths.iter().enumerate() {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            let mut reader = BufReader::new(file);
            if let Some(record) = read_run_record(&mut reader)? {
                heap.push(HeapEntry { record, run });
            }
            readers.push(reader);
        }
        Ok(MergeIter { readers, heap, last_key: None })
    }

    /// Pulls the next record in key order, enforcing global monotonicity.
    pub fn next_record(&mut self) -> Result<Option<Record>> {
        let Some(entry) = self.heap.pop() else {
            return Ok(None);
        };
        if let Some(record) = read_run_record(&mut self.readers[entry.run])? {
            self.heap.push(HeapEntry { record, run: entry.run });
        }
        if let Some(last) = &self.last_key {
            if entry.record.key < *last {
                return Err(Error::Job(
                    "merge produced out-of-order keys; sorted-run contract violated".into(),
                ));
            }
        }
        self.last_key = Some(entry.record.key.clone());
        Ok(Some(entry.record))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::record::DimValue;

    fn record(k: i64, tag: u8) -> Record {
        Record { key: Key(vec![DimValue::Int(k)]), batch: 0, value: vec![tag] }
    }

    fn drain(paths: &[PathBuf]) -> Vec<Record> {
        let mut iter = MergeIter::open(paths).unwrap();
        let mut out = Vec::new();
        while let Some(rec) = iter.next_record().unwrap() {
            out.push(rec);
        }
        out
    }

    fn shuffled_input(count: i64) -> Vec<Record> {
        // fixed pseudo-random permutation, no RNG needed
        (0..count).map(|i| record((i * 7919) % count, (i % 251) as u8)).collect()
    }

    #[test]
    fn single_run_when_input_fits() {
        let dir = tempfile::tempdir().unwrap();
        let mut sorter = ExternalSorter::new(dir.path(), "t", 1 << 20).unwrap();
        let input = shuffled_input(500);
        for rec in input.clone() {
            sorter.push(rec).unwrap();
        }
        let runs = sorter.finish().unwrap();
        assert_eq!(runs.len(), 1);

        let mut expected = input;
        expected.sort_by(|a, b| a.key.cmp(&b.key));
        let paths: Vec<PathBuf> = runs.iter().map(|r| r.path.clone()).collect();
        let merged = drain(&paths);
        assert_eq!(merged.len(), expected.len());
        for (m, e) in merged.iter().zip(&expected) {
            assert_eq!(m.key, e.key);
        }
    }

    #[test]
    fn spilled_runs_merge_to_oracle_order() {
        let dir = tempfile::tempdir().unwrap();
        // budget small enough to force several spills
        let mut sorter = ExternalSorter::new(dir.path(), "t", 4096).unwrap();
        let input = shuffled_input(2000);
        for rec in input.clone() {
            sorter.push(rec).unwrap();
        }
        let runs = sorter.finish().unwrap();
        assert!(runs.len() >= 3, "expected several spills, got {}", runs.len());

        let mut expected = input;
        expected.sort_by(|a, b| a.key.cmp(&b.key));
        let paths: Vec<PathBuf> = runs.iter().map(|r| r.path.clone()).collect();
        let merged = drain(&paths);
        assert_eq!(merged.len(), expected.len());
        for (m, e) in merged.iter().zip(&expected) {
            assert_eq!(m.key, e.key, "merged order diverges from in-memory sort");
        }
    }

    #[test]
    fn empty_input_yields_no_runs() {
        let dir = tempfile::tempdir().unwrap();
        let sorter = ExternalSorter::new(dir.path(), "t", 4096).unwrap();
        let runs = sorter.finish().unwrap();
        assert!(runs.is_empty());
        assert!(drain(&[]).is_empty());
    }

    #[test]
    fn equal_keys_preserve_run_order() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_sorted_run(&dir.path().join("a.run"), &mut vec![record(1, 10)]).unwrap();
        let b = write_sorted_run(&dir.path().join("b.run"), &mut vec![record(1, 20)]).unwrap();
        let merged = drain(&[a.path, b.path]);
        assert_eq!(merged[0].value, vec![10]);
        assert_eq!(merged[1].value, vec![20]);
    }

    #[test]
    fn spill_failure_cleans_up_partials() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("gone");
        let mut sorter = ExternalSorter::new(&sub, "t", 512).unwrap();
        sorter.push(record(0, 0)).unwrap();
        sorter.push(record(1, 0)).unwrap();
        // first spill succeeds, then the target directory disappears
        while fs::read_dir(&sub).unwrap().count() == 0 {
            sorter.push(record(2, 0)).unwrap();
        }
        fs::remove_dir_all(&sub).unwrap();
        let mut failed = false;
        for i in 0..1000 {
            if sorter.push(record(i, 0)).is_err() {
                failed = true;
                break;
            }
        }
        assert!(failed, "spilling into a missing dir should fail");
        assert!(!sub.exists() || fs::read_dir(&sub).unwrap().count() == 0);
    }

    #[test]
    fn zero_budget_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ExternalSorter::new(dir.path(), "t", 0).is_err());
    }
}
