//! Per-reducer persistent local stores, lazy checkpointing, and recovery.
//!
//! Each reducer node owns a directory tree under `<root>/nodes/<node-id>/`;
//! one subdirectory per (application, partition) holds registered sorted-run
//! files (recomputation caching) and cached view cells (incremental
//! caching), described by a small manifest. Run registration renames files
//! into place - bytes are never copied. Durable state (view outputs,
//! snapshots, archived deltas) lives under `<root>/durable/<app>/` and
//! survives node-local corruption.

use std::fs::{self, File};
use std::io::Read;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// What a store entry holds for one (application, partition).
#[derive(Debug, Clone, Default)]
pub struct StoreEntry {
    pub app: String,
    pub partition: u32,
    /// Count of applied view updates reflected in this entry.
    pub epoch: u64,
    /// Registered sorted-run files, oldest first (absolute paths).
    pub runs: Vec<PathBuf>,
    /// Cached view cell files, one per cuboid number (absolute paths).
    pub views: Vec<PathBuf>,
}

impl StoreEntry {
    pub fn is_empty(&self) -> bool {
        self.runs.is_empty() && self.views.is_empty()
    }
}

/// Reducer-node failure classes exercised by recovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    /// A task was killed and rescheduled; node disk intact.
    TaskRestart,
    /// The node process restarted; node disk intact.
    NodeRestart,
    /// The node-local file system is gone.
    NodeCorrupt,
}

/// Outcome of a corrupt-store recovery from a snapshot.
#[derive(Debug)]
pub struct SnapshotRestore {
    /// Epoch the restored snapshot was taken at.
    pub epoch: u64,
    /// Archived delta files with epochs after the snapshot, in order.
    pub deltas_to_replay: Vec<(u64, PathBuf)>,
}

/// Root handle over node-local stores and the durable area.
#[derive(Debug, Clone)]
pub struct StoreManager {
    root: PathBuf,
}

const MANIFEST: &str = "entry.manifest";

impl StoreManager {
    pub fn new(root: &Path) -> Result<Self> {
        for sub in ["nodes", "durable"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(StoreManager { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn node_dir(&self, node: usize) -> PathBuf {
        self.root.join("nodes").join(format!("node{node}"))
    }

    pub fn partition_dir(&self, node: usize, app: &str, partition: u32) -> PathBuf {
        self.node_dir(node).join(app).join(partition.to_string())
    }

    pub fn durable_dir(&self, app: &str) -> PathBuf {
        self.root.join("durable").join(app)
    }

    /// Reads the entry manifest for one (node, app, partition), if any.
    pub fn entry(&self, node: usize, app: &str, partition: u32) -> Result<Option<StoreEntry>> {
        let dir = self.partition_dir(node, app, partition);
        let manifest = dir.join(MANIFEST);
        if !manifest.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut entry =
            StoreEntry { app: app.to_string(), partition, ..StoreEntry::default() };
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (kind, rest) = line
                .split_once(' ')
                .ok_or_else(|| Error::Store(format!("bad manifest line {line:?}")))?;
            match kind {
                "epoch" => {
                    entry.epoch = rest
                        .parse()
                        .map_err(|_| Error::Store(format!("bad epoch {rest:?}")))?
                }
                "run" => entry.runs.push(dir.join(rest)),
                "view" => entry.views.push(dir.join(rest)),
                other => return Err(Error::Store(format!("unknown manifest kind {other:?}"))),
            }
        }
        for file in entry.runs.iter().chain(&entry.views) {
            if !file.exists() {
                return Err(Error::Store(format!(
                    "store entry references missing file {}",
                    file.display()
                )));
            }
        }
        Ok(Some(entry))
    }

    fn write_manifest(&self, dir: &Path, entry: &StoreEntry) -> Result<()> {
        let mut text = format!("epoch {}\n", entry.epoch);
        for run in &entry.runs {
            text.push_str(&format!("run {}\n", rel_name(dir, run)?));
        }
        for view in &entry.views {
            text.push_str(&format!("view {}\n", rel_name(dir, view)?));
        }
        let tmp = dir.join(format!("{MANIFEST}.tmp"));
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, dir.join(MANIFEST)).map_err(|e| Error::io(dir, e))?;
        Ok(())
    }

    /// Registers completed sorted-run files into the partition store by
    /// renaming them (no byte copies). Returns the updated entry. Call only
    /// after the partition's reduce task has succeeded.
    pub fn register_runs(
        &self,
        node: usize,
        app: &str,
        partition: u32,
        run_files: &[PathBuf],
        epoch: u64,
    ) -> Result<StoreEntry> {
        let dir = self.partition_dir(node, app, partition);
        let runs_dir = dir.join("runs");
        fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;
        let mut entry = self
            .entry(node, app, partition)?
            .unwrap_or(StoreEntry { app: app.to_string(), partition, ..StoreEntry::default() });
        for (idx, src) in run_files.iter().enumerate() {
            let name = format!("e{epoch}_{idx:04}.run");
            let dst = runs_dir.join(&name);
            fs::rename(src, &dst).map_err(|e| Error::io(src, e))?;
            entry.runs.push(dst);
        }
        entry.epoch = epoch;
        self.write_manifest(&dir, &entry)?;
        Ok(entry)
    }

    /// Replaces the cached view cell files of a partition. `staged` maps a
    /// cuboid number to a finished temp file; files are renamed into place
    /// and the manifest rewritten. Call only after the task has succeeded.
    pub fn commit_views(
        &self,
        node: usize,
        app: &str,
        partition: u32,
        staged: &[(u32, PathBuf)],
        epoch: u64,
    ) -> Result<StoreEntry> {
        let dir = self.partition_dir(node, app, partition);
        let views_dir = dir.join("views");
        fs::create_dir_all(&views_dir).map_err(|e| Error::io(&views_dir, e))?;
        let mut entry = self
            .entry(node, app, partition)?
            .unwrap_or(StoreEntry { app: app.to_string(), partition, ..StoreEntry::default() });
        for (cuboid, src) in staged {
            let dst = views_dir.join(format!("c{cuboid}.cells"));
            fs::rename(src, &dst).map_err(|e| Error::io(src, e))?;
            if !entry.views.contains(&dst) {
                entry.views.push(dst);
            }
        }
        entry.views.sort();
        entry.epoch = epoch;
        self.write_manifest(&dir, &entry)?;
        Ok(entry)
    }

    /// Bumps the recorded epoch without changing files (pure bookkeeping
    /// for partitions untouched by an update).
    pub fn touch_epoch(&self, node: usize, app: &str, partition: u32, epoch: u64) -> Result<()> {
        let dir = self.partition_dir(node, app, partition);
        if let Some(mut entry) = self.entry(node, app, partition)? {
            entry.epoch = epoch;
            self.write_manifest(&dir, &entry)?;
        }
        Ok(())
    }

    /// Simulates node-local corruption by removing the node's directory.
    pub fn corrupt_node(&self, node: usize) -> Result<()> {
        let dir = self.node_dir(node);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(())
    }

    // ----- checkpointing ---------------------------------------------------

    fn checkpoints_dir(&self, app: &str) -> PathBuf {
        self.durable_dir(app).join("checkpoints")
    }

    pub fn deltas_dir(&self, app: &str) -> PathBuf {
        self.durable_dir(app).join("deltas")
    }

    /// Archives a delta dataset so it can be replayed after a snapshot
    /// restore. Returns the archived path.
    pub fn archive_delta(&self, app: &str, epoch: u64, delta: &Path) -> Result<PathBuf> {
        let dir = self.deltas_dir(app);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let dst = dir.join(format!("e{epoch}.tsv"));
        fs::copy(delta, &dst).map_err(|e| Error::io(delta, e))?;
        Ok(dst)
    }

    /// Archived deltas with epoch strictly greater than `after`, ascending.
    pub fn archived_deltas_after(&self, app: &str, after: u64) -> Result<Vec<(u64, PathBuf)>> {
        let dir = self.deltas_dir(app);
        let mut out = Vec::new();
        if !dir.exists() {
            return Ok(out);
        }
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            if let Some(epoch) = name.strip_prefix('e').and_then(|s| s.parse::<u64>().ok()) {
                if epoch > after {
                    out.push((epoch, path));
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Takes a snapshot of every listed partition store (plus the app's
    /// scheduling history) into the durable area, then retains only this
    /// latest snapshot and prunes archived deltas at or before it.
    pub fn checkpoint(
        &self,
        app: &str,
        epoch: u64,
        partitions: &[(usize, u32)],
    ) -> Result<CheckpointManifest> {
        let base = self.checkpoints_dir(app);
        let staging = base.join(format!(".e{epoch}.tmp"));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;

        let mut manifest = CheckpointManifest { app: app.to_string(), epoch, files: Vec::new() };
        for &(node, partition) in partitions {
            let src_dir = self.partition_dir(node, app, partition);
            if !src_dir.exists() {
                continue;
            }
            let dst_dir = staging.join(format!("node{node}_p{partition}"));
            copy_tree(&src_dir, &dst_dir, &mut |rel, sha| {
                manifest.files.push((format!("node{node}_p{partition}/{rel}"), sha));
            })?;
        }
        let factory = self.root.join("factory").join(format!("{app}.tsv"));
        if factory.exists() {
            let dst = staging.join("factory.tsv");
            fs::copy(&factory, &dst).map_err(|e| Error::io(&factory, e))?;
            manifest.files.push(("factory.tsv".to_string(), sha256_file(&dst)?));
        }

        let mut text = format!("epoch {epoch}\n");
        for (file, sha) in &manifest.files {
            text.push_str(&format!("file {file} sha256 {sha}\n"));
        }
        fs::write(staging.join("manifest.txt"), text)
            .map_err(|e| Error::io(&staging, e))?;

        let final_dir = base.join(format!("e{epoch}"));
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir).map_err(|e| Error::io(&final_dir, e))?;
        }
        fs::rename(&staging, &final_dir).map_err(|e| Error::io(&final_dir, e))?;

        // retention: latest snapshot only, deltas after it only
        for entry in fs::read_dir(&base).map_err(|e| Error::io(&base, e))? {
            let path = entry.map_err(|e| Error::io(&base, e))?.path();
            if path != final_dir {
                let _ = fs::remove_dir_all(&path);
            }
        }
        for (delta_epoch, path) in self.archived_deltas_after(app, 0)? {
            if delta_epoch <= epoch {
                let _ = fs::remove_file(&path);
            }
        }
        Ok(manifest)
    }

    /// The latest snapshot's manifest, if one exists.
    pub fn latest_checkpoint(&self, app: &str) -> Result<Option<CheckpointManifest>> {
        let base = self.checkpoints_dir(app);
        if !base.exists() {
            return Ok(None);
        }
        let mut best: Option<u64> = None;
        for entry in fs::read_dir(&base).map_err(|e| Error::io(&base, e))? {
            let path = entry.map_err(|e| Error::io(&base, e))?.path();
            let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
            if let Some(epoch) = name.strip_prefix('e').and_then(|s| s.parse::<u64>().ok()) {
                best = Some(best.map_or(epoch, |b: u64| b.max(epoch)));
            }
        }
        let Some(epoch) = best else { return Ok(None) };
        CheckpointManifest::load(&base.join(format!("e{epoch}")), app).map(Some)
    }

    /// Recovers one partition store after a failure.
    ///
    /// Restart kinds verify the persisted entry is intact and return it.
    /// `NodeCorrupt` restores the latest snapshot's files for this partition
    /// (checksums verified) and reports which archived deltas must be
    /// replayed; with no snapshot it fails explicitly.
    pub fn recover(
        &self,
        node: usize,
        app: &str,
        partition: u32,
        kind: FailureKind,
    ) -> Result<RecoverOutcome> {
        match kind {
            FailureKind::TaskRestart | FailureKind::NodeRestart => {
                let entry = self.entry(node, app, partition)?.ok_or_else(|| {
                    Error::Store(format!(
                        "no store entry for {app}/{partition} on node {node} after restart"
                    ))
                })?;
                Ok(RecoverOutcome::Intact(entry))
            }
            FailureKind::NodeCorrupt => {
                let restore = self.restore_partition_from_checkpoint(node, app, partition)?;
                Ok(RecoverOutcome::Restored(restore))
            }
        }
    }

    /// Copies one partition's files out of the latest snapshot back into the
    /// node-local store, verifying checksums.
    pub fn restore_partition_from_checkpoint(
        &self,
        node: usize,
        app: &str,
        partition: u32,
    ) -> Result<SnapshotRestore> {
        let manifest = self.latest_checkpoint(app)?.ok_or_else(|| {
            Error::Recovery(format!(
                "store for {app}/{partition} lost and no snapshot exists; full rebuild required"
            ))
        })?;
        let snap_dir = self.checkpoints_dir(app).join(format!("e{}", manifest.epoch));
        let prefix = format!("node{node}_p{partition}/");
        let dst_root = self.partition_dir(node, app, partition);
        if dst_root.exists() {
            fs::remove_dir_all(&dst_root).map_err(|e| Error::io(&dst_root, e))?;
        }
        let mut restored_any = false;
        for (rel, want_sha) in &manifest.files {
            let Some(tail) = rel.strip_prefix(&prefix) else { continue };
            let src = snap_dir.join(rel);
            let got_sha = sha256_file(&src)?;
            if got_sha != *want_sha {
                return Err(Error::Recovery(format!(
                    "snapshot checksum mismatch for {rel}; full recompute required"
                )));
            }
            let dst = dst_root.join(tail);
            if let Some(parent) = dst.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
            restored_any = true;
        }
        if !restored_any {
            return Err(Error::Recovery(format!(
                "snapshot at epoch {} has no files for {app}/{partition}",
                manifest.epoch
            )));
        }
        // restore the scheduling history if it was lost with the node
        let factory = self.root.join("factory").join(format!("{app}.tsv"));
        let snap_factory = snap_dir.join("factory.tsv");
        if !factory.exists() && snap_factory.exists() {
            if let Some(parent) = factory.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::copy(&snap_factory, &factory).map_err(|e| Error::io(&snap_factory, e))?;
        }
        Ok(SnapshotRestore {
            epoch: manifest.epoch,
            deltas_to_replay: self.archived_deltas_after(app, manifest.epoch)?,
        })
    }
}

/// Result of [`StoreManager::recover`].
#[derive(Debug)]
pub enum RecoverOutcome {
    /// Entry survived the failure unchanged.
    Intact(StoreEntry),
    /// Entry rebuilt from the latest snapshot; deltas may need replaying.
    Restored(SnapshotRestore),
}

/// Durable snapshot description: per-file checksums at one epoch.
#[derive(Debug, Clone)]
pub struct CheckpointManifest {
    pub app: String,
    pub epoch: u64,
    pub files: Vec<(String, String)>,
}

impl CheckpointManifest {
    fn load(dir: &Path, app: &str) -> Result<Self> {
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut epoch = None;
        let mut files = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix("epoch ") {
                epoch = rest.parse().ok();
            } else if let Some(rest) = line.strip_prefix("file ") {
                let (file, sha) = rest
                    .split_once(" sha256 ")
                    .ok_or_else(|| Error::Store(format!("bad manifest line {line:?}")))?;
                files.push((file.to_string(), sha.to_string()));
            }
        }
        let epoch =
            epoch.ok_or_else(|| Error::Store("snapshot manifest missing epoch".into()))?;
        Ok(CheckpointManifest { app: app.to_string(), epoch, files })
    }
}

fn rel_name(dir: &Path, file: &Path) -> Result<String> {
    file.strip_prefix(dir)
        .map(|p| p.to_string_lossy().into_owned())
        .map_err(|_| Error::Internal(format!("{} not under {}", file.display(), dir.display())))
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn copy_tree(
    src: &Path,
    dst: &Path,
    on_file: &mut impl FnMut(String, String),
) -> Result<()> {
    copy_tree_inner(src, dst, PathBuf::new(), on_file)
}

fn copy_tree_inner(
    src: &Path,
    dst: &Path,
    rel: PathBuf,
    on_file: &mut impl FnMut(String, String),
) -> Result<()> {
    fs::create_dir_all(dst).map_err(|e| Error::io(dst, e))?;
    for entry in fs::read_dir(src).map_err(|e| Error::io(src, e))? {
        let entry = entry.map_err(|e| Error::io(src, e))?;
        let path = entry.path();
        let name = entry.file_name();
        let child_rel = rel.join(&name);
        let target = dst.join(&name);
        if path.is_dir() {
            copy_tree_inner(&path, &target, child_rel, on_file)?;
        } else {
            fs::copy(&path, &target).map_err(|e| Error::io(&path, e))?;
            on_file(child_rel.to_string_lossy().into_owned(), sha256_file(&target)?);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manager() -> (tempfile::TempDir, StoreManager) {
        let dir = tempfile::tempdir().unwrap();
        let mgr = StoreManager::new(dir.path()).unwrap();
        (dir, mgr)
    }

    fn fake_run(dir: &Path, name: &str, content: &[u8]) -> PathBuf {
        let path = dir.join(name);
        fs::write(&path, content).unwrap();
        path
    }

    #[test]
    fn register_runs_renames_without_copying() {
        let (tmp, mgr) = manager();
        let staging = tmp.path().join("shuffle");
        fs::create_dir_all(&staging).unwrap();
        let runs = vec![
            fake_run(&staging, "a.run", b"aaa"),
            fake_run(&staging, "b.run", b"bbb"),
            fake_run(&staging, "c.run", b"ccc"),
        ];
        let entry = mgr.register_runs(1, "app", 0, &runs, 0).unwrap();
        assert_eq!(entry.runs.len(), 3);
        for src in &runs {
            assert!(!src.exists(), "source should have been renamed away");
        }
        for dst in &entry.runs {
            assert!(dst.exists());
        }
        let reread = mgr.entry(1, "app", 0).unwrap().unwrap();
        assert_eq!(reread.runs, entry.runs);
        assert_eq!(reread.epoch, 0);
    }

    #[test]
    fn second_registration_extends_the_entry() {
        let (tmp, mgr) = manager();
        let staging = tmp.path().join("shuffle");
        fs::create_dir_all(&staging).unwrap();
        let first = vec![fake_run(&staging, "a.run", b"base")];
        mgr.register_runs(0, "app", 2, &first, 0).unwrap();
        let second = vec![fake_run(&staging, "b.run", b"delta")];
        let entry = mgr.register_runs(0, "app", 2, &second, 1).unwrap();
        assert_eq!(entry.runs.len(), 2);
        assert_eq!(entry.epoch, 1);
    }

    #[test]
    fn entry_with_missing_file_is_an_error() {
        let (tmp, mgr) = manager();
        let staging = tmp.path().join("shuffle");
        fs::create_dir_all(&staging).unwrap();
        let runs = vec![fake_run(&staging, "a.run", b"aaa")];
        let entry = mgr.register_runs(0, "app", 0, &runs, 0).unwrap();
        fs::remove_file(&entry.runs[0]).unwrap();
        assert!(mgr.entry(0, "app", 0).is_err());
    }

    #[test]
    fn commit_views_swaps_staged_files() {
        let (tmp, mgr) = manager();
        let staged = fake_run(tmp.path(), "c5.tmp", b"view-cells");
        let entry = mgr.commit_views(0, "app", 1, &[(5, staged)], 0).unwrap();
        assert_eq!(entry.views.len(), 1);
        assert_eq!(fs::read(&entry.views[0]).unwrap(), b"view-cells");
        // replacing the same cuboid keeps one entry
        let staged2 = fake_run(tmp.path(), "c5b.tmp", b"newer");
        let entry = mgr.commit_views(0, "app", 1, &[(5, staged2)], 1).unwrap();
        assert_eq!(entry.views.len(), 1);
        assert_eq!(fs::read(&entry.views[0]).unwrap(), b"newer");
        assert_eq!(entry.epoch, 1);
    }

    #[test]
    fn checkpoint_retains_only_latest_and_prunes_deltas() {
        let (tmp, mgr) = manager();
        let staging = tmp.path().join("shuffle");
        fs::create_dir_all(&staging).unwrap();
        mgr.register_runs(0, "app", 0, &[fake_run(&staging, "a.run", b"x")], 0).unwrap();

        let delta_src = fake_run(tmp.path(), "d1.tsv", b"1\t2\n");
        mgr.archive_delta("app", 1, &delta_src).unwrap();
        mgr.checkpoint("app", 1, &[(0, 0)]).unwrap();
        let delta2 = fake_run(tmp.path(), "d2.tsv", b"3\t4\n");
        mgr.archive_delta("app", 2, &delta2).unwrap();
        mgr.checkpoint("app", 2, &[(0, 0)]).unwrap();

        let checkpoints: Vec<_> = fs::read_dir(mgr.checkpoints_dir("app"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(checkpoints, ["e2"]);
        assert!(mgr.archived_deltas_after("app", 0).unwrap().is_empty());
        let manifest = mgr.latest_checkpoint("app").unwrap().unwrap();
        assert_eq!(manifest.epoch, 2);
        assert!(!manifest.files.is_empty());
    }

    #[test]
    fn restart_recovery_returns_entry_unchanged() {
        let (tmp, mgr) = manager();
        let staging = tmp.path().join("shuffle");
        fs::create_dir_all(&staging).unwrap();
        let entry =
            mgr.register_runs(0, "app", 0, &[fake_run(&staging, "a.run", b"x")], 0).unwrap();
        for kind in [FailureKind::TaskRestart, FailureKind::NodeRestart] {
            match mgr.recover(0, "app", 0, kind).unwrap() {
                RecoverOutcome::Intact(got) => assert_eq!(got.runs, entry.runs),
                other => panic!("expected intact entry, got {other:?}"),
            }
        }
    }

    #[test]
    fn corrupt_recovery_restores_snapshot_and_lists_deltas() {
        let (tmp, mgr) = manager();
        let staging = tmp.path().join("shuffle");
        fs::create_dir_all(&staging).unwrap();
        mgr.register_runs(0, "app", 0, &[fake_run(&staging, "a.run", b"base-run")], 0).unwrap();
        mgr.checkpoint("app", 0, &[(0, 0)]).unwrap();
        let d1 = fake_run(tmp.path(), "d1.tsv", b"later");
        mgr.archive_delta("app", 1, &d1).unwrap();

        mgr.corrupt_node(0).unwrap();
        assert!(mgr.entry(0, "app", 0).unwrap().is_none());

        match mgr.recover(0, "app", 0, FailureKind::NodeCorrupt).unwrap() {
            RecoverOutcome::Restored(restore) => {
                assert_eq!(restore.epoch, 0);
                assert_eq!(restore.deltas_to_replay.len(), 1);
                assert_eq!(restore.deltas_to_replay[0].0, 1);
            }
            other => panic!("expected restore, got {other:?}"),
        }
        let entry = mgr.entry(0, "app", 0).unwrap().unwrap();
        assert_eq!(entry.runs.len(), 1);
        assert_eq!(fs::read(&entry.runs[0]).unwrap(), b"base-run");
    }

    #[test]
    fn corrupt_recovery_without_snapshot_is_explicit() {
        let (_tmp, mgr) = manager();
        let err = mgr.recover(0, "app", 0, FailureKind::NodeCorrupt);
        assert!(matches!(err, Err(Error::Recovery(_))));
    }

    #[test]
    fn corrupt_recovery_detects_checksum_mismatch() {
        let (tmp, mgr) = manager();
        let staging = tmp.path().join("shuffle");
        fs::create_dir_all(&staging).unwrap();
        mgr.register_runs(0, "app", 0, &[fake_run(&staging, "a.run", b"good")], 0).unwrap();
        mgr.checkpoint("app", 0, &[(0, 0)]).unwrap();
        // tamper with the snapshot payload
        let snap = mgr.checkpoints_dir("app").join("e0").join("node0_p0").join("runs");
        let file = fs::read_dir(&snap).unwrap().next().unwrap().unwrap().path();
        fs::write(&file, b"evil").unwrap();
        mgr.corrupt_node(0).unwrap();
        let err = mgr.recover(0, "app", 0, FailureKind::NodeCorrupt);
        assert!(matches!(err, Err(Error::Recovery(_))), "got {err:?}");
    }
}
