//! Partition-to-node assignment with a persistent scheduling factory.
//!
//! Fresh jobs spread partitions across nodes deterministically and record
//! the assignment; replayed jobs reuse the recorded assignment so a
//! partition lands on the node holding its cached state. Dead nodes get
//! their partitions reassigned to the next live node and the factory is
//! rewritten.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// How a job obtains its partition assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    /// Deterministic spread, recorded for later replay.
    Fresh,
    /// Reuse the recorded assignment of this application.
    Replay,
    /// Deterministic spread, not recorded (plain MR baseline jobs).
    Stateless,
}

/// Which nodes are currently usable. Liveness is an explicit hook: tests
/// and the CLI mark nodes dead rather than the engine inferring it.
#[derive(Debug, Clone, Default)]
pub struct NodeLiveness {
    dead: BTreeSet<usize>,
}

impl NodeLiveness {
    pub fn kill(&mut self, node: usize) {
        self.dead.insert(node);
    }

    pub fn revive(&mut self, node: usize) {
        self.dead.remove(&node);
    }

    pub fn is_live(&self, node: usize) -> bool {
        !self.dead.contains(&node)
    }

    /// First live node at or after `start`, wrapping around.
    fn next_live(&self, start: usize, nodes: usize) -> Result<usize> {
        for offset in 0..nodes {
            let candidate = (start + offset) % nodes;
            if self.is_live(candidate) {
                return Ok(candidate);
            }
        }
        Err(Error::Scheduling("no live nodes".into()))
    }
}

/// Persistent (application, partition) -> node map.
pub struct SchedulingFactory {
    dir: PathBuf,
}

impl SchedulingFactory {
    pub fn new(root: &Path) -> Result<Self> {
        let dir = root.join("factory");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(SchedulingFactory { dir })
    }

    fn path(&self, app: &str) -> PathBuf {
        self.dir.join(format!("{app}.tsv"))
    }

    pub fn load(&self, app: &str) -> Result<Option<BTreeMap<u32, usize>>> {
        let path = self.path(app);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (partition, node) = line
                .split_once('\t')
                .ok_or_else(|| Error::Scheduling(format!("bad factory line {line:?}")))?;
            let partition = partition
                .parse::<u32>()
                .map_err(|_| Error::Scheduling(format!("bad partition in {line:?}")))?;
            let node = node
                .parse::<usize>()
                .map_err(|_| Error::Scheduling(format!("bad node in {line:?}")))?;
            map.insert(partition, node);
        }
        Ok(Some(map))
    }

    pub fn save(&self, app: &str, map: &BTreeMap<u32, usize>) -> Result<()> {
        let path = self.path(app);
        let mut text = String::new();
        for (partition, node) in map {
            text.push_str(&format!("{partition}\t{node}\n"));
        }
        let tmp = path.with_extension("tsv.tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    /// Assigns every partition of a job to a node and persists the result
    /// for recorded modes. Returns the node per partition index.
    pub fn assign(
        &self,
        app: &str,
        mode: ScheduleMode,
        partitions: u32,
        nodes: usize,
        liveness: &NodeLiveness,
    ) -> Result<Vec<usize>> {
        if nodes == 0 {
            return Err(Error::Scheduling("node count must be positive".into()));
        }
        let mut assignment = Vec::with_capacity(partitions as usize);
        match mode {
            ScheduleMode::Fresh | ScheduleMode::Stateless => {
                for partition in 0..partitions {
                    let preferred = partition as usize % nodes;
                    assignment.push(liveness.next_live(preferred, nodes)?);
                }
                if mode == ScheduleMode::Fresh {
                    let map: BTreeMap<u32, usize> =
                        (0..partitions).map(|p| (p, assignment[p as usize])).collect();
                    self.save(app, &map)?;
                }
            }
            ScheduleMode::Replay => {
                let mut recorded = self.load(app)?.ok_or_else(|| {
                    Error::Scheduling(format!("no scheduling history for application {app:?}"))
                })?;
                let mut changed = false;
                for partition in 0..partitions {
                    let node = *recorded.get(&partition).ok_or_else(|| {
                        Error::Scheduling(format!(
                            "partition {partition} missing from scheduling history of {app:?}"
                        ))
                    })?;
                    let node = if liveness.is_live(node) {
                        node
                    } else {
                        let moved = liveness.next_live(node + 1, nodes)?;
                        recorded.insert(partition, moved);
                        changed = true;
                        moved
                    };
                    assignment.push(node);
                }
                if changed {
                    self.save(app, &recorded)?;
                }
            }
        }
        Ok(assignment)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_spread_is_modular() {
        let dir = tempfile::tempdir().unwrap();
        let factory = SchedulingFactory::new(dir.path()).unwrap();
        let live = NodeLiveness::default();
        let got = factory.assign("app", ScheduleMode::Fresh, 8, 4, &live).unwrap();
        assert_eq!(got, vec![0, 1, 2, 3, 0, 1, 2, 3]);
    }

    #[test]
    fn replay_reuses_recorded_assignment() {
        let dir = tempfile::tempdir().unwrap();
        let factory = SchedulingFactory::new(dir.path()).unwrap();
        let live = NodeLiveness::default();
        let fresh = factory.assign("app", ScheduleMode::Fresh, 8, 4, &live).unwrap();
        let replay = factory.assign("app", ScheduleMode::Replay, 8, 4, &live).unwrap();
        assert_eq!(fresh, replay);
    }

    #[test]
    fn replay_moves_only_dead_node_partitions() {
        let dir = tempfile::tempdir().unwrap();
        let factory = SchedulingFactory::new(dir.path()).unwrap();
        let live = NodeLiveness::default();
        let fresh = factory.assign("app", ScheduleMode::Fresh, 8, 4, &live).unwrap();

        let mut one_dead = NodeLiveness::default();
        one_dead.kill(2);
        let moved = factory.assign("app", ScheduleMode::Replay, 8, 4, &one_dead).unwrap();
        for (partition, (&before, &after)) in fresh.iter().zip(&moved).enumerate() {
            if before == 2 {
                assert_eq!(after, 3, "partition {partition} should move to the next live node");
            } else {
                assert_eq!(before, after, "live partition {partition} must stay put");
            }
        }
        // the reassignment is re-recorded
        let recorded = factory.load("app").unwrap().unwrap();
        assert_eq!(recorded[&2], 3);
        assert_eq!(recorded[&6], 3);
    }

    #[test]
    fn replay_without_history_fails() {
        let dir = tempfile::tempdir().unwrap();
        let factory = SchedulingFactory::new(dir.path()).unwrap();
        let live = NodeLiveness::default();
        let err = factory.assign("ghost", ScheduleMode::Replay, 4, 4, &live);
        assert!(matches!(err, Err(Error::Scheduling(_))));
    }

    #[test]
    fn stateless_mode_records_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let factory = SchedulingFactory::new(dir.path()).unwrap();
        let live = NodeLiveness::default();
        factory.assign("app", ScheduleMode::Stateless, 4, 2, &live).unwrap();
        assert!(factory.load("app").unwrap().is_none());
    }

    #[test]
    fn all_dead_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let factory = SchedulingFactory::new(dir.path()).unwrap();
        let mut live = NodeLiveness::default();
        live.kill(0);
        live.kill(1);
        assert!(factory.assign("app", ScheduleMode::Fresh, 2, 2, &live).is_err());
    }
}
