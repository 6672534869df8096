//! Profiling-based load balancing.
//!
//! Rather than estimating shuffle/sort/write costs analytically, a learning
//! job runs the cubing pipeline over a small sample with one reducer per
//! batch and records each batch's reduce-phase wall time. Reducers for the
//! real job are then allocated proportionally to the measured times:
//! `R_i = T_i * r / sum(T_j)`, rounded by largest remainder with a floor of
//! one reducer per batch so the total is exact.

use std::fs;
use std::path::Path;

use crate::cubing::{CubeGenJob, FuncSpec};
use crate::dataio::{Dataset, Schema};
use crate::engine::scheduler::ScheduleMode;
use crate::engine::{Engine, JobInput, JobKind, JobSpec};
use crate::error::{Error, Result};
use crate::planner::BatchPlan;

/// Measured per-batch cost from the profiling job.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileReport {
    /// Reduce-phase wall time per batch, milliseconds.
    pub time_ms: Vec<f64>,
    /// One tuple kept per `sample_rate` input records.
    pub sample_rate: u64,
    pub sampled_tuples: u64,
}

impl ProfileReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("sample_rate={}\n", self.sample_rate));
        out.push_str(&format!("sampled_tuples={}\n", self.sampled_tuples));
        for (batch, time) in self.time_ms.iter().enumerate() {
            out.push_str(&format!("batch={batch} time_ms={time:.3}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<ProfileReport> {
        let mut sample_rate = None;
        let mut sampled_tuples = 0u64;
        let mut times: Vec<(usize, f64)> = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix("sample_rate=") {
                sample_rate = rest.parse().ok();
            } else if let Some(rest) = line.strip_prefix("sampled_tuples=") {
                sampled_tuples = rest.parse().unwrap_or(0);
            } else if let Some(rest) = line.strip_prefix("batch=") {
                let (batch, time) = rest
                    .split_once(" time_ms=")
                    .ok_or_else(|| Error::Profiling(format!("bad report line {line:?}")))?;
                let batch = batch
                    .parse::<usize>()
                    .map_err(|_| Error::Profiling(format!("bad batch in {line:?}")))?;
                let time = time
                    .parse::<f64>()
                    .map_err(|_| Error::Profiling(format!("bad time in {line:?}")))?;
                times.push((batch, time));
            }
        }
        let sample_rate =
            sample_rate.ok_or_else(|| Error::Profiling("report missing sample_rate".into()))?;
        times.sort_by_key(|&(b, _)| b);
        for (want, (got, _)) in times.iter().enumerate() {
            if want != *got {
                return Err(Error::Profiling(format!("report missing batch {want}")));
            }
        }
        Ok(ProfileReport {
            time_ms: times.into_iter().map(|(_, t)| t).collect(),
            sample_rate,
            sampled_tuples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ProfileReport> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ProfileReport::parse(&text)
    }
}

/// Per-batch reducer counts and their cumulative offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationPlan {
    reducers: Vec<u32>,
    offsets: Vec<u32>,
}

impl AllocationPlan {
    pub fn from_counts(reducers: Vec<u32>) -> Self {
        let mut offsets = Vec::with_capacity(reducers.len());
        let mut offset = 0u32;
        for &count in &reducers {
            offsets.push(offset);
            offset += count;
        }
        AllocationPlan { reducers, offsets }
    }

    /// One reducer per batch (the profiling job's shape).
    pub fn one_per_batch(batches: usize) -> Self {
        AllocationPlan::from_counts(vec![1; batches])
    }

    pub fn batches(&self) -> usize {
        self.reducers.len()
    }

    pub fn reducers(&self, batch: usize) -> u32 {
        self.reducers[batch]
    }

    pub fn offset(&self, batch: usize) -> u32 {
        self.offsets[batch]
    }

    /// Total allocated reducers `r`.
    pub fn total(&self) -> u32 {
        self.reducers.iter().sum()
    }

    /// Which batch a partition in `0..total()` belongs to.
    pub fn batch_of_partition(&self, partition: u32) -> Option<usize> {
        if partition >= self.total() {
            return None;
        }
        match self.offsets.binary_search(&partition) {
            Ok(idx) => Some(idx),
            Err(idx) => Some(idx - 1),
        }
    }
}

/// Proportional reducer allocation with exact total `r`.
///
/// Quotas `T_i * r / sum(T)` are floored with a floor of one reducer per
/// batch; leftover reducers go to the largest fractional remainders, and
/// any floor-induced excess is taken back from the largest allocations.
pub fn allocate(report: &ProfileReport, total: u32) -> Result<AllocationPlan> {
    let batches = report.time_ms.len();
    if batches == 0 {
        return Err(Error::Allocation("profile report has no batches".into()));
    }
    if (total as usize) < batches {
        return Err(Error::Allocation(format!(
            "{total} reducers cannot cover {batches} batches: at least one reducer per batch"
        )));
    }
    if report.time_ms.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::Allocation("batch times must be finite and non-negative".into()));
    }
    let sum: f64 = report.time_ms.iter().sum();
    let quotas: Vec<f64> = if sum <= 0.0 {
        vec![total as f64 / batches as f64; batches]
    } else {
        report.time_ms.iter().map(|t| t * total as f64 / sum).collect()
    };

    let mut counts: Vec<u32> = quotas.iter().map(|q| (q.floor() as u32).max(1)).collect();
    let mut assigned: u32 = counts.iter().sum();

    // hand leftovers to the largest remainders (ties by lower batch index)
    while assigned < total {
        let mut best = 0usize;
        let mut best_rem = f64::MIN;
        for (i, &q) in quotas.iter().enumerate() {
            let rem = q - counts[i] as f64;
            if rem > best_rem {
                best_rem = rem;
                best = i;
            }
        }
        counts[best] += 1;
        assigned += 1;
    }
    // floors of one can overshoot; take back from the largest allocations
    while assigned > total {
        let mut best = None;
        for (i, &c) in counts.iter().enumerate() {
            if c > 1 && best.map_or(true, |b: usize| c > counts[b]) {
                best = Some(i);
            }
        }
        let victim = best.ok_or_else(|| {
            Error::Allocation("cannot reduce allocation below one reducer per batch".into())
        })?;
        counts[victim] -= 1;
        assigned -= 1;
    }
    Ok(AllocationPlan::from_counts(counts))
}

/// Runs the profiling job: the cubing pipeline over a 1-in-`sample_rate`
/// sample with one reducer per batch, recording each batch's reduce-phase
/// wall time.
pub fn run_profile_job(
    engine: &Engine,
    app: &str,
    schema: &Schema,
    plan: &BatchPlan,
    specs: &[FuncSpec],
    dataset: &Dataset,
    sample_rate: u64,
) -> Result<ProfileReport> {
    if sample_rate == 0 {
        return Err(Error::Profiling("sample rate must be at least 1".into()));
    }
    let alloc = AllocationPlan::one_per_batch(plan.batches.len());
    let mut job = CubeGenJob::new(
        app,
        schema.clone(),
        plan.clone(),
        alloc,
        specs.to_vec(),
    );
    job.sample_every = Some(sample_rate);
    let mut spec = JobSpec::new(app, JobKind::Profile, job.partitions());
    spec.schedule = ScheduleMode::Stateless;
    spec.combine = job.combinable();

    let result = engine.run_job(&spec, &JobInput::Text(vec![dataset.path.clone()]), &job)?;
    let sampled = result.counters.get("sampled_tuples");
    result.cleanup();
    if sampled == 0 {
        return Err(Error::Profiling(format!(
            "sample with rate {sample_rate} kept no tuples; use a smaller rate"
        )));
    }
    Ok(ProfileReport {
        time_ms: result.reduce_ms[..plan.batches.len()].to_vec(),
        sample_rate,
        sampled_tuples: sampled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(times: &[f64]) -> ProfileReport {
        ProfileReport { time_ms: times.to_vec(), sample_rate: 1, sampled_tuples: 100 }
    }

    #[test]
    fn allocation_symmetric() {
        let plan = allocate(&report(&[10.0, 10.0, 10.0, 10.0]), 8).unwrap();
        assert_eq!(plan.reducers, vec![2, 2, 2, 2]);
        assert_eq!(plan.offsets, vec![0, 2, 4, 6]);
    }

    #[test]
    fn allocation_proportional() {
        let plan = allocate(&report(&[30.0, 10.0, 10.0, 10.0]), 6).unwrap();
        assert_eq!(plan.reducers, vec![3, 1, 1, 1]);
    }

    #[test]
    fn allocation_floor_then_remainder() {
        // quotas (0.005, 0.005, 0.005, 4.985): floors clamp to one each,
        // the dominant batch keeps what is left
        let plan = allocate(&report(&[1.0, 1.0, 1.0, 1000.0]), 5).unwrap();
        assert_eq!(plan.reducers, vec![1, 1, 1, 2]);
    }

    #[test]
    fn allocation_requires_reducer_per_batch() {
        let err = allocate(&report(&[1.0, 1.0, 1.0]), 2);
        assert!(matches!(err, Err(Error::Allocation(_))));
    }

    #[test]
    fn allocation_total_is_exact() {
        // a few hand-picked uneven shapes
        for (times, total) in [
            (vec![1.0, 2.0, 3.0], 7u32),
            (vec![0.0, 5.0], 9),
            (vec![100.0, 1.0, 1.0, 1.0, 1.0], 5),
            (vec![3.3, 3.3, 3.4], 11),
        ] {
            let plan = allocate(&report(&times), total).unwrap();
            assert_eq!(plan.total(), total, "times {times:?}");
            assert!(plan.reducers.iter().all(|&r| r >= 1));
        }
    }

    #[test]
    fn allocation_scale_invariant() {
        let a = allocate(&report(&[3.0, 5.0, 9.0]), 10).unwrap();
        let b = allocate(&report(&[300.0, 500.0, 900.0]), 10).unwrap();
        let c = allocate(&report(&[0.003, 0.005, 0.009]), 10).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn batch_of_partition_ranges() {
        let plan = AllocationPlan::from_counts(vec![3, 2, 1]);
        assert_eq!(plan.total(), 6);
        let got: Vec<Option<usize>> = (0..7).map(|p| plan.batch_of_partition(p)).collect();
        assert_eq!(
            got,
            vec![Some(0), Some(0), Some(0), Some(1), Some(1), Some(2), None]
        );
    }

    #[test]
    fn report_roundtrip() {
        let r = ProfileReport {
            time_ms: vec![1.5, 2.25, 0.75],
            sample_rate: 100,
            sampled_tuples: 42,
        };
        let parsed = ProfileReport::parse(&r.render()).unwrap();
        assert_eq!(parsed.sample_rate, 100);
        assert_eq!(parsed.sampled_tuples, 42);
        assert_eq!(parsed.time_ms.len(), 3);
        for (a, b) in parsed.time_ms.iter().zip(&r.time_ms) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}
