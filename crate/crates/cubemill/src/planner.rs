//! Greedy batch plan construction.
//!
//! A batch is one descendant cuboid plus every available cuboid that is a
//! prefix ancestor of it. Inside a batch the descendant's sequence supplies
//! the sort dimensions and the shortest member supplies the partition
//! dimensions, so the whole batch is computed from one sorted, partitioned
//! stream.
//!
//! Construction is greedy: start from an available cuboid in the non-empty
//! group of maximum arity, search its permutations for the one with the most
//! available prefix ancestors (stopping early when a permutation has them
//! all), emit the batch, and mark its members unavailable. Two search-space
//! trims are applied: the early exit above, and a rotation heuristic that
//! seeds both the starting cuboid and the first permutation tried from the
//! most recently consumed cuboid of the same arity, advanced along the
//! dimension cycle.

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::lattice::{enumerate_lattice, CanonicalId, Cuboid, CuboidNumbering};

/// Fixed-width bit set, one bit per numbered cuboid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    bits: Vec<u64>,
    len: usize,
}

impl Bitmap {
    pub fn new(len: usize) -> Self {
        Bitmap { bits: vec![0; len.div_ceil(64)], len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn set(&mut self, pos: usize) {
        assert!(pos < self.len);
        self.bits[pos / 64] |= 1 << (pos % 64);
    }

    pub fn get(&self, pos: usize) -> bool {
        pos < self.len && self.bits[pos / 64] & (1 << (pos % 64)) != 0
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Hex string with bit 0 as the most significant bit of the first
    /// nibble, so the string reads left-to-right in cuboid-number order.
    pub fn to_hex(&self) -> String {
        let mut out = String::with_capacity(self.len.div_ceil(4));
        for nibble_idx in 0..self.len.div_ceil(4) {
            let mut nibble = 0u8;
            for offset in 0..4 {
                let pos = nibble_idx * 4 + offset;
                if self.get(pos) {
                    nibble |= 1 << (3 - offset);
                }
            }
            out.push(char::from_digit(nibble as u32, 16).unwrap());
        }
        out
    }
}

/// One unit of shared computation: a descendant cuboid and its batched
/// prefix ancestors.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Position of this batch in the plan.
    pub index: usize,
    /// Members ordered longest-first; every non-descendant member is a
    /// prefix of the first entry.
    pub cuboids: Vec<Cuboid>,
    /// 2^n-bit membership bitmap under the plan's cuboid numbering.
    pub identifier: Bitmap,
}

impl Batch {
    /// The descendant's sequence: keys are sorted by these dimensions.
    pub fn sort_dims(&self) -> &Cuboid {
        &self.cuboids[0]
    }

    /// The shortest member's sequence: records are partitioned by these.
    pub fn partition_dims(&self) -> &Cuboid {
        self.cuboids.last().unwrap()
    }

    /// (sort dimensions, partition dimensions); for a singleton batch both
    /// are the sole member.
    pub fn roles(&self) -> Result<(&Cuboid, &Cuboid)> {
        if self.cuboids.is_empty() {
            return Err(Error::Internal("empty batch has no roles".into()));
        }
        for pair in self.cuboids.windows(2) {
            if !pair[1].is_prefix_ancestor_of(&pair[0]) {
                return Err(Error::Internal(format!(
                    "malformed batch {}: members do not form a prefix chain",
                    self.index
                )));
            }
        }
        Ok((self.sort_dims(), self.partition_dims()))
    }
}

/// An ordered sequence of disjoint batches covering the requested cuboids.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub dims: usize,
    pub batches: Vec<Batch>,
    pub numbering: CuboidNumbering,
}

impl BatchPlan {
    pub fn batch_count(&self) -> usize {
        self.batches.len()
    }

    /// All member cuboids across batches (permutation sequences as planned).
    pub fn cuboids(&self) -> impl Iterator<Item = &Cuboid> {
        self.batches.iter().flat_map(|b| b.cuboids.iter())
    }

    /// Line-oriented text report, one line per batch.
    pub fn render(&self, names: &[String]) -> String {
        let mut out = String::new();
        for batch in &self.batches {
            let members = batch.cuboids.iter().map(|c| c.render(names)).join(",");
            out.push_str(&format!(
                "B{}: sort={} partition={} members={} id={}\n",
                batch.index,
                batch.sort_dims().render(names),
                batch.partition_dims().render(names),
                members,
                batch.identifier.to_hex()
            ));
        }
        out
    }
}

/// Membership bitmap for a batch: one bit per member cuboid number.
pub fn batch_identifier(members: &[Cuboid], numbering: &CuboidNumbering) -> Result<Bitmap> {
    let mut bitmap = Bitmap::new(numbering.len());
    for cuboid in members {
        let num = numbering.number_of(cuboid);
        if num == u32::MAX {
            return Err(Error::Internal(format!("cuboid {:?} has no number", cuboid.dims())));
        }
        bitmap.set(num as usize);
    }
    Ok(bitmap)
}

/// Builds the minimum-batch plan for the requested cuboids (full cube when
/// `requested` is `None`). The "all" cuboid is never part of a plan.
pub fn generate_plan(n: usize, requested: Option<&[Cuboid]>) -> Result<BatchPlan> {
    let numbering = CuboidNumbering::new(n)?;
    let groups = enumerate_lattice(n)?;

    // availability per canonical id, restricted to the request
    let mut available: Vec<bool> = vec![false; 1 << n];
    match requested {
        None => {
            for set in 1..(1usize << n) {
                available[set] = true;
            }
        }
        Some(cuboids) => {
            if cuboids.is_empty() {
                return Err(Error::Config("requested cuboid set is empty".into()));
            }
            for c in cuboids {
                if c.is_all() {
                    return Err(Error::Config(
                        "the \"all\" cuboid is computed separately and cannot be planned".into(),
                    ));
                }
                if c.dims().iter().any(|&d| d as usize >= n) {
                    return Err(Error::Config(format!(
                        "requested cuboid {:?} is not valid over {n} dimensions",
                        c.dims()
                    )));
                }
                available[c.canonical_id() as usize] = true;
            }
        }
    }

    // identity sequence per canonical id, for fallback starts
    let identity: Vec<Option<Cuboid>> = {
        let mut v = vec![None; 1 << n];
        for g in &groups {
            for m in &g.members {
                v[m.canonical_id() as usize] = Some(m.clone());
            }
        }
        v
    };

    let mut remaining: usize = available.iter().filter(|&&a| a).count();
    let mut last_consumed: Vec<Option<Cuboid>> = vec![None; n + 1];
    let mut batches: Vec<Batch> = Vec::new();

    while remaining > 0 {
        let arity = (1..=n)
            .rev()
            .find(|&a| {
                groups[a - 1].members.iter().any(|m| available[m.canonical_id() as usize])
            })
            .expect("remaining > 0 implies a non-empty group");

        let seed = pick_start(&groups[arity - 1], &available, &last_consumed[arity], &identity, n);

        let descendant = best_permutation(&seed, &available);
        let mut members = vec![descendant.clone()];
        for len in (1..descendant.arity()).rev() {
            let prefix = Cuboid::new(descendant.dims()[..len].to_vec(), n)?;
            if available[prefix.canonical_id() as usize] {
                members.push(prefix);
            }
        }

        for member in &members {
            available[member.canonical_id() as usize] = false;
            last_consumed[member.arity()] = Some(member.clone());
            remaining -= 1;
        }

        let identifier = batch_identifier(&members, &numbering)?;
        batches.push(Batch { index: batches.len(), cuboids: members, identifier });
    }

    Ok(BatchPlan { dims: n, batches, numbering })
}

/// Chooses the starting permutation for the next batch at the given arity:
/// the most recently consumed cuboid of that arity advanced along the
/// dimension cycle until it lands on an available set, else the first
/// available canonical cuboid in ascending-id order.
fn pick_start(
    group: &crate::lattice::LatticeGroup,
    available: &[bool],
    last: &Option<Cuboid>,
    identity: &[Option<Cuboid>],
    n: usize,
) -> Cuboid {
    if let Some(prev) = last {
        for hops in 1..n {
            let candidate = prev.rotate_hops(hops, n);
            if available[candidate.canonical_id() as usize] {
                return candidate;
            }
        }
    }
    let canonical: CanonicalId = group
        .members
        .iter()
        .map(|m| m.canonical_id())
        .find(|&id| available[id as usize])
        .expect("group has an available member");
    identity[canonical as usize].clone().expect("identity sequence exists")
}

/// Searches permutations of `seed`'s dimension set for the one with the most
/// available prefix ancestors. `seed` itself is tried first; remaining
/// permutations follow in lexicographic index order. Exits as soon as a
/// permutation has every proper prefix available.
fn best_permutation(seed: &Cuboid, available: &[bool]) -> Cuboid {
    let arity = seed.arity();
    if arity == 1 {
        return seed.clone();
    }
    let max_possible = arity - 1;

    let count_available = |dims: &[u8]| -> usize {
        let mut id: CanonicalId = 0;
        let mut count = 0;
        for &d in &dims[..arity - 1] {
            id |= 1 << d;
            if available[id as usize] {
                count += 1;
            }
        }
        count
    };

    let mut best = seed.clone();
    let mut best_count = count_available(seed.dims());
    if best_count == max_possible {
        return best;
    }

    let mut sorted: Vec<u8> = seed.dims().to_vec();
    sorted.sort_unstable();
    for perm in sorted.iter().copied().permutations(arity) {
        if perm == seed.dims() {
            continue;
        }
        let count = count_available(&perm);
        if count > best_count {
            best_count = count;
            best = Cuboid::from_valid_sequence(perm);
            if best_count == max_possible {
                break;
            }
        }
    }

    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| ((b'A' + i as u8) as char).to_string()).collect()
    }

    fn member_names(batch: &Batch, n: usize) -> Vec<String> {
        batch.cuboids.iter().map(|c| c.render(&names(n))).collect()
    }

    #[test]
    fn full_cube_plan_four_dims() {
        let plan = generate_plan(4, None).unwrap();
        assert_eq!(plan.batch_count(), 6);
        assert_eq!(member_names(&plan.batches[0], 4), ["ABCD", "ABC", "AB", "A"]);
        assert_eq!(member_names(&plan.batches[1], 4), ["BCD", "BC", "B"]);
        assert_eq!(member_names(&plan.batches[2], 4), ["CDA", "CD", "C"]);
        assert_eq!(member_names(&plan.batches[3], 4), ["DAB", "DA", "D"]);
        assert_eq!(member_names(&plan.batches[4], 4), ["AC"]);
        assert_eq!(member_names(&plan.batches[5], 4), ["BD"]);
    }

    #[test]
    fn full_cube_plan_three_dims() {
        let plan = generate_plan(3, None).unwrap();
        assert_eq!(plan.batch_count(), 3);
        assert_eq!(member_names(&plan.batches[0], 3), ["ABC", "AB", "A"]);
        assert_eq!(member_names(&plan.batches[1], 3), ["BC", "B"]);
        assert_eq!(member_names(&plan.batches[2], 3), ["CA", "C"]);
    }

    #[test]
    fn single_dim_plan() {
        let plan = generate_plan(1, None).unwrap();
        assert_eq!(plan.batch_count(), 1);
        assert_eq!(member_names(&plan.batches[0], 1), ["A"]);
    }

    #[test]
    fn full_cube_batch_counts_are_minimum() {
        // C(n, ceil(n/2)) for n = 2..6
        let expected = [(2usize, 2usize), (3, 3), (4, 6), (5, 10), (6, 20)];
        for (n, want) in expected {
            let plan = generate_plan(n, None).unwrap();
            assert_eq!(plan.batch_count(), want, "n={n}");
        }
    }

    #[test]
    fn plan_batches_are_disjoint_and_cover() {
        for n in 1..=6usize {
            let plan = generate_plan(n, None).unwrap();
            let mut seen = vec![false; 1 << n];
            for batch in &plan.batches {
                let (sort, partition) = batch.roles().unwrap();
                assert_eq!(sort, batch.sort_dims());
                assert_eq!(partition, batch.partition_dims());
                for member in &batch.cuboids {
                    let id = member.canonical_id() as usize;
                    assert!(!seen[id], "cuboid in two batches (n={n})");
                    seen[id] = true;
                    assert!(
                        member == batch.sort_dims()
                            || member.is_prefix_ancestor_of(batch.sort_dims())
                    );
                }
                assert_eq!(batch.identifier.popcount(), batch.cuboids.len());
            }
            assert_eq!(seen.iter().filter(|&&s| s).count(), (1 << n) - 1);
        }
    }

    #[test]
    fn plan_is_deterministic() {
        let a = generate_plan(5, None).unwrap();
        let b = generate_plan(5, None).unwrap();
        let names5 = names(5);
        assert_eq!(a.render(&names5), b.render(&names5));
    }

    #[test]
    fn partial_plan_stays_within_request() {
        let n = 4;
        let requested: Vec<Cuboid> = [vec![0u8, 1, 2, 3], vec![0, 1], vec![1, 2], vec![2u8]]
            .into_iter()
            .map(|d| Cuboid::new(d, n).unwrap())
            .collect();
        let plan = generate_plan(n, Some(&requested)).unwrap();
        let requested_ids: Vec<u16> = requested.iter().map(|c| c.canonical_id()).collect();
        let mut covered = Vec::new();
        for batch in &plan.batches {
            for member in &batch.cuboids {
                assert!(requested_ids.contains(&member.canonical_id()));
                covered.push(member.canonical_id());
            }
        }
        covered.sort_unstable();
        let mut want = requested_ids.clone();
        want.sort_unstable();
        assert_eq!(covered, want);
    }

    #[test]
    fn empty_request_is_rejected() {
        assert!(matches!(generate_plan(3, Some(&[])), Err(Error::Config(_))));
    }

    #[test]
    fn identifier_popcount_and_membership() {
        let plan = generate_plan(4, None).unwrap();
        let first = &plan.batches[0];
        assert_eq!(first.identifier.popcount(), 4);
        assert_eq!(first.identifier.len(), 16);
        for member in &first.cuboids {
            assert!(first.identifier.get(plan.numbering.number_of(member) as usize));
        }
        // the two singleton batches
        for batch in &plan.batches[4..] {
            assert_eq!(batch.identifier.popcount(), 1);
            assert!(batch.identifier.get(plan.numbering.number_of(&batch.cuboids[0]) as usize));
        }
    }

    #[test]
    fn identifier_empty_batch_is_all_zero() {
        let numbering = CuboidNumbering::new(4).unwrap();
        let bitmap = batch_identifier(&[], &numbering).unwrap();
        assert_eq!(bitmap.popcount(), 0);
        assert_eq!(bitmap.to_hex(), "0000");
    }

    #[test]
    fn bitmap_hex_reads_in_number_order() {
        let mut bitmap = Bitmap::new(16);
        bitmap.set(0);
        bitmap.set(4);
        bitmap.set(10);
        bitmap.set(14);
        assert_eq!(bitmap.to_hex(), "8822");
    }

    #[test]
    fn singleton_roles_coincide() {
        let plan = generate_plan(4, None).unwrap();
        let singleton = &plan.batches[4];
        let (sort, partition) = singleton.roles().unwrap();
        assert_eq!(sort, partition);
    }

    #[test]
    fn plan_render_format() {
        let plan = generate_plan(3, None).unwrap();
        let text = plan.render(&names(3));
        let first = text.lines().next().unwrap();
        // members ABC, AB, A carry numbers 6, 3, 0 in the 8-bit map
        assert_eq!(first, "B0: sort=ABC partition=A members=ABC,AB,A id=92");
    }
}
