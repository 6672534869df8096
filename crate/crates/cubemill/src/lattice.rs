//! Cuboids, the cube lattice, and the prefix ancestor/descendant relation.
//!
//! A cuboid is an *ordered* sequence of dimension indices: the order is what
//! makes batching work, because an ancestor can ride along a descendant's
//! sorted stream only when it is a prefix of the descendant's sequence.
//! Cuboids that are permutations of each other denote the same view; the
//! canonical id (the unordered dimension set as a bit set) exists solely to
//! deduplicate across permutations.
//!
//! The grand-total ("all") cuboid is the empty sequence. It is excluded from
//! lattice groups and from the prefix relation; the cubing layer computes it
//! in a dedicated processing unit.

use crate::error::{Error, Result};

/// Upper bound on dimension count: canonical ids fit in a `u16` bit set and
/// batch identifier bitmaps stay within 2^16 bits.
pub const MAX_DIMS: usize = 16;

/// One grouping attribute of the schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dimension {
    pub index: usize,
    pub name: String,
    pub ty: DimType,
}

/// Value domain of a dimension column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DimType {
    Str,
    Int,
    /// Calendar date carried as the integer `yyyymmdd`.
    Date,
}

/// The unordered dimension set of a cuboid, as an n-bit set.
pub type CanonicalId = u16;

/// An ordered sequence of dimension indices naming one group-by view.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cuboid {
    dims: Vec<u8>,
}

impl Cuboid {
    /// Builds a cuboid from an ordered dimension index sequence.
    /// Duplicate indices or indices outside `0..n` are rejected.
    pub fn new(dims: Vec<u8>, n: usize) -> Result<Self> {
        let mut seen = 0u32;
        for &d in &dims {
            if (d as usize) >= n {
                return Err(Error::Config(format!(
                    "dimension index {d} out of range for {n} dimensions"
                )));
            }
            if seen & (1 << d) != 0 {
                return Err(Error::Config(format!("duplicate dimension index {d} in cuboid")));
            }
            seen |= 1 << d;
        }
        Ok(Cuboid { dims })
    }

    /// The "all" cuboid: the empty dimension sequence.
    pub fn all() -> Self {
        Cuboid { dims: Vec::new() }
    }

    /// Constructor for sequences already known to be valid (permutations of
    /// validated cuboids).
    pub(crate) fn from_valid_sequence(dims: Vec<u8>) -> Self {
        Cuboid { dims }
    }

    pub fn dims(&self) -> &[u8] {
        &self.dims
    }

    /// Number of dimensions (0 for the "all" cuboid).
    pub fn arity(&self) -> usize {
        self.dims.len()
    }

    pub fn is_all(&self) -> bool {
        self.dims.is_empty()
    }

    /// The unordered dimension set as a bit set.
    pub fn canonical_id(&self) -> CanonicalId {
        self.dims.iter().fold(0u16, |acc, &d| acc | (1 << d))
    }

    /// True iff `self` is a strict prefix of `descendant`'s sequence.
    ///
    /// The "all" cuboid is never an ancestor here; it is handled by an
    /// independent processing unit.
    pub fn is_prefix_ancestor_of(&self, descendant: &Cuboid) -> bool {
        !self.is_all()
            && self.dims.len() < descendant.dims.len()
            && descendant.dims[..self.dims.len()] == self.dims[..]
    }

    /// Advances every dimension `hops` steps along the directed cycle
    /// `d_0 -> d_1 -> ... -> d_{n-1} -> d_0` over the full schema.
    pub fn rotate_hops(&self, hops: usize, n: usize) -> Cuboid {
        let dims = self
            .dims
            .iter()
            .map(|&d| ((d as usize + hops) % n) as u8)
            .collect();
        Cuboid { dims }
    }

    /// Textual form: dimension names concatenated in sequence order.
    pub fn render(&self, names: &[String]) -> String {
        if self.is_all() {
            return "all".to_string();
        }
        self.dims.iter().map(|&d| names[d as usize].as_str()).collect()
    }
}

/// All cuboids of one arity.
#[derive(Debug, Clone)]
pub struct LatticeGroup {
    pub arity: usize,
    /// Members in ascending canonical-id order, each carried with its
    /// ascending-index dimension sequence.
    pub members: Vec<Cuboid>,
}

/// Enumerates the 2^n - 1 non-empty cuboids as `n` groups, group `i`
/// holding the cuboids with `i` dimensions.
pub fn enumerate_lattice(n: usize) -> Result<Vec<LatticeGroup>> {
    if n == 0 || n > MAX_DIMS {
        return Err(Error::Config(format!(
            "dimension count {n} out of supported range 1..={MAX_DIMS}"
        )));
    }
    let mut groups: Vec<LatticeGroup> = (1..=n)
        .map(|arity| LatticeGroup { arity, members: Vec::new() })
        .collect();
    // Ascending set order doubles as ascending canonical-id order.
    for set in 1u32..(1u32 << n) {
        let dims: Vec<u8> = (0..n as u8).filter(|&d| set & (1 << d) != 0).collect();
        let arity = dims.len();
        groups[arity - 1].members.push(Cuboid { dims });
    }
    Ok(groups)
}

/// Fixed bijection cuboid-number <-> cuboid used by batch identifier bitmaps.
///
/// Non-empty cuboids are numbered group by group in ascending arity, within a
/// group by ascending canonical id; the "all" cuboid takes the final number
/// `2^n - 1`. Permutations share the number of their canonical set.
#[derive(Debug, Clone)]
pub struct CuboidNumbering {
    n: usize,
    by_canonical: Vec<u32>,
}

impl CuboidNumbering {
    pub fn new(n: usize) -> Result<Self> {
        let groups = enumerate_lattice(n)?;
        let mut by_canonical = vec![u32::MAX; 1 << n];
        let mut next = 0u32;
        for group in &groups {
            for member in &group.members {
                by_canonical[member.canonical_id() as usize] = next;
                next += 1;
            }
        }
        by_canonical[0] = next; // "all" is numbered last
        Ok(CuboidNumbering { n, by_canonical })
    }

    pub fn dims(&self) -> usize {
        self.n
    }

    /// Total numbered cuboids, including "all".
    pub fn len(&self) -> usize {
        1 << self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn number_of(&self, cuboid: &Cuboid) -> u32 {
        self.by_canonical[cuboid.canonical_id() as usize]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cuboid(dims: &[u8], n: usize) -> Cuboid {
        Cuboid::new(dims.to_vec(), n).unwrap()
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| ((b'A' + i as u8) as char).to_string()).collect()
    }

    #[test]
    fn lattice_groups_for_four_dims() {
        let groups = enumerate_lattice(4).unwrap();
        assert_eq!(groups.len(), 4);
        let render =
            |g: &LatticeGroup| g.members.iter().map(|c| c.render(&names(4))).collect::<Vec<_>>();
        assert_eq!(render(&groups[0]), ["A", "B", "C", "D"]);
        let g2 = render(&groups[1]);
        assert_eq!(g2.len(), 6);
        for want in ["AB", "BC", "CD", "AD", "AC", "BD"] {
            assert!(g2.iter().any(|m| m == want), "missing {want} in {g2:?}");
        }
        assert_eq!(render(&groups[2]).len(), 4);
        assert_eq!(render(&groups[3]), ["ABCD"]);
    }

    #[test]
    fn lattice_single_dim() {
        let groups = enumerate_lattice(1).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].members, vec![cuboid(&[0], 1)]);
    }

    #[test]
    fn lattice_group_sizes_are_binomials() {
        let groups = enumerate_lattice(3).unwrap();
        let sizes: Vec<usize> = groups.iter().map(|g| g.members.len()).collect();
        assert_eq!(sizes, [3, 3, 1]);
    }

    #[test]
    fn lattice_rejects_out_of_range() {
        assert!(enumerate_lattice(0).is_err());
        assert!(enumerate_lattice(17).is_err());
    }

    #[test]
    fn lattice_covers_all_nonempty_subsets() {
        for n in 1..=6 {
            let groups = enumerate_lattice(n).unwrap();
            let total: usize = groups.iter().map(|g| g.members.len()).sum();
            assert_eq!(total, (1 << n) - 1);
            for (i, g) in groups.iter().enumerate() {
                assert_eq!(g.arity, i + 1);
                for m in &g.members {
                    assert_eq!(m.arity(), g.arity);
                }
            }
        }
    }

    #[test]
    fn prefix_ancestor_examples() {
        let n = 4;
        let a = cuboid(&[0], n);
        let ab = cuboid(&[0, 1], n);
        let bc = cuboid(&[1, 2], n);
        let abc = cuboid(&[0, 1, 2], n);
        let abcd = cuboid(&[0, 1, 2, 3], n);
        assert!(a.is_prefix_ancestor_of(&ab));
        assert!(!bc.is_prefix_ancestor_of(&abcd));
        assert!(abc.is_prefix_ancestor_of(&abcd));
        // strictness and the "all" exclusion
        assert!(!ab.is_prefix_ancestor_of(&ab));
        assert!(!Cuboid::all().is_prefix_ancestor_of(&ab));
    }

    #[test]
    fn prefix_ancestor_implies_shorter_and_subset() {
        let groups = enumerate_lattice(4).unwrap();
        let all: Vec<&Cuboid> = groups.iter().flat_map(|g| g.members.iter()).collect();
        for a in &all {
            for d in &all {
                if a.is_prefix_ancestor_of(d) {
                    assert!(a.arity() < d.arity());
                    assert_eq!(a.canonical_id() & d.canonical_id(), a.canonical_id());
                }
            }
        }
    }

    #[test]
    fn prefix_ancestor_transitive_exhaustive() {
        // every permutation cuboid over n <= 4 (5 is covered by the same
        // argument but the triple loop gets slow)
        for n in 2..=4usize {
            let mut perms: Vec<Cuboid> = Vec::new();
            for set in 1u32..(1u32 << n) {
                let dims: Vec<u8> = (0..n as u8).filter(|&d| set & (1 << d) != 0).collect();
                for p in permute(&dims) {
                    perms.push(Cuboid::new(p, n).unwrap());
                }
            }
            for a in &perms {
                for b in &perms {
                    if !a.is_prefix_ancestor_of(b) {
                        continue;
                    }
                    for c in &perms {
                        if b.is_prefix_ancestor_of(c) {
                            assert!(a.is_prefix_ancestor_of(c), "{a:?} {b:?} {c:?}");
                        }
                    }
                }
            }
        }
    }

    fn permute(items: &[u8]) -> Vec<Vec<u8>> {
        if items.is_empty() {
            return vec![Vec::new()];
        }
        let mut out = Vec::new();
        for (i, &x) in items.iter().enumerate() {
            let mut rest = items.to_vec();
            rest.remove(i);
            for mut p in permute(&rest) {
                p.insert(0, x);
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn rotate_examples() {
        let n = 4;
        let abc = cuboid(&[0, 1, 2], n);
        assert_eq!(abc.rotate_hops(1, n), cuboid(&[1, 2, 3], n)); // ABC -> BCD
        let bcd = cuboid(&[1, 2, 3], n);
        assert_eq!(bcd.rotate_hops(1, n), cuboid(&[2, 3, 0], n)); // BCD -> CDA
        let abcd = cuboid(&[0, 1, 2, 3], n);
        let rotated = abcd.rotate_hops(1, n);
        assert_eq!(rotated, cuboid(&[1, 2, 3, 0], n)); // BCDA
        assert_eq!(rotated.canonical_id(), abcd.canonical_id());
    }

    #[test]
    fn rotate_full_cycle_is_identity() {
        for n in 1..=6usize {
            let groups = enumerate_lattice(n).unwrap();
            for g in &groups {
                for c in &g.members {
                    assert_eq!(&c.rotate_hops(n, n), c);
                }
            }
        }
    }

    #[test]
    fn numbering_is_a_bijection_with_all_last() {
        for n in 1..=5usize {
            let numbering = CuboidNumbering::new(n).unwrap();
            let groups = enumerate_lattice(n).unwrap();
            let mut seen = vec![false; 1 << n];
            for g in &groups {
                for m in &g.members {
                    let num = numbering.number_of(m) as usize;
                    assert!(!seen[num]);
                    seen[num] = true;
                }
            }
            let all_num = numbering.number_of(&Cuboid::all()) as usize;
            assert_eq!(all_num, (1 << n) - 1);
            assert!(!seen[all_num]);
        }
    }

    #[test]
    fn numbering_ignores_permutation() {
        let numbering = CuboidNumbering::new(4).unwrap();
        let ca = cuboid(&[2, 0], 4);
        let ac = cuboid(&[0, 2], 4);
        assert_eq!(numbering.number_of(&ca), numbering.number_of(&ac));
    }

    #[test]
    fn cuboid_construction_rejects_bad_input() {
        assert!(Cuboid::new(vec![0, 0], 4).is_err());
        assert!(Cuboid::new(vec![4], 4).is_err());
    }
}
