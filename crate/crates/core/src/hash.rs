//! 32-byte SHA-256 digests and the binary Merkle tree used by every commitment.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

/// A SHA-256 output. Serialized as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    /// Hash of the concatenation of `parts`.
    pub fn of_parts<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> Self {
        let mut h = Sha256::new();
        for p in parts {
            h.update(p);
        }
        Digest(h.finalize().into())
    }

    pub fn combine(left: &Digest, right: &Digest) -> Self {
        Self::of_parts([left.0.as_slice(), right.0.as_slice()])
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Digest(out))
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Height of a tree over `leaves` leaves: ceil(log2(leaves)), 0 for a single leaf.
pub fn tree_height(leaves: usize) -> u32 {
    if leaves <= 1 {
        0
    } else {
        usize::BITS - (leaves - 1).leading_zeros()
    }
}

/// Membership proof: sibling digests from the leaf level upwards.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleProof {
    pub index: u64,
    pub siblings: Vec<Digest>,
}

impl MerkleProof {
    /// Root implied by `leaf` sitting at `self.index`.
    pub fn root_for(&self, leaf: &Digest) -> Digest {
        let mut acc = *leaf;
        let mut idx = self.index;
        for sib in &self.siblings {
            acc = if idx & 1 == 0 {
                Digest::combine(&acc, sib)
            } else {
                Digest::combine(sib, &acc)
            };
            idx >>= 1;
        }
        acc
    }

    /// Checks the proof against `root` for a tree of `leaf_count` leaves.
    pub fn verify(&self, root: &Digest, leaf: &Digest, leaf_count: u64) -> bool {
        self.index < leaf_count
            && self.siblings.len() as u32 == tree_height(leaf_count as usize)
            && self.root_for(leaf) == *root
    }
}

/// Binary SHA-256 Merkle tree, zero-padded to the next power of two with the
/// all-zero leaf. Keeps every level so single-leaf updates cost O(height).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MerkleTree {
    leaf_count: usize,
    // levels[0] are the padded leaves; the last level holds the root.
    levels: Vec<Vec<Digest>>,
}

impl MerkleTree {
    pub fn new(leaves: &[Digest]) -> Self {
        assert!(!leaves.is_empty(), "merkle tree needs at least one leaf");
        let height = tree_height(leaves.len());
        let width = 1usize << height;
        let mut base = leaves.to_vec();
        base.resize(width, Digest::ZERO);
        let mut levels = vec![base];
        while levels.last().map(Vec::len).unwrap_or(1) > 1 {
            let prev = levels.last().unwrap();
            let next = prev
                .chunks(2)
                .map(|pair| Digest::combine(&pair[0], &pair[1]))
                .collect();
            levels.push(next);
        }
        MerkleTree {
            leaf_count: leaves.len(),
            levels,
        }
    }

    pub fn root(&self) -> Digest {
        self.levels.last().unwrap()[0]
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    pub fn height(&self) -> u32 {
        (self.levels.len() - 1) as u32
    }

    pub fn leaf(&self, index: usize) -> Option<Digest> {
        (index < self.leaf_count).then(|| self.levels[0][index])
    }

    pub fn proof(&self, index: usize) -> Option<MerkleProof> {
        if index >= self.leaf_count {
            return None;
        }
        let mut idx = index;
        let mut siblings = Vec::with_capacity(self.levels.len() - 1);
        for level in &self.levels[..self.levels.len() - 1] {
            siblings.push(level[idx ^ 1]);
            idx >>= 1;
        }
        Some(MerkleProof {
            index: index as u64,
            siblings,
        })
    }

    pub fn update(&mut self, index: usize, leaf: Digest) {
        assert!(index < self.leaf_count);
        self.levels[0][index] = leaf;
        let mut idx = index;
        for lvl in 1..self.levels.len() {
            idx >>= 1;
            let left = self.levels[lvl - 1][2 * idx];
            let right = self.levels[lvl - 1][2 * idx + 1];
            self.levels[lvl][idx] = Digest::combine(&left, &right);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaves(n: usize) -> Vec<Digest> {
        (0..n)
            .map(|i| Digest::of(&(i as u64).to_le_bytes()))
            .collect()
    }

    #[test]
    fn single_leaf_tree_is_its_own_root() {
        let l = leaves(1);
        let t = MerkleTree::new(&l);
        assert_eq!(t.root(), l[0]);
        assert_eq!(t.proof(0).unwrap().siblings.len(), 0);
    }

    #[test]
    fn eight_leaves_give_height_three() {
        let t = MerkleTree::new(&leaves(8));
        assert_eq!(t.height(), 3);
        assert_eq!(t.proof(5).unwrap().siblings.len(), 3);
    }

    #[test]
    fn padding_uses_zero_leaf() {
        let l = leaves(3);
        let t = MerkleTree::new(&l);
        let left = Digest::combine(&l[0], &l[1]);
        let right = Digest::combine(&l[2], &Digest::ZERO);
        assert_eq!(t.root(), Digest::combine(&left, &right));
    }

    #[test]
    fn every_proof_verifies_and_tampering_fails() {
        for n in 1..20 {
            let l = leaves(n);
            let t = MerkleTree::new(&l);
            for (i, leaf) in l.iter().enumerate() {
                let p = t.proof(i).unwrap();
                assert!(p.verify(&t.root(), leaf, n as u64));
                for s in 0..p.siblings.len() {
                    let mut bad = p.clone();
                    bad.siblings[s].0[0] ^= 1;
                    assert!(!bad.verify(&t.root(), leaf, n as u64));
                }
            }
            assert!(t.proof(n).is_none());
        }
    }

    #[test]
    fn incremental_update_matches_rebuild() {
        let mut l = leaves(11);
        let mut t = MerkleTree::new(&l);
        l[7] = Digest::of(b"changed");
        t.update(7, l[7]);
        assert_eq!(t, MerkleTree::new(&l));
    }

    #[test]
    fn hex_roundtrip() {
        let d = Digest::of(b"abc");
        assert_eq!(
            d.to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<Digest>(&json).unwrap(), d);
    }
}
