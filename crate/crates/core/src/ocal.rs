//! Memory and disk footprint accounting for file objects and their capsules.
//!
//! A file object's memory image and its disk image are each described by a
//! list of disjoint extents. Summing both and comparing them tells whether
//! the object was loaded into memory in compressed form.
//!
//! Extent offsets are block indices and lengths are bytes; an extent of
//! `length` bytes at `offset` occupies blocks
//! `[offset, offset + ceil(length / block_size))`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ProvenanceCapsule;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OcalError {
    #[error("extent {index} has zero length")]
    EmptyExtent { index: usize },
    #[error("extents at offsets {first} and {second} overlap")]
    Overlap { first: u64, second: u64 },
    #[error("extent at offset {offset} runs past the end of the address space")]
    OutOfRange { offset: u64 },
    #[error("expected a {expected:?} block list, got {got:?}")]
    KindMismatch { expected: BlockKind, got: BlockKind },
    #[error("capsule {0} is not bound")]
    Unbound(crate::model::BId),
    #[error("capsule {0} has zero original length")]
    ZeroLength(crate::model::BId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BlockKind {
    Memory,
    Disk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extent {
    pub offset: u64,
    pub length: u64,
}

impl Extent {
    pub fn new(offset: u64, length: u64) -> Self {
        Self { offset, length }
    }
}

pub const DEFAULT_BLOCK_SIZE: u64 = 4096;

/// Extents of one kind. Construction checks that extents are non-empty and
/// occupy pairwise disjoint blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockList {
    kind: BlockKind,
    block_size: u64,
    extents: Vec<Extent>,
}

impl BlockList {
    pub fn new(kind: BlockKind, extents: Vec<Extent>) -> Result<Self, OcalError> {
        Self::with_block_size(kind, DEFAULT_BLOCK_SIZE, extents)
    }

    /// `block_size` of 1 makes offsets byte addresses.
    pub fn with_block_size(
        kind: BlockKind,
        block_size: u64,
        extents: Vec<Extent>,
    ) -> Result<Self, OcalError> {
        let block_size = block_size.max(1);
        check_disjoint(&extents, block_size)?;
        Ok(Self {
            kind,
            block_size,
            extents,
        })
    }

    /// Back-to-back extents of one block each covering `total` bytes, the
    /// last one possibly shorter.
    pub fn contiguous(kind: BlockKind, total: u64, block_size: u64) -> Self {
        let block_size = block_size.max(1);
        let mut extents = Vec::new();
        let mut offset = 0;
        let mut left = total;
        while left > 0 {
            let length = left.min(block_size);
            extents.push(Extent { offset, length });
            offset += 1;
            left -= length;
        }
        Self {
            kind,
            block_size,
            extents,
        }
    }

    pub fn block_size(&self) -> u64 {
        self.block_size
    }

    pub fn kind(&self) -> BlockKind {
        self.kind
    }

    pub fn extents(&self) -> &[Extent] {
        &self.extents
    }
}

fn check_disjoint(extents: &[Extent], block_size: u64) -> Result<(), OcalError> {
    let mut spans: Vec<(u64, u64)> = Vec::with_capacity(extents.len());
    for (index, e) in extents.iter().enumerate() {
        if e.length == 0 {
            return Err(OcalError::EmptyExtent { index });
        }
        let end = e
            .offset
            .checked_add(e.length.div_ceil(block_size))
            .ok_or(OcalError::OutOfRange { offset: e.offset })?;
        spans.push((e.offset, end));
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(OcalError::Overlap {
                first: w[0].0,
                second: w[1].0,
            });
        }
    }
    Ok(())
}

/// Total extent length.
///
/// Walks the list with a cursor clamped to the last index, the same walk the
/// footprint procedure uses for both memory and disk blocks; every extent is
/// visited exactly once.
pub fn sum_blocks(blocks: &BlockList) -> Result<u64, OcalError> {
    check_disjoint(&blocks.extents, blocks.block_size)?;
    let len = blocks.extents.len();
    let mut sum: u64 = 0;
    let mut cursor = 0;
    while cursor < len {
        let at = cursor.min(len - 1);
        sum += blocks.extents[at].length;
        cursor += 1;
    }
    Ok(sum)
}

/// Which ordering of memory and disk totals counts as compressed loading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompressionRule {
    /// Memory image smaller than the disk image.
    #[default]
    MemoryBelowDisk,
    /// Memory image larger than the disk image.
    MemoryAboveDisk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemDiskFootprint {
    pub m_sum: u64,
    pub sb_sum: u64,
    pub compressed: bool,
    /// Size difference when compressed, otherwise 0.
    pub delta_f: u64,
}

pub fn footprint(mem: &BlockList, disk: &BlockList) -> Result<MemDiskFootprint, OcalError> {
    footprint_with(mem, disk, CompressionRule::default())
}

pub fn footprint_with(
    mem: &BlockList,
    disk: &BlockList,
    rule: CompressionRule,
) -> Result<MemDiskFootprint, OcalError> {
    if mem.kind != BlockKind::Memory {
        return Err(OcalError::KindMismatch {
            expected: BlockKind::Memory,
            got: mem.kind,
        });
    }
    if disk.kind != BlockKind::Disk {
        return Err(OcalError::KindMismatch {
            expected: BlockKind::Disk,
            got: disk.kind,
        });
    }
    let m_sum = sum_blocks(mem)?;
    let sb_sum = sum_blocks(disk)?;
    let (compressed, delta_f) = match rule {
        CompressionRule::MemoryBelowDisk if m_sum < sb_sum => (true, sb_sum - m_sum),
        CompressionRule::MemoryAboveDisk if m_sum > sb_sum => (true, m_sum - sb_sum),
        _ => (false, 0),
    };
    Ok(MemDiskFootprint {
        m_sum,
        sb_sum,
        compressed,
        delta_f,
    })
}

/// Serialized capsule size in bytes, as written to the capsule log.
pub fn serialized_len(capsule: &ProvenanceCapsule) -> usize {
    serde_json::to_vec(capsule).map(|v| v.len()).unwrap_or(0)
}

/// Provenance storage relative to the size of the file it describes:
/// (serialized capsule + disk blocks) / original length.
pub fn capsule_overhead(
    capsule: &ProvenanceCapsule,
    fp: &MemDiskFootprint,
) -> Result<f64, OcalError> {
    if !capsule.bound {
        return Err(OcalError::Unbound(capsule.b_id));
    }
    if capsule.original_length == 0 {
        return Err(OcalError::ZeroLength(capsule.b_id));
    }
    let stored = serialized_len(capsule) as f64 + fp.sb_sum as f64;
    Ok(stored / capsule.original_length as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BId, CapsuleSeal, OpKind, ProvenanceRecord};

    fn list(kind: BlockKind, ext: &[(u64, u64)]) -> BlockList {
        BlockList::new(kind, ext.iter().map(|&(o, l)| Extent::new(o, l)).collect()).unwrap()
    }

    #[test]
    fn empty_sum() {
        assert_eq!(sum_blocks(&list(BlockKind::Memory, &[])).unwrap(), 0);
    }

    #[test]
    fn two_extents() {
        let b = list(BlockKind::Memory, &[(0, 4096), (10, 8192)]);
        assert_eq!(sum_blocks(&b).unwrap(), 12288);
    }

    #[test]
    fn overlap_rejected() {
        // 8192 bytes at block 0 occupy blocks 0 and 1
        let err = BlockList::new(
            BlockKind::Disk,
            vec![Extent::new(0, 8192), Extent::new(1, 10)],
        )
        .unwrap_err();
        assert_eq!(
            err,
            OcalError::Overlap {
                first: 0,
                second: 1
            }
        );
        let bytes = BlockList::with_block_size(
            BlockKind::Disk,
            1,
            vec![Extent::new(0, 10), Extent::new(5, 10)],
        );
        assert_eq!(
            bytes.unwrap_err(),
            OcalError::Overlap {
                first: 0,
                second: 5
            }
        );
        assert!(matches!(
            BlockList::new(BlockKind::Disk, vec![Extent::new(0, 0)]),
            Err(OcalError::EmptyExtent { index: 0 })
        ));
    }

    #[test]
    fn adjacent_extents_are_disjoint() {
        let b = list(BlockKind::Disk, &[(0, 4096), (1, 4096)]);
        assert_eq!(sum_blocks(&b).unwrap(), 8192);
    }

    fn fp(m: u64, d: u64) -> MemDiskFootprint {
        footprint(
            &BlockList::contiguous(BlockKind::Memory, m, 64),
            &BlockList::contiguous(BlockKind::Disk, d, 64),
        )
        .unwrap()
    }

    #[test]
    fn footprint_cases() {
        assert_eq!(
            fp(1000, 1000),
            MemDiskFootprint {
                m_sum: 1000,
                sb_sum: 1000,
                compressed: false,
                delta_f: 0
            }
        );
        assert_eq!(
            fp(800, 1000),
            MemDiskFootprint {
                m_sum: 800,
                sb_sum: 1000,
                compressed: true,
                delta_f: 200
            }
        );
        assert_eq!(
            fp(1000, 800),
            MemDiskFootprint {
                m_sum: 1000,
                sb_sum: 800,
                compressed: false,
                delta_f: 0
            }
        );
    }

    #[test]
    fn reversed_rule() {
        let mem = BlockList::contiguous(BlockKind::Memory, 1000, 100);
        let disk = BlockList::contiguous(BlockKind::Disk, 800, 100);
        let f = footprint_with(&mem, &disk, CompressionRule::MemoryAboveDisk).unwrap();
        assert!(f.compressed);
        assert_eq!(f.delta_f, 200);
    }

    #[test]
    fn kind_mismatch() {
        let mem = BlockList::contiguous(BlockKind::Memory, 10, 4);
        assert!(matches!(
            footprint(&mem, &mem),
            Err(OcalError::KindMismatch {
                expected: BlockKind::Disk,
                ..
            })
        ));
        assert!(matches!(
            footprint(&BlockList::contiguous(BlockKind::Disk, 1, 1), &mem),
            Err(OcalError::KindMismatch {
                expected: BlockKind::Memory,
                ..
            })
        ));
    }

    fn capsule(records: usize, b: u64) -> ProvenanceCapsule {
        let b_id = BId::new(b).unwrap();
        ProvenanceCapsule {
            b_id,
            vm_id: "vm-0001".into(),
            original_path: "/data/f".into(),
            original_length: 512 << 20,
            bound: true,
            records: (0..records as u64)
                .map(|i| ProvenanceRecord {
                    event_id: i + 1,
                    timestamp_ms: i,
                    operator: "tenant".into(),
                    operation: OpKind::Write,
                    location: format!("vm-0001:sb-{b:08}"),
                    executing_entity: "app".into(),
                    sender: None,
                    receiver: None,
                })
                .collect(),
            seal: Some(CapsuleSeal {
                location: format!("vm-0001:sb-{b:08}"),
                executing_entity: "controller".into(),
                b_id,
            }),
        }
    }

    #[test]
    fn overhead_of_empty_capsule_is_header_over_length() {
        let cap = capsule(0, 1);
        let zero = fp(0, 0);
        let h = serialized_len(&cap) as f64;
        assert_eq!(
            capsule_overhead(&cap, &zero).unwrap(),
            h / (512.0 * 1048576.0)
        );
    }

    #[test]
    fn overhead_grows_with_records() {
        let zero = fp(0, 0);
        let mut last = 0.0;
        for n in [1, 2, 4, 8, 16] {
            let r = capsule_overhead(&capsule(n, 1), &zero).unwrap();
            assert!(r > last);
            last = r;
        }
        let small = serialized_len(&capsule(8, 1)) as f64;
        let big = serialized_len(&capsule(16, 1)) as f64;
        assert!((big / small - 2.0).abs() < 0.2);
    }

    #[test]
    fn overhead_invariant_under_equal_width_relabel() {
        let zero = fp(0, 0);
        assert_eq!(
            capsule_overhead(&capsule(3, 5), &zero).unwrap(),
            capsule_overhead(&capsule(3, 7), &zero).unwrap()
        );
    }

    #[test]
    fn overhead_requires_bound() {
        let mut cap = capsule(1, 1);
        cap.bound = false;
        assert!(matches!(
            capsule_overhead(&cap, &fp(0, 0)),
            Err(OcalError::Unbound(_))
        ));
    }
}
