use std::ops::Range;

use super::AdError;

/// Groups edges by their target node in compressed form.
///
/// Edge `e` points at `targets[e]`; the edges of node `v` occupy
/// `offsets[v]..offsets[v + 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentIndex {
    targets: Vec<usize>,
    offsets: Vec<usize>,
}

impl SegmentIndex {
    /// Builds the index from per-edge targets that are already grouped in
    /// non-decreasing order.
    pub fn from_sorted_targets(targets: Vec<usize>, num_nodes: usize) -> Result<Self, AdError> {
        let mut offsets = vec![0usize; num_nodes + 1];
        let mut prev = 0usize;
        for (e, &t) in targets.iter().enumerate() {
            if t >= num_nodes {
                return Err(AdError::IndexOutOfRange { index: t, bound: num_nodes });
            }
            if t < prev {
                return Err(AdError::UnsortedSegments { edge: e });
            }
            prev = t;
            offsets[t + 1] += 1;
        }
        for v in 0..num_nodes {
            offsets[v + 1] += offsets[v];
        }
        Ok(SegmentIndex { targets, offsets })
    }

    /// Assembles an index from raw parts, checking only the structural
    /// invariants of `offsets`. Agreement between `targets` and `offsets`
    /// is checked lazily by the segment operations.
    pub fn from_parts(targets: Vec<usize>, offsets: Vec<usize>) -> Result<Self, AdError> {
        if offsets.is_empty() || offsets[0] != 0 {
            return Err(AdError::MalformedOffsets("offsets must start at 0".into()));
        }
        if offsets.windows(2).any(|w| w[1] < w[0]) {
            return Err(AdError::MalformedOffsets("offsets must be non-decreasing".into()));
        }
        if *offsets.last().unwrap() != targets.len() {
            return Err(AdError::MalformedOffsets(format!(
                "last offset {} != edge count {}",
                offsets.last().unwrap(),
                targets.len()
            )));
        }
        Ok(SegmentIndex { targets, offsets })
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.targets.len()
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    #[inline]
    pub fn segment(&self, v: usize) -> Range<usize> {
        self.offsets[v]..self.offsets[v + 1]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// Verifies that every edge sits in its target's segment.
    pub fn check_consistent(&self) -> Result<(), AdError> {
        let n = self.num_nodes();
        for v in 0..n {
            for e in self.segment(v) {
                let t = self.targets[e];
                if t == v {
                    continue;
                }
                if t < n && self.degree(t) == 0 {
                    return Err(AdError::EmptySegment { node: t });
                }
                return Err(AdError::SegmentMismatch { edge: e, target: t, segment: v });
            }
        }
        Ok(())
    }
}
