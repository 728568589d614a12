use std::ops::Range;

use crate::numeric::Mask;

/// Fixed-size partition of encoder frames into chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkSchedule {
    chunk_frames: usize,
    frames: usize,
}

impl ChunkSchedule {
    pub fn new(chunk_frames: usize, frames: usize) -> Self {
        assert!(chunk_frames >= 1, "chunk size must be positive");
        Self {
            chunk_frames: chunk_frames.min(frames.max(1)),
            frames,
        }
    }

    pub fn chunk_frames(&self) -> usize {
        self.chunk_frames
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn num_chunks(&self) -> usize {
        self.frames.div_ceil(self.chunk_frames)
    }

    pub fn chunk_of(&self, t: usize) -> usize {
        t / self.chunk_frames
    }

    pub fn range(&self, chunk: usize) -> Range<usize> {
        let start = chunk * self.chunk_frames;
        start..((chunk + 1) * self.chunk_frames).min(self.frames)
    }

    /// Last frame index of the chunk containing `t`.
    pub fn delta(&self, t: usize) -> usize {
        self.range(self.chunk_of(t)).end - 1
    }

    /// Frames visible to the decoder for chunk `chunk`: `h[0..horizon]`.
    pub fn horizon(&self, chunk: usize) -> usize {
        self.range(chunk).end
    }
}

/// Row layout and visibility for a chunked encoder with lookahead.
///
/// Lookahead frames are duplicated into per-chunk right-context blocks
/// appended after the `frames` main rows. A main row in chunk `c` sees main
/// rows of chunks `<= c` plus block `c`; block `c` sees the same set. No row
/// ever sees a main row of a later chunk, so the dependence on future input
/// stops at `lookahead` chunks regardless of depth.
#[derive(Debug, Clone)]
pub struct EncoderLayout {
    /// Source frame of each row (main rows first).
    pub rows: Vec<usize>,
    pub mask: Mask,
}

impl EncoderLayout {
    pub fn new(schedule: &ChunkSchedule, lookahead: usize) -> Self {
        let frames = schedule.frames();
        let mut rows: Vec<usize> = (0..frames).collect();
        let mut owner: Vec<usize> = (0..frames).map(|t| schedule.chunk_of(t)).collect();
        let mut is_context = vec![false; frames];
        for c in 0..schedule.num_chunks() {
            let last = (c + lookahead).min(schedule.num_chunks() - 1);
            for later in c + 1..=last {
                for t in schedule.range(later) {
                    rows.push(t);
                    owner.push(c);
                    is_context.push(true);
                }
            }
        }
        let mask = Mask::from_fn(rows.len(), rows.len(), |i, j| {
            if is_context[j] {
                owner[j] == owner[i]
            } else {
                owner[j] <= owner[i]
            }
        });
        Self { rows, mask }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_is_chunk_end() {
        let s = ChunkSchedule::new(4, 10);
        assert_eq!(s.num_chunks(), 3);
        assert_eq!((0..10).map(|t| s.delta(t)).collect::<Vec<_>>(), vec![3, 3, 3, 3, 7, 7, 7, 7, 9, 9]);
        assert_eq!(s.horizon(2), 10);
    }

    #[test]
    fn delta_bounds() {
        for n in 1..6 {
            let s = ChunkSchedule::new(n, 17);
            for t in 0..17 {
                assert!(t <= s.delta(t) && s.delta(t) < t + n);
            }
        }
    }

    #[test]
    fn context_blocks_duplicate_next_chunk() {
        let s = ChunkSchedule::new(2, 5);
        let layout = EncoderLayout::new(&s, 1);
        // main 0..5, block0 = {2,3}, block1 = {4}, block2 = {}
        assert_eq!(layout.rows, vec![0, 1, 2, 3, 4, 2, 3, 4]);
        // frame 0 sees main 0,1 and block 0 only
        let visible: Vec<usize> = (0..8).filter(|&j| layout.mask.allowed(0, j)).collect();
        assert_eq!(visible, vec![0, 1, 5, 6]);
        // last chunk has no lookahead
        let visible: Vec<usize> = (0..8).filter(|&j| layout.mask.allowed(4, j)).collect();
        assert_eq!(visible, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn zero_lookahead_is_block_causal() {
        let s = ChunkSchedule::new(2, 4);
        let layout = EncoderLayout::new(&s, 0);
        assert_eq!(layout.rows.len(), 4);
        assert!(layout.mask.allowed(1, 0) && layout.mask.allowed(0, 1));
        assert!(!layout.mask.allowed(1, 2));
    }
}
