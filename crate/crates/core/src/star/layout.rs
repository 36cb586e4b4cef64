//! Flattened sequence layout: `[text][video][SEP][group 1] … [group T]`.

use super::StarDims;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Text,
    Video,
    Sep,
    Group,
}

/// Annotation of one sequence position. Fields that do not apply are zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub kind: Segment,
    /// Zero-based group (timestep) index; for video tokens, the frame index.
    pub group: usize,
    pub view: usize,
    pub spatial: usize,
    pub chunk: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLayout {
    pub dims: StarDims,
    pub text_len: usize,
    pub slots: Vec<Slot>,
}

impl SequenceLayout {
    pub fn new(dims: &StarDims, text_len: usize) -> Self {
        let (s, n) = (dims.spatial(), dims.chunks);
        let mut slots = Vec::with_capacity(text_len + dims.video_len() + 1 + dims.timesteps * dims.group_len());
        let blank = Slot {
            kind: Segment::Text,
            group: 0,
            view: 0,
            spatial: 0,
            chunk: 0,
        };
        slots.extend(std::iter::repeat_n(blank, text_len));
        for t in 0..dims.timesteps {
            for sp in 0..s {
                for c in 0..n {
                    slots.push(Slot {
                        kind: Segment::Video,
                        group: t,
                        spatial: sp,
                        chunk: c,
                        ..blank
                    });
                }
            }
        }
        slots.push(Slot {
            kind: Segment::Sep,
            ..blank
        });
        for t in 0..dims.timesteps {
            for v in 0..dims.views {
                for sp in 0..s {
                    for c in 0..n {
                        slots.push(Slot {
                            kind: Segment::Group,
                            group: t,
                            view: v,
                            spatial: sp,
                            chunk: c,
                        });
                    }
                }
            }
        }
        Self {
            dims: dims.clone(),
            text_len,
            slots,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn sep_index(&self) -> usize {
        self.text_len + self.dims.video_len()
    }

    /// Index of the first position of group `t`.
    pub fn group_start(&self, t: usize) -> usize {
        self.sep_index() + 1 + t * self.dims.group_len()
    }

    /// Positions fed to the decoder: every slot except the final group token,
    /// which is only ever a prediction target.
    pub fn input_len(&self) -> usize {
        self.len() - 1
    }

    /// Slot predicted by the output at input position `p`, if any.
    pub fn target_of(&self, p: usize) -> Option<&Slot> {
        if p >= self.sep_index() {
            self.slots.get(p + 1)
        } else {
            None
        }
    }
}

/// FNV-1a bucket of each lowercase whitespace-separated word.
pub fn hash_words(prompt: &str, buckets: usize) -> Vec<usize> {
    prompt
        .split_whitespace()
        .map(|w| {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for b in w.to_lowercase().bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
            (h % buckets as u64) as usize
        })
        .collect()
}
