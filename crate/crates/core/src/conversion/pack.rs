use std::ops::Range;
use std::sync::Arc;

use crate::attention::SeqLayout;
use crate::error::{invalid, Result};
use crate::tokenizer::{self, PAD};

use super::ChatRecord;

/// A tokenized document with its loss mask (1 on assistant tokens).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn from_chat(r: &ChatRecord) -> Self {
        let (ids, mask) = tokenizer::chat_sample(&r.prompt, &r.response);
        Self { ids, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Rows of concatenated documents. Segment ids restart the attention
/// window and the recurrent state at every document boundary, and rotary
/// positions restart at 0.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub segments: Vec<u32>,
    pub positions: Vec<usize>,
    /// Token ranges of the documents in each row.
    pub documents: Vec<Vec<Range<usize>>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PackStats {
    pub samples: usize,
    pub rows: usize,
    /// Samples cut to the row length.
    pub truncated: usize,
    pub dropped_tokens: usize,
    /// Tokens placed in rows (padding excluded).
    pub tokens: usize,
}

/// Greedy first-fit packing into rows of at most `l_max` tokens, one
/// [`PackedBatch`] per row. Samples longer than `l_max` lose their tail.
pub fn pack_sequences(samples: &[Sample], l_max: usize) -> Result<(Vec<PackedBatch>, PackStats)> {
    if l_max == 0 {
        return Err(invalid("packing length must be positive"));
    }
    let mut stats = PackStats {
        samples: samples.len(),
        ..Default::default()
    };
    let mut bins: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if s.is_empty() {
            continue;
        }
        let n = s.len().min(l_max);
        if s.len() > l_max {
            stats.truncated += 1;
            stats.dropped_tokens += s.len() - l_max;
        }
        match bins.iter_mut().find(|(used, _)| used + n <= l_max) {
            Some((used, docs)) => {
                *used += n;
                docs.push(i);
            }
            None => bins.push((n, vec![i])),
        }
    }
    let rows: Vec<PackedBatch> = bins
        .into_iter()
        .map(|(used, docs)| {
            let mut b = PackedBatch {
                batch: 1,
                len: used,
                ids: Vec::with_capacity(used),
                mask: Vec::with_capacity(used),
                segments: Vec::with_capacity(used),
                positions: Vec::with_capacity(used),
                documents: vec![Vec::new()],
            };
            for (seg, &d) in docs.iter().enumerate() {
                let s = &samples[d];
                let n = s.len().min(l_max);
                let start = b.ids.len();
                b.ids.extend_from_slice(&s.ids[..n]);
                b.mask.extend_from_slice(&s.mask[..n]);
                b.segments.extend(std::iter::repeat_n(seg as u32, n));
                b.positions.extend(0..n);
                b.documents[0].push(start..start + n);
            }
            b
        })
        .collect();
    stats.rows = rows.len();
    stats.tokens = rows.iter().map(|r| r.ids.len()).sum();
    Ok((rows, stats))
}

impl PackedBatch {
    /// Stacks rows into one batch, right-padding to the longest row. Padding
    /// gets its own segment and a zero mask.
    pub fn stack(rows: &[&PackedBatch]) -> Result<PackedBatch> {
        if rows.is_empty() {
            return Err(invalid("cannot stack zero rows"));
        }
        let len = rows.iter().flat_map(|r| r.row_lengths()).max().unwrap_or(0);
        let mut out = PackedBatch {
            batch: 0,
            len,
            ids: Vec::new(),
            mask: Vec::new(),
            segments: Vec::new(),
            positions: Vec::new(),
            documents: Vec::new(),
        };
        for r in rows {
            for b in 0..r.batch {
                let lo = b * r.len;
                let used = r.documents[b].last().map_or(0, |d| d.end);
                out.ids.extend_from_slice(&r.ids[lo..lo + used]);
                out.mask.extend_from_slice(&r.mask[lo..lo + used]);
                out.segments.extend_from_slice(&r.segments[lo..lo + used]);
                out.positions.extend_from_slice(&r.positions[lo..lo + used]);
                let pad = len - used;
                let pad_seg = r.documents[b].len() as u32;
                out.ids.extend(std::iter::repeat_n(PAD, pad));
                out.mask.extend(std::iter::repeat_n(0, pad));
                out.segments.extend(std::iter::repeat_n(pad_seg, pad));
                out.positions.extend(0..pad);
                out.documents.push(r.documents[b].clone());
                out.batch += 1;
            }
        }
        Ok(out)
    }

    fn row_lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.documents.iter().map(|d| d.last().map_or(0, |r| r.end))
    }

    pub fn layout(&self) -> SeqLayout {
        SeqLayout {
            batch: self.batch,
            len: self.len,
            positions: Arc::new(self.positions.clone()),
            segments: Some(Arc::new(self.segments.clone())),
        }
    }

    /// Next-token targets and weights per row: row `i` predicts token
    /// `i + 1` when that token is in the same document and masked in.
    pub fn targets(&self) -> (Vec<u32>, Vec<f64>) {
        let n = self.batch * self.len;
        let mut t = vec![0; n];
        let mut w = vec![0.0; n];
        for r in 0..n {
            let i = r % self.len;
            if i + 1 < self.len && self.segments[r + 1] == self.segments[r] && self.mask[r + 1] == 1 {
                t[r] = self.ids[r + 1];
                w[r] = 1.0;
            }
        }
        (t, w)
    }

    /// Number of predicted (loss-bearing) positions.
    pub fn loss_tokens(&self) -> usize {
        self.targets().1.iter().filter(|&&w| w > 0.0).count()
    }
}
