//! Sandwich prompts: instruction prefix, visual tokens, instruction suffix.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::vision::FrameEmbedding;
use crate::{Error, Mat, Real, Result};

/// Byte-level token ids and the text they came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextTokens {
    pub ids: Vec<u32>,
    pub source_text: String,
}

impl TextTokens {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One id per UTF-8 byte.
pub fn tokenize_stub(text: &str) -> TextTokens {
    TextTokens {
        ids: text.bytes().map(u32::from).collect(),
        source_text: text.into(),
    }
}

pub fn detokenize(ids: &[u32]) -> Result<String> {
    let bytes = ids
        .iter()
        .map(|&i| u8::try_from(i).map_err(|_| Error::Invalid(alloc::format!("token id {i} is not a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|e| Error::Invalid(alloc::format!("invalid UTF-8 at byte {}", e.utf8_error().valid_up_to())))
}

/// Where each segment sits in the assembled sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub prefix_range: Range<usize>,
    pub visual_range: Range<usize>,
    pub suffix_range: Range<usize>,
    /// Start index of each frame's tokens.
    pub frame_boundaries: Vec<usize>,
}

impl PromptLayout {
    /// Layout for the given segment lengths; `frame_lens` are the per-frame
    /// visual token counts.
    pub fn new(prefix: usize, frame_lens: &[usize], suffix: usize) -> Result<Self> {
        let visual: usize = frame_lens.iter().sum();
        if visual == 0 {
            return Err(Error::Empty("visual segment"));
        }
        let mut frame_boundaries = Vec::with_capacity(frame_lens.len());
        let mut at = prefix;
        for &n in frame_lens {
            frame_boundaries.push(at);
            at += n;
        }
        Ok(Self {
            prefix_range: 0..prefix,
            visual_range: prefix..prefix + visual,
            suffix_range: prefix + visual..prefix + visual + suffix,
            frame_boundaries,
        })
    }

    pub fn len(&self) -> usize {
        self.suffix_range.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn embed_ids<F: Real>(ids: &[u32], table: &Mat<F>, out: &mut Mat<F>) -> Result<()> {
    for &id in ids {
        let row = id as usize;
        if row >= table.rows() {
            return Err(Error::Invalid(alloc::format!(
                "token id {id} outside embedding table of {} rows",
                table.rows()
            )));
        }
        out.push_row(table.row(row))?;
    }
    Ok(())
}

/// Embeds prefix and suffix through `embed_table` (one row per id) and
/// places every frame's tokens between them, CLS first within each frame.
pub fn assemble_sandwich<F: Real>(
    prefix: &TextTokens,
    visual: &[FrameEmbedding<F>],
    suffix: &TextTokens,
    embed_table: &Mat<F>,
) -> Result<(Mat<F>, PromptLayout)> {
    let frame_lens: Vec<usize> = visual.iter().map(|f| f.token_count()).collect();
    let layout = PromptLayout::new(prefix.len(), &frame_lens, suffix.len())?;
    let d = embed_table.cols();
    let mut seq = Mat::zeros(0, d);
    embed_ids(&prefix.ids, embed_table, &mut seq)?;
    for f in visual {
        let t = &f.tokens;
        for tok in core::iter::once(&t.cls).chain(&t.patches) {
            if tok.embedding.len() != d {
                return Err(Error::Dimension {
                    context: "visual token width",
                    expected: d,
                    actual: tok.embedding.len(),
                });
            }
            seq.push_row(&tok.embedding)?;
        }
    }
    embed_ids(&suffix.ids, embed_table, &mut seq)?;
    Ok((seq, layout))
}
