//! Layout of a multimodal input: image rows first, then text turns.

use serde::{Deserialize, Serialize};

use super::VlmError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpanKind {
    Image,
    Instruction,
    Response,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub kind: SpanKind,
    pub start: usize,
    pub len: usize,
}

/// Spans partition `0..len()`. Only response positions carry loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSequence {
    pub spans: Vec<Span>,
    /// Text tokens in order (instructions and responses), without image rows.
    pub text: Vec<usize>,
    pub image_rows: usize,
    /// Per position: is this a response token.
    pub loss_mask: Vec<bool>,
}

impl MultimodalSequence {
    pub fn len(&self) -> usize {
        self.image_rows + self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Next-token targets per row: row `i` predicts position `i + 1` and
    /// counts only when that position is a response token.
    pub fn targets(&self) -> (Vec<usize>, Vec<bool>) {
        let n = self.len();
        let mut targets = vec![0; n];
        let mut mask = vec![false; n];
        for i in 0..n.saturating_sub(1) {
            let j = i + 1;
            if self.loss_mask[j] {
                targets[i] = self.text[j - self.image_rows];
                mask[i] = true;
            }
        }
        (targets, mask)
    }
}

/// `[image spans; (instruction, response) turns]`. `image_rows[k]` is the
/// number of patch rows of image `k` (all of its views together).
pub fn build_multimodal_input(
    image_rows: &[usize],
    turns: &[(Vec<usize>, Vec<usize>)],
    context_len: usize,
) -> Result<MultimodalSequence, VlmError> {
    let mut spans = Vec::new();
    let mut pos = 0;
    for &rows in image_rows {
        if rows > 0 {
            spans.push(Span {
                kind: SpanKind::Image,
                start: pos,
                len: rows,
            });
            pos += rows;
        }
    }
    let image_total = pos;
    let mut text = Vec::new();
    let mut loss_mask = vec![false; image_total];
    for (instruction, response) in turns {
        for (kind, toks) in [(SpanKind::Instruction, instruction), (SpanKind::Response, response)] {
            if toks.is_empty() {
                continue;
            }
            spans.push(Span {
                kind,
                start: pos,
                len: toks.len(),
            });
            pos += toks.len();
            text.extend_from_slice(toks);
            loss_mask.extend(std::iter::repeat_n(kind == SpanKind::Response, toks.len()));
        }
    }
    if pos == 0 {
        return Err(VlmError::Config("empty multimodal input".into()));
    }
    if pos > context_len {
        return Err(VlmError::Config(format!("multimodal input of {pos} rows exceeds context {context_len}")));
    }
    Ok(MultimodalSequence {
        spans,
        text,
        image_rows: image_total,
        loss_mask,
    })
}
