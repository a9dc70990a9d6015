//! Mask reweighting: a small convolutional network over each active track's
//! mask, its box and its embedding, producing one logit per grid cell.

use rand::Rng;

use crate::assocgraph::argmax_first;
use crate::error::Result;
use crate::geometry::{BBox, Mask};
use crate::numcore::{Linear, ParamStore, Tape, Tensor, Var};

/// Channels of the projected embedding.
pub const EMBED_CHANNELS: usize = 16;
/// Input channels of the first convolution: embedding, mask, box.
pub const INPUT_CHANNELS: usize = EMBED_CHANNELS + 2;
pub const HIDDEN_CHANNELS: usize = 16;

/// 3×3 convolutions are stored as linear maps over im2col patches laid out
/// offset-major (row offset, then column offset, each −1..=1) with channels
/// innermost.
#[derive(Clone, Copy, Debug)]
pub struct MaskHead {
    pub proj: Linear,
    pub conv1: Linear,
    pub conv2: Linear,
}

/// One track's contribution to the frame's mask reweighting.
#[derive(Clone, Copy, Debug)]
pub struct MaskInput<'a> {
    pub embedding: Var,
    pub mask: &'a Mask,
    pub bbox: &'a BBox,
}

fn im2col_index(k: usize, grid: usize) -> Vec<Option<usize>> {
    let cells = grid * grid;
    let mut idx = Vec::with_capacity(9 * cells * k);
    for off in 0..9 {
        let (dr, dc) = (off as isize / 3 - 1, off as isize % 3 - 1);
        for t in 0..k {
            for r in 0..grid as isize {
                for c in 0..grid as isize {
                    let (rr, cc) = (r + dr, c + dc);
                    let inside = rr >= 0 && cc >= 0 && rr < grid as isize && cc < grid as isize;
                    idx.push(inside.then(|| t * cells + rr as usize * grid + cc as usize));
                }
            }
        }
    }
    idx
}

/// `[k·G², ch] → [k·G², 9·ch]` with zero padding at the grid border.
fn im2col(tape: &mut Tape, x: Var, k: usize, grid: usize) -> Result<Var> {
    let n = k * grid * grid;
    let all = tape.gather_rows(x, im2col_index(k, grid))?;
    let mut parts = Vec::with_capacity(9);
    for off in 0..9 {
        parts.push(tape.slice_rows(all, off * n, n)?);
    }
    tape.concat_cols(&parts)
}

impl MaskHead {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, &format!("{name}.proj"), d, EMBED_CHANNELS, rng)?,
            conv1: Linear::new(store, &format!("{name}.conv1"), 9 * INPUT_CHANNELS, HIDDEN_CHANNELS, rng)?,
            conv2: Linear::new(store, &format!("{name}.conv2"), 9 * HIDDEN_CHANNELS, 1, rng)?,
        })
    }

    /// Per-cell logits `[G², k]`, one column per input track.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, inputs: &[MaskInput<'_>], grid: usize) -> Result<Var> {
        let cells = grid * grid;
        let k = inputs.len();
        let mut maps = Vec::with_capacity(k);
        for inp in inputs {
            let p = self.proj.forward(tape, store, inp.embedding)?;
            let p = tape.relu(p);
            let p = tape.gather_rows(p, vec![Some(0); cells])?;
            let rect = Mask::rectangle(inp.bbox, grid);
            let mut chan = Vec::with_capacity(2 * cells);
            for i in 0..cells {
                chan.push(f64::from(inp.mask.cells()[i]));
                chan.push(f64::from(rect.cells()[i]));
            }
            let chan = tape.constant(Tensor::matrix(cells, 2, chan));
            maps.push(tape.concat_cols(&[p, chan])?);
        }
        let x = tape.concat_rows(&maps)?;
        let x = im2col(tape, x, k, grid)?;
        let h = self.conv1.forward(tape, store, x)?;
        let h = tape.relu(h);
        let h = im2col(tape, h, k, grid)?;
        let logits = self.conv2.forward(tape, store, h)?;
        // [k·G², 1] stacked by track → [G², k]
        let cols: Vec<Var> = (0..k)
            .map(|t| tape.slice_rows(logits, t * cells, cells))
            .collect::<Result<_>>()?;
        tape.concat_cols(&cols)
    }
}

/// Per-cell owner given track logits `[G², k]` and a fixed background logit
/// of 0. Ties go to background, then to the earlier track.
pub fn resolve_pixels(logits: &Tensor) -> Vec<Option<usize>> {
    let k = logits.cols();
    let mut row = vec![0.0; k + 1];
    (0..logits.rows())
        .map(|r| {
            row[1..].copy_from_slice(logits.row(r));
            match argmax_first(&row) {
                Some(0) | None => None,
                Some(j) => Some(j - 1),
            }
        })
        .collect()
}
