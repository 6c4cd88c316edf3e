//! Random token masking and the inverse "unshuffle" that reinserts mask
//! tokens at the dropped positions.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;

use crate::backbone::PositionalTable;
use crate::error::{invalid, shape_err, Result};
use crate::tokens::TokenSequence;

/// Number of tokens kept at masking ratio `alpha`: `floor((1 - alpha) * n)`,
/// but never fewer than one.
pub fn keep_count(n: usize, alpha: f64) -> usize {
    let u = ((1.0 - alpha) * n as f64 + 1e-9).floor() as usize;
    u.clamp(1, n.max(1))
}

/// Kept/masked partition of `n` token indices.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskingPlan {
    n: usize,
    alpha: f64,
    kept: Vec<usize>,
    masked: Vec<usize>,
}

impl MaskingPlan {
    /// Plan with an explicit kept set, given in any order. Duplicate or
    /// out-of-range indices are rejected.
    pub fn from_kept(n: usize, mut kept: Vec<usize>) -> Result<Self> {
        kept.sort_unstable();
        if kept.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid!("duplicate kept index"));
        }
        if kept.last().is_some_and(|&k| k >= n) {
            return Err(invalid!("kept index out of range for n = {n}"));
        }
        let mut is_kept = vec![false; n];
        for &k in &kept {
            is_kept[k] = true;
        }
        let masked = (0..n).filter(|&i| !is_kept[i]).collect();
        let alpha = if n == 0 {
            0.0
        } else {
            1.0 - kept.len() as f64 / n as f64
        };
        Ok(Self { n, alpha, kept, masked })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Strictly increasing kept indices.
    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    /// Strictly increasing masked indices.
    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn keep_count(&self) -> usize {
        self.kept.len()
    }

    /// For each of the `n` output slots, the row of `[encoded ; mask]` that
    /// fills it: kept slot `kept[j]` takes row `j`, masked slots take row `u`.
    pub fn unshuffle_sources(&self) -> Vec<usize> {
        let u = self.kept.len();
        let mut src = vec![u; self.n];
        for (j, &k) in self.kept.iter().enumerate() {
            src[k] = j;
        }
        src
    }
}

pub fn make_masking_plan(n: usize, alpha: f64, rng: &mut impl Rng) -> Result<MaskingPlan> {
    if n == 0 {
        return Err(invalid!("cannot mask an empty sequence"));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(invalid!("masking ratio {alpha} outside [0, 1)"));
    }
    let u = keep_count(n, alpha);
    let mut kept = sample(rng, n, u).into_vec();
    kept.sort_unstable();
    let mut plan = MaskingPlan::from_kept(n, kept)?;
    plan.alpha = alpha;
    Ok(plan)
}

/// Keeps the rows listed in the plan, in index order.
pub fn apply_mask(tokens: &TokenSequence, plan: &MaskingPlan) -> Result<TokenSequence> {
    if tokens.len() != plan.n {
        return Err(shape_err!(
            "plan covers {} tokens, sequence has {}",
            plan.n,
            tokens.len()
        ));
    }
    let values = tokens.values.select(ndarray::Axis(0), &plan.kept);
    let positions = plan.kept.iter().map(|&k| tokens.positions[k]).collect();
    TokenSequence::new(values, positions, tokens.modality)
}

/// Places encoded token `i` at slot `kept[i]`, fills masked slots with
/// `mask_token`, and adds the decoder positional embedding to every slot.
pub fn unshuffle(
    encoded: &TokenSequence,
    plan: &MaskingPlan,
    mask_token: &[f32],
    decoder_positions: &PositionalTable,
) -> Result<TokenSequence> {
    if encoded.len() != plan.keep_count() {
        return Err(shape_err!(
            "{} encoded tokens for a plan keeping {}",
            encoded.len(),
            plan.keep_count()
        ));
    }
    let d = encoded.width();
    if mask_token.len() != d {
        return Err(shape_err!("mask token width {} != {d}", mask_token.len()));
    }
    if decoder_positions.len() != plan.n || decoder_positions.dim() != d {
        return Err(shape_err!(
            "decoder positions {}x{} for {} slots of width {d}",
            decoder_positions.len(),
            decoder_positions.dim(),
            plan.n
        ));
    }
    let mut values = Array2::<f32>::zeros((plan.n, d));
    for (slot, src) in plan.unshuffle_sources().into_iter().enumerate() {
        let pos = decoder_positions.row(slot);
        let mut row = values.row_mut(slot);
        for k in 0..d {
            let base = if src < encoded.len() {
                encoded.values[[src, k]]
            } else {
                mask_token[k]
            };
            row[k] = base + pos[k] as f32;
        }
    }
    let positions = decoder_positions.grid().positions();
    TokenSequence::new(values, positions, encoded.modality)
}
