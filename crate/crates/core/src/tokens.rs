use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{invalid, shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Audio,
    Video,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Audio, Modality::Video];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Audio => Modality::Video,
            Modality::Video => Modality::Audio,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Modality::Audio),
            "video" => Ok(Modality::Video),
            other => Err(invalid!("unknown modality {other:?}")),
        }
    }
}

/// Token coordinates on the patch grid. Audio uses `(time, freq, 0)`;
/// video uses `(time, row, col)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridPos {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl GridPos {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }
}

/// Extent of the patch grid along each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl GridShape {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn len(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major index: time-major, then `h`, then `w`.
    pub fn index(&self, p: GridPos) -> usize {
        (p.t * self.h + p.h) * self.w + p.w
    }

    pub fn position(&self, index: usize) -> GridPos {
        let w = index % self.w;
        let h = (index / self.w) % self.h;
        let t = index / (self.w * self.h);
        GridPos { t, h, w }
    }

    pub fn positions(&self) -> Vec<GridPos> {
        (0..self.len()).map(|i| self.position(i)).collect()
    }
}

/// `n` rows of width `d` (flattened patches before projection, embeddings
/// after), each with its grid position.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub values: Array2<f32>,
    pub positions: Vec<GridPos>,
    pub modality: Modality,
}

impl TokenSequence {
    pub fn new(values: Array2<f32>, positions: Vec<GridPos>, modality: Modality) -> Result<Self> {
        if values.nrows() != positions.len() {
            return Err(shape_err!("{} rows but {} positions", values.nrows(), positions.len()));
        }
        Ok(Self {
            values,
            positions,
            modality,
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }
}
