use serde::{Deserialize, Serialize};
use xil_core::data::Mask;

/// Run-length encoded binary mask over row-major pixel order. Runs alternate
/// between 0 and 1 starting with 0, so a mask whose first pixel is set
/// begins with a zero-length run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RleError {
    #[error("mask dimensions must be positive")]
    EmptyShape,
    #[error("runs cover {got} pixels, expected {want}")]
    Length { got: u64, want: u64 },
}

pub fn encode(mask: &Mask) -> RleMask {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &v in mask.data() {
        let v = v != 0;
        if v != current {
            counts.push(run);
            run = 0;
            current = v;
        }
        run += 1;
    }
    counts.push(run);
    RleMask { height: mask.height(), width: mask.width(), counts }
}

pub fn decode(rle: &RleMask) -> Result<Mask, RleError> {
    if rle.height == 0 || rle.width == 0 {
        return Err(RleError::EmptyShape);
    }
    let want = (rle.height * rle.width) as u64;
    let got: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    if got != want {
        return Err(RleError::Length { got, want });
    }
    let mut data = Vec::with_capacity(want as usize);
    for (i, &c) in rle.counts.iter().enumerate() {
        data.extend(std::iter::repeat((i % 2) as u8).take(c as usize));
    }
    Ok(Mask::new(rle.height, rle.width, data).expect("length checked above"))
}
