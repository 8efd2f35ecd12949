//! 2-d selective scan: flatten a feature map along four traversal orders,
//! run a selective state-space recurrence over each, and fold the results back
//! into the grid.
//!
//! The plain-array functions here ([`scan_expand`], [`s6_apply`],
//! [`scan_merge`], [`local_ss2d`], [`h_ss2d`]) operate on `H x W x C` maps. The
//! network uses the taped equivalents on `(N, C, H, W)` tensors.

mod high_order;
mod local;
mod s6;
mod ss2d;

use std::io::{Read, Write};

use ndarray::{Array2, Array3, ArrayView3};

use crate::error::{Error, Result};

pub use high_order::{h_ss2d, h_ss2d_with_hooks, GateLevel, HSs2d, HSs2dConfig, MergeRule};
pub use local::{local_ss2d, local_ss2d_with_hooks, LocalSs2d};
pub use s6::{s6_apply, S6Grads, S6Params, S6Trace};
pub use ss2d::Ss2d;

pub const MAX_ORDER: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScanDirection {
    RowMajor,
    ColMajor,
    RowMajorReversed,
    ColMajorReversed,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::RowMajor,
        ScanDirection::ColMajor,
        ScanDirection::RowMajorReversed,
        ScanDirection::ColMajorReversed,
    ];

    pub fn index(self) -> usize {
        match self {
            ScanDirection::RowMajor => 0,
            ScanDirection::ColMajor => 1,
            ScanDirection::RowMajorReversed => 2,
            ScanDirection::ColMajorReversed => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScanDirection::RowMajor => "row_major",
            ScanDirection::ColMajor => "col_major",
            ScanDirection::RowMajorReversed => "row_major_reversed",
            ScanDirection::ColMajorReversed => "col_major_reversed",
        }
    }
}

/// Flat pixel index (`row * width + col`) visited at each sequence position.
pub fn scan_order(direction: ScanDirection, height: usize, width: usize) -> Vec<usize> {
    let row_major = (0..height * width).collect::<Vec<_>>();
    let col_major = (0..width)
        .flat_map(|c| (0..height).map(move |r| r * width + c))
        .collect::<Vec<_>>();
    match direction {
        ScanDirection::RowMajor => row_major,
        ScanDirection::ColMajor => col_major,
        ScanDirection::RowMajorReversed => row_major.into_iter().rev().collect(),
        ScanDirection::ColMajorReversed => col_major.into_iter().rev().collect(),
    }
}

/// One traversal of an `H x W x C` map.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionalSequence {
    /// `(H * W, C)`; row `t` is the pixel visited at step `t`.
    pub values: Array2<f64>,
    pub direction: ScanDirection,
    pub origin_shape: (usize, usize),
}

impl DirectionalSequence {
    pub fn new(
        values: Array2<f64>,
        direction: ScanDirection,
        origin_shape: (usize, usize),
    ) -> Result<Self> {
        let (h, w) = origin_shape;
        if values.nrows() != h * w {
            return Err(Error::shape(format!(
                "sequence of length {} for a {h}x{w} grid",
                values.nrows()
            )));
        }
        Ok(Self {
            values,
            direction,
            origin_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    /// Re-lays the sequence onto its `H x W x C` grid.
    pub fn to_map(&self) -> Array3<f64> {
        let (h, w) = self.origin_shape;
        let c = self.channels();
        let mut map = Array3::zeros((h, w, c));
        for (t, &p) in scan_order(self.direction, h, w).iter().enumerate() {
            map.slice_mut(ndarray::s![p / w, p % w, ..])
                .assign(&self.values.row(t));
        }
        map
    }
}

/// Flattens an `H x W x C` map along the four scan directions, in
/// [`ScanDirection::ALL`] order.
pub fn scan_expand(map: ArrayView3<'_, f64>) -> Result<Vec<DirectionalSequence>> {
    let (h, w, c) = map.dim();
    if h == 0 || w == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(ScanDirection::ALL
        .iter()
        .map(|&direction| {
            let order = scan_order(direction, h, w);
            let mut values = Array2::zeros((h * w, c));
            for (t, &p) in order.iter().enumerate() {
                values
                    .row_mut(t)
                    .assign(&map.slice(ndarray::s![p / w, p % w, ..]));
            }
            DirectionalSequence {
                values,
                direction,
                origin_shape: (h, w),
            }
        })
        .collect())
}

/// Inverse-permutes each sequence and averages the four grids.
pub fn scan_merge(seqs: &[DirectionalSequence]) -> Result<Array3<f64>> {
    if seqs.len() != 4 {
        return Err(Error::DirectionSetInvalid(format!(
            "expected 4 sequences, got {}",
            seqs.len()
        )));
    }
    let mut by_dir: [Option<&DirectionalSequence>; 4] = [None; 4];
    for s in seqs {
        let slot = &mut by_dir[s.direction.index()];
        if slot.is_some() {
            return Err(Error::DirectionSetInvalid(format!(
                "duplicate direction {}",
                s.direction.name()
            )));
        }
        *slot = Some(s);
    }
    let maps: Vec<Array3<f64>> = by_dir
        .iter()
        .map(|s| s.expect("four distinct directions fill every slot"))
        .map(|s| {
            if s.origin_shape != seqs[0].origin_shape || s.channels() != seqs[0].channels() {
                return Err(Error::shape("sequences disagree on grid or channels"));
            }
            Ok(s.to_map())
        })
        .collect::<Result<_>>()?;
    // Pairwise sum then an exact power-of-two scale keeps identical inputs
    // bit-identical.
    Ok(((&maps[0] + &maps[1]) + (&maps[2] + &maps[3])) * 0.25)
}

/// Writes the debug dump: `H, W, C` as little-endian `u32`, then the four
/// sequences in [`ScanDirection::ALL`] order as little-endian `f64`,
/// position-major.
pub fn write_scan_dump<W: Write>(seqs: &[DirectionalSequence], mut out: W) -> Result<()> {
    let first = seqs.first().ok_or(Error::EmptyInput)?;
    let (h, w) = first.origin_shape;
    let c = first.channels();
    for v in [h, w, c] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    for dir in ScanDirection::ALL {
        let s = seqs
            .iter()
            .find(|s| s.direction == dir)
            .ok_or_else(|| Error::DirectionSetInvalid(format!("missing {}", dir.name())))?;
        if s.origin_shape != (h, w) || s.channels() != c {
            return Err(Error::shape("sequences disagree on grid or channels"));
        }
        for v in s.values.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_scan_dump<R: Read>(mut input: R) -> Result<Vec<DirectionalSequence>> {
    let mut word = [0u8; 4];
    let mut dims = [0usize; 3];
    for d in &mut dims {
        input.read_exact(&mut word)?;
        *d = u32::from_le_bytes(word) as usize;
    }
    let [h, w, c] = dims;
    let mut buf = [0u8; 8];
    ScanDirection::ALL
        .iter()
        .map(|&direction| {
            let mut data = Vec::with_capacity(h * w * c);
            for _ in 0..h * w * c {
                input.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            let values = Array2::from_shape_vec((h * w, c), data)
                .map_err(|e| Error::shape(e.to_string()))?;
            DirectionalSequence::new(values, direction, (h, w))
        })
        .collect()
}
