//! Dense row-major `f64` arrays.

use std::ops::Range;

use crate::error::{Error, Result};

/// A dense, row-major multi-dimensional array of `f64`.
///
/// A shape of `[]` denotes a scalar holding exactly one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in shape {shape:?}");
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("non-empty vector")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// In-place `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Array) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn max_abs_diff(&self, other: &Array) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Copies out the sub-block selected by one half-open range per axis.
    pub fn slice(&self, ranges: &[Range<usize>]) -> Result<Array> {
        self.check_ranges(ranges)?;
        let out_shape: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for_each_run(&self.shape, ranges, |src, len| {
            out.extend_from_slice(&self.data[src..src + len]);
        });
        Array::new(out_shape, out)
    }

    /// Adds `src` into the sub-block selected by `ranges`.
    pub fn scatter_add(&mut self, ranges: &[Range<usize>], src: &Array) -> Result<()> {
        self.check_ranges(ranges)?;
        let region: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
        if region != src.shape {
            return Err(Error::Shape(format!(
                "scatter source {:?} does not fit region {region:?}",
                src.shape
            )));
        }
        let mut cursor = 0;
        let data = &mut self.data;
        for_each_run(&self.shape, ranges, |dst, len| {
            for (d, s) in data[dst..dst + len].iter_mut().zip(&src.data[cursor..cursor + len]) {
                *d += s;
            }
            cursor += len;
        });
        Ok(())
    }

    /// Marks the sub-block selected by `ranges` in a flat mask of this array's size.
    pub fn mark_region(shape: &[usize], ranges: &[Range<usize>], mask: &mut [bool]) {
        for_each_run(shape, ranges, |start, len| {
            mask[start..start + len].iter_mut().for_each(|m| *m = true);
        });
    }

    /// Gathers rows (indices along axis 0).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Array> {
        if self.shape.is_empty() || rows.is_empty() {
            return Err(Error::Shape("select_rows needs a non-scalar array and rows".into()));
        }
        let row_len: usize = self.shape[1..].iter().product();
        let mut out = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(Error::Shape(format!("row {r} out of {}", self.shape[0])));
            }
            out.extend_from_slice(&self.data[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Array::new(shape, out)
    }

    fn check_ranges(&self, ranges: &[Range<usize>]) -> Result<()> {
        if ranges.len() != self.shape.len() {
            return Err(Error::Shape(format!(
                "{} ranges for a {}-d array",
                ranges.len(),
                self.shape.len()
            )));
        }
        for (r, &d) in ranges.iter().zip(&self.shape) {
            if r.start >= r.end || r.end > d {
                return Err(Error::Shape(format!("range {r:?} outside extent {d}")));
            }
        }
        Ok(())
    }
}

/// Visits the selected region as contiguous runs along the last axis,
/// calling `f(flat_offset, run_length)` in row-major order.
fn for_each_run(shape: &[usize], ranges: &[Range<usize>], mut f: impl FnMut(usize, usize)) {
    if shape.is_empty() {
        f(0, 1);
        return;
    }
    let nd = shape.len();
    let mut strides = vec![1usize; nd];
    for i in (0..nd - 1).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let run = ranges[nd - 1].len();
    let mut idx: Vec<usize> = ranges[..nd - 1].iter().map(|r| r.start).collect();
    loop {
        let mut off = ranges[nd - 1].start;
        for (i, &v) in idx.iter().enumerate() {
            off += v * strides[i];
        }
        f(off, run);
        // odometer increment over the leading axes
        let mut axis = nd - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < ranges[axis].end {
                break;
            }
            idx[axis] = ranges[axis].start;
        }
    }
}
