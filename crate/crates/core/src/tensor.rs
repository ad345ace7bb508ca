use crate::{Block, Error, Result, BLOCK_SIZE};

/// Dense row-major matrix of `f32`.
///
/// Quantization blocks always run along a row, so a weight matrix is stored
/// as `out_features x in_features` and an activation matrix as
/// `tokens x in_features`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::Shape(format!(
                "{rows}x{cols} tensor needs {} values, got {}",
                rows.saturating_mul(cols),
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Number of blocks per row. Fails unless `cols` is a multiple of 16.
    pub fn blocks_per_row(&self) -> Result<usize> {
        if !self.cols.is_multiple_of(BLOCK_SIZE) {
            return Err(Error::Misaligned(self.cols));
        }
        Ok(self.cols / BLOCK_SIZE)
    }

    pub fn block_count(&self) -> Result<usize> {
        Ok(self.rows * self.blocks_per_row()?)
    }

    /// Block `index` in row-major block order. Assumes `cols % 16 == 0`.
    pub fn block(&self, index: usize) -> &Block {
        let start = index * BLOCK_SIZE;
        self.data[start..start + BLOCK_SIZE]
            .try_into()
            .expect("block slice has length 16")
    }

    /// Largest absolute value; zero for an empty tensor.
    pub fn amax(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().find(|v| !v.is_finite()) {
            Some(v) => Err(Error::NonFinite(*v as f64)),
            None => Ok(()),
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }
}
