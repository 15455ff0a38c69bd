//! Flat containers for per-path, per-step vector and matrix samples.
//! Layout is path-major so per-path sweeps are contiguous.

use nalgebra::DMatrix;

/// Per-path, per-step d-vectors: `at(i, k)` is a slice of length `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct VecField {
    paths: usize,
    steps: usize,
    dim: usize,
    data: Vec<f64>,
}

impl VecField {
    pub fn zeros(paths: usize, steps: usize, dim: usize) -> Self {
        VecField {
            paths,
            steps,
            dim,
            data: vec![0.0; paths * steps * dim],
        }
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn offset(&self, i: usize, k: usize) -> usize {
        debug_assert!(i < self.paths && k < self.steps);
        (i * self.steps + k) * self.dim
    }

    #[inline]
    pub fn at(&self, i: usize, k: usize) -> &[f64] {
        let o = self.offset(i, k);
        &self.data[o..o + self.dim]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, k: usize) -> &mut [f64] {
        let o = self.offset(i, k);
        &mut self.data[o..o + self.dim]
    }

    /// Values of component `d` at step `k`, one per path.
    pub fn component_column(&self, k: usize, d: usize) -> Vec<f64> {
        (0..self.paths)
            .map(|i| self.data[self.offset(i, k) + d])
            .collect()
    }

    pub fn set_component_column(&mut self, k: usize, d: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.paths);
        for (i, &v) in values.iter().enumerate() {
            let o = self.offset(i, k) + d;
            self.data[o] = v;
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Mutable per-path chunks, each of length steps*dim (for parallel sweeps).
    pub fn par_paths_mut(&mut self) -> rayon::slice::ChunksMut<'_, f64> {
        use rayon::prelude::*;
        let chunk = self.steps * self.dim;
        self.data.par_chunks_mut(chunk)
    }

    /// In-place linear combination `self = a*self + b*other`.
    pub fn axpby(&mut self, a: f64, b: f64, other: &VecField) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (x, y) in self.data.iter_mut().zip(other.data.iter()) {
            *x = a * *x + b * *y;
        }
    }

    pub fn dot(&self, other: &VecField) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&mut self, a: f64) {
        for x in self.data.iter_mut() {
            *x *= a;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }
}

/// Per-path, per-step square matrices, row-major within each cell.
#[derive(Debug, Clone)]
pub struct MatField {
    paths: usize,
    steps: usize,
    dim: usize,
    data: Vec<f64>,
}

impl MatField {
    pub fn zeros(paths: usize, steps: usize, dim: usize) -> Self {
        MatField {
            paths,
            steps,
            dim,
            data: vec![0.0; paths * steps * dim * dim],
        }
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn offset(&self, i: usize, k: usize) -> usize {
        debug_assert!(i < self.paths && k < self.steps);
        (i * self.steps + k) * self.dim * self.dim
    }

    pub fn at(&self, i: usize, k: usize) -> &[f64] {
        let o = self.offset(i, k);
        &self.data[o..o + self.dim * self.dim]
    }

    pub fn get(&self, i: usize, k: usize) -> DMatrix<f64> {
        let o = self.offset(i, k);
        let d = self.dim;
        DMatrix::from_fn(d, d, |r, c| self.data[o + r * d + c])
    }

    pub fn set(&mut self, i: usize, k: usize, m: &DMatrix<f64>) {
        let o = self.offset(i, k);
        let d = self.dim;
        for r in 0..d {
            for c in 0..d {
                self.data[o + r * d + c] = m[(r, c)];
            }
        }
    }

    /// Entry (r, c) at step `k`, one value per path.
    pub fn entry_column(&self, k: usize, r: usize, c: usize) -> Vec<f64> {
        let d = self.dim;
        (0..self.paths)
            .map(|i| self.data[self.offset(i, k) + r * d + c])
            .collect()
    }

    pub fn set_entry_column(&mut self, k: usize, r: usize, c: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.paths);
        let d = self.dim;
        for (i, &v) in values.iter().enumerate() {
            let o = self.offset(i, k) + r * d + c;
            self.data[o] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vec_field_round_trip() {
        let mut f = VecField::zeros(3, 4, 2);
        f.at_mut(2, 3)[1] = 5.0;
        assert_eq!(f.at(2, 3), &[0.0, 5.0]);
        assert_eq!(f.component_column(3, 1), vec![0.0, 0.0, 5.0]);
    }

    #[test]
    fn mat_field_round_trip() {
        let mut f = MatField::zeros(2, 2, 2);
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        f.set(1, 0, &m);
        assert_eq!(f.get(1, 0), m);
        assert_eq!(f.entry_column(0, 0, 1), vec![0.0, 2.0]);
    }
}
