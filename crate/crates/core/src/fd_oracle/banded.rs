//! Banded matrices and LU factorisation without pivoting.
//!
//! The discretised HJB and KF operators are diagonally dominant M-matrices
//! (by rows and by columns respectively), for which elimination without
//! pivoting is stable.

#[derive(Clone, Debug)]
pub struct Banded {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl Banded {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Banded { n, bw, data: vec![0.0; n * (2 * bw + 1)] }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    fn idx(&self, row: usize, col: usize) -> usize {
        debug_assert!(col + self.bw >= row && col <= row + self.bw, "({row}, {col}) outside the band");
        row * (2 * self.bw + 1) + col + self.bw - row
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        if col + self.bw < row || col > row + self.bw {
            0.0
        } else {
            self.data[self.idx(row, col)]
        }
    }

    pub fn add(&mut self, row: usize, col: usize, x: f64) {
        let k = self.idx(row, col);
        self.data[k] += x;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let lo = i.saturating_sub(self.bw);
                let hi = (i + self.bw + 1).min(self.n);
                (lo..hi).map(|j| self.data[self.idx(i, j)] * x[j]).sum()
            })
            .collect()
    }

    /// Solves `A x = rhs` in place, consuming the matrix. Returns the row of
    /// the first zero or non-finite pivot on failure.
    pub fn solve(mut self, rhs: &mut [f64]) -> Result<(), usize> {
        let (n, bw) = (self.n, self.bw);
        assert_eq!(rhs.len(), n);
        for k in 0..n {
            let pivot = self.data[self.idx(k, k)];
            if pivot == 0.0 || !pivot.is_finite() {
                return Err(k);
            }
            let hi = (k + bw + 1).min(n);
            for i in k + 1..hi {
                let l = self.data[self.idx(i, k)] / pivot;
                if l == 0.0 {
                    continue;
                }
                for j in k + 1..hi {
                    let kj = self.data[self.idx(k, j)];
                    let ij = self.idx(i, j);
                    self.data[ij] -= l * kj;
                }
                rhs[i] -= l * rhs[k];
            }
        }
        for k in (0..n).rev() {
            let hi = (k + bw + 1).min(n);
            let mut s = rhs[k];
            for j in k + 1..hi {
                s -= self.data[self.idx(k, j)] * rhs[j];
            }
            rhs[k] = s / self.data[self.idx(k, k)];
            if !rhs[k].is_finite() {
                return Err(k);
            }
        }
        Ok(())
    }
}
