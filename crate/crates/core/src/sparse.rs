//! Symmetric sparse matrices in compressed-row form with sorted columns.

use std::fmt::Write as _;

/// Structurally symmetric N×N matrix storing both triangles (CSR, sorted columns).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSym {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl SparseSym {
    /// Zero-valued matrix on the pattern given by per-row column lists. The
    /// lists must describe a symmetric pattern; they are sorted and deduplicated.
    pub fn from_pattern(mut rows: Vec<Vec<usize>>) -> Self {
        let n = rows.len();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        indptr.push(0);
        for row in rows.iter_mut() {
            row.sort_unstable();
            row.dedup();
            indices.extend_from_slice(row);
            indptr.push(indices.len());
        }
        let data = vec![0.0; indices.len()];
        Self { n, indptr, indices, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::from_pattern((0..n).map(|i| vec![i]).collect());
        m.data.iter_mut().for_each(|v| *v = 1.0);
        m
    }

    /// Same pattern, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.data.len());
        Self { n: self.n, indptr: self.indptr.clone(), indices: self.indices.clone(), data }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn same_pattern(&self, other: &Self) -> bool {
        self.n == other.n && self.indptr == other.indptr && self.indices == other.indices
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.indptr[i]..self.indptr[i + 1];
        self.indices[r.clone()].iter().copied().zip(self.data[r].iter().copied())
    }

    fn position(&self, i: usize, j: usize) -> Option<usize> {
        let lo = self.indptr[i];
        self.indices[lo..self.indptr[i + 1]].binary_search(&j).ok().map(|p| lo + p)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |p| self.data[p])
    }

    /// Adds `v` at (i, j). Panics if (i, j) is outside the pattern.
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        let p = self.position(i, j).unwrap_or_else(|| panic!("entry ({i}, {j}) outside sparsity pattern"));
        self.data[p] += v;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    /// xᵀ A y
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        (0..self.n).map(|i| x[i] * self.row(i).map(|(j, v)| v * y[j]).sum::<f64>()).sum()
    }

    /// Σ wₖ Aₖ over matrices sharing one pattern.
    pub fn linear_combination(terms: &[(f64, &SparseSym)]) -> Self {
        let first = terms[0].1;
        let mut data = vec![0.0; first.nnz()];
        for &(w, m) in terms {
            assert!(m.same_pattern(first), "linear combination over different patterns");
            for (d, &v) in data.iter_mut().zip(&m.data) {
                *d += w * v;
            }
        }
        first.with_data(data)
    }

    pub fn scaled(&self, w: f64) -> Self {
        self.with_data(self.data.iter().map(|v| w * v).collect())
    }

    /// Exact structural and numerical symmetry.
    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| self.position(j, i).is_some_and(|p| self.data[p] == v)))
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        d
    }

    /// CSC view for sprs; identical arrays since the matrix is symmetric.
    pub(crate) fn to_sprs(&self) -> sprs::CsMat<f64> {
        sprs::CsMat::new_csc((self.n, self.n), self.indptr.clone(), self.indices.clone(), self.data.clone())
    }

    /// Matrix Market `coordinate real symmetric` dump (lower triangle, 1-based).
    pub fn to_matrix_market(&self) -> String {
        let lower: Vec<(usize, usize, f64)> = (0..self.n)
            .flat_map(|i| self.row(i).filter(move |&(j, _)| j <= i).map(move |(j, v)| (i, j, v)))
            .collect();
        let mut s = String::from("%%MatrixMarket matrix coordinate real symmetric\n");
        let _ = writeln!(s, "{} {} {}", self.n, self.n, lower.len());
        for (i, j, v) in lower {
            let _ = writeln!(s, "{} {} {:.17e}", i + 1, j + 1, v);
        }
        s
    }
}
