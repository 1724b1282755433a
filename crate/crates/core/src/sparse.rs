//! Sparse matrices: a compressed-row container for the graph operators and an
//! envelope (skyline) Cholesky factorization for the symmetric FEM systems.

use nalgebra::{DMatrix, RealField};

use crate::error::{Error, Result};

/// Compressed sparse row matrix with sorted column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr<T> {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: RealField + Copy> Csr<T> {
    /// Builds from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, T)]) -> Self {
        let mut sorted: Vec<(usize, usize, T)> = triplets.to_vec();
        sorted.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0; nrows + 1];
        let mut col_idx: Vec<usize> = Vec::with_capacity(sorted.len());
        let mut values: Vec<T> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Csr {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[range.clone()].binary_search(&c) {
            Ok(k) => self.values[range.start + k],
            Err(_) => T::zero(),
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.nrows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|r| {
                self.row(r)
                    .fold(T::zero(), |acc, (c, v)| acc + v * x[c])
            })
            .collect()
    }

    /// `self · dense`, column by column.
    pub fn mul_dense(&self, dense: &DMatrix<T>) -> DMatrix<T> {
        assert_eq!(dense.nrows(), self.ncols, "sparse-dense product shape");
        let mut out = DMatrix::zeros(self.nrows, dense.ncols());
        for j in 0..dense.ncols() {
            let x = dense.column(j);
            let x = x.as_slice();
            let mut y = out.column_mut(j);
            for r in 0..self.nrows {
                let mut acc = T::zero();
                for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                    acc += self.values[k] * x[self.col_idx[k]];
                }
                y[r] = acc;
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            d[(r, c)] += v;
        }
        d
    }

    pub fn transpose(&self) -> Csr<T> {
        let t: Vec<_> = self.triplets().map(|(r, c, v)| (c, r, v)).collect();
        Csr::from_triplets(self.ncols, self.nrows, &t)
    }

    /// Largest |A - Aᵀ| entry.
    pub fn asymmetry(&self) -> T {
        let mut worst = T::zero();
        for (r, c, v) in self.triplets() {
            let d = (v - self.get(c, r)).abs();
            if d > worst {
                worst = d;
            }
        }
        worst
    }
}

impl Csr<f64> {
    /// Converts the stored values to another scalar type.
    pub fn cast<U: RealField + Copy>(&self) -> Csr<U> {
        Csr {
            nrows: self.nrows,
            ncols: self.ncols,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values: self.values.iter().map(|&v| nalgebra::convert(v)).collect(),
        }
    }
}

/// Reverse Cuthill-McKee ordering of an undirected graph. Returns `order`
/// with `order[new] = old`; every connected component is handled.
pub fn reverse_cuthill_mckee(adjacency: &[Vec<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    let degree: Vec<usize> = adjacency.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&v| (degree[v], v));

    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        let start = pseudo_peripheral(adjacency, seed, &degree);
        visited[start] = true;
        let mut head = order.len();
        order.push(start);
        while head < order.len() {
            let v = order[head];
            head += 1;
            let mut next: Vec<usize> = adjacency[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| (degree[w], w));
            next.dedup();
            for w in next {
                if !visited[w] {
                    visited[w] = true;
                    order.push(w);
                }
            }
        }
    }
    order.reverse();
    order
}

fn pseudo_peripheral(adjacency: &[Vec<usize>], seed: usize, degree: &[usize]) -> usize {
    let mut start = seed;
    let mut eccentricity = 0;
    for _ in 0..8 {
        let levels = bfs_levels(adjacency, start);
        let depth = *levels.iter().filter_map(|l| *l).collect::<Vec<_>>().iter().max().unwrap_or(&0);
        if depth <= eccentricity && eccentricity > 0 {
            break;
        }
        eccentricity = depth;
        let candidate = (0..adjacency.len())
            .filter(|&v| levels[v] == Some(depth))
            .min_by_key(|&v| (degree[v], v))
            .unwrap();
        if candidate == start {
            break;
        }
        start = candidate;
    }
    start
}

fn bfs_levels(adjacency: &[Vec<usize>], start: usize) -> Vec<Option<usize>> {
    let mut levels = vec![None; adjacency.len()];
    levels[start] = Some(0);
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        let l = levels[v].unwrap();
        for &w in &adjacency[v] {
            if levels[w].is_none() {
                levels[w] = Some(l + 1);
                queue.push_back(w);
            }
        }
    }
    levels
}

/// Symmetric matrix stored by rows of its lower envelope under a fixed
/// symmetric permutation, ready for in-place Cholesky factorization.
#[derive(Debug, Clone)]
pub struct SkylineMatrix {
    n: usize,
    /// `order[new] = old`
    order: Vec<usize>,
    position: Vec<usize>,
    /// first stored column of each (permuted) row
    first: Vec<usize>,
    /// start of each row in `values`
    start: Vec<usize>,
    values: Vec<f64>,
}

impl SkylineMatrix {
    /// Allocates the envelope for the given sparsity pattern (only `(i, j)`
    /// pairs in original numbering; both triangles may be listed).
    pub fn with_pattern(order: Vec<usize>, pattern: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let n = order.len();
        let mut position = vec![0; n];
        for (new, &old) in order.iter().enumerate() {
            position[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for (i, j) in pattern {
            let (pi, pj) = (position[i], position[j]);
            let (r, c) = if pi >= pj { (pi, pj) } else { (pj, pi) };
            first[r] = first[r].min(c);
        }
        let mut start = Vec::with_capacity(n + 1);
        let mut total = 0;
        for r in 0..n {
            start.push(total);
            total += r - first[r] + 1;
        }
        start.push(total);
        SkylineMatrix {
            n,
            order,
            position,
            first,
            start,
            values: vec![0.0; total],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn stored_entries(&self) -> usize {
        self.values.len()
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Adds `v` to entry (i, j) and, implicitly, (j, i). Diagonal entries are
    /// added once.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (pi, pj) = (self.position[i], self.position[j]);
        let (r, c) = if pi >= pj { (pi, pj) } else { (pj, pi) };
        assert!(c >= self.first[r], "entry ({i}, {j}) outside the allocated envelope");
        self.values[self.start[r] + c - self.first[r]] += v;
    }

    /// In-place Cholesky factorization `A = L Lᵀ` restricted to the envelope.
    pub fn factor(mut self) -> Result<SkylineCholesky> {
        let scale = (0..self.n)
            .map(|r| self.values[self.start[r + 1] - 1].abs())
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        for r in 0..self.n {
            let fr = self.first[r];
            let row_start = self.start[r];
            for c in fr..r {
                let fc = self.first[c];
                let lo = fr.max(fc);
                let mut s = self.values[row_start + c - fr];
                let (a, b) = (row_start + lo - fr, self.start[c] + lo - fc);
                let len = c - lo;
                s -= dot(&self.values[a..a + len], &self.values[b..b + len]);
                let diag = self.values[self.start[c + 1] - 1];
                self.values[row_start + c - fr] = s / diag;
            }
            let len = r - fr;
            let row = &self.values[row_start..row_start + len];
            let d = self.values[row_start + len] - dot(row, row);
            if !(d > 1e-13 * scale) {
                return Err(Error::Numerical(format!(
                    "matrix is not positive definite (pivot {d:e} at row {r} of {})",
                    self.n
                )));
            }
            self.values[row_start + len] = d.sqrt();
        }
        Ok(SkylineCholesky { m: self })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[derive(Debug, Clone)]
pub struct SkylineCholesky {
    m: SkylineMatrix,
}

impl SkylineCholesky {
    pub fn dim(&self) -> usize {
        self.m.n
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let m = &self.m;
        assert_eq!(rhs.len(), m.n);
        let mut y: Vec<f64> = m.order.iter().map(|&old| rhs[old]).collect();
        // L y = b
        for r in 0..m.n {
            let fr = m.first[r];
            let row = &m.values[m.start[r]..m.start[r + 1]];
            let s = dot(&row[..r - fr], &y[fr..r]);
            y[r] = (y[r] - s) / row[r - fr];
        }
        // Lᵀ x = y
        for r in (0..m.n).rev() {
            let fr = m.first[r];
            let row = &m.values[m.start[r]..m.start[r + 1]];
            y[r] /= row[r - fr];
            let xr = y[r];
            for (k, c) in (fr..r).enumerate() {
                y[c] -= row[k] * xr;
            }
        }
        let mut out = vec![0.0; m.n];
        for (new, &old) in m.order.iter().enumerate() {
            out[old] = y[new];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn csr_sums_duplicates_and_multiplies() {
        let a = Csr::from_triplets(2, 3, &[(0, 1, 1.0), (0, 1, 2.0), (1, 2, -1.0), (1, 0, 4.0)]);
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.get(0, 1), 3.0);
        assert_eq!(a.mul_vec(&[1.0, 2.0, 3.0]), vec![6.0, 1.0]);
        let d = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 1.0, 3.0, -1.0]);
        assert_eq!(a.mul_dense(&d), a.to_dense() * d);
        assert_eq!(a.transpose().to_dense(), a.to_dense().transpose());
    }

    #[test]
    fn skyline_cholesky_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40;
        // random sparse SPD: graph Laplacian + identity, plus one dense trailing row
        let mut adjacency = vec![Vec::new(); n];
        let mut dense = DMatrix::<f64>::identity(n, n);
        for i in 0..n - 1 {
            for j in i + 1..n {
                if rng.random::<f64>() < 0.08 || j == i + 1 || i == 0 {
                    let w: f64 = rng.random_range(0.1..1.0);
                    dense[(i, j)] -= w;
                    dense[(j, i)] -= w;
                    dense[(i, i)] += w;
                    dense[(j, j)] += w;
                    adjacency[i].push(j);
                    adjacency[j].push(i);
                }
            }
        }
        let order = reverse_cuthill_mckee(&adjacency);
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());

        let pattern = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| dense[(i, j)] != 0.0);
        let mut sky = SkylineMatrix::with_pattern(order, pattern.collect::<Vec<_>>());
        for i in 0..n {
            for j in 0..=i {
                if dense[(i, j)] != 0.0 {
                    sky.add(i, j, dense[(i, j)]);
                }
            }
        }
        let chol = sky.factor().unwrap();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = chol.solve(&b);
        let reference = dense.clone().cholesky().unwrap().solve(&nalgebra::DVector::from_vec(b));
        for i in 0..n {
            assert!((x[i] - reference[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn skyline_rejects_indefinite() {
        let mut sky = SkylineMatrix::with_pattern(vec![0, 1], [(0, 1)]);
        sky.add(0, 0, 1.0);
        sky.add(1, 1, 1.0);
        sky.add(0, 1, 2.0);
        assert!(matches!(sky.factor(), Err(Error::Numerical(_))));
    }
}
