//! County adjacency, its multivariate expansion and the ICAR precision.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Read};

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Square sparse matrix stored as sorted `(column, value)` lists per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn from_rows(mut rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n = rows.len();
        for row in rows.iter_mut() {
            row.sort_by_key(|(j, _)| *j);
            if row.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::Domain("duplicate column in sparse row".into()));
            }
            if row.iter().any(|(j, _)| *j >= n) {
                return Err(Error::Shape("sparse column index out of range".into()));
            }
        }
        Ok(Self { rows })
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Shape("sparse matrices here are square".into()));
        }
        Self::from_rows(
            (0..m.nrows())
                .map(|i| (0..m.ncols()).filter(|&j| m[(i, j)] != 0.0).map(|j| (j, m[(i, j)])).collect())
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by_key(&j, |(c, _)| *c)
            .map(|k| self.rows[i][k].1)
            .unwrap_or(0.0)
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|(_, v)| v).sum()).collect()
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows
            .iter()
            .enumerate()
            .all(|(i, row)| row.iter().all(|&(j, v)| self.get(j, i) == v))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.rows.iter().map(|row| row.iter().map(|&(j, v)| v * x[j]).sum()),
        )
    }

    /// `self * b` for a dense `b`.
    pub fn mul_dense(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), b.ncols());
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                for c in 0..b.ncols() {
                    out[(i, c)] += v * b[(j, c)];
                }
            }
        }
        out
    }

    /// Connected components of the graph with an edge wherever an
    /// off-diagonal entry is nonzero.
    pub fn connected_components(&self) -> usize {
        let n = self.dim();
        let mut seen = vec![false; n];
        let mut components = 0;
        let mut stack = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                for &(j, v) in &self.rows[i] {
                    if v != 0.0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        components
    }
}

/// 0/1 adjacency between areas, indexed by the order of `areas`.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaAdjacency {
    pub areas: Vec<String>,
    pub w: SparseMatrix,
    /// Number of connected components; more than one means the graph is
    /// disconnected.
    pub components: usize,
}

impl AreaAdjacency {
    pub fn is_connected(&self) -> bool {
        self.components <= 1
    }

    pub fn warning(&self) -> Option<String> {
        (!self.is_connected()).then(|| {
            format!(
                "adjacency graph has {} connected components; the ICAR precision has a null space of the same dimension",
                self.components
            )
        })
    }
}

pub fn build_adjacency<S: AsRef<str>>(edges: &[(S, S)], areas: &[String]) -> Result<AreaAdjacency> {
    let position: HashMap<&str, usize> = areas.iter().enumerate().map(|(i, a)| (a.as_str(), i)).collect();
    if position.len() != areas.len() {
        return Err(Error::Domain("area list contains duplicates".into()));
    }
    let lookup = |id: &str| position.get(id).copied().ok_or_else(|| Error::UnknownArea(id.to_string()));
    let mut neighbours = vec![BTreeSet::new(); areas.len()];
    for (a, b) in edges {
        let (i, j) = (lookup(a.as_ref())?, lookup(b.as_ref())?);
        if i == j {
            return Err(Error::Domain(format!("self-loop on area {}", a.as_ref())));
        }
        neighbours[i].insert(j);
        neighbours[j].insert(i);
    }
    let w = SparseMatrix::from_rows(
        neighbours
            .into_iter()
            .map(|set| set.into_iter().map(|j| (j, 1.0)).collect())
            .collect(),
    )?;
    let components = w.connected_components();
    let adjacency = AreaAdjacency {
        areas: areas.to_vec(),
        w,
        components,
    };
    if let Some(msg) = adjacency.warning() {
        log::warn!("{msg}");
    }
    Ok(adjacency)
}

/// Reads `area_a,area_b` lines; `#` starts a comment, blank lines are skipped.
pub fn read_edge_list<R: Read>(reader: R) -> Result<Vec<(String, String)>> {
    let mut edges = Vec::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut parts = content.split(',').map(str::trim);
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                edges.push((a.to_string(), b.to_string()))
            }
            _ => {
                return Err(Error::Schema(format!(
                    "edge list line {}: expected `area_a,area_b`, got `{content}`",
                    lineno + 1
                )))
            }
        }
    }
    Ok(edges)
}

/// `W ⊗ 1_L 1_Lᵀ`: entry `(i·L + s, i'·L + t)` equals `W[i, i']`.
pub fn expand_multivariate(w: &SparseMatrix, cells: usize) -> SparseMatrix {
    let mut rows = Vec::with_capacity(w.dim() * cells);
    for i in 0..w.dim() {
        let block_row: Vec<(usize, f64)> = w
            .row(i)
            .iter()
            .flat_map(|&(j, v)| (0..cells).map(move |t| (j * cells + t, v)))
            .collect();
        for _ in 0..cells {
            rows.push(block_row.clone());
        }
    }
    SparseMatrix { rows }
}

/// `Q = D − A` with `D` the diagonal of row sums of `A`.
pub fn icar_precision(a: &SparseMatrix) -> Result<SparseMatrix> {
    if !a.is_symmetric() {
        return Err(Error::Domain("adjacency must be symmetric".into()));
    }
    let mut rows = Vec::with_capacity(a.dim());
    for i in 0..a.dim() {
        let mut degree = 0.0;
        let mut row = Vec::with_capacity(a.row(i).len() + 1);
        for &(j, v) in a.row(i) {
            if j == i && v != 0.0 {
                return Err(Error::Domain(format!("adjacency has a nonzero diagonal at {i}")));
            }
            if v < 0.0 {
                return Err(Error::Domain("adjacency entries must be nonnegative".into()));
            }
            degree += v;
            row.push((j, -v));
        }
        if degree != 0.0 {
            row.push((i, degree));
        }
        rows.push(row);
    }
    SparseMatrix::from_rows(rows)
}

/// Area adjacency, its multivariate expansion and the ICAR precision.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialStructure {
    pub adjacency: AreaAdjacency,
    pub a: SparseMatrix,
    pub q: SparseMatrix,
    pub cells: usize,
}

impl SpatialStructure {
    pub fn new(adjacency: AreaAdjacency, cells: usize) -> Result<Self> {
        if cells == 0 {
            return Err(Error::Domain("need at least one cell per area".into()));
        }
        let a = expand_multivariate(&adjacency.w, cells);
        let q = icar_precision(&a)?;
        Ok(Self { adjacency, a, q, cells })
    }

    pub fn areas(&self) -> usize {
        self.adjacency.areas.len()
    }

    pub fn n(&self) -> usize {
        self.areas() * self.cells
    }
}
