//! Moran's I eigenvector basis and the induced random-effect precision.
//!
//! The operator `G = P A P`, with `P = I − X(XᵀX)⁻¹Xᵀ`, is symmetric and its
//! eigenvectors with nonzero eigenvalue are orthogonal to the columns of `X`.
//! Keeping the leading positive ones gives a spatial basis `Ψ` that is not
//! confounded with the fixed effects. `K⁻¹ = ΨᵀQΨ` is then the closest
//! `r × r` precision to the ICAR precision `Q` in Frobenius norm.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use sha2::{Digest, Sha256};

use crate::graph::{SparseMatrix, SpatialStructure};
use crate::{Error, Result};

/// Eigenvalues at or below this fraction of the largest |eigenvalue| are
/// treated as zero.
pub const POSITIVE_TOLERANCE: f64 = 1e-10;

/// Default share of the positive-eigenvalue basis functions to keep.
pub const DEFAULT_FRACTION: f64 = 0.5;

/// How many basis functions to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BasisSize {
    /// `max(1, floor(fraction × positive count))`.
    Fraction(f64),
    /// At most this many (capped at the positive count).
    Count(usize),
}

impl Default for BasisSize {
    fn default() -> Self {
        BasisSize::Fraction(DEFAULT_FRACTION)
    }
}

/// Orthonormal basis from the column space of `X` via thin QR, failing if
/// `X` is rank deficient.
fn design_basis(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, p) = x.shape();
    if p == 0 {
        return Ok(DMatrix::zeros(n, 0));
    }
    if p > n {
        return Err(Error::RankDeficient(format!("{p} columns but only {n} rows")));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = x.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    for j in 0..p {
        if r[(j, j)].abs() <= 1e-10 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::RankDeficient(format!("column {j} is a combination of earlier columns")));
        }
    }
    Ok(qr.q())
}

/// `(I − H) A (I − H)` with `H` the orthogonal projection onto `col(X)`.
pub fn moran_operator(x: &DMatrix<f64>, a: &SparseMatrix) -> Result<DMatrix<f64>> {
    let n = a.dim();
    if x.nrows() != n {
        return Err(Error::Shape(format!("design has {} rows, adjacency is {n}x{n}", x.nrows())));
    }
    if !a.is_symmetric() {
        return Err(Error::Domain("adjacency must be symmetric".into()));
    }
    let q = design_basis(x)?;
    // expand (I − QQᵀ) A (I − QQᵀ) with only n × p dense products
    let aq = a.mul_dense(&q);
    let core = q.transpose() * &aq;
    let mut g = a.to_dense();
    g -= &q * aq.transpose();
    g -= &aq * q.transpose();
    g += &q * core * q.transpose();
    let g = (&g + g.transpose()) * 0.5;
    Ok(g)
}

/// Leading eigenvectors of the Moran operator.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigenbasis {
    pub psi: DMatrix<f64>,
    /// Kept eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Number of eigenvalues above the positivity tolerance.
    pub positive_count: usize,
    /// Full spectrum, descending.
    pub spectrum: Vec<f64>,
}

pub fn select_basis(g: &DMatrix<f64>, size: BasisSize) -> Result<Eigenbasis> {
    if g.nrows() != g.ncols() {
        return Err(Error::Shape("Moran operator must be square".into()));
    }
    let eig = SymmetricEigen::new(g.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let spectrum: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let largest = spectrum.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cutoff = POSITIVE_TOLERANCE * largest;
    let positive_count = spectrum.iter().take_while(|&&v| largest > 0.0 && v > cutoff).count();
    if positive_count == 0 {
        return Err(Error::EmptyBasis);
    }
    let r = match size {
        BasisSize::Fraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Domain(format!("basis fraction must lie in (0, 1], got {f}")));
            }
            ((f * positive_count as f64).floor() as usize).max(1)
        }
        BasisSize::Count(r) => r.min(positive_count),
    };
    let mut psi = DMatrix::zeros(g.nrows(), r);
    for (k, &idx) in order.iter().take(r).enumerate() {
        let mut col = eig.eigenvectors.column(idx).into_owned();
        // largest-magnitude entry positive, ties to the lowest index
        let mut pivot = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        psi.set_column(k, &col);
    }
    Ok(Eigenbasis {
        psi,
        eigenvalues: spectrum[..r].to_vec(),
        positive_count,
        spectrum,
    })
}

/// `K⁻¹ = ΨᵀQΨ`, checked positive definite, and its inverse `K`.
pub fn basis_precision(psi: &DMatrix<f64>, q: &SparseMatrix) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if psi.nrows() != q.dim() {
        return Err(Error::Shape(format!("basis has {} rows, Q is {}x{}", psi.nrows(), q.dim(), q.dim())));
    }
    let r = psi.ncols();
    if r == 0 {
        return Ok((DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)));
    }
    let k_inv = psi.transpose() * q.mul_dense(psi);
    let k_inv = (&k_inv + k_inv.transpose()) * 0.5;
    let eig = SymmetricEigen::new(k_inv.clone());
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if !(min > POSITIVE_TOLERANCE * max) {
        return Err(Error::NotPositiveDefinite(format!(
            "basis precision has eigenvalue {min:.3e} (largest {max:.3e}); \
             the span of the basis touches the null space of Q. \
             Include an intercept column in the design, and check the adjacency for isolated areas or components"
        )));
    }
    let k = k_inv
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Cholesky of the basis precision failed".into()))?
        .inverse();
    Ok((k_inv, k))
}

/// A spatial basis with its random-effect precision.
#[derive(Debug, Clone, PartialEq)]
pub struct MoranBasis {
    pub psi: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub positive_count: usize,
    pub k_inv: DMatrix<f64>,
    pub k: DMatrix<f64>,
}

impl MoranBasis {
    pub fn build(x: &DMatrix<f64>, spatial: &SpatialStructure, size: BasisSize) -> Result<Self> {
        let g = moran_operator(x, &spatial.a)?;
        let eb = select_basis(&g, size)?;
        Self::from_eigenbasis(eb, &spatial.q)
    }

    pub fn from_eigenbasis(eb: Eigenbasis, q: &SparseMatrix) -> Result<Self> {
        let (k_inv, k) = basis_precision(&eb.psi, q)?;
        Ok(Self {
            psi: eb.psi,
            eigenvalues: eb.eigenvalues,
            positive_count: eb.positive_count,
            k_inv,
            k,
        })
    }

    /// A basis with given `Ψ` and `K⁻¹` (no Moran construction).
    pub fn from_parts(psi: DMatrix<f64>, k_inv: DMatrix<f64>) -> Result<Self> {
        let r = psi.ncols();
        if k_inv.shape() != (r, r) {
            return Err(Error::Shape("K⁻¹ must be r x r".into()));
        }
        let k = if r == 0 {
            DMatrix::zeros(0, 0)
        } else {
            k_inv
                .clone()
                .cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite("K⁻¹".into()))?
                .inverse()
        };
        Ok(Self {
            psi,
            eigenvalues: Vec::new(),
            positive_count: r,
            k_inv,
            k,
        })
    }

    pub fn rank(&self) -> usize {
        self.psi.ncols()
    }

    /// `max |ΨᵀX|`, zero when the basis is orthogonal to the design.
    pub fn design_overlap(&self, x: &DMatrix<f64>) -> f64 {
        if self.rank() == 0 || x.ncols() == 0 {
            return 0.0;
        }
        (self.psi.transpose() * x).amax()
    }
}

/// SHA-256 over the shapes and bytes of `X` and `A`, used to key the cache.
pub fn content_key(x: &DMatrix<f64>, a: &SparseMatrix) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((x.nrows() as u64).to_le_bytes());
    h.update((x.ncols() as u64).to_le_bytes());
    for v in x.iter() {
        h.update(v.to_le_bytes());
    }
    h.update((a.dim() as u64).to_le_bytes());
    for i in 0..a.dim() {
        for &(j, v) in a.row(i) {
            h.update((i as u64).to_le_bytes());
            h.update((j as u64).to_le_bytes());
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

const CACHE_MAGIC: &[u8; 8] = b"MSMMBAS1";

/// Serializes `(key, Ψ, eigenvalues, positive count, K⁻¹)` as little-endian.
pub fn write_cache<W: Write>(mut w: W, key: &[u8; 32], basis: &MoranBasis) -> Result<()> {
    let (n, r) = basis.psi.shape();
    w.write_all(CACHE_MAGIC)?;
    w.write_all(key)?;
    for v in [n as u64, r as u64, basis.positive_count as u64, basis.eigenvalues.len() as u64] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in basis.psi.iter().chain(basis.eigenvalues.iter()).chain(basis.k_inv.iter()) {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a cache file; `Ok(None)` when the key does not match.
pub fn read_cache<R: Read>(mut rd: R, key: &[u8; 32]) -> Result<Option<MoranBasis>> {
    let mut magic = [0u8; 8];
    rd.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Schema("not a basis cache file".into()));
    }
    let mut stored = [0u8; 32];
    rd.read_exact(&mut stored)?;
    if &stored != key {
        return Ok(None);
    }
    let mut word = [0u8; 8];
    let mut next_u64 = |rd: &mut R| -> Result<u64> {
        rd.read_exact(&mut word)?;
        Ok(u64::from_le_bytes(word))
    };
    let n = next_u64(&mut rd)? as usize;
    let r = next_u64(&mut rd)? as usize;
    let positive_count = next_u64(&mut rd)? as usize;
    let n_eig = next_u64(&mut rd)? as usize;
    let mut floats = |count: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            rd.read_exact(&mut buf)?;
            out.push(f64::from_le_bytes(buf));
        }
        Ok(out)
    };
    let psi = DMatrix::from_vec(n, r, floats(n * r)?);
    let eigenvalues = floats(n_eig)?;
    let k_inv = DMatrix::from_vec(r, r, floats(r * r)?);
    let mut basis = MoranBasis::from_parts(psi, k_inv)?;
    basis.eigenvalues = eigenvalues;
    basis.positive_count = positive_count;
    Ok(Some(basis))
}

pub fn save_cache(path: impl AsRef<Path>, key: &[u8; 32], basis: &MoranBasis) -> Result<()> {
    let mut buf = Vec::new();
    write_cache(&mut buf, key, basis)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_cache(path: impl AsRef<Path>, key: &[u8; 32]) -> Result<Option<MoranBasis>> {
    let bytes = std::fs::read(path)?;
    read_cache(bytes.as_slice(), key)
}
