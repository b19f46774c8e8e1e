//! Principal directions of a vocabulary embedding by Householder QR.
//!
//! The factorization is taken on `Dᵀ` (`M×|A|`), so the selected columns of
//! the orthogonal factor are `M`-dimensional feature-space directions. They
//! are returned transposed, one direction per row of `D̂` (`d×M`).

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DataError, TensorError};
use crate::tensor::Tensor;

/// `|A|×M` vocabulary embedding dictionary.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabEmbedding(pub Tensor);

impl VocabEmbedding {
    pub fn new(d: Tensor) -> Result<Self, TensorError> {
        if d.shape().len() != 2 || d.rows() == 0 || d.cols() == 0 {
            return Err(TensorError::Domain {
                op: "vocab",
                detail: format!("dictionary must be a non-empty matrix, got {:?}", d.shape()),
            });
        }
        if !d.is_finite() {
            return Err(TensorError::NonFinite("vocabulary embedding".into()));
        }
        Ok(Self(d))
    }

    /// Seeded Gaussian stand-in with entries `N(0, 1/width)`.
    pub fn synthetic(seed: u64, size: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (width as f64).sqrt();
        let data = (0..size * width)
            .map(|_| StandardNormal.sample(&mut rng))
            .map(|v: f64| v * s)
            .collect();
        Self(Tensor::matrix(size, width, data))
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    pub fn width(&self) -> usize {
        self.0.cols()
    }
}

/// `d×M` matrix with orthonormal rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PrincipalEmbedding {
    pub rows: Tensor,
    /// Numerical rank detected from `R`, before any capping or padding.
    pub detected_rank: usize,
}

impl PrincipalEmbedding {
    pub fn dim(&self) -> usize {
        self.rows.rows()
    }

    pub fn width(&self) -> usize {
        self.rows.cols()
    }
}

#[derive(Clone, Debug)]
pub struct QrOptions {
    /// Requested subspace size; `None` means the detected rank.
    pub rank: Option<usize>,
    /// `|R_ii| > rank_tol · max_j |R_jj|` counts toward the rank.
    pub rank_tol: f64,
    /// Column pivoting (largest remaining norm first).
    pub pivoting: bool,
    /// Upper bound on the returned subspace size.
    pub max_anchors: Option<usize>,
}

impl Default for QrOptions {
    fn default() -> Self {
        Self {
            rank: None,
            rank_tol: 1e-10,
            pivoting: false,
            max_anchors: None,
        }
    }
}

/// Householder QR of an `m×n` matrix (row-major).
pub struct HouseholderQr {
    m: usize,
    n: usize,
    /// Unit reflector vectors; `reflectors[j]` acts on rows `j..m`.
    reflectors: Vec<Vec<f64>>,
    r_diag: Vec<f64>,
    /// Original column index at each position after pivoting.
    pub permutation: Vec<usize>,
}

impl HouseholderQr {
    pub fn factor(a: &Tensor, pivoting: bool) -> Self {
        let (m, n) = (a.rows(), a.cols());
        let k = m.min(n);
        let mut w = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut reflectors = Vec::with_capacity(k);
        let mut r_diag = Vec::with_capacity(k);
        for j in 0..k {
            if pivoting {
                let norm2 = |c: usize, w: &[f64]| (j..m).map(|i| w[i * n + c].powi(2)).sum::<f64>();
                let best = (j..n)
                    .max_by(|&x, &y| norm2(x, &w).total_cmp(&norm2(y, &w)).then(y.cmp(&x)))
                    .unwrap_or(j);
                if best != j {
                    for i in 0..m {
                        w.swap(i * n + j, i * n + best);
                    }
                    perm.swap(j, best);
                }
            }
            let mut v: Vec<f64> = (j..m).map(|i| w[i * n + j]).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                reflectors.push(vec![0.0; m - j]);
                r_diag.push(0.0);
                continue;
            }
            let alpha = if v[0] >= 0.0 { -norm } else { norm };
            v[0] -= alpha;
            let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= vn);
            for c in j..n {
                let dot: f64 = (j..m).map(|i| v[i - j] * w[i * n + c]).sum();
                for i in j..m {
                    w[i * n + c] -= 2.0 * v[i - j] * dot;
                }
            }
            reflectors.push(v);
            r_diag.push(alpha);
        }
        Self {
            m,
            n,
            reflectors,
            r_diag,
            permutation: perm,
        }
    }

    pub fn r_diagonal(&self) -> &[f64] {
        &self.r_diag
    }

    /// Column `c` of the orthogonal factor `Q = H_0 H_1 ⋯ H_{k-1}`.
    pub fn q_column(&self, c: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.m];
        x[c] = 1.0;
        for (j, v) in self.reflectors.iter().enumerate().rev() {
            let dot: f64 = (j..self.m).map(|i| v[i - j] * x[i]).sum();
            for i in j..self.m {
                x[i] -= 2.0 * v[i - j] * dot;
            }
        }
        x
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.m, self.n)
    }
}

/// Extracts the principal embedding `D̂` from a vocabulary dictionary.
///
/// When the requested size exceeds the numerical rank, a warning is logged
/// and the remaining orthogonal-factor columns pad the result, which keeps
/// the rows orthonormal.
pub fn qr_reduce(
    vocab: &VocabEmbedding,
    opts: &QrOptions,
) -> Result<PrincipalEmbedding, TensorError> {
    if !(opts.rank_tol > 0.0) {
        return Err(TensorError::Domain {
            op: "qr_reduce",
            detail: "rank_tol must be positive".into(),
        });
    }
    let d = &vocab.0;
    let (size, width) = (d.rows(), d.cols());
    let k = size.min(width);
    if let Some(r) = opts.rank {
        if r == 0 || r > k {
            return Err(TensorError::Domain {
                op: "qr_reduce",
                detail: format!("requested rank {r} outside 1..={k}"),
            });
        }
    }
    let qr = HouseholderQr::factor(&d.transpose(), opts.pivoting);
    let diag = qr.r_diagonal();
    let reference = diag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let threshold = opts.rank_tol * reference;
    let ranked: Vec<usize> = (0..k)
        .filter(|&i| reference > 0.0 && diag[i].abs() > threshold)
        .collect();
    let detected = ranked.len();
    if detected == 0 && opts.rank.is_none() {
        return Err(TensorError::Domain {
            op: "qr_reduce",
            detail: "zero-rank dictionary".into(),
        });
    }
    let mut want = opts.rank.unwrap_or(detected);
    if let Some(cap) = opts.max_anchors {
        want = want.min(cap);
    }
    let mut chosen: Vec<usize> = ranked.iter().copied().take(want).collect();
    if want > detected {
        log::warn!(
            "requested subspace size {want} exceeds numerical rank {detected}; padding with complementary directions"
        );
        chosen.extend((0..k).filter(|i| !ranked.contains(i)).take(want - detected));
    }
    let mut rows = Vec::with_capacity(want * width);
    for &c in &chosen {
        let mut q = qr.q_column(c);
        if let Some(first) = q.iter().copied().find(|v| v.abs() > 1e-12) {
            if first < 0.0 {
                q.iter_mut().for_each(|v| *v = -*v);
            }
        }
        rows.extend(q);
    }
    Ok(PrincipalEmbedding {
        rows: Tensor::matrix(chosen.len(), width, rows),
        detected_rank: detected,
    })
}

/// Headerless comma-separated numeric matrix.
pub fn write_matrix_csv<W: Write>(m: &Tensor, mut w: W) -> std::io::Result<()> {
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(f64::to_string).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn parse_matrix_csv(text: &str) -> Result<Tensor, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| DataError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            detail: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row = rec
            .iter()
            .map(|c| c.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| DataError::Parse {
                line,
                detail: "non-numeric cell".into(),
            })?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(DataError::Parse {
                    line,
                    detail: format!("expected {} fields, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(DataError::NoRows);
    }
    Tensor::from_rows(&rows).map_err(|e| DataError::Dimension(e.to_string()))
}
