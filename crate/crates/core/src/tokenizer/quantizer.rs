//! Residual vector quantization with EMA codebooks.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::codes::CodeGrid;
use crate::error::{bail, Error, Result};
use crate::tensor::Matrix;

/// Output of [`QuantizerState::quantize`].
#[derive(Clone, Debug, PartialEq)]
pub struct TasteCodes {
    /// `R × N` code indices.
    pub codes: CodeGrid,
    /// `Σ_r` selected codewords, `[N × d_z]`.
    pub embedding: Matrix,
    /// Residual entering each layer; the first is the input itself.
    pub residuals: Vec<Matrix>,
    /// Codeword chosen at each layer.
    pub selected: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerState {
    pub codebooks: Vec<Matrix>,
    /// Assignments per code since the last dead-code check.
    pub usage: Vec<Vec<u64>>,
    pub enabled: bool,
    pub decay: f64,
    ema_counts: Vec<Vec<f64>>,
    ema_sums: Vec<Matrix>,
}

/// Index of the row of `book` closest to `x`; ties go to the lowest index.
pub fn nearest_code(book: &Matrix, x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..book.rows() {
        let d: f64 = book.row(c).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

impl QuantizerState {
    /// Zero codebooks; call [`Self::init_kmeans`] before enabling.
    pub fn new(layers: usize, size: usize, dim: usize, decay: f64) -> Result<Self> {
        if layers == 0 || size == 0 || dim == 0 {
            bail!(Config, "quantizer needs at least one layer, code and dimension");
        }
        if !(0.0..1.0).contains(&decay) {
            bail!(Config, "EMA decay {} outside [0, 1)", decay);
        }
        Ok(Self {
            codebooks: vec![Matrix::zeros(size, dim); layers],
            usage: vec![vec![0; size]; layers],
            enabled: false,
            decay,
            ema_counts: vec![vec![0.0; size]; layers],
            ema_sums: vec![Matrix::zeros(size, dim); layers],
        })
    }

    /// A quantizer with the given codebooks, enabled.
    pub fn from_codebooks(codebooks: Vec<Matrix>, decay: f64) -> Result<Self> {
        let first = codebooks.first().ok_or_else(|| Error::Config("no codebooks".into()))?;
        let (size, dim) = first.shape();
        if codebooks.iter().any(|b| b.shape() != (size, dim)) || size == 0 || dim == 0 {
            bail!(Config, "codebooks must share a non-empty shape");
        }
        if codebooks.iter().any(|b| !b.is_finite()) {
            bail!(Config, "codebooks contain non-finite values");
        }
        let mut q = Self::new(codebooks.len(), size, dim, decay)?;
        q.ema_sums = codebooks.clone();
        for c in &mut q.ema_counts {
            c.iter_mut().for_each(|v| *v = 1.0);
        }
        q.codebooks = codebooks;
        q.enabled = true;
        Ok(q)
    }

    pub fn num_layers(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebooks[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.codebooks[0].cols()
    }

    /// Greedy coarse-to-fine nearest-codeword selection.
    pub fn quantize(&self, z: &Matrix) -> Result<TasteCodes> {
        if !self.enabled {
            return Err(Error::QuantizerDisabled);
        }
        if z.cols() != self.dim() {
            bail!(Shape, "input width {} but codebook width {}", z.cols(), self.dim());
        }
        let n = z.rows();
        let mut residual = z.clone();
        let mut embedding = Matrix::zeros(n, self.dim());
        let mut layers = Vec::with_capacity(self.num_layers());
        let mut residuals = Vec::with_capacity(self.num_layers());
        let mut selected = Vec::with_capacity(self.num_layers());
        for book in &self.codebooks {
            let codes: Vec<usize> = (0..n).map(|i| nearest_code(book, residual.row(i))).collect();
            let chosen = book.select_rows(&codes);
            embedding.add_assign(&chosen);
            let mut next = residual.clone();
            for (r, c) in next.data_mut().iter_mut().zip(chosen.data()) {
                *r -= c;
            }
            residuals.push(core::mem::replace(&mut residual, next));
            selected.push(chosen);
            layers.push(codes);
        }
        Ok(TasteCodes {
            codes: CodeGrid::new(layers)?,
            embedding,
            residuals,
            selected,
        })
    }

    /// `Σ_r codebook_r[codes[r]]`, accumulated in the same order as
    /// [`Self::quantize`].
    pub fn dequantize(&self, codes: &CodeGrid) -> Result<Matrix> {
        if codes.num_layers() != self.num_layers() {
            bail!(
                Shape,
                "{} code layers for a {}-layer quantizer",
                codes.num_layers(),
                self.num_layers()
            );
        }
        let size = self.codebook_size();
        let mut out = Matrix::zeros(codes.len(), self.dim());
        for (layer, (book, row)) in self.codebooks.iter().zip(codes.layers()).enumerate() {
            if let Some(position) = row.iter().position(|&c| c >= size) {
                return Err(Error::CodeRange {
                    layer,
                    position,
                    code: row[position],
                    size,
                });
            }
            out.add_assign(&book.select_rows(row));
        }
        Ok(out)
    }

    /// Runs k-means layer by layer on `samples` and its successive residuals,
    /// then enables the quantizer.
    pub fn init_kmeans<R: Rng + ?Sized>(&mut self, samples: &Matrix, iterations: usize, rng: &mut R) -> Result<()> {
        if samples.rows() == 0 || samples.cols() != self.dim() {
            bail!(Shape, "k-means needs rows of width {}", self.dim());
        }
        let size = self.codebook_size();
        let mut residual = samples.clone();
        for r in 0..self.num_layers() {
            let book = kmeans(&residual, size, iterations, rng);
            for i in 0..residual.rows() {
                let c = nearest_code(&book, residual.row(i));
                for (x, y) in residual.row_mut(i).iter_mut().zip(book.row(c)) {
                    *x -= y;
                }
            }
            self.ema_sums[r] = book.clone();
            self.ema_counts[r] = vec![1.0; size];
            self.codebooks[r] = book;
            self.usage[r] = vec![0; size];
        }
        self.enabled = true;
        Ok(())
    }

    /// Moves each codeword towards the mean of the residuals assigned to it.
    pub fn ema_update(&mut self, batch: &[TasteCodes]) {
        let (size, dim) = (self.codebook_size(), self.dim());
        for r in 0..self.num_layers() {
            let mut counts = vec![0.0; size];
            let mut sums = Matrix::zeros(size, dim);
            for item in batch {
                for (i, &c) in item.codes.layers()[r].iter().enumerate() {
                    counts[c] += 1.0;
                    for (s, x) in sums.row_mut(c).iter_mut().zip(item.residuals[r].row(i)) {
                        *s += x;
                    }
                    self.usage[r][c] += 1;
                }
            }
            let d = self.decay;
            for c in 0..size {
                self.ema_counts[r][c] = d * self.ema_counts[r][c] + (1.0 - d) * counts[c];
                let ema_row = self.ema_sums[r].row_mut(c);
                for (e, s) in ema_row.iter_mut().zip(sums.row(c)) {
                    *e = d * *e + (1.0 - d) * s;
                }
            }
            // Laplace smoothing keeps rarely used codes from dividing by ~0.
            let total: f64 = self.ema_counts[r].iter().sum();
            let eps = 1e-5;
            for c in 0..size {
                let n = (self.ema_counts[r][c] + eps) / (total + size as f64 * eps) * total;
                let (sum_row, book_row) = (self.ema_sums[r].row(c).to_vec(), self.codebooks[r].row_mut(c));
                for (b, s) in book_row.iter_mut().zip(&sum_row) {
                    *b = s / n;
                }
            }
        }
    }

    /// Re-seeds every code unused since the last call to a random row of the
    /// matching layer's residuals, then clears the usage counters. Returns
    /// the number of codes replaced.
    pub fn reseed_dead<R: Rng + ?Sized>(&mut self, residuals: &[Matrix], rng: &mut R) -> usize {
        let mut replaced = 0;
        for r in 0..self.num_layers() {
            let Some(pool) = residuals.get(r).filter(|m| m.rows() > 0) else {
                continue;
            };
            for c in 0..self.codebook_size() {
                if self.usage[r][c] == 0 {
                    let row = pool.row(rng.random_range(0..pool.rows())).to_vec();
                    self.codebooks[r].row_mut(c).copy_from_slice(&row);
                    self.ema_sums[r].row_mut(c).copy_from_slice(&row);
                    self.ema_counts[r][c] = 1.0;
                    replaced += 1;
                }
            }
            self.usage[r].iter_mut().for_each(|u| *u = 0);
        }
        replaced
    }
}

/// Lloyd's algorithm seeded with k-means++; with fewer distinct samples than
/// `k`, the remaining centres are jittered copies of samples.
pub fn kmeans<R: Rng + ?Sized>(x: &Matrix, k: usize, iterations: usize, rng: &mut R) -> Matrix {
    let (n, d) = x.shape();
    let mut centres = Matrix::zeros(k, d);
    let first = rng.random_range(0..n);
    centres.row_mut(0).copy_from_slice(x.row(first));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), centres.row(0))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if t < w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let mut row = x.row(pick).to_vec();
        if total <= 0.0 {
            row.iter_mut().for_each(|v| *v += rng.random_range(-1e-3..1e-3));
        }
        centres.row_mut(c).copy_from_slice(&row);
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(x.row(i), centres.row(c)));
        }
    }
    for _ in 0..iterations {
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = nearest_code(&centres, x.row(i));
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centres.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }
    centres
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
