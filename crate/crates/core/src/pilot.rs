//! Partially orthogonal pilot operators built from DFT rows.
//!
//! Rows of the observation are ordered subcarrier-major, `r = n*T + t`, so
//! sub-block `q` owns the contiguous row range `[q*R, (q+1)*R)` with
//! `R = T*N/Q`. Columns are ordered device-major, `k*Q + q`, matching the
//! stacking of `H = [H_1; ...; H_K]`.
//!
//! `A = diag(S_1 U, ..., S_Q U) P` where `U` is the `K x K` DFT matrix with
//! entries of magnitude `sqrt(P)`, `S_q` selects `R` rows of `U` and `P`
//! routes column `(k, q)` to column `k` of block `q`. Every product with `A`
//! therefore costs `Q` length-`K` FFTs.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2};
use num_complex::Complex64;
use rand::seq::index;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::rng_from_seed;

/// Largest dense materialization `dense_a` will produce.
pub const DENSE_ENTRY_LIMIT: usize = 10_000_000;

/// How DFT rows are shared between sub-blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// All `TN` selected rows are distinct; requires `TN <= K`.
    #[default]
    Global,
    /// Rows are distinct within each sub-block only; requires `TN/Q <= K`.
    /// Partial orthogonality still holds because the blocks act on disjoint
    /// columns.
    PerBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodebookParams {
    pub k: usize,
    pub n: usize,
    pub t: usize,
    pub q: usize,
    pub power: f64,
    pub seed: u64,
    #[serde(default)]
    pub mode: SelectionMode,
}

/// Replayable description of a codebook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookDocument {
    pub params: CodebookParams,
    pub selections: Vec<Vec<usize>>,
    /// DFT column assigned to each device (identity unless permuted).
    pub device_columns: Vec<usize>,
}

#[derive(Clone)]
pub struct PilotCodebook {
    params: CodebookParams,
    selections: Vec<Vec<usize>>,
    device_columns: Vec<usize>,
    d_diag: Vec<f64>,
    scale: f64,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for PilotCodebook {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PilotCodebook")
            .field("params", &self.params)
            .field("selections", &self.selections)
            .field("device_columns", &self.device_columns)
            .finish_non_exhaustive()
    }
}

impl CodebookParams {
    /// Checks the structural constraints of the configuration.
    pub fn validate(&self) -> Result<()> {
        validate(self)
    }
}

fn validate(params: &CodebookParams) -> Result<()> {
    let CodebookParams { k, n, t, q, power, .. } = *params;
    if k == 0 || n == 0 || t == 0 || q == 0 {
        return Err(Error::Config("K, N, T and Q must all be >= 1".into()));
    }
    if n % q != 0 {
        return Err(Error::Config(format!("Q={q} does not divide N={n}")));
    }
    if (t * n) % q != 0 {
        return Err(Error::Config(format!("Q={q} does not divide TN={}", t * n)));
    }
    if !(power > 0.0) || !power.is_finite() {
        return Err(Error::Parameter(format!("pilot power {power} must be > 0")));
    }
    match params.mode {
        SelectionMode::Global if t * n > k => Err(Error::Config(format!(
            "TN={} exceeds K={k}: disjoint row selections impossible",
            t * n
        ))),
        SelectionMode::PerBlock if t * n / q > k => Err(Error::Config(format!(
            "TN/Q={} exceeds K={k}: per-block row selections impossible",
            t * n / q
        ))),
        _ => Ok(()),
    }
}

/// Strict (globally disjoint) codebook for the given dimensions.
pub fn build_codebook(k: usize, n: usize, t: usize, q: usize, power: f64, seed: u64) -> Result<PilotCodebook> {
    PilotCodebook::build(&CodebookParams {
        k,
        n,
        t,
        q,
        power,
        seed,
        mode: SelectionMode::Global,
    })
}

impl PilotCodebook {
    /// Draws row selections uniformly without replacement from `seed`.
    pub fn build(params: &CodebookParams) -> Result<Self> {
        validate(params)?;
        let rows = params.t * params.n / params.q;
        let mut rng = rng_from_seed(params.seed);
        let selections = match params.mode {
            SelectionMode::Global => {
                let all = index::sample(&mut rng, params.k, params.t * params.n).into_vec();
                all.chunks(rows).map(|c| c.to_vec()).collect()
            }
            SelectionMode::PerBlock => (0..params.q)
                .map(|_| index::sample(&mut rng, params.k, rows).into_vec())
                .collect(),
        };
        Self::assemble(*params, selections, (0..params.k).collect())
    }

    pub fn from_document(doc: &CodebookDocument) -> Result<Self> {
        validate(&doc.params)?;
        Self::assemble(doc.params, doc.selections.clone(), doc.device_columns.clone())
    }

    pub fn to_document(&self) -> CodebookDocument {
        CodebookDocument {
            params: self.params,
            selections: self.selections.clone(),
            device_columns: self.device_columns.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(&serde_json::from_str(text)?)
    }

    /// Reassigns DFT columns to devices; `columns` must be a permutation of
    /// `0..K`. Device `k` then transmits the pilots of column `columns[k]`.
    pub fn with_device_columns(self, columns: Vec<usize>) -> Result<Self> {
        Self::assemble(self.params, self.selections, columns)
    }

    fn assemble(params: CodebookParams, selections: Vec<Vec<usize>>, device_columns: Vec<usize>) -> Result<Self> {
        let CodebookParams { k, n, t, q, power, .. } = params;
        let rows = t * n / q;
        check_len("row selection blocks", q, selections.len())?;
        let mut seen_global = vec![false; k];
        for sel in &selections {
            check_len("rows per block", rows, sel.len())?;
            let mut seen = vec![false; k];
            for &s in sel {
                if s >= k || seen[s] {
                    return Err(Error::Config("row selection out of range or repeated".into()));
                }
                seen[s] = true;
                if params.mode == SelectionMode::Global {
                    if seen_global[s] {
                        return Err(Error::Config("row selections overlap across blocks".into()));
                    }
                    seen_global[s] = true;
                }
            }
        }
        check_len("device columns", k, device_columns.len())?;
        let mut seen = vec![false; k];
        for &c in &device_columns {
            if c >= k || seen[c] {
                return Err(Error::Config("device columns are not a permutation".into()));
            }
            seen[c] = true;
        }

        let len = n / q;
        let half = n as f64 / (2.0 * q as f64);
        let d_diag = (0..t * n).map(|r| ((r / t) % len + 1) as f64 - half).collect();

        let mut planner = FftPlanner::new();
        Ok(Self {
            params,
            selections,
            device_columns,
            d_diag,
            scale: power.sqrt(),
            forward: planner.plan_fft_forward(k),
            inverse: planner.plan_fft_inverse(k),
        })
    }

    pub fn params(&self) -> &CodebookParams {
        &self.params
    }

    pub fn num_devices(&self) -> usize {
        self.params.k
    }

    pub fn num_subcarriers(&self) -> usize {
        self.params.n
    }

    pub fn num_symbols(&self) -> usize {
        self.params.t
    }

    pub fn num_blocks(&self) -> usize {
        self.params.q
    }

    pub fn power(&self) -> f64 {
        self.params.power
    }

    /// `TN`, the observation length per antenna.
    pub fn num_rows(&self) -> usize {
        self.params.t * self.params.n
    }

    /// `QK`, the length of `h_m` and `c_m`.
    pub fn num_cols(&self) -> usize {
        self.params.q * self.params.k
    }

    fn rows_per_block(&self) -> usize {
        self.num_rows() / self.params.q
    }

    pub fn selections(&self) -> &[Vec<usize>] {
        &self.selections
    }

    pub fn device_columns(&self) -> &[usize] {
        &self.device_columns
    }

    /// Diagonal of `D`, with `B = D A`.
    pub fn d_diag(&self) -> &[f64] {
        &self.d_diag
    }

    /// `K * P`, the diagonal of `A A^H`.
    pub fn kp(&self) -> f64 {
        self.params.k as f64 * self.params.power
    }

    /// DFT row used by observation row `r`.
    fn dft_row(&self, r: usize) -> usize {
        let rows = self.rows_per_block();
        self.selections[r / rows][r % rows]
    }

    /// Pilot symbol of device `k` on subcarrier `n` at OFDM symbol `t`.
    pub fn pilot_symbol(&self, k: usize, n: usize, t: usize) -> Complex64 {
        let s = self.dft_row(n * self.params.t + t);
        let kk = self.params.k;
        let phase = -2.0 * PI * ((s * self.device_columns[k]) % kk) as f64 / kk as f64;
        Complex64::from_polar(self.scale, phase)
    }

    /// `A x` for `x` of length `QK`.
    pub fn apply_a(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        check_len("A input", self.num_cols(), x.len())?;
        let mut out = vec![Complex64::new(0.0, 0.0); self.num_rows()];
        self.apply_a_into(x, &mut out);
        Ok(out)
    }

    /// `A^H y` for `y` of length `TN`.
    pub fn apply_a_adjoint(&self, y: &[Complex64]) -> Result<Vec<Complex64>> {
        check_len("A^H input", self.num_rows(), y.len())?;
        let mut out = vec![Complex64::new(0.0, 0.0); self.num_cols()];
        self.apply_a_adjoint_into(y, &mut out);
        Ok(out)
    }

    /// `B x = D (A x)`.
    pub fn apply_b(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        let mut out = self.apply_a(x)?;
        for (v, d) in out.iter_mut().zip(&self.d_diag) {
            *v *= d;
        }
        Ok(out)
    }

    /// `B^H y = A^H (D y)`.
    pub fn apply_b_adjoint(&self, y: &[Complex64]) -> Result<Vec<Complex64>> {
        check_len("B^H input", self.num_rows(), y.len())?;
        let dy: Vec<Complex64> = y.iter().zip(&self.d_diag).map(|(v, d)| v * d).collect();
        self.apply_a_adjoint(&dy)
    }

    pub(crate) fn apply_a_into(&self, x: &[Complex64], out: &mut [Complex64]) {
        let (k, q) = (self.params.k, self.params.q);
        let rows = self.rows_per_block();
        let mut buf = vec![Complex64::new(0.0, 0.0); k];
        for blk in 0..q {
            for dev in 0..k {
                buf[self.device_columns[dev]] = x[dev * q + blk];
            }
            self.forward.process(&mut buf);
            for (i, &s) in self.selections[blk].iter().enumerate() {
                out[blk * rows + i] = buf[s] * self.scale;
            }
        }
    }

    pub(crate) fn apply_a_adjoint_into(&self, y: &[Complex64], out: &mut [Complex64]) {
        let (k, q) = (self.params.k, self.params.q);
        let rows = self.rows_per_block();
        let mut buf = vec![Complex64::new(0.0, 0.0); k];
        for blk in 0..q {
            buf.fill(Complex64::new(0.0, 0.0));
            for (i, &s) in self.selections[blk].iter().enumerate() {
                buf[s] += y[blk * rows + i];
            }
            self.inverse.process(&mut buf);
            for dev in 0..k {
                out[dev * q + blk] = buf[self.device_columns[dev]] * self.scale;
            }
        }
    }

    /// `A X` column by column for `X` of shape `QK x M`.
    pub fn apply_a_matrix(&self, x: ArrayView2<Complex64>) -> Result<Array2<Complex64>> {
        check_len("A input rows", self.num_cols(), x.nrows())?;
        let mut out = Array2::zeros((self.num_rows(), x.ncols()));
        let mut col_out = vec![Complex64::new(0.0, 0.0); self.num_rows()];
        for (m, col) in x.columns().into_iter().enumerate() {
            let col: Vec<Complex64> = col.to_vec();
            self.apply_a_into(&col, &mut col_out);
            out.column_mut(m).assign(&ndarray::ArrayView1::from(&col_out));
        }
        Ok(out)
    }

    /// `B X` column by column.
    pub fn apply_b_matrix(&self, x: ArrayView2<Complex64>) -> Result<Array2<Complex64>> {
        let mut out = self.apply_a_matrix(x)?;
        for (mut row, d) in out.rows_mut().into_iter().zip(&self.d_diag) {
            row.mapv_inplace(|v| v * d);
        }
        Ok(out)
    }

    /// Noise-free observation `sum_k Lambda_k G_k` for a `K x N x M`
    /// frequency-response tensor, using one length-`K` FFT per subcarrier
    /// and antenna.
    pub fn apply_pilots(&self, g: &Array3<Complex64>) -> Result<Array2<Complex64>> {
        let (k, n, m) = g.dim();
        check_len("devices", self.params.k, k)?;
        check_len("subcarriers", self.params.n, n)?;
        let t = self.params.t;
        let mut out = Array2::zeros((self.num_rows(), m));
        let mut buf = vec![Complex64::new(0.0, 0.0); k];
        for sc in 0..n {
            for a in 0..m {
                for dev in 0..k {
                    buf[self.device_columns[dev]] = g[[dev, sc, a]];
                }
                self.forward.process(&mut buf);
                for sym in 0..t {
                    let r = sc * t + sym;
                    out[[r, a]] = buf[self.dft_row(r)] * self.scale;
                }
            }
        }
        Ok(out)
    }

    /// Explicit `TN x QK` matrix of `A`.
    pub fn dense_a(&self) -> Result<Array2<Complex64>> {
        let (rows, cols) = (self.num_rows(), self.num_cols());
        if rows.saturating_mul(cols) > DENSE_ENTRY_LIMIT {
            return Err(Error::Config(format!(
                "dense A would have {} entries (limit {DENSE_ENTRY_LIMIT})",
                rows.saturating_mul(cols)
            )));
        }
        let (k, q) = (self.params.k, self.params.q);
        let per_block = self.rows_per_block();
        Ok(Array2::from_shape_fn((rows, cols), |(r, col)| {
            let (dev, blk) = (col / q, col % q);
            if r / per_block != blk {
                return Complex64::new(0.0, 0.0);
            }
            let s = self.dft_row(r);
            let phase = -2.0 * PI * ((s * self.device_columns[dev]) % k) as f64 / k as f64;
            Complex64::from_polar(self.scale, phase)
        }))
    }

    /// Explicit `B = D A`.
    pub fn dense_b(&self) -> Result<Array2<Complex64>> {
        let mut a = self.dense_a()?;
        for (mut row, d) in a.rows_mut().into_iter().zip(&self.d_diag) {
            row.mapv_inplace(|v| v * d);
        }
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::complex_normal;

    fn random_vec(len: usize, seed: u64) -> Vec<Complex64> {
        let mut rng = rng_from_seed(seed);
        (0..len).map(|_| complex_normal(&mut rng, 1.0)).collect()
    }

    fn dense_mul(a: &Array2<Complex64>, x: &[Complex64]) -> Vec<Complex64> {
        a.rows()
            .into_iter()
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn rel_err(a: &[Complex64], b: &[Complex64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
        let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
        (num / den).sqrt()
    }

    #[test]
    fn reference_shapes() {
        let cb = build_codebook(1000, 72, 8, 4, 1.0, 1).unwrap();
        assert_eq!(cb.num_rows(), 576);
        assert_eq!(cb.num_cols(), 4000);
        let x = random_vec(4000, 2);
        let b = cb.apply_b(&x).unwrap();
        let a = cb.apply_a(&x).unwrap();
        for ((bv, av), d) in b.iter().zip(&a).zip(cb.d_diag()) {
            assert_eq!(*bv, av * d);
        }
    }

    #[test]
    fn config_errors() {
        assert!(matches!(build_codebook(16, 8, 4, 2, 1.0, 0), Err(Error::Config(_))));
        assert!(matches!(build_codebook(64, 9, 4, 2, 1.0, 0), Err(Error::Config(_))));
        assert!(matches!(build_codebook(64, 8, 4, 3, 1.0, 0), Err(Error::Config(_))));
        assert!(matches!(build_codebook(64, 8, 4, 2, 0.0, 0), Err(Error::Parameter(_))));
        let relaxed = PilotCodebook::build(&CodebookParams {
            k: 16,
            n: 8,
            t: 4,
            q: 2,
            power: 1.0,
            seed: 0,
            mode: SelectionMode::PerBlock,
        });
        assert!(relaxed.is_ok());
    }

    #[test]
    fn partial_orthogonality_small() {
        let cb = build_codebook(8, 4, 2, 2, 1.0, 3).unwrap();
        let a = cb.dense_a().unwrap();
        let gram = a.dot(&a.t().mapv(|v| v.conj()));
        let mut err = 0.0;
        for ((i, j), v) in gram.indexed_iter() {
            let target = if i == j { 8.0 } else { 0.0 };
            err += (v - target).norm_sqr();
        }
        assert!(err.sqrt() < 1e-10);
    }

    #[test]
    fn minimal_configuration() {
        let cb = build_codebook(8, 2, 1, 2, 2.0, 4).unwrap();
        assert_eq!(cb.selections().iter().map(|s| s.len()).collect::<Vec<_>>(), vec![1, 1]);
        let a = cb.dense_a().unwrap();
        assert_eq!(a.dim(), (2, 16));
        assert!(a
            .iter()
            .filter(|v| v.norm() > 0.0)
            .all(|v| (v.norm_sqr() - 2.0).abs() < 1e-12));
    }

    #[test]
    fn dense_structure_and_power() {
        let cb = build_codebook(64, 8, 4, 2, 1.5, 5).unwrap();
        let a = cb.dense_a().unwrap();
        let rows = cb.num_rows() / 2;
        for ((r, col), v) in a.indexed_iter() {
            let (dev, blk) = (col / 2, col % 2);
            if r / rows == blk {
                assert!((v.norm_sqr() - 1.5).abs() < 1e-12);
                let expect = cb.pilot_symbol(dev, r / 4, r % 4);
                assert!((v - expect).norm() < 1e-12);
            } else {
                assert_eq!(*v, Complex64::new(0.0, 0.0));
            }
        }
    }

    #[test]
    fn fast_matches_dense() {
        let cb = PilotCodebook::build(&CodebookParams {
            k: 16,
            n: 8,
            t: 4,
            q: 2,
            power: 1.0,
            seed: 6,
            mode: SelectionMode::PerBlock,
        })
        .unwrap();
        let a = cb.dense_a().unwrap();
        let b = cb.dense_b().unwrap();
        let ah = a.t().mapv(|v| v.conj());
        let bh = b.t().mapv(|v| v.conj());
        let x = random_vec(cb.num_cols(), 7);
        let y = random_vec(cb.num_rows(), 8);
        assert!(rel_err(&cb.apply_a(&x).unwrap(), &dense_mul(&a, &x)) < 1e-12);
        assert!(rel_err(&cb.apply_b(&x).unwrap(), &dense_mul(&b, &x)) < 1e-12);
        assert!(rel_err(&cb.apply_a_adjoint(&y).unwrap(), &dense_mul(&ah, &y)) < 1e-12);
        assert!(rel_err(&cb.apply_b_adjoint(&y).unwrap(), &dense_mul(&bh, &y)) < 1e-12);
        assert!(cb
            .apply_a(&vec![Complex64::new(0.0, 0.0); cb.num_cols()])
            .unwrap()
            .iter()
            .all(|v| v.norm() == 0.0));
    }

    #[test]
    fn length_mismatch() {
        let cb = build_codebook(64, 8, 4, 2, 1.0, 0).unwrap();
        assert!(matches!(
            cb.apply_a(&[Complex64::new(0.0, 0.0); 3]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            cb.apply_a_adjoint(&[Complex64::new(0.0, 0.0); 3]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn dense_guard() {
        let cb = build_codebook(8192, 1024, 8, 4, 1.0, 0).unwrap();
        assert!(cb.dense_a().is_err());
    }

    #[test]
    fn d_pattern() {
        let cb = build_codebook(64, 8, 2, 2, 1.0, 0).unwrap();
        // d = [-1, 0, 1, 2], each repeated T=2 times, tiled over Q=2 blocks
        let expect = [-1.0, -1.0, 0.0, 0.0, 1.0, 1.0, 2.0, 2.0];
        assert_eq!(&cb.d_diag()[..8], &expect);
        assert_eq!(&cb.d_diag()[8..], &expect);
    }

    #[test]
    fn selections_deterministic_and_disjoint() {
        let a = build_codebook(100, 12, 4, 3, 1.0, 9).unwrap();
        let b = build_codebook(100, 12, 4, 3, 1.0, 9).unwrap();
        assert_eq!(a.selections(), b.selections());
        let mut all: Vec<usize> = a.selections().concat();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 48);
    }

    #[test]
    fn document_replay() {
        let cb = build_codebook(64, 8, 4, 2, 1.0, 11).unwrap();
        let back = PilotCodebook::from_json(&cb.to_json().unwrap()).unwrap();
        assert_eq!(back.to_document(), cb.to_document());
        let x = random_vec(cb.num_cols(), 1);
        assert_eq!(back.apply_a(&x).unwrap(), cb.apply_a(&x).unwrap());

        let mut doc = cb.to_document();
        doc.selections[1][0] = doc.selections[0][0];
        assert!(PilotCodebook::from_document(&doc).is_err());
    }

    #[test]
    fn pilots_match_operator_on_blockwise_data() {
        // With G_k = E1 H_k (constant per sub-block), sum_k Lambda_k G_k = A H.
        let cb = build_codebook(32, 8, 2, 2, 1.0, 3).unwrap();
        let h = random_vec(cb.num_cols(), 4);
        let mut g = Array3::<Complex64>::zeros((32, 8, 1));
        for dev in 0..32 {
            for n in 0..8 {
                g[[dev, n, 0]] = h[dev * 2 + n / 4];
            }
        }
        let y = cb.apply_pilots(&g).unwrap();
        let ah = cb.apply_a(&h).unwrap();
        assert!(rel_err(&y.column(0).to_vec(), &ah) < 1e-12);
    }
}
