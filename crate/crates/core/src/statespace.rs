//! Continuous-time state-space realizations and their interconnections.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::matops::{self, check_finite};

/// Realization `(a, b, c, d)` of `H(s) = c (sI - a)⁻¹ b + d`.
///
/// A system with zero states is a static gain `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
}

impl StateSpace {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension(format!("A is {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != n {
            return Err(Error::Dimension(format!("B has {} rows, expected {n}", b.nrows())));
        }
        if c.ncols() != n {
            return Err(Error::Dimension(format!("C has {} columns, expected {n}", c.ncols())));
        }
        if d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(Error::Dimension(format!(
                "D is {}x{}, expected {}x{}",
                d.nrows(),
                d.ncols(),
                c.nrows(),
                b.ncols()
            )));
        }
        check_finite(&a, "A")?;
        check_finite(&b, "B")?;
        check_finite(&c, "C")?;
        check_finite(&d, "D")?;
        Ok(Self { a, b, c, d })
    }

    pub fn static_gain(d: DMatrix<f64>) -> Result<Self> {
        let (p, m) = d.shape();
        Self::new(DMatrix::zeros(0, 0), DMatrix::zeros(0, m), DMatrix::zeros(p, 0), d)
    }

    pub fn identity(size: usize) -> Self {
        Self::static_gain(DMatrix::identity(size, size)).expect("identity gain is valid")
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        (self.a, self.b, self.c, self.d)
    }

    /// Number of states.
    pub fn order(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }
    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    /// `H(iω)`.
    pub fn eval(&self, omega: f64) -> Result<DMatrix<Complex64>> {
        FreqEvaluator::new(self)?.eval(omega)
    }

    /// Frequency response over a list of frequencies.
    pub fn freq_response(&self, omegas: &[f64]) -> Result<Vec<FrequencySample>> {
        if let Some(w) = omegas.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::Domain(format!("invalid frequency {w}")));
        }
        let ev = FreqEvaluator::new(self)?;
        omegas
            .iter()
            .map(|&omega| Ok(FrequencySample { omega, gain: ev.eval(omega)? }))
            .collect()
    }

    /// Largest real part among the eigenvalues of `a`.
    pub fn spectral_abscissa(&self) -> Result<f64> {
        if self.order() == 0 {
            return Err(Error::Domain("static system has no dynamics".into()));
        }
        matops::max_real_eigenvalue(&self.a)
    }

    /// Stable in the strict sense; static systems count as stable.
    pub fn is_stable(&self) -> Result<bool> {
        if self.order() == 0 {
            return Ok(true);
        }
        Ok(self.spectral_abscissa()? < 0.0)
    }

    /// Left-multiply the output by `gain` (a static post-compensator).
    pub fn scale_outputs(&self, gain: f64) -> Self {
        Self {
            a: self.a.clone(),
            b: self.b.clone(),
            c: &self.c * gain,
            d: &self.d * gain,
        }
    }

    /// Keep only the listed output rows and input columns.
    pub fn select(&self, outputs: &[usize], inputs: &[usize]) -> Result<Self> {
        if outputs.iter().any(|&i| i >= self.n_outputs()) || inputs.iter().any(|&j| j >= self.n_inputs()) {
            return Err(Error::Dimension("channel index out of range".into()));
        }
        let b = self.b.select_columns(inputs);
        let c = self.c.select_rows(outputs);
        let d = self.d.select_rows(outputs).select_columns(inputs);
        Self::new(self.a.clone(), b, c, d)
    }

    /// Similarity transform `x = t x̃`.
    pub fn similarity(&self, t: &DMatrix<f64>) -> Result<Self> {
        let tinv = matops::solve_linear(t, &DMatrix::identity(t.nrows(), t.nrows()))?;
        Self::new(&tinv * &self.a * t, &tinv * &self.b, &self.c * t, self.d.clone())
    }

    /// Serialize in the whitespace-separated text format read by [`StateSpace::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {} {}", self.order(), self.n_inputs(), self.n_outputs());
        for m in [&self.a, &self.b, &self.c, &self.d] {
            write_rows(&mut s, m);
        }
        s
    }

    /// Parse the text format: header `n n_u n_y`, then the rows of A, B, C and D.
    /// Lines starting with `#` and blank lines are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = DataLines::new(text);
        let (line, header) = lines
            .next_values()?
            .ok_or(Error::Parse { line: 1, msg: "missing header".into() })?;
        let dims = parse_header::<3>(line, &header)?;
        let (n, nu, ny) = (dims[0], dims[1], dims[2]);
        let a = lines.read_block("A", n, n)?;
        let b = lines.read_block("B", n, nu)?;
        let c = lines.read_block("C", ny, n)?;
        let d = lines.read_block("D", ny, nu)?;
        lines.expect_end()?;
        Self::new(a, b, c, d).map_err(|e| Error::Parse { line: lines.line_no(), msg: e.to_string() })
    }
}

pub(crate) fn write_rows(s: &mut String, m: &DMatrix<f64>) {
    if m.ncols() == 0 {
        return;
    }
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format_float(m[(i, j)])).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
}

/// Shortest decimal string that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

pub(crate) fn parse_header<const K: usize>(line: usize, values: &[String]) -> Result<[usize; K]> {
    if values.len() != K {
        return Err(Error::Parse {
            line,
            msg: format!("header must hold {K} integers, found {} tokens", values.len()),
        });
    }
    let mut out = [0usize; K];
    for (slot, tok) in out.iter_mut().zip(values) {
        *slot = tok.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("invalid dimension '{tok}' in header"),
        })?;
    }
    Ok(out)
}

/// Iterator over non-comment lines of a text matrix file.
pub(crate) struct DataLines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last_line: usize,
}

impl<'a> DataLines<'a> {
    pub(crate) fn new(text: &'a str) -> Self {
        Self { inner: text.lines().enumerate(), last_line: 0 }
    }

    pub(crate) fn line_no(&self) -> usize {
        self.last_line
    }

    pub(crate) fn next_values(&mut self) -> Result<Option<(usize, Vec<String>)>> {
        for (idx, raw) in self.inner.by_ref() {
            self.last_line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            return Ok(Some((idx + 1, trimmed.split_whitespace().map(str::to_owned).collect())));
        }
        Ok(None)
    }

    pub(crate) fn read_block(&mut self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(rows, cols);
        if cols == 0 {
            // zero-width rows are implicit
            return Ok(m);
        }
        for i in 0..rows {
            let (line, toks) = self.next_values()?.ok_or_else(|| Error::Parse {
                line: self.last_line + 1,
                msg: format!("unexpected end of file: block {name} is missing row {} of {rows}", i + 1),
            })?;
            if toks.len() != cols {
                return Err(Error::Parse {
                    line,
                    msg: format!("block {name} row {} has {} entries, expected {cols}", i + 1, toks.len()),
                });
            }
            for (j, tok) in toks.iter().enumerate() {
                let v: f64 = tok.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("non-numeric token '{tok}' in block {name}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse { line, msg: format!("non-finite value in block {name}") });
                }
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }

    pub(crate) fn expect_end(&mut self) -> Result<()> {
        if let Some((line, _)) = self.next_values()? {
            return Err(Error::Parse { line, msg: "trailing data after last block".into() });
        }
        Ok(())
    }
}

/// One sample of a frequency response.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencySample {
    pub omega: f64,
    pub gain: DMatrix<Complex64>,
}

/// Repeated evaluation of `H(iω)` from a Hessenberg form of `a`.
///
/// With `a = q h qᵀ`, `H(iω) = c q (iω - h)⁻¹ qᵀ b + d` and each solve with
/// the Hessenberg matrix `iω - h` costs O(n²) per right-hand side.
#[derive(Debug, Clone)]
pub struct FreqEvaluator {
    h: DMatrix<f64>,
    bq: DMatrix<Complex64>,
    cq: DMatrix<Complex64>,
    d: DMatrix<Complex64>,
    scale: f64,
}

impl FreqEvaluator {
    pub fn new(sys: &StateSpace) -> Result<Self> {
        let n = sys.order();
        let to_c = |m: &DMatrix<f64>| m.map(|v| Complex64::new(v, 0.0));
        if n == 0 {
            return Ok(Self {
                h: DMatrix::zeros(0, 0),
                bq: DMatrix::zeros(0, sys.n_inputs()),
                cq: DMatrix::zeros(sys.n_outputs(), 0),
                d: to_c(&sys.d),
                scale: 1.0,
            });
        }
        let hess = sys.a.clone().hessenberg();
        let (q, h) = hess.unpack();
        let bq = to_c(&(q.transpose() * &sys.b));
        let cq = to_c(&(&sys.c * &q));
        let scale = h.amax().max(f64::MIN_POSITIVE);
        Ok(Self { h, bq, cq, d: to_c(&sys.d), scale })
    }

    pub fn eval(&self, omega: f64) -> Result<DMatrix<Complex64>> {
        self.eval_at(Complex64::new(0.0, omega))
    }

    /// `H(s)` at an arbitrary complex point.
    pub fn eval_at(&self, s: Complex64) -> Result<DMatrix<Complex64>> {
        let n = self.h.nrows();
        if n == 0 {
            return Ok(self.d.clone());
        }
        let x = self.solve_shifted(s)?;
        Ok(&self.cq * x + &self.d)
    }

    /// `(s I - h)⁻¹ bq` by Gaussian elimination with adjacent-row pivoting.
    fn solve_shifted(&self, s: Complex64) -> Result<DMatrix<Complex64>> {
        let n = self.h.nrows();
        let mut m = DMatrix::<Complex64>::from_fn(n, n, |i, j| {
            let v = Complex64::new(-self.h[(i, j)], 0.0);
            if i == j { v + s } else { v }
        });
        let mut x = self.bq.clone();
        let ncols = x.ncols();
        let tiny = 1e-14 * (self.scale + s.norm());
        for k in 0..n {
            if k + 1 < n && m[(k + 1, k)].norm() > m[(k, k)].norm() {
                m.swap_rows(k, k + 1);
                x.swap_rows(k, k + 1);
            }
            let piv = m[(k, k)];
            if piv.norm() <= tiny {
                return Err(Error::Singular(f64::INFINITY));
            }
            if k + 1 < n {
                let f = m[(k + 1, k)] / piv;
                if f != Complex64::new(0.0, 0.0) {
                    for j in k..n {
                        let v = m[(k, j)];
                        m[(k + 1, j)] -= f * v;
                    }
                    for j in 0..ncols {
                        let v = x[(k, j)];
                        x[(k + 1, j)] -= f * v;
                    }
                }
            }
        }
        for k in (0..n).rev() {
            for j in 0..ncols {
                let mut acc = x[(k, j)];
                for l in k + 1..n {
                    acc -= m[(k, l)] * x[(l, j)];
                }
                x[(k, j)] = acc / m[(k, k)];
            }
        }
        Ok(x)
    }
}

/// Cascade: the output of `g1` drives `g2`, giving `g2(s) g1(s)`.
pub fn series(g1: &StateSpace, g2: &StateSpace) -> Result<StateSpace> {
    if g1.n_outputs() != g2.n_inputs() {
        return Err(Error::Dimension(format!(
            "series: first system has {} outputs, second has {} inputs",
            g1.n_outputs(),
            g2.n_inputs()
        )));
    }
    let (n1, n2) = (g1.order(), g2.order());
    let n = n1 + n2;
    let mut a = DMatrix::zeros(n, n);
    a.view_mut((0, 0), (n1, n1)).copy_from(&g1.a);
    a.view_mut((n1, 0), (n2, n1)).copy_from(&(&g2.b * &g1.c));
    a.view_mut((n1, n1), (n2, n2)).copy_from(&g2.a);
    let mut b = DMatrix::zeros(n, g1.n_inputs());
    b.view_mut((0, 0), (n1, g1.n_inputs())).copy_from(&g1.b);
    b.view_mut((n1, 0), (n2, g1.n_inputs())).copy_from(&(&g2.b * &g1.d));
    let mut c = DMatrix::zeros(g2.n_outputs(), n);
    c.view_mut((0, 0), (g2.n_outputs(), n1)).copy_from(&(&g2.d * &g1.c));
    c.view_mut((0, n1), (g2.n_outputs(), n2)).copy_from(&g2.c);
    StateSpace::new(a, b, c, &g2.d * &g1.d)
}

/// Block-diagonal stacking: inputs and outputs are concatenated.
pub fn append_diag(gs: &[StateSpace]) -> Result<StateSpace> {
    if gs.is_empty() {
        return Err(Error::Domain("append_diag needs at least one system".into()));
    }
    let n: usize = gs.iter().map(StateSpace::order).sum();
    let m: usize = gs.iter().map(StateSpace::n_inputs).sum();
    let p: usize = gs.iter().map(StateSpace::n_outputs).sum();
    let (mut a, mut b, mut c, mut d) =
        (DMatrix::zeros(n, n), DMatrix::zeros(n, m), DMatrix::zeros(p, n), DMatrix::zeros(p, m));
    let (mut xi, mut ui, mut yi) = (0, 0, 0);
    for g in gs {
        let (gn, gm, gp) = (g.order(), g.n_inputs(), g.n_outputs());
        a.view_mut((xi, xi), (gn, gn)).copy_from(&g.a);
        b.view_mut((xi, ui), (gn, gm)).copy_from(&g.b);
        c.view_mut((yi, xi), (gp, gn)).copy_from(&g.c);
        d.view_mut((yi, ui), (gp, gm)).copy_from(&g.d);
        xi += gn;
        ui += gm;
        yi += gp;
    }
    StateSpace::new(a, b, c, d)
}

/// A system whose inputs and outputs are split into ordered channels,
/// e.g. inputs `[w, u]` and outputs `[z, y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedSystem {
    sys: StateSpace,
    input_partition: Vec<usize>,
    output_partition: Vec<usize>,
}

impl PartitionedSystem {
    pub fn new(sys: StateSpace, input_partition: Vec<usize>, output_partition: Vec<usize>) -> Result<Self> {
        if input_partition.iter().sum::<usize>() != sys.n_inputs() {
            return Err(Error::Dimension(format!(
                "input partition {input_partition:?} does not sum to {}",
                sys.n_inputs()
            )));
        }
        if output_partition.iter().sum::<usize>() != sys.n_outputs() {
            return Err(Error::Dimension(format!(
                "output partition {output_partition:?} does not sum to {}",
                sys.n_outputs()
            )));
        }
        Ok(Self { sys, input_partition, output_partition })
    }

    pub fn sys(&self) -> &StateSpace {
        &self.sys
    }
    pub fn input_partition(&self) -> &[usize] {
        &self.input_partition
    }
    pub fn output_partition(&self) -> &[usize] {
        &self.output_partition
    }

    fn offsets(parts: &[usize], idx: usize) -> Result<std::ops::Range<usize>> {
        if idx >= parts.len() {
            return Err(Error::Dimension(format!("channel {idx} out of range")));
        }
        let start: usize = parts[..idx].iter().sum();
        Ok(start..start + parts[idx])
    }

    /// Input index range of channel `idx`.
    pub fn input_range(&self, idx: usize) -> Result<std::ops::Range<usize>> {
        Self::offsets(&self.input_partition, idx)
    }

    /// Output index range of channel `idx`.
    pub fn output_range(&self, idx: usize) -> Result<std::ops::Range<usize>> {
        Self::offsets(&self.output_partition, idx)
    }

    /// Subsystem from input channel `input` to output channel `output`.
    pub fn channel(&self, output: usize, input: usize) -> Result<StateSpace> {
        let rows: Vec<usize> = self.output_range(output)?.collect();
        let cols: Vec<usize> = self.input_range(input)?.collect();
        self.sys.select(&rows, &cols)
    }
}
