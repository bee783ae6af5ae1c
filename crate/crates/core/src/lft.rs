//! Linear fractional transformations and the structured controller block.
//!
//! A parametric controller is stored as one static matrix
//!
//! ```text
//!       [ A_K   B_w   B_u  ]   n_k rows
//!   K = [ C_z   D_zw  D_zu ]   n_delta rows
//!       [ C_y   D_yw  D_yu ]   n_u rows
//!         n_k  n_delta n_y
//! ```
//!
//! Closing the first block channel with an integrator `(1/s) I` gives a
//! dynamic system with a parameter channel; closing that channel with
//! `Δ = ρ I` gives the controller `K★(s, ρ)` at a frozen parameter value.

use std::fmt::Write as _;

use nalgebra::{ComplexField, DMatrix};

use crate::error::{Error, Result};
use crate::matops;
use crate::statespace::{parse_header, write_rows, DataLines, PartitionedSystem, StateSpace};

/// Condition number of `I - M11 Δ` (or `I - D_K D22`) above which an LFT is ill-posed.
pub const ILL_POSED_CONDITION: f64 = 1e12;

/// Solve `a x = b` where `a` is the loop matrix of an LFT closure.
fn loop_solve<T>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>>
where
    T: ComplexField<RealField = f64>,
{
    match matops::solve_with_condition(a, b) {
        Ok((x, cond)) if cond <= ILL_POSED_CONDITION => Ok(x),
        Ok(_) | Err(Error::Singular(_)) => Err(Error::IllPosed { index: None }),
        Err(e) => Err(e),
    }
}

/// Upper LFT `Fu(M, Δ) = M22 + M21 Δ (I - M11 Δ)⁻¹ M12`.
///
/// The partition of `m` is read off `delta`: for a `p x q` block `Δ`,
/// `M11` is `q x p`.
pub fn upper_lft_matrix<T>(m: &DMatrix<T>, delta: &DMatrix<T>) -> Result<DMatrix<T>>
where
    T: ComplexField<RealField = f64>,
{
    let (p, q) = delta.shape();
    if m.nrows() < q || m.ncols() < p {
        return Err(Error::Dimension(format!(
            "Δ is {p}x{q} but M is only {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let (r, c) = (m.nrows() - q, m.ncols() - p);
    let m11 = m.view((0, 0), (q, p));
    let m12 = m.view((0, p), (q, c));
    let m21 = m.view((q, 0), (r, p));
    let m22 = m.view((q, p), (r, c));
    let loop_mat = DMatrix::<T>::identity(q, q) - m11 * delta;
    let x = loop_solve(&loop_mat, &m12.into_owned())?;
    Ok(m22.into_owned() + m21 * delta * x)
}

/// Lower LFT `Fl(P, K) = P11 + P12 K (I - P22 K)⁻¹ P21`.
///
/// For a `p x q` block `K`, `P22` is the trailing `q x p` block of `P`.
pub fn lower_lft_matrix<T>(pm: &DMatrix<T>, k: &DMatrix<T>) -> Result<DMatrix<T>>
where
    T: ComplexField<RealField = f64>,
{
    let (p, q) = k.shape();
    if pm.nrows() < q || pm.ncols() < p {
        return Err(Error::Dimension(format!(
            "K is {p}x{q} but P is only {}x{}",
            pm.nrows(),
            pm.ncols()
        )));
    }
    let (r, c) = (pm.nrows() - q, pm.ncols() - p);
    let p11 = pm.view((0, 0), (r, c));
    let p12 = pm.view((0, c), (r, p));
    let p21 = pm.view((r, 0), (q, c));
    let p22 = pm.view((r, c), (q, p));
    let loop_mat = DMatrix::<T>::identity(q, q) - p22 * k;
    let x = loop_solve(&loop_mat, &p21.into_owned())?;
    Ok(p11.into_owned() + p12 * k * x)
}

fn require_two_channels(p: &PartitionedSystem) -> Result<()> {
    if p.input_partition().len() != 2 || p.output_partition().len() != 2 {
        return Err(Error::Dimension(
            "plant must be partitioned as [w; u] -> [z; y]".into(),
        ));
    }
    Ok(())
}

/// Closed loop `w -> z` of the plant `[w; u] -> [z; y]` with feedback `u = K y`.
pub fn lower_lft_ss(p: &PartitionedSystem, k: &StateSpace) -> Result<StateSpace> {
    require_two_channels(p)?;
    let (nw, nu) = (p.input_partition()[0], p.input_partition()[1]);
    let (nz, ny) = (p.output_partition()[0], p.output_partition()[1]);
    if k.n_inputs() != ny || k.n_outputs() != nu {
        return Err(Error::Dimension(format!(
            "controller is {}x{}, plant needs {nu}x{ny}",
            k.n_outputs(),
            k.n_inputs()
        )));
    }
    let sys = p.sys();
    let np = sys.order();
    let nk = k.order();
    let b1 = sys.b().columns(0, nw);
    let b2 = sys.b().columns(nw, nu);
    let c1 = sys.c().rows(0, nz);
    let c2 = sys.c().rows(nz, ny);
    let d11 = sys.d().view((0, 0), (nz, nw));
    let d12 = sys.d().view((0, nw), (nz, nu));
    let d21 = sys.d().view((nz, 0), (ny, nw));
    let d22 = sys.d().view((nz, nw), (ny, nu));
    let (ak, bk, ck, dk) = (k.a(), k.b(), k.c(), k.d());

    // (I - Dk D22) u = Dk C2 x + Ck xk + Dk D21 w
    let e_mat = DMatrix::<f64>::identity(nu, nu) - dk * d22;
    let mut rhs = DMatrix::<f64>::zeros(nu, np + nk + nw);
    rhs.view_mut((0, 0), (nu, np)).copy_from(&(dk * c2));
    rhs.view_mut((0, np), (nu, nk)).copy_from(ck);
    rhs.view_mut((0, np + nk), (nu, nw)).copy_from(&(dk * d21));
    let u_map = loop_solve(&e_mat, &rhs)?;
    let ux = u_map.columns(0, np);
    let uk = u_map.columns(np, nk);
    let uw = u_map.columns(np + nk, nw);

    let n = np + nk;
    let mut a = DMatrix::zeros(n, n);
    a.view_mut((0, 0), (np, np)).copy_from(&(sys.a() + b2 * ux));
    a.view_mut((0, np), (np, nk)).copy_from(&(b2 * uk));
    a.view_mut((np, 0), (nk, np)).copy_from(&(bk * (c2 + d22 * ux)));
    a.view_mut((np, np), (nk, nk)).copy_from(&(ak + bk * d22 * uk));
    let mut b = DMatrix::zeros(n, nw);
    b.view_mut((0, 0), (np, nw)).copy_from(&(b1 + b2 * uw));
    b.view_mut((np, 0), (nk, nw)).copy_from(&(bk * (d21 + d22 * uw)));
    let mut c = DMatrix::zeros(nz, n);
    c.view_mut((0, 0), (nz, np)).copy_from(&(c1 + d12 * ux));
    c.view_mut((0, np), (nz, nk)).copy_from(&(d12 * uk));
    let d = d11 + d12 * uw;
    StateSpace::new(a, b, c, d)
}

/// Close the first channel of `p` (`[w_Δ; y] -> [z_Δ; u]`) with a static `Δ`.
pub fn upper_lft_static(p: &PartitionedSystem, delta: &DMatrix<f64>) -> Result<StateSpace> {
    require_two_channels(p)?;
    let (nwd, ny) = (p.input_partition()[0], p.input_partition()[1]);
    let (nzd, nu) = (p.output_partition()[0], p.output_partition()[1]);
    if delta.shape() != (nwd, nzd) {
        return Err(Error::Dimension(format!(
            "Δ is {}x{}, expected {nwd}x{nzd}",
            delta.nrows(),
            delta.ncols()
        )));
    }
    let sys = p.sys();
    let bw = sys.b().columns(0, nwd);
    let by = sys.b().columns(nwd, ny);
    let cz = sys.c().rows(0, nzd);
    let cu = sys.c().rows(nzd, nu);
    let d11 = sys.d().view((0, 0), (nzd, nwd));
    let d12 = sys.d().view((0, nwd), (nzd, ny));
    let d21 = sys.d().view((nzd, 0), (nu, nwd));
    let d22 = sys.d().view((nzd, nwd), (nu, ny));
    // w_Δ = Δ z_Δ, z_Δ = (I - D11 Δ)⁻¹ (Cz x + D12 y)
    let loop_mat = DMatrix::<f64>::identity(nzd, nzd) - d11 * delta;
    let n = sys.order();
    let mut rhs = DMatrix::zeros(nzd, n + ny);
    rhs.view_mut((0, 0), (nzd, n)).copy_from(&cz);
    rhs.view_mut((0, n), (nzd, ny)).copy_from(&d12);
    let zmap = loop_solve(&loop_mat, &rhs)?;
    let wmap = delta * zmap;
    let wx = wmap.columns(0, n);
    let wy = wmap.columns(n, ny);
    StateSpace::new(sys.a() + bw * wx, by + bw * wy, cu + d21 * wx, d22 + d21 * wy)
}

/// Role of one entry of the controller matrix during optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntryKind {
    /// Pinned to exactly zero.
    Zero,
    /// Tuned by the optimizer.
    Free,
    /// Kept at its current value.
    Frozen,
}

impl EntryKind {
    fn code(self) -> u8 {
        match self {
            EntryKind::Zero => 0,
            EntryKind::Free => 1,
            EntryKind::Frozen => 2,
        }
    }

    fn from_code(c: &str) -> Option<Self> {
        match c {
            "0" => Some(EntryKind::Zero),
            "1" => Some(EntryKind::Free),
            "2" => Some(EntryKind::Frozen),
            _ => None,
        }
    }
}

/// Dimensions of a structured parametric controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockDims {
    pub n_k: usize,
    pub n_delta: usize,
    pub n_u: usize,
    pub n_y: usize,
}

impl BlockDims {
    pub fn rows(&self) -> usize {
        self.n_k + self.n_delta + self.n_u
    }
    pub fn cols(&self) -> usize {
        self.n_k + self.n_delta + self.n_y
    }
}

/// Names the nine blocks of the controller matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Ak,
    Bw,
    Bu,
    Cz,
    Dzw,
    Dzu,
    Cy,
    Dyw,
    Dyu,
}

impl Block {
    pub const ALL: [Block; 9] = [
        Block::Ak,
        Block::Bw,
        Block::Bu,
        Block::Cz,
        Block::Dzw,
        Block::Dzu,
        Block::Cy,
        Block::Dyw,
        Block::Dyu,
    ];

    /// Blocks that couple the controller to the parameter channel.
    pub fn is_delta_coupled(self) -> bool {
        matches!(self, Block::Bw | Block::Cz | Block::Dzw | Block::Dzu | Block::Dyw)
    }

    /// `(row0, col0, rows, cols)` inside the full matrix.
    pub fn region(self, d: &BlockDims) -> (usize, usize, usize, usize) {
        let r = [0, d.n_k, d.n_k + d.n_delta];
        let rs = [d.n_k, d.n_delta, d.n_u];
        let c = [0, d.n_k, d.n_k + d.n_delta];
        let cs = [d.n_k, d.n_delta, d.n_y];
        let (i, j) = match self {
            Block::Ak => (0, 0),
            Block::Bw => (0, 1),
            Block::Bu => (0, 2),
            Block::Cz => (1, 0),
            Block::Dzw => (1, 1),
            Block::Dzu => (1, 2),
            Block::Cy => (2, 0),
            Block::Dyw => (2, 1),
            Block::Dyu => (2, 2),
        };
        (r[i], c[j], rs[i], cs[j])
    }
}

/// Static repeated-scalar parameter block `Δ = ρ I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaSpec {
    pub n_delta: usize,
    pub value: f64,
}

impl DeltaSpec {
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::identity(self.n_delta, self.n_delta) * self.value
    }
}

/// The structured controller matrix together with its free/frozen/zero mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerBlock {
    dims: BlockDims,
    k: DMatrix<f64>,
    mask: DMatrix<EntryKind>,
}

impl ControllerBlock {
    pub fn new(dims: BlockDims, k: DMatrix<f64>, mask: DMatrix<EntryKind>) -> Result<Self> {
        let shape = (dims.rows(), dims.cols());
        if k.shape() != shape || mask.shape() != shape {
            return Err(Error::Dimension(format!(
                "controller matrix must be {}x{}, got K {:?} and mask {:?}",
                shape.0,
                shape.1,
                k.shape(),
                mask.shape()
            )));
        }
        matops::check_finite(&k, "K")?;
        if k.iter().zip(mask.iter()).any(|(v, m)| *m == EntryKind::Zero && *v != 0.0) {
            return Err(Error::Domain("zero-masked entry of K is nonzero".into()));
        }
        Ok(Self { dims, k, mask })
    }

    /// All-zero matrix with every entry free.
    pub fn zeros(dims: BlockDims) -> Self {
        let (r, c) = (dims.rows(), dims.cols());
        Self {
            dims,
            k: DMatrix::zeros(r, c),
            mask: DMatrix::from_element(r, c, EntryKind::Free),
        }
    }

    pub fn dims(&self) -> BlockDims {
        self.dims
    }
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }
    pub fn mask(&self) -> &DMatrix<EntryKind> {
        &self.mask
    }

    /// Replace the mask, zeroing entries it pins.
    pub fn with_mask(mut self, mask: DMatrix<EntryKind>) -> Result<Self> {
        if mask.shape() != self.k.shape() {
            return Err(Error::Dimension("mask shape does not match K".into()));
        }
        for (v, m) in self.k.iter_mut().zip(mask.iter()) {
            if *m == EntryKind::Zero {
                *v = 0.0;
            }
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn block(&self, which: Block) -> DMatrix<f64> {
        let (r, c, nr, nc) = which.region(&self.dims);
        self.k.view((r, c), (nr, nc)).into_owned()
    }

    /// Overwrite one block; entries masked zero stay zero.
    pub fn set_block(&mut self, which: Block, value: &DMatrix<f64>) -> Result<()> {
        let (r, c, nr, nc) = which.region(&self.dims);
        if value.shape() != (nr, nc) {
            return Err(Error::Dimension(format!(
                "block {which:?} is {nr}x{nc}, got {:?}",
                value.shape()
            )));
        }
        matops::check_finite(value, "block")?;
        for i in 0..nr {
            for j in 0..nc {
                if self.mask[(r + i, c + j)] != EntryKind::Zero {
                    self.k[(r + i, c + j)] = value[(i, j)];
                }
            }
        }
        Ok(())
    }

    /// Column-major linear indices of the free entries.
    pub fn free_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, m)| **m == EntryKind::Free)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn free_params(&self) -> Vec<f64> {
        self.free_indices().into_iter().map(|i| self.k.as_slice()[i]).collect()
    }

    pub fn set_free_params(&mut self, theta: &[f64]) -> Result<()> {
        let idx = self.free_indices();
        if idx.len() != theta.len() {
            return Err(Error::Dimension(format!(
                "expected {} free parameters, got {}",
                idx.len(),
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("free parameters"));
        }
        let data = self.k.as_mut_slice();
        for (i, v) in idx.into_iter().zip(theta) {
            data[i] = *v;
        }
        Ok(())
    }

    pub fn with_free_params(&self, theta: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.set_free_params(theta)?;
        Ok(out)
    }

    /// Serialize: header `n_k n_delta n_u n_y`, the rows of K, then the mask
    /// rows (0 = zero, 1 = free, 2 = frozen).
    pub fn to_text(&self) -> String {
        let d = self.dims;
        let mut s = String::new();
        let _ = writeln!(s, "{} {} {} {}", d.n_k, d.n_delta, d.n_u, d.n_y);
        write_rows(&mut s, &self.k);
        for i in 0..self.mask.nrows() {
            let row: Vec<String> = (0..self.mask.ncols())
                .map(|j| self.mask[(i, j)].code().to_string())
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = DataLines::new(text);
        let (line, header) = lines
            .next_values()?
            .ok_or(Error::Parse { line: 1, msg: "missing header".into() })?;
        let h = parse_header::<4>(line, &header)?;
        let dims = BlockDims { n_k: h[0], n_delta: h[1], n_u: h[2], n_y: h[3] };
        let k = lines.read_block("K", dims.rows(), dims.cols())?;
        let mut mask = DMatrix::from_element(dims.rows(), dims.cols(), EntryKind::Free);
        for i in 0..dims.rows() {
            let (line, toks) = lines.next_values()?.ok_or_else(|| Error::Parse {
                line: lines.line_no() + 1,
                msg: format!("unexpected end of file: block mask is missing row {}", i + 1),
            })?;
            if toks.len() != dims.cols() {
                return Err(Error::Parse {
                    line,
                    msg: format!("mask row {} has {} entries, expected {}", i + 1, toks.len(), dims.cols()),
                });
            }
            for (j, t) in toks.iter().enumerate() {
                mask[(i, j)] = EntryKind::from_code(t).ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("invalid mask code '{t}'"),
                })?;
            }
        }
        lines.expect_end()?;
        Self::new(dims, k, mask).map_err(|e| Error::Parse { line: lines.line_no(), msg: e.to_string() })
    }
}

/// Number of free entries in the mask.
pub fn count_free_params(kb: &ControllerBlock) -> usize {
    kb.mask.iter().filter(|m| **m == EntryKind::Free).count()
}

/// Close the integrator channel: states `n_k`, inputs `[w_Δ; y]`, outputs `[z_Δ; u]`.
pub fn close_integrator(kb: &ControllerBlock) -> PartitionedSystem {
    let d = kb.dims;
    let k = &kb.k;
    let a = k.view((0, 0), (d.n_k, d.n_k)).into_owned();
    let b = k.view((0, d.n_k), (d.n_k, d.n_delta + d.n_y)).into_owned();
    let c = k.view((d.n_k, 0), (d.n_delta + d.n_u, d.n_k)).into_owned();
    let dd = k.view((d.n_k, d.n_k), (d.n_delta + d.n_u, d.n_delta + d.n_y)).into_owned();
    let sys = StateSpace::new(a, b, c, dd).expect("controller block has consistent dimensions");
    PartitionedSystem::new(sys, vec![d.n_delta, d.n_y], vec![d.n_delta, d.n_u])
        .expect("partition matches block dimensions")
}

/// Realization of `K★(s, ρ)` with `Δ = ρ I`.
///
/// With `M = (I - D_zw Δ)⁻¹` the realization is
/// `(A_K + B_w Δ M C_z, B_u + B_w Δ M D_zu, C_y + D_yw Δ M C_z, D_yu + D_yw Δ M D_zu)`.
pub fn eval_controller(kb: &ControllerBlock, rho: f64) -> Result<StateSpace> {
    let d = kb.dims;
    let ak = kb.block(Block::Ak);
    let bu = kb.block(Block::Bu);
    let cy = kb.block(Block::Cy);
    let dyu = kb.block(Block::Dyu);
    if d.n_delta == 0 || rho == 0.0 {
        return StateSpace::new(ak, bu, cy, dyu);
    }
    let bw = kb.block(Block::Bw);
    let cz = kb.block(Block::Cz);
    let dzw = kb.block(Block::Dzw);
    let dzu = kb.block(Block::Dzu);
    let dyw = kb.block(Block::Dyw);
    let nd = d.n_delta;
    let loop_mat = DMatrix::<f64>::identity(nd, nd) - &dzw * rho;
    // Δ M [C_z D_zu]
    let mut rhs = DMatrix::zeros(nd, d.n_k + d.n_y);
    rhs.view_mut((0, 0), (nd, d.n_k)).copy_from(&cz);
    rhs.view_mut((0, d.n_k), (nd, d.n_y)).copy_from(&dzu);
    let corr = loop_solve(&loop_mat, &rhs)? * rho;
    let cx = corr.columns(0, d.n_k);
    let cu = corr.columns(d.n_k, d.n_y);
    StateSpace::new(ak + &bw * cx, bu + &bw * cu, cy + &dyw * cx, dyu + &dyw * cu)
}
