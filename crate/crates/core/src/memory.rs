//! Key/value memory: the dense FFN, its block-chunked view, sparse
//! application of a block selection, and mixture-of-experts evaluated either
//! expert by expert or as one stacked memory.

use crate::error::{shape, Error, Result};
use crate::tensor::{axpy, dot, gelu, Matrix};

/// Shape record of one memory layer.
///
/// `d` is the model width, `d_m` the number of memory cells, `g` the block
/// size and `k` the number of active cells. Blocks: `B = d_m / g`; active
/// blocks: `b = k / g`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryGeometry {
    d: usize,
    d_m: usize,
    g: usize,
    k: usize,
}

impl MemoryGeometry {
    pub fn new(d: usize, d_m: usize, g: usize, k: usize) -> Result<Self> {
        if d == 0 || d_m == 0 || g == 0 || k == 0 {
            return Err(Error::Geometry(format!(
                "all of d={d}, d_m={d_m}, g={g}, k={k} must be positive"
            )));
        }
        if d_m % g != 0 {
            return Err(Error::Geometry(format!(
                "block size g={g} does not divide d_m={d_m}"
            )));
        }
        if k % g != 0 {
            return Err(Error::Geometry(format!(
                "block size g={g} does not divide k={k}"
            )));
        }
        if k > d_m {
            return Err(Error::Geometry(format!("k={k} exceeds d_m={d_m}")));
        }
        Ok(Self { d, d_m, g, k })
    }

    /// Geometry with `d_m = multiplier · 4 · d`.
    pub fn with_multiplier(d: usize, multiplier: usize, g: usize, k: usize) -> Result<Self> {
        Self::new(d, multiplier * 4 * d, g, k)
    }

    /// The cell-level view: same memory with `g = 1`, `k` cells active.
    pub fn cells(&self, k: usize) -> Result<Self> {
        Self::new(self.d, self.d_m, 1, k)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn memory_size(&self) -> usize {
        self.d_m
    }

    pub fn block_size(&self) -> usize {
        self.g
    }

    pub fn active_cells(&self) -> usize {
        self.k
    }

    /// `B = d_m / g`.
    pub fn num_blocks(&self) -> usize {
        self.d_m / self.g
    }

    /// `b = k / g`.
    pub fn active_blocks(&self) -> usize {
        self.k / self.g
    }

    /// `E = d_m / (4·d)`; fractional when `d_m` is not a multiple of `4·d`.
    pub fn size_multiplier(&self) -> f64 {
        self.d_m as f64 / (4 * self.d) as f64
    }

    /// Rows of block `i` in a `d_m`-row table.
    pub fn block_rows(&self, block: usize) -> std::ops::Range<usize> {
        block * self.g..(block + 1) * self.g
    }

    pub(crate) fn check_table(&self, name: &str, t: &Matrix) -> Result<()> {
        if t.rows() != self.d_m || t.cols() != self.d {
            return Err(shape(
                "memory",
                format!(
                    "{name} table is {}x{}, geometry needs {}x{}",
                    t.rows(),
                    t.cols(),
                    self.d_m,
                    self.d
                ),
            ));
        }
        Ok(())
    }
}

/// The value table `V ∈ R^{d_m × d}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable(Matrix);

impl ValueTable {
    pub fn new(values: Matrix) -> Self {
        Self(values)
    }

    /// Wraps `values` after checking it against `geometry`.
    pub fn for_geometry(values: Matrix, geometry: &MemoryGeometry) -> Result<Self> {
        geometry.check_table("value", &values)?;
        Ok(Self(values))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }
}

/// Selected blocks with their relevance weights, kept in ascending block
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSelection {
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl BlockSelection {
    /// Unit-weight selection.
    pub fn hard(indices: Vec<usize>) -> Result<Self> {
        let weights = vec![1.0; indices.len()];
        Self::soft(indices, weights)
    }

    /// Weighted selection. Pairs are reordered by block index.
    pub fn soft(indices: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        if indices.len() != weights.len() {
            return Err(shape(
                "BlockSelection",
                format!("{} indices vs {} weights", indices.len(), weights.len()),
            ));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
            return Err(Error::NonFinite(format!("selection weight {w}")));
        }
        let mut pairs: Vec<(usize, f64)> = indices.into_iter().zip(weights).collect();
        pairs.sort_by_key(|p| p.0);
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidArgument("duplicate block index in selection".into()));
        }
        let (indices, weights) = pairs.into_iter().unzip();
        Ok(Self { indices, weights })
    }

    pub fn empty() -> Self {
        Self {
            indices: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.weights.iter().copied())
    }

    /// True when every weight is exactly one.
    pub fn is_hard(&self) -> bool {
        self.weights.iter().all(|&w| w == 1.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            indices: self.indices.clone(),
            weights: self.weights.iter().map(|w| w * factor).collect(),
        }
    }

    pub fn check(&self, num_blocks: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i >= num_blocks) {
            Some(&index) => Err(Error::BlockOutOfRange { index, num_blocks }),
            None => Ok(()),
        }
    }
}

fn check_vector(op: &'static str, x: &[f64], d: usize) -> Result<()> {
    if x.len() != d {
        return Err(shape(op, format!("input has {} entries, expected {d}", x.len())));
    }
    Ok(())
}

/// `y += weight · gelu(x·k_j) · v_j` for the cells in `rows`, in ascending
/// row order.
#[inline]
pub(crate) fn accumulate_cells(
    x: &[f64],
    keys: &Matrix,
    values: &Matrix,
    rows: std::ops::Range<usize>,
    weight: f64,
    y: &mut [f64],
) {
    for j in rows {
        let m = gelu(dot(x, keys.row(j)));
        axpy(weight * m, values.row(j), y);
    }
}

/// Dense FFN as a key/value memory: `y = Σ_i gelu(x·k_i)·v_i`.
pub fn dense_ffn(x: &[f64], keys: &Matrix, values: &ValueTable) -> Result<Vec<f64>> {
    let v = values.matrix();
    if keys.rows() != v.rows() || keys.cols() != v.cols() {
        return Err(shape(
            "dense_ffn",
            format!(
                "keys {}x{} vs values {}x{}",
                keys.rows(),
                keys.cols(),
                v.rows(),
                v.cols()
            ),
        ));
    }
    check_vector("dense_ffn", x, keys.cols())?;
    let mut y = vec![0.0; keys.cols()];
    accumulate_cells(x, keys, v, 0..keys.rows(), 1.0, &mut y);
    Ok(y)
}

/// Splits a `d_m`-row table into `d_m / g` contiguous row blocks.
pub fn chunk_blocks(table: &Matrix, g: usize) -> Result<Vec<Matrix>> {
    if g == 0 || table.rows() % g != 0 {
        return Err(Error::Geometry(format!(
            "block size {g} does not divide {} rows",
            table.rows()
        )));
    }
    Ok((0..table.rows() / g)
        .map(|i| table.slice_rows(i * g, (i + 1) * g))
        .collect())
}

/// Applies the memory restricted to the selected blocks:
/// `y = Σ_{i∈sel} w_i · Σ_j gelu(x·k_j^{(i)}) · v_j^{(i)}`.
///
/// Blocks are visited in ascending index order, cells in ascending order
/// within a block, so a full unit-weight selection reproduces [`dense_ffn`]
/// bit for bit.
pub fn sparse_apply(
    x: &[f64],
    keys: &Matrix,
    values: &ValueTable,
    selection: &BlockSelection,
    geometry: &MemoryGeometry,
) -> Result<Vec<f64>> {
    geometry.check_table("key", keys)?;
    geometry.check_table("value", values.matrix())?;
    check_vector("sparse_apply", x, geometry.d())?;
    selection.check(geometry.num_blocks())?;
    let mut y = vec![0.0; geometry.d()];
    for (block, weight) in selection.iter() {
        accumulate_cells(x, keys, values.matrix(), geometry.block_rows(block), weight, &mut y);
    }
    Ok(y)
}

/// One expert FFN with its own `g × d` key and value tables.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    pub keys: Matrix,
    pub values: Matrix,
}

fn check_experts(x: &[f64], experts: &[Expert], gate_weights: &[f64]) -> Result<usize> {
    if experts.len() != gate_weights.len() {
        return Err(shape(
            "moe",
            format!("{} experts vs {} gate weights", experts.len(), gate_weights.len()),
        ));
    }
    let Some(first) = experts.first() else {
        return Ok(0);
    };
    let (g, d) = first.keys.shape();
    for (i, e) in experts.iter().enumerate() {
        if e.keys.shape() != (g, d) || e.values.shape() != (g, d) {
            return Err(shape(
                "moe",
                format!("expert {i} tables differ from {g}x{d}"),
            ));
        }
    }
    check_vector("moe", x, d)?;
    Ok(d)
}

/// `Σ_i g_i(x) · FFN^{(i)}(x)`, one expert at a time.
pub fn moe_standard(x: &[f64], experts: &[Expert], gate_weights: &[f64]) -> Result<Vec<f64>> {
    let d = check_experts(x, experts, gate_weights)?;
    let mut y = vec![0.0; d.max(x.len())];
    for (expert, &w) in experts.iter().zip(gate_weights) {
        let out = dense_ffn(x, &expert.keys, &ValueTable::new(expert.values.clone()))?;
        axpy(w, &out, &mut y);
    }
    Ok(y)
}

/// The same mixture as one wide memory: experts are stacked along the cell
/// dimension and cell `l = i·g + j` gets coefficient `g_i(x) · gelu(x·k_j^{(i)})`.
pub fn moe_as_memory(x: &[f64], experts: &[Expert], gate_weights: &[f64]) -> Result<Vec<f64>> {
    let d = check_experts(x, experts, gate_weights)?;
    if experts.is_empty() {
        return Ok(vec![0.0; x.len()]);
    }
    let g = experts[0].keys.rows();
    let keys = Matrix::vstack(&experts.iter().map(|e| e.keys.clone()).collect::<Vec<_>>())?;
    let values = Matrix::vstack(&experts.iter().map(|e| e.values.clone()).collect::<Vec<_>>())?;
    let mut y = vec![0.0; d];
    for l in 0..keys.rows() {
        let coefficient = gate_weights[l / g] * gelu(dot(x, keys.row(l)));
        axpy(coefficient, values.row(l), &mut y);
    }
    Ok(y)
}
