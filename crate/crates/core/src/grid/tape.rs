//! Reverse-mode differentiation tape over [`Grid2D`] values.
//!
//! Operations on a [`Tape`] record append-only nodes (parents always precede
//! children) and cache forward values for the adjoint pass. Ops whose inputs
//! are all constants skip recording entirely and return a constant grid.
//! Scalars are represented as 1x1 grids, so the same node machinery covers
//! both field ops and the scalar arithmetic that assembles losses.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels;
use super::{Grid2D, GridError};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    Add { a: NodeId, b: NodeId },
    Hadamard { a: NodeId, b: NodeId },
    Scale { p: NodeId, factor: f64 },
    Offset { p: NodeId },
    MatMul { a: NodeId, b: NodeId },
    SoftmaxRows { p: NodeId },
    Sigmoid { p: NodeId },
    Sum { p: NodeId },
    DivScalar { num: NodeId, den: NodeId },
    Upsample { p: NodeId },
    Sobel { p: NodeId },
    StraightThrough { soft: NodeId },
    AvgPool { p: NodeId },
    StackChannels { parents: Vec<NodeId> },
    AttnColumn { p: NodeId, col: usize, cols: usize },
}

#[derive(Debug, Clone)]
struct Node {
    height: usize,
    width: usize,
    value: Vec<f64>,
    op: Op,
}

/// Gradients of a scalar root with respect to every gradient-requiring leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_node: BTreeMap<NodeId, Grid2D>,
    visited: usize,
}

impl Gradients {
    /// Gradient w.r.t. a leaf grid, if it required one.
    pub fn wrt(&self, leaf: &Grid2D) -> Option<&Grid2D> {
        leaf.node.and_then(|id| self.by_node.get(&id))
    }

    pub fn get(&self, id: NodeId) -> Option<&Grid2D> {
        self.by_node.get(&id)
    }

    /// Number of node visits performed by the backward pass.
    pub fn visited_nodes(&self) -> usize {
        self.visited
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Grid2D)> {
        self.by_node.iter().map(|(id, g)| (*id, g))
    }
}

/// Append-only operation tape confined to one run on one thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a gradient-requiring leaf holding a copy of `grid`'s value.
    pub fn watch(&mut self, grid: &Grid2D) -> Grid2D {
        let id = self.push(
            grid.height,
            grid.width,
            grid.data.clone(),
            Op::Leaf {
                requires_grad: true,
            },
        );
        self.grid_for(id)
    }

    /// Register a gradient-requiring leaf from raw data.
    pub fn leaf(&mut self, height: usize, width: usize, data: Vec<f64>) -> Result<Grid2D, GridError> {
        let grid = Grid2D::from_vec(height, width, data)?;
        Ok(self.watch(&grid))
    }

    fn push(&mut self, height: usize, width: usize, value: Vec<f64>, op: Op) -> NodeId {
        debug_assert!(value.iter().all(|v| v.is_finite()), "non-finite node value");
        let id = self.nodes.len();
        self.nodes.push(Node {
            height,
            width,
            value,
            op,
        });
        id
    }

    fn grid_for(&self, id: NodeId) -> Grid2D {
        let node = &self.nodes[id];
        Grid2D {
            height: node.height,
            width: node.width,
            data: node.value.clone(),
            node: Some(id),
        }
    }

    /// Node id for `grid`, lifting constants onto the tape as no-grad leaves.
    fn lift(&mut self, grid: &Grid2D) -> NodeId {
        match grid.node {
            Some(id) => id,
            None => self.push(
                grid.height,
                grid.width,
                grid.data.clone(),
                Op::Leaf {
                    requires_grad: false,
                },
            ),
        }
    }

    fn record(
        &mut self,
        height: usize,
        width: usize,
        value: Vec<f64>,
        op: Op,
    ) -> Grid2D {
        let id = self.push(height, width, value, op);
        self.grid_for(id)
    }

    // ── element-wise and scalar ops ──────────────────────────────────

    pub fn add(&mut self, a: &Grid2D, b: &Grid2D) -> Result<Grid2D, GridError> {
        if a.shape() != b.shape() {
            return Err(GridError::DimensionMismatch {
                op: "add",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let value: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        if a.node.is_none() && b.node.is_none() {
            return Grid2D::from_vec(a.height, a.width, value);
        }
        let (pa, pb) = (self.lift(a), self.lift(b));
        Ok(self.record(a.height, a.width, value, Op::Add { a: pa, b: pb }))
    }

    /// Element-wise product.
    pub fn hadamard(&mut self, a: &Grid2D, b: &Grid2D) -> Result<Grid2D, GridError> {
        if a.shape() != b.shape() {
            return Err(GridError::DimensionMismatch {
                op: "hadamard",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let value: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
        if a.node.is_none() && b.node.is_none() {
            return Grid2D::from_vec(a.height, a.width, value);
        }
        let (pa, pb) = (self.lift(a), self.lift(b));
        Ok(self.record(a.height, a.width, value, Op::Hadamard { a: pa, b: pb }))
    }

    /// Multiply every cell by a finite constant.
    pub fn scale(&mut self, g: &Grid2D, factor: f64) -> Grid2D {
        debug_assert!(factor.is_finite());
        let value: Vec<f64> = g.data.iter().map(|x| x * factor).collect();
        match g.node {
            None => Grid2D {
                height: g.height,
                width: g.width,
                data: value,
                node: None,
            },
            Some(p) => self.record(g.height, g.width, value, Op::Scale { p, factor }),
        }
    }

    /// Add a finite constant to every cell.
    pub fn offset(&mut self, g: &Grid2D, delta: f64) -> Grid2D {
        debug_assert!(delta.is_finite());
        let value: Vec<f64> = g.data.iter().map(|x| x + delta).collect();
        match g.node {
            None => Grid2D {
                height: g.height,
                width: g.width,
                data: value,
                node: None,
            },
            Some(p) => self.record(g.height, g.width, value, Op::Offset { p }),
        }
    }

    /// Full-grid sum as a 1x1 scalar grid.
    pub fn sum(&mut self, g: &Grid2D) -> Grid2D {
        let value = vec![g.data.iter().sum()];
        match g.node {
            None => Grid2D {
                height: 1,
                width: 1,
                data: value,
                node: None,
            },
            Some(p) => self.record(1, 1, value, Op::Sum { p }),
        }
    }

    /// Scalar division: both operands must be 1x1.
    pub fn div_scalar(&mut self, num: &Grid2D, den: &Grid2D) -> Result<Grid2D, GridError> {
        if !num.is_scalar() || !den.is_scalar() {
            return Err(GridError::DimensionMismatch {
                op: "div_scalar",
                lhs: num.shape(),
                rhs: den.shape(),
            });
        }
        let d = den.data[0];
        if d == 0.0 {
            return Err(GridError::NonFinite { op: "div_scalar" });
        }
        let value = vec![num.data[0] / d];
        if num.node.is_none() && den.node.is_none() {
            return Grid2D::from_vec(1, 1, value);
        }
        let (pn, pd) = (self.lift(num), self.lift(den));
        Ok(self.record(1, 1, value, Op::DivScalar { num: pn, den: pd }))
    }

    // ── matrix and field ops ─────────────────────────────────────────

    pub fn matmul(&mut self, a: &Grid2D, b: &Grid2D) -> Result<Grid2D, GridError> {
        if a.width != b.height {
            return Err(GridError::DimensionMismatch {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let value = kernels::matmul(&a.data, a.height, a.width, &b.data, b.width);
        if a.node.is_none() && b.node.is_none() {
            return Grid2D::from_vec(a.height, b.width, value);
        }
        let (pa, pb) = (self.lift(a), self.lift(b));
        Ok(self.record(a.height, b.width, value, Op::MatMul { a: pa, b: pb }))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, m: &Grid2D) -> Grid2D {
        let value = kernels::softmax_rows(&m.data, m.height, m.width);
        match m.node {
            None => Grid2D {
                height: m.height,
                width: m.width,
                data: value,
                node: None,
            },
            Some(p) => self.record(m.height, m.width, value, Op::SoftmaxRows { p }),
        }
    }

    pub fn sigmoid(&mut self, g: &Grid2D) -> Grid2D {
        let value: Vec<f64> = g.data.iter().map(|&x| kernels::sigmoid(x)).collect();
        match g.node {
            None => Grid2D {
                height: g.height,
                width: g.width,
                data: value,
                node: None,
            },
            Some(p) => self.record(g.height, g.width, value, Op::Sigmoid { p }),
        }
    }

    /// Corner-aligned bilinear resampling to (out_h, out_w).
    pub fn upsample_bilinear(
        &mut self,
        g: &Grid2D,
        out_h: usize,
        out_w: usize,
    ) -> Result<Grid2D, GridError> {
        if out_h == 0 || out_w == 0 {
            return Err(GridError::InvalidSize {
                op: "upsample_bilinear",
                height: out_h,
                width: out_w,
            });
        }
        let value = kernels::upsample_bilinear(&g.data, g.height, g.width, out_h, out_w);
        match g.node {
            None => Grid2D::from_vec(out_h, out_w, value),
            Some(p) => Ok(self.record(out_h, out_w, value, Op::Upsample { p })),
        }
    }

    /// Sobel edge magnitude with replicate-padded borders.
    pub fn sobel(&mut self, g: &Grid2D) -> Result<Grid2D, GridError> {
        if g.height < 3 || g.width < 3 {
            return Err(GridError::InvalidSize {
                op: "sobel",
                height: g.height,
                width: g.width,
            });
        }
        let value = kernels::sobel_magnitude(&g.data, g.height, g.width);
        match g.node {
            None => Grid2D::from_vec(g.height, g.width, value),
            Some(p) => Ok(self.record(g.height, g.width, value, Op::Sobel { p })),
        }
    }

    /// Forward value of `hard`, gradient of `soft`.
    pub fn straight_through(&mut self, hard: &Grid2D, soft: &Grid2D) -> Result<Grid2D, GridError> {
        if hard.shape() != soft.shape() {
            return Err(GridError::DimensionMismatch {
                op: "straight_through",
                lhs: hard.shape(),
                rhs: soft.shape(),
            });
        }
        match soft.node {
            None => Grid2D::from_vec(hard.height, hard.width, hard.data.clone()),
            Some(soft_id) => Ok(self.record(
                hard.height,
                hard.width,
                hard.data.clone(),
                Op::StraightThrough { soft: soft_id },
            )),
        }
    }

    /// Average pooling to (out_h, out_w); sizes must divide evenly.
    pub fn avg_pool(&mut self, g: &Grid2D, out_h: usize, out_w: usize) -> Result<Grid2D, GridError> {
        if out_h == 0 || out_w == 0 || g.height % out_h != 0 || g.width % out_w != 0 {
            return Err(GridError::InvalidSize {
                op: "avg_pool",
                height: out_h,
                width: out_w,
            });
        }
        let (fh, fw) = (g.height / out_h, g.width / out_w);
        let inv = 1.0 / (fh * fw) as f64;
        let mut value = vec![0.0; out_h * out_w];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for dy in 0..fh {
                    for dx in 0..fw {
                        acc += g.data[(oy * fh + dy) * g.width + (ox * fw + dx)];
                    }
                }
                value[oy * out_w + ox] = acc * inv;
            }
        }
        match g.node {
            None => Grid2D::from_vec(out_h, out_w, value),
            Some(p) => Ok(self.record(out_h, out_w, value, Op::AvgPool { p })),
        }
    }

    /// Flatten C same-shape grids into an (h*w) x C matrix, one column per
    /// grid, pixel-major rows.
    pub fn stack_channels(&mut self, grids: &[Grid2D]) -> Result<Grid2D, GridError> {
        let first = grids.first().ok_or(GridError::InvalidSize {
            op: "stack_channels",
            height: 0,
            width: 0,
        })?;
        let (h, w) = first.shape();
        for g in grids {
            if g.shape() != (h, w) {
                return Err(GridError::DimensionMismatch {
                    op: "stack_channels",
                    lhs: (h, w),
                    rhs: g.shape(),
                });
            }
        }
        let channels = grids.len();
        let mut value = vec![0.0; h * w * channels];
        for (c, g) in grids.iter().enumerate() {
            for p in 0..h * w {
                value[p * channels + c] = g.data[p];
            }
        }
        if grids.iter().all(|g| g.node.is_none()) {
            return Grid2D::from_vec(h * w, channels, value);
        }
        let parents: Vec<NodeId> = grids.iter().map(|g| self.lift(g)).collect();
        Ok(self.record(h * w, channels, value, Op::StackChannels { parents }))
    }

    /// Column `col` of an (h*w) x N matrix, reshaped to an h x w grid.
    pub fn attention_column(
        &mut self,
        a: &Grid2D,
        col: usize,
        h: usize,
        w: usize,
    ) -> Result<Grid2D, GridError> {
        if col >= a.width || a.height != h * w {
            return Err(GridError::DimensionMismatch {
                op: "attention_column",
                lhs: a.shape(),
                rhs: (h * w, col),
            });
        }
        let cols = a.width;
        let value: Vec<f64> = (0..h * w).map(|p| a.data[p * cols + col]).collect();
        match a.node {
            None => Grid2D::from_vec(h, w, value),
            Some(p) => Ok(self.record(h, w, value, Op::AttnColumn { p, col, cols })),
        }
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse accumulation from a scalar root. Visits every node at or
    /// before the root exactly once and returns gradients for each
    /// gradient-requiring leaf.
    pub fn backward(&self, root: &Grid2D) -> Result<Gradients, GridError> {
        let root_id = root.node.ok_or(GridError::DetachedRoot)?;
        let root_node = &self.nodes[root_id];
        if root_node.height != 1 || root_node.width != 1 {
            return Err(GridError::NonScalarRoot {
                height: root_node.height,
                width: root_node.width,
            });
        }

        let mut grad: Vec<Option<Vec<f64>>> = vec![None; root_id + 1];
        grad[root_id] = Some(vec![1.0]);
        let mut visited = 0usize;

        for id in (0..=root_id).rev() {
            visited += 1;
            let Some(d) = grad[id].clone() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf { .. } => {}
                Op::Add { a, b } => {
                    accumulate(&mut grad, *a, d.clone());
                    accumulate(&mut grad, *b, d);
                }
                Op::Hadamard { a, b } => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    let da: Vec<f64> = d.iter().zip(vb).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> = d.iter().zip(va).map(|(g, x)| g * x).collect();
                    accumulate(&mut grad, *a, da);
                    accumulate(&mut grad, *b, db);
                }
                Op::Scale { p, factor } => {
                    accumulate(&mut grad, *p, d.iter().map(|g| g * factor).collect());
                }
                Op::Offset { p } => {
                    accumulate(&mut grad, *p, d);
                }
                Op::MatMul { a, b } => {
                    let na = &self.nodes[*a];
                    let nb = &self.nodes[*b];
                    let (m, k, n) = (na.height, na.width, nb.width);
                    let da = kernels::matmul_nt(&d, m, n, &nb.value, k);
                    let db = kernels::matmul_tn(&na.value, m, k, &d, n);
                    accumulate(&mut grad, *a, da);
                    accumulate(&mut grad, *b, db);
                }
                Op::SoftmaxRows { p } => {
                    let din = kernels::softmax_rows_vjp(&node.value, &d, node.height, node.width);
                    accumulate(&mut grad, *p, din);
                }
                Op::Sigmoid { p } => {
                    let din: Vec<f64> = d
                        .iter()
                        .zip(&node.value)
                        .map(|(g, o)| g * o * (1.0 - o))
                        .collect();
                    accumulate(&mut grad, *p, din);
                }
                Op::Sum { p } => {
                    let parent = &self.nodes[*p];
                    accumulate(&mut grad, *p, vec![d[0]; parent.value.len()]);
                }
                Op::DivScalar { num, den } => {
                    let vn = self.nodes[*num].value[0];
                    let vd = self.nodes[*den].value[0];
                    accumulate(&mut grad, *num, vec![d[0] / vd]);
                    accumulate(&mut grad, *den, vec![-d[0] * vn / (vd * vd)]);
                }
                Op::Upsample { p } => {
                    let parent = &self.nodes[*p];
                    let din = kernels::upsample_bilinear_vjp(
                        &d,
                        parent.height,
                        parent.width,
                        node.height,
                        node.width,
                    );
                    accumulate(&mut grad, *p, din);
                }
                Op::Sobel { p } => {
                    let parent = &self.nodes[*p];
                    let din = kernels::sobel_vjp(&parent.value, parent.height, parent.width, &d);
                    accumulate(&mut grad, *p, din);
                }
                Op::StraightThrough { soft } => {
                    accumulate(&mut grad, *soft, d);
                }
                Op::AvgPool { p } => {
                    let parent = &self.nodes[*p];
                    let (fh, fw) = (parent.height / node.height, parent.width / node.width);
                    let inv = 1.0 / (fh * fw) as f64;
                    let mut din = vec![0.0; parent.value.len()];
                    for oy in 0..node.height {
                        for ox in 0..node.width {
                            let g = d[oy * node.width + ox] * inv;
                            for dy in 0..fh {
                                for dx in 0..fw {
                                    din[(oy * fh + dy) * parent.width + (ox * fw + dx)] += g;
                                }
                            }
                        }
                    }
                    accumulate(&mut grad, *p, din);
                }
                Op::StackChannels { parents } => {
                    let channels = parents.len();
                    for (c, pid) in parents.iter().enumerate() {
                        let pixels = self.nodes[*pid].value.len();
                        let din: Vec<f64> = (0..pixels).map(|p| d[p * channels + c]).collect();
                        accumulate(&mut grad, *pid, din);
                    }
                }
                Op::AttnColumn { p, col, cols } => {
                    let parent = &self.nodes[*p];
                    let mut din = vec![0.0; parent.value.len()];
                    for (pix, g) in d.iter().enumerate() {
                        din[pix * cols + col] = *g;
                    }
                    accumulate(&mut grad, *p, din);
                }
            }
        }

        let mut by_node = BTreeMap::new();
        for (id, slot) in grad.into_iter().enumerate() {
            if let (Some(g), Op::Leaf { requires_grad: true }) = (slot, &self.nodes[id].op) {
                by_node.insert(
                    id,
                    Grid2D {
                        height: self.nodes[id].height,
                        width: self.nodes[id].width,
                        data: g,
                        node: None,
                    },
                );
            }
        }
        Ok(Gradients { by_node, visited })
    }
}

fn accumulate(grad: &mut [Option<Vec<f64>>], id: NodeId, contrib: Vec<f64>) {
    match &mut grad[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn grid(h: usize, w: usize, data: &[f64]) -> Grid2D {
        Grid2D::from_vec(h, w, data.to_vec()).unwrap()
    }

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            assert!((a - e).abs() <= tol, "[{i}] {a} vs {e}");
        }
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let eye = grid(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let m = grid(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = tape.matmul(&eye, &m).unwrap();
        assert_eq!(out.data(), m.data());
    }

    #[test]
    fn matmul_hand_expansion() {
        let mut tape = Tape::new();
        let a = grid(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = grid(2, 1, &[1.0, 1.0]);
        let out = tape.matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let mut tape = Tape::new();
        let a = Grid2D::zeros(2, 3);
        let b = Grid2D::zeros(2, 3);
        assert!(matches!(
            tape.matmul(&a, &b),
            Err(GridError::DimensionMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut tape = Tape::new();
        let equal = grid(1, 4, &[0.7, 0.7, 0.7, 0.7]);
        let out = tape.softmax_rows(&equal);
        assert_close(out.data(), &[0.25; 4], 1e-15);

        let row = grid(1, 2, &[0.0, (3.0f64).ln()]);
        let out = tape.softmax_rows(&row);
        assert_close(out.data(), &[0.25, 0.75], 1e-12);
    }

    #[test]
    fn softmax_is_overflow_stable() {
        let mut tape = Tape::new();
        let row = grid(1, 2, &[1000.0, 1000.0]);
        let out = tape.softmax_rows(&row);
        assert_close(out.data(), &[0.5, 0.5], 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let m = grid(2, 3, &[3.0, -1.0, 0.5, 10.0, 10.0, -10.0]);
        let out = tape.softmax_rows(&m);
        for r in 0..2 {
            let sum: f64 = out.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let mut tape = Tape::new();
        let c = Grid2D::constant(2, 3, 4.25);
        let out = tape.upsample_bilinear(&c, 7, 5).unwrap();
        assert!(out.data().iter().all(|&v| v == 4.25));
    }

    #[test]
    fn upsample_corner_aligned_ramp() {
        let mut tape = Tape::new();
        let g = grid(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let out = tape.upsample_bilinear(&g, 4, 4).unwrap();
        let row = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for r in 0..4 {
            assert_close(&out.data()[r * 4..(r + 1) * 4], &row, 1e-15);
        }
    }

    #[test]
    fn upsample_same_size_is_identity() {
        let mut tape = Tape::new();
        let g = grid(3, 2, &[0.5, -1.0, 2.0, 7.0, -3.0, 0.0]);
        let out = tape.upsample_bilinear(&g, 3, 2).unwrap();
        assert_eq!(out.data(), g.data());
    }

    #[test]
    fn upsample_zero_target_errors() {
        let mut tape = Tape::new();
        let g = Grid2D::zeros(2, 2);
        assert!(tape.upsample_bilinear(&g, 0, 4).is_err());
    }

    #[test]
    fn sobel_constant_is_exactly_zero() {
        let mut tape = Tape::new();
        let c = Grid2D::constant(5, 5, 3.7);
        let out = tape.sobel(&c).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sobel_vertical_step_hits_adjacent_columns_only() {
        // Left half 0, right half 1; the step sits between columns 3 and 4.
        let mut data = vec![0.0; 64];
        for r in 0..8 {
            for c in 4..8 {
                data[r * 8 + c] = 1.0;
            }
        }
        let mut tape = Tape::new();
        let out = tape.sobel(&grid(8, 8, &data)).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let v = out.get(r, c);
                if c == 3 || c == 4 {
                    assert!((v - 4.0).abs() < 1e-9, "({r},{c}) = {v}");
                } else {
                    assert_eq!(v, 0.0, "({r},{c})");
                }
            }
        }
    }

    #[test]
    fn sobel_rejects_tiny_grids() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.sobel(&Grid2D::zeros(2, 2)),
            Err(GridError::InvalidSize { op: "sobel", .. })
        ));
    }

    #[test]
    fn hadamard_with_ones_is_identity() {
        let mut tape = Tape::new();
        let g = grid(2, 2, &[1.0, -2.0, 3.5, 0.0]);
        let out = tape.hadamard(&g, &Grid2D::ones(2, 2)).unwrap();
        assert_eq!(out.data(), g.data());
        assert!(matches!(
            tape.hadamard(&g, &Grid2D::ones(2, 3)),
            Err(GridError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::new();
        let z = tape.leaf(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let loss = tape.sum(&z);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&z).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_quadratic_is_two_z() {
        let mut tape = Tape::new();
        let z = tape.leaf(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let sq = tape.hadamard(&z, &z).unwrap();
        let loss = tape.sum(&sq);
        let grads = tape.backward(&loss).unwrap();
        assert_close(grads.wrt(&z).unwrap().data(), &[2.0, -4.0, 1.0, 6.0], 1e-15);
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut tape = Tape::new();
        let z = tape.leaf(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = tape.hadamard(&z, &z).unwrap();
        let b = tape.add(&a, &z).unwrap();
        let loss = tape.sum(&b);
        let n = tape.len();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.visited_nodes(), n);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached_roots() {
        let mut tape = Tape::new();
        let z = tape.leaf(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(
            tape.backward(&z),
            Err(GridError::NonScalarRoot { .. })
        ));
        let constant = Grid2D::scalar(1.0);
        assert!(matches!(
            tape.backward(&constant),
            Err(GridError::DetachedRoot)
        ));
    }

    #[test]
    fn gradient_accumulates_across_consumers() {
        // loss = sum(z*z) + sum(z) => d = 2z + 1
        let mut tape = Tape::new();
        let z = tape.leaf(1, 2, vec![3.0, -1.0]).unwrap();
        let sq = tape.hadamard(&z, &z).unwrap();
        let s1 = tape.sum(&sq);
        let s2 = tape.sum(&z);
        let loss = tape.add(&s1, &s2).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_close(grads.wrt(&z).unwrap().data(), &[7.0, -1.0], 1e-15);
    }

    #[test]
    fn straight_through_forwards_hard_and_backprops_soft() {
        let mut tape = Tape::new();
        let soft = tape.leaf(2, 2, vec![0.1, 0.9, 0.4, 0.6]).unwrap();
        let hard = grid(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let st = tape.straight_through(&hard, &soft).unwrap();
        assert_eq!(st.data(), hard.data());
        let loss = tape.sum(&st);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&soft).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn constants_do_not_touch_the_tape() {
        let mut tape = Tape::new();
        let a = grid(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = grid(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let sum = tape.add(&a, &b).unwrap();
        let prod = tape.hadamard(&a, &b).unwrap();
        let _ = tape.sobel(&Grid2D::zeros(4, 4)).unwrap();
        assert!(sum.node().is_none());
        assert!(prod.node().is_none());
        assert_eq!(tape.len(), 0);
    }

    #[test]
    fn avg_pool_and_stack_shapes() {
        let mut tape = Tape::new();
        let g = grid(4, 4, &(0..16).map(|x| x as f64).collect::<Vec<_>>());
        let pooled = tape.avg_pool(&g, 2, 2).unwrap();
        assert_eq!(pooled.data(), &[2.5, 4.5, 10.5, 12.5]);
        assert!(tape.avg_pool(&g, 3, 2).is_err());

        let a = grid(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = grid(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let stacked = tape.stack_channels(&[a, b]).unwrap();
        assert_eq!(stacked.shape(), (4, 2));
        assert_eq!(stacked.data(), &[1.0, 5.0, 2.0, 6.0, 3.0, 7.0, 4.0, 8.0]);
    }

    #[test]
    fn attention_column_extracts_and_reshapes() {
        let mut tape = Tape::new();
        // 4x2 matrix: rows are pixels, columns are tokens.
        let a = grid(4, 2, &[1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]);
        let col = tape.attention_column(&a, 1, 2, 2).unwrap();
        assert_eq!(col.shape(), (2, 2));
        assert_eq!(col.data(), &[10.0, 20.0, 30.0, 40.0]);
        assert!(tape.attention_column(&a, 2, 2, 2).is_err());
    }

    #[test]
    fn div_scalar_value_and_gradient() {
        let mut tape = Tape::new();
        let num = tape.leaf(1, 1, vec![6.0]).unwrap();
        let den = tape.leaf(1, 1, vec![2.0]).unwrap();
        let q = tape.div_scalar(&num, &den).unwrap();
        assert_eq!(q.scalar_value(), Some(3.0));
        let grads = tape.backward(&q).unwrap();
        assert_close(grads.wrt(&num).unwrap().data(), &[0.5], 1e-15);
        assert_close(grads.wrt(&den).unwrap().data(), &[-1.5], 1e-15);
    }
}
