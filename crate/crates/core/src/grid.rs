//! Vertex-centered tensor grid on the nozzle `Lambda x (0, L)`.
//!
//! Axes `0..dim-1` span the cross-section, the last axis is the nozzle axis.
//! Node `k` has multi-index `(i_0, .., i_{dim-1})` with the first axis fastest, so
//! the cross-section position of a node is `k % cross_len`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NozzleSpec {
    pub dim: usize,
    /// `[lo, hi]` per cross-section axis.
    pub cross: Vec<[f64; 2]>,
    pub length: f64,
    /// Nodes per axis, cross-section axes first, axial last.
    pub nodes: Vec<usize>,
}

impl NozzleSpec {
    pub fn unit_2d(cross_nodes: usize, axial_nodes: usize) -> Self {
        NozzleSpec { dim: 2, cross: vec![[0.0, 1.0]], length: 1.0, nodes: vec![cross_nodes, axial_nodes] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundaryTag {
    Interior,
    /// Entrance face, away from the wall.
    Entrance,
    /// Exit face, away from the wall.
    Exit,
    Wall,
    /// Intersection of an end face with the wall.
    Corner,
}

/// Grid edge between `lo` and `hi = lo + stride[axis]`, with its quadrature weight
/// `h_axis * prod_{j != axis} w_j` (trapezoidal in the transverse directions).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub lo: usize,
    pub hi: usize,
    pub axis: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Nozzle {
    pub spec: NozzleSpec,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub counts: Vec<usize>,
    pub spacing: Vec<f64>,
    pub strides: Vec<usize>,
    pub tags: Vec<BoundaryTag>,
    /// Trapezoidal node weights (cell volumes).
    pub node_weights: Vec<f64>,
    pub edges: Vec<Edge>,
}

pub fn build_grid(spec: &NozzleSpec) -> Result<Nozzle> {
    let dim = spec.dim;
    if !(dim == 2 || dim == 3) {
        return Err(Error::DegenerateGrid(format!("dimension must be 2 or 3, got {dim}")));
    }
    if spec.cross.len() != dim - 1 || spec.nodes.len() != dim {
        return Err(Error::DegenerateGrid("extent/node lists do not match the dimension".into()));
    }
    if let Some(n) = spec.nodes.iter().find(|&&n| n < 8) {
        return Err(Error::DegenerateGrid(format!("at least 8 nodes per axis required, got {n}")));
    }
    let mut lower: Vec<f64> = spec.cross.iter().map(|c| c[0]).collect();
    let mut upper: Vec<f64> = spec.cross.iter().map(|c| c[1]).collect();
    lower.push(0.0);
    upper.push(spec.length);
    if lower.iter().zip(&upper).any(|(a, b)| !(b > a) || !a.is_finite() || !b.is_finite()) {
        return Err(Error::DegenerateGrid("every extent must have positive finite length".into()));
    }
    let counts = spec.nodes.clone();
    let spacing: Vec<f64> = (0..dim).map(|a| (upper[a] - lower[a]) / (counts[a] - 1) as f64).collect();
    let mut strides = vec![1; dim];
    for a in 1..dim {
        strides[a] = strides[a - 1] * counts[a - 1];
    }
    let total: usize = counts.iter().product();

    let mut grid = Nozzle {
        spec: spec.clone(),
        lower,
        upper,
        counts,
        spacing,
        strides,
        tags: Vec::with_capacity(total),
        node_weights: Vec::with_capacity(total),
        edges: Vec::new(),
    };
    for k in 0..total {
        let tag = grid.classify(k);
        grid.tags.push(tag);
        let w: f64 = (0..dim).map(|a| grid.trapezoid(k, a)).product();
        grid.node_weights.push(w);
    }
    for axis in 0..dim {
        for k in 0..total {
            if grid.axis_index(k, axis) + 1 < grid.counts[axis] {
                let weight = grid.spacing[axis]
                    * (0..dim).filter(|&j| j != axis).map(|j| grid.trapezoid(k, j)).product::<f64>();
                grid.edges.push(Edge { lo: k, hi: k + grid.strides[axis], axis, weight });
            }
        }
    }
    Ok(grid)
}

impl Nozzle {
    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn axial(&self) -> usize {
        self.spec.dim - 1
    }

    pub fn length(&self) -> f64 {
        self.spec.length
    }

    pub fn num_nodes(&self) -> usize {
        self.tags.len()
    }

    /// Nodes in one cross-section.
    pub fn cross_len(&self) -> usize {
        self.strides[self.axial()]
    }

    pub fn axis_index(&self, k: usize, axis: usize) -> usize {
        (k / self.strides[axis]) % self.counts[axis]
    }

    pub fn axial_index(&self, k: usize) -> usize {
        k / self.cross_len()
    }

    pub fn cross_index(&self, k: usize) -> usize {
        k % self.cross_len()
    }

    pub fn coord(&self, k: usize, axis: usize) -> f64 {
        let i = self.axis_index(k, axis);
        if i + 1 == self.counts[axis] {
            self.upper[axis]
        } else {
            self.lower[axis] + i as f64 * self.spacing[axis]
        }
    }

    pub fn coords(&self, k: usize) -> Vec<f64> {
        (0..self.dim()).map(|a| self.coord(k, a)).collect()
    }

    pub fn on_low(&self, k: usize, axis: usize) -> bool {
        self.axis_index(k, axis) == 0
    }

    pub fn on_high(&self, k: usize, axis: usize) -> bool {
        self.axis_index(k, axis) + 1 == self.counts[axis]
    }

    pub fn on_entrance(&self, k: usize) -> bool {
        self.on_low(k, self.axial())
    }

    pub fn on_exit(&self, k: usize) -> bool {
        self.on_high(k, self.axial())
    }

    /// Node lies on the closure of the wall (cross-section boundary).
    pub fn on_wall(&self, k: usize) -> bool {
        (0..self.axial()).any(|a| self.on_low(k, a) || self.on_high(k, a))
    }

    /// Trapezoidal weight of node `k` along `axis`.
    pub fn trapezoid(&self, k: usize, axis: usize) -> f64 {
        let h = self.spacing[axis];
        if self.on_low(k, axis) || self.on_high(k, axis) {
            0.5 * h
        } else {
            h
        }
    }

    /// Weight of node `k` within an end face (product over cross-section axes).
    pub fn face_weight(&self, k: usize) -> f64 {
        (0..self.axial()).map(|a| self.trapezoid(k, a)).product()
    }

    fn classify(&self, k: usize) -> BoundaryTag {
        let end = self.on_entrance(k) || self.on_exit(k);
        match (end, self.on_wall(k)) {
            (true, true) => BoundaryTag::Corner,
            (true, false) if self.on_entrance(k) => BoundaryTag::Entrance,
            (true, false) => BoundaryTag::Exit,
            (false, true) => BoundaryTag::Wall,
            (false, false) => BoundaryTag::Interior,
        }
    }

    /// Inward unit normals of the wall faces through node `k` (empty off the wall).
    pub fn wall_normals(&self, k: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for a in 0..self.axial() {
            let mut n = vec![0.0; self.dim()];
            if self.on_low(k, a) {
                n[a] = 1.0;
                out.push(n);
            } else if self.on_high(k, a) {
                n[a] = -1.0;
                out.push(n);
            }
        }
        out
    }

    /// Inward unit normal of the exit face.
    pub fn exit_normal(&self) -> Vec<f64> {
        let mut n = vec![0.0; self.dim()];
        n[self.axial()] = -1.0;
        n
    }

    /// Nodes on the closed exit face, in cross-section order.
    pub fn exit_nodes(&self) -> std::ops::Range<usize> {
        let n = self.num_nodes();
        n - self.cross_len()..n
    }

    /// Distance to the corner set (edges where the end faces meet the wall).
    pub fn corner_distance(&self, k: usize) -> f64 {
        let mut wall = f64::INFINITY;
        for a in 0..self.axial() {
            let x = self.coord(k, a);
            wall = wall.min(x - self.lower[a]).min(self.upper[a] - x);
        }
        let x = self.coord(k, self.axial());
        let end = x.min(self.length() - x);
        (wall * wall + end * end).sqrt()
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.upper[a] - self.lower[a]).product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &Nozzle) -> Self {
        ScalarField { shape: grid.counts.clone(), values: vec![0.0; grid.num_nodes()] }
    }

    pub fn from_fn(grid: &Nozzle, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.num_nodes()).map(|k| f(&grid.coords(k))).collect();
        ScalarField { shape: grid.counts.clone(), values }
    }

    pub fn from_values(grid: &Nozzle, values: Vec<f64>) -> Result<Self> {
        let f = ScalarField { shape: grid.counts.clone(), values };
        f.check(grid)?;
        Ok(f)
    }

    pub fn check(&self, grid: &Nozzle) -> Result<()> {
        if self.shape != grid.counts || self.values.len() != grid.num_nodes() {
            return Err(Error::ShapeMismatch(format!("field {:?} on grid {:?}", self.shape, grid.counts)));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("field contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub shape: Vec<usize>,
    /// One value array per axis.
    pub components: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn at(&self, k: usize) -> Vec<f64> {
        self.components.iter().map(|c| c[k]).collect()
    }
}

/// Second-order derivative along `axis`: central inside, one-sided three-point at the ends.
pub fn derivative(grid: &Nozzle, values: &[f64], axis: usize) -> Vec<f64> {
    let h = grid.spacing[axis];
    let s = grid.strides[axis];
    (0..values.len())
        .map(|k| {
            if grid.on_low(k, axis) {
                (-3.0 * values[k] + 4.0 * values[k + s] - values[k + 2 * s]) / (2.0 * h)
            } else if grid.on_high(k, axis) {
                (3.0 * values[k] - 4.0 * values[k - s] + values[k - 2 * s]) / (2.0 * h)
            } else {
                (values[k + s] - values[k - s]) / (2.0 * h)
            }
        })
        .collect()
}

pub fn gradient(grid: &Nozzle, field: &ScalarField) -> Result<VectorField> {
    field.check(grid)?;
    Ok(VectorField {
        shape: grid.counts.clone(),
        components: (0..grid.dim()).map(|a| derivative(grid, &field.values, a)).collect(),
    })
}

pub fn divergence(grid: &Nozzle, field: &VectorField) -> Result<ScalarField> {
    if field.shape != grid.counts
        || field.components.len() != grid.dim()
        || field.components.iter().any(|c| c.len() != grid.num_nodes())
    {
        return Err(Error::ShapeMismatch("vector field does not conform to the grid".into()));
    }
    let mut values = vec![0.0; grid.num_nodes()];
    for (a, comp) in field.components.iter().enumerate() {
        for (v, d) in values.iter_mut().zip(derivative(grid, comp, a)) {
            *v += d;
        }
    }
    Ok(ScalarField { shape: grid.counts.clone(), values })
}
