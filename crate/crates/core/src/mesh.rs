//! Simplicial meshes in two and three dimensions.
//!
//! A [`SimplexMesh`] owns its vertices and cells, derives the facet list with a
//! canonical orientation, and caches the per-cell and per-facet geometry used by
//! every element kernel. Meshes are immutable once built.
//!
//! Local conventions: local facet `i` of a cell is the facet opposite local
//! vertex `i`. A facet's vertex tuple is stored sorted ascending and its unit
//! normal is fixed by that ordering; each cell stores a sign `+1` when the
//! facet normal points out of the cell and `-1` otherwise.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::MeshError;

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 3;

/// A point padded to three coordinates; entries beyond the mesh dimension are zero.
pub type Point = [f64; MAX_DIM];

const NO_CELL: usize = usize::MAX;

/// How squares are split into triangles by [`build_box_mesh`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoxVariant {
    /// Each square is cut along the diagonal from its lower-left to upper-right corner.
    #[default]
    Diagonal,
    /// Each square is cut along both diagonals into four triangles around its center.
    CrissCross,
}

impl std::str::FromStr for BoxVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "diagonal" => Ok(Self::Diagonal),
            "crisscross" | "criss-cross" => Ok(Self::CrissCross),
            other => Err(format!("unknown mesh variant `{other}`")),
        }
    }
}

/// Geometry of one cell, computed from its vertex coordinates.
#[derive(Debug, Clone)]
pub struct CellGeometry {
    pub dim: usize,
    pub vertices: [Point; MAX_DIM + 1],
    pub measure: f64,
    pub centroid: Point,
    /// Sum of squared edge lengths, `sum_{i<j} |a_i - a_j|^2`.
    pub edge_sum: f64,
    /// Gradients of the barycentric coordinates, one per vertex.
    pub bary_grads: [Point; MAX_DIM + 1],
    /// Longest edge.
    pub diameter: f64,
}

impl CellGeometry {
    pub fn from_vertices(dim: usize, verts: &[Point]) -> Self {
        assert!(dim == 2 || dim == 3, "unsupported dimension {dim}");
        assert_eq!(verts.len(), dim + 1);
        let mut vertices = [[0.0; MAX_DIM]; MAX_DIM + 1];
        vertices[..=dim].copy_from_slice(verts);

        let mut centroid = [0.0; MAX_DIM];
        for v in verts {
            for d in 0..dim {
                centroid[d] += v[d];
            }
        }
        for c in centroid.iter_mut().take(dim) {
            *c /= (dim + 1) as f64;
        }

        let mut edge_sum = 0.0;
        let mut diameter: f64 = 0.0;
        for i in 0..=dim {
            for j in i + 1..=dim {
                let d2 = dist2(&verts[i], &verts[j], dim);
                edge_sum += d2;
                diameter = diameter.max(d2.sqrt());
            }
        }

        // Jacobian columns a_i - a_0; the rows of its inverse are grad(lambda_i), i >= 1.
        let mut jac = [[0.0; MAX_DIM]; MAX_DIM];
        for c in 0..dim {
            for r in 0..dim {
                jac[r][c] = verts[c + 1][r] - verts[0][r];
            }
        }
        let (det, inv) = invert(&jac, dim);
        let factorial = if dim == 2 { 2.0 } else { 6.0 };
        let measure = det / factorial;

        let mut bary_grads = [[0.0; MAX_DIM]; MAX_DIM + 1];
        for i in 1..=dim {
            for d in 0..dim {
                bary_grads[i][d] = inv[i - 1][d];
                bary_grads[0][d] -= inv[i - 1][d];
            }
        }

        Self {
            dim,
            vertices,
            measure,
            centroid,
            edge_sum,
            bary_grads,
            diameter,
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.dim + 1
    }

    /// Barycentric coordinates of `x`; exact for affine functions, so valid outside the cell too.
    pub fn barycentric(&self, x: &[f64]) -> [f64; MAX_DIM + 1] {
        let mut lam = [0.0; MAX_DIM + 1];
        let base = 1.0 / (self.dim + 1) as f64;
        for (i, l) in lam.iter_mut().enumerate().take(self.dim + 1) {
            *l = base;
            for d in 0..self.dim {
                *l += self.bary_grads[i][d] * (x[d] - self.centroid[d]);
            }
        }
        lam
    }

    /// Physical point with the given barycentric coordinates.
    pub fn point(&self, lambda: &[f64]) -> Point {
        let mut x = [0.0; MAX_DIM];
        for (i, l) in lambda.iter().enumerate().take(self.dim + 1) {
            for d in 0..self.dim {
                x[d] += l * self.vertices[i][d];
            }
        }
        x
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.barycentric(x)[..=self.dim].iter().all(|&l| l >= -tol)
    }
}

/// Geometry of one facet.
#[derive(Debug, Clone)]
pub struct FacetGeometry {
    pub dim: usize,
    pub vertices: [Point; MAX_DIM],
    pub measure: f64,
    pub centroid: Point,
    /// Unit normal fixed by the facet's sorted vertex tuple.
    pub normal: Point,
}

impl FacetGeometry {
    fn from_vertices(dim: usize, verts: &[Point]) -> Self {
        let mut vertices = [[0.0; MAX_DIM]; MAX_DIM];
        vertices[..dim].copy_from_slice(verts);
        let mut centroid = [0.0; MAX_DIM];
        for v in verts {
            for d in 0..dim {
                centroid[d] += v[d] / dim as f64;
            }
        }
        let (measure, normal) = if dim == 2 {
            let t = [verts[1][0] - verts[0][0], verts[1][1] - verts[0][1]];
            let len = (t[0] * t[0] + t[1] * t[1]).sqrt();
            (len, [t[1] / len, -t[0] / len, 0.0])
        } else {
            let u = sub(&verts[1], &verts[0]);
            let v = sub(&verts[2], &verts[0]);
            let c = [
                u[1] * v[2] - u[2] * v[1],
                u[2] * v[0] - u[0] * v[2],
                u[0] * v[1] - u[1] * v[0],
            ];
            let len = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            (0.5 * len, [c[0] / len, c[1] / len, c[2] / len])
        };
        Self {
            dim,
            vertices,
            measure,
            centroid,
            normal,
        }
    }

    /// Physical point with the given barycentric coordinates on the facet.
    pub fn point(&self, lambda: &[f64]) -> Point {
        let mut x = [0.0; MAX_DIM];
        for (i, l) in lambda.iter().enumerate().take(self.dim) {
            for d in 0..self.dim {
                x[d] += l * self.vertices[i][d];
            }
        }
        x
    }
}

/// An immutable conforming simplicial mesh with facet incidence.
#[derive(Debug, Clone)]
pub struct SimplexMesh {
    dim: usize,
    vertices: Vec<Point>,
    cells: Vec<usize>,
    facets: Vec<usize>,
    cell_facets: Vec<usize>,
    cell_signs: Vec<f64>,
    facet_cells: Vec<[usize; 2]>,
    cell_geom: Vec<CellGeometry>,
    facet_geom: Vec<FacetGeometry>,
}

impl SimplexMesh {
    /// Builds a mesh from coordinates and cell connectivity.
    ///
    /// Negatively oriented cells are reordered so every stored cell has positive
    /// volume. Cells with measure below `1e-14 * diameter^dim` are rejected.
    pub fn new(dim: usize, coords: Vec<Point>, cells: Vec<Vec<usize>>) -> Result<Self, MeshError> {
        if dim != 2 && dim != 3 {
            return Err(MeshError::UnsupportedDimension(dim));
        }
        if cells.is_empty() {
            return Err(MeshError::Empty);
        }
        let nv = dim + 1;
        let mut flat = Vec::with_capacity(cells.len() * nv);
        let mut cell_geom = Vec::with_capacity(cells.len());
        for (k, cell) in cells.iter().enumerate() {
            if cell.len() != nv {
                return Err(MeshError::Parse {
                    line: k,
                    message: format!("cell has {} vertices, expected {nv}", cell.len()),
                });
            }
            let mut cell = cell.clone();
            for &v in &cell {
                if v >= coords.len() {
                    return Err(MeshError::VertexOutOfRange {
                        cell: k,
                        vertex: v,
                        n_vertices: coords.len(),
                    });
                }
            }
            let pts: Vec<Point> = cell.iter().map(|&v| coords[v]).collect();
            let mut geom = CellGeometry::from_vertices(dim, &pts);
            let scale = geom.diameter.powi(dim as i32);
            if !(geom.measure.abs() >= 1e-14 * scale) || scale == 0.0 {
                return Err(MeshError::DegenerateCell {
                    cell: k,
                    measure: geom.measure,
                });
            }
            if geom.measure < 0.0 {
                cell.swap(0, 1);
                let pts: Vec<Point> = cell.iter().map(|&v| coords[v]).collect();
                geom = CellGeometry::from_vertices(dim, &pts);
            }
            flat.extend_from_slice(&cell);
            cell_geom.push(geom);
        }

        let n_cells = cells.len();
        let mut lookup: HashMap<[usize; MAX_DIM], usize> = HashMap::new();
        let mut facets = Vec::new();
        let mut facet_cells: Vec<[usize; 2]> = Vec::new();
        let mut cell_facets = vec![0; n_cells * nv];
        for k in 0..n_cells {
            let cell = &flat[k * nv..(k + 1) * nv];
            for i in 0..nv {
                let mut key = [usize::MAX; MAX_DIM];
                let mut m = 0;
                for (j, &v) in cell.iter().enumerate() {
                    if j != i {
                        key[m] = v;
                        m += 1;
                    }
                }
                key[..dim].sort_unstable();
                let f = *lookup.entry(key).or_insert_with(|| {
                    facets.extend_from_slice(&key[..dim]);
                    facet_cells.push([NO_CELL, NO_CELL]);
                    facet_cells.len() - 1
                });
                let slot = &mut facet_cells[f];
                if slot[0] == NO_CELL {
                    slot[0] = k;
                } else if slot[1] == NO_CELL {
                    slot[1] = k;
                } else {
                    return Err(MeshError::NonManifoldFacet { facet: f });
                }
                cell_facets[k * nv + i] = f;
            }
        }

        let facet_geom: Vec<FacetGeometry> = (0..facet_cells.len())
            .map(|f| {
                let pts: Vec<Point> = facets[f * dim..(f + 1) * dim].iter().map(|&v| coords[v]).collect();
                FacetGeometry::from_vertices(dim, &pts)
            })
            .collect();

        let mut cell_signs = vec![0.0; n_cells * nv];
        for k in 0..n_cells {
            for i in 0..nv {
                let fg = &facet_geom[cell_facets[k * nv + i]];
                let opposite = &cell_geom[k].vertices[i];
                let mut s = 0.0;
                for d in 0..dim {
                    s += fg.normal[d] * (fg.centroid[d] - opposite[d]);
                }
                cell_signs[k * nv + i] = if s > 0.0 { 1.0 } else { -1.0 };
            }
        }

        Ok(Self {
            dim,
            vertices: coords,
            cells: flat,
            facets,
            cell_facets,
            cell_signs,
            facet_cells,
            cell_geom,
            facet_geom,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cell_geom.len()
    }

    pub fn n_facets(&self) -> usize {
        self.facet_cells.len()
    }

    pub fn vertex(&self, i: usize) -> &[f64] {
        &self.vertices[i][..self.dim]
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    /// Vertex indices of cell `k` in stored (positively oriented) order.
    pub fn cell(&self, k: usize) -> &[usize] {
        let nv = self.dim + 1;
        &self.cells[k * nv..(k + 1) * nv]
    }

    /// Sorted vertex indices of facet `f`.
    pub fn facet(&self, f: usize) -> &[usize] {
        &self.facets[f * self.dim..(f + 1) * self.dim]
    }

    /// Facet indices of cell `k`; entry `i` is the facet opposite local vertex `i`.
    pub fn cell_facets(&self, k: usize) -> &[usize] {
        let nv = self.dim + 1;
        &self.cell_facets[k * nv..(k + 1) * nv]
    }

    /// Relative orientation signs matching [`Self::cell_facets`].
    pub fn cell_facet_signs(&self, k: usize) -> &[f64] {
        let nv = self.dim + 1;
        &self.cell_signs[k * nv..(k + 1) * nv]
    }

    /// Cells adjacent to facet `f`: one for boundary facets, two otherwise.
    pub fn facet_cells(&self, f: usize) -> impl Iterator<Item = usize> + '_ {
        self.facet_cells[f].into_iter().filter(|&c| c != NO_CELL)
    }

    pub fn is_boundary_facet(&self, f: usize) -> bool {
        self.facet_cells[f][1] == NO_CELL
    }

    pub fn boundary_facets(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_facets()).filter(|&f| self.is_boundary_facet(f))
    }

    pub fn interior_facets(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_facets()).filter(|&f| !self.is_boundary_facet(f))
    }

    /// Local index of facet `f` within cell `k`.
    pub fn local_facet_index(&self, k: usize, f: usize) -> Option<usize> {
        self.cell_facets(k).iter().position(|&g| g == f)
    }

    pub fn geometry(&self, k: usize) -> &CellGeometry {
        &self.cell_geom[k]
    }

    pub fn facet_geometry_of(&self, f: usize) -> &FacetGeometry {
        &self.facet_geom[f]
    }

    /// Checked accessor for cell geometry.
    pub fn cell_geometry(&self, k: usize) -> Result<&CellGeometry, MeshError> {
        self.cell_geom.get(k).ok_or(MeshError::IndexOutOfRange {
            index: k,
            len: self.n_cells(),
        })
    }

    /// Checked accessor for facet geometry.
    pub fn facet_geometry(&self, f: usize) -> Result<&FacetGeometry, MeshError> {
        self.facet_geom.get(f).ok_or(MeshError::IndexOutOfRange {
            index: f,
            len: self.n_facets(),
        })
    }

    /// Maximum cell diameter.
    pub fn h_max(&self) -> f64 {
        self.cell_geom.iter().map(|g| g.diameter).fold(0.0, f64::max)
    }

    pub fn total_measure(&self) -> f64 {
        self.cell_geom.iter().map(|g| g.measure).sum()
    }

    /// First cell containing `x` (with a small barycentric tolerance).
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        (0..self.n_cells()).find(|&k| self.cell_geom[k].contains(x, 1e-12))
    }

    /// A copy of this mesh with every vertex moved by `f`.
    pub fn map_vertices(&self, f: impl Fn(&Point) -> Point) -> Result<Self, MeshError> {
        let coords = self.vertices.iter().map(f).collect();
        Self::new(self.dim, coords, self.cell_lists())
    }

    /// A copy with vertex `i` renamed to `perm[i]`, and cells listed in `cell_order`.
    pub fn relabeled(&self, perm: &[usize], cell_order: &[usize]) -> Result<Self, MeshError> {
        let mut coords = vec![[0.0; MAX_DIM]; self.n_vertices()];
        for (i, &p) in perm.iter().enumerate() {
            coords[p] = self.vertices[i];
        }
        let cells = cell_order
            .iter()
            .map(|&k| self.cell(k).iter().map(|&v| perm[v]).collect())
            .collect();
        Self::new(self.dim, coords, cells)
    }

    fn cell_lists(&self) -> Vec<Vec<usize>> {
        (0..self.n_cells()).map(|k| self.cell(k).to_vec()).collect()
    }
}

/// Mesh of the unit square or cube with `subdivisions` boxes per axis.
///
/// Squares are split according to `variant`; cubes into the six Kuhn tetrahedra.
pub fn build_box_mesh(dim: usize, subdivisions: usize, variant: BoxVariant) -> Result<SimplexMesh, MeshError> {
    if subdivisions == 0 {
        return Err(MeshError::ZeroSubdivisions);
    }
    let m = subdivisions;
    let h = 1.0 / m as f64;
    match (dim, variant) {
        (2, _) => {
            let idx = |i: usize, j: usize| j * (m + 1) + i;
            let mut coords = Vec::new();
            for j in 0..=m {
                for i in 0..=m {
                    coords.push([i as f64 * h, j as f64 * h, 0.0]);
                }
            }
            let mut cells = Vec::new();
            for j in 0..m {
                for i in 0..m {
                    let (v00, v10, v11, v01) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
                    match variant {
                        BoxVariant::Diagonal => {
                            cells.push(vec![v00, v10, v11]);
                            cells.push(vec![v00, v11, v01]);
                        }
                        BoxVariant::CrissCross => {
                            let c = coords.len();
                            coords.push([(i as f64 + 0.5) * h, (j as f64 + 0.5) * h, 0.0]);
                            cells.push(vec![v00, v10, c]);
                            cells.push(vec![v10, v11, c]);
                            cells.push(vec![v11, v01, c]);
                            cells.push(vec![v01, v00, c]);
                        }
                    }
                }
            }
            SimplexMesh::new(2, coords, cells)
        }
        (3, BoxVariant::Diagonal) => {
            let idx = |i: usize, j: usize, k: usize| (k * (m + 1) + j) * (m + 1) + i;
            let mut coords = Vec::new();
            for k in 0..=m {
                for j in 0..=m {
                    for i in 0..=m {
                        coords.push([i as f64 * h, j as f64 * h, k as f64 * h]);
                    }
                }
            }
            const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let mut cells = Vec::new();
            for k in 0..m {
                for j in 0..m {
                    for i in 0..m {
                        for perm in PERMS {
                            let mut corner = [i, j, k];
                            let mut tet = vec![idx(corner[0], corner[1], corner[2])];
                            for axis in perm {
                                corner[axis] += 1;
                                tet.push(idx(corner[0], corner[1], corner[2]));
                            }
                            cells.push(tet);
                        }
                    }
                }
            }
            SimplexMesh::new(3, coords, cells)
        }
        (3, BoxVariant::CrissCross) => Err(MeshError::UnsupportedVariant),
        (d, _) => Err(MeshError::UnsupportedDimension(d)),
    }
}

/// Uniform refinement: red refinement of triangles, octasection of tetrahedra.
///
/// The interior octahedron of each tetrahedron is split along its shortest
/// diagonal; ties are broken by the lexicographically smallest pair of global
/// midpoint indices.
pub fn refine_uniform(mesh: &SimplexMesh) -> SimplexMesh {
    let dim = mesh.dim();
    let mut coords = mesh.vertices.clone();
    let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
    let mut midpoint = |a: usize, b: usize, coords: &mut Vec<Point>| -> usize {
        let key = (a.min(b), a.max(b));
        *midpoints.entry(key).or_insert_with(|| {
            let (pa, pb) = (coords[a], coords[b]);
            coords.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1]), 0.5 * (pa[2] + pb[2])]);
            coords.len() - 1
        })
    };

    let mut cells = Vec::with_capacity(mesh.n_cells() * if dim == 2 { 4 } else { 8 });
    for k in 0..mesh.n_cells() {
        let v = mesh.cell(k).to_vec();
        if dim == 2 {
            let m0 = midpoint(v[1], v[2], &mut coords);
            let m1 = midpoint(v[0], v[2], &mut coords);
            let m2 = midpoint(v[0], v[1], &mut coords);
            cells.push(vec![v[0], m2, m1]);
            cells.push(vec![m2, v[1], m0]);
            cells.push(vec![m1, m0, v[2]]);
            cells.push(vec![m0, m1, m2]);
        } else {
            let mut mid = [[0usize; 4]; 4];
            for a in 0..4 {
                for b in a + 1..4 {
                    let m = midpoint(v[a], v[b], &mut coords);
                    mid[a][b] = m;
                    mid[b][a] = m;
                }
            }
            for a in 0..4 {
                let mut child = vec![v[a]];
                child.extend((0..4).filter(|&b| b != a).map(|b| mid[a][b]));
                cells.push(child);
            }
            // Diagonals (ab, cd) of the inner octahedron.
            let diagonals = [(0, 1, 2, 3), (0, 2, 1, 3), (0, 3, 1, 2)];
            let choose = |&(a, b, c, d): &(usize, usize, usize, usize)| {
                let (p, q) = (mid[a][b], mid[c][d]);
                (dist2(&coords[p], &coords[q], 3), (p.min(q), p.max(q)))
            };
            let mut best = diagonals[0];
            let mut best_key = choose(&best);
            for diag in &diagonals[1..] {
                let key = choose(diag);
                let tie = (key.0 - best_key.0).abs() <= 1e-12 * best_key.0;
                if (!tie && key.0 < best_key.0) || (tie && key.1 < best_key.1) {
                    best = *diag;
                    best_key = key;
                }
            }
            let (a, b, c, d) = best;
            let (p, q) = (mid[a][b], mid[c][d]);
            let ring = [mid[a][c], mid[a][d], mid[b][d], mid[b][c]];
            for i in 0..4 {
                cells.push(vec![p, q, ring[i], ring[(i + 1) % 4]]);
            }
        }
    }
    SimplexMesh::new(dim, coords, cells).expect("refinement of a valid mesh is valid")
}

/// The coarse box mesh followed by `levels` uniform refinements; entry `l` has been refined `l` times.
pub fn box_hierarchy(dim: usize, variant: BoxVariant, levels: usize) -> Result<Vec<SimplexMesh>, MeshError> {
    let mut out = vec![build_box_mesh(dim, 1, variant)?];
    for _ in 0..levels {
        let next = refine_uniform(out.last().unwrap());
        out.push(next);
    }
    Ok(out)
}

/// Parses the plain-text mesh format.
///
/// ```text
/// dim n_vertices n_cells
/// x y [z]          (n_vertices lines)
/// i j k [l]        (n_cells lines, 0-based)
/// ```
pub fn read_mesh(text: &str) -> Result<SimplexMesh, MeshError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (_, header) = lines.next().ok_or_else(|| MeshError::MalformedHeader("empty input".into()))?;
    let fields: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|e| MeshError::MalformedHeader(format!("{header:?}: {e}")))?;
    let [dim, nv, nc] = fields[..] else {
        return Err(MeshError::MalformedHeader(format!("expected 3 fields, got {header:?}")));
    };
    if dim != 2 && dim != 3 {
        return Err(MeshError::UnsupportedDimension(dim));
    }

    let mut coords = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (line, text) = lines.next().ok_or(MeshError::Parse {
            line: 0,
            message: "unexpected end of input in vertex block".into(),
        })?;
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| MeshError::Parse {
                line,
                message: format!("bad coordinate: {e}"),
            })?;
        if vals.len() != dim {
            return Err(MeshError::Parse {
                line,
                message: format!("expected {dim} coordinates, got {}", vals.len()),
            });
        }
        let mut p = [0.0; MAX_DIM];
        p[..dim].copy_from_slice(&vals);
        coords.push(p);
    }

    let mut cells = Vec::with_capacity(nc);
    for k in 0..nc {
        let (line, text) = lines.next().ok_or(MeshError::Parse {
            line: 0,
            message: "unexpected end of input in cell block".into(),
        })?;
        let idx: Vec<usize> = text
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| MeshError::Parse {
                line,
                message: format!("bad vertex index: {e}"),
            })?;
        if idx.len() != dim + 1 {
            return Err(MeshError::Parse {
                line,
                message: format!("expected {} indices, got {}", dim + 1, idx.len()),
            });
        }
        for (a, &i) in idx.iter().enumerate() {
            if i >= nv {
                return Err(MeshError::VertexOutOfRange {
                    cell: k,
                    vertex: i,
                    n_vertices: nv,
                });
            }
            if idx[..a].contains(&i) {
                return Err(MeshError::DegenerateCell { cell: k, measure: 0.0 });
            }
        }
        cells.push(idx);
    }
    if let Some((line, _)) = lines.next() {
        return Err(MeshError::Parse {
            line,
            message: "trailing content after cell block".into(),
        });
    }
    SimplexMesh::new(dim, coords, cells)
}

/// Serializes a mesh; coordinates carry 17 significant digits so reading back is lossless.
pub fn write_mesh(mesh: &SimplexMesh) -> String {
    let dim = mesh.dim();
    let mut out = String::new();
    writeln!(out, "{} {} {}", dim, mesh.n_vertices(), mesh.n_cells()).unwrap();
    for p in mesh.vertices() {
        let row: Vec<String> = p[..dim].iter().map(|x| format!("{x:.16e}")).collect();
        writeln!(out, "{}", row.join(" ")).unwrap();
    }
    for k in 0..mesh.n_cells() {
        let row: Vec<String> = mesh.cell(k).iter().map(usize::to_string).collect();
        writeln!(out, "{}", row.join(" ")).unwrap();
    }
    out
}

fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dist2(a: &Point, b: &Point, dim: usize) -> f64 {
    (0..dim).map(|d| (a[d] - b[d]).powi(2)).sum()
}

// Determinant and inverse of the leading dim x dim block.
fn invert(m: &[[f64; MAX_DIM]; MAX_DIM], dim: usize) -> (f64, [[f64; MAX_DIM]; MAX_DIM]) {
    let mut inv = [[0.0; MAX_DIM]; MAX_DIM];
    if dim == 2 {
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        inv[0][0] = m[1][1] / det;
        inv[0][1] = -m[0][1] / det;
        inv[1][0] = -m[1][0] / det;
        inv[1][1] = m[0][0] / det;
        (det, inv)
    } else {
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let c00 = cof(1, 2, 1, 2);
        let c01 = -cof(1, 2, 0, 2);
        let c02 = cof(1, 2, 0, 1);
        let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
        inv[0][0] = c00 / det;
        inv[1][0] = c01 / det;
        inv[2][0] = c02 / det;
        inv[0][1] = -cof(0, 2, 1, 2) / det;
        inv[1][1] = cof(0, 2, 0, 2) / det;
        inv[2][1] = -cof(0, 2, 0, 1) / det;
        inv[0][2] = cof(0, 1, 1, 2) / det;
        inv[1][2] = -cof(0, 1, 0, 2) / det;
        inv[2][2] = cof(0, 1, 0, 1) / det;
        (det, inv)
    }
}
