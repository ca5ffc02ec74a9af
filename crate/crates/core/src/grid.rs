//! Voxel grids, active masks, spherical neighborhoods and connected components.
//!
//! Voxels are addressed two ways: a *voxel id* is the linear index into the
//! full grid (x fastest, then y, then z), and a *rank* is the dense index
//! `0..N_D` of an active voxel. Ranks are assigned in ascending voxel-id
//! order, so sorting by one sorts by the other.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    dims: [usize; 3],
    spacing: [f64; 3],
}

impl Grid3 {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "grid dimensions must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "grid spacing must be positive and finite, got {spacing:?}"
            )));
        }
        Ok(Self { dims, spacing })
    }

    /// Grid with unit spacing.
    pub fn unit(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn coords(&self, id: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [id % nx, (id / nx) % ny, id / (nx * ny)]
    }

    /// Physical position of the voxel center.
    pub fn center(&self, id: usize) -> [f64; 3] {
        let c = self.coords(id);
        [
            (c[0] as f64 + 0.5) * self.spacing[0],
            (c[1] as f64 + 0.5) * self.spacing[1],
            (c[2] as f64 + 0.5) * self.spacing[2],
        ]
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (ca, cb) = (self.center(a), self.center(b));
        ca.iter()
            .zip(cb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    /// Neighbor of `id` displaced by `offset` voxels, if it lies in the grid.
    pub fn offset(&self, id: usize, offset: [isize; 3]) -> Option<usize> {
        let c = self.coords(id);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let v = c[a] as isize + offset[a];
            if v < 0 || v >= self.dims[a] as isize {
                return None;
            }
            out[a] = v as usize;
        }
        Some(self.index(out[0], out[1], out[2]))
    }
}

const INACTIVE: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    grid: Grid3,
    rank: Vec<usize>,
    voxels: Vec<usize>,
}

impl Mask {
    /// Every voxel of the grid is active.
    pub fn full(grid: Grid3) -> Self {
        let len = grid.len();
        Self {
            grid,
            rank: (0..len).collect(),
            voxels: (0..len).collect(),
        }
    }

    pub fn from_flags(grid: Grid3, active: &[bool]) -> Result<Self> {
        if active.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} flags for a grid of {} voxels",
                active.len(),
                grid.len()
            )));
        }
        let mut rank = vec![INACTIVE; active.len()];
        let mut voxels = Vec::new();
        for (id, &on) in active.iter().enumerate() {
            if on {
                rank[id] = voxels.len();
                voxels.push(id);
            }
        }
        if voxels.is_empty() {
            return Err(Error::InvalidArgument("mask has no active voxels".into()));
        }
        Ok(Self { grid, rank, voxels })
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    /// N_D, the number of active voxels.
    pub fn n_active(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_active(&self, id: usize) -> bool {
        id < self.rank.len() && self.rank[id] != INACTIVE
    }

    pub fn rank_of(&self, id: usize) -> Option<usize> {
        match self.rank.get(id) {
            Some(&r) if r != INACTIVE => Some(r),
            _ => None,
        }
    }

    pub fn voxel_of(&self, rank: usize) -> usize {
        self.voxels[rank]
    }

    /// Active voxel ids in rank order.
    pub fn voxels(&self) -> &[usize] {
        &self.voxels
    }

    pub fn flags(&self) -> Vec<bool> {
        self.rank.iter().map(|&r| r != INACTIVE).collect()
    }

    /// Scatters a rank-indexed vector onto the full grid, filling inactive voxels.
    pub fn scatter(&self, values: &[f64], fill: f64) -> Vec<f64> {
        let mut out = vec![fill; self.grid.len()];
        for (r, &id) in self.voxels.iter().enumerate() {
            out[id] = values[r];
        }
        out
    }

    /// Gathers the active voxels of a full-grid vector into rank order.
    pub fn gather(&self, full: &[f64]) -> Vec<f64> {
        self.voxels.iter().map(|&id| full[id]).collect()
    }
}

/// An open ball `{d : |d - center| < radius}` restricted to active voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct Ball {
    /// Voxel id of the center.
    pub center: usize,
    pub radius: f64,
    /// Ranks of the member voxels, ascending.
    pub members: Vec<usize>,
}

/// Integer displacements whose physical length is below a radius.
///
/// Offsets are kept in ascending linear order (z, then y, then x), so applying
/// the stencil to a center yields voxel ids (and therefore ranks) in
/// ascending order.
#[derive(Debug, Clone)]
pub struct Stencil {
    radius: f64,
    offsets: Vec<[isize; 3]>,
    distances: Vec<f64>,
}

impl Stencil {
    pub fn ball(grid: &Grid3, radius: f64) -> Self {
        let mut offsets = Vec::new();
        let mut distances = Vec::new();
        if radius > 0.0 {
            let sp = grid.spacing();
            let reach: Vec<isize> = (0..3)
                .map(|a| {
                    let r = (radius / sp[a]).ceil() as isize;
                    r.min(grid.dims()[a] as isize - 1)
                })
                .collect();
            for dk in -reach[2]..=reach[2] {
                for dj in -reach[1]..=reach[1] {
                    for di in -reach[0]..=reach[0] {
                        let (x, y, z) = (di as f64 * sp[0], dj as f64 * sp[1], dk as f64 * sp[2]);
                        let dist = (x * x + y * y + z * z).sqrt();
                        if dist < radius {
                            offsets.push([di, dj, dk]);
                            distances.push(dist);
                        }
                    }
                }
            }
        }
        Self {
            radius,
            offsets,
            distances,
        }
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Visits `(rank, distance)` of every active voxel in the ball around
    /// `center` (a voxel id), in ascending rank order.
    pub fn for_each_member(&self, mask: &Mask, center: usize, mut f: impl FnMut(usize, f64)) {
        let grid = mask.grid();
        let c = grid.coords(center);
        let dims = grid.dims();
        for (off, &dist) in self.offsets.iter().zip(&self.distances) {
            let x = c[0] as isize + off[0];
            let y = c[1] as isize + off[1];
            let z = c[2] as isize + off[2];
            if x < 0
                || y < 0
                || z < 0
                || x >= dims[0] as isize
                || y >= dims[1] as isize
                || z >= dims[2] as isize
            {
                continue;
            }
            let id = grid.index(x as usize, y as usize, z as usize);
            if let Some(r) = mask.rank_of(id) {
                f(r, dist);
            }
        }
    }

    pub fn members(&self, mask: &Mask, center: usize) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(self.len());
        self.for_each_member(mask, center, |r, d| out.push((r, d)));
        out
    }
}

/// Active voxels strictly closer than `h` to `center` (a voxel id).
pub fn ball_neighbors(mask: &Mask, center: usize, h: f64) -> Result<Ball> {
    if !mask.is_active(center) {
        return Err(Error::InactiveVoxel(center));
    }
    if !(h >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ball radius must be >= 0, got {h}"
        )));
    }
    let stencil = Stencil::ball(mask.grid(), h);
    let members = stencil
        .members(mask, center)
        .into_iter()
        .map(|(r, _)| r)
        .collect();
    Ok(Ball {
        center,
        radius: h,
        members,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    /// Shared face.
    #[default]
    Face6,
    /// Shared face or edge.
    Edge18,
    /// Shared face, edge or corner.
    Vertex26,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dk in -1isize..=1 {
            for dj in -1isize..=1 {
                for di in -1isize..=1 {
                    let nonzero = (di != 0) as u8 + (dj != 0) as u8 + (dk != 0) as u8;
                    let keep = match self {
                        Connectivity::Face6 => nonzero == 1,
                        Connectivity::Edge18 => (1..=2).contains(&nonzero),
                        Connectivity::Vertex26 => nonzero >= 1,
                    };
                    if keep {
                        out.push([di, dj, dk]);
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        match v {
            6 => Ok(Connectivity::Face6),
            18 => Ok(Connectivity::Edge18),
            26 => Ok(Connectivity::Vertex26),
            other => Err(format!("connectivity must be 6, 18 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Face6 => 6,
            Connectivity::Edge18 => 18,
            Connectivity::Vertex26 => 26,
        }
    }
}

/// Splits a set of active voxels (given as ranks) into maximal connected
/// subsets. Components are sorted by size descending, ties broken by the
/// smallest member rank; members within a component are ascending.
pub fn connected_components(
    mask: &Mask,
    ranks: &[usize],
    connectivity: Connectivity,
) -> Vec<Vec<usize>> {
    let grid = mask.grid();
    let mut selected = vec![false; mask.n_active()];
    for &r in ranks {
        selected[r] = true;
    }
    let offsets = connectivity.offsets();
    let mut seen = vec![false; mask.n_active()];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.n_active() {
        if !selected[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(r) = queue.pop_front() {
            comp.push(r);
            let id = mask.voxel_of(r);
            for off in &offsets {
                if let Some(nid) = grid.offset(id, *off) {
                    if let Some(nr) = mask.rank_of(nid) {
                        if selected[nr] && !seen[nr] {
                            seen[nr] = true;
                            queue.push_back(nr);
                        }
                    }
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }
    components.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    components
}
