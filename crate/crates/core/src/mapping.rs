//! Dense log-odds occupancy grid fed by robot and operator point clouds.
//!
//! Each scan is integrated octomap-style: every voxel crossed by a ray gets at
//! most one miss update, every endpoint voxel one hit update, and hits win
//! over misses within the same scan.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{FrameId, RigidTransform};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MapError {
    #[error("frame mismatch: expected {expected:?}, got {actual:?}")]
    FrameMismatch { expected: FrameId, actual: FrameId },
    #[error("invalid grid geometry: {0}")]
    InvalidGeometry(String),
    #[error("non-finite point in cloud")]
    NonFinitePoint,
    #[error("malformed grid export: {0}")]
    MalformedExport(String),
}

/// Integer voxel coordinates. May lie outside a grid when used as a probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridIndex {
    pub i: i32,
    pub j: i32,
    pub k: i32,
}

impl GridIndex {
    pub const fn new(i: i32, j: i32, k: i32) -> Self {
        Self { i, j, k }
    }

    pub fn offset(self, d: [i32; 3]) -> Self {
        Self::new(self.i + d[0], self.j + d[1], self.k + d[2])
    }

    pub fn as_array(self) -> [i32; 3] {
        [self.i, self.j, self.k]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellState {
    Free,
    Occupied,
    Unknown,
}

impl CellState {
    fn code(self) -> char {
        match self {
            CellState::Free => 'F',
            CellState::Occupied => 'O',
            CellState::Unknown => 'U',
        }
    }

    fn from_code(c: char) -> Option<Self> {
        match c {
            'F' => Some(CellState::Free),
            'O' => Some(CellState::Occupied),
            'U' => Some(CellState::Unknown),
            _ => None,
        }
    }
}

/// Placement and size of a uniform voxel grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub origin: Vec3,
    pub resolution: f64,
    pub dims: [usize; 3],
}

impl GridGeometry {
    pub fn new(origin: Vec3, resolution: f64, dims: [usize; 3]) -> Result<Self, MapError> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(MapError::InvalidGeometry("resolution must be positive".into()));
        }
        if dims.iter().any(|&d| d == 0 || d > i32::MAX as usize / 2) {
            return Err(MapError::InvalidGeometry(format!("bad dims {dims:?}")));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(MapError::InvalidGeometry("origin must be finite".into()));
        }
        Ok(Self { origin, resolution, dims })
    }

    /// Grid of `extent` meters per axis centered on `center`.
    pub fn centered(center: Vec3, extent: [f64; 3], resolution: f64) -> Result<Self, MapError> {
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let n = (extent[a] / resolution).round();
            if !(n >= 1.0) {
                return Err(MapError::InvalidGeometry(format!("extent {:?} too small", extent)));
            }
            dims[a] = n as usize;
        }
        let half = Vec3::new(
            dims[0] as f64 * resolution,
            dims[1] as f64 * resolution,
            dims[2] as f64 * resolution,
        ) * 0.5;
        Self::new(center - half, resolution, dims)
    }

    pub fn cell_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn max_corner(&self) -> Vec3 {
        self.origin
            + Vec3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64) * self.resolution
    }

    /// Index of the voxel containing `p`, whether or not it lies inside the grid.
    pub fn index_unchecked(&self, p: &Vec3) -> GridIndex {
        let rel = (p - self.origin) / self.resolution;
        GridIndex::new(
            clamp_i32(rel.x.floor()),
            clamp_i32(rel.y.floor()),
            clamp_i32(rel.z.floor()),
        )
    }

    pub fn index_of(&self, p: &Vec3) -> Option<GridIndex> {
        let idx = self.index_unchecked(p);
        self.contains(idx).then_some(idx)
    }

    pub fn contains(&self, idx: GridIndex) -> bool {
        idx.i >= 0
            && idx.j >= 0
            && idx.k >= 0
            && (idx.i as usize) < self.dims[0]
            && (idx.j as usize) < self.dims[1]
            && (idx.k as usize) < self.dims[2]
    }

    /// Row-major linear index with `i` varying slowest.
    #[inline]
    pub fn linear(&self, idx: GridIndex) -> usize {
        (idx.i as usize * self.dims[1] + idx.j as usize) * self.dims[2] + idx.k as usize
    }

    #[inline]
    pub fn unlinear(&self, n: usize) -> GridIndex {
        let k = n % self.dims[2];
        let ij = n / self.dims[2];
        GridIndex::new((ij / self.dims[1]) as i32, (ij % self.dims[1]) as i32, k as i32)
    }

    pub fn center(&self, idx: GridIndex) -> Vec3 {
        self.origin
            + Vec3::new(idx.i as f64 + 0.5, idx.j as f64 + 0.5, idx.k as f64 + 0.5) * self.resolution
    }

    pub fn cell_min(&self, idx: GridIndex) -> Vec3 {
        self.origin + Vec3::new(idx.i as f64, idx.j as f64, idx.k as f64) * self.resolution
    }

    /// Parameter interval of `a + t (b - a)` inside the grid box, clipped to `[0, 1]`.
    fn clip_segment(&self, a: &Vec3, b: &Vec3) -> Option<(f64, f64)> {
        segment_box_interval(a, b, &self.origin, &self.max_corner())
    }
}

fn clamp_i32(v: f64) -> i32 {
    if v.is_nan() {
        i32::MIN
    } else {
        v.clamp(i32::MIN as f64, i32::MAX as f64) as i32
    }
}

/// Slab test of a segment against a closed box; returns the clipped `[t0, t1]`.
pub fn segment_box_interval(a: &Vec3, b: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<(f64, f64)> {
    let d = b - a;
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for ax in 0..3 {
        if d[ax] == 0.0 {
            if a[ax] < lo[ax] || a[ax] > hi[ax] {
                return None;
            }
        } else {
            let inv = 1.0 / d[ax];
            let mut ta = (lo[ax] - a[ax]) * inv;
            let mut tb = (hi[ax] - a[ax]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
    }
    Some((t0, t1))
}

/// Voxels visited by a sensor ray.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RayTraversal {
    /// Voxels crossed before the endpoint voxel, in order, starting with the origin voxel.
    pub passed: Vec<GridIndex>,
    /// Endpoint voxel when the endpoint lies inside the grid.
    pub end: Option<GridIndex>,
}

/// 3D DDA from `from` to `to`, clipped to the grid. The endpoint voxel is excluded
/// from `passed`; a ray leaving the grid is truncated at the boundary.
pub fn traverse_ray(geom: &GridGeometry, from: &Vec3, to: &Vec3) -> RayTraversal {
    let mut out = RayTraversal { passed: Vec::new(), end: geom.index_of(to) };
    let Some((t0, t1)) = geom.clip_segment(from, to) else {
        return out;
    };
    let d = to - from;
    let start = from + d * t0;
    let mut cur = geom.index_unchecked(&start);
    // Points on the upper boundary face belong to the last voxel.
    for (a, c) in [&mut cur.i, &mut cur.j, &mut cur.k].into_iter().enumerate() {
        *c = (*c).clamp(0, geom.dims[a] as i32 - 1);
    }

    let res = geom.resolution;
    let mut step = [0i32; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    let curv = [cur.i, cur.j, cur.k];
    for a in 0..3 {
        if d[a] > 0.0 {
            step[a] = 1;
            let boundary = geom.origin[a] + (curv[a] + 1) as f64 * res;
            t_max[a] = (boundary - from[a]) / d[a];
            t_delta[a] = res / d[a];
        } else if d[a] < 0.0 {
            step[a] = -1;
            let boundary = geom.origin[a] + curv[a] as f64 * res;
            t_max[a] = (boundary - from[a]) / d[a];
            t_delta[a] = -res / d[a];
        }
    }

    let budget = geom.dims.iter().sum::<usize>() * 2 + 8;
    for _ in 0..budget {
        if Some(cur) == out.end {
            break;
        }
        out.passed.push(cur);
        let mut axis = 0;
        for a in 1..3 {
            if t_max[a] < t_max[axis] {
                axis = a;
            }
        }
        if t_max[axis] > t1 {
            break;
        }
        match axis {
            0 => cur.i += step[0],
            1 => cur.j += step[1],
            _ => cur.k += step[2],
        }
        t_max[axis] += t_delta[axis];
        if !geom.contains(cur) {
            break;
        }
    }
    out
}

/// Every voxel whose closed box touches the segment `a`–`b`, including voxels outside
/// the grid. Used for conservative line-of-sight checks.
pub fn segment_supercover(geom: &GridGeometry, a: &Vec3, b: &Vec3) -> Vec<GridIndex> {
    let eps = geom.resolution * 1e-9;
    let pad = Vec3::repeat(eps);
    let lo_idx = geom.index_unchecked(&(a.inf(b) - pad));
    let hi_idx = geom.index_unchecked(&(a.sup(b) + pad));
    let mut out = Vec::new();
    // Walk the DDA cells and test their 26-neighbourhoods exactly.
    let mut seeds: Vec<GridIndex> = Vec::new();
    let first = geom.index_unchecked(a);
    seeds.push(first);
    let len = (b - a).norm();
    let steps = (len / (geom.resolution * 0.25)).ceil().max(1.0) as usize;
    let mut last = first;
    for s in 1..=steps {
        let p = a + (b - a) * (s as f64 / steps as f64);
        let idx = geom.index_unchecked(&p);
        if idx != last {
            seeds.push(idx);
            last = idx;
        }
    }
    let mut seen = std::collections::HashSet::new();
    for s in seeds {
        for di in -1..=1 {
            for dj in -1..=1 {
                for dk in -1..=1 {
                    let c = s.offset([di, dj, dk]);
                    if c.i < lo_idx.i || c.j < lo_idx.j || c.k < lo_idx.k {
                        continue;
                    }
                    if c.i > hi_idx.i || c.j > hi_idx.j || c.k > hi_idx.k {
                        continue;
                    }
                    if !seen.insert(c) {
                        continue;
                    }
                    let lo = geom.cell_min(c) - pad;
                    let hi = lo + Vec3::repeat(geom.resolution) + pad * 2.0;
                    if segment_box_interval(a, b, &lo, &hi).is_some() {
                        out.push(c);
                    }
                }
            }
        }
    }
    out.sort();
    out
}

/// Voxel offsets whose centers lie within `radius` of a voxel center, the center excluded.
pub fn inflation_kernel(resolution: f64, radius: f64) -> Vec<[i32; 3]> {
    let r_cells = (radius.max(0.0) / resolution + 1e-9).floor() as i32;
    let tol = 1e-9 * resolution;
    let mut offsets = Vec::new();
    for di in -r_cells..=r_cells {
        for dj in -r_cells..=r_cells {
            for dk in -r_cells..=r_cells {
                if (di, dj, dk) == (0, 0, 0) {
                    continue;
                }
                let d = ((di * di + dj * dj + dk * dk) as f64).sqrt() * resolution;
                if d <= radius + tol {
                    offsets.push([di, dj, dk]);
                }
            }
        }
    }
    offsets
}

/// Log-odds update constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogOdds {
    pub hit: f32,
    pub miss: f32,
    pub min: f32,
    pub max: f32,
    pub threshold: f32,
}

impl Default for LogOdds {
    fn default() -> Self {
        Self { hit: 0.85, miss: -0.4, min: -2.0, max: 3.5, threshold: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudSource {
    Robot,
    Operator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub frame: FrameId,
    pub source: CloudSource,
    pub stamp: f64,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, frame: FrameId, source: CloudSource, stamp: f64) -> Result<Self, MapError> {
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(MapError::NonFinitePoint);
        }
        Ok(Self { points, frame, source, stamp })
    }

    pub fn empty(frame: FrameId, source: CloudSource, stamp: f64) -> Self {
        Self { points: Vec::new(), frame, source, stamp }
    }

    pub fn transformed(&self, t: &RigidTransform<f64>) -> Result<PointCloud, MapError> {
        if t.from_frame() != self.frame {
            return Err(MapError::FrameMismatch { expected: t.from_frame(), actual: self.frame });
        }
        Ok(PointCloud {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            frame: t.to_frame(),
            source: self.source,
            stamp: self.stamp,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One voxel whose classification changed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellChange {
    pub index: GridIndex,
    pub state: CellState,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScanStats {
    pub hits: usize,
    pub misses: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    geometry: GridGeometry,
    params: LogOdds,
    log_odds: Vec<f32>,
    known: Vec<bool>,
    column_known: Vec<bool>,
    explored_columns: usize,
    changed: Vec<u32>,
    changed_flag: Vec<bool>,
    mesh_dirty: bool,
    inflation: Option<LiveInflation>,
}

/// Inflated view kept up to date as voxels change classification.
#[derive(Debug, Clone, PartialEq)]
struct LiveInflation {
    radius: f64,
    kernel: Vec<[i32; 3]>,
    /// Occupied voxels within the kernel of each voxel.
    near: Vec<u16>,
    states: Vec<CellState>,
}

impl OccupancyGrid {
    pub fn new(geometry: GridGeometry) -> Self {
        Self::with_params(geometry, LogOdds::default())
    }

    pub fn with_params(geometry: GridGeometry, params: LogOdds) -> Self {
        let n = geometry.cell_count();
        Self {
            geometry,
            params,
            log_odds: vec![0.0; n],
            known: vec![false; n],
            column_known: vec![false; geometry.dims[0] * geometry.dims[1]],
            explored_columns: 0,
            changed: Vec::new(),
            changed_flag: vec![false; n],
            mesh_dirty: false,
            inflation: None,
        }
    }

    /// Maintains an inflated view with `radius` from now on, so that
    /// [`OccupancyGrid::inflated_snapshot`] costs a copy instead of a full pass.
    pub fn track_inflation(&mut self, radius: f64) {
        let kernel = inflation_kernel(self.geometry.resolution, radius);
        let n = self.geometry.cell_count();
        let mut live = LiveInflation { radius, kernel, near: vec![0; n], states: vec![CellState::Unknown; n] };
        for m in 0..n {
            if self.classify(m) == CellState::Occupied {
                let c = self.geometry.unlinear(m);
                for o in &live.kernel {
                    let q = c.offset(*o);
                    if self.geometry.contains(q) {
                        live.near[self.geometry.linear(q)] += 1;
                    }
                }
            }
        }
        for m in 0..n {
            live.states[m] = Self::inflated_state(self.classify(m), live.near[m]);
        }
        self.inflation = Some(live);
    }

    fn inflated_state(raw: CellState, near: u16) -> CellState {
        match raw {
            CellState::Free if near > 0 => CellState::Occupied,
            s => s,
        }
    }

    /// Current inflated view, when tracked with the given radius.
    pub fn inflated_snapshot(&self) -> Option<InflatedGrid> {
        self.inflation.as_ref().map(|l| InflatedGrid { geometry: self.geometry, states: l.states.clone() })
    }

    pub fn tracked_inflation_radius(&self) -> Option<f64> {
        self.inflation.as_ref().map(|l| l.radius)
    }

    fn update_inflation(&mut self, n: usize, before: CellState, after: CellState) {
        let Some(live) = self.inflation.as_mut() else { return };
        let g = &self.geometry;
        let delta: i32 = match (before == CellState::Occupied, after == CellState::Occupied) {
            (false, true) => 1,
            (true, false) => -1,
            _ => 0,
        };
        if delta != 0 {
            let c = g.unlinear(n);
            for o in &live.kernel {
                let q = c.offset(*o);
                if g.contains(q) {
                    let m = g.linear(q);
                    live.near[m] = (live.near[m] as i32 + delta) as u16;
                    let raw = if !self.known[m] {
                        CellState::Unknown
                    } else if self.log_odds[m] > self.params.threshold {
                        CellState::Occupied
                    } else {
                        CellState::Free
                    };
                    live.states[m] = Self::inflated_state(raw, live.near[m]);
                }
            }
        }
        live.states[n] = Self::inflated_state(after, live.near[n]);
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn params(&self) -> &LogOdds {
        &self.params
    }

    pub fn log_odds(&self, idx: GridIndex) -> Option<f32> {
        self.geometry.contains(idx).then(|| self.log_odds[self.geometry.linear(idx)])
    }

    pub fn is_known(&self, idx: GridIndex) -> bool {
        self.geometry.contains(idx) && self.known[self.geometry.linear(idx)]
    }

    #[inline]
    fn classify(&self, n: usize) -> CellState {
        if !self.known[n] {
            CellState::Unknown
        } else if self.log_odds[n] > self.params.threshold {
            CellState::Occupied
        } else {
            CellState::Free
        }
    }

    /// Classification of a voxel; anything outside the grid is unknown.
    pub fn state(&self, idx: GridIndex) -> CellState {
        if self.geometry.contains(idx) {
            self.classify(self.geometry.linear(idx))
        } else {
            CellState::Unknown
        }
    }

    pub fn cell_at(&self, p: &Vec3) -> CellState {
        match self.geometry.index_of(p) {
            Some(idx) => self.state(idx),
            None => CellState::Unknown,
        }
    }

    fn apply_update(&mut self, n: usize, delta: f32) {
        let before = self.classify(n);
        let v = (self.log_odds[n] + delta).clamp(self.params.min, self.params.max);
        self.log_odds[n] = v;
        if !self.known[n] {
            self.known[n] = true;
            let column = n / self.geometry.dims[2];
            if !self.column_known[column] {
                self.column_known[column] = true;
                self.explored_columns += 1;
            }
        }
        let after = self.classify(n);
        if before != after {
            self.update_inflation(n, before, after);
            if before == CellState::Occupied || after == CellState::Occupied {
                self.mesh_dirty = true;
            }
            if !self.changed_flag[n] {
                self.changed_flag[n] = true;
                self.changed.push(n as u32);
            }
        }
    }

    /// Applies one hit (`occupied`) or miss update to a voxel inside the grid.
    pub fn observe(&mut self, idx: GridIndex, occupied: bool) {
        if self.geometry.contains(idx) {
            let n = self.geometry.linear(idx);
            let delta = if occupied { self.params.hit } else { self.params.miss };
            self.apply_update(n, delta);
        }
    }

    /// Integrates a cloud expressed in `W` observed from `sensor_origin`.
    pub fn insert_cloud(&mut self, cloud: &PointCloud, sensor_origin: &Vec3) -> Result<ScanStats, MapError> {
        self.insert_scan(cloud, &PointCloud::empty(FrameId::W, cloud.source, cloud.stamp), sensor_origin)
    }

    /// As [`OccupancyGrid::insert_cloud`], also clearing every voxel up to and
    /// including the endpoints in `misses` (rays that returned nothing).
    /// Voxels hit in the same scan stay hits.
    pub fn insert_scan(&mut self, cloud: &PointCloud, misses: &PointCloud, sensor_origin: &Vec3) -> Result<ScanStats, MapError> {
        for c in [cloud, misses] {
            if c.frame != FrameId::W {
                return Err(MapError::FrameMismatch { expected: FrameId::W, actual: c.frame });
            }
        }
        let mut hits: Vec<usize> = Vec::new();
        let mut frees: Vec<usize> = Vec::new();
        for p in &misses.points {
            if !p.iter().all(|v| v.is_finite()) {
                continue;
            }
            let ray = traverse_ray(&self.geometry, sensor_origin, p);
            frees.extend(ray.passed.iter().chain(ray.end.iter()).map(|&c| self.geometry.linear(c)));
        }
        for p in &cloud.points {
            if !p.iter().all(|v| v.is_finite()) {
                continue;
            }
            let ray = traverse_ray(&self.geometry, sensor_origin, p);
            frees.extend(ray.passed.iter().map(|&c| self.geometry.linear(c)));
            if let Some(end) = ray.end {
                hits.push(self.geometry.linear(end));
            }
        }
        hits.sort_unstable();
        hits.dedup();
        frees.sort_unstable();
        frees.dedup();
        frees.retain(|n| hits.binary_search(n).is_err());
        let (hit, miss) = (self.params.hit, self.params.miss);
        for &n in &frees {
            self.apply_update(n, miss);
        }
        for &n in &hits {
            self.apply_update(n, hit);
        }
        Ok(ScanStats { hits: hits.len(), misses: frees.len() })
    }

    /// Transforms an operator cloud from `H` into `W` and fuses it into the grid.
    /// The headset position acts as the sensor origin.
    pub fn merge_operator_cloud(
        &mut self,
        cloud: &PointCloud,
        h_to_w: &RigidTransform<f64>,
    ) -> Result<ScanStats, MapError> {
        if cloud.frame != FrameId::H {
            return Err(MapError::FrameMismatch { expected: FrameId::H, actual: cloud.frame });
        }
        if h_to_w.to_frame() != FrameId::W {
            return Err(MapError::FrameMismatch { expected: FrameId::W, actual: h_to_w.to_frame() });
        }
        let world = cloud.transformed(h_to_w)?;
        self.insert_cloud(&world, h_to_w.translation())
    }

    /// Planning view: occupied cells grown by `radius`; unknown cells stay unknown.
    pub fn inflate(&self, radius: f64) -> InflatedGrid {
        let g = &self.geometry;
        let mut states: Vec<CellState> = (0..g.cell_count()).map(|n| self.classify(n)).collect();
        let offsets = inflation_kernel(g.resolution, radius);
        if !offsets.is_empty() {
            for n in 0..g.cell_count() {
                if self.classify(n) != CellState::Occupied {
                    continue;
                }
                let c = g.unlinear(n);
                for o in &offsets {
                    let q = c.offset(*o);
                    if g.contains(q) {
                        let m = g.linear(q);
                        if states[m] == CellState::Free {
                            states[m] = CellState::Occupied;
                        }
                    }
                }
            }
        }
        InflatedGrid { geometry: *g, states }
    }

    /// Whether `idx` or any voxel at a kernel offset from it is occupied.
    pub fn occupied_within(&self, idx: GridIndex, kernel: &[[i32; 3]]) -> bool {
        self.state(idx) == CellState::Occupied || kernel.iter().any(|o| self.state(idx.offset(*o)) == CellState::Occupied)
    }

    /// Forces a voxel to a confident free or occupied value, as when loading a prior map.
    pub fn set_known(&mut self, idx: GridIndex, occupied: bool) {
        if self.geometry.contains(idx) {
            let n = self.geometry.linear(idx);
            let target = if occupied { self.params.max } else { self.params.min };
            let delta = target - self.log_odds[n];
            self.apply_update(n, delta);
        }
    }

    /// Blocky surface: one quad per occupied-voxel face not shared with another occupied voxel.
    pub fn extract_mesh(&self) -> SurfaceMesh {
        let g = &self.geometry;
        let mut mesh = SurfaceMesh::default();
        let mut vertex_ids: BTreeMap<[i32; 3], u32> = BTreeMap::new();
        for n in 0..g.cell_count() {
            if self.classify(n) != CellState::Occupied {
                continue;
            }
            let c = g.unlinear(n);
            for face in &FACES {
                if self.state(c.offset(face.normal)) == CellState::Occupied {
                    continue;
                }
                let mut ids = [0u32; 4];
                for (slot, corner) in face.corners.iter().enumerate() {
                    let key = [c.i + corner[0], c.j + corner[1], c.k + corner[2]];
                    let next = mesh.vertices.len() as u32;
                    let id = *vertex_ids.entry(key).or_insert_with(|| {
                        mesh.vertices.push(
                            g.origin + Vec3::new(key[0] as f64, key[1] as f64, key[2] as f64) * g.resolution,
                        );
                        next
                    });
                    ids[slot] = id;
                }
                mesh.triangles.push([ids[0], ids[1], ids[2]]);
                mesh.triangles.push([ids[0], ids[2], ids[3]]);
            }
        }
        mesh
    }

    /// Area of `(x, y)` columns holding at least one known voxel.
    pub fn explored_area(&self) -> f64 {
        self.explored_columns as f64 * self.geometry.resolution * self.geometry.resolution
    }

    /// Whether any voxel of column `(i, j)` is known; outside columns are not.
    pub fn column_explored(&self, i: i32, j: i32) -> bool {
        let [ni, nj, _] = self.geometry.dims;
        i >= 0 && j >= 0 && (i as usize) < ni && (j as usize) < nj && self.column_known[i as usize * nj + j as usize]
    }

    pub fn known_count(&self) -> usize {
        self.known.iter().filter(|&&k| k).count()
    }

    /// Voxels whose classification changed since the previous call.
    pub fn take_changes(&mut self) -> Vec<CellChange> {
        let changed = std::mem::take(&mut self.changed);
        changed
            .into_iter()
            .map(|n| {
                let n = n as usize;
                self.changed_flag[n] = false;
                CellChange { index: self.geometry.unlinear(n), state: self.classify(n) }
            })
            .collect()
    }

    pub fn has_changes(&self) -> bool {
        !self.changed.is_empty()
    }

    /// Returns whether the occupied set changed since the previous call, and clears the flag.
    pub fn take_mesh_dirty(&mut self) -> bool {
        std::mem::replace(&mut self.mesh_dirty, false)
    }

    /// Every known voxel with its classification.
    pub fn known_cells(&self) -> Vec<CellChange> {
        (0..self.geometry.cell_count())
            .filter(|&n| self.known[n])
            .map(|n| CellChange { index: self.geometry.unlinear(n), state: self.classify(n) })
            .collect()
    }

    pub fn states(&self) -> Vec<CellState> {
        (0..self.geometry.cell_count()).map(|n| self.classify(n)).collect()
    }

    /// Header plus run-length encoded classification, one token per run.
    pub fn export_rle(&self) -> String {
        GridExport { geometry: self.geometry, states: self.states() }.to_text()
    }
}

/// Classification-only grid snapshot, as written to run logs.
#[derive(Debug, Clone, PartialEq)]
pub struct GridExport {
    pub geometry: GridGeometry,
    pub states: Vec<CellState>,
}

impl GridExport {
    pub fn to_text(&self) -> String {
        let g = &self.geometry;
        let mut s = String::new();
        let _ = writeln!(s, "origin {} {} {}", g.origin.x, g.origin.y, g.origin.z);
        let _ = writeln!(s, "resolution {}", g.resolution);
        let _ = writeln!(s, "dims {} {} {}", g.dims[0], g.dims[1], g.dims[2]);
        s.push_str("cells");
        let mut iter = self.states.iter().peekable();
        while let Some(&state) = iter.next() {
            let mut run = 1usize;
            while iter.peek() == Some(&&state) {
                iter.next();
                run += 1;
            }
            let _ = write!(s, " {}{}", state.code(), run);
        }
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self, MapError> {
        let bad = |m: &str| MapError::MalformedExport(m.to_string());
        let mut lines = text.lines();
        let mut field = |name: &str| -> Result<Vec<String>, MapError> {
            let line = lines.next().ok_or_else(|| bad("truncated"))?;
            let mut toks = line.split_whitespace();
            if toks.next() != Some(name) {
                return Err(bad(&format!("expected `{name}`")));
            }
            Ok(toks.map(str::to_string).collect())
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        let o = field("origin")?;
        let r = field("resolution")?;
        let d = field("dims")?;
        let cells = field("cells")?;
        if o.len() != 3 || r.len() != 1 || d.len() != 3 {
            return Err(bad("bad header arity"));
        }
        let dims = [
            d[0].parse().map_err(|_| bad("bad dims"))?,
            d[1].parse().map_err(|_| bad("bad dims"))?,
            d[2].parse().map_err(|_| bad("bad dims"))?,
        ];
        let geometry = GridGeometry::new(Vec3::new(num(&o[0])?, num(&o[1])?, num(&o[2])?), num(&r[0])?, dims)?;
        let mut states = Vec::with_capacity(geometry.cell_count());
        for tok in cells {
            let mut chars = tok.chars();
            let state = chars.next().and_then(CellState::from_code).ok_or_else(|| bad("bad run tag"))?;
            let run: usize = chars.as_str().parse().map_err(|_| bad("bad run length"))?;
            if states.len() + run > geometry.cell_count() {
                return Err(bad("too many cells"));
            }
            states.extend(std::iter::repeat_n(state, run));
        }
        if states.len() != geometry.cell_count() {
            return Err(bad("cell count does not match dims"));
        }
        Ok(Self { geometry, states })
    }

    pub fn explored_area(&self) -> f64 {
        let g = &self.geometry;
        let explored = self
            .states
            .chunks(g.dims[2])
            .filter(|col| col.iter().any(|s| *s != CellState::Unknown))
            .count();
        explored as f64 * g.resolution * g.resolution
    }
}

struct Face {
    normal: [i32; 3],
    corners: [[i32; 3]; 4],
}

// Corners are listed counter-clockwise seen from outside.
const FACES: [Face; 6] = [
    Face { normal: [-1, 0, 0], corners: [[0, 0, 0], [0, 0, 1], [0, 1, 1], [0, 1, 0]] },
    Face { normal: [1, 0, 0], corners: [[1, 0, 0], [1, 1, 0], [1, 1, 1], [1, 0, 1]] },
    Face { normal: [0, -1, 0], corners: [[0, 0, 0], [1, 0, 0], [1, 0, 1], [0, 0, 1]] },
    Face { normal: [0, 1, 0], corners: [[0, 1, 0], [0, 1, 1], [1, 1, 1], [1, 1, 0]] },
    Face { normal: [0, 0, -1], corners: [[0, 0, 0], [0, 1, 0], [1, 1, 0], [1, 0, 0]] },
    Face { normal: [0, 0, 1], corners: [[0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]] },
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurfaceMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl SurfaceMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Wavefront OBJ text (`v` lines, then 1-based `f` lines).
    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }
}

/// Planning snapshot: inflated occupancy where only `Free` cells are traversable.
#[derive(Debug, Clone, PartialEq)]
pub struct InflatedGrid {
    geometry: GridGeometry,
    states: Vec<CellState>,
}

impl InflatedGrid {
    pub fn from_states(geometry: GridGeometry, states: Vec<CellState>) -> Self {
        assert_eq!(states.len(), geometry.cell_count(), "state count must match dims");
        Self { geometry, states }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn state(&self, idx: GridIndex) -> CellState {
        if self.geometry.contains(idx) {
            self.states[self.geometry.linear(idx)]
        } else {
            CellState::Unknown
        }
    }

    #[inline]
    pub fn is_free(&self, idx: GridIndex) -> bool {
        self.geometry.contains(idx) && self.states[self.geometry.linear(idx)] == CellState::Free
    }

    pub fn cell_at(&self, p: &Vec3) -> CellState {
        self.state(self.geometry.index_unchecked(p))
    }

    pub fn is_free_at(&self, p: &Vec3) -> bool {
        self.is_free(self.geometry.index_unchecked(p))
    }

    /// True when every voxel touched by the segment is free.
    pub fn segment_is_free(&self, a: &Vec3, b: &Vec3) -> bool {
        segment_supercover(&self.geometry, a, b).into_iter().all(|c| self.is_free(c))
    }

    pub fn states(&self) -> &[CellState] {
        &self.states
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn geom(n: usize, res: f64) -> GridGeometry {
        GridGeometry::centered(Vec3::zeros(), [n as f64 * res; 3], res).unwrap()
    }

    fn cloud(points: Vec<Vec3>) -> PointCloud {
        PointCloud::new(points, FrameId::W, CloudSource::Robot, 0.0).unwrap()
    }

    /// Marches the segment in steps of `step` and records every voxel visited.
    fn march(geom: &GridGeometry, from: &Vec3, to: &Vec3, step: f64) -> BTreeSet<GridIndex> {
        let len = (to - from).norm();
        let n = (len / step).ceil() as usize;
        let mut out = BTreeSet::new();
        for s in 0..=n {
            let t = (s as f64 * step).min(len) / len.max(1e-300);
            if let Some(idx) = geom.index_of(&(from + (to - from) * t)) {
                out.insert(idx);
            }
        }
        out
    }

    /// Length of the segment portion inside one voxel.
    fn chord(geom: &GridGeometry, idx: GridIndex, a: &Vec3, b: &Vec3) -> f64 {
        let lo = geom.cell_min(idx);
        let hi = lo + Vec3::repeat(geom.resolution);
        segment_box_interval(a, b, &lo, &hi).map_or(0.0, |(t0, t1)| (t1 - t0) * (b - a).norm())
    }

    #[test]
    fn paper_grid_has_hundred_cubed_cells() {
        let g = GridGeometry::centered(Vec3::new(0.0, 0.0, 1.0), [20.0; 3], 0.2).unwrap();
        assert_eq!(g.dims, [100, 100, 100]);
        assert_eq!(OccupancyGrid::new(g).states().len(), 1_000_000);
    }

    #[test]
    fn axis_ray_marks_endpoint_and_intermediate_cells() {
        let g = geom(100, 0.2);
        let mut grid = OccupancyGrid::new(g);
        grid.insert_cloud(&cloud(vec![Vec3::new(1.0, 0.0, 0.0)]), &Vec3::zeros()).unwrap();
        // Integer oracle: sensor voxel index 50, endpoint 1.0 m / 0.2 m = 5 voxels further.
        let base = 50;
        assert_eq!(grid.state(GridIndex::new(base + 5, base, base)), CellState::Occupied);
        for i in base + 1..base + 5 {
            assert_eq!(grid.state(GridIndex::new(i, base, base)), CellState::Free, "voxel {i}");
        }
        assert_eq!(grid.state(GridIndex::new(base, base, base)), CellState::Free);
        assert_eq!(grid.state(GridIndex::new(base + 6, base, base)), CellState::Unknown);
        assert_eq!(grid.known_count(), 6);
    }

    #[test]
    fn empty_cloud_changes_nothing() {
        let mut grid = OccupancyGrid::new(geom(20, 0.2));
        let before = grid.clone();
        grid.insert_cloud(&cloud(vec![]), &Vec3::zeros()).unwrap();
        assert_eq!(grid, before);
    }

    #[test]
    fn insert_rejects_non_world_cloud() {
        let mut grid = OccupancyGrid::new(geom(20, 0.2));
        let c = PointCloud::new(vec![Vec3::x()], FrameId::B, CloudSource::Robot, 0.0).unwrap();
        assert!(matches!(grid.insert_cloud(&c, &Vec3::zeros()), Err(MapError::FrameMismatch { .. })));
    }

    #[test]
    fn non_finite_points_rejected() {
        let r = PointCloud::new(vec![Vec3::new(f64::NAN, 0.0, 0.0)], FrameId::W, CloudSource::Robot, 0.0);
        assert_eq!(r, Err(MapError::NonFinitePoint));
    }

    #[test]
    fn ray_leaving_grid_is_truncated() {
        let g = geom(10, 0.2);
        let mut grid = OccupancyGrid::new(g);
        grid.insert_cloud(&cloud(vec![Vec3::new(5.0, 0.05, 0.05)]), &Vec3::new(0.05, 0.05, 0.05)).unwrap();
        // 5 voxels from the sensor voxel to the +x boundary, all free, no hit anywhere.
        let states = grid.states();
        assert_eq!(states.iter().filter(|s| **s == CellState::Free).count(), 5);
        assert_eq!(states.iter().filter(|s| **s == CellState::Occupied).count(), 0);
    }

    #[test]
    fn repeated_hits_classify_occupied() {
        let g = geom(20, 0.2);
        let mut grid = OccupancyGrid::new(g);
        let p = Vec3::new(0.5, 0.3, 0.1);
        for _ in 0..3 {
            grid.insert_cloud(&cloud(vec![p]), &Vec3::new(-1.0, 0.0, 0.0)).unwrap();
        }
        let idx = g.index_of(&p).unwrap();
        // 3 * 0.85 = 2.55, below the 3.5 clamp and above the 0.0 threshold.
        assert!((grid.log_odds(idx).unwrap() - 2.55).abs() < 1e-5);
        assert_eq!(grid.cell_at(&p), CellState::Occupied);
    }

    #[test]
    fn log_odds_clamped() {
        let g = geom(4, 0.2);
        let mut grid = OccupancyGrid::new(g);
        let idx = GridIndex::new(1, 1, 1);
        for _ in 0..20 {
            grid.observe(idx, true);
        }
        assert_eq!(grid.log_odds(idx), Some(3.5));
        for _ in 0..40 {
            grid.observe(idx, false);
        }
        assert_eq!(grid.log_odds(idx), Some(-2.0));
        assert_eq!(grid.state(idx), CellState::Free);
    }

    #[test]
    fn cell_at_unknown_cases() {
        let grid = OccupancyGrid::new(geom(10, 0.2));
        assert_eq!(grid.cell_at(&Vec3::zeros()), CellState::Unknown);
        assert_eq!(grid.cell_at(&Vec3::new(50.0, 0.0, 0.0)), CellState::Unknown);
    }

    #[test]
    fn operator_cloud_reinforces_robot_voxel() {
        let g = geom(40, 0.2);
        let mut grid = OccupancyGrid::new(g);
        let p = Vec3::new(1.1, 0.1, 0.1);
        grid.insert_cloud(&cloud(vec![p]), &Vec3::new(0.1, 0.1, 0.1)).unwrap();
        let idx = g.index_of(&p).unwrap();
        let before = grid.log_odds(idx).unwrap();
        let h_to_w = RigidTransform::from_translation(FrameId::H, FrameId::W, Vec3::new(0.1, 1.1, 0.1));
        let local = h_to_w.invert().apply(&p);
        let op = PointCloud::new(vec![local], FrameId::H, CloudSource::Operator, 0.0).unwrap();
        grid.merge_operator_cloud(&op, &h_to_w).unwrap();
        assert!(grid.log_odds(idx).unwrap() > before);
        assert_eq!(grid.state(idx), CellState::Occupied);
    }

    #[test]
    fn operator_cloud_reveals_unseen_region() {
        let g = geom(40, 0.2);
        let mut grid = OccupancyGrid::new(g);
        grid.insert_cloud(&cloud(vec![Vec3::new(1.1, 0.1, 0.1)]), &Vec3::new(0.1, 0.1, 0.1)).unwrap();
        let before: Vec<bool> = (0..g.cell_count()).map(|n| grid.is_known(g.unlinear(n))).collect();

        let h_to_w = RigidTransform::from_yaw(FrameId::H, FrameId::W, 0.5, Vec3::new(-2.0, -2.0, 0.3));
        let target = Vec3::new(-0.9, -2.7, 0.5);
        let op = PointCloud::new(vec![h_to_w.invert().apply(&target)], FrameId::H, CloudSource::Operator, 0.0)
            .unwrap();
        grid.merge_operator_cloud(&op, &h_to_w).unwrap();

        // Oracle: traversal of the world-frame ray plus its endpoint.
        let ray = traverse_ray(&g, h_to_w.translation(), &target);
        let mut expected: BTreeSet<GridIndex> = ray.passed.iter().copied().collect();
        expected.insert(ray.end.unwrap());
        let mut gained = BTreeSet::new();
        for n in 0..g.cell_count() {
            let idx = g.unlinear(n);
            if grid.is_known(idx) && !before[n] {
                gained.insert(idx);
            }
        }
        assert!(!gained.is_empty());
        assert_eq!(gained, expected);
        assert_eq!(grid.state(g.index_of(&target).unwrap()), CellState::Occupied);
    }

    #[test]
    fn operator_cloud_requires_headset_frame() {
        let mut grid = OccupancyGrid::new(geom(10, 0.2));
        let c = cloud(vec![Vec3::x()]);
        let t = RigidTransform::between(FrameId::H, FrameId::W);
        assert!(grid.merge_operator_cloud(&c, &t).is_err());
        let before = grid.clone();
        let empty = PointCloud::empty(FrameId::H, CloudSource::Operator, 0.0);
        grid.merge_operator_cloud(&empty, &t).unwrap();
        assert_eq!(grid, before);
    }

    fn brute_inflate(grid: &OccupancyGrid, radius: f64) -> Vec<bool> {
        let g = grid.geometry();
        let occupied: Vec<GridIndex> = (0..g.cell_count())
            .map(|n| g.unlinear(n))
            .filter(|&c| grid.state(c) == CellState::Occupied)
            .collect();
        (0..g.cell_count())
            .map(|n| {
                let c = g.center(g.unlinear(n));
                occupied.iter().any(|&o| (g.center(o) - c).norm() <= radius + 1e-9)
            })
            .collect()
    }

    #[test]
    fn inflate_radius_zero_keeps_occupancy() {
        let g = geom(10, 0.2);
        let mut grid = OccupancyGrid::new(g);
        grid.observe(GridIndex::new(3, 3, 3), true);
        grid.observe(GridIndex::new(3, 4, 3), false);
        let inflated = grid.inflate(0.0);
        assert_eq!(inflated.states(), grid.states().as_slice());
    }

    #[test]
    fn inflate_one_cell_marks_face_neighbours() {
        let g = geom(10, 0.2);
        let mut grid = OccupancyGrid::new(g);
        for n in 0..g.cell_count() {
            grid.observe(g.unlinear(n), false);
        }
        let c = GridIndex::new(5, 5, 5);
        grid.observe(c, true);
        grid.observe(c, true);
        grid.observe(c, true);
        let inflated = grid.inflate(0.2);
        let blocked: BTreeSet<GridIndex> = (0..g.cell_count())
            .map(|n| g.unlinear(n))
            .filter(|&q| !inflated.is_free(q))
            .collect();
        let mut expected = BTreeSet::from([c]);
        for d in [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]] {
            expected.insert(c.offset(d));
        }
        assert_eq!(blocked, expected);
        let oracle = brute_inflate(&grid, 0.2);
        for n in 0..g.cell_count() {
            assert_eq!(!inflated.is_free(g.unlinear(n)), oracle[n]);
        }
    }

    #[test]
    fn inflate_matches_brute_force_at_0_3() {
        let g = geom(12, 0.2);
        let mut grid = OccupancyGrid::new(g);
        for n in 0..g.cell_count() {
            grid.observe(g.unlinear(n), false);
        }
        for c in [[2, 2, 2], [7, 3, 9], [11, 11, 0], [6, 6, 6]] {
            for _ in 0..3 {
                grid.observe(GridIndex::new(c[0], c[1], c[2]), true);
            }
        }
        let inflated = grid.inflate(0.3);
        let oracle = brute_inflate(&grid, 0.3);
        for n in 0..g.cell_count() {
            assert_eq!(!inflated.is_free(g.unlinear(n)), oracle[n], "cell {:?}", g.unlinear(n));
        }
    }

    #[test]
    fn inflate_keeps_unknown_blocked() {
        let g = geom(6, 0.2);
        let mut grid = OccupancyGrid::new(g);
        grid.observe(GridIndex::new(1, 1, 1), false);
        let inflated = grid.inflate(0.5);
        assert!(inflated.is_free(GridIndex::new(1, 1, 1)));
        assert!(!inflated.is_free(GridIndex::new(1, 1, 2)));
        assert_eq!(inflated.state(GridIndex::new(1, 1, 2)), CellState::Unknown);
    }

    fn brute_face_count(grid: &OccupancyGrid) -> usize {
        let g = grid.geometry();
        let mut faces = 0;
        for n in 0..g.cell_count() {
            let c = g.unlinear(n);
            if grid.state(c) != CellState::Occupied {
                continue;
            }
            for d in [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]] {
                if grid.state(c.offset(d)) != CellState::Occupied {
                    faces += 1;
                }
            }
        }
        faces
    }

    #[test]
    fn mesh_examples() {
        let g = geom(6, 0.2);
        let mut grid = OccupancyGrid::new(g);
        assert!(grid.extract_mesh().is_empty());

        grid.observe(GridIndex::new(2, 2, 2), true);
        let mesh = grid.extract_mesh();
        assert_eq!(mesh.triangles.len(), 12);
        assert_eq!(mesh.vertices.len(), 8);

        grid.observe(GridIndex::new(3, 2, 2), true);
        let mesh = grid.extract_mesh();
        assert_eq!(brute_face_count(&grid), 10);
        assert_eq!(mesh.triangles.len(), 20);
    }

    #[test]
    fn mesh_triangles_are_valid_and_outward() {
        let g = geom(6, 0.2);
        let mut grid = OccupancyGrid::new(g);
        grid.observe(GridIndex::new(2, 2, 2), true);
        let mesh = grid.extract_mesh();
        let center = g.center(GridIndex::new(2, 2, 2));
        for t in &mesh.triangles {
            let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
            let n = (b - a).cross(&(c - a));
            assert!(n.norm() > 1e-12, "degenerate triangle");
            assert!(n.dot(&(a - center)) > 0.0, "inward facing triangle");
        }
        let obj = mesh.to_obj();
        assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 8);
        assert_eq!(obj.lines().filter(|l| l.starts_with("f ")).count(), 12);
    }

    #[test]
    fn explored_area_examples() {
        let g = geom(10, 0.2);
        let mut grid = OccupancyGrid::new(g);
        assert_eq!(grid.explored_area(), 0.0);
        grid.observe(GridIndex::new(1, 1, 1), false);
        grid.observe(GridIndex::new(1, 1, 5), true);
        assert!((grid.explored_area() - 0.04).abs() < 1e-12);
    }

    #[test]
    fn changes_are_reported_once() {
        let g = geom(6, 0.2);
        let mut grid = OccupancyGrid::new(g);
        grid.observe(GridIndex::new(1, 1, 1), true);
        grid.observe(GridIndex::new(1, 1, 1), true);
        grid.observe(GridIndex::new(2, 1, 1), false);
        let ch = grid.take_changes();
        assert_eq!(ch.len(), 2);
        assert!(grid.take_mesh_dirty());
        assert!(!grid.take_mesh_dirty());
        assert!(grid.take_changes().is_empty());
        grid.observe(GridIndex::new(2, 1, 1), false);
        assert!(grid.take_changes().is_empty());
    }

    #[test]
    fn rle_round_trip() {
        let g = geom(8, 0.25);
        let mut grid = OccupancyGrid::new(g);
        grid.insert_cloud(&cloud(vec![Vec3::new(0.7, 0.3, -0.2), Vec3::new(-0.6, 0.1, 0.4)]), &Vec3::zeros())
            .unwrap();
        let text = grid.export_rle();
        let parsed = GridExport::parse(&text).unwrap();
        assert_eq!(parsed.geometry, g);
        assert_eq!(parsed.states, grid.states());
        assert_eq!(parsed.explored_area(), grid.explored_area());
        assert!(GridExport::parse("origin 0 0 0\nresolution 1\ndims 1 1 1\ncells U2\n").is_err());
        assert!(GridExport::parse("origin 0 0\n").is_err());
    }

    #[test]
    fn supercover_includes_grazed_corners() {
        let g = geom(10, 1.0);
        let a = g.center(GridIndex::new(2, 2, 5));
        let b = g.center(GridIndex::new(3, 3, 5));
        let cells = segment_supercover(&g, &a, &b);
        for c in [[2, 2, 5], [3, 3, 5], [2, 3, 5], [3, 2, 5]] {
            assert!(cells.contains(&GridIndex::new(c[0], c[1], c[2])), "{c:?}");
        }
        assert_eq!(cells.len(), 4);
    }

    fn arb_point(lo: f64, hi: f64) -> impl Strategy<Value = Vec3> {
        prop::array::uniform3(lo..hi).prop_map(|a| Vec3::new(a[0], a[1], a[2]))
    }

    proptest! {
        #[test]
        fn tracked_inflation_matches_batch(
            updates in prop::collection::vec(((0i32..8, 0i32..8, 0i32..8), any::<bool>(), 1usize..4), 0..300),
            radius in prop::sample::select(vec![0.0, 0.2, 0.3, 0.45]),
            track_early in any::<bool>(),
        ) {
            let mut grid = OccupancyGrid::new(geom(8, 0.2));
            if track_early {
                grid.track_inflation(radius);
            }
            for (i, ((a, b, c), hit, times)) in updates.iter().enumerate() {
                for _ in 0..*times {
                    grid.observe(GridIndex::new(*a, *b, *c), *hit);
                }
                if !track_early && i == updates.len() / 2 {
                    grid.track_inflation(radius);
                }
            }
            if grid.tracked_inflation_radius().is_none() {
                grid.track_inflation(radius);
            }
            prop_assert_eq!(grid.inflated_snapshot().unwrap(), grid.inflate(radius));
        }

        #[test]
        fn dda_matches_ray_marching(from in arb_point(-1.9, 1.9), to in arb_point(-2.5, 2.5)) {
            let g = geom(20, 0.2);
            let ray = traverse_ray(&g, &from, &to);
            let step = g.resolution / 10.0;
            let mut marched = march(&g, &from, &to, step);
            if let Some(end) = ray.end {
                marched.remove(&end);
            }
            let dda: BTreeSet<GridIndex> = ray.passed.iter().copied().collect();
            prop_assert_eq!(dda.len(), ray.passed.len(), "DDA visited a voxel twice");
            for c in &marched {
                prop_assert!(dda.contains(c), "marcher found {:?} missed by DDA", c);
            }
            // Voxels the marcher can legitimately step over are those with a short chord.
            for c in dda.difference(&marched) {
                prop_assert!(chord(&g, *c, &from, &to) < step + 1e-12, "{:?}", c);
            }
            for w in ray.passed.windows(2) {
                let d = (w[0].i - w[1].i).abs() + (w[0].j - w[1].j).abs() + (w[0].k - w[1].k).abs();
                prop_assert_eq!(d, 1);
            }
        }

        #[test]
        fn known_cells_and_area_are_monotone(
            scans in prop::collection::vec((arb_point(-1.5, 1.5), prop::collection::vec(arb_point(-3.0, 3.0), 1..12)), 1..6)
        ) {
            let g = geom(20, 0.2);
            let mut grid = OccupancyGrid::new(g);
            let mut known = vec![false; g.cell_count()];
            let mut area = 0.0;
            for (origin, pts) in scans {
                grid.insert_cloud(&cloud(pts), &origin).unwrap();
                for (n, k) in known.iter_mut().enumerate() {
                    let now = grid.is_known(g.unlinear(n));
                    prop_assert!(now || !*k, "voxel reverted to unknown");
                    *k = now;
                }
                prop_assert!(grid.explored_area() >= area);
                area = grid.explored_area();
            }
        }

        #[test]
        fn mesh_faces_match_brute_force(cells in prop::collection::vec((0i32..8, 0i32..8, 0i32..8, any::<bool>()), 0..60)) {
            let g = geom(8, 0.2);
            let mut grid = OccupancyGrid::new(g);
            for (i, j, k, occ) in cells {
                grid.observe(GridIndex::new(i, j, k), occ);
            }
            let mesh = grid.extract_mesh();
            prop_assert_eq!(mesh.triangles.len(), 2 * brute_face_count(&grid));
            for t in &mesh.triangles {
                for &v in t {
                    prop_assert!((v as usize) < mesh.vertices.len());
                }
            }
        }

        #[test]
        fn inflation_matches_brute_force(
            cells in prop::collection::vec((0i32..10, 0i32..10, 0i32..10), 0..15),
            radius in 0.0f64..0.5,
        ) {
            let g = geom(10, 0.2);
            let mut grid = OccupancyGrid::new(g);
            for n in 0..g.cell_count() {
                grid.observe(g.unlinear(n), false);
            }
            for (i, j, k) in cells {
                for _ in 0..3 {
                    grid.observe(GridIndex::new(i, j, k), true);
                }
            }
            let inflated = grid.inflate(radius);
            let oracle = brute_inflate(&grid, radius);
            for n in 0..g.cell_count() {
                let idx = g.unlinear(n);
                prop_assert_eq!(!inflated.is_free(idx), oracle[n]);
                if grid.state(idx) == CellState::Occupied {
                    prop_assert!(!inflated.is_free(idx));
                }
            }
        }
    }
}
