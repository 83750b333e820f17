//! Grid path planning on an inflated occupancy snapshot.
//!
//! Moves are 26-connected without corner cutting: a diagonal move is legal only
//! when every voxel in its bounding box is free. Path lengths are kept as exact
//! step counts per move class, so two searches that find the same optimum report
//! bit-identical costs.
//!
//! Jump point search prunes with a local rule derived from move exchanges: a
//! turn from incoming direction `d` to `e` at voxel `n` is only kept when `e` is a
//! sub-direction of `d` or when every shorter detour and every reordering of the
//! two moves is blocked inside the 3x3x3 neighbourhood of `n`.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};
use std::f64::consts::SQRT_2;
use std::sync::OnceLock;

use nalgebra::Vector3;
use thiserror::Error;

use crate::mapping::InflatedGrid;
pub use crate::mapping::GridIndex;

type Vec3 = Vector3<f64>;

const SQRT_3: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("start voxel is not free")]
    StartOccupied,
    #[error("goal unreachable")]
    NoPath,
    #[error("no free voxel within search radius")]
    NoFreeCell,
}

/// Exact length of a grid path: number of axis, face-diagonal and corner-diagonal moves.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct StepCount {
    pub axis: u32,
    pub face: u32,
    pub corner: u32,
}

impl StepCount {
    /// Length in voxel units.
    pub fn length(&self) -> f64 {
        self.axis as f64 + self.face as f64 * SQRT_2 + self.corner as f64 * SQRT_3
    }

    fn add_moves(mut self, dir: [i32; 3], n: u32) -> Self {
        match support(dir) {
            1 => self.axis += n,
            2 => self.face += n,
            _ => self.corner += n,
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedPath {
    /// Voxel centers in `W`.
    pub waypoints: Vec<Vec3>,
    /// Meters.
    pub cost: f64,
    /// Exact move counts when the path comes straight from a grid search.
    pub steps: Option<StepCount>,
}

impl PlannedPath {
    pub fn polyline_length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }
}

fn support(d: [i32; 3]) -> usize {
    d.iter().filter(|&&c| c != 0).count()
}

fn dir_length(d: [i32; 3]) -> f64 {
    match support(d) {
        0 => 0.0,
        1 => 1.0,
        2 => SQRT_2,
        _ => SQRT_3,
    }
}

/// The 26 unit moves in lexicographic order.
fn dirs() -> &'static [[i32; 3]; 26] {
    static DIRS: OnceLock<[[i32; 3]; 26]> = OnceLock::new();
    DIRS.get_or_init(|| {
        let mut out = [[0; 3]; 26];
        let mut n = 0;
        for i in -1..=1 {
            for j in -1..=1 {
                for k in -1..=1 {
                    if (i, j, k) != (0, 0, 0) {
                        out[n] = [i, j, k];
                        n += 1;
                    }
                }
            }
        }
        out
    })
}

fn dir_index(d: [i32; 3]) -> usize {
    let n = ((d[0] + 1) * 9 + (d[1] + 1) * 3 + (d[2] + 1)) as usize;
    if n > 13 {
        n - 1
    } else {
        n
    }
}

/// Non-zero vectors obtained by zeroing some components of `d`, `d` included.
fn sub_directions(d: [i32; 3]) -> Vec<[i32; 3]> {
    let mut out = Vec::new();
    for mask in 1..8u32 {
        let mut e = [0; 3];
        let mut valid = true;
        for a in 0..3 {
            if mask & (1 << a) != 0 {
                if d[a] == 0 {
                    valid = false;
                }
                e[a] = d[a];
            }
        }
        if valid {
            out.push(e);
        }
    }
    out.sort();
    out.dedup();
    out
}

fn is_sub_direction(e: [i32; 3], d: [i32; 3]) -> bool {
    (0..3).all(|a| e[a] == 0 || e[a] == d[a])
}

/// Bit of a neighbourhood offset in the 3x3x3 cube mask; `None` outside the cube.
fn cube_bit(o: [i32; 3]) -> Option<u32> {
    if o.iter().all(|c| (-1..=1).contains(c)) {
        Some(((o[0] + 1) * 9 + (o[1] + 1) * 3 + (o[2] + 1)) as u32)
    } else {
        None
    }
}

fn add(a: [i32; 3], b: [i32; 3]) -> [i32; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: [i32; 3], b: [i32; 3]) -> [i32; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Cube mask of voxels that must be free to move by `e` from `from` (relative to the cube center).
fn move_mask(from: [i32; 3], e: [i32; 3]) -> Option<u32> {
    let mut mask = 0;
    for s in sub_directions(e) {
        mask |= 1 << cube_bit(add(from, s))?;
    }
    Some(mask)
}

struct TurnRule {
    dir: usize,
    legal: u32,
    /// Each mask describes one equal-or-shorter alternative route from the parent.
    alternatives: Vec<u32>,
}

struct DirTable {
    natural: Vec<usize>,
    turns: Vec<TurnRule>,
}

fn build_table(d1: [i32; 3]) -> DirTable {
    let all = dirs();
    let natural: Vec<usize> = sub_directions(d1).into_iter().map(dir_index).collect();
    let parent = sub([0; 3], d1);
    let mut turns = Vec::new();
    for (i2, &d2) in all.iter().enumerate() {
        if natural.contains(&i2) {
            continue;
        }
        let legal = move_mask([0; 3], d2).expect("unit move stays in cube");
        let through = dir_length(d1) + dir_length(d2);
        let v = add(d1, d2);
        let mut alternatives = Vec::new();
        if v == [0; 3] {
            // Reversal: staying at the parent is trivially shorter.
            alternatives.push(0);
        } else if v.iter().all(|c| (-1..=1).contains(c)) {
            if let Some(m) = move_mask(parent, v) {
                alternatives.push(m);
            }
        }
        for &e1 in all.iter() {
            let e2 = sub(v, e1);
            if support(e2) == 0 || !e2.iter().all(|c| (-1..=1).contains(c)) {
                continue;
            }
            let len = dir_length(e1) + dir_length(e2);
            let is_swap = e1 == d2 && e2 == d1 && is_sub_direction(d1, d2);
            if len < through - 1e-12 || is_swap {
                let mid = add(parent, e1);
                if let (Some(a), Some(b)) = (move_mask(parent, e1), move_mask(mid, e2)) {
                    alternatives.push(a | b);
                }
            }
        }
        turns.push(TurnRule { dir: i2, legal, alternatives });
    }
    DirTable { natural, turns }
}

fn tables() -> &'static Vec<DirTable> {
    static TABLES: OnceLock<Vec<DirTable>> = OnceLock::new();
    TABLES.get_or_init(|| dirs().iter().map(|&d| build_table(d)).collect())
}

const FULL_CUBE: u32 = (1 << 27) - 1;

fn turn_is_forced(rule: &TurnRule, free: u32) -> bool {
    rule.legal & free == rule.legal && !rule.alternatives.iter().any(|&m| m & free == m)
}

struct Search<'a> {
    grid: &'a InflatedGrid,
    goal: GridIndex,
}

impl<'a> Search<'a> {
    #[inline]
    fn free(&self, c: GridIndex) -> bool {
        self.grid.is_free(c)
    }

    fn cube_mask(&self, c: GridIndex) -> u32 {
        let mut mask = 0;
        let mut bit = 0;
        for i in -1..=1 {
            for j in -1..=1 {
                for k in -1..=1 {
                    if self.free(c.offset([i, j, k])) {
                        mask |= 1 << bit;
                    }
                    bit += 1;
                }
            }
        }
        mask
    }

    fn legal_move(&self, from: GridIndex, d: [i32; 3]) -> bool {
        match support(d) {
            1 => self.free(from.offset(d)),
            _ => sub_directions(d).into_iter().all(|e| self.free(from.offset(e))),
        }
    }

    fn has_forced(&self, c: GridIndex, d: usize) -> bool {
        let free = self.cube_mask(c);
        free != FULL_CUBE && tables()[d].turns.iter().any(|r| turn_is_forced(r, free))
    }

    /// Walks from `from` along `d` and returns the first jump point with its step count.
    fn jump(&self, from: GridIndex, d: usize) -> Option<(GridIndex, u32)> {
        let dv = dirs()[d];
        let mut cur = from;
        let mut steps = 0u32;
        loop {
            if !self.legal_move(cur, dv) {
                return None;
            }
            cur = cur.offset(dv);
            steps += 1;
            if cur == self.goal || self.has_forced(cur, d) {
                return Some((cur, steps));
            }
            if support(dv) > 1 {
                for &e in &tables()[d].natural {
                    if e != d && self.jump(cur, e).is_some() {
                        return Some((cur, steps));
                    }
                }
            }
        }
    }

    /// Successor directions for a voxel entered along `d`.
    fn successors(&self, c: GridIndex, d: usize) -> u32 {
        let table = &tables()[d];
        let mut out = 0u32;
        for &e in &table.natural {
            out |= 1 << e;
        }
        let free = self.cube_mask(c);
        if free != FULL_CUBE {
            for r in &table.turns {
                if turn_is_forced(r, free) {
                    out |= 1 << r.dir;
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy)]
struct Node {
    g: StepCount,
    parent: usize,
    /// Incoming directions that reach this node at cost `g` (bit 26 marks the start).
    incoming: u32,
    expanded: u32,
}

const START_BIT: u32 = 1 << 26;

#[derive(PartialEq)]
struct Key(f64);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn heuristic(a: GridIndex, b: GridIndex) -> f64 {
    let d = [(a.i - b.i) as f64, (a.j - b.j) as f64, (a.k - b.k) as f64];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

fn endpoints(grid: &InflatedGrid, start: &Vec3, goal: &Vec3) -> Result<(GridIndex, GridIndex), PlanError> {
    let geom = grid.geometry();
    let s = geom.index_unchecked(start);
    if !grid.is_free(s) {
        return Err(PlanError::StartOccupied);
    }
    let g = geom.index_unchecked(goal);
    if !grid.is_free(g) {
        return Err(PlanError::NoPath);
    }
    Ok((s, g))
}

fn finish(grid: &InflatedGrid, cells: Vec<GridIndex>, steps: StepCount) -> PlannedPath {
    let geom = grid.geometry();
    let mut kept: Vec<GridIndex> = Vec::with_capacity(cells.len());
    for c in cells {
        if kept.len() >= 2 {
            let a = kept[kept.len() - 2];
            let b = kept[kept.len() - 1];
            let d1 = normalize(sub(b.as_array(), a.as_array()));
            let d2 = normalize(sub(c.as_array(), b.as_array()));
            if d1 == d2 {
                kept.pop();
            }
        }
        kept.push(c);
    }
    PlannedPath {
        waypoints: kept.iter().map(|&c| geom.center(c)).collect(),
        cost: steps.length() * geom.resolution,
        steps: Some(steps),
    }
}

fn normalize(d: [i32; 3]) -> [i32; 3] {
    d.map(i32::signum)
}

/// Generic best-first search; `expand` yields `(successor, direction index, move count)`.
fn best_first<F>(grid: &InflatedGrid, start: GridIndex, goal: GridIndex, mut expand: F) -> Result<PlannedPath, PlanError>
where
    F: FnMut(GridIndex, u32, &mut Vec<(GridIndex, usize, u32)>),
{
    let geom = grid.geometry();
    if start == goal {
        return Ok(finish(grid, vec![start], StepCount::default()));
    }
    let mut nodes: HashMap<usize, Node> = HashMap::new();
    let mut open = BinaryHeap::new();
    let mut counter = 0u64;
    let s = geom.linear(start);
    nodes.insert(s, Node { g: StepCount::default(), parent: s, incoming: START_BIT, expanded: 0 });
    open.push(Reverse((Key(heuristic(start, goal)), counter, s, StepCount::default().length().to_bits())));
    let mut succ = Vec::new();
    while let Some(Reverse((_, _, n, g_bits))) = open.pop() {
        let node = nodes[&n];
        if node.g.length().to_bits() != g_bits {
            continue;
        }
        let pending = node.incoming & !node.expanded;
        if pending == 0 {
            continue;
        }
        let cell = geom.unlinear(n);
        if cell == goal {
            let mut cells = vec![cell];
            let mut cur = n;
            while cur != s {
                cur = nodes[&cur].parent;
                cells.push(geom.unlinear(cur));
            }
            cells.reverse();
            return Ok(finish(grid, cells, node.g));
        }
        nodes.get_mut(&n).unwrap().expanded |= pending;
        succ.clear();
        expand(cell, pending, &mut succ);
        for &(next, dir, count) in &succ {
            let g = node.g.add_moves(dirs()[dir], count);
            let m = geom.linear(next);
            let bit = 1u32 << dir;
            let push = match nodes.get_mut(&m) {
                None => {
                    nodes.insert(m, Node { g, parent: n, incoming: bit, expanded: 0 });
                    true
                }
                Some(rec) if rec.g == g => {
                    let fresh = rec.incoming & bit == 0;
                    rec.incoming |= bit;
                    fresh && rec.expanded & bit == 0
                }
                Some(rec) if g.length() < rec.g.length() => {
                    *rec = Node { g, parent: n, incoming: bit, expanded: 0 };
                    true
                }
                Some(_) => false,
            };
            if push {
                counter += 1;
                let f = g.length() + heuristic(next, goal);
                open.push(Reverse((Key(f), counter, m, g.length().to_bits())));
            }
        }
    }
    Err(PlanError::NoPath)
}

/// Jump point search between the voxels containing `start` and `goal`.
pub fn plan_jps(grid: &InflatedGrid, start: &Vec3, goal: &Vec3) -> Result<PlannedPath, PlanError> {
    let (s, g) = endpoints(grid, start, goal)?;
    let search = Search { grid, goal: g };
    best_first(grid, s, g, |cell, incoming, out| {
        let mut dirs_out = 0u32;
        if incoming & START_BIT != 0 {
            dirs_out = (1 << 26) - 1;
        }
        for d in 0..26 {
            if incoming & (1 << d) != 0 {
                dirs_out |= search.successors(cell, d);
            }
        }
        for d in 0..26 {
            if dirs_out & (1 << d) != 0 {
                if let Some((next, steps)) = search.jump(cell, d) {
                    out.push((next, d, steps));
                }
            }
        }
    })
}

/// Plain A* over all 26 moves with the same metric and tie-breaking.
pub fn plan_astar(grid: &InflatedGrid, start: &Vec3, goal: &Vec3) -> Result<PlannedPath, PlanError> {
    let (s, g) = endpoints(grid, start, goal)?;
    let search = Search { grid, goal: g };
    best_first(grid, s, g, |cell, _incoming, out| {
        for (d, &dv) in dirs().iter().enumerate() {
            if search.legal_move(cell, dv) {
                out.push((cell.offset(dv), d, 1));
            }
        }
    })
}

/// Engine used by the mission: JPS, or A* when built with `force-astar`.
pub fn plan(grid: &InflatedGrid, start: &Vec3, goal: &Vec3) -> Result<PlannedPath, PlanError> {
    if cfg!(feature = "force-astar") {
        plan_astar(grid, start, goal)
    } else {
        plan_jps(grid, start, goal)
    }
}

/// Center of the free voxel closest to `p` (ties broken by lexicographic index),
/// or `p` itself when its voxel is already free.
pub fn nearest_free_pose(grid: &InflatedGrid, p: &Vec3, max_radius: f64) -> Result<Vec3, PlanError> {
    let geom = grid.geometry();
    let origin = geom.index_unchecked(p);
    if grid.is_free(origin) {
        return Ok(*p);
    }
    let res = geom.resolution;
    let max_shell = (max_radius / res).ceil() as i32 + 1;
    let mut best: Option<(f64, GridIndex)> = None;
    for r in 1..=max_shell {
        // Any voxel in shell r is at least (r - 1/2) voxels from p.
        if let Some((d, _)) = best {
            if (r as f64 - 0.5) * res > d {
                break;
            }
        }
        for di in -r..=r {
            for dj in -r..=r {
                for dk in -r..=r {
                    if di.abs().max(dj.abs()).max(dk.abs()) != r {
                        continue;
                    }
                    let c = origin.offset([di, dj, dk]);
                    if !grid.is_free(c) {
                        continue;
                    }
                    let d = (geom.center(c) - p).norm();
                    if d > max_radius {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bd, bc)) => d < bd || (d == bd && c < bc),
                    };
                    if better {
                        best = Some((d, c));
                    }
                }
            }
        }
    }
    best.map(|(_, c)| geom.center(c)).ok_or(PlanError::NoFreeCell)
}

/// Greedy line-of-sight simplification: from each kept waypoint jump to the
/// furthest later waypoint that is still visible.
pub fn shortcut(path: &PlannedPath, grid: &InflatedGrid) -> PlannedPath {
    let w = &path.waypoints;
    if w.len() <= 2 {
        return path.clone();
    }
    let mut kept = vec![w[0]];
    let mut anchor = 0;
    while anchor < w.len() - 1 {
        let mut next = anchor + 1;
        for j in (anchor + 2..w.len()).rev() {
            if grid.segment_is_free(&w[anchor], &w[j]) {
                next = j;
                break;
            }
        }
        kept.push(w[next]);
        anchor = next;
    }
    let out = PlannedPath { waypoints: kept, cost: 0.0, steps: None };
    let cost = out.polyline_length();
    PlannedPath { cost, ..out }
}
