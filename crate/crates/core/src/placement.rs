//! Stage placement on the 2D die mesh.
//!
//! Every pipeline stage occupies a `width × height` rectangle of dies (its
//! TP group). The grid is tiled into such blocks, left-over rows/columns stay
//! idle, and stages form a chain of edge-adjacent blocks so pipeline
//! neighbours are always physical neighbours.
//!
//! `GlobalCost = Σ Dist(S_i, S_i+1)·Comm_PP + Σ Dist(S_s, S_h)·Comm_pair·(1 + γ)`
//! where `Dist` is the Manhattan hop count between region centres and `γ`
//! the number of links a pair path shares with pipeline paths.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Largest pipeline depth placed by exhaustive branch-and-bound.
pub const EXHAUSTIVE_MAX_STAGES: usize = 10;

/// Annealing iterations above the exhaustive threshold.
pub const ANNEAL_ITERATIONS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord {
    pub x: u32,
    pub y: u32,
}

impl Coord {
    pub fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, o: Coord) -> u32 {
        self.x.abs_diff(o.x) + self.y.abs_diff(o.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkDir {
    /// `(x, y) – (x+1, y)`
    East,
    /// `(x, y) – (x, y+1)`
    South,
}

/// Undirected mesh link, named by its north-west endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Link {
    pub at: Coord,
    pub dir: LinkDir,
}

impl Link {
    /// Link joining two 4-neighbours.
    pub fn between(a: Coord, b: Coord) -> Link {
        debug_assert_eq!(a.manhattan(b), 1);
        let at = Coord::new(a.x.min(b.x), a.y.min(b.y));
        let dir = if a.y == b.y { LinkDir::East } else { LinkDir::South };
        Link { at, dir }
    }

    pub fn ends(&self) -> (Coord, Coord) {
        let b = match self.dir {
            LinkDir::East => Coord::new(self.at.x + 1, self.at.y),
            LinkDir::South => Coord::new(self.at.x, self.at.y + 1),
        };
        (self.at, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshGrid {
    pub cols: u32,
    pub rows: u32,
}

impl MeshGrid {
    pub fn new(cols: u32, rows: u32) -> Self {
        Self { cols, rows }
    }

    pub fn contains(&self, c: Coord) -> bool {
        c.x < self.cols && c.y < self.rows
    }

    pub fn has_link(&self, l: &Link) -> bool {
        let (a, b) = l.ends();
        self.contains(a) && self.contains(b)
    }
}

/// Physical footprint of one TP group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TpShape {
    pub width: u32,
    pub height: u32,
}

impl TpShape {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    pub fn area(&self) -> u32 {
        self.width * self.height
    }

    /// All rectangles of area `tp` that fit the grid.
    pub fn candidates(tp: u32, grid: MeshGrid) -> Vec<TpShape> {
        (1..=tp)
            .filter(|w| tp % w == 0)
            .map(|w| TpShape::new(w, tp / w))
            .filter(|s| s.width <= grid.cols && s.height <= grid.rows)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub anchor: Coord,
    pub width: u32,
    pub height: u32,
}

impl Region {
    /// Centre die, rounded toward the anchor.
    pub fn center(&self) -> Coord {
        Coord::new(
            self.anchor.x + (self.width - 1) / 2,
            self.anchor.y + (self.height - 1) / 2,
        )
    }

    pub fn contains(&self, c: Coord) -> bool {
        c.x >= self.anchor.x
            && c.x < self.anchor.x + self.width
            && c.y >= self.anchor.y
            && c.y < self.anchor.y + self.height
    }

    pub fn dies(&self) -> impl Iterator<Item = Coord> + '_ {
        (self.anchor.y..self.anchor.y + self.height)
            .flat_map(move |y| (self.anchor.x..self.anchor.x + self.width).map(move |x| Coord::new(x, y)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlacementMethod {
    Serpentine,
    Exhaustive,
    Annealed,
    Genetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementMap {
    pub grid: MeshGrid,
    pub shape: TpShape,
    /// Block coordinate of each stage, in pipeline order.
    pub blocks: Vec<Coord>,
    pub method: PlacementMethod,
}

impl PlacementMap {
    pub fn stages(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_grid(&self) -> MeshGrid {
        block_grid(self.grid, self.shape)
    }

    pub fn region(&self, stage: usize) -> Region {
        let b = self.blocks[stage];
        Region {
            anchor: Coord::new(b.x * self.shape.width, b.y * self.shape.height),
            width: self.shape.width,
            height: self.shape.height,
        }
    }

    pub fn regions(&self) -> Vec<Region> {
        (0..self.stages()).map(|s| self.region(s)).collect()
    }

    pub fn center(&self, stage: usize) -> Coord {
        self.region(stage).center()
    }

    pub fn dist(&self, a: usize, b: usize) -> u32 {
        self.center(a).manhattan(self.center(b))
    }

    /// Stage owning a die, if any.
    pub fn stage_at(&self, c: Coord) -> Option<usize> {
        let b = Coord::new(c.x / self.shape.width, c.y / self.shape.height);
        self.blocks.iter().position(|&x| x == b)
    }

    /// Consecutive stages sit in edge-adjacent blocks and no block repeats.
    pub fn is_valid_chain(&self) -> bool {
        chain_is_valid(&self.blocks, self.block_grid())
    }

    /// Text diagram: one cell per die, stage number (1-based) or `.`.
    pub fn render_grid(&self) -> String {
        let mut out = String::new();
        let width = format!("{}", self.stages()).len().max(1);
        for y in 0..self.grid.rows {
            for x in 0..self.grid.cols {
                let cell = match self.stage_at(Coord::new(x, y)) {
                    Some(s) if self.region(s).contains(Coord::new(x, y)) => format!("{}", s + 1),
                    _ => ".".to_string(),
                };
                let _ = write!(out, "{cell:>width$} ");
            }
            out.pop();
            out.push('\n');
        }
        out
    }
}

pub fn block_grid(grid: MeshGrid, shape: TpShape) -> MeshGrid {
    if shape.width == 0 || shape.height == 0 {
        return MeshGrid::new(0, 0);
    }
    MeshGrid::new(grid.cols / shape.width, grid.rows / shape.height)
}

fn chain_is_valid(blocks: &[Coord], bg: MeshGrid) -> bool {
    let mut seen = HashSet::new();
    blocks.iter().all(|b| bg.contains(*b) && seen.insert(*b))
        && blocks.windows(2).all(|w| w[0].manhattan(w[1]) == 1)
}

/// Boustrophedon order over the block grid.
pub fn serpentine_order(bg: MeshGrid) -> Vec<Coord> {
    let mut out = Vec::with_capacity((bg.cols * bg.rows) as usize);
    for y in 0..bg.rows {
        if y % 2 == 0 {
            out.extend((0..bg.cols).map(|x| Coord::new(x, y)));
        } else {
            out.extend((0..bg.cols).rev().map(|x| Coord::new(x, y)));
        }
    }
    out
}

fn check_fit(pp: usize, shape: TpShape, grid: MeshGrid) -> Result<MeshGrid> {
    let bg = block_grid(grid, shape);
    if pp == 0 {
        return Err(Error::InvalidArgument("pipeline needs at least one stage".into()));
    }
    if (bg.cols * bg.rows) < pp as u32 {
        return Err(Error::PlacementInfeasible(format!(
            "{pp} stages of {}x{} dies do not tile a {}x{} grid",
            shape.width, shape.height, grid.cols, grid.rows
        )));
    }
    Ok(bg)
}

pub fn serpentine_placement(pp: usize, shape: TpShape, grid: MeshGrid) -> Result<PlacementMap> {
    let bg = check_fit(pp, shape, grid)?;
    let mut blocks = serpentine_order(bg);
    blocks.truncate(pp);
    Ok(PlacementMap {
        grid,
        shape,
        blocks,
        method: PlacementMethod::Serpentine,
    })
}

/// Dimension-ordered (x then y) route between two dies.
pub fn xy_path(a: Coord, b: Coord) -> Vec<Link> {
    let mut path = Vec::with_capacity(a.manhattan(b) as usize);
    let mut cur = a;
    while cur.x != b.x {
        let nx = if b.x > cur.x { cur.x + 1 } else { cur.x - 1 };
        let next = Coord::new(nx, cur.y);
        path.push(Link::between(cur, next));
        cur = next;
    }
    while cur.y != b.y {
        let ny = if b.y > cur.y { cur.y + 1 } else { cur.y - 1 };
        let next = Coord::new(cur.x, ny);
        path.push(Link::between(cur, next));
        cur = next;
    }
    path
}

/// Shortest path minimising `Σ weight(link)`. Among equal-weight paths the
/// one taking x-steps earliest wins.
pub fn min_weight_shortest_path(a: Coord, b: Coord, weight: impl Fn(&Link) -> f64) -> Vec<Link> {
    let dx = a.x.abs_diff(b.x) as usize;
    let dy = a.y.abs_diff(b.y) as usize;
    let sx: i64 = if b.x >= a.x { 1 } else { -1 };
    let sy: i64 = if b.y >= a.y { 1 } else { -1 };
    let at = |i: usize, j: usize| {
        Coord::new(
            (i64::from(a.x) + sx * i as i64) as u32,
            (i64::from(a.y) + sy * j as i64) as u32,
        )
    };
    // best[i][j]: min weight from (i, j) to the target, walking backwards.
    let mut best = vec![vec![f64::INFINITY; dy + 1]; dx + 1];
    best[dx][dy] = 0.0;
    for i in (0..=dx).rev() {
        for j in (0..=dy).rev() {
            if i == dx && j == dy {
                continue;
            }
            let mut v = f64::INFINITY;
            if i < dx {
                v = v.min(weight(&Link::between(at(i, j), at(i + 1, j))) + best[i + 1][j]);
            }
            if j < dy {
                v = v.min(weight(&Link::between(at(i, j), at(i, j + 1))) + best[i][j + 1]);
            }
            best[i][j] = v;
        }
    }
    let (mut i, mut j) = (0, 0);
    let mut path = Vec::with_capacity(dx + dy);
    while i < dx || j < dy {
        let x_step = (i < dx).then(|| {
            let l = Link::between(at(i, j), at(i + 1, j));
            (weight(&l) + best[i + 1][j], l)
        });
        let y_step = (j < dy).then(|| {
            let l = Link::between(at(i, j), at(i, j + 1));
            (weight(&l) + best[i][j + 1], l)
        });
        match (x_step, y_step) {
            (Some((vx, lx)), Some((vy, _))) if vx <= vy => {
                path.push(lx);
                i += 1;
            }
            (Some((_, lx)), None) => {
                path.push(lx);
                i += 1;
            }
            (_, Some((_, ly))) => {
                path.push(ly);
                j += 1;
            }
            (None, None) => unreachable!(),
        }
    }
    path
}

/// Every shortest path between two dies, up to `limit` paths.
pub fn enumerate_shortest_paths(a: Coord, b: Coord, limit: usize) -> Vec<Vec<Link>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(c: Coord, b: Coord, cur: &mut Vec<Link>, out: &mut Vec<Vec<Link>>, limit: usize) {
        if out.len() >= limit {
            return;
        }
        if c == b {
            out.push(cur.clone());
            return;
        }
        if c.x != b.x {
            let n = Coord::new(if b.x > c.x { c.x + 1 } else { c.x - 1 }, c.y);
            cur.push(Link::between(c, n));
            rec(n, b, cur, out, limit);
            cur.pop();
        }
        if c.y != b.y {
            let n = Coord::new(c.x, if b.y > c.y { c.y + 1 } else { c.y - 1 });
            cur.push(Link::between(c, n));
            rec(n, b, cur, out, limit);
            cur.pop();
        }
    }
    rec(a, b, &mut cur, &mut out, limit);
    out
}

/// A checkpoint-offload relation as seen by placement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLoad {
    pub sender: usize,
    pub helper: usize,
    pub bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRoute {
    pub sender: usize,
    pub helper: usize,
    pub path: Vec<Link>,
    pub gamma: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutedPaths {
    pub pipeline: Vec<Vec<Link>>,
    pub pairs: Vec<PairRoute>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalCost {
    pub total: f64,
    pub pipeline_cost: f64,
    pub pair_cost: f64,
    pub pipeline_hops: u32,
    pub pair_hops: Vec<u32>,
    pub routes: RoutedPaths,
}

impl GlobalCost {
    pub fn total_hops(&self) -> u32 {
        self.pipeline_hops + self.pair_hops.iter().sum::<u32>()
    }

    pub fn mean_pair_hops(&self) -> f64 {
        if self.pair_hops.is_empty() {
            0.0
        } else {
            f64::from(self.pair_hops.iter().sum::<u32>()) / self.pair_hops.len() as f64
        }
    }
}

pub fn pipeline_paths(pm: &PlacementMap) -> Vec<Vec<Link>> {
    (1..pm.stages())
        .map(|s| xy_path(pm.center(s - 1), pm.center(s)))
        .collect()
}

/// Pipeline bytes per boundary, indexed by boundary; missing entries are 0.
pub fn global_cost(pm: &PlacementMap, comm_pp: &[f64], pairs: &[PairLoad]) -> Result<GlobalCost> {
    let p = pm.stages();
    for pr in pairs {
        if pr.sender >= p || pr.helper >= p {
            return Err(Error::InvalidArgument(format!(
                "pair ({}, {}) references an unplaced stage",
                pr.sender, pr.helper
            )));
        }
    }
    let pipe = pipeline_paths(pm);
    let pipe_links: HashSet<Link> = pipe.iter().flatten().copied().collect();
    let mut pipeline_cost = 0.0;
    let mut pipeline_hops = 0;
    for (b, path) in pipe.iter().enumerate() {
        let hops = path.len() as u32;
        pipeline_hops += hops;
        pipeline_cost += f64::from(hops) * comm_pp.get(b).copied().unwrap_or(0.0);
    }
    let mut pair_cost = 0.0;
    let mut pair_hops = Vec::with_capacity(pairs.len());
    let mut routes = Vec::with_capacity(pairs.len());
    for pr in pairs {
        let (a, b) = (pm.center(pr.sender), pm.center(pr.helper));
        let path = min_weight_shortest_path(a, b, |l| {
            if pipe_links.contains(l) {
                1.0
            } else {
                0.0
            }
        });
        let gamma = path.iter().filter(|l| pipe_links.contains(l)).count() as u32;
        let hops = path.len() as u32;
        pair_hops.push(hops);
        pair_cost += f64::from(hops) * pr.bytes * (1.0 + f64::from(gamma));
        routes.push(PairRoute {
            sender: pr.sender,
            helper: pr.helper,
            path,
            gamma,
        });
    }
    Ok(GlobalCost {
        total: pipeline_cost + pair_cost,
        pipeline_cost,
        pair_cost,
        pipeline_hops,
        pair_hops,
        routes: RoutedPaths {
            pipeline: pipe,
            pairs: routes,
        },
    })
}

fn chain_cost(
    blocks: &[Coord],
    grid: MeshGrid,
    shape: TpShape,
    comm_pp: &[f64],
    pairs: &[PairLoad],
) -> f64 {
    let pm = PlacementMap {
        grid,
        shape,
        blocks: blocks.to_vec(),
        method: PlacementMethod::Exhaustive,
    };
    global_cost(&pm, comm_pp, pairs).map(|c| c.total).unwrap_or(f64::INFINITY)
}

fn better(candidate: f64, incumbent: f64) -> bool {
    candidate < incumbent - 1e-12 * incumbent.abs()
}

/// Chain of adjacent regions minimising [`global_cost`]; never worse than
/// the serpentine layout, which it returns on ties.
pub fn location_aware_placement(
    pp: usize,
    shape: TpShape,
    grid: MeshGrid,
    comm_pp: &[f64],
    pairs: &[PairLoad],
    seed: u64,
) -> Result<PlacementMap> {
    let serp = serpentine_placement(pp, shape, grid)?;
    if pairs.is_empty() || pp == 1 {
        return Ok(serp);
    }
    if pp <= EXHAUSTIVE_MAX_STAGES {
        Ok(exhaustive_placement(&serp, comm_pp, pairs))
    } else {
        Ok(annealed_placement(&serp, comm_pp, pairs, seed, ANNEAL_ITERATIONS))
    }
}

struct Search<'a> {
    bg: MeshGrid,
    shape: TpShape,
    grid: MeshGrid,
    comm_pp: &'a [f64],
    pairs: &'a [PairLoad],
    pp: usize,
    best_cost: f64,
    best: Vec<Coord>,
    used: Vec<bool>,
    chain: Vec<Coord>,
}

impl Search<'_> {
    fn block_dist(&self, a: Coord, b: Coord) -> f64 {
        let dx = f64::from(a.x.abs_diff(b.x) * self.shape.width);
        let dy = f64::from(a.y.abs_diff(b.y) * self.shape.height);
        dx + dy
    }

    /// Lower bound for a partial chain: its pipeline hops plus pair hops
    /// with no conflicts.
    fn partial_bound(&self) -> f64 {
        let n = self.chain.len();
        let mut lb = 0.0;
        for b in 1..n {
            lb += self.block_dist(self.chain[b - 1], self.chain[b])
                * self.comm_pp.get(b - 1).copied().unwrap_or(0.0);
        }
        for pr in self.pairs {
            if pr.sender < n && pr.helper < n {
                lb += self.block_dist(self.chain[pr.sender], self.chain[pr.helper]) * pr.bytes;
            }
        }
        lb
    }

    fn idx(&self, c: Coord) -> usize {
        (c.y * self.bg.cols + c.x) as usize
    }

    fn dfs(&mut self) {
        if self.partial_bound() >= self.best_cost {
            return;
        }
        if self.chain.len() == self.pp {
            let c = chain_cost(&self.chain, self.grid, self.shape, self.comm_pp, self.pairs);
            if better(c, self.best_cost) {
                self.best_cost = c;
                self.best = self.chain.clone();
            }
            return;
        }
        let last = *self.chain.last().expect("non-empty chain");
        let steps: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];
        for (dx, dy) in steps {
            let nx = i64::from(last.x) + dx;
            let ny = i64::from(last.y) + dy;
            if nx < 0 || ny < 0 {
                continue;
            }
            let n = Coord::new(nx as u32, ny as u32);
            if !self.bg.contains(n) || self.used[self.idx(n)] {
                continue;
            }
            let i = self.idx(n);
            self.used[i] = true;
            self.chain.push(n);
            self.dfs();
            self.chain.pop();
            self.used[i] = false;
        }
    }
}

fn exhaustive_placement(serp: &PlacementMap, comm_pp: &[f64], pairs: &[PairLoad]) -> PlacementMap {
    let bg = serp.block_grid();
    let serp_cost = chain_cost(&serp.blocks, serp.grid, serp.shape, comm_pp, pairs);
    let mut s = Search {
        bg,
        shape: serp.shape,
        grid: serp.grid,
        comm_pp,
        pairs,
        pp: serp.stages(),
        best_cost: serp_cost,
        best: serp.blocks.clone(),
        used: vec![false; (bg.cols * bg.rows) as usize],
        chain: Vec::with_capacity(serp.stages()),
    };
    for y in 0..bg.rows {
        for x in 0..bg.cols {
            let c = Coord::new(x, y);
            let i = s.idx(c);
            s.used[i] = true;
            s.chain.push(c);
            s.dfs();
            s.chain.pop();
            s.used[i] = false;
        }
    }
    let method = if s.best == serp.blocks {
        PlacementMethod::Serpentine
    } else {
        PlacementMethod::Exhaustive
    };
    PlacementMap {
        grid: serp.grid,
        shape: serp.shape,
        blocks: s.best,
        method,
    }
}

fn neighbours(c: Coord, bg: MeshGrid) -> Vec<Coord> {
    let mut v = Vec::with_capacity(4);
    if c.x + 1 < bg.cols {
        v.push(Coord::new(c.x + 1, c.y));
    }
    if c.y + 1 < bg.rows {
        v.push(Coord::new(c.x, c.y + 1));
    }
    if c.x > 0 {
        v.push(Coord::new(c.x - 1, c.y));
    }
    if c.y > 0 {
        v.push(Coord::new(c.x, c.y - 1));
    }
    v
}

/// One random chain-preserving move: slither into a free cell or backbite
/// onto the chain itself. Returns `None` if the drawn move is impossible.
pub fn random_chain_move(chain: &[Coord], bg: MeshGrid, rng: &mut impl Rng) -> Option<Vec<Coord>> {
    let n = chain.len();
    if n < 2 {
        return None;
    }
    let mut c: Vec<Coord> = chain.to_vec();
    let from_tail = rng.gen_bool(0.5);
    if from_tail {
        c.reverse();
    }
    let head = c[0];
    let nb = neighbours(head, bg);
    let pick = nb[rng.gen_range(0..nb.len())];
    let mut out = if let Some(i) = c.iter().position(|&x| x == pick) {
        if i == 1 {
            return None;
        }
        c[..i].reverse();
        c
    } else {
        c.pop();
        c.insert(0, pick);
        c
    };
    if from_tail {
        out.reverse();
    }
    Some(out)
}

fn annealed_placement(
    serp: &PlacementMap,
    comm_pp: &[f64],
    pairs: &[PairLoad],
    seed: u64,
    iters: usize,
) -> PlacementMap {
    let bg = serp.block_grid();
    let cost = |b: &[Coord]| chain_cost(b, serp.grid, serp.shape, comm_pp, pairs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur = serp.blocks.clone();
    let mut cur_cost = cost(&cur);
    let mut best = cur.clone();
    let mut best_cost = cur_cost;
    let t0 = cur_cost.max(1e-30) * 0.05;
    for it in 0..iters {
        let temp = t0 * (1.0 - it as f64 / iters as f64) + 1e-30;
        let Some(next) = random_chain_move(&cur, bg, &mut rng) else {
            continue;
        };
        let c = cost(&next);
        if c <= cur_cost || rng.gen::<f64>() < ((cur_cost - c) / temp).exp() {
            cur = next;
            cur_cost = c;
            if better(c, best_cost) {
                best = cur.clone();
                best_cost = c;
            }
        }
    }
    let method = if best == serp.blocks {
        PlacementMethod::Serpentine
    } else {
        PlacementMethod::Annealed
    };
    PlacementMap {
        grid: serp.grid,
        shape: serp.shape,
        blocks: best,
        method,
    }
}
