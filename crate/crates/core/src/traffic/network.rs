use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lanes per approach: lane 0 carries through and right turns, lane 1 left turns.
pub const LANES_PER_APPROACH: usize = 2;
/// Approaches per intersection, in canonical N, E, S, W order.
pub const SIDES: usize = 4;
/// Incoming lanes per intersection.
pub const LANES_PER_INTERSECTION: usize = SIDES * LANES_PER_APPROACH;

/// Compass side of an intersection. The order doubles as the neighbour-slot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    North = 0,
    East = 1,
    South = 2,
    West = 3,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::North, Side::East, Side::South, Side::West];

    pub fn from_index(i: usize) -> Side {
        Self::ALL[i % 4]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn opposite(self) -> Side {
        Self::from_index(self.index() + 2)
    }

    /// Outgoing side when approaching from `self` and turning right (right-hand traffic).
    pub fn right_of_approach(self) -> Side {
        Self::from_index(self.index() + 3)
    }

    pub fn left_of_approach(self) -> Side {
        Self::from_index(self.index() + 1)
    }

    pub fn letter(self) -> char {
        ['N', 'E', 'S', 'W'][self.index()]
    }

    pub fn parse(c: &str) -> Option<Side> {
        match c {
            "N" | "n" => Some(Side::North),
            "E" | "e" => Some(Side::East),
            "S" | "s" => Some(Side::South),
            "W" | "w" => Some(Side::West),
            _ => None,
        }
    }
}

/// Kind of turn a movement makes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Turn {
    Through,
    Right,
    Left,
}

/// Lane index inside an approach used by a turn.
pub fn lane_for_turn(turn: Turn) -> usize {
    match turn {
        Turn::Left => 1,
        Turn::Through | Turn::Right => 0,
    }
}

/// Turn performed when entering from `from` and leaving through `to`.
pub fn turn_between(from: Side, to: Side) -> Option<Turn> {
    if to == from.opposite() {
        Some(Turn::Through)
    } else if to == from.right_of_approach() {
        Some(Turn::Right)
    } else if to == from.left_of_approach() {
        Some(Turn::Left)
    } else {
        None
    }
}

/// Outgoing sides reachable from a lane.
pub fn lane_exits(from: Side, lane: usize) -> Vec<Side> {
    if lane == 1 {
        vec![from.left_of_approach()]
    } else {
        vec![from.opposite(), from.right_of_approach()]
    }
}

/// Global id of the incoming lane `lane` on approach `side` of `intersection`.
pub fn lane_id(intersection: usize, side: Side, lane: usize) -> usize {
    intersection * LANES_PER_INTERSECTION + side.index() * LANES_PER_APPROACH + lane
}

/// Inverse of [`lane_id`].
pub fn lane_location(lane: usize) -> (usize, Side, usize) {
    let i = lane / LANES_PER_INTERSECTION;
    let local = lane % LANES_PER_INTERSECTION;
    (i, Side::from_index(local / LANES_PER_APPROACH), local % LANES_PER_APPROACH)
}

/// A set of simultaneously permitted incoming lanes (and all their movements).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    /// Local lane indices `side * 2 + lane`.
    pub lanes: Vec<usize>,
}

impl Phase {
    pub fn permits(&self, local_lane: usize) -> bool {
        self.lanes.contains(&local_lane)
    }
}

/// The four-phase plan used for every grid intersection:
/// NS-all, EW-all, NS-protected-left, EW-protected-left.
pub fn four_phase_plan() -> Vec<Phase> {
    let lanes = |sides: &[Side], only_left: bool| -> Vec<usize> {
        let mut v = Vec::new();
        for s in sides {
            for l in 0..LANES_PER_APPROACH {
                if !only_left || l == 1 {
                    v.push(s.index() * LANES_PER_APPROACH + l);
                }
            }
        }
        v.sort_unstable();
        v
    };
    vec![
        Phase { name: "NS".into(), lanes: lanes(&[Side::North, Side::South], false) },
        Phase { name: "EW".into(), lanes: lanes(&[Side::East, Side::West], false) },
        Phase { name: "NS-left".into(), lanes: lanes(&[Side::North, Side::South], true) },
        Phase { name: "EW-left".into(), lanes: lanes(&[Side::East, Side::West], true) },
    ]
}

/// Static description of one signalised intersection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub id: usize,
    pub row: usize,
    pub col: usize,
    pub phases: Vec<Phase>,
    /// Neighbouring intersection per side, `None` on the fringe.
    pub neighbors: [Option<usize>; 4],
    /// Length in metres of the incoming edge on each side.
    pub approach_length: [f64; 4],
}

impl Intersection {
    pub fn num_phases(&self) -> usize {
        self.phases.len()
    }
}

/// Endpoint of a directed edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Endpoint {
    Intersection(usize),
    Fringe,
}

/// A directed road segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: Endpoint,
    pub to: Endpoint,
    /// Side of `to` (or of `from` for exit edges) the edge attaches to.
    pub side: Side,
    /// Intersection the edge attaches to.
    pub at: usize,
    pub length: f64,
    pub lanes: usize,
}

/// Parameters for [`build_grid_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    /// Length of links between intersections (metres).
    pub edge_length: f64,
    /// Length of fringe entry edges; defaults to `edge_length`.
    #[serde(default)]
    pub fringe_length: Option<f64>,
}

/// The traffic graph: intersections, directed edges, adjacency and neighbourhoods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadNetwork {
    pub rows: usize,
    pub cols: usize,
    pub intersections: Vec<Intersection>,
    pub edges: Vec<Edge>,
    adjacency: Vec<Vec<u8>>,
}

/// Builds a `rows × cols` grid with uniform edge length.
pub fn build_grid(rows: usize, cols: usize, edge_length: f64) -> Result<RoadNetwork> {
    build_grid_with(GridSpec { rows, cols, edge_length, fringe_length: None })
}

pub fn build_grid_with(spec: GridSpec) -> Result<RoadNetwork> {
    let GridSpec { rows, cols, edge_length, fringe_length } = spec;
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!("grid needs positive dimensions, got {rows}x{cols}")));
    }
    let fringe = fringe_length.unwrap_or(edge_length);
    if !(edge_length > 0.0) || !(fringe > 0.0) {
        return Err(Error::InvalidArgument("edge lengths must be positive".into()));
    }
    let n = rows * cols;
    let mut intersections = Vec::with_capacity(n);
    for r in 0..rows {
        for c in 0..cols {
            let id = r * cols + c;
            let neighbors = [
                (r > 0).then(|| id - cols),
                (c + 1 < cols).then(|| id + 1),
                (r + 1 < rows).then(|| id + cols),
                (c > 0).then(|| id - 1),
            ];
            let mut approach_length = [edge_length; 4];
            for s in 0..4 {
                if neighbors[s].is_none() {
                    approach_length[s] = fringe;
                }
            }
            intersections.push(Intersection { id, row: r, col: c, phases: four_phase_plan(), neighbors, approach_length });
        }
    }
    let mut adjacency = vec![vec![0u8; n]; n];
    let mut edges = Vec::new();
    for x in &intersections {
        for side in Side::ALL {
            let from = match x.neighbors[side.index()] {
                Some(j) => {
                    adjacency[x.id][j] = 1;
                    Endpoint::Intersection(j)
                }
                None => Endpoint::Fringe,
            };
            edges.push(Edge {
                from,
                to: Endpoint::Intersection(x.id),
                side,
                at: x.id,
                length: x.approach_length[side.index()],
                lanes: LANES_PER_APPROACH,
            });
        }
    }
    for x in &intersections {
        for side in Side::ALL {
            if x.neighbors[side.index()].is_none() {
                edges.push(Edge {
                    from: Endpoint::Intersection(x.id),
                    to: Endpoint::Fringe,
                    side,
                    at: x.id,
                    length: fringe,
                    lanes: LANES_PER_APPROACH,
                });
            }
        }
    }
    Ok(RoadNetwork { rows, cols, intersections, edges, adjacency })
}

impl RoadNetwork {
    pub fn num_intersections(&self) -> usize {
        self.intersections.len()
    }

    pub fn num_lanes(&self) -> usize {
        self.intersections.len() * LANES_PER_INTERSECTION
    }

    /// `A[i][j] = 1` iff an edge connects `i` and `j`.
    pub fn adjacency(&self) -> &[Vec<u8>] {
        &self.adjacency
    }

    /// Neighbourhood `N(i)` in ascending id order.
    pub fn neighborhood(&self, i: usize) -> Vec<usize> {
        self.adjacency[i].iter().enumerate().filter(|(_, a)| **a == 1).map(|(j, _)| j).collect()
    }

    pub fn neighbor(&self, i: usize, side: Side) -> Option<usize> {
        self.intersections[i].neighbors[side.index()]
    }

    /// Slot (side) under which `j` appears in `i`'s neighbour list.
    pub fn slot_of(&self, i: usize, j: usize) -> Option<Side> {
        Side::ALL.into_iter().find(|s| self.neighbor(i, *s) == Some(j))
    }

    pub fn max_phases(&self) -> usize {
        self.intersections.iter().map(Intersection::num_phases).max().unwrap_or(0)
    }

    pub fn lane_length(&self, lane: usize) -> f64 {
        let (i, side, _) = lane_location(lane);
        self.intersections[i].approach_length[side.index()]
    }

    /// Fringe entry points `(intersection, side)`.
    pub fn fringe_entries(&self) -> Vec<(usize, Side)> {
        let mut v = Vec::new();
        for x in &self.intersections {
            for s in Side::ALL {
                if x.neighbors[s.index()].is_none() {
                    v.push((x.id, s));
                }
            }
        }
        v
    }

    /// Name of a fringe point, e.g. `r0c1:E`.
    pub fn fringe_name(&self, i: usize, side: Side) -> String {
        let x = &self.intersections[i];
        format!("r{}c{}:{}", x.row, x.col, side.letter())
    }

    /// Parses a fringe name produced by [`RoadNetwork::fringe_name`].
    pub fn parse_fringe(&self, name: &str) -> Result<(usize, Side)> {
        let bad = || Error::InvalidArgument(format!("bad fringe reference {name:?}"));
        let (node, side) = name.split_once(':').ok_or_else(bad)?;
        let side = Side::parse(side).ok_or_else(bad)?;
        let rest = node.strip_prefix('r').ok_or_else(bad)?;
        let (r, c) = rest.split_once('c').ok_or_else(bad)?;
        let r: usize = r.parse().map_err(|_| bad())?;
        let c: usize = c.parse().map_err(|_| bad())?;
        if r >= self.rows || c >= self.cols {
            return Err(bad());
        }
        let i = r * self.cols + c;
        if self.neighbor(i, side).is_some() {
            return Err(Error::InvalidArgument(format!("{name} is not on the fringe")));
        }
        Ok((i, side))
    }

    /// Shortest route by edge count from fringe entry `origin` to fringe exit
    /// `destination`, as `(intersection, outgoing side)` hops. Ties prefer
    /// through, then right, then left.
    pub fn route(&self, origin: (usize, Side), destination: (usize, Side)) -> Result<Vec<(usize, Side)>> {
        // BFS over approaches (intersection, entry side).
        let n = self.num_intersections();
        let idx = |i: usize, s: Side| i * 4 + s.index();
        let mut prev: Vec<Option<(usize, Side)>> = vec![None; n * 4];
        let mut seen = vec![false; n * 4];
        let mut queue = alloc::collections::VecDeque::new();
        seen[idx(origin.0, origin.1)] = true;
        queue.push_back(origin);
        while let Some((i, from)) = queue.pop_front() {
            for out in [from.opposite(), from.right_of_approach(), from.left_of_approach()] {
                match self.neighbor(i, out) {
                    None => {
                        if (i, out) == destination {
                            let mut hops = vec![(i, out)];
                            let mut cur = (i, from);
                            while let Some(p) = prev[idx(cur.0, cur.1)] {
                                let side_out = self.slot_of(p.0, cur.0).expect("adjacent");
                                hops.push((p.0, side_out));
                                cur = p;
                            }
                            hops.reverse();
                            return Ok(hops);
                        }
                    }
                    Some(j) => {
                        let entry = out.opposite();
                        if !seen[idx(j, entry)] {
                            seen[idx(j, entry)] = true;
                            prev[idx(j, entry)] = Some((i, from));
                            queue.push_back((j, entry));
                        }
                    }
                }
            }
        }
        Err(Error::InvalidArgument(format!(
            "no route from {} to {}",
            self.fringe_name(origin.0, origin.1),
            self.fringe_name(destination.0, destination.1)
        )))
    }
}
