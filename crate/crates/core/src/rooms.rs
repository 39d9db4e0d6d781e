//! Four rooms joined by locked hallway doors, plus a key that has to be
//! picked up (and may be dropped) before a door can be opened.
//!
//! State variables are `position` (traversable cells), `doors_state` (one
//! open bit per hallway) and `key_state` (eleven stages, stage 6 meaning the
//! key is held). Navigation actions act on `{position, doors_state}` and key
//! actions on `{key_state}`, so a hallway option and a key option can run
//! side by side.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use crate::concurrent::{build_partition, ActionSpace, CoherencePartition, Framework};
use crate::error::{Error, Result};
use crate::mdp::{FactoredState, FlatMdp, PrimitiveAction, StateSpace, StateVariable, VarSet};
use crate::option::MarkovOption;

pub const NUM_HALLWAYS: usize = 4;
pub const KEY_STATES: usize = 11;
/// The key is held.
pub const KEY_HOLDING: usize = 6;
/// First stage after a drop.
pub const KEY_DROPPED: usize = 7;
pub const KEY_DROP_PROB: f64 = 0.3;
pub const MOVE_PROB: f64 = 0.9;
pub const SLIP_PROB: f64 = 1.0 / 30.0;
pub const STEP_REWARD: f64 = -1.0;

pub const POSITION: &str = "position";
pub const DOORS: &str = "doors_state";
pub const KEY: &str = "key_state";

/// Primitive action indices.
pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const ROOM_NOP: usize = 4;
pub const GET_KEY: usize = 5;
pub const KEY_NOP: usize = 6;
pub const PUTBACK_KEY: usize = 7;

const ACTION_NAMES: [&str; 8] = ["up", "down", "left", "right", "room_nop", "get_key", "key_nop", "putback_key"];
const MOVES: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// 13×13 grid, walls along row 6 and column 6, one hallway in each wall
/// segment; start in the upper-left room and goal at hallway 3.
pub const DEFAULT_LAYOUT: &str = "\
#############
#S....#.....#
#.....#.....#
#.....1.....#
#.....#.....#
#.....#.....#
###0#####2###
#.....#.....#
#.....#.....#
#.....3.....#
#.....#.....#
#.....#.....#
#############
";

pub const DEFAULT_GOAL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cell {
    Wall,
    Floor,
    Hallway(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoomsLayout {
    rows: usize,
    cols: usize,
    cells: Vec<Cell>,
    start: (usize, usize),
    goal: usize,
    /// Traversable cells in row-major order; the index is the position value.
    positions: Vec<(usize, usize)>,
    position_of: Vec<Option<usize>>,
    hallway_position: [usize; NUM_HALLWAYS],
    /// Floor positions of each room.
    rooms: Vec<Vec<usize>>,
    /// Hallways bordering each room, ascending.
    room_hallways: Vec<Vec<usize>>,
}

impl Default for RoomsLayout {
    fn default() -> Self {
        Self::parse(DEFAULT_LAYOUT, DEFAULT_GOAL).expect("built-in layout is valid")
    }
}

impl RoomsLayout {
    /// Reads a grid of `#` (wall), `.` (floor), `0`–`3` (hallways) and `S`
    /// (the start, a floor cell). Blank lines are ignored.
    pub fn parse(text: &str, goal: usize) -> Result<Self> {
        let lines: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        if lines.is_empty() {
            return Err(Error::Layout("empty grid".into()));
        }
        let cols = lines[0].chars().count();
        let rows = lines.len();
        let mut cells = Vec::with_capacity(rows * cols);
        let mut start = None;
        let mut hallways = [None; NUM_HALLWAYS];
        for (r, line) in lines.iter().enumerate() {
            if line.chars().count() != cols {
                return Err(Error::Layout(format!("row {r} has a different width")));
            }
            for (c, ch) in line.chars().enumerate() {
                let cell = match ch {
                    '#' => Cell::Wall,
                    '.' => Cell::Floor,
                    'S' => {
                        if start.replace((r, c)).is_some() {
                            return Err(Error::Layout("more than one start cell".into()));
                        }
                        Cell::Floor
                    }
                    '0'..='3' => {
                        let h = ch as usize - '0' as usize;
                        if hallways[h].replace((r, c)).is_some() {
                            return Err(Error::Layout(format!("hallway {h} appears twice")));
                        }
                        Cell::Hallway(h)
                    }
                    other => return Err(Error::Layout(format!("unknown cell `{other}` at ({r}, {c})"))),
                };
                cells.push(cell);
            }
        }
        let start = start.ok_or_else(|| Error::Layout("no start cell".into()))?;
        if let Some(h) = hallways.iter().position(Option::is_none) {
            return Err(Error::Layout(format!("hallway {h} is missing")));
        }
        if goal >= NUM_HALLWAYS {
            return Err(Error::Layout(format!("goal hallway {goal} does not exist")));
        }

        let mut positions = Vec::new();
        let mut position_of = vec![None; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                if cells[r * cols + c] != Cell::Wall {
                    position_of[r * cols + c] = Some(positions.len());
                    positions.push((r, c));
                }
            }
        }

        let mut layout = Self {
            rows,
            cols,
            cells,
            start,
            goal,
            positions,
            position_of,
            hallway_position: [0; NUM_HALLWAYS],
            rooms: Vec::new(),
            room_hallways: Vec::new(),
        };
        for (h, cell) in hallways.iter().enumerate() {
            let (r, c) = cell.expect("checked above");
            layout.hallway_position[h] = layout.position_of[r * cols + c].expect("hallways are traversable");
        }
        layout.find_rooms()?;
        Ok(layout)
    }

    /// Connected floor regions; every hallway must border exactly two of them.
    fn find_rooms(&mut self) -> Result<()> {
        let n = self.positions.len();
        let mut room_of = vec![usize::MAX; n];
        let mut rooms: Vec<Vec<usize>> = Vec::new();
        for p in 0..n {
            if room_of[p] != usize::MAX || self.cell_at(p) != Cell::Floor {
                continue;
            }
            let id = rooms.len();
            let mut members = vec![p];
            room_of[p] = id;
            let mut queue = VecDeque::from([p]);
            while let Some(x) = queue.pop_front() {
                for d in 0..4 {
                    if let Some(y) = self.neighbor(x, d) {
                        if room_of[y] == usize::MAX && self.cell_at(y) == Cell::Floor {
                            room_of[y] = id;
                            members.push(y);
                            queue.push_back(y);
                        }
                    }
                }
            }
            members.sort_unstable();
            rooms.push(members);
        }
        let mut room_hallways = vec![Vec::new(); rooms.len()];
        for h in 0..NUM_HALLWAYS {
            let hp = self.hallway_position[h];
            let mut adjacent: Vec<usize> = (0..4)
                .filter_map(|d| self.neighbor(hp, d))
                .filter(|&y| self.cell_at(y) == Cell::Floor)
                .map(|y| room_of[y])
                .collect();
            adjacent.sort_unstable();
            adjacent.dedup();
            if adjacent.len() != 2 {
                return Err(Error::Layout(format!(
                    "hallway {h} borders {} rooms instead of two",
                    adjacent.len()
                )));
            }
            for r in adjacent {
                room_hallways[r].push(h);
            }
        }
        self.rooms = rooms;
        self.room_hallways = room_hallways;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn start(&self) -> (usize, usize) {
        self.start
    }

    pub fn goal(&self) -> usize {
        self.goal
    }

    pub fn num_positions(&self) -> usize {
        self.positions.len()
    }

    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.cols + col]
    }

    pub fn cell_at(&self, position: usize) -> Cell {
        let (r, c) = self.positions[position];
        self.cell(r, c)
    }

    pub fn coords(&self, position: usize) -> (usize, usize) {
        self.positions[position]
    }

    pub fn position(&self, row: usize, col: usize) -> Option<usize> {
        if row < self.rows && col < self.cols {
            self.position_of[row * self.cols + col]
        } else {
            None
        }
    }

    pub fn hallway_position(&self, h: usize) -> usize {
        self.hallway_position[h]
    }

    pub fn hallway_at(&self, position: usize) -> Option<usize> {
        match self.cell_at(position) {
            Cell::Hallway(h) => Some(h),
            _ => None,
        }
    }

    pub fn rooms(&self) -> &[Vec<usize>] {
        &self.rooms
    }

    pub fn room_hallways(&self, room: usize) -> &[usize] {
        &self.room_hallways[room]
    }

    /// Traversable cell one move away in direction `d`, if any.
    pub fn neighbor(&self, position: usize, d: usize) -> Option<usize> {
        let (r, c) = self.positions[position];
        let (dr, dc) = MOVES[d];
        let nr = r.checked_add_signed(dr)?;
        let nc = c.checked_add_signed(dc)?;
        self.position(nr, nc)
    }

    /// Where one attempted move in direction `d` ends, with the door bits after it.
    pub fn attempt_move(&self, position: usize, doors: usize, key: usize, d: usize) -> (usize, usize) {
        let Some(target) = self.neighbor(position, d) else {
            return (position, doors);
        };
        let mut next_doors = doors;
        if let Some(h) = self.hallway_at(target) {
            if doors & (1 << h) == 0 && key != KEY_HOLDING {
                return (position, doors);
            }
            next_doors |= 1 << h;
        }
        if let Some(h) = self.hallway_at(position) {
            next_doors &= !(1 << h);
        }
        (target, next_doors)
    }
}

impl fmt::Display for RoomsLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.rows {
            for c in 0..self.cols {
                let ch = match self.cell(r, c) {
                    Cell::Wall => '#',
                    Cell::Floor if (r, c) == self.start => 'S',
                    Cell::Floor => '.',
                    Cell::Hallway(h) => (b'0' + h as u8) as char,
                };
                write!(f, "{ch}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Outcomes `(position, doors, prob)` of a navigation action.
pub fn navigation_outcomes(layout: &RoomsLayout, position: usize, doors: usize, key: usize, action: usize) -> Vec<(usize, usize, f64)> {
    if action == ROOM_NOP {
        return vec![(position, doors, 1.0)];
    }
    let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(4);
    for d in 0..4 {
        let p = if d == action { MOVE_PROB } else { SLIP_PROB };
        let (np, nd) = layout.attempt_move(position, doors, key, d);
        match out.iter_mut().find(|o| o.0 == np && o.1 == nd) {
            Some(o) => o.2 += p,
            None => out.push((np, nd, p)),
        }
    }
    out
}

/// Outcomes `(key, prob)` of a key action.
pub fn key_outcomes(key: usize, action: usize) -> Vec<(usize, f64)> {
    match action {
        GET_KEY if key == KEY_HOLDING => vec![(key, 1.0)],
        GET_KEY => vec![((key + 1) % KEY_STATES, 1.0)],
        KEY_NOP if key == KEY_HOLDING => vec![(KEY_DROPPED, KEY_DROP_PROB), (KEY_HOLDING, 1.0 - KEY_DROP_PROB)],
        PUTBACK_KEY if key == KEY_HOLDING => vec![(0, 1.0)],
        _ => vec![(key, 1.0)],
    }
}

fn state_space(layout: &RoomsLayout) -> Result<StateSpace> {
    StateSpace::new(vec![
        StateVariable::new(POSITION, layout.num_positions()),
        StateVariable::new(DOORS, 1 << NUM_HALLWAYS),
        StateVariable::new(KEY, KEY_STATES),
    ])
}

pub fn build_rooms_mdp(layout: &RoomsLayout, discount: f64) -> Result<FlatMdp> {
    let space = state_space(layout)?;
    let nav = space.var_set(&[POSITION, DOORS])?;
    let key = space.var_set(&[KEY])?;
    let actions = ACTION_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| PrimitiveAction::new(*name, if i <= ROOM_NOP { nav.clone() } else { key.clone() }))
        .collect();
    FlatMdp::from_fn(space, actions, discount, |s, a| {
        let (p, d, k) = (s.get(0), s.get(1), s.get(2));
        if a <= ROOM_NOP {
            navigation_outcomes(layout, p, d, k, a)
                .into_iter()
                .map(|(np, nd, prob)| (FactoredState::new(vec![np, nd, k]), prob, STEP_REWARD))
                .collect()
        } else {
            key_outcomes(k, a)
                .into_iter()
                .map(|(nk, prob)| (FactoredState::new(vec![p, d, nk]), prob, STEP_REWARD))
                .collect()
        }
    })
}

/// Breadth-first distances to `target` over `scope`; `None` outside it or if unreachable.
fn distances(layout: &RoomsLayout, scope: &[bool], target: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; layout.num_positions()];
    dist[target] = Some(0);
    let mut queue = VecDeque::from([target]);
    while let Some(x) = queue.pop_front() {
        for d in 0..4 {
            if let Some(y) = layout.neighbor(x, d) {
                if scope[y] && dist[y].is_none() {
                    dist[y] = Some(dist[x].expect("queued cells have a distance") + 1);
                    queue.push_back(y);
                }
            }
        }
    }
    dist
}

/// Two options per room, one toward each bordering hallway, named
/// `hallway_{2·room + i}` in room order, followed by `room_nop`.
pub fn build_hallway_options(mdp: &FlatMdp, layout: &RoomsLayout) -> Result<Vec<MarkovOption>> {
    let space = mdp.space();
    let controlled = space.var_set(&[POSITION, DOORS])?;
    let observed = space.var_set(&[KEY])?;
    let mut options = Vec::new();
    for (room, cells) in layout.rooms().iter().enumerate() {
        let hallways = layout.room_hallways(room);
        for &target in hallways {
            let name = format!("hallway_{}", options.len());
            let target_pos = layout.hallway_position(target);
            let mut scope = vec![false; layout.num_positions()];
            for &c in cells {
                scope[c] = true;
            }
            for &h in hallways {
                scope[layout.hallway_position(h)] = true;
            }
            let dist = distances(layout, &scope, target_pos);
            let mut action = vec![None; layout.num_positions()];
            for p in (0..layout.num_positions()).filter(|&p| scope[p] && p != target_pos) {
                let dp = dist[p].ok_or_else(|| {
                    Error::Layout(format!("hallway {target} is unreachable from inside room {room}"))
                })?;
                action[p] = (0..4).find(|&d| layout.neighbor(p, d).is_some_and(|y| dist[y] == Some(dp - 1)));
            }
            let adjacent: Vec<bool> = (0..layout.num_positions())
                .map(|p| cells.contains(&p) && dist[p] == Some(1))
                .collect();
            let entry: Vec<bool> = (0..layout.num_positions())
                .map(|p| cells.contains(&p) || (scope[p] && p != target_pos))
                .collect();
            let option = MarkovOption::tabulate(
                mdp,
                name,
                controlled.clone(),
                observed.clone(),
                |s| entry[s.get(0)],
                |s| action[s.get(0)].map_or_else(Vec::new, |a| vec![(a, 1.0)]),
                |s| {
                    let p = s.get(0);
                    if !scope[p] || p == target_pos {
                        1.0
                    } else if adjacent[p] && s.get(1) & (1 << target) == 0 && s.get(2) != KEY_HOLDING {
                        1.0
                    } else {
                        0.0
                    }
                },
            )?;
            options.push(option);
        }
    }
    options.push(MarkovOption::tabulate(
        mdp,
        "room_nop",
        controlled,
        VarSet::empty(),
        |_| true,
        |_| vec![(ROOM_NOP, 1.0)],
        |_| 1.0,
    )?);
    Ok(options)
}

/// `pickup_key`, `key_nop` and `putback_key`.
pub fn build_key_options(mdp: &FlatMdp) -> Result<Vec<MarkovOption>> {
    let key = mdp.space().var_set(&[KEY])?;
    let k = |s: &FactoredState| s.get(2);
    Ok(vec![
        MarkovOption::tabulate(
            mdp,
            "pickup_key",
            key.clone(),
            VarSet::empty(),
            |s| k(s) != KEY_HOLDING,
            |_| vec![(GET_KEY, 1.0)],
            |s| if k(s) == KEY_HOLDING { 1.0 } else { 0.0 },
        )?,
        MarkovOption::tabulate(mdp, "key_nop", key.clone(), VarSet::empty(), |_| true, |_| vec![(KEY_NOP, 1.0)], |_| 1.0)?,
        MarkovOption::tabulate(
            mdp,
            "putback_key",
            key,
            VarSet::empty(),
            |s| k(s) == KEY_HOLDING,
            |_| vec![(PUTBACK_KEY, 1.0)],
            |_| 1.0,
        )?,
    ])
}

/// Navigation options in one class, key options in the other.
pub fn build_partition_rooms(mdp: &FlatMdp, layout: &RoomsLayout) -> Result<CoherencePartition> {
    let nav = build_hallway_options(mdp, layout)?;
    let key = build_key_options(mdp)?;
    let n_nav = nav.len();
    let options: Vec<Arc<MarkovOption>> = nav.into_iter().chain(key).map(Arc::new).collect();
    let n = options.len();
    build_partition(options, Some(vec![(0..n_nav).collect(), (n_nav..n).collect()]))
}

/// The assembled domain: layout, flat MDP and coherence partition.
#[derive(Clone, Debug)]
pub struct RoomsDomain {
    layout: RoomsLayout,
    mdp: FlatMdp,
    partition: CoherencePartition,
}

impl RoomsDomain {
    pub fn new(layout: RoomsLayout, discount: f64) -> Result<Self> {
        let mdp = build_rooms_mdp(&layout, discount)?;
        let partition = build_partition_rooms(&mdp, &layout)?;
        Ok(Self {
            layout,
            mdp,
            partition,
        })
    }

    pub fn with_default_layout(discount: f64) -> Result<Self> {
        Self::new(RoomsLayout::default(), discount)
    }

    pub fn layout(&self) -> &RoomsLayout {
        &self.layout
    }

    pub fn mdp(&self) -> &FlatMdp {
        &self.mdp
    }

    pub fn partition(&self) -> &CoherencePartition {
        &self.partition
    }

    pub fn action_space(&self, framework: Framework) -> Result<ActionSpace> {
        ActionSpace::for_framework(&self.partition, framework)
    }

    pub fn state(&self, position: usize, doors: usize, key: usize) -> Result<usize> {
        self.mdp.space().try_ordinal(&FactoredState::new(vec![position, doors, key]))
    }

    /// Start cell, doors closed, key at stage 0.
    pub fn start_state(&self) -> usize {
        let (r, c) = self.layout.start();
        let p = self.layout.position(r, c).expect("start is traversable");
        self.state(p, 0, 0).expect("start is a valid state")
    }

    pub fn is_goal(&self, s: usize) -> bool {
        self.mdp.space().value(s, 0) == self.layout.hallway_position(self.layout.goal())
    }

    pub fn terminal_states(&self) -> Vec<bool> {
        (0..self.mdp.num_states()).map(|s| self.is_goal(s)).collect()
    }

    /// Parses `start` or `row,col,doors,key` (doors as a bit mask).
    pub fn parse_state(&self, spec: &str) -> Result<usize> {
        if spec.trim() == "start" {
            return Ok(self.start_state());
        }
        let parts: Vec<usize> = spec
            .split(',')
            .map(|x| x.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidState(format!("cannot parse state `{spec}`")))?;
        let [r, c, d, k] = parts[..] else {
            return Err(Error::InvalidState(format!("state `{spec}` needs row,col,doors,key")));
        };
        let p = self
            .layout
            .position(r, c)
            .ok_or_else(|| Error::InvalidState(format!("cell ({r}, {c}) is not traversable")))?;
        self.state(p, d, k)
    }

    pub fn describe(&self, s: usize) -> String {
        let st = self.mdp.space().state(s);
        let (r, c) = self.layout.coords(st.get(0));
        format!("({r},{c}) doors={:04b} key=S{}", st.get(1), st.get(2))
    }

    /// One joint step of a navigation and a key action computed directly
    /// from the movement and key rules, as `(next, prob)` sorted by state.
    pub fn direct_joint_step(&self, s: usize, nav_action: usize, key_action: usize) -> Vec<(usize, f64)> {
        let st = self.mdp.space().state(s);
        let mut out: Vec<(usize, f64)> = Vec::new();
        for (p, d, pn) in navigation_outcomes(&self.layout, st.get(0), st.get(1), st.get(2), nav_action) {
            for (k, pk) in key_outcomes(st.get(2), key_action) {
                let y = self.state(p, d, k).expect("rule outputs are in range");
                out.push((y, pn * pk));
            }
        }
        out.sort_by_key(|e| e.0);
        out
    }

    /// Whether some policy reaches the goal from the start.
    pub fn goal_reachable(&self) -> bool {
        let n = self.mdp.num_states();
        let mut seen = vec![false; n];
        let start = self.start_state();
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(s) = queue.pop_front() {
            if self.is_goal(s) {
                return true;
            }
            for a in 0..self.mdp.num_actions() {
                for o in self.mdp.row(s, a) {
                    if o.prob > 0.0 && !seen[o.next] {
                        seen[o.next] = true;
                        queue.push_back(o.next);
                    }
                }
            }
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concurrent::{enumerate_multi_options, TerminationRule};
    use crate::mdp::validate_mdp;
    use crate::option::option_step_distribution;
    use std::sync::OnceLock;

    fn domain() -> &'static RoomsDomain {
        static D: OnceLock<RoomsDomain> = OnceLock::new();
        D.get_or_init(|| RoomsDomain::with_default_layout(0.9).unwrap())
    }

    fn pos(r: usize, c: usize) -> usize {
        domain().layout().position(r, c).unwrap()
    }

    fn row_of(s: usize, a: usize) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = domain().mdp().row(s, a).iter().map(|o| (o.next, o.prob)).collect();
        v.sort_by_key(|e| e.0);
        v
    }

    #[test]
    fn default_layout_shape() {
        let l = RoomsLayout::default();
        assert_eq!(l.num_positions(), 104);
        assert_eq!(l.rooms().len(), 4);
        assert!(l.rooms().iter().all(|r| r.len() == 25));
        assert_eq!(l.hallway_position(0), l.position(6, 3).unwrap());
        assert_eq!(l.hallway_position(3), l.position(9, 6).unwrap());
        assert_eq!(l.to_string(), DEFAULT_LAYOUT);
        let d = domain();
        assert_eq!(d.mdp().num_states(), 104 * 16 * 11);
        assert_eq!(d.mdp().num_states(), 18_304);
        assert!(validate_mdp(d.mdp()).is_valid());
        assert!(d.goal_reachable());
    }

    #[test]
    fn malformed_layouts_are_rejected() {
        assert!(RoomsLayout::parse("", 0).is_err());
        assert!(RoomsLayout::parse("#S#\n#x#\n", 0).is_err());
        let no_start = DEFAULT_LAYOUT.replace('S', ".");
        assert!(RoomsLayout::parse(&no_start, 3).is_err());
        let no_h2 = DEFAULT_LAYOUT.replace('2', "#");
        assert!(RoomsLayout::parse(&no_h2, 3).is_err());
        assert!(RoomsLayout::parse(DEFAULT_LAYOUT, 4).is_err());
        let ragged = DEFAULT_LAYOUT.replacen("#.....#.....#\n", "#.....#....#\n", 1);
        assert!(RoomsLayout::parse(&ragged, 3).is_err());
    }

    #[test]
    fn open_floor_move_and_wall_slip() {
        let d = domain();
        // (2,2) is surrounded by floor: every direction moves
        let s = d.state(pos(2, 2), 0, 0).unwrap();
        let row = row_of(s, RIGHT);
        let expect = |r, c, p| (d.state(pos(r, c), 0, 0).unwrap(), p);
        let mut want = vec![expect(2, 3, 0.9), expect(1, 2, SLIP_PROB), expect(3, 2, SLIP_PROB), expect(2, 1, SLIP_PROB)];
        want.sort_by_key(|e| e.0);
        assert_eq!(row.len(), 4);
        for (a, b) in row.iter().zip(&want) {
            assert_eq!(a.0, b.0);
            assert!((a.1 - b.1).abs() < 1e-15);
        }
        // the corner start cell redirects the up and left slips to staying
        let s = d.start_state();
        let row = row_of(s, RIGHT);
        let stay = row.iter().find(|e| e.0 == s).unwrap().1;
        assert!((stay - 2.0 * SLIP_PROB).abs() < 1e-15);
        assert!((row.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn closed_door_blocks_without_key() {
        let d = domain();
        // (5,3) sits right above hallway 0
        let s = d.state(pos(5, 3), 0, 0).unwrap();
        let row = row_of(s, DOWN);
        let stay = row.iter().find(|e| e.0 == s).unwrap().1;
        assert!((stay - 0.9).abs() < 1e-15);
        assert!(row.iter().all(|e| d.mdp().space().value(e.0, 0) != pos(6, 3)));
        // holding the key opens the door
        let s = d.state(pos(5, 3), 0, KEY_HOLDING).unwrap();
        let into = d.state(pos(6, 3), 1, KEY_HOLDING).unwrap();
        let row = row_of(s, DOWN);
        assert!((row.iter().find(|e| e.0 == into).unwrap().1 - 0.9).abs() < 1e-15);
    }

    #[test]
    fn leaving_a_hallway_relocks_it() {
        let d = domain();
        let s = d.state(pos(6, 3), 1, KEY_HOLDING).unwrap();
        for &(y, _) in &row_of(s, DOWN) {
            let st = d.mdp().space().state(y);
            if st.get(0) != pos(6, 3) {
                assert_eq!(st.get(1) & 1, 0);
            } else {
                assert_eq!(st.get(1) & 1, 1);
            }
        }
        // also without the key: exiting is always possible
        let s = d.state(pos(6, 3), 1, 0).unwrap();
        let out = d.state(pos(7, 3), 0, 0).unwrap();
        assert!((row_of(s, DOWN).iter().find(|e| e.0 == out).unwrap().1 - 0.9).abs() < 1e-15);
    }

    #[test]
    fn room_nop_keeps_position() {
        let d = domain();
        let s = d.state(pos(3, 4), 5, 2).unwrap();
        assert_eq!(row_of(s, ROOM_NOP), vec![(s, 1.0)]);
    }

    #[test]
    fn key_process_rules() {
        assert_eq!(key_outcomes(0, GET_KEY), vec![(1, 1.0)]);
        assert_eq!(key_outcomes(10, GET_KEY), vec![(0, 1.0)]);
        assert_eq!(key_outcomes(KEY_HOLDING, PUTBACK_KEY), vec![(0, 1.0)]);
        assert_eq!(key_outcomes(3, KEY_NOP), vec![(3, 1.0)]);
        let drop = key_outcomes(KEY_HOLDING, KEY_NOP);
        assert_eq!(drop[0], (KEY_DROPPED, 0.3));
        assert!((drop[1].1 - 0.7).abs() < 1e-15);
    }

    #[test]
    fn pickup_durations() {
        let d = domain();
        let pickup = d.partition().option("pickup_key").unwrap();
        let dist = option_step_distribution(d.mdp(), pickup, 12).unwrap();
        for (key, k) in [(0, 6), (KEY_DROPPED, 10)] {
            let s = d.state(pos(1, 1), 0, key).unwrap();
            let m = dist.starts.iter().find(|(st, _)| **st == s).unwrap().1.clone();
            let held = d.state(pos(1, 1), 0, KEY_HOLDING).unwrap();
            assert_eq!(m.steps.len(), 1);
            assert_eq!((m.steps[0].next, m.steps[0].k), (held, k));
            assert!((m.steps[0].prob - 1.0).abs() < 1e-15);
        }
        let putback = d.partition().option("putback_key").unwrap();
        let s = d.state(pos(1, 1), 0, KEY_HOLDING).unwrap();
        assert!(putback.can_initiate(s));
        assert_eq!(putback.step_kernel(s), &[(d.state(pos(1, 1), 0, 0).unwrap(), 1.0)]);
        assert!(!pickup.can_initiate(s));
    }

    #[test]
    fn hallway_termination_at_the_door() {
        let d = domain();
        let h0 = d.partition().option("hallway_0").unwrap();
        // hallway_0 leads from the upper-left room to hallway 0 below it
        let adj_no_key = d.state(pos(5, 3), 0, 0).unwrap();
        let adj_key = d.state(pos(5, 3), 0, KEY_HOLDING).unwrap();
        assert_eq!(h0.termination(adj_no_key), 1.0);
        assert_eq!(h0.termination(adj_key), 0.0);
        assert_eq!(h0.termination(d.state(pos(6, 3), 1, KEY_HOLDING).unwrap()), 1.0);
        assert_eq!(h0.termination(d.state(pos(2, 2), 0, 0).unwrap()), 0.0);
        assert_eq!(h0.termination(d.state(pos(8, 8), 0, 0).unwrap()), 1.0);
        // shortest path from the start goes down first
        assert_eq!(h0.policy(d.start_state()), &[(DOWN, 1.0)]);
        // the non-target hallway of the room is an entry state
        assert!(h0.can_initiate(d.state(pos(3, 6), 2, 0).unwrap()));
        assert!(!h0.can_initiate(d.state(pos(6, 3), 0, 0).unwrap()));
    }

    #[test]
    fn partition_classes() {
        let p = domain().partition();
        assert_eq!(p.classes().len(), 2);
        assert_eq!(p.classes()[0].len(), 9);
        assert_eq!(p.classes()[1].len(), 3);
        // navigation options share their controlled variables, so the
        // declared classes coincide with the derived ones
        assert!(p.same_class_overrides.is_empty());
        let derived = build_partition(p.options().to_vec(), None).unwrap();
        assert_eq!(derived.classes(), p.classes());
    }

    #[test]
    fn available_multi_options() {
        let d = domain();
        let start = d.state(pos(3, 3), 0, 0).unwrap();
        assert_eq!(enumerate_multi_options(d.partition(), start, TerminationRule::T2).len(), 6);
        let mut max = 0;
        for s in 0..d.mdp().num_states() {
            max = max.max(enumerate_multi_options(d.partition(), s, TerminationRule::T1).len());
        }
        assert!(max <= 9);
        assert_eq!(max, 6);
    }

    #[test]
    fn kernel_factorizes_over_blocks() {
        let d = domain();
        let mdp = d.mdp();
        for s in 0..mdp.num_states() {
            for a in UP..=ROOM_NOP {
                for b in GET_KEY..=PUTBACK_KEY {
                    let mut prod: Vec<(usize, f64)> = Vec::new();
                    for x in mdp.row(s, a) {
                        for y in mdp.row(s, b) {
                            prod.push((x.next + y.next - s, x.prob * y.prob));
                        }
                    }
                    prod.sort_by_key(|e| e.0);
                    let direct = d.direct_joint_step(s, a, b);
                    assert_eq!(prod.len(), direct.len());
                    for (p, q) in prod.iter().zip(&direct) {
                        assert_eq!(p.0, q.0);
                        assert!((p.1 - q.1).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn doors_open_only_while_occupied() {
        use crate::executor::RngStream;
        let d = domain();
        let mdp = d.mdp();
        let mut rng = RngStream::new(5, 0);
        // holding the key throughout, so every door can be entered
        let mut s = d.state(pos(1, 1), 0, KEY_HOLDING).unwrap();
        for _ in 0..20_000 {
            let a = (rng.uniform() * 4.0) as usize;
            let row = mdp.row(s, a);
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut next = row[row.len() - 1].next;
            for o in row {
                acc += o.prob;
                if u < acc {
                    next = o.next;
                    break;
                }
            }
            s = next;
            let st = mdp.space().state(s);
            let expected = d.layout().hallway_at(st.get(0)).map_or(0, |h| 1 << h);
            assert_eq!(st.get(1), expected);
        }
    }
}
