//! Shared domain types for a two-stage restricted SMART: treatment arms,
//! embedded treatment sequences (ETS), embedded regimens (EDTR), outcome
//! slots, the trial skeleton and the elicited per-ETS count parameters.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distributions::{response_probability, NbParams, ResponseRule};
use crate::error::{Error, Result};

/// A treatment option, coded `+1` / `-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    Plus,
    Minus,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Plus, Arm::Minus];

    pub fn sign(self) -> i8 {
        match self {
            Arm::Plus => 1,
            Arm::Minus => -1,
        }
    }

    pub fn from_sign(s: i64) -> Option<Arm> {
        match s {
            1 => Some(Arm::Plus),
            -1 => Some(Arm::Minus),
            _ => None,
        }
    }

    fn index(self) -> usize {
        match self {
            Arm::Plus => 0,
            Arm::Minus => 1,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Plus => "+1",
            Arm::Minus => "-1",
        })
    }
}

/// Terminal cells A-F of the SMART, i.e. the six end-of-study ETSs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cell {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl Cell {
    pub const ALL: [Cell; 6] = [Cell::A, Cell::B, Cell::C, Cell::D, Cell::E, Cell::F];

    pub fn new(a1: Arm, responder: bool, a2: Option<Arm>) -> Option<Cell> {
        match (a1, responder, a2) {
            (Arm::Plus, true, None) => Some(Cell::A),
            (Arm::Plus, false, Some(Arm::Plus)) => Some(Cell::B),
            (Arm::Plus, false, Some(Arm::Minus)) => Some(Cell::C),
            (Arm::Minus, true, None) => Some(Cell::D),
            (Arm::Minus, false, Some(Arm::Plus)) => Some(Cell::E),
            (Arm::Minus, false, Some(Arm::Minus)) => Some(Cell::F),
            _ => None,
        }
    }

    pub fn a1(self) -> Arm {
        match self {
            Cell::A | Cell::B | Cell::C => Arm::Plus,
            _ => Arm::Minus,
        }
    }

    pub fn responder(self) -> bool {
        matches!(self, Cell::A | Cell::D)
    }

    /// Second-stage option; `None` for responders (coded 0).
    pub fn a2(self) -> Option<Arm> {
        match self {
            Cell::B | Cell::E => Some(Arm::Plus),
            Cell::C | Cell::F => Some(Arm::Minus),
            _ => None,
        }
    }

    pub fn label(self) -> char {
        (b'A' + self as u8) as char
    }
}

/// Embedded treatment sequence: what an individual has been offered by a given occasion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ets {
    /// `(.)`, before first-stage randomisation.
    Baseline,
    /// `(a1)`, after the first randomisation up to `t_K`.
    Stage1(Arm),
    /// `(a1, r, a2)`, after response assessment.
    Stage2(Cell),
}

impl fmt::Display for Ets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ets::Baseline => f.write_str("(.)"),
            Ets::Stage1(a) => write!(f, "({a})"),
            Ets::Stage2(c) => {
                let r = if c.responder() { 1 } else { 0 };
                let a2 = c.a2().map_or("0".to_string(), |a| a.to_string());
                write!(f, "({},{r},{a2})", c.a1())
            }
        }
    }
}

impl FromStr for Ets {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Domain(format!("unrecognised treatment sequence `{s}`"));
        let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
        let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
        let arm = |t: &str| -> Result<Arm> {
            t.parse::<i64>().ok().and_then(Arm::from_sign).ok_or_else(bad)
        };
        match parts.as_slice() {
            [""] | ["."] | ["·"] => Ok(Ets::Baseline),
            [a] => Ok(Ets::Stage1(arm(a)?)),
            [a, r, a2] => {
                let a1 = arm(a)?;
                match (*r, *a2) {
                    ("1", "0") => Ok(Ets::Stage2(Cell::new(a1, true, None).unwrap())),
                    ("0", x) => Ok(Ets::Stage2(Cell::new(a1, false, Some(arm(x)?)).unwrap())),
                    _ => Err(bad()),
                }
            }
            _ => Err(bad()),
        }
    }
}

/// One potential outcome: an ETS at a measurement occasion (1-based index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OutcomeSlot {
    pub ets: Ets,
    pub time: usize,
}

impl OutcomeSlot {
    pub fn new(ets: Ets, time: usize) -> Self {
        Self { ets, time }
    }

    /// Whether the slot exists in a design with `k` pre-rerandomisation and `t` total occasions.
    pub fn is_valid(&self, k: usize, t: usize) -> bool {
        match self.ets {
            Ets::Baseline => self.time == 1,
            Ets::Stage1(_) => (2..=k).contains(&self.time),
            Ets::Stage2(_) => self.time > k && self.time <= t,
        }
    }
}

impl fmt::Display for OutcomeSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@t{}", self.ets, self.time)
    }
}

/// Embedded dynamic treatment regimen `(a1, a2NR)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edtr {
    pub a1: Arm,
    pub a2: Arm,
}

impl Edtr {
    pub const ALL: [Edtr; 4] = [
        Edtr { a1: Arm::Plus, a2: Arm::Plus },
        Edtr { a1: Arm::Plus, a2: Arm::Minus },
        Edtr { a1: Arm::Minus, a2: Arm::Plus },
        Edtr { a1: Arm::Minus, a2: Arm::Minus },
    ];

    pub fn new(a1: Arm, a2: Arm) -> Self {
        Self { a1, a2 }
    }

    /// Position in the canonical order (+1,+1), (+1,-1), (-1,+1), (-1,-1).
    pub fn index(&self) -> usize {
        2 * self.a1.index() + self.a2.index()
    }

    pub fn responder_cell(&self) -> Cell {
        Cell::new(self.a1, true, None).unwrap()
    }

    pub fn non_responder_cell(&self) -> Cell {
        Cell::new(self.a1, false, Some(self.a2)).unwrap()
    }
}

impl fmt::Display for Edtr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.a1, self.a2)
    }
}

impl FromStr for Edtr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Domain(format!("unrecognised regimen `{s}`"));
        let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
        let arms: Vec<Arm> = inner
            .split(',')
            .map(|t| t.trim().parse::<i64>().ok().and_then(Arm::from_sign))
            .collect::<Option<_>>()
            .ok_or_else(bad)?;
        match arms.as_slice() {
            [a1, a2] => Ok(Edtr::new(*a1, *a2)),
            _ => Err(bad()),
        }
    }
}

/// Responder subgroups, by response status under each first-stage option.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subgroup {
    /// Responds to both options.
    Both = 1,
    /// Responds to `+1` only.
    PlusOnly = 2,
    /// Responds to `-1` only.
    MinusOnly = 3,
    /// Responds to neither.
    Neither = 4,
}

impl Subgroup {
    pub const ALL: [Subgroup; 4] = [
        Subgroup::Both,
        Subgroup::PlusOnly,
        Subgroup::MinusOnly,
        Subgroup::Neither,
    ];

    pub fn number(self) -> usize {
        self as usize
    }

    pub fn from_number(j: usize) -> Option<Subgroup> {
        Subgroup::ALL.get(j.wrapping_sub(1)).copied()
    }

    pub fn responds(self, a1: Arm) -> bool {
        matches!(
            (self, a1),
            (Subgroup::Both, _) | (Subgroup::PlusOnly, Arm::Plus) | (Subgroup::MinusOnly, Arm::Minus)
        )
    }
}

/// The planned SMART's skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDesign {
    /// Measurement times `t_1 < ... < t_T`.
    times: Vec<f64>,
    /// Index of the last occasion before re-randomisation.
    k: usize,
    pub rule: ResponseRule,
    /// `P(A1 = +1)`.
    pub p_a1: f64,
    /// `P(A2 = +1)` among non-responders.
    pub p_a2: f64,
}

impl TrialDesign {
    pub fn new(times: Vec<f64>, k: usize, rule: ResponseRule, p_a1: f64, p_a2: f64) -> Result<Self> {
        let t = times.len();
        if t < 3 {
            return Err(Error::Domain(format!("need at least 3 occasions, got {t}")));
        }
        if !(k > 1 && k < t) {
            return Err(Error::Domain(format!("K must satisfy 1 < K < T, got K={k}, T={t}")));
        }
        if times.iter().any(|x| !x.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("measurement times must be finite and strictly increasing".into()));
        }
        for (name, p) in [("p_a1", p_a1), ("p_a2", p_a2)] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Domain(format!("{name} must lie in (0, 1), got {p}")));
            }
        }
        rule.validate()?;
        Ok(Self { times, k, rule, p_a1, p_a2 })
    }

    /// Monthly grid `t_j = j`, balanced randomisation.
    pub fn monthly(t: usize, k: usize, rule: ResponseRule) -> Result<Self> {
        Self::new((1..=t).map(|j| j as f64).collect(), k, rule, 0.5, 0.5)
    }

    pub fn occasions(&self) -> usize {
        self.times.len()
    }

    pub fn split(&self) -> usize {
        self.k
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Time of occasion `j` (1-based).
    pub fn time(&self, j: usize) -> f64 {
        self.times[j - 1]
    }

    /// `4T - 2K - 1`.
    pub fn n_coefficients(&self) -> usize {
        4 * self.occasions() - 2 * self.k - 1
    }

    pub fn prob_a1(&self, a1: Arm) -> f64 {
        match a1 {
            Arm::Plus => self.p_a1,
            Arm::Minus => 1.0 - self.p_a1,
        }
    }

    pub fn prob_a2(&self, a2: Arm) -> f64 {
        match a2 {
            Arm::Plus => self.p_a2,
            Arm::Minus => 1.0 - self.p_a2,
        }
    }

    /// The ETS an individual on `path` carries at occasion `j`.
    pub fn ets_on_path(&self, cell: Cell, j: usize) -> Ets {
        if j == 1 {
            Ets::Baseline
        } else if j <= self.k {
            Ets::Stage1(cell.a1())
        } else {
            Ets::Stage2(cell)
        }
    }

    /// Every slot of the design in canonical order (time-major, paths A-F).
    pub fn all_slots(&self) -> Vec<OutcomeSlot> {
        let mut out = vec![OutcomeSlot::new(Ets::Baseline, 1)];
        for j in 2..=self.k {
            for a in Arm::BOTH {
                out.push(OutcomeSlot::new(Ets::Stage1(a), j));
            }
        }
        for j in self.k + 1..=self.occasions() {
            for c in Cell::ALL {
                out.push(OutcomeSlot::new(Ets::Stage2(c), j));
            }
        }
        out
    }
}

/// Elicited count parameters for every (ETS, occasion) slot of a design.
#[derive(Debug, Clone, PartialEq)]
pub struct EtsGrid {
    k: usize,
    t: usize,
    cells: HashMap<OutcomeSlot, NbParams>,
}

impl EtsGrid {
    /// Build a grid; every slot of `design` must be covered exactly once.
    pub fn new(design: &TrialDesign, entries: impl IntoIterator<Item = (OutcomeSlot, NbParams)>) -> Result<Self> {
        let (k, t) = (design.split(), design.occasions());
        let mut cells = HashMap::new();
        for (slot, p) in entries {
            if !slot.is_valid(k, t) {
                return Err(Error::Domain(format!("slot {slot} does not exist in this design")));
            }
            if cells.insert(slot, p).is_some() {
                return Err(Error::Domain(format!("slot {slot} specified more than once")));
            }
        }
        for slot in design.all_slots() {
            if !cells.contains_key(&slot) {
                return Err(Error::Domain(format!("slot {slot} is missing from the grid")));
            }
        }
        Ok(Self { k, t, cells })
    }

    /// Build a grid from a closure over all slots.
    pub fn from_fn(design: &TrialDesign, mut f: impl FnMut(&OutcomeSlot) -> Result<NbParams>) -> Result<Self> {
        let entries = design
            .all_slots()
            .into_iter()
            .map(|s| f(&s).map(|p| (s, p)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(design, entries)
    }

    pub fn get(&self, slot: &OutcomeSlot) -> &NbParams {
        &self.cells[slot]
    }

    pub fn at(&self, ets: Ets, j: usize) -> &NbParams {
        self.get(&OutcomeSlot::new(ets, j))
    }

    /// `P(R = 1 | A1 = a1)` implied by the grid at `t_K`.
    pub fn response_probability(&self, a1: Arm, rule: &ResponseRule) -> f64 {
        response_probability(self.at(Ets::Stage1(a1), self.k), rule)
    }

    /// Slots in canonical order with their parameters.
    pub fn entries(&self) -> Vec<(OutcomeSlot, NbParams)> {
        let mut v: Vec<_> = self.cells.iter().map(|(s, p)| (*s, *p)).collect();
        v.sort_by_key(|(s, _)| (s.time, s.ets));
        v
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.k, self.t)
    }
}
