//! Potential-outcome generation for the four responder subgroups and the
//! mapping to observed SMART data through simulated randomisations.

use std::io::{Read, Write};

use rand::{Rng, RngExt};

use crate::copula::{build_latent_correlation, CopulaSampler, CountMatrix, DependenceSpec};
use crate::design::{Arm, Cell, Ets, EtsGrid, OutcomeSlot, Subgroup, TrialDesign};
use crate::distributions::{CountRegion, DiscreteMarginal, ResponseRule};
use crate::error::{Error, Result};

/// Guard against floating-point overshoot before taking ceilings.
const CEIL_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubgroupSizes {
    pub n: [usize; 4],
}

impl SubgroupSizes {
    pub fn total(&self) -> usize {
        self.n.iter().sum()
    }

    pub fn of(&self, g: Subgroup) -> usize {
        self.n[g.number() - 1]
    }
}

/// Split `n` individuals into subgroups given responder rates `p` (under `+1`) and `q` (under `-1`).
pub fn subgroup_sizes(n: usize, p: f64, q: f64, n4_override: Option<usize>) -> Result<SubgroupSizes> {
    for (name, v) in [("p", p), ("q", q)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Domain(format!("{name} must lie in (0, 1), got {v}")));
        }
    }
    let nf = n as f64;
    let max_n4 = (nf * (1.0 - p)).min(nf * (1.0 - q));
    let n4 = match n4_override {
        Some(v) if v as f64 > max_n4 + 1.0 => {
            return Err(Error::Infeasible(format!(
                "n4 = {v} exceeds min(N(1-p), N(1-q)) = {max_n4:.2}"
            )))
        }
        Some(v) => v as f64,
        None => max_n4,
    };
    let n2 = nf * (1.0 - q) - n4;
    let n3 = nf * (1.0 - p) - n4;
    let ceil = |x: f64| (x - CEIL_GUARD).ceil().max(0.0) as i64;
    let (c2, c3, c4) = (ceil(n2), ceil(n3), ceil(n4));
    let c1 = n as i64 - c2 - c3 - c4;
    if c1 < 0 || n2 < -1.0 || n3 < -1.0 {
        return Err(Error::Infeasible(format!(
            "N = {n}, p = {p}, q = {q}, n4 = {n4} leaves a negative subgroup"
        )));
    }
    Ok(SubgroupSizes { n: [c1 as usize, c2 as usize, c3 as usize, c4 as usize] })
}

/// Feasible potential-outcome slots of a subgroup in canonical order.
pub fn enumerate_slots(subgroup: Subgroup, design: &TrialDesign) -> Vec<OutcomeSlot> {
    design
        .all_slots()
        .into_iter()
        .filter(|s| match s.ets {
            Ets::Stage2(c) => c.responder() == subgroup.responds(c.a1()),
            _ => true,
        })
        .collect()
}

/// Univariate marginals for a subgroup's slots; `t_K` slots are truncated to
/// the responder region or its complement.
pub fn assign_marginals(
    subgroup: Subgroup,
    slots: &[OutcomeSlot],
    grid: &EtsGrid,
    k: usize,
    rule: &ResponseRule,
) -> Result<Vec<DiscreteMarginal>> {
    slots
        .iter()
        .map(|s| {
            let region = match s.ets {
                Ets::Stage1(a) if s.time == k => {
                    if subgroup.responds(a) {
                        CountRegion::Responder(*rule)
                    } else {
                        CountRegion::NonResponder(*rule)
                    }
                }
                _ => CountRegion::All,
            };
            DiscreteMarginal::new(*grid.get(s), region)
        })
        .collect()
}

/// One subgroup's potential outcomes: a row per individual, a column per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgroupDraws {
    pub subgroup: Subgroup,
    pub slots: Vec<OutcomeSlot>,
    pub counts: CountMatrix,
}

impl SubgroupDraws {
    pub fn column_of(&self, slot: &OutcomeSlot) -> Option<usize> {
        self.slots.iter().position(|s| s == slot)
    }
}

/// Complete potential-outcome sets for every simulated individual, subgroups 1 to 4.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialOutcomes {
    pub groups: Vec<SubgroupDraws>,
}

impl PotentialOutcomes {
    pub fn total(&self) -> usize {
        self.groups.iter().map(|g| g.counts.rows()).sum()
    }
}

/// Per-subgroup copula samplers prepared once for a (design, grid, dependence) triple.
#[derive(Debug, Clone)]
pub struct TrialGenerator {
    design: TrialDesign,
    samplers: Vec<(Subgroup, Vec<OutcomeSlot>, CopulaSampler)>,
    p: f64,
    q: f64,
}

impl TrialGenerator {
    pub fn new(design: &TrialDesign, grid: &EtsGrid, spec: &DependenceSpec) -> Result<Self> {
        if grid.shape() != (design.split(), design.occasions()) {
            return Err(Error::Shape("grid does not match the design".into()));
        }
        let samplers = Subgroup::ALL
            .iter()
            .map(|&g| {
                let lc = build_latent_correlation(g, design, spec);
                let marg = assign_marginals(g, &lc.slots, grid, design.split(), &design.rule)?;
                Ok((g, lc.slots.clone(), CopulaSampler::new(&lc.matrix, marg)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            design: design.clone(),
            samplers,
            p: grid.response_probability(Arm::Plus, &design.rule),
            q: grid.response_probability(Arm::Minus, &design.rule),
        })
    }

    pub fn design(&self) -> &TrialDesign {
        &self.design
    }

    /// Responder probabilities `(p, q)` implied by the grid.
    pub fn response_rates(&self) -> (f64, f64) {
        (self.p, self.q)
    }

    pub fn sizes(&self, n: usize, n4_override: Option<usize>) -> Result<SubgroupSizes> {
        subgroup_sizes(n, self.p, self.q, n4_override)
    }

    pub fn generate<R: Rng + ?Sized>(&self, sizes: &SubgroupSizes, rng: &mut R) -> PotentialOutcomes {
        let groups = self
            .samplers
            .iter()
            .map(|(g, slots, sampler)| SubgroupDraws {
                subgroup: *g,
                slots: slots.clone(),
                counts: sampler.sample(sizes.of(*g), rng),
            })
            .collect();
        PotentialOutcomes { groups }
    }

    /// Potential outcomes followed by randomisation, on one stream.
    pub fn simulate<R: Rng + ?Sized>(&self, sizes: &SubgroupSizes, rng: &mut R) -> ObservedTrial {
        let po = self.generate(sizes, rng);
        randomize_and_observe(&po, &self.design, rng)
    }
}

pub fn generate_potential_outcomes<R: Rng + ?Sized>(
    sizes: &SubgroupSizes,
    design: &TrialDesign,
    grid: &EtsGrid,
    spec: &DependenceSpec,
    rng: &mut R,
) -> Result<PotentialOutcomes> {
    Ok(TrialGenerator::new(design, grid, spec)?.generate(sizes, rng))
}

/// One individual's observed record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Participant {
    pub id: usize,
    pub subgroup: Subgroup,
    pub a1: Arm,
    pub responder: bool,
    /// `None` for responders.
    pub a2: Option<Arm>,
    pub y: Vec<u32>,
}

impl Participant {
    pub fn cell(&self) -> Cell {
        Cell::new(self.a1, self.responder, self.a2).expect("a2 is set exactly for non-responders")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservedTrial {
    pub occasions: usize,
    pub participants: Vec<Participant>,
}

impl ObservedTrial {
    pub fn len(&self) -> usize {
        self.participants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.participants.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["id".to_string(), "subgroup".into(), "a1".into(), "r".into(), "a2".into()];
        header.extend((1..=self.occasions).map(|j| format!("y{j}")));
        wtr.write_record(&header)?;
        for p in &self.participants {
            let mut rec = vec![
                p.id.to_string(),
                p.subgroup.number().to_string(),
                p.a1.sign().to_string(),
                u8::from(p.responder).to_string(),
                p.a2.map_or(0, Arm::sign).to_string(),
            ];
            rec.extend(p.y.iter().map(u32::to_string));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let occasions = headers.iter().filter(|h| h.starts_with('y')).count();
        let expected: Vec<String> = ["id", "subgroup", "a1", "r", "a2"]
            .iter()
            .map(|s| s.to_string())
            .chain((1..=occasions).map(|j| format!("y{j}")))
            .collect();
        if headers.iter().ne(expected.iter().map(String::as_str)) {
            return Err(Error::Io(format!("unexpected dataset header: {headers:?}")));
        }
        let mut participants = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::Io(format!("dataset row {}: invalid {what}", line + 1));
            let int = |i: usize, what: &str| -> Result<i64> {
                rec.get(i).and_then(|s| s.trim().parse().ok()).ok_or_else(|| bad(what))
            };
            let id = usize::try_from(int(0, "id")?).map_err(|_| bad("id"))?;
            let subgroup = usize::try_from(int(1, "subgroup")?)
                .ok()
                .and_then(Subgroup::from_number)
                .ok_or_else(|| bad("subgroup"))?;
            let a1 = Arm::from_sign(int(2, "a1")?).ok_or_else(|| bad("a1"))?;
            let responder = match int(3, "r")? {
                0 => false,
                1 => true,
                _ => return Err(bad("r")),
            };
            let a2 = match int(4, "a2")? {
                0 => None,
                s => Some(Arm::from_sign(s).ok_or_else(|| bad("a2"))?),
            };
            if responder == a2.is_some() {
                return Err(bad("a2 (must be 0 exactly for responders)"));
            }
            let y = (0..occasions)
                .map(|j| u32::try_from(int(5 + j, "count")?).map_err(|_| bad("count")))
                .collect::<Result<Vec<_>>>()?;
            participants.push(Participant { id, subgroup, a1, responder, a2, y });
        }
        Ok(Self { occasions, participants })
    }
}

/// Simulate both randomisations and read off outcomes consistent with the assigned path.
pub fn randomize_and_observe<R: Rng + ?Sized>(
    potentials: &PotentialOutcomes,
    design: &TrialDesign,
    rng: &mut R,
) -> ObservedTrial {
    let t = design.occasions();
    let mut participants = Vec::with_capacity(potentials.total());
    let mut id = 0;
    for grp in &potentials.groups {
        // column of each (cell, occasion) in this subgroup's slot order
        let cols: Vec<Vec<Option<usize>>> = Cell::ALL
            .iter()
            .map(|&c| {
                (1..=t)
                    .map(|j| grp.column_of(&OutcomeSlot::new(design.ets_on_path(c, j), j)))
                    .collect()
            })
            .collect();
        for i in 0..grp.counts.rows() {
            let a1 = if rng.random::<f64>() < design.p_a1 { Arm::Plus } else { Arm::Minus };
            let responder = grp.subgroup.responds(a1);
            let a2 = if responder {
                None
            } else if rng.random::<f64>() < design.p_a2 {
                Some(Arm::Plus)
            } else {
                Some(Arm::Minus)
            };
            let cell = Cell::new(a1, responder, a2).unwrap();
            let row = grp.counts.row(i);
            let y = cols[cell as usize]
                .iter()
                .map(|c| row[c.expect("slot on the assigned path is feasible")])
                .collect();
            participants.push(Participant { id, subgroup: grp.subgroup, a1, responder, a2, y });
            id += 1;
        }
    }
    ObservedTrial { occasions: t, participants }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::NbParams;
    use rand::rngs::ChaCha8Rng;
    use rand::SeedableRng;

    fn design(t: usize, c: u64) -> TrialDesign {
        TrialDesign::monthly(t, 2, ResponseRule::AtMost { c }).unwrap()
    }

    fn flat_grid(d: &TrialDesign) -> EtsGrid {
        EtsGrid::from_fn(d, |s| NbParams::new(2.0 + 0.3 * s.time as f64, 1.5)).unwrap()
    }

    #[test]
    fn sizes_examples() {
        assert_eq!(subgroup_sizes(500, 0.4, 0.4, None).unwrap().n, [200, 0, 0, 300]);
        assert_eq!(subgroup_sizes(500, 0.4, 0.6, None).unwrap().n, [200, 0, 100, 200]);
        let s = subgroup_sizes(100, 1.0 - 1e-12, 1.0 - 1e-12, None).unwrap();
        assert_eq!(s.n[3], 0);
        assert_eq!(s.n[0], 100);
        let s = subgroup_sizes(500, 0.4, 0.4, Some(100)).unwrap();
        assert_eq!(s.n, [0, 200, 200, 100]);
        assert!(subgroup_sizes(500, 0.4, 0.4, Some(350)).is_err());
        assert!(subgroup_sizes(500, 0.0, 0.4, None).is_err());
    }

    #[test]
    fn sizes_sum_to_n() {
        for n in [97, 100, 333, 550] {
            for (p, q) in [(0.37, 0.41), (0.2, 0.6), (0.55, 0.15)] {
                let s = subgroup_sizes(n, p, q, None).unwrap();
                assert_eq!(s.total(), n);
            }
        }
    }

    #[test]
    fn slot_enumeration() {
        let d3 = design(3, 0);
        let s1: Vec<String> = enumerate_slots(Subgroup::Both, &d3).iter().map(|s| s.to_string()).collect();
        assert_eq!(s1, ["(.)@t1", "(+1)@t2", "(-1)@t2", "(+1,1,0)@t3", "(-1,1,0)@t3"]);
        let s4: Vec<String> = enumerate_slots(Subgroup::Neither, &d3).iter().map(|s| s.to_string()).collect();
        assert_eq!(
            s4,
            ["(.)@t1", "(+1)@t2", "(-1)@t2", "(+1,0,+1)@t3", "(+1,0,-1)@t3", "(-1,0,+1)@t3", "(-1,0,-1)@t3"]
        );
        assert_eq!(enumerate_slots(Subgroup::PlusOnly, &design(6, 0)).len(), 15);
        let counts: Vec<_> = Subgroup::ALL.iter().map(|&g| enumerate_slots(g, &d3).len()).collect();
        assert_eq!(counts, [5, 6, 6, 7]);
    }

    #[test]
    fn marginal_truncation_pattern() {
        let d = design(6, 1);
        let grid = flat_grid(&d);
        let slots = enumerate_slots(Subgroup::PlusOnly, &d);
        let m = assign_marginals(Subgroup::PlusOnly, &slots, &grid, 2, &d.rule).unwrap();
        assert_eq!(*m[1].region(), CountRegion::Responder(d.rule));
        assert_eq!(*m[2].region(), CountRegion::NonResponder(d.rule));
        assert_eq!(*m[0].region(), CountRegion::All);

        let d0 = design(6, 0);
        let s1 = enumerate_slots(Subgroup::Both, &d0);
        let m1 = assign_marginals(Subgroup::Both, &s1, &flat_grid(&d0), 2, &d0.rule).unwrap();
        assert_eq!(m1[1].pmf(0), 1.0);
        assert_eq!(m1[2].pmf(0), 1.0);
    }

    #[test]
    fn constraints_hold_in_draws() {
        let d = design(6, 1);
        let grid = flat_grid(&d);
        let spec = DependenceSpec::new(crate::copula::Structure::Ar1, 0.5).unwrap();
        let gen = TrialGenerator::new(&d, &grid, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let po = gen.generate(&SubgroupSizes { n: [50, 60, 70, 80] }, &mut rng);
        let g2 = &po.groups[1];
        let plus = g2.column_of(&OutcomeSlot::new(Ets::Stage1(Arm::Plus), 2)).unwrap();
        let minus = g2.column_of(&OutcomeSlot::new(Ets::Stage1(Arm::Minus), 2)).unwrap();
        for i in 0..g2.counts.rows() {
            assert!(g2.counts.get(i, plus) <= 1);
            assert!(g2.counts.get(i, minus) > 1);
        }
        let obs = randomize_and_observe(&po, &d, &mut rng);
        assert_eq!(obs.len(), 260);
        for p in &obs.participants {
            assert_eq!(p.responder, d.rule.is_responder(u64::from(p.y[1])));
            assert_eq!(p.responder, p.a2.is_none());
            if p.subgroup == Subgroup::Both {
                assert!(p.responder);
            }
            if p.subgroup == Subgroup::Neither {
                assert!(!p.responder);
            }
        }
    }

    #[test]
    fn neither_only_has_four_arms() {
        let d = design(6, 0);
        let gen = TrialGenerator::new(&d, &flat_grid(&d), &DependenceSpec::independent()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let po = gen.generate(&SubgroupSizes { n: [0, 0, 0, 40] }, &mut rng);
        assert_eq!(po.groups[3].counts.rows(), 40);
        assert_eq!(po.groups[3].slots.len(), 1 + 2 + 4 * 4);
        assert!(po.groups[..3].iter().all(|g| g.counts.rows() == 0));
    }

    #[test]
    fn csv_roundtrip() {
        let d = design(4, 0);
        let gen = TrialGenerator::new(&d, &flat_grid(&d), &DependenceSpec::independent()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sizes = gen.sizes(120, None).unwrap();
        let obs = gen.simulate(&sizes, &mut rng);
        let mut buf = Vec::new();
        obs.write_csv(&mut buf).unwrap();
        let back = ObservedTrial::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, obs);
        assert!(ObservedTrial::read_csv("id,x\n1,2\n".as_bytes()).is_err());
    }
}
