//! Deterministic synthetic populations: agents grouped into households,
//! schools (children) and companies (adults).
//!
//! The population file is newline-delimited UTF-8: two `#` header lines and a
//! column header, then one record per agent in id order:
//!
//! ```text
//! # gvi-abm population v1
//! # n_agents=4 seed=7 config_hash=1f2e.. households=2 schools=1 companies=1
//! id,age_class,susceptibility,household_id,venue_kind,venue_id
//! 0,adult,1,0,company,0
//! 1,child,1,0,school,0
//! 2,retired,1,1,none,
//! ```

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

const MAGIC: &str = "# gvi-abm population v1";
const COLUMNS: &str = "id,age_class,susceptibility,household_id,venue_kind,venue_id";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AgeClass {
    Child,
    Adult,
    Retired,
}

impl AgeClass {
    pub const ALL: [AgeClass; 3] = [AgeClass::Child, AgeClass::Adult, AgeClass::Retired];

    pub fn as_str(self) -> &'static str {
        match self {
            AgeClass::Child => "child",
            AgeClass::Adult => "adult",
            AgeClass::Retired => "retired",
        }
    }

    /// Venue kind members of this class attend during the day.
    pub fn venue_kind(self) -> Option<LocationKind> {
        match self {
            AgeClass::Child => Some(LocationKind::School),
            AgeClass::Adult => Some(LocationKind::Company),
            AgeClass::Retired => None,
        }
    }
}

impl FromStr for AgeClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "child" => Ok(AgeClass::Child),
            "adult" => Ok(AgeClass::Adult),
            "retired" => Ok(AgeClass::Retired),
            other => Err(format!("unknown age class `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LocationKind {
    Household,
    School,
    Company,
}

impl LocationKind {
    pub const ALL: [LocationKind; 3] = [LocationKind::Household, LocationKind::School, LocationKind::Company];

    pub fn as_str(self) -> &'static str {
        match self {
            LocationKind::Household => "household",
            LocationKind::School => "school",
            LocationKind::Company => "company",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for LocationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Venue {
    pub kind: LocationKind,
    pub id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub id: usize,
    pub age: AgeClass,
    /// Inherent susceptibility ψ ≥ 0.
    pub susceptibility: f64,
    pub household: usize,
    pub venue: Option<Venue>,
}

impl Agent {
    /// Group id of this agent for location kind `kind`, if it attends one.
    pub fn group(&self, kind: LocationKind) -> Option<usize> {
        match kind {
            LocationKind::Household => Some(self.household),
            _ => self.venue.filter(|v| v.kind == kind).map(|v| v.id),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SusceptibilityConfig {
    pub child: f64,
    pub adult: f64,
    pub retired: f64,
}

impl Default for SusceptibilityConfig {
    fn default() -> Self {
        SusceptibilityConfig {
            child: 1.0,
            adult: 1.0,
            retired: 1.0,
        }
    }
}

impl SusceptibilityConfig {
    pub fn of(&self, age: AgeClass) -> f64 {
        match age {
            AgeClass::Child => self.child,
            AgeClass::Adult => self.adult,
            AgeClass::Retired => self.retired,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationConfig {
    pub n_agents: usize,
    pub child_share: f64,
    pub adult_share: f64,
    pub retired_share: f64,
    /// Probability of household size `i + 1` at index `i`.
    pub household_size_probs: Vec<f64>,
    pub school_capacity: usize,
    pub company_capacity: usize,
    pub susceptibility: SusceptibilityConfig,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            n_agents: 10_000,
            child_share: 0.2,
            adult_share: 0.6,
            retired_share: 0.2,
            household_size_probs: vec![0.3, 0.35, 0.2, 0.15],
            school_capacity: 500,
            company_capacity: 100,
            susceptibility: SusceptibilityConfig::default(),
        }
    }
}

fn share_ok(field: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
        return Err(Error::config(field, format!("must lie in [0, 1], got {v}")));
    }
    Ok(())
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 10 {
            return Err(Error::config("population.n_agents", "must be at least 10"));
        }
        share_ok("population.child_share", self.child_share)?;
        share_ok("population.adult_share", self.adult_share)?;
        share_ok("population.retired_share", self.retired_share)?;
        let total = self.child_share + self.adult_share + self.retired_share;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "population.child_share",
                format!("age-class shares must sum to 1, got {total}"),
            ));
        }
        if self.household_size_probs.is_empty() {
            return Err(Error::config("population.household_size_probs", "must not be empty"));
        }
        for (i, &p) in self.household_size_probs.iter().enumerate() {
            share_ok(&format!("population.household_size_probs[{i}]"), p)?;
        }
        let total: f64 = self.household_size_probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "population.household_size_probs",
                format!("must sum to 1, got {total}"),
            ));
        }
        if self.school_capacity == 0 {
            return Err(Error::config("population.school_capacity", "must be positive"));
        }
        if self.company_capacity == 0 {
            return Err(Error::config("population.company_capacity", "must be positive"));
        }
        for (name, v) in [
            ("child", self.susceptibility.child),
            ("adult", self.susceptibility.adult),
            ("retired", self.susceptibility.retired),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(
                    format!("population.susceptibility.{name}"),
                    format!("must be finite and >= 0, got {v}"),
                ));
            }
        }
        Ok(())
    }

    /// Short hex digest identifying this configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
    }

    pub fn mean_household_size(&self) -> f64 {
        self.household_size_probs
            .iter()
            .enumerate()
            .map(|(i, p)| (i + 1) as f64 * p)
            .sum()
    }
}

/// Immutable synthetic population.
#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    agents: Vec<Agent>,
    /// Member lists per location kind, indexed by [`LocationKind::index`],
    /// each sorted by agent id.
    groups: [Vec<Vec<usize>>; 3],
    seed: u64,
    config_hash: String,
}

impl Population {
    /// Synthesize `config.n_agents` agents from `seed`.
    pub fn synthesize(config: &PopulationConfig, seed: u64) -> Result<Population> {
        config.validate()?;
        let n = config.n_agents;
        let mut rng = rng::rng_from(seed, &[stream::POPULATION]);

        let ages = age_classes(config, &mut rng);

        let mut households = Vec::new();
        let mut assigned = 0;
        while assigned < n {
            let size = draw_household_size(&config.household_size_probs, &mut rng).min(n - assigned);
            households.push(assigned..assigned + size);
            assigned += size;
        }

        let mut agents: Vec<Agent> = (0..n)
            .map(|id| Agent {
                id,
                age: ages[id],
                susceptibility: config.susceptibility.of(ages[id]),
                household: 0,
                venue: None,
            })
            .collect();
        for (h, members) in households.iter().enumerate() {
            for id in members.clone() {
                agents[id].household = h;
            }
        }

        // venues fill to capacity in id order, then the next one opens
        let mut filled = [0usize; 3];
        for agent in &mut agents {
            if let Some(kind) = agent.age.venue_kind() {
                let cap = match kind {
                    LocationKind::School => config.school_capacity,
                    _ => config.company_capacity,
                };
                let k = kind.index();
                agent.venue = Some(Venue {
                    kind,
                    id: filled[k] / cap,
                });
                filled[k] += 1;
            }
        }

        Ok(Population::from_agents(agents, seed, config.hash()))
    }

    fn from_agents(agents: Vec<Agent>, seed: u64, config_hash: String) -> Population {
        let mut groups: [Vec<Vec<usize>>; 3] = Default::default();
        for agent in &agents {
            for kind in LocationKind::ALL {
                if let Some(g) = agent.group(kind) {
                    let list = &mut groups[kind.index()];
                    if list.len() <= g {
                        list.resize_with(g + 1, Vec::new);
                    }
                    list[g].push(agent.id);
                }
            }
        }
        Population {
            agents,
            groups,
            seed,
            config_hash,
        }
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Member lists of every group of `kind`.
    pub fn groups(&self, kind: LocationKind) -> &[Vec<usize>] {
        &self.groups[kind.index()]
    }

    pub fn group_count(&self, kind: LocationKind) -> usize {
        self.groups[kind.index()].len()
    }

    pub fn count_age(&self, age: AgeClass) -> usize {
        self.agents.iter().filter(|a| a.age == age).count()
    }

    /// Small hand-built population for tests and examples. Each entry is
    /// `(age, household, venue_id)`; venue kinds follow the age class.
    pub fn from_records(records: &[(AgeClass, usize, Option<usize>)], susceptibility: f64) -> Result<Population> {
        let agents = records
            .iter()
            .enumerate()
            .map(|(id, &(age, household, venue))| Agent {
                id,
                age,
                susceptibility,
                household,
                venue: age.venue_kind().zip(venue).map(|(kind, id)| Venue { kind, id }),
            })
            .collect();
        let pop = Population::from_agents(agents, 0, String::from("manual"));
        pop.validate(0)?;
        Ok(pop)
    }

    /// Referential and partition checks; `line0` offsets error line numbers.
    fn validate(&self, line0: usize) -> Result<()> {
        for agent in &self.agents {
            let line = line0 + agent.id + 1;
            if agent.venue.map(|v| v.kind) != agent.age.venue_kind() {
                return Err(Error::parse(
                    line,
                    format!("agent {} ({}) has inconsistent venue", agent.id, agent.age.as_str()),
                ));
            }
            if !(agent.susceptibility.is_finite() && agent.susceptibility >= 0.0) {
                return Err(Error::parse(line, format!("agent {} has invalid susceptibility", agent.id)));
            }
        }
        for kind in LocationKind::ALL {
            if let Some(g) = self.groups(kind).iter().position(Vec::is_empty) {
                return Err(Error::parse(line0, format!("{kind} {g} has no members")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.agents.len() * 32 + 256);
        writeln!(out, "{MAGIC}").unwrap();
        writeln!(
            out,
            "# n_agents={} seed={} config_hash={} households={} schools={} companies={}",
            self.agents.len(),
            self.seed,
            self.config_hash,
            self.group_count(LocationKind::Household),
            self.group_count(LocationKind::School),
            self.group_count(LocationKind::Company),
        )
        .unwrap();
        writeln!(out, "{COLUMNS}").unwrap();
        for a in &self.agents {
            let (kind, venue) = match a.venue {
                Some(v) => (v.kind.as_str(), v.id.to_string()),
                None => ("none", String::new()),
            };
            writeln!(
                out,
                "{},{},{},{},{},{}",
                a.id,
                a.age.as_str(),
                a.susceptibility,
                a.household,
                kind,
                venue
            )
            .unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Population> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, MAGIC)) => {}
            Some((n, other)) => return Err(Error::parse(n, format!("expected `{MAGIC}`, found `{other}`"))),
            None => return Err(Error::parse(1, "empty population file")),
        }
        let (hline, header) = lines.next().ok_or_else(|| Error::parse(2, "missing header"))?;
        let header = Header::parse(hline, header)?;
        match lines.next() {
            Some((_, COLUMNS)) => {}
            Some((n, other)) => return Err(Error::parse(n, format!("expected column header, found `{other}`"))),
            None => return Err(Error::parse(3, "missing column header")),
        }

        let mut agents = Vec::with_capacity(header.n_agents);
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let agent = parse_agent(n, line, &header)?;
            if agent.id != agents.len() {
                return Err(Error::parse(n, format!("expected agent id {}, found {}", agents.len(), agent.id)));
            }
            agents.push(agent);
        }
        if agents.len() != header.n_agents {
            return Err(Error::parse(
                3 + agents.len(),
                format!("header declares {} agents, found {}", header.n_agents, agents.len()),
            ));
        }
        let pop = Population::from_agents(agents, header.seed, header.config_hash);
        for (kind, declared) in LocationKind::ALL.into_iter().zip(header.group_counts) {
            if pop.group_count(kind) != declared {
                return Err(Error::parse(
                    2,
                    format!("header declares {declared} {kind} groups, agents reference {}", pop.group_count(kind)),
                ));
            }
        }
        pop.validate(3)?;
        Ok(pop)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Population> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Population::parse(&text)
    }
}

struct Header {
    n_agents: usize,
    seed: u64,
    config_hash: String,
    group_counts: [usize; 3],
}

impl Header {
    fn parse(line_no: usize, line: &str) -> Result<Header> {
        let body = line
            .strip_prefix("# ")
            .ok_or_else(|| Error::parse(line_no, "header must start with `# `"))?;
        let mut fields = std::collections::HashMap::new();
        for kv in body.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::parse(line_no, format!("malformed header field `{kv}`")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::parse(line_no, format!("header missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::parse(line_no, format!("header field `{k}` is not an integer")))
        };
        Ok(Header {
            n_agents: num("n_agents")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::parse(line_no, "header field `seed` is not an integer"))?,
            config_hash: get("config_hash")?.to_string(),
            group_counts: [num("households")?, num("schools")?, num("companies")?],
        })
    }
}

fn parse_agent(n: usize, line: &str, header: &Header) -> Result<Agent> {
    let cols: Vec<&str> = line.split(',').collect();
    if cols.len() != 6 {
        return Err(Error::parse(n, format!("expected 6 fields, found {}", cols.len())));
    }
    let int = |i: usize, name: &str| -> Result<usize> {
        cols[i]
            .parse()
            .map_err(|_| Error::parse(n, format!("{name} `{}` is not an integer", cols[i])))
    };
    let id = int(0, "id")?;
    let age: AgeClass = cols[1].parse().map_err(|e: String| Error::parse(n, e))?;
    let susceptibility: f64 = cols[2]
        .parse()
        .map_err(|_| Error::parse(n, format!("susceptibility `{}` is not a number", cols[2])))?;
    let household = int(3, "household_id")?;
    if household >= header.group_counts[LocationKind::Household.index()] {
        return Err(Error::parse(n, format!("agent {id} references missing household {household}")));
    }
    let venue = match cols[4] {
        "none" => {
            if !cols[5].is_empty() {
                return Err(Error::parse(n, "venue_id given for venue_kind none"));
            }
            None
        }
        kind => {
            let kind = match kind {
                "school" => LocationKind::School,
                "company" => LocationKind::Company,
                other => return Err(Error::parse(n, format!("unknown venue kind `{other}`"))),
            };
            let vid = int(5, "venue_id")?;
            if vid >= header.group_counts[kind.index()] {
                return Err(Error::parse(n, format!("agent {id} references missing {kind} {vid}")));
            }
            Some(Venue { kind, id: vid })
        }
    };
    Ok(Agent {
        id,
        age,
        susceptibility,
        household,
        venue,
    })
}

/// Exact class counts by largest remainder, shuffled over agent ids.
fn age_classes(config: &PopulationConfig, rng: &mut rng::Rng) -> Vec<AgeClass> {
    let n = config.n_agents;
    let shares = [config.child_share, config.adult_share, config.retired_share];
    let exact: Vec<f64> = shares.iter().map(|s| s * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut short = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if short == 0 {
            break;
        }
        counts[i] += 1;
        short -= 1;
    }
    let mut ages: Vec<AgeClass> = AgeClass::ALL
        .iter()
        .zip(&counts)
        .flat_map(|(&a, &c)| std::iter::repeat_n(a, c))
        .collect();
    ages.shuffle(rng);
    ages
}

fn draw_household_size(probs: &[f64], rng: &mut rng::Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i + 1;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) + 1
}
