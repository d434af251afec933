//! Procedural generator for miniature progressive-matrix problems.
//!
//! Each panel holds 1–4 entities on a 2×2 grid. All entities of a panel
//! share shape, size and shade; the entity count is the fourth attribute.
//! Every attribute follows a row-wise rule. Candidates are built by three
//! rounds of single-attribute perturbation starting from the answer, which
//! yields eight distinct attribute tuples of which only the answer satisfies
//! the rules.

mod raster;

pub use raster::{rasterize, shade_gray, BACKGROUND};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of attribute levels (shape kinds, size levels, shade levels, entity counts).
pub const LEVELS: u8 = 4;
pub const CONTEXT_PANELS: usize = 8;
pub const CANDIDATES: usize = 8;
pub const PANELS: usize = CONTEXT_PANELS + CANDIDATES;
pub const PANEL_SIZES: [u16; 3] = [32, 64, 96];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenError {
    #[error("panel size {0} is not one of 32, 64, 96")]
    PanelSize(u16),
    #[error("count must be positive")]
    EmptyRequest,
    #[error("problem {problem_id}: no valid problem after {attempts} attempts ({reason})")]
    Exhausted { problem_id: u64, attempts: u32, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ShapeKind {
    Triangle,
    Square,
    Circle,
    Pentagon,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Triangle, ShapeKind::Square, ShapeKind::Circle, ShapeKind::Pentagon];

    pub fn level(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_level(level: u8) -> Option<Self> {
        Self::ALL.get(usize::from(level).checked_sub(1)?).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Attribute {
    Shape,
    Size,
    Shade,
    Number,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [Attribute::Shape, Attribute::Size, Attribute::Shade, Attribute::Number];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Shape => "shape",
            Attribute::Size => "size",
            Attribute::Shade => "shade",
            Attribute::Number => "number",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Entity {
    pub shape: ShapeKind,
    /// 1..=4
    pub size: u8,
    /// 1..=4, lightest to darkest
    pub shade: u8,
    /// 0..=3, row-major in the 2×2 layout
    pub cell: u8,
}

/// Symbolic content of one panel.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct PanelSpec {
    pub entities: Vec<Entity>,
}

impl PanelSpec {
    /// Checks the cell and level ranges and that no cell is occupied twice.
    pub fn is_valid(&self) -> bool {
        let mut used = [false; 4];
        for e in &self.entities {
            let cell = usize::from(e.cell);
            if cell >= 4 || used[cell] || !(1..=LEVELS).contains(&e.size) || !(1..=LEVELS).contains(&e.shade) {
                return false;
            }
            used[cell] = true;
        }
        true
    }

    /// Level of a panel-wide attribute; `None` for an empty panel or when
    /// entities disagree.
    pub fn attribute(&self, attr: Attribute) -> Option<u8> {
        let first = self.entities.first()?;
        let pick = |e: &Entity| match attr {
            Attribute::Shape => e.shape.level(),
            Attribute::Size => e.size,
            Attribute::Shade => e.shade,
            Attribute::Number => self.entities.len() as u8,
        };
        let v = pick(first);
        self.entities.iter().all(|e| pick(e) == v).then_some(v)
    }

    fn levels(&self) -> Option<[u8; 4]> {
        let mut out = [0; 4];
        for (slot, attr) in out.iter_mut().zip(Attribute::ALL) {
            *slot = self.attribute(attr)?;
        }
        Some(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Constant,
    /// Progression with step +1 along each row.
    Increase,
    /// Progression with step −1 along each row.
    Decrease,
    /// Each row is a permutation of the same three distinct levels.
    DistributeThree,
}

impl Rule {
    pub const ALL: [Rule; 4] = [Rule::Constant, Rule::Increase, Rule::Decrease, Rule::DistributeThree];

    fn code(self) -> u32 {
        self as u32
    }

    fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Rule::Constant => "constant",
            Rule::Increase => "progression+1",
            Rule::Decrease => "progression-1",
            Rule::DistributeThree => "distribute_three",
        }
    }

    /// Whether a full 3×3 grid of levels obeys this rule row-wise.
    pub fn holds(self, grid: &[[u8; 3]; 3]) -> bool {
        match self {
            Rule::Constant => grid.iter().all(|r| r[0] == r[1] && r[1] == r[2]),
            Rule::Increase => grid.iter().all(|r| r[1] == r[0] + 1 && r[2] == r[1] + 1),
            Rule::Decrease => grid.iter().all(|r| r[0] >= 2 && r[1] == r[0] - 1 && r[2] + 1 == r[1]),
            Rule::DistributeThree => {
                let key = |r: &[u8; 3]| {
                    let mut s = *r;
                    s.sort_unstable();
                    s
                };
                let first = key(&grid[0]);
                first[0] != first[1] && first[1] != first[2] && grid.iter().all(|r| key(r) == first)
            }
        }
    }
}

/// One rule per attribute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RuleSet {
    pub rules: [Rule; 4],
}

impl RuleSet {
    pub fn get(&self, attr: Attribute) -> Rule {
        self.rules[attr as usize]
    }

    /// Packed form used on disk: four bits per attribute, shape in the low nibble.
    pub fn descriptor(&self) -> u32 {
        self.rules.iter().enumerate().fold(0, |acc, (i, r)| acc | (r.code() << (4 * i)))
    }

    pub fn from_descriptor(d: u32) -> Option<Self> {
        if d >> 16 != 0 {
            return None;
        }
        let mut rules = [Rule::Constant; 4];
        for (i, slot) in rules.iter_mut().enumerate() {
            *slot = Rule::from_code((d >> (4 * i)) & 0xF)?;
        }
        Some(Self { rules })
    }

    pub fn has_non_constant(&self) -> bool {
        self.rules.iter().any(|r| *r != Rule::Constant)
    }

    /// Human-readable key, e.g. `shape=constant,size=progression+1,...`.
    pub fn label(&self) -> String {
        Attribute::ALL.iter().map(|a| format!("{}={}", a.name(), self.get(*a).name())).collect::<Vec<_>>().join(",")
    }
}

/// True iff every attribute rule holds in all three rows.
pub fn rule_check(rows: &[[PanelSpec; 3]; 3], rules: &RuleSet) -> bool {
    let mut grids = [[[0u8; 3]; 3]; 4];
    for (r, row) in rows.iter().enumerate() {
        for (c, panel) in row.iter().enumerate() {
            if !panel.is_valid() {
                return false;
            }
            let Some(levels) = panel.levels() else { return false };
            for a in 0..4 {
                grids[a][r][c] = levels[a];
            }
        }
    }
    Attribute::ALL.iter().all(|&a| rules.get(a).holds(&grids[a as usize]))
}

/// A grayscale raster, row-major, `size × size` bytes.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Raster {
    pub size: u16,
    pub pixels: Vec<u8>,
}

/// A generated or loaded problem, including its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct RpmProblem {
    pub problem_id: u64,
    /// Panels 0..8 are context (row-major, missing ninth), 8..16 candidates.
    pub panels: Vec<Raster>,
    pub answer_index: u8,
    pub rules: RuleSet,
    /// Symbolic panels; present for freshly generated problems only.
    pub specs: Option<Vec<PanelSpec>>,
}

impl RpmProblem {
    /// The label-free view consumed by training and inference.
    pub fn unlabeled(&self) -> crate::problem::ProblemView<'_> {
        crate::problem::ProblemView::new(self.problem_id, &self.panels)
    }

    pub fn panel_size(&self) -> u16 {
        self.panels.first().map_or(0, |p| p.size)
    }

    /// Re-check the symbolic specs: returns, per candidate, whether it
    /// completes the rules of the first two rows.
    pub fn candidate_verdicts(&self) -> Option<[bool; CANDIDATES]> {
        let specs = self.specs.as_ref()?;
        let mut out = [false; CANDIDATES];
        for (c, v) in out.iter_mut().enumerate() {
            let rows = [
                [specs[0].clone(), specs[1].clone(), specs[2].clone()],
                [specs[3].clone(), specs[4].clone(), specs[5].clone()],
                [specs[6].clone(), specs[7].clone(), specs[CONTEXT_PANELS + c].clone()],
            ];
            *v = rule_check(&rows, &self.rules);
        }
        Some(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub panel_size: u16,
    /// First problem id; shards with disjoint id ranges never share a problem.
    pub id_offset: u64,
    /// Rules the generator may draw; at least one non-constant is required per problem.
    pub allowed_rules: Vec<Rule>,
    pub max_attempts: u32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { panel_size: 32, id_offset: 0, allowed_rules: Rule::ALL.to_vec(), max_attempts: 64 }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if !PANEL_SIZES.contains(&self.panel_size) {
            return Err(GenError::PanelSize(self.panel_size));
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the per-problem generator: depends only on (seed, problem id).
pub fn problem_seed(seed: u64, problem_id: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ problem_id.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Lazily generate `count` problems with ids `id_offset..id_offset+count`.
pub fn generate(
    seed: u64,
    count: usize,
    config: &GeneratorConfig,
) -> Result<impl Iterator<Item = Result<RpmProblem, GenError>> + '_, GenError> {
    config.validate()?;
    if count == 0 {
        return Err(GenError::EmptyRequest);
    }
    Ok((0..count as u64).map(move |i| generate_one(seed, config.id_offset + i, config)))
}

/// Generate a whole shard, in parallel across problem ids.
pub fn generate_all(seed: u64, count: usize, config: &GeneratorConfig) -> Result<Vec<RpmProblem>, GenError> {
    config.validate()?;
    if count == 0 {
        return Err(GenError::EmptyRequest);
    }
    (0..count as u64).into_par_iter().map(|i| generate_one(seed, config.id_offset + i, config)).collect()
}

/// Generate the problem with the given id.
pub fn generate_one(seed: u64, problem_id: u64, config: &GeneratorConfig) -> Result<RpmProblem, GenError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(problem_seed(seed, problem_id));
    let mut reason = String::from("no attempts made");
    for _ in 0..config.max_attempts.max(1) {
        match attempt(&mut rng, config) {
            Ok((rules, specs, answer_index)) => {
                let panels = specs.iter().map(|s| rasterize(s, config.panel_size)).collect();
                return Ok(RpmProblem { problem_id, panels, answer_index, rules, specs: Some(specs) });
            }
            Err(r) => reason = r,
        }
    }
    Err(GenError::Exhausted { problem_id, attempts: config.max_attempts.max(1), reason })
}

fn draw_rules(rng: &mut ChaCha8Rng, allowed: &[Rule]) -> Result<RuleSet, String> {
    if allowed.is_empty() {
        return Err("no rules allowed".into());
    }
    // Constant gets as much weight as the other kinds together, so a typical
    // problem changes two attributes and holds the other two.
    let weight = |r: &Rule| if *r == Rule::Constant { 3 } else { 1 };
    let total: u32 = allowed.iter().map(weight).sum();
    let mut rules = [Rule::Constant; 4];
    for slot in rules.iter_mut() {
        let mut pick = rng.gen_range(0..total);
        for r in allowed {
            if pick < weight(r) {
                *slot = *r;
                break;
            }
            pick -= weight(r);
        }
    }
    let set = RuleSet { rules };
    if !set.has_non_constant() {
        return Err("drew only constant rules".into());
    }
    Ok(set)
}

fn draw_grid(rng: &mut ChaCha8Rng, rule: Rule) -> [[u8; 3]; 3] {
    let mut grid = [[0u8; 3]; 3];
    match rule {
        Rule::Constant => {
            for row in grid.iter_mut() {
                *row = [rng.gen_range(1..=LEVELS); 3];
            }
        }
        Rule::Increase => {
            for row in grid.iter_mut() {
                let s = rng.gen_range(1..=LEVELS - 2);
                *row = [s, s + 1, s + 2];
            }
        }
        Rule::Decrease => {
            for row in grid.iter_mut() {
                let s = rng.gen_range(3..=LEVELS);
                *row = [s, s - 1, s - 2];
            }
        }
        Rule::DistributeThree => {
            let mut levels: Vec<u8> = (1..=LEVELS).collect();
            levels.shuffle(rng);
            let mut first = [levels[0], levels[1], levels[2]];
            first.shuffle(rng);
            let shift = if rng.gen_bool(0.5) { 1 } else { 2 };
            for (r, row) in grid.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = first[(c + r * shift) % 3];
                }
            }
        }
    }
    grid
}

/// Occupied cells for an entity count. Layouts are nested so that panels
/// of a row stay pixel-aligned where their entities overlap.
fn cells_for(count: u8) -> Vec<u8> {
    let mut cells = CELL_ORDER[..usize::from(count)].to_vec();
    cells.sort_unstable();
    cells
}

const CELL_ORDER: [u8; 4] = [0, 3, 1, 2];

fn build_panel(levels: [u8; 4], cells: &[u8]) -> PanelSpec {
    let shape = ShapeKind::from_level(levels[0]).expect("shape level in range");
    PanelSpec { entities: cells.iter().map(|&cell| Entity { shape, size: levels[1], shade: levels[2], cell }).collect() }
}

type Attempt = (RuleSet, Vec<PanelSpec>, u8);

fn attempt(rng: &mut ChaCha8Rng, config: &GeneratorConfig) -> Result<Attempt, String> {
    let rules = draw_rules(rng, &config.allowed_rules)?;
    let grids: Vec<[[u8; 3]; 3]> = Attribute::ALL.iter().map(|&a| draw_grid(rng, rules.get(a))).collect();
    let levels_at = |r: usize, c: usize| [grids[0][r][c], grids[1][r][c], grids[2][r][c], grids[3][r][c]];

    let mut specs = Vec::with_capacity(PANELS);
    for p in 0..CONTEXT_PANELS {
        let levels = levels_at(p / 3, p % 3);
        specs.push(build_panel(levels, &cells_for(levels[3])));
    }

    // Candidate cube: three attributes, each either at the answer level or
    // at one alternative level; every candidate is one perturbation away
    // from another.
    let answer_levels = levels_at(2, 2);
    let mut attrs = Attribute::ALL.to_vec();
    attrs.shuffle(rng);
    attrs.truncate(3);
    let mut candidates: Vec<[u8; 4]> = vec![answer_levels];
    for &attr in &attrs {
        let current = answer_levels[attr as usize];
        let alternatives: Vec<u8> = (1..=LEVELS).filter(|&l| l != current).collect();
        let alt = *alternatives.choose(rng).expect("three alternatives");
        let perturbed: Vec<[u8; 4]> = candidates
            .iter()
            .map(|c| {
                let mut d = *c;
                d[attr as usize] = alt;
                d
            })
            .collect();
        candidates.extend(perturbed);
    }

    let mut order: Vec<usize> = (0..CANDIDATES).collect();
    order.shuffle(rng);
    let answer_index = order.iter().position(|&i| i == 0).expect("answer present") as u8;
    for &i in &order {
        let levels = candidates[i];
        specs.push(build_panel(levels, &cells_for(levels[3])));
    }

    let rows = |c: usize| {
        [
            [specs[0].clone(), specs[1].clone(), specs[2].clone()],
            [specs[3].clone(), specs[4].clone(), specs[5].clone()],
            [specs[6].clone(), specs[7].clone(), specs[CONTEXT_PANELS + c].clone()],
        ]
    };
    for c in 0..CANDIDATES {
        let ok = rule_check(&rows(c), &rules);
        if ok != (c == usize::from(answer_index)) {
            return Err(format!("candidate {c} verdict {ok} contradicts answer {answer_index}"));
        }
    }
    Ok((rules, specs, answer_index))
}
