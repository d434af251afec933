//! Row matrixing, pseudo targets and negative-answer replacement.
//!
//! Panel indices are 0-based everywhere except in the doc comments of
//! [`matrixize`], which also give the 1-based numbering of the row layout.

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::synth::{Raster, CANDIDATES, CONTEXT_PANELS, PANELS};

/// Rows per matrixed problem: two context rows plus one per candidate.
pub const ROWS: usize = 10;
/// Leading rows that carry the positive pseudo label.
pub const CONTEXT_ROWS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProblemError {
    #[error("a problem has {expected} panels, got {got}")]
    PanelCount { expected: usize, got: usize },
    #[error("k = {0} is outside [0, 8]")]
    ReplaceCount(usize),
    #[error("donor pool has no problem other than {0}")]
    EmptyPool(u64),
}

/// A problem as seen by training and inference: panels without the answer.
#[derive(Clone, Copy, Debug)]
pub struct ProblemView<'a> {
    problem_id: u64,
    panels: &'a [Raster],
}

impl<'a> ProblemView<'a> {
    pub fn new(problem_id: u64, panels: &'a [Raster]) -> Self {
        Self { problem_id, panels }
    }

    pub fn problem_id(&self) -> u64 {
        self.problem_id
    }

    pub fn panels(&self) -> &'a [Raster] {
        self.panels
    }

    /// Panel references in problem order, ready to be modified by replacement.
    pub fn panel_refs(&self) -> Vec<&'a Raster> {
        self.panels.iter().collect()
    }
}

/// Ten rows of three panel indices each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowMatrix {
    pub rows: [[usize; 3]; ROWS],
    pub source_problem_id: u64,
}

fn check_count(got: usize) -> Result<(), ProblemError> {
    if got != PANELS {
        return Err(ProblemError::PanelCount { expected: PANELS, got });
    }
    Ok(())
}

/// Row layout, 1-based: row 1 = (1,2,3), row 2 = (4,5,6), row j ≥ 3 = (7,8,j+6).
pub fn matrixize(problem_id: u64, panel_count: usize) -> Result<RowMatrix, ProblemError> {
    check_count(panel_count)?;
    let mut rows = [[0; 3]; ROWS];
    rows[0] = [0, 1, 2];
    rows[1] = [3, 4, 5];
    for (r, row) in rows.iter_mut().enumerate().skip(CONTEXT_ROWS) {
        *row = [6, 7, r + 6];
    }
    Ok(RowMatrix { rows, source_problem_id: problem_id })
}

/// The same layout over the transposed context: columns of the 3×3 matrix
/// become rows and each candidate completes the third column.
pub fn matrixize_columns(problem_id: u64, panel_count: usize) -> Result<RowMatrix, ProblemError> {
    check_count(panel_count)?;
    let mut rows = [[0; 3]; ROWS];
    rows[0] = [0, 3, 6];
    rows[1] = [1, 4, 7];
    for (r, row) in rows.iter_mut().enumerate().skip(CONTEXT_ROWS) {
        *row = [2, 5, r + 6];
    }
    Ok(RowMatrix { rows, source_problem_id: problem_id })
}

/// Ten binary row labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PseudoTarget {
    pub labels: [u8; ROWS],
}

/// The two-hot target: context rows positive, every candidate row negative.
pub fn pseudo_target() -> PseudoTarget {
    let mut labels = [0; ROWS];
    labels[..CONTEXT_ROWS].fill(1);
    PseudoTarget { labels }
}

/// Three-hot ground truth; for evaluation diagnostics only.
pub fn ground_truth_target(answer_index: u8) -> PseudoTarget {
    let mut t = pseudo_target();
    t.labels[CONTEXT_ROWS + usize::from(answer_index)] = 1;
    t
}

/// Where replacement panels came from.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReplacementRecord {
    pub k: usize,
    /// Replaced candidate slots (0..8), ascending.
    pub replaced_slots: Vec<usize>,
    /// Per replaced slot: (donor problem id, donor candidate slot).
    pub donors: Vec<(u64, usize)>,
}

impl ReplacementRecord {
    /// Matrix rows (0..10) whose third panel was replaced.
    pub fn replaced_rows(&self) -> Vec<usize> {
        self.replaced_slots.iter().map(|s| CONTEXT_ROWS + s).collect()
    }
}

/// Problems that may donate candidate panels.
#[derive(Clone, Copy, Debug)]
pub struct DonorPool<'a> {
    problems: &'a [ProblemView<'a>],
}

impl<'a> DonorPool<'a> {
    pub fn new(problems: &'a [ProblemView<'a>]) -> Self {
        Self { problems }
    }

    pub fn len(&self) -> usize {
        self.problems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.problems.is_empty()
    }

    fn sample<R: Rng + ?Sized>(&self, exclude: u64, rng: &mut R) -> Result<ProblemView<'a>, ProblemError> {
        if !self.problems.iter().any(|p| p.problem_id != exclude) {
            return Err(ProblemError::EmptyPool(exclude));
        }
        loop {
            let p = self.problems[rng.gen_range(0..self.problems.len())];
            if p.problem_id != exclude {
                return Ok(p);
            }
        }
    }
}

/// Overwrite `k` uniformly chosen candidate slots with candidate panels of
/// other problems. Context panels and the pseudo target are untouched.
pub fn replace_negatives<'a, R: Rng + ?Sized>(
    problem: ProblemView<'a>,
    k: usize,
    pool: &DonorPool<'a>,
    rng: &mut R,
) -> Result<(Vec<&'a Raster>, ReplacementRecord), ProblemError> {
    check_count(problem.panels.len())?;
    if k > CANDIDATES {
        return Err(ProblemError::ReplaceCount(k));
    }
    let mut panels = problem.panel_refs();
    if k == 0 {
        return Ok((panels, ReplacementRecord::default()));
    }
    let mut slots = index::sample(rng, CANDIDATES, k).into_vec();
    slots.sort_unstable();
    let mut donors = Vec::with_capacity(k);
    for &slot in &slots {
        let donor = pool.sample(problem.problem_id, rng)?;
        let donor_slot = rng.gen_range(0..CANDIDATES);
        panels[CONTEXT_PANELS + slot] = &donor.panels[CONTEXT_PANELS + donor_slot];
        donors.push((donor.problem_id, donor_slot));
    }
    Ok((panels, ReplacementRecord { k, replaced_slots: slots, donors }))
}
