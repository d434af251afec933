//! RPMPACK: a self-describing binary container for generated problems.
//!
//! ```text
//! "RPMK"  version:u16  panel_size:u16  problem_count:u32
//! problem_count × { problem_id:u64  rule_descriptor:u32  answer_index:u8
//!                   16 × panel_size² grayscale bytes, row-major }
//! crc32:u32   (over every preceding byte)
//! ```
//!
//! All integers are little-endian.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::synth::{Raster, RpmProblem, RuleSet, CANDIDATES, PANELS, PANEL_SIZES};

pub const MAGIC: &[u8; 4] = b"RPMK";
pub const VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 2 + 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PackError {
    #[error("RPMPACK truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("not an RPMPACK file (bad magic)")]
    BadMagic,
    #[error("RPMPACK CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    BadCrc { stored: u32, computed: u32 },
    #[error("RPMPACK version {found} is not supported (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("RPMPACK declares {declared} problems but the payload holds {actual} bytes more than that")]
    TrailingBytes { declared: u32, actual: usize },
    #[error("invalid RPMPACK content: {0}")]
    Invalid(String),
}

fn record_len(panel_size: u16) -> usize {
    8 + 4 + 1 + PANELS * usize::from(panel_size) * usize::from(panel_size)
}

/// Streaming writer; the problem count is fixed up front.
pub struct PackWriter {
    out: BufWriter<File>,
    path: PathBuf,
    hasher: crc32fast::Hasher,
    panel_size: u16,
    declared: u32,
    written: u32,
}

impl PackWriter {
    pub fn create(path: &Path, panel_size: u16, count: u32) -> crate::Result<Self> {
        if !PANEL_SIZES.contains(&panel_size) {
            return Err(PackError::Invalid(format!("panel size {panel_size}")).into());
        }
        let file = File::create(path).map_err(|e| crate::Error::io(path, e))?;
        let mut w = Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
            hasher: crc32fast::Hasher::new(),
            panel_size,
            declared: count,
            written: 0,
        };
        let mut header = Vec::with_capacity(HEADER);
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        header.extend_from_slice(&panel_size.to_le_bytes());
        header.extend_from_slice(&count.to_le_bytes());
        w.emit(&header)?;
        Ok(w)
    }

    fn emit(&mut self, bytes: &[u8]) -> crate::Result<()> {
        self.hasher.update(bytes);
        self.out.write_all(bytes).map_err(|e| crate::Error::io(&self.path, e))
    }

    pub fn push(&mut self, problem: &RpmProblem) -> crate::Result<()> {
        if self.written == self.declared {
            return Err(PackError::Invalid(format!("more than the declared {} problems", self.declared)).into());
        }
        check_problem(problem, self.panel_size)?;
        self.emit(&encode_record(problem))?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> crate::Result<()> {
        if self.written != self.declared {
            return Err(PackError::Invalid(format!("wrote {} of {} declared problems", self.written, self.declared)).into());
        }
        let crc = self.hasher.clone().finalize();
        self.out.write_all(&crc.to_le_bytes()).map_err(|e| crate::Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| crate::Error::io(&self.path, e))
    }
}

fn check_problem(problem: &RpmProblem, panel_size: u16) -> Result<(), PackError> {
    if problem.panels.len() != PANELS {
        return Err(PackError::Invalid(format!("problem {} has {} panels", problem.problem_id, problem.panels.len())));
    }
    if usize::from(problem.answer_index) >= CANDIDATES {
        return Err(PackError::Invalid(format!("answer index {}", problem.answer_index)));
    }
    let side = usize::from(panel_size);
    if problem.panels.iter().any(|p| p.size != panel_size || p.pixels.len() != side * side) {
        return Err(PackError::Invalid(format!("problem {} has panels not of size {panel_size}", problem.problem_id)));
    }
    Ok(())
}

fn encode_record(problem: &RpmProblem) -> Vec<u8> {
    let mut rec = Vec::with_capacity(record_len(problem.panel_size()));
    rec.extend_from_slice(&problem.problem_id.to_le_bytes());
    rec.extend_from_slice(&problem.rules.descriptor().to_le_bytes());
    rec.push(problem.answer_index);
    for p in &problem.panels {
        rec.extend_from_slice(&p.pixels);
    }
    rec
}

/// Serialize a whole shard in memory.
pub fn to_bytes(problems: &[RpmProblem], panel_size: u16) -> Result<Vec<u8>, PackError> {
    let mut out = Vec::with_capacity(HEADER + problems.len() * record_len(panel_size) + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&panel_size.to_le_bytes());
    out.extend_from_slice(&(problems.len() as u32).to_le_bytes());
    for p in problems {
        check_problem(p, panel_size)?;
        out.extend_from_slice(&encode_record(p));
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parse and fully validate a shard.
pub fn from_bytes(bytes: &[u8]) -> Result<Vec<RpmProblem>, PackError> {
    if bytes.len() < 4 {
        return Err(PackError::Truncated { expected: HEADER + 4, found: bytes.len() });
    }
    if &bytes[..4] != MAGIC {
        return Err(PackError::BadMagic);
    }
    if bytes.len() < HEADER + 4 {
        return Err(PackError::Truncated { expected: HEADER + 4, found: bytes.len() });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(PackError::Version { found: version, expected: VERSION });
    }
    let panel_size = u16::from_le_bytes([bytes[6], bytes[7]]);
    if !PANEL_SIZES.contains(&panel_size) {
        return Err(PackError::Invalid(format!("panel size {panel_size}")));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let rec = record_len(panel_size);
    let expected = HEADER + count as usize * rec + 4;
    if bytes.len() < expected {
        return Err(PackError::Truncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(PackError::TrailingBytes { declared: count, actual: bytes.len() - expected });
    }
    let (body, tail) = bytes.split_at(expected - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(PackError::BadCrc { stored, computed });
    }
    let side = usize::from(panel_size);
    body[HEADER..]
        .chunks_exact(rec)
        .map(|r| {
            let problem_id = u64::from_le_bytes(r[..8].try_into().unwrap());
            let descriptor = u32::from_le_bytes(r[8..12].try_into().unwrap());
            let rules = RuleSet::from_descriptor(descriptor)
                .ok_or_else(|| PackError::Invalid(format!("problem {problem_id}: rule descriptor {descriptor:#x}")))?;
            let answer_index = r[12];
            if usize::from(answer_index) >= CANDIDATES {
                return Err(PackError::Invalid(format!("problem {problem_id}: answer index {answer_index}")));
            }
            let panels = r[13..].chunks_exact(side * side).map(|px| Raster { size: panel_size, pixels: px.to_vec() }).collect();
            Ok(RpmProblem { problem_id, panels, answer_index, rules, specs: None })
        })
        .collect()
}

pub fn read(path: &Path) -> crate::Result<Vec<RpmProblem>> {
    let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
    Ok(from_bytes(&bytes)?)
}

pub fn write(path: &Path, problems: &[RpmProblem], panel_size: u16) -> crate::Result<()> {
    let bytes = to_bytes(problems, panel_size)?;
    std::fs::write(path, bytes).map_err(|e| crate::Error::io(path, e))
}
