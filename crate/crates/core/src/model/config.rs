use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const STEM_WIDTH: usize = 64;
pub const BLOCKS_PER_STAGE: usize = 3;
/// Output width of the first stage; doubles at every later stage.
pub const BASE_OUT_WIDTH: usize = 256;

/// Which of the three equivalent bottleneck formulations a block uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockForm {
    /// C separate paths, each reduce/transform/expand, summed.
    Split,
    /// C reduce/transform paths, concatenated, then one expand.
    Concat,
    /// One reduce, a grouped 3x3 with C groups, one expand.
    Grouped,
}

impl BlockForm {
    pub const ALL: [BlockForm; 3] = [BlockForm::Split, BlockForm::Concat, BlockForm::Grouped];

    pub fn as_str(self) -> &'static str {
        match self {
            BlockForm::Split => "split",
            BlockForm::Concat => "concat",
            BlockForm::Grouped => "grouped",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            BlockForm::Split => 0,
            BlockForm::Concat => 1,
            BlockForm::Grouped => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        BlockForm::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for BlockForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockForm::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown block form `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub depth: usize,
    pub cardinality: usize,
    pub base_width: usize,
    pub num_classes: usize,
    pub block_form: BlockForm,
}

impl ModelConfig {
    pub fn new(depth: usize, cardinality: usize, base_width: usize, num_classes: usize) -> Self {
        ModelConfig {
            depth,
            cardinality,
            base_width,
            num_classes,
            block_form: BlockForm::Grouped,
        }
    }

    pub fn with_form(mut self, form: BlockForm) -> Self {
        self.block_form = form;
        self
    }

    /// Series label such as `8x64d`.
    pub fn label(&self) -> String {
        format!("{}x{}d", self.cardinality, self.base_width)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ResNeXt-{} ({}, {} classes, {})",
            self.depth,
            self.label(),
            self.num_classes,
            self.block_form
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    /// One-based stage number.
    pub index: usize,
    pub blocks: usize,
    pub inner_width: usize,
    pub out_width: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub stages: Vec<StageSpec>,
}

impl StagePlan {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn final_width(&self) -> usize {
        self.stages.last().map_or(STEM_WIDTH, |s| s.out_width)
    }
}

/// Checks a config and derives its stage plan. Each stage holds three
/// bottleneck blocks of three layers, and the stem conv plus the classifier
/// add two more, hence `(depth - 2) % 9 == 0`.
pub fn validate_config(cfg: &ModelConfig) -> Result<StagePlan> {
    if cfg.cardinality == 0 {
        return Err(Error::InvalidConfig("cardinality must be at least 1".into()));
    }
    if cfg.base_width == 0 {
        return Err(Error::InvalidConfig("base width must be at least 1".into()));
    }
    if cfg.num_classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 classes, got {}",
            cfg.num_classes
        )));
    }
    let per_stage = 3 * BLOCKS_PER_STAGE;
    if cfg.depth < 2 + per_stage || !(cfg.depth - 2).is_multiple_of(per_stage) {
        return Err(Error::InvalidConfig(format!(
            "depth {} violates the bottleneck rule: depth - 2 must be a positive multiple of {per_stage}",
            cfg.depth
        )));
    }
    let stages = (1..=(cfg.depth - 2) / per_stage)
        .map(|s| {
            let scale = 1 << (s - 1);
            StageSpec {
                index: s,
                blocks: BLOCKS_PER_STAGE,
                inner_width: cfg.cardinality * cfg.base_width * scale,
                out_width: BASE_OUT_WIDTH * scale,
                stride: if s == 1 { 1 } else { 2 },
            }
        })
        .collect();
    Ok(StagePlan { stages })
}
