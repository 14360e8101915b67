//! Bottleneck blocks with aggregated residual transformations.
//!
//! `y = relu(shortcut(x) + bn_out(sum_i T_i(x)))`, where each path `T_i`
//! reduces to `inner_width / C` channels, applies a 3x3 transform and expands
//! back to `out_width`. The three forms compute the same function:
//!
//! * split: every path keeps its own reduce, 3x3 and expand convolutions;
//!   the expanded outputs are summed.
//! * concat: paths keep their own reduce and 3x3; their outputs are
//!   concatenated and a single 1x1 conv expands them.
//! * grouped: one 1x1 reduce to `inner_width`, one 3x3 with `C` groups,
//!   one 1x1 expand.
//!
//! The output batch norm is shared and applied after the aggregation, which
//! keeps the forms identical in training mode as well.

use rand::Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{invalid, Result};
use crate::model::config::BlockForm;
use crate::nn::{BatchNorm2d, Conv2d, ConvGeometry, Mode};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub in_width: usize,
    pub inner_width: usize,
    pub out_width: usize,
    pub stride: usize,
    pub cardinality: usize,
}

impl BlockSpec {
    pub fn path_width(&self) -> usize {
        self.inner_width / self.cardinality
    }

    pub fn needs_projection(&self) -> bool {
        self.stride != 1 || self.in_width != self.out_width
    }

    pub fn check(&self) -> Result<()> {
        if self.cardinality == 0 || self.inner_width == 0 || self.in_width == 0 || self.out_width == 0 {
            return Err(invalid(format!("degenerate block {self:?}")));
        }
        if !self.inner_width.is_multiple_of(self.cardinality) {
            return Err(invalid(format!(
                "inner width {} not divisible by cardinality {}",
                self.inner_width, self.cardinality
            )));
        }
        Ok(())
    }
}

/// One reduce -> 3x3 chain of the split and concat forms.
#[derive(Clone, Debug)]
pub struct PathHead {
    pub reduce: Conv2d,
    pub bn_reduce: BatchNorm2d,
    pub transform: Conv2d,
    pub bn_transform: BatchNorm2d,
}

impl PathHead {
    fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: &BlockSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let w = spec.path_width();
        Ok(PathHead {
            reduce: Conv2d::new(
                store,
                &format!("{name}.reduce"),
                ConvGeometry::new(spec.in_width, w, 1, 1, 0, 1)?,
                rng,
            )?,
            bn_reduce: BatchNorm2d::new(store, &format!("{name}.bn_reduce"), w),
            transform: Conv2d::new(
                store,
                &format!("{name}.transform"),
                ConvGeometry::new(w, w, 3, spec.stride, 1, 1)?,
                rng,
            )?,
            bn_transform: BatchNorm2d::new(store, &format!("{name}.bn_transform"), w),
        })
    }

    fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.reduce.forward(tape, store, x)?;
        let h = self.bn_reduce.forward(tape, store, h, mode)?;
        let h = tape.relu(h);
        let h = self.transform.forward(tape, store, h)?;
        let h = self.bn_transform.forward(tape, store, h, mode)?;
        Ok(tape.relu(h))
    }
}

/// A full split-form path: reduce, 3x3, then its own expand.
#[derive(Clone, Debug)]
pub struct SplitPath {
    pub head: PathHead,
    pub expand: Conv2d,
}

/// A transformation that can be aggregated by [`aggregate_transform`].
pub trait Transform<T: Element> {
    fn apply(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var>;
}

impl<T: Element> Transform<T> for SplitPath {
    fn apply(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.head.forward(tape, store, x, mode)?;
        self.expand.forward(tape, store, h)
    }
}

/// `F(x) = sum_i T_i(x)` in path order, without shortcut or normalization.
pub fn aggregate_transform<T: Element, P: Transform<T>>(
    tape: &mut Tape<T>,
    store: &mut ParamStore<T>,
    x: Var,
    paths: &[P],
    mode: Mode,
) -> Result<Var> {
    let (first, rest) = paths
        .split_first()
        .ok_or_else(|| invalid("aggregation needs at least one path"))?;
    let mut acc = first.apply(tape, store, x, mode)?;
    for p in rest {
        let y = p.apply(tape, store, x, mode)?;
        acc = tape.add(acc, y)?;
    }
    Ok(acc)
}

#[derive(Clone, Debug)]
pub enum BlockBody {
    Split {
        paths: Vec<SplitPath>,
        bn_out: BatchNorm2d,
    },
    Concat {
        paths: Vec<PathHead>,
        expand: Conv2d,
        bn_out: BatchNorm2d,
    },
    Grouped {
        reduce: Conv2d,
        bn_reduce: BatchNorm2d,
        transform: Conv2d,
        bn_transform: BatchNorm2d,
        expand: Conv2d,
        bn_out: BatchNorm2d,
    },
}

/// 1x1 strided convolution + batch norm on the shortcut.
#[derive(Clone, Debug)]
pub struct Projection {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub name: String,
    pub spec: BlockSpec,
    pub body: BlockBody,
    pub shortcut: Option<Projection>,
}

impl Block {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: BlockSpec,
        form: BlockForm,
        rng: &mut R,
    ) -> Result<Self> {
        spec.check()?;
        let c = spec.cardinality;
        let body = match form {
            BlockForm::Split => {
                let mut paths = Vec::with_capacity(c);
                for i in 0..c {
                    let pname = format!("{name}.path{i}");
                    let head = PathHead::new(store, &pname, &spec, rng)?;
                    let expand = Conv2d::new(
                        store,
                        &format!("{pname}.expand"),
                        ConvGeometry::new(spec.path_width(), spec.out_width, 1, 1, 0, 1)?,
                        rng,
                    )?;
                    paths.push(SplitPath { head, expand });
                }
                BlockBody::Split {
                    paths,
                    bn_out: BatchNorm2d::new(store, &format!("{name}.bn_out"), spec.out_width),
                }
            }
            BlockForm::Concat => {
                let paths = (0..c)
                    .map(|i| PathHead::new(store, &format!("{name}.path{i}"), &spec, rng))
                    .collect::<Result<Vec<_>>>()?;
                BlockBody::Concat {
                    paths,
                    expand: Conv2d::new(
                        store,
                        &format!("{name}.expand"),
                        ConvGeometry::new(spec.inner_width, spec.out_width, 1, 1, 0, 1)?,
                        rng,
                    )?,
                    bn_out: BatchNorm2d::new(store, &format!("{name}.bn_out"), spec.out_width),
                }
            }
            BlockForm::Grouped => BlockBody::Grouped {
                reduce: Conv2d::new(
                    store,
                    &format!("{name}.reduce"),
                    ConvGeometry::new(spec.in_width, spec.inner_width, 1, 1, 0, 1)?,
                    rng,
                )?,
                bn_reduce: BatchNorm2d::new(store, &format!("{name}.bn_reduce"), spec.inner_width),
                transform: Conv2d::new(
                    store,
                    &format!("{name}.transform"),
                    ConvGeometry::new(spec.inner_width, spec.inner_width, 3, spec.stride, 1, c)?,
                    rng,
                )?,
                bn_transform: BatchNorm2d::new(store, &format!("{name}.bn_transform"), spec.inner_width),
                expand: Conv2d::new(
                    store,
                    &format!("{name}.expand"),
                    ConvGeometry::new(spec.inner_width, spec.out_width, 1, 1, 0, 1)?,
                    rng,
                )?,
                bn_out: BatchNorm2d::new(store, &format!("{name}.bn_out"), spec.out_width),
            },
        };
        let shortcut = if spec.needs_projection() {
            Some(Projection {
                conv: Conv2d::new(
                    store,
                    &format!("{name}.shortcut"),
                    ConvGeometry::new(spec.in_width, spec.out_width, 1, spec.stride, 0, 1)?,
                    rng,
                )?,
                bn: BatchNorm2d::new(store, &format!("{name}.shortcut_bn"), spec.out_width),
            })
        } else {
            None
        };
        Ok(Block {
            name: name.to_string(),
            spec,
            body,
            shortcut,
        })
    }

    pub fn form(&self) -> BlockForm {
        match self.body {
            BlockBody::Split { .. } => BlockForm::Split,
            BlockBody::Concat { .. } => BlockForm::Concat,
            BlockBody::Grouped { .. } => BlockForm::Grouped,
        }
    }

    /// Sequential convolution layers on the residual branch (reduce,
    /// transform, expand); the projection shortcut is not counted.
    pub fn residual_depth(&self) -> usize {
        3
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let c = tape.shape(x).c;
        if c != self.spec.in_width {
            return Err(invalid(format!(
                "block {} expects {} input channels, got {}",
                self.name, self.spec.in_width, c
            )));
        }
        let residual = match &self.body {
            BlockBody::Split { paths, bn_out } => {
                let agg = aggregate_transform(tape, store, x, paths, mode)?;
                bn_out.forward(tape, store, agg, mode)?
            }
            BlockBody::Concat { paths, expand, bn_out } => {
                let outs = paths
                    .iter()
                    .map(|p| p.forward(tape, store, x, mode))
                    .collect::<Result<Vec<_>>>()?;
                let cat = tape.concat_channels(&outs)?;
                let h = expand.forward(tape, store, cat)?;
                bn_out.forward(tape, store, h, mode)?
            }
            BlockBody::Grouped {
                reduce,
                bn_reduce,
                transform,
                bn_transform,
                expand,
                bn_out,
            } => {
                let h = reduce.forward(tape, store, x)?;
                let h = bn_reduce.forward(tape, store, h, mode)?;
                let h = tape.relu(h);
                let h = transform.forward(tape, store, h)?;
                let h = bn_transform.forward(tape, store, h, mode)?;
                let h = tape.relu(h);
                let h = expand.forward(tape, store, h)?;
                bn_out.forward(tape, store, h, mode)?
            }
        };
        let short = match &self.shortcut {
            Some(p) => {
                let s = p.conv.forward(tape, store, x)?;
                p.bn.forward(tape, store, s, mode)?
            }
            None => x,
        };
        let sum = tape.add(short, residual)?;
        Ok(tape.relu(sum))
    }

    fn forward_as<T: Element>(
        &self,
        form: BlockForm,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        if self.form() != form {
            return Err(invalid(format!(
                "block {} is in {} form, not {form}",
                self.name,
                self.form()
            )));
        }
        self.forward(tape, store, x, mode)
    }
}

pub fn block_forward_split<T: Element>(
    tape: &mut Tape<T>,
    store: &mut ParamStore<T>,
    block: &Block,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    block.forward_as(BlockForm::Split, tape, store, x, mode)
}

pub fn block_forward_concat<T: Element>(
    tape: &mut Tape<T>,
    store: &mut ParamStore<T>,
    block: &Block,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    block.forward_as(BlockForm::Concat, tape, store, x, mode)
}

pub fn block_forward_grouped<T: Element>(
    tape: &mut Tape<T>,
    store: &mut ParamStore<T>,
    block: &Block,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    block.forward_as(BlockForm::Grouped, tape, store, x, mode)
}
