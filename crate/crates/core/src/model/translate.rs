//! Parameter remapping between the three block forms.
//!
//! Every form is first read into per-path pieces (reduce, 3x3 and expand
//! weights plus the matching batch-norm slices) and then written out in the
//! target layout:
//!
//! * the C reduce weights stack along the output axis into one 1x1 conv;
//! * the C 3x3 weights stack along the output axis, which is exactly the
//!   grouped weight layout `[inner, inner / C, 3, 3]`;
//! * the C expand weights concatenate along the input-channel axis;
//! * per-channel batch-norm tensors concatenate in path order.
//!
//! Only copies are involved, so translating and translating back is
//! bitwise lossless.

use crate::autograd::{ParamId, ParamStore};
use crate::error::{invalid, Result};
use crate::model::block::{Block, BlockBody, PathHead, Projection, SplitPath};
use crate::model::config::BlockForm;
use crate::nn::BatchNorm2d;
use crate::rng;
use crate::tensor::{Element, Tensor};

#[derive(Clone)]
struct BnState<T> {
    gamma: Tensor<T>,
    beta: Tensor<T>,
    mean: Tensor<T>,
    var: Tensor<T>,
}

impl<T: Element> BnState<T> {
    fn read(store: &ParamStore<T>, bn: &BatchNorm2d) -> Self {
        BnState {
            gamma: store.value(bn.gamma).clone(),
            beta: store.value(bn.beta).clone(),
            mean: store.value(bn.running_mean).clone(),
            var: store.value(bn.running_var).clone(),
        }
    }

    fn slice(&self, start: usize, len: usize) -> Self {
        BnState {
            gamma: self.gamma.slice_channels(start, len),
            beta: self.beta.slice_channels(start, len),
            mean: self.mean.slice_channels(start, len),
            var: self.var.slice_channels(start, len),
        }
    }

    fn concat(parts: &[BnState<T>]) -> Result<Self> {
        let cat = |f: fn(&BnState<T>) -> &Tensor<T>| {
            let refs: Vec<&Tensor<T>> = parts.iter().map(f).collect();
            Tensor::concat_channels(&refs)
        };
        Ok(BnState {
            gamma: cat(|b| &b.gamma)?,
            beta: cat(|b| &b.beta)?,
            mean: cat(|b| &b.mean)?,
            var: cat(|b| &b.var)?,
        })
    }

    fn write(self, store: &mut ParamStore<T>, bn: &BatchNorm2d) -> Result<()> {
        set(store, bn.gamma, self.gamma)?;
        set(store, bn.beta, self.beta)?;
        set(store, bn.running_mean, self.mean)?;
        set(store, bn.running_var, self.var)
    }
}

fn set<T: Element>(store: &mut ParamStore<T>, id: ParamId, value: Tensor<T>) -> Result<()> {
    let slot = store.get_mut(id);
    if slot.value.shape() != value.shape() {
        return Err(invalid(format!(
            "width inconsistency for `{}`: expected {}, got {}",
            slot.name,
            slot.value.shape(),
            value.shape()
        )));
    }
    slot.value = value;
    Ok(())
}

/// Form-independent view of a block's parameters.
struct PerPath<T> {
    reduce: Vec<Tensor<T>>,
    bn_reduce: Vec<BnState<T>>,
    transform: Vec<Tensor<T>>,
    bn_transform: Vec<BnState<T>>,
    expand: Vec<Tensor<T>>,
    bn_out: BnState<T>,
    shortcut: Option<(Tensor<T>, BnState<T>)>,
}

fn read_block<T: Element>(block: &Block, store: &ParamStore<T>) -> Result<PerPath<T>> {
    let c = block.spec.cardinality;
    let w = block.spec.path_width();
    let shortcut = block
        .shortcut
        .as_ref()
        .map(|p| (store.value(p.conv.weight).clone(), BnState::read(store, &p.bn)));
    let heads = |paths: &mut dyn Iterator<Item = &PathHead>| {
        let mut out = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for h in paths {
            out.0.push(store.value(h.reduce.weight).clone());
            out.1.push(BnState::read(store, &h.bn_reduce));
            out.2.push(store.value(h.transform.weight).clone());
            out.3.push(BnState::read(store, &h.bn_transform));
        }
        out
    };
    let split_expand =
        |expand: &Tensor<T>| -> Vec<Tensor<T>> { (0..c).map(|i| expand.slice_channels(i * w, w)).collect() };
    Ok(match &block.body {
        BlockBody::Split { paths, bn_out } => {
            let (reduce, bn_reduce, transform, bn_transform) = heads(&mut paths.iter().map(|p| &p.head));
            PerPath {
                reduce,
                bn_reduce,
                transform,
                bn_transform,
                expand: paths.iter().map(|p| store.value(p.expand.weight).clone()).collect(),
                bn_out: BnState::read(store, bn_out),
                shortcut,
            }
        }
        BlockBody::Concat { paths, expand, bn_out } => {
            let (reduce, bn_reduce, transform, bn_transform) = heads(&mut paths.iter());
            PerPath {
                reduce,
                bn_reduce,
                transform,
                bn_transform,
                expand: split_expand(store.value(expand.weight)),
                bn_out: BnState::read(store, bn_out),
                shortcut,
            }
        }
        BlockBody::Grouped {
            reduce,
            bn_reduce,
            transform,
            bn_transform,
            expand,
            bn_out,
        } => {
            let r = store.value(reduce.weight);
            let t = store.value(transform.weight);
            let bnr = BnState::read(store, bn_reduce);
            let bnt = BnState::read(store, bn_transform);
            PerPath {
                reduce: (0..c).map(|i| r.slice_batch(i * w, w)).collect::<Result<_>>()?,
                bn_reduce: (0..c).map(|i| bnr.slice(i * w, w)).collect(),
                transform: (0..c).map(|i| t.slice_batch(i * w, w)).collect::<Result<_>>()?,
                bn_transform: (0..c).map(|i| bnt.slice(i * w, w)).collect(),
                expand: split_expand(store.value(expand.weight)),
                bn_out: BnState::read(store, bn_out),
                shortcut,
            }
        }
    })
}

fn write_heads<T: Element>(store: &mut ParamStore<T>, heads: &[&PathHead], pieces: &PerPath<T>) -> Result<()> {
    for (i, h) in heads.iter().enumerate() {
        set(store, h.reduce.weight, pieces.reduce[i].clone())?;
        pieces.bn_reduce[i].clone().write(store, &h.bn_reduce)?;
        set(store, h.transform.weight, pieces.transform[i].clone())?;
        pieces.bn_transform[i].clone().write(store, &h.bn_transform)?;
    }
    Ok(())
}

/// Re-expresses `block` (with parameters in `src`) in `to` form. The new
/// block's parameters are appended to `dst` under the same block name.
pub fn translate_weights<T: Element>(
    block: &Block,
    src: &ParamStore<T>,
    to: BlockForm,
    dst: &mut ParamStore<T>,
) -> Result<Block> {
    let pieces = read_block(block, src)?;
    // initial values are overwritten below; the generator only fills shapes
    let mut scratch = rng::seeded(0);
    let out = Block::new(dst, &block.name, block.spec, to, &mut scratch)?;
    let cat_expand = |pieces: &PerPath<T>| {
        let refs: Vec<&Tensor<T>> = pieces.expand.iter().collect();
        Tensor::concat_channels(&refs)
    };
    match &out.body {
        BlockBody::Split { paths, bn_out } => {
            let heads: Vec<&PathHead> = paths.iter().map(|p: &SplitPath| &p.head).collect();
            write_heads(dst, &heads, &pieces)?;
            for (p, e) in paths.iter().zip(&pieces.expand) {
                set(dst, p.expand.weight, e.clone())?;
            }
            pieces.bn_out.clone().write(dst, bn_out)?;
        }
        BlockBody::Concat { paths, expand, bn_out } => {
            let heads: Vec<&PathHead> = paths.iter().collect();
            write_heads(dst, &heads, &pieces)?;
            set(dst, expand.weight, cat_expand(&pieces)?)?;
            pieces.bn_out.clone().write(dst, bn_out)?;
        }
        BlockBody::Grouped {
            reduce,
            bn_reduce,
            transform,
            bn_transform,
            expand,
            bn_out,
        } => {
            let r: Vec<&Tensor<T>> = pieces.reduce.iter().collect();
            set(dst, reduce.weight, Tensor::concat_batch(&r)?)?;
            BnState::concat(&pieces.bn_reduce)?.write(dst, bn_reduce)?;
            let t: Vec<&Tensor<T>> = pieces.transform.iter().collect();
            set(dst, transform.weight, Tensor::concat_batch(&t)?)?;
            BnState::concat(&pieces.bn_transform)?.write(dst, bn_transform)?;
            set(dst, expand.weight, cat_expand(&pieces)?)?;
            pieces.bn_out.clone().write(dst, bn_out)?;
        }
    }
    if let (Some(Projection { conv, bn }), Some((w, state))) = (&out.shortcut, pieces.shortcut) {
        set(dst, conv.weight, w)?;
        state.write(dst, bn)?;
    }
    Ok(out)
}
