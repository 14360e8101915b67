//! Numerical cross-check of the split, concat and grouped block forms.
//!
//! For every stage of a config, the first (projecting) block and a
//! following identity block are built in split form with random weights and
//! random batch-norm state, translated into the other two forms, and run on
//! the same random input in both precisions and both modes. Outputs and
//! input gradients are compared pairwise.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{ParamStore, Tape};
use crate::error::Result;
use crate::model::block::{Block, BlockSpec};
use crate::model::config::{validate_config, BlockForm, ModelConfig, STEM_WIDTH};
use crate::model::translate::translate_weights;
use crate::nn::Mode;
use crate::rng::{self, Purpose};
use crate::tensor::{Element, Shape, Tensor};

pub const TOLERANCE_F32: f64 = 1e-4;
pub const TOLERANCE_F64: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug)]
pub struct Deviation {
    pub block: String,
    pub precision: Precision,
    pub mode: Mode,
    pub pair: (BlockForm, BlockForm),
    pub output: f64,
    pub input_grad: f64,
}

#[derive(Clone, Debug)]
pub struct EquivalenceReport {
    pub config: ModelConfig,
    pub rows: Vec<Deviation>,
}

impl EquivalenceReport {
    pub fn max_deviation(&self, precision: Precision) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.precision == precision)
            .map(|r| r.output.max(r.input_grad))
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol_f32: f64, tol_f64: f64) -> bool {
        self.max_deviation(Precision::F32) <= tol_f32 && self.max_deviation(Precision::F64) <= tol_f64
    }

    /// Largest deviation per form pair and precision.
    pub fn pair_maxima(&self) -> Vec<((BlockForm, BlockForm), Precision, f64, f64)> {
        let mut out = Vec::new();
        for precision in [Precision::F32, Precision::F64] {
            for pair in PAIRS {
                let rows = self.rows.iter().filter(|r| r.precision == precision && r.pair == pair);
                let (o, g) = rows.fold((0.0f64, 0.0f64), |(o, g), r| (o.max(r.output), g.max(r.input_grad)));
                out.push((pair, precision, o, g));
            }
        }
        out
    }
}

const PAIRS: [(BlockForm, BlockForm); 3] = [
    (BlockForm::Split, BlockForm::Concat),
    (BlockForm::Split, BlockForm::Grouped),
    (BlockForm::Concat, BlockForm::Grouped),
];

fn normal_tensor<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Tensor<f64> {
    let data = (0..shape.numel()).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec(shape, data).expect("sized buffer")
}

/// Replaces batch-norm identities with random affine terms and running
/// statistics so the comparison exercises every parameter.
pub fn randomize_batch_norm<R: Rng + ?Sized>(store: &mut ParamStore<f64>, rng: &mut R) {
    for v in store.iter_mut() {
        let (lo, hi) = if v.name.ends_with(".gamma") {
            (0.5, 1.5)
        } else if v.name.ends_with(".beta") {
            (-0.5, 0.5)
        } else if v.name.ends_with(".running_mean") {
            (-0.2, 0.2)
        } else if v.name.ends_with(".running_var") {
            (0.5, 1.5)
        } else {
            continue;
        };
        for x in v.value.data_mut() {
            *x = rng.random_range(lo..hi);
        }
    }
}

/// Output and input gradient of `sum(block(x) * upstream)`.
pub fn block_output_and_grad<T: Element>(
    block: &Block,
    store: &mut ParamStore<T>,
    x: &Tensor<T>,
    upstream: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone(), true);
    let y = block.forward(&mut tape, store, xv, mode)?;
    let r = tape.input(upstream.clone(), false);
    let prod = tape.mul(y, r)?;
    let loss = tape.sum_all(prod);
    let grads = tape.backward(loss)?;
    let dx = grads.wrt(xv).expect("input gradient").clone();
    Ok((tape.value(y).clone(), dx))
}

struct Case {
    block: String,
    forms: Vec<(Block, ParamStore<f64>)>,
    x: Tensor<f64>,
    upstream: Tensor<f64>,
}

fn compare<T: Element>(case: &Case, precision: Precision, rows: &mut Vec<Deviation>) -> Result<()> {
    let x: Tensor<T> = case.x.cast();
    let up: Tensor<T> = case.upstream.cast();
    let mut stores: Vec<ParamStore<T>> = case.forms.iter().map(|(_, s)| s.cast()).collect();
    for mode in [Mode::Train, Mode::Eval] {
        let mut results = Vec::new();
        for ((block, _), store) in case.forms.iter().zip(stores.iter_mut()) {
            results.push((block.form(), block_output_and_grad(block, store, &x, &up, mode)?));
        }
        for pair in PAIRS {
            let a = results.iter().find(|r| r.0 == pair.0).expect("form present");
            let b = results.iter().find(|r| r.0 == pair.1).expect("form present");
            rows.push(Deviation {
                block: case.block.clone(),
                precision,
                mode,
                pair,
                output: (a.1).0.max_abs_diff(&(b.1).0)?.as_f64(),
                input_grad: (a.1).1.max_abs_diff(&(b.1).1)?.as_f64(),
            });
        }
    }
    Ok(())
}

/// Runs the three-form comparison for every stage of `config` on
/// `[2, in_width, spatial, spatial]` inputs.
pub fn verify_blocks(config: &ModelConfig, seed: u64, spatial: usize) -> Result<EquivalenceReport> {
    let plan = validate_config(config)?;
    let mut rng = rng::derive(seed, Purpose::Oracle, 0, 0);
    let mut rows = Vec::new();
    let mut width = STEM_WIDTH;
    for stage in &plan.stages {
        for b in 0..2 {
            let spec = BlockSpec {
                in_width: width,
                inner_width: stage.inner_width,
                out_width: stage.out_width,
                stride: if b == 0 { stage.stride } else { 1 },
                cardinality: config.cardinality,
            };
            let name = format!("stage{}.block{}", stage.index, b);
            let mut split_store = ParamStore::<f64>::new();
            let split = Block::new(&mut split_store, &name, spec, BlockForm::Split, &mut rng)?;
            randomize_batch_norm(&mut split_store, &mut rng);
            let mut forms = Vec::new();
            for to in [BlockForm::Concat, BlockForm::Grouped] {
                let mut store = ParamStore::new();
                let block = translate_weights(&split, &split_store, to, &mut store)?;
                forms.push((block, store));
            }
            forms.insert(0, (split, split_store));

            let x = normal_tensor(Shape::new(2, width, spatial, spatial), &mut rng);
            let out_hw = (spatial + 2 - 3) / spec.stride + 1;
            let upstream = normal_tensor(Shape::new(2, stage.out_width, out_hw, out_hw), &mut rng);
            let case = Case {
                block: name,
                forms,
                x,
                upstream,
            };
            compare::<f32>(&case, Precision::F32, &mut rows)?;
            compare::<f64>(&case, Precision::F64, &mut rows)?;
            width = stage.out_width;
        }
    }
    Ok(EquivalenceReport { config: *config, rows })
}
