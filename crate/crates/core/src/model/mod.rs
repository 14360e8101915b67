//! ResNeXt for 32x32 inputs: a 3x3 stem with 64 filters, stages of three
//! bottleneck blocks, global average pooling and a linear classifier.

pub mod block;
pub mod config;
pub mod equivalence;
pub mod translate;

use std::fmt::Write as _;

use rand::Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{invalid, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvGeometry, Linear, Mode};
use crate::tensor::{Element, Tensor};

pub use block::{
    aggregate_transform, block_forward_concat, block_forward_grouped, block_forward_split, Block, BlockBody, BlockSpec,
    Transform,
};
pub use config::{
    validate_config, BlockForm, ModelConfig, StagePlan, StageSpec, BASE_OUT_WIDTH, BLOCKS_PER_STAGE, STEM_WIDTH,
};
pub use translate::translate_weights;

#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub plan: StagePlan,
    pub params: ParamStore<T>,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<Block>,
    head: Linear,
}

impl<T: Element> Model<T> {
    /// Builds and initializes a model. Parameters are registered in a fixed
    /// order (stem, blocks stage by stage, classifier), which is also the
    /// checkpoint order.
    pub fn build<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let plan = validate_config(&config)?;
        let mut params = ParamStore::new();
        let stem = Conv2d::new(&mut params, "stem", ConvGeometry::new(3, STEM_WIDTH, 3, 1, 1, 1)?, rng)?;
        let stem_bn = BatchNorm2d::new(&mut params, "stem_bn", STEM_WIDTH);
        let mut blocks = Vec::new();
        let mut width = STEM_WIDTH;
        for stage in &plan.stages {
            for b in 0..stage.blocks {
                let spec = BlockSpec {
                    in_width: width,
                    inner_width: stage.inner_width,
                    out_width: stage.out_width,
                    stride: if b == 0 { stage.stride } else { 1 },
                    cardinality: config.cardinality,
                };
                let name = format!("stage{}.block{}", stage.index, b);
                blocks.push(Block::new(&mut params, &name, spec, config.block_form, rng)?);
                width = stage.out_width;
            }
        }
        let head = Linear::new(&mut params, "fc", width, config.num_classes, rng)?;
        Ok(Model {
            config,
            plan,
            params,
            stem,
            stem_bn,
            blocks,
            head,
        })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Records the forward pass and returns `[n, num_classes]` logits.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let s = tape.shape(x);
        if s.c != 3 {
            return Err(invalid(format!("expected RGB input, got {s}")));
        }
        let params = &mut self.params;
        let h = self.stem.forward(tape, params, x)?;
        let h = self.stem_bn.forward(tape, params, h, mode)?;
        let mut h = tape.relu(h);
        for block in &self.blocks {
            h = block.forward(tape, params, h, mode)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        self.head.forward(tape, params, pooled)
    }

    /// Logits without keeping the tape around.
    pub fn predict(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone(), false);
        let y = self.forward(&mut tape, xv, mode)?;
        Ok(tape.value(y).clone())
    }

    /// Learnable scalars: convolution weights, batch-norm affine terms and
    /// the classifier weight and bias. Running statistics are excluded.
    pub fn count_parameters(&self) -> usize {
        self.params.count_learnable()
    }

    /// Convolution and linear layers along the main path; projection
    /// shortcuts are not counted.
    pub fn layer_count(&self) -> usize {
        1 + self.blocks.iter().map(Block::residual_depth).sum::<usize>() + 1
    }

    /// Same network in another block form, with parameters translated so
    /// that outputs agree.
    pub fn with_block_form(&self, form: BlockForm) -> Result<Model<T>> {
        let mut params = ParamStore::new();
        let mut rng = crate::rng::seeded(0);
        let mut stem_store = ParamStore::<T>::new();
        // stem first so the declaration order matches a freshly built model
        let stem = Conv2d::new(&mut stem_store, "stem", self.stem.geom, &mut rng)?;
        let stem_bn = BatchNorm2d::new(&mut stem_store, "stem_bn", STEM_WIDTH);
        for (_, v) in stem_store.iter() {
            let src = self.params.find(&v.name).expect("stem parameter");
            params.add(v.name.clone(), self.params.value(src).clone(), v.requires_grad);
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            blocks.push(translate_weights(b, &self.params, form, &mut params)?);
        }
        let head = Linear::new(
            &mut params,
            "fc",
            self.head.in_features,
            self.head.out_features,
            &mut rng,
        )?;
        for id in [head.weight, head.bias] {
            let name = params.get(id).name.clone();
            let src = self.params.find(&name).expect("head parameter");
            *params.value_mut(id) = self.params.value(src).clone();
        }
        Ok(Model {
            config: self.config.with_form(form),
            plan: self.plan.clone(),
            params,
            stem,
            stem_bn,
            blocks,
            head,
        })
    }

    /// The same model in another precision.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config,
            plan: self.plan.clone(),
            params: self.params.cast(),
            stem: self.stem.clone(),
            stem_bn: self.stem_bn.clone(),
            blocks: self.blocks.clone(),
            head: self.head.clone(),
        }
    }

    /// One line per parameter tensor: name, shape, learnable scalar count.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<40} {:<22} {:>12}", "layer", "shape", "params");
        for (_, v) in self.params.learnable() {
            let _ = writeln!(
                out,
                "{:<40} {:<22} {:>12}",
                v.name,
                v.value.shape().to_string(),
                v.value.numel()
            );
        }
        let _ = writeln!(out, "{:<40} {:<22} {:>12}", "total", "", self.count_parameters());
        out
    }
}

/// Free-function form of [`Model::count_parameters`].
pub fn count_parameters<T: Element>(model: &Model<T>) -> usize {
    model.count_parameters()
}

/// Learnable-scalar count derived from the stage template alone, without
/// allocating any tensors.
pub fn count_parameters_for(config: &ModelConfig) -> Result<usize> {
    let plan = validate_config(config)?;
    let conv = |cin: usize, cout: usize, k: usize, groups: usize| cout * (cin / groups) * k * k;
    let bn = |c: usize| 2 * c;
    let mut total = conv(3, STEM_WIDTH, 3, 1) + bn(STEM_WIDTH);
    let mut width = STEM_WIDTH;
    for stage in &plan.stages {
        for b in 0..stage.blocks {
            let stride = if b == 0 { stage.stride } else { 1 };
            let (inner, out) = (stage.inner_width, stage.out_width);
            total += conv(width, inner, 1, 1) + bn(inner);
            total += conv(inner, inner, 3, config.cardinality) + bn(inner);
            total += conv(inner, out, 1, 1) + bn(out);
            if stride != 1 || width != out {
                total += conv(width, out, 1, 1) + bn(out);
            }
            width = out;
        }
    }
    Ok(total + width * config.num_classes + config.num_classes)
}
