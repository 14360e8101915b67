use rand::Rng;
use rand_distr::StandardNormal;

use resnext::autograd::{ParamStore, Tape};
use resnext::model::equivalence::{block_output_and_grad, randomize_batch_norm};
use resnext::model::{
    aggregate_transform, block_forward_concat, block_forward_grouped, block_forward_split, count_parameters_for,
    translate_weights, Block, BlockBody, BlockForm, BlockSpec, Model, ModelConfig, Transform,
};
use resnext::nn::{Mode, BN_EPSILON};
use resnext::rng::seeded;
use resnext::{Shape, Tensor};

fn normal(shape: impl Into<Shape>, rng: &mut impl Rng) -> Tensor<f64> {
    let shape = shape.into();
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn spec(in_width: usize, inner: usize, out: usize, stride: usize, c: usize) -> BlockSpec {
    BlockSpec {
        in_width,
        inner_width: inner,
        out_width: out,
        stride,
        cardinality: c,
    }
}

fn forward(block: &Block, store: &mut ParamStore<f64>, x: &Tensor<f64>, mode: Mode) -> Tensor<f64> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone(), false);
    let y = block.forward(&mut tape, store, xv, mode).unwrap();
    tape.value(y).clone()
}

/// Sets every batch norm in `store` to an exact identity in eval mode.
fn identity_batch_norms(store: &mut ParamStore<f64>) {
    for v in store.iter_mut() {
        let fill = if v.name.ends_with(".gamma") {
            1.0
        } else if v.name.ends_with(".running_var") {
            1.0 - BN_EPSILON
        } else if v.name.ends_with(".beta") || v.name.ends_with(".running_mean") {
            0.0
        } else {
            continue;
        };
        v.value = Tensor::full(v.value.shape(), fill);
    }
}

#[test]
fn zero_residual_weights_leave_relu_of_input() {
    let mut rng = seeded(1);
    for form in BlockForm::ALL {
        let mut store = ParamStore::<f64>::new();
        let block = Block::new(&mut store, "b", spec(16, 8, 16, 1, 2), form, &mut rng).unwrap();
        assert!(block.shortcut.is_none());
        for v in store.iter_mut() {
            if v.name.ends_with(".weight") {
                v.value = Tensor::zeros(v.value.shape());
            }
        }
        let x = normal([2, 16, 5, 5], &mut rng);
        for mode in [Mode::Train, Mode::Eval] {
            let y = forward(&block, &mut store, &x, mode);
            assert_eq!(y, x.map(|v| v.max(0.0)), "{form} {mode:?}");
        }
    }
}

#[test]
fn single_path_forms_coincide() {
    let mut rng = seeded(2);
    let mut store = ParamStore::<f64>::new();
    let split = Block::new(&mut store, "b", spec(8, 4, 16, 2, 1), BlockForm::Split, &mut rng).unwrap();
    randomize_batch_norm(&mut store, &mut rng);
    let x = normal([2, 8, 6, 6], &mut rng);
    let y_split = forward(&split, &mut store, &x, Mode::Eval);
    for to in [BlockForm::Concat, BlockForm::Grouped] {
        let mut dst = ParamStore::new();
        let other = translate_weights(&split, &store, to, &mut dst).unwrap();
        // with one path every form stores the same tensors in the same order
        let a: Vec<_> = store.iter().map(|(_, v)| v.value.clone()).collect();
        let b: Vec<_> = dst.iter().map(|(_, v)| v.value.clone()).collect();
        assert_eq!(a, b);
        let y = forward(&other, &mut dst, &x, Mode::Eval);
        assert!(y.max_abs_diff(&y_split).unwrap() <= 1e-6);
    }
}

#[test]
fn translation_round_trips_bitwise() {
    let mut rng = seeded(3);
    for c in [2, 4, 8] {
        let mut store = ParamStore::<f32>::new();
        let grouped = Block::new(&mut store, "b", spec(16, 32, 64, 2, c), BlockForm::Grouped, &mut rng).unwrap();
        for (from, to) in [
            (BlockForm::Split, BlockForm::Concat),
            (BlockForm::Concat, BlockForm::Split),
        ] {
            let mut s1 = ParamStore::new();
            let a = translate_weights(&grouped, &store, from, &mut s1).unwrap();
            let mut s2 = ParamStore::new();
            let b = translate_weights(&a, &s1, to, &mut s2).unwrap();
            let mut s3 = ParamStore::new();
            translate_weights(&b, &s2, BlockForm::Grouped, &mut s3).unwrap();
            let bits = |s: &ParamStore<f32>| -> Vec<u32> {
                s.iter()
                    .flat_map(|(_, v)| v.value.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
                    .collect()
            };
            assert_eq!(bits(&store), bits(&s3), "C={c}");
        }
    }
}

#[test]
fn translated_forms_agree_for_several_cardinalities() {
    let mut rng = seeded(4);
    for c in [2, 4, 8] {
        let mut store = ParamStore::<f64>::new();
        let split = Block::new(&mut store, "b", spec(16, 2 * c, 32, 1, c), BlockForm::Split, &mut rng).unwrap();
        randomize_batch_norm(&mut store, &mut rng);
        let x = normal([2, 16, 4, 4], &mut rng);
        let up = normal([2, 32, 4, 4], &mut rng);
        for mode in [Mode::Train, Mode::Eval] {
            let (y0, g0) = block_output_and_grad(&split, &mut store, &x, &up, mode).unwrap();
            for to in [BlockForm::Concat, BlockForm::Grouped] {
                let mut dst = ParamStore::new();
                let other = translate_weights(&split, &store, to, &mut dst).unwrap();
                let (y, g) = block_output_and_grad(&other, &mut dst, &x, &up, mode).unwrap();
                assert!(y.max_abs_diff(&y0).unwrap() <= 1e-10, "C={c} {to}");
                assert!(g.max_abs_diff(&g0).unwrap() <= 1e-10, "C={c} {to}");
            }
        }
    }
}

#[test]
fn form_specific_entry_points() {
    let mut rng = seeded(5);
    let mut store = ParamStore::<f64>::new();
    let split = Block::new(&mut store, "b", spec(8, 8, 8, 1, 2), BlockForm::Split, &mut rng).unwrap();
    let mut dst = ParamStore::new();
    let concat = translate_weights(&split, &store, BlockForm::Concat, &mut dst).unwrap();
    let mut tape = Tape::new();
    let x = tape.input(normal([1, 8, 3, 3], &mut rng), false);
    let a = block_forward_split(&mut tape, &mut store, &split, x, Mode::Eval).unwrap();
    assert!(block_forward_grouped(&mut tape, &mut store, &split, x, Mode::Eval).is_err());
    assert!(block_forward_split(&mut tape, &mut dst, &concat, x, Mode::Eval).is_err());
    let b = block_forward_concat(&mut tape, &mut dst, &concat, x, Mode::Eval).unwrap();
    assert!(tape.value(a).max_abs_diff(tape.value(b)).unwrap() <= 1e-12);

    let mut tape = Tape::new();
    let x = tape.input(normal([1, 6, 3, 3], &mut rng), false);
    assert!(split.forward(&mut tape, &mut store, x, Mode::Eval).is_err());
}

#[test]
fn concatenated_path_outputs_span_the_inner_width() {
    let mut rng = seeded(6);
    let mut store = ParamStore::<f64>::new();
    let block = Block::new(&mut store, "b", spec(8, 12, 16, 1, 3), BlockForm::Concat, &mut rng).unwrap();
    let BlockBody::Concat { paths, expand, .. } = &block.body else {
        panic!("concat body");
    };
    assert_eq!(paths.len(), 3);
    assert_eq!(expand.geom.in_channels, 12);
    assert_eq!(expand.geom.out_channels, 16);
}

struct Scale(f64);

impl Transform<f64> for Scale {
    fn apply(
        &self,
        tape: &mut Tape<f64>,
        _: &mut ParamStore<f64>,
        x: resnext::autograd::Var,
        _: Mode,
    ) -> resnext::Result<resnext::autograd::Var> {
        let k = tape.input(Tensor::full(tape.shape(x), self.0), false);
        tape.mul(x, k)
    }
}

#[test]
fn aggregation_sums_paths() {
    let mut rng = seeded(7);
    let mut store = ParamStore::<f64>::new();
    let x = normal([2, 3, 4, 4], &mut rng);
    let run = |paths: &[Scale], store: &mut ParamStore<f64>| {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone(), false);
        aggregate_transform(&mut tape, store, xv, paths, Mode::Eval).map(|v| tape.value(v).clone())
    };
    let one = run(&[Scale(1.5)], &mut store).unwrap();
    assert!(one.max_abs_diff(&x.map(|v| 1.5 * v)).unwrap() < 1e-15);
    let four = run(&[Scale(1.5), Scale(1.5), Scale(1.5), Scale(1.5)], &mut store).unwrap();
    assert!(four.max_abs_diff(&one.map(|v| 4.0 * v)).unwrap() < 1e-12);
    assert!(run(&[], &mut store).is_err());
}

#[test]
fn aggregation_plus_input_matches_split_block() {
    let mut rng = seeded(8);
    let mut store = ParamStore::<f64>::new();
    let block = Block::new(&mut store, "b", spec(16, 8, 16, 1, 4), BlockForm::Split, &mut rng).unwrap();
    identity_batch_norms(&mut store);
    let BlockBody::Split { paths, .. } = &block.body else {
        panic!("split body");
    };
    let x = normal([2, 16, 4, 4], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.input(x.clone(), false);
    let agg = aggregate_transform(&mut tape, &mut store, xv, paths, Mode::Eval).unwrap();
    let expected = tape.value(agg).add(&x).unwrap().map(|v| v.max(0.0));
    let y = forward(&block, &mut store, &x, Mode::Eval);
    assert!(y.max_abs_diff(&expected).unwrap() <= 1e-6);
    assert!(y.data().iter().any(|&v| v > 0.1));
}

#[test]
fn converted_model_predicts_the_same() {
    let cfg = ModelConfig::new(20, 4, 2, 3).with_form(BlockForm::Grouped);
    let model = Model::<f64>::build(cfg, &mut seeded(9)).unwrap();
    let x = normal([2, 3, 8, 8], &mut seeded(10));
    let y0 = model.clone().predict(&x, Mode::Train).unwrap();
    for form in [BlockForm::Split, BlockForm::Concat] {
        let y = model.with_block_form(form).unwrap().predict(&x, Mode::Train).unwrap();
        assert!(y.max_abs_diff(&y0).unwrap() <= 1e-10, "{form}");
    }
}

#[test]
fn capacity_grows_with_cardinality_and_width() {
    for depth in [20, 29] {
        let by_c: Vec<usize> = [1, 2, 4, 8, 16]
            .iter()
            .map(|&c| count_parameters_for(&ModelConfig::new(depth, c, 64, 10)).unwrap())
            .collect();
        assert!(by_c.windows(2).all(|w| w[0] < w[1]), "{by_c:?}");
        let by_d: Vec<usize> = [4, 8, 16, 32, 64]
            .iter()
            .map(|&d| count_parameters_for(&ModelConfig::new(depth, 8, d, 10)).unwrap())
            .collect();
        assert!(by_d.windows(2).all(|w| w[0] < w[1]), "{by_d:?}");
    }
}

#[test]
fn stage_widths_follow_the_template() {
    let m = Model::<f32>::build(ModelConfig::new(29, 8, 64, 10), &mut seeded(0)).unwrap();
    let first = &m.blocks()[0].spec;
    assert_eq!((first.inner_width, first.out_width, first.stride), (512, 256, 1));
    let widths: Vec<(usize, usize, usize)> = m
        .blocks()
        .iter()
        .map(|b| (b.spec.inner_width, b.spec.out_width, b.spec.stride))
        .collect();
    assert_eq!(widths[3], (1024, 512, 2));
    assert_eq!(widths[6], (2048, 1024, 2));
    let projections: Vec<bool> = m.blocks().iter().map(|b| b.shortcut.is_some()).collect();
    assert_eq!(
        projections,
        [true, false, false, true, false, false, true, false, false]
    );
}
