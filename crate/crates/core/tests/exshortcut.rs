use exmvit::backbone::BlockOutputs;
use exmvit::config::{self, expand_width, Overrides, Rho};
use exmvit::exshortcut::{
    assemble_classifier_input, classify, make_shortcut, Classifier, ClassifierSpec, Shortcut, ShortcutSpec,
};
use exmvit::layers::{Forward, Mode};
use exmvit::model::Head;
use exmvit::params::{Initializer, ParamStore};
use exmvit::{ModelGraph, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rho(s: &str) -> Rho {
    s.parse().unwrap()
}

fn random(seed: u64, shape: &[usize]) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0f32..1.0))
}

#[test]
fn shortcut_widths_from_ratios() {
    let w = |k, r: &str, c| ShortcutSpec::new(k, rho(r), c).unwrap().unwrap().out_channels;
    assert_eq!(w(3, "1/3", 96), 32);
    assert_eq!(w(4, "5/4", 128), 160);
    assert!(ShortcutSpec::new(3, Rho::ZERO, 96).unwrap().is_none());
    assert!(ShortcutSpec::new(3, rho("1/7"), 96).is_err());
}

#[test]
fn classifier_width_equals_expand_width_for_every_variant() {
    for name in config::registered_names() {
        let cfg = config::resolve_variant(&name, &Overrides::default()).unwrap();
        let model = ModelGraph::structure(&cfg).unwrap();
        assert_eq!(model.classifier_width(), expand_width(&cfg.rho, &cfg.block_channels).unwrap(), "{name}");
    }
}

#[test]
fn identity_pointwise_conv_without_activation_passes_a_constant_through() {
    let mut store = ParamStore::new();
    let spec = ShortcutSpec::new(3, Rho::integer(1), 6).unwrap().unwrap();
    let mut sc = Shortcut::new(&mut store, &mut Initializer::seeded(0), "s", spec);
    sc.act = None;
    let w = store.tensor_mut(sc.conv.weight).data_mut();
    w.fill(0.0);
    for c in 0..6 {
        w[c * 6 + c] = 1.0;
    }
    let mut tape = Tape::inference();
    let mut f = Forward::new(&mut tape, &store, Mode::Eval);
    let x = f.tape.constant(Tensor::full(vec![2, 6, 3, 5], 0.75));
    let y = make_shortcut(&mut f, x, &sc).unwrap();
    assert_eq!(tape.value(y), &Tensor::full(vec![2, 6], 0.75));
}

fn head_640() -> (ParamStore, Vec<Shortcut>, Classifier) {
    let mut store = ParamStore::new();
    let mut init = Initializer::seeded(3);
    let cfg = config::resolve_variant("exmvit-640", &Overrides::default()).unwrap();
    let shortcuts: Vec<Shortcut> = ShortcutSpec::for_config(&cfg)
        .unwrap()
        .into_iter()
        .map(|s| Shortcut::new(&mut store, &mut init, &format!("s{}", s.block_index), s))
        .collect();
    let classifier = Classifier::new(&mut store, &mut init, "fc", ClassifierSpec { input_width: 640, class_count: 10 });
    (store, shortcuts, classifier)
}

fn features(f: &mut Forward<'_, f32>) -> BlockOutputs<exmvit::Var> {
    let shapes = [[2, 32, 8, 8], [2, 64, 4, 4], [2, 96, 4, 4], [2, 128, 2, 2], [2, 160, 1, 1]];
    let mut k = 0;
    BlockOutputs {
        features: shapes.map(|s| {
            k += 1;
            f.tape.constant(random(k, &s))
        }),
    }
}

#[test]
fn segments_are_concatenated_in_block_order() {
    let (store, shortcuts, _) = head_640();
    let mut tape = Tape::inference();
    let mut f = Forward::new(&mut tape, &store, Mode::Eval);
    let blocks = features(&mut f);
    let full = assemble_classifier_input(&mut f, &blocks, &shortcuts).unwrap();
    let parts: Vec<_> = shortcuts
        .iter()
        .map(|s| make_shortcut(&mut f, blocks.features[s.spec.block_index - 1], s).unwrap())
        .collect();
    let widths: Vec<usize> = parts.iter().map(|&p| tape.value(p).shape()[1]).collect();
    assert_eq!(widths, [32, 128, 480]);
    let full = tape.value(full);
    assert_eq!(full.shape(), &[2, 640]);
    for b in 0..2 {
        let mut row = Vec::new();
        for &p in &parts {
            let t = tape.value(p);
            let w = t.shape()[1];
            row.extend_from_slice(&t.data()[b * w..(b + 1) * w]);
        }
        assert_eq!(&full.data()[b * 640..(b + 1) * 640], &row[..]);
    }
}

#[test]
fn permuting_segments_changes_logits() {
    let (store, shortcuts, classifier) = head_640();
    let mut tape = Tape::inference();
    let mut f = Forward::new(&mut tape, &store, Mode::Eval);
    let blocks = features(&mut f);
    let x = assemble_classifier_input(&mut f, &blocks, &shortcuts).unwrap();
    let a = classify(&mut f, x, &classifier).unwrap();
    let reversed: Vec<_> = shortcuts
        .iter()
        .rev()
        .map(|s| make_shortcut(&mut f, blocks.features[s.spec.block_index - 1], s).unwrap())
        .collect();
    let x = f.tape.concat_channels(&reversed).unwrap();
    let b = classify(&mut f, x, &classifier).unwrap();
    assert_ne!(tape.value(a), tape.value(b));
}

#[test]
fn no_active_shortcut_is_an_error() {
    let (store, _, _) = head_640();
    let mut tape = Tape::inference();
    let mut f = Forward::new(&mut tape, &store, Mode::Eval);
    let blocks = features(&mut f);
    assert!(assemble_classifier_input(&mut f, &blocks, &[]).is_err());
}

#[test]
fn classifier_zero_weights_width_check_and_batch_independence() {
    let mut store = ParamStore::new();
    let spec = ClassifierSpec { input_width: 12, class_count: 5 };
    let c = Classifier::new(&mut store, &mut Initializer::seeded(1), "fc", spec);
    let mut tape = Tape::inference();
    let mut f = Forward::new(&mut tape, &store, Mode::Eval);
    let x = random(1, &[3, 12]);
    let xv = f.tape.constant(x.clone());
    let y = classify(&mut f, xv, &c).unwrap();
    let bad = f.tape.constant(random(1, &[3, 11]));
    assert!(classify(&mut f, bad, &c).is_err());
    // Changing row 0 leaves rows 1 and 2 untouched.
    let mut x2 = x.clone();
    x2.data_mut()[..12].fill(9.0);
    let xv2 = f.tape.constant(x2);
    let y2 = classify(&mut f, xv2, &c).unwrap();
    assert_eq!(&tape.value(y).data()[5..], &tape.value(y2).data()[5..]);

    let mut store = ParamStore::new();
    let c = Classifier::new(&mut store, &mut Initializer::structural(), "fc", spec);
    store.tensor_mut(c.linear.weight).data_mut().fill(0.0);
    let mut tape = Tape::inference();
    let mut f = Forward::new(&mut tape, &store, Mode::Eval);
    let xv = f.tape.constant(x);
    let y = classify(&mut f, xv, &c).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn classifier_parameter_count_for_928() {
    let cfg = config::resolve_variant("exmvit-928", &Overrides::default()).unwrap();
    let model = ModelGraph::structure(&cfg).unwrap();
    let Head::ExShortcut(head) = model.head() else { panic!("shortcut head expected") };
    let count: usize = [Some(head.classifier.linear.weight), head.classifier.linear.bias]
        .into_iter()
        .flatten()
        .map(|id| model.params().tensor(id).numel())
        .sum();
    assert_eq!(count, 928 * 1000 + 1000);
    assert_eq!((928 - 640) * 1000, 288_000);
}

#[test]
fn shortcut_parameter_counts_follow_the_formula() {
    let cfg = config::resolve_variant("exmvit-928", &Overrides::default()).unwrap();
    let model = ModelGraph::structure(&cfg).unwrap();
    let Head::ExShortcut(head) = model.head() else { panic!("shortcut head expected") };
    for s in &head.shortcuts {
        let (c, w) = (s.spec.in_channels, s.spec.out_channels);
        let stored: usize = [Some(s.conv.weight), s.conv.bias]
            .into_iter()
            .flatten()
            .map(|id| model.params().tensor(id).numel())
            .sum();
        assert_eq!(stored, c * w + w);
    }
}
