use exmvit::audit::{self, block_shapes, count_params, overhead_report, trace_shapes};
use exmvit::backbone::forward_collect;
use exmvit::config::{self, expand_width, Overrides, Profile};
use exmvit::layers::Tracer;
use exmvit::params::{Initializer, LayerKind, ParamStore};
use exmvit::{ModelGraph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Closed-form parameter enumeration, written independently of the model code.

fn conv_bn(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + 2 * cout
}

fn mv2(cin: usize, cout: usize) -> usize {
    let h = cin * 4;
    conv_bn(cin, h, 1) + h * 9 + 2 * h + conv_bn(h, cout, 1)
}

fn transformer(d: usize) -> usize {
    let norms = 2 * (2 * d);
    let attention = 4 * (d * d + d);
    let ffn = (d * 2 * d + 2 * d) + (2 * d * d + d);
    norms + attention + ffn
}

fn mobilevit(c: usize, d: usize, depth: usize) -> usize {
    conv_bn(c, c, 3) + c * d + depth * transformer(d) + 2 * d + conv_bn(d, c, 1) + conv_bn(2 * c, c, 3)
}

fn backbone(profile: Profile) -> usize {
    let (ch, dims, depths) = match profile {
        Profile::Imagenet => ([32, 64, 96, 128, 160], [144, 192, 240], [2, 4, 3]),
        Profile::Tiny => ([4, 8, 12, 16, 20], [16, 16, 16], [1, 1, 1]),
    };
    let stem = ch[0] / 2;
    let mut n = conv_bn(3, stem, 3) + mv2(stem, ch[0]);
    n += mv2(ch[0], ch[1]) + 2 * mv2(ch[1], ch[1]);
    for k in 2..5 {
        n += mv2(ch[k - 1], ch[k]) + mobilevit(ch[k], dims[k - 2], depths[k - 2]);
    }
    n
}

/// `(strict, paper-convention)` for ρ given as `(numer, denom)` pairs.
fn oracle(profile: Profile, rho: [(usize, usize); 5]) -> (usize, usize) {
    let ch = profile.block_channels();
    let classes = profile.default_class_count();
    let widths: Vec<usize> = rho.iter().zip(ch).map(|(&(n, d), c)| n * c / d).collect();
    let shortcuts: Vec<usize> = widths.iter().zip(ch).map(|(&w, c)| if w > 0 { c * w + w } else { 0 }).collect();
    let total_width: usize = widths.iter().sum();
    let strict = backbone(profile) + shortcuts.iter().sum::<usize>() + total_width * classes + classes;
    (strict, strict - shortcuts[..4].iter().sum::<usize>())
}

const TABLE: [(&str, [(usize, usize); 5]); 6] = [
    ("mobilevit-s", [(0, 1), (0, 1), (0, 1), (0, 1), (4, 1)]),
    ("exmvit-576", [(0, 1), (0, 1), (1, 3), (1, 2), (3, 1)]),
    ("exmvit-640", [(0, 1), (0, 1), (1, 3), (1, 1), (3, 1)]),
    ("exmvit-704", [(0, 1), (0, 1), (1, 3), (1, 4), (4, 1)]),
    ("exmvit-864", [(0, 1), (0, 1), (1, 1), (1, 1), (4, 1)]),
    ("exmvit-928", [(0, 1), (0, 1), (4, 3), (5, 4), (4, 1)]),
];

fn model(name: &str) -> ModelGraph {
    let cfg = config::resolve_variant(name, &Overrides::default()).unwrap();
    if name.starts_with("mobilevit-s") {
        ModelGraph::build_baseline(&cfg, None).unwrap()
    } else {
        ModelGraph::structure(&cfg).unwrap()
    }
}

#[test]
fn totals_match_the_enumeration_oracle() {
    for (base, rho) in TABLE {
        for (suffix, profile) in [("", Profile::Imagenet), ("-tiny", Profile::Tiny)] {
            let name = format!("{base}{suffix}");
            let r = count_params(&model(&name)).unwrap();
            assert_eq!((r.strict_total, r.paper_convention_total), oracle(profile, rho), "{name}");
            assert_eq!(r.baseline_total, oracle(profile, TABLE[0].1).0);
        }
    }
}

#[test]
fn reference_totals_within_tolerance() {
    let reference = [5.579, 5.489, 5.553, 5.643, 5.803, 5.867];
    for ((name, _), p) in TABLE.iter().zip(reference) {
        let r = count_params(&model(name)).unwrap();
        let dev = (r.paper_convention_total as f64 / 1e6 - p).abs() / p;
        assert!(dev <= 0.015, "{name}: {dev}");
    }
}

#[test]
fn report_invariants() {
    for (name, _) in TABLE {
        let r = count_params(&model(name)).unwrap();
        assert_eq!(r.rows.iter().map(|row| row.param_count).sum::<usize>(), r.strict_total);
        let want = (r.paper_convention_total as f64 - r.baseline_total as f64) / r.baseline_total as f64 * 100.0;
        assert_eq!(r.overhead_vs_baseline_percent, want);
    }
}

#[test]
fn baseline_built_both_ways_counts_the_same() {
    let cfg = config::resolve_variant("mobilevit-s", &Overrides::default()).unwrap();
    let a = count_params(&ModelGraph::structure(&cfg).unwrap()).unwrap();
    let b = count_params(&ModelGraph::build_baseline(&cfg, None).unwrap()).unwrap();
    assert_eq!(a.strict_total, b.strict_total);
}

#[test]
fn seed_does_not_change_structure() {
    let cfg = config::resolve_variant("exmvit-704-tiny", &Overrides::default()).unwrap();
    let a = count_params(&ModelGraph::build(&cfg, 1).unwrap()).unwrap();
    let b = count_params(&ModelGraph::build(&cfg, 2).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn overhead_report_widths_and_percentages() {
    let names: Vec<&str> = TABLE.iter().map(|(n, _)| *n).collect();
    let rows = overhead_report(&names).unwrap();
    let percents: Vec<f64> = rows.iter().map(|r| r.width_percent).collect();
    assert_eq!(percents, [100.0, 90.0, 100.0, 110.0, 135.0, 145.0]);
    for r in &rows {
        let cfg = config::resolve_variant(&r.variant, &Overrides::default()).unwrap();
        assert_eq!(r.classifier_width, expand_width(&cfg.rho, &cfg.block_channels).unwrap());
    }
    assert!(rows[2].paper_convention_total < rows[0].paper_convention_total);
    assert!(overhead_report(&["exmvit-999"]).is_err());
}

#[test]
fn millions_display() {
    assert_eq!(audit::millions(5_577_992), "5.578M");
    assert_eq!(audit::millions(5_865_992), "5.866M");
}

#[test]
fn json_is_byte_stable_and_carries_every_field() {
    let m = model("exmvit-640");
    let a = count_params(&m).unwrap().to_json();
    let b = count_params(&m).unwrap().to_json();
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    for key in [
        "variant",
        "rows",
        "strict_total",
        "paper_convention_total",
        "classifier_width",
        "overhead_vs_baseline_percent",
        "flops_estimate",
    ] {
        assert!(v.get(key).is_some(), "{key}");
    }
}

#[test]
fn trace_at_256_and_64() {
    let sides = |name: &str, size| -> Vec<usize> {
        block_shapes(&trace_shapes(&model(name), size).unwrap()).iter().map(|s| s[2]).collect()
    };
    assert_eq!(sides("exmvit-928", 256), [128, 64, 32, 16, 8]);
    assert_eq!(sides("exmvit-928-tiny", 64), [32, 16, 8, 4, 2]);
    assert!(trace_shapes(&model("exmvit-928"), 100).is_err());
}

#[test]
fn trace_agrees_with_runtime_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cfg = config::resolve_variant("exmvit-864-tiny", &Overrides::default()).unwrap();
    let m = ModelGraph::build(&cfg, 0).unwrap();
    for _ in 0..10 {
        let size = 32 * rng.random_range(1..=6);
        let x = Tensor::from_fn(vec![1, 3, size, size], |_| rng.random_range(0.0f32..1.0));
        let runtime = forward_collect(&m, &x);
        let trace = trace_shapes(&m, size);
        // Odd multiples of 32 leave block 5 indivisible by the patch; both paths must agree.
        assert_eq!(runtime.is_ok(), trace.is_ok(), "size {size}");
        let (Ok(runtime), Ok(trace)) = (runtime, trace) else { continue };
        let runtime: Vec<Vec<usize>> = runtime.features.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(block_shapes(&trace), runtime, "size {size}");
        let out = m.infer(&x).unwrap();
        let last = trace.last().unwrap();
        assert_eq!(last.out_shape, out.logits.shape());
    }
}

#[test]
fn conv_macs_follow_the_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..3 {
        let groups = [1, 2, 4][rng.random_range(0..3)];
        let cin = groups * rng.random_range(1..5);
        let cout = groups * rng.random_range(1..5);
        let k = [1, 3][rng.random_range(0..2)];
        let stride = rng.random_range(1..3);
        let size = rng.random_range(4..12);
        let mut store = ParamStore::new();
        let conv = exmvit::layers::Conv::new(
            &mut store,
            &mut Initializer::structural(),
            "c",
            LayerKind::Conv,
            cin,
            cout,
            k,
            stride,
            groups,
            false,
        );
        let mut t = Tracer::default();
        let out = conv.trace(&mut t, &store, &[2, cin, size, size]).unwrap();
        let out_elems: usize = out.iter().product();
        assert_eq!(t.total_macs(), (out_elems * k * k * cin / groups) as u64);
    }
}
