//! Acceptance suite. Each criterion prints one `A<n> PASS` line on
//! success and panics with an `A<n> FAIL` message otherwise. Run with
//! `cargo test --test acceptance -- --nocapture` to see the lines.

use patchfusion::eval::{
    confusion_and_accuracy, roc_auc, run_cv, stratified_kfold, two_class_map,
};
use patchfusion::fusion::{fuse_mlp, fuse_vote, predict_image, VoteStrategy};
use patchfusion::init::derive_seed;
use patchfusion::patchnet::{receptive_fields, ModelSpec};
use patchfusion::report::write_report;
use patchfusion::stain::{
    estimate_stain_profile, normalize_stains, od_to_rgb, rgb_to_od, StainProfile, DEFAULT_ALPHA,
    DEFAULT_BETA, DEFAULT_I0,
};
use patchfusion::tensor::{
    add, avgpool2d, batchnorm2d, conv2d, cross_entropy, dropout, global_avg_pool, linear,
    maxpool2d, maxpool2d_padded, mul, relu, reshape, softmax, sum_all, BnStats, Mode, Tape,
    Tensor,
};
use patchfusion::tiling::{
    extract_patches, load_image, reassemble, synth_biased_dataset, synth_dataset,
    BiasedSynthSpec, DatasetManifest, ManifestEntry, RgbImage, SynthSpec,
};
use patchfusion::train::{
    infer_probability_map, patchnet_from_checkpoint, train_fusion_stage, train_patch_stage,
    StageHyper,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

// ---------------------------------------------------------------- A1

/// A differentiable test case: shapes of its inputs, a sampler for each
/// input, and the forward map to a scalar loss.
struct GradCase<'a> {
    name: &'a str,
    shapes: Vec<Vec<usize>>,
    tol: f64,
    sample: Box<dyn Fn(&mut ChaCha8Rng, usize) -> Vec<f64> + 'a>,
    forward: Box<dyn Fn(&mut Tape, &[Tensor]) -> Tensor + 'a>,
}

fn uniform_sampler(shapes: Vec<Vec<usize>>) -> Box<dyn Fn(&mut ChaCha8Rng, usize) -> Vec<f64>> {
    Box::new(move |rng, ti| {
        let n: usize = shapes[ti].iter().product();
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
    })
}

/// Deterministic non-constant weights so the scalar loss is sensitive to
/// every output coordinate.
fn weighted_sum(tape: &mut Tape, t: &Tensor) -> Tensor {
    let shape = t.shape();
    let data: Vec<f64> = (0..t.numel()).map(|i| (1.7 * i as f64).sin() + 1.3).collect();
    let w = Tensor::new(&shape, data).unwrap();
    let prod = mul(tape, t, &w).unwrap();
    sum_all(tape, &prod)
}

/// Max relative error over 20 random points, central differences,
/// rel = |analytic - fd| / max(|fd|, 1e-3).
fn grad_check(case: &GradCase) -> f64 {
    let h = 1e-5;
    let mut max_rel: f64 = 0.0;
    for point in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(424, point, 0));
        let datas: Vec<Vec<f64>> = (0..case.shapes.len())
            .map(|ti| (case.sample)(&mut rng, ti))
            .collect();

        let eval = |datas: &[Vec<f64>]| -> f64 {
            let tensors: Vec<Tensor> = datas
                .iter()
                .zip(&case.shapes)
                .map(|(d, s)| Tensor::new(s, d.clone()).unwrap())
                .collect();
            let mut tape = Tape::no_grad();
            (case.forward)(&mut tape, &tensors).item()
        };

        // analytic gradients
        let tensors: Vec<Tensor> = datas
            .iter()
            .zip(&case.shapes)
            .map(|(d, s)| Tensor::new(s, d.clone()).unwrap().with_grad())
            .collect();
        let mut tape = Tape::new();
        let loss = (case.forward)(&mut tape, &tensors);
        tape.backward(&loss).unwrap();
        let grads: Vec<Vec<f64>> = tensors
            .iter()
            .map(|t| t.grad().expect("input participates in the loss"))
            .collect();

        for ti in 0..datas.len() {
            for i in 0..datas[ti].len() {
                let mut plus = datas.clone();
                plus[ti][i] += h;
                let mut minus = datas.clone();
                minus[ti][i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let rel = (grads[ti][i] - fd).abs() / fd.abs().max(1e-3);
                max_rel = max_rel.max(rel);
            }
        }
    }
    max_rel
}

#[test]
fn a1_gradient_suite() {
    let start = std::time::Instant::now();
    let smooth = 1e-6;
    let kinked = 1e-4;

    let mut cases: Vec<GradCase> = Vec::new();

    let shapes = vec![vec![3, 4], vec![3, 4]];
    cases.push(GradCase {
        name: "add",
        shapes: shapes.clone(),
        tol: smooth,
        sample: uniform_sampler(shapes),
        forward: Box::new(|tape, t| {
            let y = add(tape, &t[0], &t[1]).unwrap();
            weighted_sum(tape, &y)
        }),
    });

    let shapes = vec![vec![3, 4], vec![3, 4]];
    cases.push(GradCase {
        name: "mul",
        shapes: shapes.clone(),
        tol: smooth,
        sample: uniform_sampler(shapes),
        forward: Box::new(|tape, t| {
            let y = mul(tape, &t[0], &t[1]).unwrap();
            weighted_sum(tape, &y)
        }),
    });

    let shapes = vec![vec![2, 6]];
    cases.push(GradCase {
        name: "reshape",
        shapes: shapes.clone(),
        tol: smooth,
        sample: uniform_sampler(shapes),
        forward: Box::new(|tape, t| {
            let y = reshape(tape, &t[0], &[3, 4]).unwrap();
            weighted_sum(tape, &y)
        }),
    });

    let shapes = vec![vec![3, 4]];
    cases.push(GradCase {
        name: "sum_all",
        shapes: shapes.clone(),
        tol: smooth,
        sample: uniform_sampler(shapes),
        forward: Box::new(|tape, t| sum_all(tape, &t[0])),
    });

    // keep samples away from the kink so finite differences are valid
    let shapes = vec![vec![3, 4]];
    cases.push(GradCase {
        name: "relu",
        shapes: shapes.clone(),
        tol: kinked,
        sample: Box::new(move |rng, _| {
            (0..12)
                .map(|_| {
                    let v: f64 = rng.gen_range(-1.5..1.5);
                    v + 0.05 * v.signum()
                })
                .collect()
        }),
        forward: Box::new(|tape, t| {
            let y = relu(tape, &t[0]);
            weighted_sum(tape, &y)
        }),
    });

    let shapes = vec![vec![1, 2, 5, 5], vec![2, 2, 3, 3], vec![2]];
    cases.push(GradCase {
        name: "conv2d",
        shapes: shapes.clone(),
        tol: smooth,
        sample: uniform_sampler(shapes),
        forward: Box::new(|tape, t| {
            let y = conv2d(tape, &t[0], &t[1], Some(&t[2]), 2, 1).unwrap();
            weighted_sum(tape, &y)
        }),
    });

    let shapes = vec![vec![2, 2, 4, 4], vec![2], vec![2]];
    cases.push(GradCase {
        name: "batchnorm2d",
        shapes: shapes.clone(),
        tol: smooth,
        sample: uniform_sampler(shapes),
        forward: Box::new(|tape, t| {
            let mut stats = BnStats::new(2);
            let y =
                batchnorm2d(tape, &t[0], &t[1], &t[2], &mut stats, Mode::Train, 0.1, 1e-5)
                    .unwrap();
            weighted_sum(tape, &y)
        }),
    });

    // distinct offsets keep every pooling window's top-2 margin above h
    let pool_sampler = |n: usize| {
        Box::new(move |rng: &mut ChaCha8Rng, _ti: usize| {
            (0..n)
                .map(|i| rng.gen_range(-1.0..1.0) + i as f64 * 2.5)
                .collect::<Vec<f64>>()
        })
    };
    let shapes = vec![vec![1, 2, 6, 6]];
    cases.push(GradCase {
        name: "maxpool2d",
        shapes: shapes.clone(),
        tol: kinked,
        sample: pool_sampler(72),
        forward: Box::new(|tape, t| {
            let y = maxpool2d(tape, &t[0], 2, 2).unwrap();
            weighted_sum(tape, &y)
        }),
    });

    let shapes = vec![vec![1, 2, 5, 5]];
    cases.push(GradCase {
        name: "maxpool2d_padded",
        shapes: shapes.clone(),
        tol: kinked,
        sample: pool_sampler(50),
        forward: Box::new(|tape, t| {
            let y = maxpool2d_padded(tape, &t[0], 3, 2, 1).unwrap();
            weighted_sum(tape, &y)
        }),
    });

    let shapes = vec![vec![1, 2, 4, 4]];
    cases.push(GradCase {
        name: "avgpool2d",
        shapes: shapes.clone(),
        tol: smooth,
        sample: uniform_sampler(shapes),
        forward: Box::new(|tape, t| {
            let y = avgpool2d(tape, &t[0], 2, 2).unwrap();
            weighted_sum(tape, &y)
        }),
    });

    let shapes = vec![vec![2, 3, 4, 4]];
    cases.push(GradCase {
        name: "global_avg_pool",
        shapes: shapes.clone(),
        tol: smooth,
        sample: uniform_sampler(shapes),
        forward: Box::new(|tape, t| {
            let y = global_avg_pool(tape, &t[0]).unwrap();
            weighted_sum(tape, &y)
        }),
    });

    let shapes = vec![vec![3, 4], vec![4, 5], vec![5]];
    cases.push(GradCase {
        name: "linear",
        shapes: shapes.clone(),
        tol: smooth,
        sample: uniform_sampler(shapes),
        forward: Box::new(|tape, t| {
            let y = linear(tape, &t[0], &t[1], &t[2]).unwrap();
            weighted_sum(tape, &y)
        }),
    });

    let shapes = vec![vec![2, 5]];
    cases.push(GradCase {
        name: "softmax",
        shapes: shapes.clone(),
        tol: smooth,
        sample: uniform_sampler(shapes),
        forward: Box::new(|tape, t| {
            let y = softmax(tape, &t[0]).unwrap();
            weighted_sum(tape, &y)
        }),
    });

    let shapes = vec![vec![3, 4]];
    cases.push(GradCase {
        name: "cross_entropy",
        shapes: shapes.clone(),
        tol: smooth,
        sample: uniform_sampler(shapes),
        forward: Box::new(|tape, t| cross_entropy(tape, &t[0], &[0, 2, 1]).unwrap()),
    });

    // a fixed-seed mask makes dropout a fixed linear map per evaluation
    let shapes = vec![vec![4, 6]];
    cases.push(GradCase {
        name: "dropout",
        shapes: shapes.clone(),
        tol: smooth,
        sample: uniform_sampler(shapes),
        forward: Box::new(|tape, t| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let y = dropout(tape, &t[0], 0.5, Mode::Train, &mut rng).unwrap();
            weighted_sum(tape, &y)
        }),
    });

    // two-block residual micro-net: (conv-bn-relu-conv-bn + skip, relu) x2
    // -> GAP -> linear -> cross-entropy
    let shapes = vec![
        vec![1, 2, 6, 6],    // input
        vec![2, 2, 3, 3],    // block 1 conv 1
        vec![2, 2, 3, 3],    // block 1 conv 2
        vec![2, 2, 3, 3],    // block 2 conv 1
        vec![2, 2, 3, 3],    // block 2 conv 2
        vec![2],             // gamma (shared across BNs for compactness)
        vec![2],             // beta
        vec![2, 3],          // fc weight
        vec![3],             // fc bias
    ];
    cases.push(GradCase {
        name: "residual micro-net",
        shapes: shapes.clone(),
        tol: kinked,
        sample: Box::new(move |rng, ti| {
            let n: usize = shapes[ti].iter().product();
            if ti == 5 {
                // keep gamma away from zero
                (0..n).map(|_| rng.gen_range(0.5..1.5)).collect()
            } else {
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
            }
        }),
        forward: Box::new(|tape, t| {
            let block = |tape: &mut Tape, x: &Tensor, w1: &Tensor, w2: &Tensor| {
                let mut s1 = BnStats::new(2);
                let mut s2 = BnStats::new(2);
                let c1 = conv2d(tape, x, w1, None, 1, 1).unwrap();
                let b1 =
                    batchnorm2d(tape, &c1, &t[5], &t[6], &mut s1, Mode::Train, 0.1, 1e-5)
                        .unwrap();
                let r1 = relu(tape, &b1);
                let c2 = conv2d(tape, &r1, w2, None, 1, 1).unwrap();
                let b2 =
                    batchnorm2d(tape, &c2, &t[5], &t[6], &mut s2, Mode::Train, 0.1, 1e-5)
                        .unwrap();
                let sum = add(tape, &b2, x).unwrap();
                relu(tape, &sum)
            };
            let y1 = block(tape, &t[0], &t[1], &t[2]);
            let y2 = block(tape, &y1, &t[3], &t[4]);
            let pooled = global_avg_pool(tape, &y2).unwrap();
            let logits = linear(tape, &pooled, &t[7], &t[8]).unwrap();
            cross_entropy(tape, &logits, &[1]).unwrap()
        }),
    });

    let mut worst = (String::new(), 0.0f64);
    for case in &cases {
        let rel = grad_check(case);
        assert!(
            rel < case.tol,
            "A1 FAIL: {} max relative error {rel:.3e} exceeds {:.0e}",
            case.name,
            case.tol
        );
        if rel > worst.1 {
            worst = (case.name.to_string(), rel);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "A1 FAIL: gradient suite took {secs:.1}s (budget 60s)");
    println!(
        "A1 PASS: {} primitives + residual micro-net pass finite-difference checks \
         (worst: {} at {:.3e}) in {secs:.1}s",
        cases.len() - 1,
        worst.0,
        worst.1
    );
}

// ---------------------------------------------------------------- A2

#[test]
fn a2_receptive_fields() {
    let rf = receptive_fields(&ModelSpec::full(4));
    let expected = vec![(19, 43), (51, 99), (115, 211), (243, 435)];
    assert_eq!(rf, expected, "A2 FAIL: receptive fields {rf:?} != {expected:?}");
    println!("A2 PASS: receptive fields per group = {rf:?}");
}

// ---------------------------------------------------------------- A3

fn small_synth_40(dir: &std::path::Path, seed: u64) -> DatasetManifest {
    synth_dataset(
        &SynthSpec {
            classes: 4,
            per_class: 10,
            test_per_class: 0,
            width: 192,
            height: 128,
            patch_size: 64,
            seed,
        },
        dir,
    )
    .unwrap()
}

#[test]
fn a3_overfit_capacity() {
    let start = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_synth_40(dir.path(), 11);
    let spec = ModelSpec::small(4);
    let hyper = StageHyper {
        epochs: 15,
        ..StageHyper::patch_defaults()
    };
    let (ckpt, logs, _) = train_patch_stage(&manifest, "train", &spec, &hyper, 11).unwrap();
    assert!(logs.len() == 15);

    // accuracy on the (unaugmented) training patches in eval mode
    let (mut net, stdz) = patchnet_from_checkpoint(&ckpt).unwrap();
    let mut correct = 0usize;
    let mut total = 0usize;
    for e in &manifest.entries {
        let img = load_image(&e.path).unwrap();
        let grid = extract_patches(&img, 64, 32).unwrap();
        for patch in &grid.patches {
            let input = patchfusion::train::patches_to_tensor(&[patch], &stdz).unwrap();
            let out = net.forward_patch(&input, Mode::Eval).unwrap();
            if predict_image(&out.probs.to_vec()).unwrap() == e.label {
                correct += 1;
            }
            total += 1;
        }
    }
    let acc = correct as f64 / total as f64;
    let secs = start.elapsed().as_secs_f64();
    assert!(
        acc >= 0.95,
        "A3 FAIL: training patch accuracy {acc:.4} < 0.95 after {} epochs",
        hyper.epochs
    );
    assert!(secs < 900.0, "A3 FAIL: took {secs:.0}s (budget 900s)");
    println!(
        "A3 PASS: small spec reaches {acc:.4} training patch accuracy \
         ({correct}/{total}) in {} epochs, {secs:.0}s",
        hyper.epochs
    );
}

// ---------------------------------------------------------------- A4

#[test]
fn a4_fusion_advantage() {
    let start = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_biased_dataset(
        &BiasedSynthSpec {
            per_class: 8,
            test_per_class: 4,
            patch_size: 32,
            seed: 13,
        },
        dir.path(),
    )
    .unwrap();
    let spec = ModelSpec::with_channels(32, &[8, 16, 32, 64], 4);
    let patch_hyper = StageHyper {
        epochs: 8,
        ..StageHyper::patch_defaults()
    };
    let (patch_ckpt, _, _) =
        train_patch_stage(&manifest, "train", &spec, &patch_hyper, 13).unwrap();

    let fusion_spec = patchfusion::fusion::FusionSpec::new(3, 4, 4);
    let fusion_hyper = StageHyper::fusion_defaults();
    let (fusion_ckpt, _) = train_fusion_stage(
        &patch_ckpt,
        &manifest,
        "train",
        &fusion_spec,
        &fusion_hyper,
        13,
    )
    .unwrap();
    let fusion_net = patchfusion::train::fusion_from_checkpoint(&fusion_ckpt).unwrap();
    let (mut patch_net, stdz) = patchnet_from_checkpoint(&patch_ckpt).unwrap();

    let test = manifest.split("test");
    assert_eq!(test.len(), 16);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut mlp_correct, mut vote_correct) = (0usize, 0usize);
    for e in &test {
        let img = load_image(&e.path).unwrap();
        let map = infer_probability_map(&mut patch_net, &stdz, &img).unwrap();
        let probs = fuse_mlp(&fusion_net, &map, Mode::Eval, &mut rng).unwrap();
        if predict_image(&probs).unwrap() == e.label {
            mlp_correct += 1;
        }
        if fuse_vote(&map, VoteStrategy::Majority) == e.label {
            vote_correct += 1;
        }
    }
    let mlp_acc = mlp_correct as f64 / test.len() as f64;
    let vote_acc = vote_correct as f64 / test.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    assert!(
        mlp_acc >= vote_acc + 0.05,
        "A4 FAIL: fusion {mlp_acc:.4} does not beat majority vote {vote_acc:.4} by 5 points"
    );
    assert!(secs < 1200.0, "A4 FAIL: took {secs:.0}s (budget 1200s)");
    println!(
        "A4 PASS: spatial fusion {mlp_acc:.4} vs majority vote {vote_acc:.4} \
         on held-out biased images ({secs:.0}s)"
    );
}

// ---------------------------------------------------------------- A5

fn random_prob_vec(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.001..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

#[test]
fn a5_oracle_equivalence() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(555);

    // argmax
    for _ in 0..10_000 {
        let k = rng.gen_range(1..8);
        let p = random_prob_vec(&mut rng, k);
        let mut best = 0;
        for i in 0..k {
            if p[i] > p[best] {
                best = i;
            }
        }
        assert_eq!(predict_image(&p).unwrap(), best, "A5 FAIL: argmax oracle");
    }

    // vote fusers
    for _ in 0..10_000 {
        let rows = rng.gen_range(1..4);
        let cols = rng.gen_range(1..4);
        let k = rng.gen_range(2..6);
        let fibers: Vec<Vec<f64>> = (0..rows * cols)
            .map(|_| random_prob_vec(&mut rng, k))
            .collect();
        let map =
            patchfusion::fusion::assemble_probability_map(&fibers, rows, cols).unwrap();

        let mut counts = vec![0usize; k];
        for f in &fibers {
            counts[predict_image(f).unwrap()] += 1;
        }
        let majority = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .unwrap()
            .0;
        assert_eq!(
            fuse_vote(&map, VoteStrategy::Majority),
            majority,
            "A5 FAIL: majority vote oracle"
        );

        let mut best = (0usize, f64::MIN);
        for f in &fibers {
            for (c, &p) in f.iter().enumerate() {
                if p > best.1 {
                    best = (c, p);
                }
            }
        }
        assert_eq!(
            fuse_vote(&map, VoteStrategy::MaxProb),
            best.0,
            "A5 FAIL: max-prob vote oracle"
        );

        let mut sums = vec![0.0; k];
        for f in &fibers {
            for (c, &p) in f.iter().enumerate() {
                sums[c] += p;
            }
        }
        assert_eq!(
            fuse_vote(&map, VoteStrategy::SumProb),
            predict_image(&sums).unwrap(),
            "A5 FAIL: sum-prob vote oracle"
        );
    }

    // confusion matrix + accuracy
    for _ in 0..10_000 {
        let n = rng.gen_range(1..30);
        let k = rng.gen_range(2..5);
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let (cm, acc) = confusion_and_accuracy(&preds, &labels, k).unwrap();
        for t in 0..k {
            for p in 0..k {
                let direct = preds
                    .iter()
                    .zip(&labels)
                    .filter(|&(&pp, &tt)| pp == p && tt == t)
                    .count() as u64;
                assert_eq!(cm.counts[t][p], direct, "A5 FAIL: confusion oracle");
            }
        }
        let direct =
            preds.iter().zip(&labels).filter(|(p, t)| p == t).count() as f64 / n as f64;
        assert!((acc - direct).abs() < 1e-12, "A5 FAIL: accuracy oracle");
    }

    // stratified fold proportions
    for _ in 0..10_000 {
        let classes = rng.gen_range(2..5);
        let k = rng.gen_range(2..5);
        let sizes: Vec<usize> = (0..classes).map(|_| rng.gen_range(k..3 * k)).collect();
        let mut entries = Vec::new();
        for (c, &sz) in sizes.iter().enumerate() {
            for i in 0..sz {
                entries.push(ManifestEntry {
                    path: PathBuf::from(format!("c{c}_{i}.png")),
                    label: c,
                    split: "train".into(),
                });
            }
        }
        let manifest = DatasetManifest::new(
            entries,
            (0..classes).map(|c| format!("class{c}")).collect(),
        )
        .unwrap();
        let plan = stratified_kfold(&manifest, k, rng.gen()).unwrap();
        let total: usize = (0..k).map(|f| plan.fold_indices(f).len()).sum();
        assert_eq!(total, manifest.entries.len(), "A5 FAIL: fold union oracle");
        for fold in 0..k {
            let idx = plan.fold_indices(fold);
            for (c, &sz) in sizes.iter().enumerate() {
                let got =
                    idx.iter().filter(|&&i| manifest.entries[i].label == c).count() as f64;
                assert!(
                    (got - sz as f64 / k as f64).abs() <= 1.0,
                    "A5 FAIL: fold proportion oracle"
                );
            }
        }
    }

    // trapezoid AUC vs pair counting
    for _ in 0..10_000 {
        let n = rng.gen_range(4..30);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let (auc, _) = roc_auc(&scores, &labels).unwrap();
        let mut concordant = 0.0;
        let mut tied = 0.0;
        let mut pairs = 0.0;
        for i in 0..n {
            for j in 0..n {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        concordant += 1.0;
                    } else if scores[i] == scores[j] {
                        tied += 1.0;
                    }
                }
            }
        }
        let oracle = (concordant + 0.5 * tied) / pairs;
        assert!((auc - oracle).abs() < 1e-12, "A5 FAIL: AUC pair-count oracle");
    }

    // two-class grouping normalization
    for _ in 0..10_000 {
        let p = random_prob_vec(&mut rng, 4);
        let (non, car) = two_class_map(&p).unwrap();
        assert_eq!(
            non + car,
            (p[0] + p[1]) + (p[2] + p[3]),
            "A5 FAIL: grouping oracle"
        );
    }

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "A5 FAIL: took {secs:.1}s (budget 60s)");
    println!("A5 PASS: 6 oracle families x 10^4 randomized instances in {secs:.1}s");
}

// ---------------------------------------------------------------- A6

#[test]
fn a6_geometry() {
    let mut img = RgbImage::new(2048, 1536);
    for (x, y, p) in img.enumerate_pixels_mut() {
        p.0 = [(x % 256) as u8, (y % 256) as u8, ((x * 7 + y * 3) % 256) as u8];
    }
    let grid = extract_patches(&img, 512, 512).unwrap();
    assert_eq!(
        (grid.rows, grid.cols, grid.patches.len()),
        (3, 4, 12),
        "A6 FAIL: expected a 3x4 grid of 12 patches"
    );
    let back = reassemble(&grid).unwrap();
    assert_eq!(back.dimensions(), (2048, 1536), "A6 FAIL: reassembled size");
    assert!(
        back.pixels().zip(img.pixels()).all(|(a, b)| a == b),
        "A6 FAIL: reassembly not pixel-exact"
    );
    println!("A6 PASS: 2048x1536 / 512 -> 3x4 grid of 12 patches, pixel-exact reassembly");
}

// ---------------------------------------------------------------- A7

#[test]
fn a7_stain_normalization() {
    let start = std::time::Instant::now();
    let reference = StainProfile::reference();
    let h = reference.column(0);
    let e = reference.column(1);

    // synthesize a two-stain mixture image in OD space
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (w, hgt) = (80u32, 80u32);
    let od: Vec<[f64; 3]> = (0..(w * hgt) as usize)
        .map(|_| {
            // ranges reach 0 so near-pure pixels exist and the robust
            // angular extremes sit close to the true stain directions
            let ch = rng.gen_range(0.0..1.2);
            let ce = rng.gen_range(0.0..1.2);
            [
                ch * h[0] + ce * e[0],
                ch * h[1] + ce * e[1],
                ch * h[2] + ce * e[2],
            ]
        })
        .collect();
    let img = od_to_rgb(&od, w, hgt, DEFAULT_I0);
    let quantized_od = rgb_to_od(&img, DEFAULT_I0);
    let profile = estimate_stain_profile(&quantized_od, DEFAULT_BETA, DEFAULT_ALPHA).unwrap();

    let angle = |a: [f64; 3], b: [f64; 3]| {
        let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        dot.clamp(-1.0, 1.0).acos().to_degrees()
    };
    let err_h = angle(profile.column(0), h);
    let err_e = angle(profile.column(1), e);
    assert!(
        err_h < 2.0 && err_e < 2.0,
        "A7 FAIL: stain vector angular errors {err_h:.3} deg / {err_e:.3} deg exceed 2 deg"
    );

    // self-normalization: source == reference must be a near-identity
    let self_norm = normalize_stains(&img, &profile, &profile);
    let max_diff = img
        .pixels()
        .zip(self_norm.pixels())
        .flat_map(|(a, b)| (0..3).map(move |c| (a.0[c] as i32 - b.0[c] as i32).abs()))
        .max()
        .unwrap();
    assert!(
        max_diff <= 2,
        "A7 FAIL: self-normalization moved a channel by {max_diff} levels (> 2)"
    );
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 30.0, "A7 FAIL: took {secs:.1}s (budget 30s)");
    println!(
        "A7 PASS: stain vectors recovered within {err_h:.3}/{err_e:.3} deg, \
         self-normalization max change {max_diff} levels ({secs:.1}s)"
    );
}

// ---------------------------------------------------------------- A8

#[test]
fn a8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(
        &SynthSpec {
            classes: 2,
            per_class: 2,
            test_per_class: 0,
            width: 64,
            height: 64,
            patch_size: 64,
            seed: 21,
        },
        dir.path(),
    )
    .unwrap();
    let spec = ModelSpec::with_channels(64, &[4, 8, 8, 8], 2);
    let hyper = StageHyper {
        epochs: 2,
        ..StageHyper::patch_defaults()
    };
    let (c1, l1, _) = train_patch_stage(&manifest, "train", &spec, &hyper, 21).unwrap();
    let (c2, l2, _) = train_patch_stage(&manifest, "train", &spec, &hyper, 21).unwrap();
    assert_eq!(l1, l2, "A8 FAIL: loss logs differ between identical runs");
    assert!(
        c1.weights.len() == c2.weights.len()
            && c1
                .weights
                .iter()
                .zip(&c2.weights)
                .all(|(a, b)| a.to_bits() == b.to_bits()),
        "A8 FAIL: patch checkpoints not bitwise identical"
    );

    let fusion_spec = patchfusion::fusion::FusionSpec::new(1, 1, 2);
    let fh = StageHyper {
        epochs: 2,
        ..StageHyper::fusion_defaults()
    };
    let (f1, fl1) =
        train_fusion_stage(&c1, &manifest, "train", &fusion_spec, &fh, 21).unwrap();
    let (f2, fl2) =
        train_fusion_stage(&c2, &manifest, "train", &fusion_spec, &fh, 21).unwrap();
    assert_eq!(fl1, fl2, "A8 FAIL: fusion loss logs differ");
    assert!(
        f1.weights
            .iter()
            .zip(&f2.weights)
            .all(|(a, b)| a.to_bits() == b.to_bits()),
        "A8 FAIL: fusion checkpoints not bitwise identical"
    );
    println!("A8 PASS: repeated same-seed training is bitwise identical (checkpoints + logs)");
}

// ---------------------------------------------------------------- A9

#[test]
fn a9_cross_validation() {
    let start = std::time::Instant::now();
    let data_dir = tempfile::tempdir().unwrap();
    let manifest = small_synth_40(data_dir.path(), 17);
    let spec = ModelSpec::small(4);
    let patch_hyper = StageHyper {
        epochs: 10,
        ..StageHyper::patch_defaults()
    };
    let fusion_hyper = StageHyper::fusion_defaults();
    let report = run_cv(&manifest, 2, &spec, &patch_hyper, &fusion_hyper, 17).unwrap();

    let out_dir = tempfile::tempdir().unwrap();
    write_report(&report, out_dir.path()).unwrap();

    let metrics = std::fs::read_to_string(out_dir.path().join("metrics.csv")).unwrap();
    assert!(
        metrics.starts_with("fold,test_images,acc4,acc2,auc"),
        "A9 FAIL: malformed metrics.csv"
    );
    assert!(metrics.lines().count() >= 4, "A9 FAIL: metrics.csv too short");
    let svg = std::fs::read_to_string(out_dir.path().join("confusion.svg")).unwrap();
    assert!(
        svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"),
        "A9 FAIL: malformed confusion.svg"
    );
    let roc = std::fs::read_to_string(out_dir.path().join("roc.csv")).unwrap();
    assert!(roc.starts_with("threshold,fpr,tpr"), "A9 FAIL: malformed roc.csv");

    let secs = start.elapsed().as_secs_f64();
    assert!(
        report.mean_acc4 >= 0.85,
        "A9 FAIL: 2-fold mean 4-class accuracy {:.4} < 0.85",
        report.mean_acc4
    );
    assert!(secs < 2400.0, "A9 FAIL: took {secs:.0}s (budget 2400s)");
    println!(
        "A9 PASS: 2-fold CV mean acc4 {:.4} (std {:.4}), mean acc2 {:?}, mean AUC {:?}, \
         report well-formed ({secs:.0}s)",
        report.mean_acc4, report.std_acc4, report.mean_acc2, report.mean_auc
    );
}
