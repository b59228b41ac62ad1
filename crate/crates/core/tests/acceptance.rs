//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Set `SYNFOC_ACCEPTANCE_QUICK=1` to skip the end-to-end criteria (5 to 8).

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synfoc::data::{Dataset, SplitConfig};
use synfoc::engine::{grad_check, LabelMap, OptimizerConfig, OptimizerState, Tape, Tensor, Var};
use synfoc::metrics::{dsc, distance_pair, jaccard, surface_extract, DistanceFlag};
use synfoc::models::{
    probs_on_tape, ConvSegNet, FoundationSegNet, Mode, ParamRole, SegNet, TeacherStudentPair,
};
use synfoc::synfoc::{
    ce_dice, ce_loss, confidence_weight, consensus_entropy_loss, copy_paste, dice_agreement,
    dice_loss, divergence_mse_loss, ensemble_pseudo, ensemble_ratio, mutual_confidence,
    region_masks, self_confidence, supervised_loss, total_loss, unsupervised_loss, warmup_lambda,
    AlphaRule, Normalizer, PasteMask, TAU,
};
use synfoc::trainer::{
    pretrain_holdout_report, pretrain_on, run_suite, suite_threads, ExperimentLog, ModelKind,
    Strategy, SuiteResult, TrainConfig,
};

const GRAD_SEEDS: u64 = 20;
const GRAD_TOL: f64 = 1e-6;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const PROPERTY_CASES: u64 = 100;
const METRIC_PAIRS: u64 = 50;

const PRIMARY_SEED: u64 = 2024;
const RETRY_SEED: u64 = 2025;
const FOUND_MARGIN: f64 = 0.03;
const CONV_MARGIN: f64 = 0.05;
const SUITE_BUDGET: Duration = Duration::from_secs(30 * 60);
const ENSEMBLE_SLACK: f64 = 0.01;
const ABLATION_SLACK: f64 = 0.01;
const HOLDOUT_SAMPLES: usize = 120;
const HOLDOUT_FLOOR: f64 = 0.80;

fn report(id: u32, title: &str, pass: bool, detail: &str) -> bool {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {id} ({title}): {detail}");
    pass
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---------------------------------------------------------------- helpers

fn probs(rng: &mut ChaCha8Rng, shape: &[usize], spread: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-spread..spread)).softmax_channels().unwrap()
}

fn labels(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, classes: u8) -> Vec<LabelMap> {
    (0..n)
        .map(|_| LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..=classes)).collect()).unwrap())
        .collect()
}

fn binary(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
}

fn eval(f: impl FnOnce(&mut Tape<f64>) -> synfoc::Result<Var>) -> f64 {
    let mut tape = Tape::no_grad();
    let v = f(&mut tape).unwrap();
    tape.value(v).item()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn label_map(h: usize, w: usize, data: &[u8]) -> LabelMap {
    LabelMap::new(h, w, data.to_vec()).unwrap()
}

// ------------------------------------------------------ 1. gradient suite

/// Two probability maps that both depend on the logits `x`.
fn two_maps(t: &mut Tape<f64>, x: Var, scale: &Tensor<f64>, shift: &Tensor<f64>) -> synfoc::Result<(Var, Var)> {
    let p = t.softmax_channels(x)?;
    let s = t.constant(scale.clone());
    let b = t.constant(shift.clone());
    let z = t.mul(x, s)?;
    let z = t.add(z, b)?;
    let q = t.softmax_channels(z)?;
    Ok((p, q))
}

fn gradient_suite() -> bool {
    let start = Instant::now();
    let shape = [2, 3, 3, 3];
    let mut worst: Vec<(&str, f64)> = ["unsupervised", "entropy", "mse", "ce", "dice", "total"]
        .into_iter()
        .map(|n| (n, 0.0))
        .collect();
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&shape, |_| rng.gen_range(-1.5..1.5));
        let scale = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
        let shift = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
        let y = labels(&mut rng, 2, 3, 3, 2);
        let q = labels(&mut rng, 2, 3, 3, 2);
        let w = binary(&mut rng, &[2, 1, 3, 3]);
        let m = binary(&mut rng, &[2, 1, 3, 3]);
        let t_max = 100;
        let t = rng.gen_range(0..=t_max);
        let regions = {
            let mut tape = Tape::no_grad();
            let xv = tape.constant(x.clone());
            let (p, q) = two_maps(&mut tape, xv, &scale, &shift).unwrap();
            region_masks(tape.value(p), tape.value(q)).unwrap()
        };
        let checks: [(usize, Box<dyn Fn(&mut Tape<f64>, Var) -> synfoc::Result<Var>>); 6] = [
            (0, Box::new(|t, x| {
                let (a, b) = two_maps(t, x, &scale, &shift)?;
                unsupervised_loss(t, &q, a, b, &w)
            })),
            (1, Box::new(|t, x| {
                let (a, b) = two_maps(t, x, &scale, &shift)?;
                consensus_entropy_loss(t, a, b, &m, Normalizer::AllChannels)
            })),
            (2, Box::new(|t, x| {
                let (a, b) = two_maps(t, x, &scale, &shift)?;
                divergence_mse_loss(t, a, b, &m, Normalizer::AllChannels)
            })),
            (3, Box::new(|t, x| {
                let p = t.softmax_channels(x)?;
                ce_loss(t, &y, p, &w)
            })),
            (4, Box::new(|t, x| {
                let p = t.softmax_channels(x)?;
                dice_loss(t, &y, p, &w)
            })),
            (5, Box::new(|tp, x| {
                let (a, b) = two_maps(tp, x, &scale, &shift)?;
                let l_x = supervised_loss(tp, a, b, &y)?;
                let l_u = unsupervised_loss(tp, &q, a, b, &w)?;
                let l_c = consensus_entropy_loss(tp, a, b, &regions.m_consensus, Normalizer::AllChannels)?;
                let l_d = divergence_mse_loss(tp, a, b, &regions.m_divergence, Normalizer::AllChannels)?;
                total_loss(tp, l_x, l_u, l_c, l_d, t, t_max)
            })),
        ];
        for (slot, f) in checks {
            let err = grad_check(|tape, v| f(tape, v), &x, 1e-6).unwrap();
            worst[slot].1 = worst[slot].1.max(err);
        }
    }
    let elapsed = start.elapsed();
    let pass = worst.iter().all(|(_, e)| *e < GRAD_TOL) && elapsed < GRAD_BUDGET;
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    report(
        1,
        "gradient suite",
        pass,
        &format!(
            "max relative error over {GRAD_SEEDS} seeds: {detail} (limit {GRAD_TOL:e}); {:.1}s (limit {}s)",
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}

// ------------------------------------------------- 2. equation fixtures

fn one_pixel(p_fg: f64) -> Tensor<f64> {
    Tensor::from_f64(&[1, 2, 1, 1], &[1.0 - p_fg, p_fg]).unwrap()
}

fn same_values<N: SegNet<f64>>(a: &N, b: &N) -> bool {
    a.params().iter().zip(b.params().iter()).all(|(x, y)| x.value == y.value)
}

fn fixtures() -> Vec<(&'static str, bool)> {
    let mut out = Vec::new();
    let mut check = |name: &'static str, ok: bool| out.push((name, ok));

    // engine
    let conv = eval(|t| {
        let x = t.constant(Tensor::from_f64(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.])?);
        let k = t.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = t.conv2d(x, k, None, 1, 0)?;
        Ok(t.sum(y))
    });
    check("conv2d of 1..9 with a ones kernel is 45", conv == 45.0);
    let sm = Tensor::from_f64(&[1, 2, 1, 1], &[2f64.ln(), 0.0]).unwrap().softmax_channels().unwrap();
    check("softmax(ln 2, 0) = (2/3, 1/3)", close(sm.data()[0], 2.0 / 3.0, 1e-15) && close(sm.data()[1], 1.0 / 3.0, 1e-15));
    check("square([3]) = [9]", eval(|t| {
        let x = t.constant(Tensor::from_f64(&[1], &[3.0])?);
        Ok(t.square(x))
    }) == 9.0);
    check("mean([1,2,3]) = 2", eval(|t| {
        let x = t.constant(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0])?);
        Ok(t.mean(x))
    }) == 2.0);
    check("maxpool2 of [[1,2],[3,4]] = [[4]]", eval(|t| {
        let x = t.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])?);
        t.maxpool2(x)
    }) == 4.0);
    {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[2, 2], &[0.3, -1.0, 2.0, 5.0]).unwrap());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        check("grad of sum is all ones", tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }
    {
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64);
        let m = (1.0 - b1) * 1.0 / (1.0 - b1);
        let v = (1.0 - b2) * 1.0 / (1.0 - b2);
        let expected = 1.0 - lr * m / (v.sqrt() + eps);
        let mut opt = OptimizerState::<f64>::new(OptimizerConfig::Adamw { lr, beta1: b1, beta2: b2, eps, weight_decay: 0.0 });
        let mut p = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let g = Tensor::from_f64(&[1], &[1.0]).unwrap();
        opt.step(&mut [&mut p], &[Some(&g)]).unwrap();
        check("AdamW step on p=1, g=1, lr=0.1 matches the scalar trace", close(p.data()[0], expected, 1e-12) && close(p.data()[0], 0.9, 1e-6));
    }

    // copy-paste
    let m = PasteMask::from_rect(2, 2, 0, 0, 1, 1).unwrap();
    let x_w = Tensor::<f64>::ones(&[1, 2, 2]);
    let u_s = Tensor::<f64>::zeros(&[1, 2, 2]);
    let (y_w, q_w) = (label_map(2, 2, &[1, 1, 1, 1]), label_map(2, 2, &[0, 0, 0, 0]));
    let (u_c, q_c) = copy_paste(&x_w, &u_s, &y_w, &q_w, &m).unwrap();
    check("copy-paste 2×2 composition", u_c.data() == [1.0, 0.0, 0.0, 0.0] && q_c.data == [1, 0, 0, 0]);
    let full = PasteMask::from_rect(2, 2, 0, 0, 2, 2).unwrap();
    let (u, q) = copy_paste(&x_w, &u_s, &y_w, &q_w, &full).unwrap();
    check("copy-paste with an all-ones mask gives the labeled pair", u == x_w && q == y_w);
    let none = PasteMask::empty(2, 2).unwrap();
    let (u, q) = copy_paste(&x_w, &u_s, &y_w, &q_w, &none).unwrap();
    check("copy-paste with an all-zeros mask gives the unlabeled pair", u == u_s && q == q_w);

    // confidence
    let a = label_map(4, 4, &[1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
    let b = label_map(4, 4, &[0, 0, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
    let c = label_map(4, 4, &[0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1]);
    check("Dice agreement with |A|=|B|=4, overlap 2 is 0.5", dice_agreement(&a, &b, 1) == 0.5);
    check("identical nonempty maps agree fully", dice_agreement(&a, &a, 1) == 1.0);
    check("disjoint nonempty maps agree not at all", dice_agreement(&a, &c, 1) == 0.0);
    let students = [a.clone(), a.clone(), a.clone()];
    let teachers = [a.clone(), c.clone(), b.clone()];
    check("batch of three confidences is [1, 0, 0.5]", self_confidence(&students, &teachers, 1) == [1.0, 0.0, 0.5]);
    check("mutual confidence on the same batch is [1, 0, 0.5]", mutual_confidence(&students, &teachers, 1) == [1.0, 0.0, 0.5]);
    check("SMC ratio of (0.8, 0.5) is 0.4", close(ensemble_ratio(0.8, 0.5, AlphaRule::Smc, 1, 10).unwrap(), 0.4, 1e-15));
    check("linear ratio at t_max is 1", ensemble_ratio(0.3, 0.2, AlphaRule::Linear, 10, 10).unwrap() == 1.0);
    check(
        "SMC ratio boundaries",
        ensemble_ratio(1.0, 1.0, AlphaRule::Smc, 0, 10).unwrap() == 1.0 && ensemble_ratio(0.0, 0.7, AlphaRule::Smc, 0, 10).unwrap() == 0.0,
    );
    check(
        "remaining ratio rules",
        ensemble_ratio(0.3, 0.6, AlphaRule::Constant, 2, 10).unwrap() == 0.5
            && ensemble_ratio(0.3, 0.6, AlphaRule::Cps, 2, 10).unwrap() == 0.0
            && ensemble_ratio(0.3, 0.6, AlphaRule::SelfOnly, 2, 10).unwrap() == 0.3
            && ensemble_ratio(0.3, 0.6, AlphaRule::MutualOnly, 2, 10).unwrap() == 0.6,
    );

    // ensemble and weight map
    let (p_en, q_en) = ensemble_pseudo(&one_pixel(0.2), &one_pixel(0.8), &[0.5]).unwrap();
    check("ensemble at 0.5 averages to a tie resolved to class 0", p_en.data() == [0.5, 0.5] && q_en[0].data == [0]);
    let (p_ut, p_ms) = (one_pixel(0.3), one_pixel(0.9));
    check("ratio 1 reproduces the conventional map", ensemble_pseudo(&p_ut, &p_ms, &[1.0]).unwrap().0 == p_ut);
    check("ratio 0 reproduces the foundation map", ensemble_pseudo(&p_ut, &p_ms, &[0.0]).unwrap().0 == p_ms);
    let mixed = Tensor::<f64>::from_f64(&[1, 2, 2, 2], &[0.99, 0.5, 0.96, 0.9, 0.01, 0.5, 0.04, 0.1]).unwrap();
    let wmap = confidence_weight(&mixed, TAU, &[], false).unwrap();
    check("weight map of the mixed 2×2 case is [[1,0],[1,0]]", wmap.data() == [1.0, 0.0, 1.0, 0.0]);
    let uniform = Tensor::<f64>::full(&[1, 2, 3, 3], 0.5);
    check(
        "uniform probabilities give an all-zero weight map",
        confidence_weight(&uniform, TAU, &[PasteMask::empty(3, 3).unwrap()], true).unwrap().data().iter().all(|&v| v == 0.0),
    );
    let hot = Tensor::stack_one_hot(&[label_map(2, 2, &[0, 1, 1, 0])], 2);
    check("one-hot probabilities give an all-one weight map", confidence_weight::<f64>(&hot, TAU, &[], false).unwrap().data().iter().all(|&v| v == 1.0));

    // losses
    let y1 = [label_map(1, 1, &[1])];
    let w1 = Tensor::ones(&[1, 1, 1, 1]);
    let ce = eval(|t| {
        let p = t.constant(one_pixel(0.75));
        ce_loss(t, &y1, p, &w1)
    });
    let dice = eval(|t| {
        let p = t.constant(one_pixel(0.75));
        dice_loss(t, &y1, p, &w1)
    });
    check("one-pixel CE is 0.2877", close(ce, 0.2877, 5e-5) && close(ce, -(0.75f64.ln()), 1e-12));
    check("one-pixel Dice is 0.0400", close(dice, 0.0400, 5e-5) && close(dice, 1.0 - 1.5 / 1.5625, 1e-7));
    let y2 = [label_map(2, 2, &[0, 1, 1, 0])];
    let w2 = Tensor::ones(&[1, 1, 2, 2]);
    let perfect = Tensor::stack_one_hot(&y2, 2);
    check("perfect prediction has zero CE and Dice", eval(|t| {
        let p = t.constant(perfect.clone());
        ce_dice(t, &y2, p, &w2)
    }).abs() < 1e-7);
    check("supervised loss of two perfect models is 0", eval(|t| {
        let (a, b) = (t.constant(perfect.clone()), t.constant(perfect.clone()));
        supervised_loss(t, a, b, &y2)
    }).abs() < 1e-7);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (pa, pb) = (probs(&mut rng, &[1, 2, 2, 2], 2.0), probs(&mut rng, &[1, 2, 2, 2], 2.0));
    let sup = |a: &Tensor<f64>, b: &Tensor<f64>| {
        eval(|t| {
            let (x, z) = (t.constant(a.clone()), t.constant(b.clone()));
            supervised_loss(t, x, z, &y2)
        })
    };
    check("supervised loss is symmetric in the two models", close(sup(&pa, &pb), sup(&pb, &pa), 1e-12));
    check("unsupervised loss of exact students is 0", eval(|t| {
        let (a, b) = (t.constant(perfect.clone()), t.constant(perfect.clone()));
        unsupervised_loss(t, &y2, a, b, &w2)
    }).abs() < 1e-7);
    check("unsupervised loss with zero weights is 0", eval(|t| {
        let (a, b) = (t.constant(pa.clone()), t.constant(pb.clone()));
        unsupervised_loss(t, &y2, a, b, &Tensor::zeros(&[1, 1, 2, 2]))
    }) == 0.0);
    let same = region_masks(&pa, &pa).unwrap();
    check("identical maps are all consensus", same.m_consensus.data().iter().all(|&v| v == 1.0));
    let flipped = region_masks(&one_pixel(0.9), &one_pixel(0.1)).unwrap();
    check("everywhere-different maps are all divergence", flipped.m_divergence.data().iter().all(|&v| v == 1.0));
    let entropy = |a: f64, b: f64, m: f64| {
        eval(|t| {
            let (x, z) = (t.constant(one_pixel(a)), t.constant(one_pixel(b)));
            consensus_entropy_loss(t, x, z, &Tensor::full(&[1, 1, 1, 1], m), Normalizer::AllChannels)
        })
    };
    let mse = |a: f64, b: f64, m: f64| {
        eval(|t| {
            let (x, z) = (t.constant(one_pixel(a)), t.constant(one_pixel(b)));
            divergence_mse_loss(t, x, z, &Tensor::full(&[1, 1, 1, 1], m), Normalizer::AllChannels)
        })
    };
    check("entropy of uniform one-pixel maps is ln 2", close(entropy(0.5, 0.5, 1.0), std::f64::consts::LN_2, 1e-12));
    check("entropy of one-hot maps is 0", entropy(1.0, 0.0, 1.0).abs() < 1e-12);
    check("entropy under an empty mask is 0", entropy(0.5, 0.5, 0.0) == 0.0);
    check("MSE of opposite one-hot pixels is 1", mse(1.0, 0.0, 1.0) == 1.0);
    check("MSE of identical maps is 0", mse(0.3, 0.3, 1.0) == 0.0);
    check("MSE under an empty mask is 0", mse(1.0, 0.0, 0.0) == 0.0);

    // warmup and total
    check("λ(0) = e^-5 ≈ 0.006738", close(warmup_lambda(0, 100), (-5f64).exp(), 1e-15) && close(warmup_lambda(0, 100), 0.006738, 5e-7));
    check("λ(t_max/2) ≈ 0.082085", close(warmup_lambda(50, 100), 0.082085, 5e-7));
    check("λ(t_max) = 1", warmup_lambda(100, 100) == 1.0);
    let total = |x: f64, u: f64, c: f64, d: f64, t: usize| {
        eval(|tape| {
            let v: Vec<Var> = [x, u, c, d].iter().map(|&s| tape.constant(Tensor::scalar(s))).collect();
            total_loss(tape, v[0], v[1], v[2], v[3], t, 1000)
        })
    };
    check("total at t_max is the plain sum", close(total(1.0, 0.2, 0.3, 0.4, 1000), 1.9, 1e-15));
    check("total early in training is close to l_x", close(total(1.0, 0.2, 0.3, 0.4, 0), 1.0, 0.01));
    check(
        "doubling the unsupervised terms doubles their weighted part",
        total(0.0, 0.4, 0.6, 0.8, 400) == 2.0 * total(0.0, 0.2, 0.3, 0.4, 400),
    );

    // metrics
    check("DSC 0.5 and Jaccard 1/3 for overlap 2 of 4 and 4", dsc(&a, &b, 1) == [0.5] && close(jaccard(&a, &b, 1)[0], 1.0 / 3.0, 1e-15));
    check("identical masks score 1, 1", dsc(&a, &a, 1) == [1.0] && jaccard(&a, &a, 1) == [1.0]);
    check("disjoint masks score 0, 0", dsc(&a, &c, 1) == [0.0] && jaccard(&a, &c, 1) == [0.0]);
    let mut square = vec![false; 25];
    for y in 1..4 {
        for x in 1..4 {
            square[y * 5 + x] = true;
        }
    }
    let surface = surface_extract(&square, 5, 5);
    check("surface of a filled 3×3 square is its 8 perimeter pixels", surface.len() == 8 && !surface.contains(&(2, 2)));
    let mut single = vec![false; 25];
    single[12] = true;
    check("surface of a single pixel is that pixel", surface_extract(&single, 5, 5) == [(2, 2)]);
    check("surface of an empty mask is empty", surface_extract(&[false; 25], 5, 5).is_empty());
    let d = distance_pair(&[(0, 0)], &[(0, 3)], 8, 8);
    check("two single pixels 3 apart have HD95 3 and ASD 3", d.hd95 == 3.0 && d.asd == 3.0);
    let d = distance_pair(&surface, &surface, 5, 5);
    check("identical surfaces are at distance 0", d.hd95 == 0.0 && d.asd == 0.0);

    // EMA
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = ConvSegNet::<f64>::new(1, [2, 2, 2], &mut rng);
    let other = ConvSegNet::<f64>::new(1, [2, 2, 2], &mut rng);
    let mut pair = TeacherStudentPair::new(net.clone(), 0.0).unwrap();
    pair.student = other.clone();
    pair.ema_update().unwrap();
    check("EMA decay 0 copies the student", same_values(&pair.teacher, &other));
    let mut pair = TeacherStudentPair::new(net.clone(), 1.0).unwrap();
    pair.student = other.clone();
    pair.ema_update().unwrap();
    check("EMA decay 1 leaves the teacher", same_values(&pair.teacher, &net));
    out
}

fn fixture_suite() -> bool {
    let results = fixtures();
    let failed: Vec<&str> = results.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    let detail = if failed.is_empty() {
        format!("{} fixtures exact", results.len())
    } else {
        format!("{} of {} failed: {}", failed.len(), results.len(), failed.join("; "))
    };
    report(2, "equation fixtures", failed.is_empty(), &detail)
}

// ------------------------------------------------ 3. structural invariants

fn region_partition(rng: &mut ChaCha8Rng) -> bool {
    let a = probs(rng, &[2, 3, 5, 5], 3.0);
    let b = probs(rng, &[2, 3, 5, 5], 3.0);
    let m = region_masks(&a, &b).unwrap();
    let (qa, qb) = (a.argmax_channels().unwrap(), b.argmax_channels().unwrap());
    let agree: Vec<bool> = qa.iter().zip(&qb).flat_map(|(x, y)| x.data.iter().zip(&y.data).map(|(p, q)| p == q).collect::<Vec<_>>()).collect();
    m.m_consensus
        .data()
        .iter()
        .zip(m.m_divergence.data())
        .zip(agree)
        .all(|((&c, &d), same)| c + d == 1.0 && c * d == 0.0 && (c == 1.0) == same)
}

fn ensemble_convexity(rng: &mut ChaCha8Rng) -> bool {
    let shape = [3, 3, 4, 4];
    let a = probs(rng, &shape, 3.0);
    let b = probs(rng, &shape, 3.0);
    let mut alphas: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..=1.0)).collect();
    alphas[rng.gen_range(0..3)] = if rng.gen_bool(0.5) { 0.0 } else { 1.0 };
    let (en, _) = ensemble_pseudo(&a, &b, &alphas).unwrap();
    let per = a.len() / 3;
    let convex = en.data().iter().zip(a.data()).zip(b.data()).all(|((&e, &x), &y)| e >= x.min(y) - 1e-15 && e <= x.max(y) + 1e-15);
    let normalized = (0..3 * 16).all(|px| {
        let (n, i) = (px / 16, px % 16);
        let s: f64 = (0..3).map(|c| en.data()[n * per + c * 16 + i]).sum();
        close(s, 1.0, 1e-12)
    });
    let boundary = alphas.iter().enumerate().all(|(n, &al)| {
        let range = n * per..(n + 1) * per;
        let got = &en.data()[range.clone()];
        if al == 1.0 {
            got == &a.data()[range]
        } else if al == 0.0 {
            got == &b.data()[range]
        } else {
            true
        }
    });
    convex && normalized && boundary
}

fn weight_binarity(rng: &mut ChaCha8Rng) -> bool {
    let p = probs(rng, &[2, 2, 6, 6], 6.0);
    let w = confidence_weight(&p, TAU, &[], false).unwrap();
    let max = p.channel_max().unwrap();
    w.data().iter().zip(max.data()).all(|(&w, &m)| (w == 0.0 || w == 1.0) && (w == 1.0) == (m >= TAU))
}

const TINY_WIDTHS: [usize; 3] = [4, 8, 8];

fn adapter_identity(rng: &mut ChaCha8Rng) -> bool {
    let classes = rng.gen_range(1..=2);
    let mut net = FoundationSegNet::<f64>::new(classes, TINY_WIDTHS, rng);
    let x = Tensor::from_fn(&[1, 1, 16, 16], |_| rng.gen_range(0.0..1.0));
    let plain = net.predict_logits(&x).unwrap();
    net.attach_adapters(rng.gen_range(1..=4), rng).unwrap();
    net.predict_logits(&x).unwrap() == plain
}

fn frozen_backbone(rng: &mut ChaCha8Rng) -> bool {
    let mut net = FoundationSegNet::<f64>::new(1, TINY_WIDTHS, rng);
    net.attach_adapters(2, rng).unwrap();
    let before = net.clone();
    let mut opt = OptimizerState::new(OptimizerConfig::adamw_default().with_lr(1e-2));
    for _ in 0..2 {
        let x = Tensor::from_fn(&[2, 1, 16, 16], |_| rng.gen_range(0.0..1.0));
        let y = labels(rng, 2, 16, 16, 1);
        let mut tape = Tape::new();
        let (p, bound) = probs_on_tape(&net, &mut tape, &x, Mode::Train).unwrap();
        let loss = ce_dice(&mut tape, &y, p, &Tensor::ones(&[2, 1, 16, 16])).unwrap();
        tape.backward(loss).unwrap();
        let bound = bound.unwrap();
        let (mut params, grads) = net.params_mut().trainable_with_grads(&tape, &bound);
        opt.step(&mut params, &grads).unwrap();
    }
    let mut trainable_moved = false;
    for (now, then) in net.params().iter().zip(before.params().iter()) {
        match now.role {
            ParamRole::Frozen => {
                if now.value != then.value {
                    return false;
                }
            }
            ParamRole::Trainable => trainable_moved |= now.value != then.value,
        }
    }
    trainable_moved && !net.backbone_ids().is_empty()
}

fn ema_closed_form(rng: &mut ChaCha8Rng) -> bool {
    let d: f64 = rng.gen_range(0.0..1.0);
    let k = rng.gen_range(1..=5);
    let teacher0 = ConvSegNet::<f64>::new(1, [2, 2, 2], rng);
    let student = ConvSegNet::<f64>::new(1, [2, 2, 2], rng);
    let mut pair = TeacherStudentPair::new(teacher0.clone(), d).unwrap();
    pair.student = student.clone();
    let dk = d.powi(k);
    let mut ok = true;
    for step in 1..=k {
        pair.ema_update().unwrap();
        let dk = d.powi(step);
        for ((t, t0), s) in pair.teacher.params().iter().zip(teacher0.params().iter()).zip(student.params().iter()) {
            for ((&t, &t0), &s) in t.value.data().iter().zip(t0.value.data()).zip(s.value.data()) {
                let expected = if step == 1 { d * t0 + (1.0 - d) * s } else { dk * t0 + (1.0 - dk) * s };
                let tol = if step == 1 { 0.0 } else { 1e-12 };
                ok &= (t - expected).abs() <= tol;
            }
        }
    }
    ok && dk <= 1.0
}

fn invariant_suite() -> bool {
    let checks: [(&str, fn(&mut ChaCha8Rng) -> bool); 6] = [
        ("region partition", region_partition),
        ("ensemble convexity and ratio boundaries", ensemble_convexity),
        ("weight-map binarity", weight_binarity),
        ("adapter identity at zero", adapter_identity),
        ("frozen backbone", frozen_backbone),
        ("EMA closed form", ema_closed_form),
    ];
    let mut parts = Vec::new();
    let mut pass = true;
    for (i, (name, f)) in checks.iter().enumerate() {
        let passed = (0..PROPERTY_CASES)
            .filter(|case| f(&mut ChaCha8Rng::seed_from_u64(1_000 * i as u64 + case)))
            .count();
        pass &= passed as u64 == PROPERTY_CASES;
        parts.push(format!("{name} {passed}/{PROPERTY_CASES}"));
    }
    report(3, "structural invariants", pass, &parts.join(", "))
}

// ------------------------------------------------------ 4. metric oracle

fn brute_surface(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize];
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if at(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !at(y + dy, x + dx)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

/// All-pairs nearest distances pooled over both directions; the 95th
/// percentile uses linear interpolation between order statistics.
fn brute_distances(a: &[(usize, usize)], b: &[(usize, usize)]) -> (f64, f64) {
    let nearest = |p: &(usize, usize), set: &[(usize, usize)]| {
        set.iter()
            .map(|q| {
                let dy = p.0 as f64 - q.0 as f64;
                let dx = p.1 as f64 - q.1 as f64;
                (dy * dy + dx * dx).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let mut d: Vec<f64> = a.iter().map(|p| nearest(p, b)).chain(b.iter().map(|p| nearest(p, a))).collect();
    d.sort_by(f64::total_cmp);
    let rank = 0.95 * (d.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(d.len() - 1);
    let hd95 = d[lo] + (rank - lo as f64) * (d[hi] - d[lo]);
    (hd95, d.iter().sum::<f64>() / d.len() as f64)
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let p = rng.gen_range(0.05..0.6);
    loop {
        let m: Vec<bool> = (0..n).map(|_| rng.gen_bool(p)).collect();
        if m.iter().any(|&v| v) {
            return m;
        }
    }
}

fn metric_suite() -> bool {
    const S: usize = 16;
    let mut exact = 0;
    let mut identity = true;
    let mut worst = 0.0f64;
    for case in 0..METRIC_PAIRS {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let (ma, mb) = (random_mask(&mut rng, S * S), random_mask(&mut rng, S * S));
        let (sa, sb) = (surface_extract(&ma, S, S), surface_extract(&mb, S, S));
        let (oa, ob) = (brute_surface(&ma, S, S), brute_surface(&mb, S, S));
        let got = distance_pair(&sa, &sb, S, S);
        let (hd, asd) = brute_distances(&oa, &ob);
        worst = worst.max((got.hd95 - hd).abs()).max((got.asd - asd).abs());
        if sa == oa && sb == ob && got.flag == DistanceFlag::Valid && got.hd95 == hd && got.asd == asd {
            exact += 1;
        }
        let pred = labels(&mut rng, 1, S, S, 2).remove(0);
        let gt = labels(&mut rng, 1, S, S, 2).remove(0);
        for (d, j) in dsc(&pred, &gt, 2).into_iter().zip(jaccard(&pred, &gt, 2)) {
            identity &= close(d, 2.0 * j / (1.0 + j), 1e-12);
        }
    }
    report(
        4,
        "metric oracle",
        exact == METRIC_PAIRS && identity,
        &format!(
            "{exact}/{METRIC_PAIRS} mask pairs equal to the all-pairs oracle (max diff {worst:e}); dsc = 2j/(1+j) {}",
            if identity { "holds" } else { "violated" }
        ),
    )
}

// ---------------------------------------------------------- 5 to 8. end to end

struct SplitRun {
    seed: u64,
    data: Dataset,
    net: FoundationSegNet<f32>,
    base: TrainConfig,
    headline: SuiteResult,
    elapsed: Duration,
}

fn mean_dsc(log: &ExperimentLog, model: ModelKind) -> f64 {
    log.final_report(model).map_or(f64::NAN, |r| r.mean.dsc)
}

fn out_dir(seed: u64) -> PathBuf {
    workspace().join("target/acceptance").join(format!("seed-{seed}"))
}

fn headline_run(preset: &TrainConfig, seed: u64) -> SplitRun {
    let start = Instant::now();
    let data = Dataset::build(&SplitConfig { seed, ..SplitConfig::default() }).unwrap();
    let base = TrainConfig { data_seed: seed, ..preset.clone() };
    let (net, _) = pretrain_on::<f32>(&data, &base.pretrain).unwrap();
    let holdout = pretrain_holdout_report(&net, &data, HOLDOUT_SAMPLES).unwrap().mean.dsc;
    println!(
        "  seed {seed}: pretrained in {:.0}s, held-out pretraining-domain DSC {:.2}% (floor {:.0}%)",
        start.elapsed().as_secs_f64(),
        100.0 * holdout,
        100.0 * HOLDOUT_FLOOR
    );
    let strategies = [Strategy::Synfoc, Strategy::StandaloneFound, Strategy::StandaloneConv];
    let headline = run_suite(&base, &strategies, &data, Some(&net), suite_threads(), |s, _| {
        println!("  seed {seed}: {s} done at {:.0}s", start.elapsed().as_secs_f64());
    })
    .unwrap();
    let elapsed = start.elapsed();
    headline.write(&out_dir(seed).join("headline")).unwrap();
    SplitRun { seed, data, net, base, headline, elapsed }
}

fn synergy(run: &SplitRun) -> (bool, String) {
    let syn = mean_dsc(run.headline.log(Strategy::Synfoc).unwrap(), ModelKind::FoundStudent);
    let found = mean_dsc(run.headline.log(Strategy::StandaloneFound).unwrap(), ModelKind::FoundStudent);
    let conv = mean_dsc(run.headline.log(Strategy::StandaloneConv).unwrap(), ModelKind::ConvStudent);
    let pass = syn - found >= FOUND_MARGIN && syn - conv >= CONV_MARGIN && run.elapsed < SUITE_BUDGET;
    let detail = format!(
        "seed {}: synfoc foundation student {:.2}, standalone-found {:.2} ({:+.2}, need +{:.0}), standalone-conv {:.2} ({:+.2}, need +{:.0}); {:.1} min (limit {})",
        run.seed,
        100.0 * syn,
        100.0 * found,
        100.0 * (syn - found),
        100.0 * FOUND_MARGIN,
        100.0 * conv,
        100.0 * (syn - conv),
        100.0 * CONV_MARGIN,
        run.elapsed.as_secs_f64() / 60.0,
        SUITE_BUDGET.as_secs() / 60
    );
    (pass, detail)
}

fn end_to_end() -> bool {
    let preset = TrainConfig::load(&workspace().join("configs/acceptance.conf")).unwrap();
    let mut run = headline_run(&preset, PRIMARY_SEED);
    let (mut pass5, mut detail5) = synergy(&run);
    if !pass5 {
        println!("  margin missed ({detail5}); regenerating the split with seed {RETRY_SEED}");
        run = headline_run(&preset, RETRY_SEED);
        (pass5, detail5) = synergy(&run);
    }
    let mut all = report(5, "end-to-end synergy", pass5, &detail5);

    let syn_log = run.headline.log(Strategy::Synfoc).unwrap();
    let (pass6, detail6) = match syn_log.pseudo_label_quality() {
        Some((ens, best, conv, found)) => (
            ens >= best - ENSEMBLE_SLACK,
            format!(
                "time-averaged ensemble pseudo-label DSC {:.4} vs per-step best single {:.4} (conv {:.4}, foundation {:.4}), slack {ENSEMBLE_SLACK}",
                ens, best, conv, found
            ),
        ),
        None => (false, "no pseudo-label trace recorded".into()),
    };
    all &= report(6, "ensemble quality", pass6, &detail6);

    let start = Instant::now();
    let ablations = [
        Strategy::Constant,
        Strategy::Cps,
        Strategy::Linear,
        Strategy::SelfOnly,
        Strategy::MutualOnly,
        Strategy::Synfoc,
    ];
    let seed = run.seed;
    let rest = run_suite(&run.base, &ablations, &run.data, Some(&run.net), suite_threads(), |s, _| {
        println!("  seed {seed}: {s} done at {:.0}s", start.elapsed().as_secs_f64());
    })
    .unwrap();
    rest.write(&out_dir(seed).join("ablation")).unwrap();
    let smc = mean_dsc(syn_log, ModelKind::FoundStudent);
    let mut pass7 = true;
    let mut parts = vec![format!("smc {:.2}", 100.0 * smc)];
    for s in &ablations[..5] {
        let v = mean_dsc(rest.log(*s).unwrap(), ModelKind::FoundStudent);
        pass7 &= smc >= v - ABLATION_SLACK;
        parts.push(format!("{s} {:.2}", 100.0 * v));
    }
    all &= report(
        7,
        "strategy ablation",
        pass7,
        &format!("foundation student mean DSC: {} (slack {:.0} point)", parts.join(", "), 100.0 * ABLATION_SLACK),
    );

    let first = std::fs::read(out_dir(seed).join("headline/synfoc/log.csv")).unwrap();
    let second = std::fs::read(out_dir(seed).join("ablation/synfoc/log.csv")).unwrap();
    all &= report(
        8,
        "determinism",
        first == second,
        &format!(
            "two synfoc runs on seed {seed}: log.csv {} ({} and {} bytes)",
            if first == second { "byte-identical" } else { "differs" },
            first.len(),
            second.len()
        ),
    );
    all
}

fn main() {
    let mut all = gradient_suite();
    all &= fixture_suite();
    all &= invariant_suite();
    all &= metric_suite();
    if std::env::var_os("SYNFOC_ACCEPTANCE_QUICK").is_some() {
        println!("[SKIP] criteria 5 to 8: SYNFOC_ACCEPTANCE_QUICK is set");
    } else {
        all &= end_to_end();
    }
    if !all {
        std::process::exit(1);
    }
}
