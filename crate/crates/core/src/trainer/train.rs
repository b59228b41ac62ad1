use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Precision, TrainConfig};
use super::eval::{evaluate_models, mean_dice, EVAL_CHUNK};
use super::log::{EvalRecord, ExperimentLog, IterationRecord};
use crate::data::{
    build_split, generate_pretrain_sample, rng_for, stack_images, strong_augment, sub_seed, weak_augment, Dataset, Role,
    Sample, SplitConfig,
};
use crate::engine::{LabelMap, OptimizerState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_maps, MetricReport};
use crate::models::{
    pretrain_foundation, Bound, Checkpoint, ConvSegNet, FoundationSegNet, PretrainConfig, SegNet,
    TeacherStudentPair, CONV_WIDTHS, FOUNDATION_WIDTHS,
};
use crate::scalar::Scalar;
use crate::synfoc::{
    ce_dice, confidence_weight, consensus_entropy_loss, copy_paste, divergence_mse_loss,
    make_paste_mask, region_masks, supervised_loss, total_loss, unsupervised_loss, warmup_lambda,
    PasteMask, PseudoLabelBundle,
};

const STREAM_INIT_CONV: u64 = 1;
const STREAM_INIT_FOUND: u64 = 2;
const STREAM_BATCH: u64 = 3;
const STREAM_WEAK_LABELED: u64 = 4;
const STREAM_WEAK_UNLABELED: u64 = 5;
const STREAM_STRONG: u64 = 6;
const STREAM_PASTE: u64 = 7;
const STREAM_HOLDOUT: u64 = 8;

/// Teacher-student pairs of one run; a standalone run holds only one.
#[derive(Clone, Debug)]
pub struct Models<T> {
    pub conv: Option<TeacherStudentPair<ConvSegNet<T>>>,
    pub found: Option<TeacherStudentPair<FoundationSegNet<T>>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub models: Models<T>,
    pub conv_opt: Option<OptimizerState<T>>,
    pub found_opt: Option<OptimizerState<T>>,
    pub log: ExperimentLog,
}

impl<T: Scalar> TrainOutcome<T> {
    /// Students, teachers and optimizer state in one file.
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "synfoc-run");
        ck.set_meta("strategy", cfg.strategy);
        ck.set_meta("iterations", self.log.records.len());
        ck.set_meta("lora_rank", cfg.lora_rank);
        if let Some(c) = &self.models.conv {
            ck.set_meta("classes", c.student.classes());
            ck.insert_net("conv.student", &c.student);
            ck.insert_net("conv.teacher", &c.teacher);
        }
        if let Some(f) = &self.models.found {
            ck.set_meta("classes", f.student.classes());
            ck.insert_net("found.student", &f.student);
            ck.insert_net("found.teacher", &f.teacher);
        }
        if let Some(o) = &self.conv_opt {
            ck.insert_optimizer("opt.conv", o);
        }
        if let Some(o) = &self.found_opt {
            ck.insert_optimizer("opt.found", o);
        }
        ck
    }
}

/// Dataset named by the config, or the default split generated from
/// `data_seed`.
pub fn load_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    match &cfg.data {
        Some(dir) => Dataset::load(dir),
        None => Dataset::generate(build_split(&SplitConfig {
            seed: cfg.data_seed,
            ..SplitConfig::default()
        })?),
    }
}

/// Pretrain a fresh foundation network on the dataset's pretraining corpus.
pub fn pretrain_on<T: Scalar>(
    data: &Dataset,
    cfg: &PretrainConfig,
) -> Result<(FoundationSegNet<T>, Vec<f64>)> {
    let mut net = FoundationSegNet::new(
        data.classes(),
        FOUNDATION_WIDTHS,
        &mut rng_for(cfg.seed, &[STREAM_INIT_FOUND]),
    );
    let corpus = data.samples(&data.manifest.ids(Role::Pretrain));
    let losses = pretrain_foundation(&mut net, &corpus, cfg)?;
    Ok((net, losses))
}

/// Fresh pretraining-domain samples, labeled like the pretraining corpus,
/// for judging the pretrained network. Seeds come from a stream the split
/// never uses.
pub fn pretrain_holdout(data: &Dataset, count: usize) -> Result<Vec<Sample>> {
    let cfg = &data.manifest.config;
    let domains = &cfg.pretrain_domains;
    if domains.is_empty() {
        return Err(Error::Config("split has no pretraining domains".into()));
    }
    (0..count)
        .map(|i| {
            let j = i % domains.len();
            let seed = sub_seed(cfg.seed, &[STREAM_HOLDOUT, i as u64]);
            generate_pretrain_sample(seed, &domains[j], cfg.domains.len() + j, cfg.classes, cfg.size)
        })
        .collect()
}

/// Test metrics of `net` on [`pretrain_holdout`] samples.
pub fn pretrain_holdout_report<T: Scalar, N: SegNet<T>>(net: &N, data: &Dataset, count: usize) -> Result<MetricReport> {
    let samples = pretrain_holdout(data, count)?;
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        preds.extend(net.predict_probs(&stack_images(&refs)?.cast::<T>())?.argmax_channels()?);
    }
    let gts: Vec<LabelMap> = samples.iter().map(|s| s.label.clone()).collect();
    let domains: Vec<usize> = samples.iter().map(|s| s.domain_id).collect();
    evaluate_maps(&preds, &gts, &domains, data.classes())
}

pub fn pretrained_checkpoint<T: Scalar>(net: &FoundationSegNet<T>, cfg: &PretrainConfig) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.set_meta("kind", "pretrained-foundation");
    ck.set_meta("classes", net.classes());
    ck.set_meta("lora_rank", cfg.adapter_rank);
    ck.insert_net("foundation", net);
    ck
}

fn meta_usize(ck: &Checkpoint, key: &str) -> Result<usize> {
    ck.meta(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format {
            what: "checkpoint",
            detail: format!("missing or invalid {key}"),
        })
}

pub fn load_pretrained<T: Scalar>(path: &Path) -> Result<FoundationSegNet<T>> {
    let ck = Checkpoint::load(path)?;
    if ck.meta("kind") != Some("pretrained-foundation") {
        return Err(Error::Format {
            what: "checkpoint",
            detail: format!("{} is not a pretrained foundation checkpoint", path.display()),
        });
    }
    let classes = meta_usize(&ck, "classes")?;
    let rank = meta_usize(&ck, "lora_rank")?;
    let mut rng = rng_for(0, &[]);
    let mut net = FoundationSegNet::new(classes, FOUNDATION_WIDTHS, &mut rng);
    net.attach_adapters(rank, &mut rng)?;
    ck.load_net("foundation", &mut net)?;
    Ok(net)
}

/// Softmax probabilities of `net` on `images`, resized to the image size,
/// using parameters already bound on `tape`.
fn probs_bound<T: Scalar, N: SegNet<T>>(
    net: &N,
    tape: &mut Tape<T>,
    bound: &Bound,
    images: &Tensor<T>,
) -> Result<Var> {
    let (_, _, h, w) = images.dims4("forward")?;
    net.check_input(h, w)?;
    let x = tape.constant(images.clone());
    let logits = net.forward_bound(tape, bound, x)?;
    let p = tape.softmax_channels(logits)?;
    if tape.shape(p)[2..] == [h, w] {
        return Ok(p);
    }
    tape.bilinear_resize(p, h, w)
}

fn draw_ids(ids: &[u64], count: usize, rng: &mut ChaCha8Rng) -> Vec<u64> {
    if count <= ids.len() {
        sample(rng, ids.len(), count).into_iter().map(|i| ids[i]).collect()
    } else {
        use rand::Rng;
        (0..count).map(|_| ids[rng.gen_range(0..ids.len())]).collect()
    }
}

fn stack_as<T: Scalar>(samples: &[Sample]) -> Result<Tensor<T>> {
    let refs: Vec<&Sample> = samples.iter().collect();
    Ok(stack_images(&refs)?.cast())
}

/// Mean per-instance DSC of predicted label maps against ground truth.
fn pseudo_label_dsc(pred: &[LabelMap], truth: &[Sample], classes: usize) -> f64 {
    pred.iter()
        .zip(truth)
        .map(|(p, s)| mean_dice(p, &s.label, classes))
        .sum::<f64>()
        / pred.len() as f64
}

fn step_params<T: Scalar, N: SegNet<T>>(
    net: &mut N,
    opt: &mut OptimizerState<T>,
    tape: &Tape<T>,
    bound: &Bound,
) -> Result<()> {
    let (mut params, grads) = net.params_mut().trainable_with_grads(tape, bound);
    opt.step(&mut params, &grads)
}

fn backbone_values<T: Scalar>(net: &FoundationSegNet<T>) -> Vec<Tensor<T>> {
    net.backbone_ids()
        .into_iter()
        .map(|id| net.params().get(id).value.clone())
        .collect()
}

/// Run `cfg.t_max` iterations of the configured strategy on `data`.
///
/// Strategies that involve the foundation network start from a clone of
/// `pretrained`, which must already carry adapters.
pub fn train_on<T: Scalar>(
    cfg: &TrainConfig,
    data: &Dataset,
    pretrained: Option<&FoundationSegNet<T>>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let strategy = cfg.strategy;
    let classes = data.classes();
    let size = data.size();
    let labeled = data.manifest.ids(Role::Labeled);
    let unlabeled = data.manifest.ids(Role::Unlabeled);
    if labeled.is_empty() || unlabeled.is_empty() {
        return Err(Error::Config("dataset lacks labeled or unlabeled samples".into()));
    }

    let mut conv = if strategy.uses_conv() {
        let net = ConvSegNet::new(classes, CONV_WIDTHS, &mut rng_for(cfg.seed, &[STREAM_INIT_CONV]));
        Some(TeacherStudentPair::new(net, cfg.ema_decay)?)
    } else {
        None
    };
    let mut found = if strategy.uses_found() {
        let net = pretrained
            .ok_or_else(|| {
                Error::Config(format!("strategy {strategy} needs a pretrained foundation network"))
            })?
            .clone();
        if !net.is_adapted() || net.classes() != classes {
            return Err(Error::Config(
                "pretrained foundation network lacks adapters or has the wrong class count".into(),
            ));
        }
        Some(TeacherStudentPair::new(net, cfg.ema_decay)?)
    } else {
        None
    };
    let frozen_snapshot = found.as_ref().map(|f| backbone_values(&f.student));
    let mut conv_opt = conv.as_ref().map(|_| OptimizerState::new(cfg.conv_optimizer));
    let mut found_opt = found.as_ref().map(|_| OptimizerState::new(cfg.found_optimizer));

    let mut log = ExperimentLog::default();
    log.flags.push(("strategy".into(), strategy.to_string()));
    for (k, v) in cfg.deviation_flags() {
        log.flags.push((k.to_string(), v));
    }
    let mut audits = 0usize;

    for t in 0..cfg.t_max {
        let batch_seed = sub_seed(cfg.seed, &[STREAM_BATCH, t as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
        let l_ids = draw_ids(&labeled, cfg.labeled_batch, &mut rng);
        let u_ids = draw_ids(&unlabeled, cfg.unlabeled_batch, &mut rng);

        // (1) views
        let xs: Vec<Sample> = l_ids
            .iter()
            .enumerate()
            .map(|(k, &id)| weak_augment(data.get(id), sub_seed(batch_seed, &[STREAM_WEAK_LABELED, k as u64])))
            .collect();
        let uw: Vec<Sample> = u_ids
            .iter()
            .enumerate()
            .map(|(k, &id)| weak_augment(data.get(id), sub_seed(batch_seed, &[STREAM_WEAK_UNLABELED, k as u64])))
            .collect();
        let us: Vec<Tensor<f32>> = uw
            .iter()
            .enumerate()
            .map(|(k, s)| strong_augment(&s.image, sub_seed(batch_seed, &[STREAM_STRONG, k as u64])))
            .collect();
        let x_w: Tensor<T> = stack_as(&xs)?;
        let u_w: Tensor<T> = stack_as(&uw)?;
        let y_w: Vec<LabelMap> = xs.iter().map(|s| s.label.clone()).collect();
        let masks: Vec<PasteMask> = (0..uw.len())
            .map(|k| make_paste_mask(size, size, cfg.paste_ratio, sub_seed(batch_seed, &[STREAM_PASTE, k as u64])))
            .collect::<Result<_>>()?;

        // (2) tape-free weak-view forwards
        let p_ut_t = conv.as_ref().map(|c| c.teacher.predict_probs(&u_w)).transpose()?;
        let p_ms_t = found.as_ref().map(|f| f.teacher.predict_probs(&u_w)).transpose()?;

        // (3) confidence, ratio, ensemble and weights
        let (q_w, w_c, confidences) = match strategy.alpha_rule(cfg.smc) {
            Some(rule) => {
                let p_ut_s = conv.as_ref().expect("two-model strategy").student.predict_probs(&u_w)?;
                let b = PseudoLabelBundle::build(
                    p_ut_t.clone().expect("conventional teacher"),
                    p_ms_t.clone().expect("foundation teacher"),
                    p_ut_s,
                    rule,
                    t,
                    cfg.t_max,
                    cfg.tau,
                    &masks,
                    cfg.compose_weight_map,
                )?;
                (b.q_ensemble, b.weight_map, b.confidences)
            }
            None => {
                let p = p_ut_t.as_ref().or(p_ms_t.as_ref()).expect("one model");
                let w = confidence_weight(p, cfg.tau, &masks, cfg.compose_weight_map)?;
                (p.argmax_channels()?, w, Vec::new())
            }
        };

        // (4) composed view
        let mut u_c_parts = Vec::with_capacity(uw.len());
        let mut q_c = Vec::with_capacity(uw.len());
        for (k, m) in masks.iter().enumerate() {
            let src = &xs[k % xs.len()];
            let (img, lab) = copy_paste(&src.image, &us[k], &src.label, &q_w[k], m)?;
            u_c_parts.push(img.reshape(&[1, 1, size, size])?);
            q_c.push(lab);
        }
        let u_c: Tensor<T> = Tensor::stack(&u_c_parts)?.cast();

        // (5) student forwards on the tape
        let mut tape = Tape::new();
        let conv_fw = match &conv {
            Some(c) => {
                let b = c.student.params().bind(&mut tape);
                let px = probs_bound(&c.student, &mut tape, &b, &x_w)?;
                let pc = probs_bound(&c.student, &mut tape, &b, &u_c)?;
                Some((b, px, pc))
            }
            None => None,
        };
        let found_fw = match &found {
            Some(f) => {
                let b = f.student.params().bind(&mut tape);
                let px = probs_bound(&f.student, &mut tape, &b, &x_w)?;
                let pc = probs_bound(&f.student, &mut tape, &b, &u_c)?;
                Some((b, px, pc))
            }
            None => None,
        };

        // (6) losses
        let zero = |tape: &mut Tape<T>| tape.constant(Tensor::scalar(T::zero()));
        let (l_x, l_u, l_c, l_d) = match (&conv_fw, &found_fw) {
            (Some((_, px_ut, pc_ut)), Some((_, px_ms, pc_ms))) => {
                let l_x = supervised_loss(&mut tape, *px_ut, *px_ms, &y_w)?;
                let l_u = unsupervised_loss(&mut tape, &q_c, *pc_ut, *pc_ms, &w_c)?;
                let (l_c, l_d) = if cfg.cdcr {
                    let r = region_masks(tape.value(*pc_ut), tape.value(*pc_ms))?;
                    (
                        consensus_entropy_loss(&mut tape, *pc_ut, *pc_ms, &r.m_consensus, cfg.s_norm)?,
                        divergence_mse_loss(&mut tape, *pc_ut, *pc_ms, &r.m_divergence, cfg.s_norm)?,
                    )
                } else {
                    (zero(&mut tape), zero(&mut tape))
                };
                (l_x, l_u, l_c, l_d)
            }
            (Some((_, px, pc)), None) | (None, Some((_, px, pc))) => {
                let (n, _, h, w) = x_w.dims4("labeled batch")?;
                let l_x = ce_dice(&mut tape, &y_w, *px, &Tensor::ones(&[n, 1, h, w]))?;
                let l_u = ce_dice(&mut tape, &q_c, *pc, &w_c)?;
                (l_x, l_u, zero(&mut tape), zero(&mut tape))
            }
            (None, None) => unreachable!("every strategy trains a model"),
        };
        let total = total_loss(&mut tape, l_x, l_u, l_c, l_d, t, cfg.t_max)?;
        let value = |tape: &Tape<T>, v: Var| tape.value(v).item().as_f64();
        let (vx, vu, vc, vd, vt) = (
            value(&tape, l_x),
            value(&tape, l_u),
            value(&tape, l_c),
            value(&tape, l_d),
            value(&tape, total),
        );
        if !vt.is_finite() {
            return Err(Error::NonFinite {
                iteration: t,
                batch_seed,
                detail: format!(
                    "l_x={vx} l_u={vu} l_c={vc} l_d={vd}; labeled ids {l_ids:?}, unlabeled ids {u_ids:?}"
                ),
            });
        }

        // (7) one backward, one step per model
        tape.backward(total)?;
        let factor = cfg.lr_factor(t);
        if let Some(o) = &mut conv_opt {
            o.config = cfg.conv_optimizer.with_lr(cfg.conv_optimizer.lr() * factor);
        }
        if let Some(o) = &mut found_opt {
            o.config = cfg.found_optimizer.with_lr(cfg.found_optimizer.lr() * factor);
        }
        if let (Some(c), Some((b, _, _)), Some(o)) = (&mut conv, &conv_fw, &mut conv_opt) {
            step_params(&mut c.student, o, &tape, b)?;
        }
        if let (Some(f), Some((b, _, _)), Some(o)) = (&mut found, &found_fw, &mut found_opt) {
            step_params(&mut f.student, o, &tape, b)?;
        }
        drop(tape);

        // (8) teachers
        if let Some(c) = &mut conv {
            c.ema_update()?;
        }
        if let Some(f) = &mut found {
            f.ema_update()?;
        }

        // (9) record
        let pl = |p: &Option<Tensor<T>>| -> Result<Option<f64>> {
            p.as_ref()
                .map(|p| Ok(pseudo_label_dsc(&p.argmax_channels()?, &uw, classes)))
                .transpose()
        };
        log.push(IterationRecord {
            iteration: t,
            lambda: warmup_lambda(t, cfg.t_max),
            l_x: vx,
            l_u: vu,
            l_c: vc,
            l_d: vd,
            total: vt,
            phi_self: confidences.iter().map(|c| c.phi_self).collect(),
            phi_mut: confidences.iter().map(|c| c.phi_mut).collect(),
            alpha: confidences.iter().map(|c| c.alpha).collect(),
            pl_dsc_conv: pl(&p_ut_t)?,
            pl_dsc_found: pl(&p_ms_t)?,
            pl_dsc_ensemble: pseudo_label_dsc(&q_w, &uw, classes),
        });

        let done = t + 1;
        let periodic = cfg.eval_interval > 0 && done % cfg.eval_interval == 0;
        if periodic || done == cfg.t_max {
            if let (Some(f), Some(snap)) = (&found, &frozen_snapshot) {
                if backbone_values(&f.student) != *snap {
                    return Err(Error::Config(format!("frozen backbone changed by iteration {done}")));
                }
                audits += 1;
            }
            let models = Models {
                conv: conv.clone(),
                found: found.clone(),
            };
            for (model, report) in evaluate_models(&models, data)? {
                log.evals.push(EvalRecord {
                    iteration: done,
                    model,
                    report,
                });
            }
        }
    }
    if frozen_snapshot.is_some() {
        log.flags.push(("backbone_audit".into(), format!("passed {audits} times")));
    }
    Ok(TrainOutcome {
        models: Models { conv, found },
        conv_opt,
        found_opt,
        log,
    })
}

/// Load data and (when needed) the pretrained foundation checkpoint from
/// the paths in `cfg`, then train in the configured precision. Returns the
/// log and the run checkpoint.
pub fn train(cfg: &TrainConfig) -> Result<(ExperimentLog, Checkpoint)> {
    let data = load_dataset(cfg)?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, &data),
        Precision::F64 => train_typed::<f64>(cfg, &data),
    }
}

fn train_typed<T: Scalar>(cfg: &TrainConfig, data: &Dataset) -> Result<(ExperimentLog, Checkpoint)> {
    let pretrained = if cfg.strategy.uses_found() {
        let path = cfg.foundation_ckpt.as_ref().ok_or_else(|| {
            Error::Config(format!("strategy {} needs foundation_ckpt", cfg.strategy))
        })?;
        Some(load_pretrained::<T>(path)?)
    } else {
        None
    };
    let out = train_on(cfg, data, pretrained.as_ref())?;
    let ck = out.checkpoint(cfg);
    Ok((out.log, ck))
}


