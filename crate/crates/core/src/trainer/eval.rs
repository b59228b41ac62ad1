use std::path::Path;

use super::log::ModelKind;
use super::train::Models;
use crate::data::{stack_images, Dataset, Role};
use crate::engine::LabelMap;
use crate::error::{Error, Result};
use crate::metrics::{dsc, evaluate_maps, MetricReport};
use crate::models::{
    Checkpoint, ConvSegNet, FoundationSegNet, SegNet, TeacherStudentPair, CONV_WIDTHS,
    FOUNDATION_WIDTHS,
};
use crate::scalar::Scalar;

/// Test images per forward pass.
pub const EVAL_CHUNK: usize = 16;

/// Mean foreground DSC of one label map.
pub fn mean_dice(pred: &LabelMap, gt: &LabelMap, classes: usize) -> f64 {
    let d = dsc(pred, gt, classes);
    d.iter().sum::<f64>() / d.len() as f64
}

/// Argmax label maps of `net` for the given samples, in order.
pub fn predict_labels<T: Scalar, N: SegNet<T>>(net: &N, data: &Dataset, ids: &[u64]) -> Result<Vec<LabelMap>> {
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(EVAL_CHUNK) {
        let images = stack_images(&data.samples(chunk))?.cast::<T>();
        out.extend(net.predict_probs(&images)?.argmax_channels()?);
    }
    Ok(out)
}

/// Score any labeler on every test sample of `data`.
pub fn evaluate_with(
    data: &Dataset,
    predict: impl Fn(&[u64]) -> Result<Vec<LabelMap>>,
) -> Result<MetricReport> {
    let ids = data.manifest.ids(Role::Test);
    let preds = predict(&ids)?;
    let gts: Vec<LabelMap> = ids.iter().map(|&id| data.get(id).label.clone()).collect();
    let domains: Vec<usize> = ids.iter().map(|&id| data.get(id).domain_id).collect();
    evaluate_maps(&preds, &gts, &domains, data.classes())
}

pub fn evaluate_net<T: Scalar, N: SegNet<T>>(net: &N, data: &Dataset) -> Result<MetricReport> {
    evaluate_with(data, |ids| predict_labels(net, data, ids))
}

/// Reports for every network present in `models`.
pub fn evaluate_models<T: Scalar>(models: &Models<T>, data: &Dataset) -> Result<Vec<(ModelKind, MetricReport)>> {
    let mut out = Vec::new();
    if let Some(c) = &models.conv {
        out.push((ModelKind::ConvStudent, evaluate_net(&c.student, data)?));
        out.push((ModelKind::ConvTeacher, evaluate_net(&c.teacher, data)?));
    }
    if let Some(f) = &models.found {
        out.push((ModelKind::FoundStudent, evaluate_net(&f.student, data)?));
        out.push((ModelKind::FoundTeacher, evaluate_net(&f.teacher, data)?));
    }
    Ok(out)
}

fn checkpoint_usize(ck: &Checkpoint, key: &str) -> Result<usize> {
    ck.meta(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format {
            what: "checkpoint",
            detail: format!("missing or invalid {key}"),
        })
}

/// Rebuild the networks stored in a run checkpoint.
pub fn models_from_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<Models<T>> {
    if ck.meta("kind") != Some("synfoc-run") {
        return Err(Error::Format {
            what: "checkpoint",
            detail: "not a training run checkpoint".into(),
        });
    }
    let classes = checkpoint_usize(ck, "classes")?;
    let mut rng = crate::data::rng_for(0, &[]);
    let conv = if ck.tensor("conv.student.head.weight").is_some() {
        let mut s = ConvSegNet::new(classes, CONV_WIDTHS, &mut rng);
        ck.load_net("conv.student", &mut s)?;
        let mut pair = TeacherStudentPair::new(s.clone(), 0.0)?;
        ck.load_net("conv.teacher", &mut pair.teacher)?;
        Some(pair)
    } else {
        None
    };
    let found = if ck.tensor("found.student.head.weight").is_some() {
        let rank = checkpoint_usize(ck, "lora_rank")?;
        let mut s = FoundationSegNet::new(classes, FOUNDATION_WIDTHS, &mut rng);
        s.attach_adapters(rank, &mut rng)?;
        ck.load_net("found.student", &mut s)?;
        let mut pair = TeacherStudentPair::new(s, 0.0)?;
        ck.load_net("found.teacher", &mut pair.teacher)?;
        Some(pair)
    } else {
        None
    };
    Ok(Models { conv, found })
}

/// Evaluate every network in the run checkpoint at `path` on `data`.
pub fn evaluate_checkpoint(path: &Path, data: &Dataset) -> Result<Vec<(ModelKind, MetricReport)>> {
    let ck = Checkpoint::load(path)?;
    evaluate_models(&models_from_checkpoint::<f32>(&ck)?, data)
}
