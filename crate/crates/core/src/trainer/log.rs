use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// Diagnostics of one training iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lambda: f64,
    pub l_x: f64,
    pub l_u: f64,
    pub l_c: f64,
    pub l_d: f64,
    pub total: f64,
    pub phi_self: Vec<f64>,
    pub phi_mut: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Mean DSC of each teacher's and of the ensemble pseudo-labels on the
    /// unlabeled weak view, against generator ground truth.
    pub pl_dsc_conv: Option<f64>,
    pub pl_dsc_found: Option<f64>,
    pub pl_dsc_ensemble: f64,
}

/// Which network of a run a report describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    ConvStudent,
    ConvTeacher,
    FoundStudent,
    FoundTeacher,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::ConvStudent,
        ModelKind::ConvTeacher,
        ModelKind::FoundStudent,
        ModelKind::FoundTeacher,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::ConvStudent => "conv-student",
            ModelKind::ConvTeacher => "conv-teacher",
            ModelKind::FoundStudent => "found-student",
            ModelKind::FoundTeacher => "found-teacher",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    /// Iterations completed when evaluated.
    pub iteration: usize,
    pub model: ModelKind,
    pub report: MetricReport,
}

/// Append-only record of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentLog {
    pub records: Vec<IterationRecord>,
    pub evals: Vec<EvalRecord>,
    pub flags: Vec<(String, String)>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn joined(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

impl ExperimentLog {
    pub fn push(&mut self, r: IterationRecord) {
        self.records.push(r);
    }

    pub fn final_report(&self, model: ModelKind) -> Option<&MetricReport> {
        self.evals.iter().rev().find(|e| e.model == model).map(|e| &e.report)
    }

    /// Time-averaged pseudo-label DSC: (ensemble, per-iteration best single
    /// teacher, conventional teacher, foundation teacher).
    pub fn pseudo_label_quality(&self) -> Option<(f64, f64, f64, f64)> {
        if self.records.is_empty() {
            return None;
        }
        let n = self.records.len() as f64;
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for r in &self.records {
            let (c, f) = (r.pl_dsc_conv?, r.pl_dsc_found?);
            sums.0 += r.pl_dsc_ensemble;
            sums.1 += c.max(f);
            sums.2 += c;
            sums.3 += f;
        }
        Some((sums.0 / n, sums.1 / n, sums.2 / n, sums.3 / n))
    }

    pub fn log_csv(&self) -> String {
        let mut s = String::from(
            "iteration,lambda,l_x,l_u,l_c,l_d,total,phi_self,phi_mut,alpha,pl_dsc_conv,pl_dsc_found,pl_dsc_ensemble\n",
        );
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.lambda,
                r.l_x,
                r.l_u,
                r.l_c,
                r.l_d,
                r.total,
                joined(&r.phi_self),
                joined(&r.phi_mut),
                joined(&r.alpha),
                opt(r.pl_dsc_conv),
                opt(r.pl_dsc_found),
                r.pl_dsc_ensemble
            );
        }
        s
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("iteration,model,domain,samples,dsc,jaccard,hd95,asd,flagged\n");
        for e in &self.evals {
            for d in &e.report.domains {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{}",
                    e.iteration,
                    e.model.name(),
                    d.domain,
                    d.samples,
                    d.mean.dsc,
                    d.mean.jaccard,
                    d.mean.hd95,
                    d.mean.asd,
                    d.flagged
                );
            }
            let m = e.report.mean;
            let _ = writeln!(
                s,
                "{},{},mean,,{},{},{},{},",
                e.iteration,
                e.model.name(),
                m.dsc,
                m.jaccard,
                m.hd95,
                m.asd
            );
        }
        s
    }

    /// Write `log.csv`, `metrics.csv` and `flags.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let flags: String = self.flags.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        for (name, body) in [
            ("log.csv", self.log_csv()),
            ("metrics.csv", self.metrics_csv()),
            ("flags.txt", flags),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
