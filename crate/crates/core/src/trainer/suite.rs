use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::config::{Strategy, TrainConfig};
use super::log::{ExperimentLog, ModelKind};
use super::train::train_on;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::MetricSummary;
use crate::models::FoundationSegNet;
use crate::scalar::Scalar;

/// Logs of one strategy sweep, in run order.
#[derive(Clone, Debug, Default)]
pub struct SuiteResult {
    pub runs: Vec<(Strategy, ExperimentLog)>,
}

impl SuiteResult {
    pub fn log(&self, s: Strategy) -> Option<&ExperimentLog> {
        self.runs.iter().find(|(k, _)| *k == s).map(|(_, l)| l)
    }

    /// Final mean test metrics of `model` under `s`.
    pub fn summary(&self, s: Strategy, model: ModelKind) -> Option<MetricSummary> {
        self.log(s)?.final_report(model).map(|r| r.mean)
    }

    /// One row per strategy: final mean DSC, Jaccard, HD95 and ASD of the
    /// conventional and the foundation student, blank when absent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "strategy,conv_dsc,conv_jaccard,conv_hd95,conv_asd,found_dsc,found_jaccard,found_hd95,found_asd\n",
        );
        for (s, log) in &self.runs {
            out.push_str(s.name());
            for kind in [ModelKind::ConvStudent, ModelKind::FoundStudent] {
                match log.final_report(kind) {
                    Some(r) => {
                        let m = r.mean;
                        let _ = write!(out, ",{},{},{},{}", m.dsc, m.jaccard, m.hd95, m.asd);
                    }
                    None => out.push_str(",,,,"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| strategy | model | DSC % | Jaccard % | HD95 px | ASD px |\n|---|---|---|---|---|---|\n");
        for (s, log) in &self.runs {
            for kind in ModelKind::ALL {
                if let Some(r) = log.final_report(kind) {
                    let m = r.mean;
                    let _ = writeln!(
                        out,
                        "| {s} | {} | {:.2} | {:.2} | {:.2} | {:.2} |",
                        kind.name(),
                        100.0 * m.dsc,
                        100.0 * m.jaccard,
                        m.hd95,
                        m.asd
                    );
                }
            }
        }
        out
    }

    /// `results.csv`, `summary.md` and one sub-directory of logs per run.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("results.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let md = dir.join("summary.md");
        std::fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))?;
        for (s, log) in &self.runs {
            log.write(&dir.join(s.name()))?;
        }
        Ok(())
    }
}

/// Worker count for [`run_suite`]: `SYNFOC_THREADS` when set and positive,
/// otherwise 1.
pub fn suite_threads() -> usize {
    std::env::var("SYNFOC_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

/// Train every strategy in `strategies` from `base`, sharing one pretrained
/// foundation network. Up to `threads` runs proceed at once; results keep
/// the order of `strategies` and do not depend on `threads`.
pub fn run_suite<T: Scalar>(
    base: &TrainConfig,
    strategies: &[Strategy],
    data: &Dataset,
    pretrained: Option<&FoundationSegNet<T>>,
    threads: usize,
    progress: impl FnMut(Strategy, &ExperimentLog) + Send,
) -> Result<SuiteResult> {
    let next = AtomicUsize::new(0);
    let progress = Mutex::new(progress);
    let slots: Vec<Mutex<Option<Result<ExperimentLog>>>> = strategies.iter().map(|_| Mutex::new(None)).collect();
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&s) = strategies.get(i) else { break };
        let cfg = TrainConfig {
            strategy: s,
            ..base.clone()
        };
        let out = train_on(&cfg, data, pretrained).map(|o| o.log);
        if let Ok(log) = &out {
            (progress.lock().expect("progress lock"))(s, log);
        }
        *slots[i].lock().expect("slot lock") = Some(out);
    };
    std::thread::scope(|scope| {
        for _ in 1..threads.clamp(1, strategies.len().max(1)) {
            scope.spawn(worker);
        }
        worker();
    });
    let mut result = SuiteResult::default();
    for (slot, &s) in slots.into_iter().zip(strategies) {
        let log = slot.into_inner().expect("slot lock").expect("every strategy ran")?;
        result.runs.push((s, log));
    }
    Ok(result)
}
