//! Monte Carlo replicate studies: simulate, fit, and summarize.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VcmmError};
use crate::io::{fmt_f64, write_json};
use crate::model::{FitConfig, Formulation};
use crate::penalized::{compute_path, default_lambda_grid, support, Criterion};
use crate::simulate::{
    replicate_seed, selection_metrics, simulate_anova, simulate_genetic, AnovaDesign, GeneticDesign,
    SelectionMetrics, Simulated,
};
use crate::solver::fit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mmla1,
    Mmla2,
    PathAic,
    PathBic,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mmla1 => "mmla1",
            Self::Mmla2 => "mmla2",
            Self::PathAic => "path-aic",
            Self::PathBic => "path-bic",
        }
    }

    pub fn criterion(self) -> Option<Criterion> {
        match self {
            Self::PathAic => Some(Criterion::Aic),
            Self::PathBic => Some(Criterion::Bic),
            _ => None,
        }
    }
}

impl FromStr for Method {
    type Err = VcmmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmla1" => Ok(Self::Mmla1),
            "mmla2" => Ok(Self::Mmla2),
            "path-aic" => Ok(Self::PathAic),
            "path-bic" => Ok(Self::PathBic),
            _ => Err(VcmmError::domain(format!(
                "unknown method {s:?}; expected mmla1, mmla2, path-aic or path-bic"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "design", rename_all = "lowercase")]
pub enum StudyDesign {
    Anova(AnovaDesign),
    Genetic(GeneticDesign),
}

impl StudyDesign {
    /// Draw the dataset for a given seed; the design's own seed is ignored.
    pub fn simulate(&self, seed: u64) -> Result<Simulated> {
        match self {
            Self::Anova(d) => simulate_anova(&AnovaDesign { seed, ..d.clone() }),
            Self::Genetic(d) => simulate_genetic(&GeneticDesign { seed, ..d.clone() }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub design: StudyDesign,
    pub replicates: usize,
    pub method: Method,
    /// Base seed; replicate `r` uses [`replicate_seed`]`(seed, r)`.
    pub seed: u64,
    pub fit: FitConfig,
    pub path_points: usize,
    pub path_ratio: f64,
}

impl StudyConfig {
    pub fn new(design: StudyDesign, replicates: usize, method: Method, seed: u64) -> Self {
        Self {
            design,
            replicates,
            method,
            seed,
            fit: FitConfig::default(),
            path_points: 50,
            path_ratio: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: usize,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub converged: bool,
    pub runtime_secs: f64,
    pub beta: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub lambda: f64,
    /// Blocks with nonzero fitted variance (path methods only).
    pub support: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub method: Method,
    pub replicates: usize,
    pub failed: usize,
    pub not_converged: usize,
    pub truth_beta: Vec<f64>,
    pub truth_sigma2: Vec<f64>,
    pub runtime_mean: f64,
    /// `None` with fewer than two successful replicates.
    pub runtime_sd: Option<f64>,
    pub beta_mean: Vec<f64>,
    pub beta_sd: Option<Vec<f64>>,
    pub sigma2_mean: Vec<f64>,
    pub sigma2_sd: Option<Vec<f64>>,
    /// Mean over replicates of `|beta_hat - beta|^2 / p`.
    pub mse_beta: f64,
    pub selection: Option<SelectionMetrics>,
}

#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub records: Vec<ReplicateRecord>,
    pub summary: StudySummary,
}

impl StudyOutcome {
    pub fn any_failed(&self) -> bool {
        self.summary.failed > 0
    }
}

fn run_one(cfg: &StudyConfig, index: usize) -> ReplicateRecord {
    let seed = replicate_seed(cfg.seed, index as u64);
    let start = Instant::now();
    let result = cfg.design.simulate(seed).and_then(|sim| {
        let data = &sim.data;
        match cfg.method {
            Method::Mmla1 | Method::Mmla2 => {
                let form = if cfg.method == Method::Mmla1 { Formulation::F1 } else { Formulation::F2 };
                fit(form, data, &cfg.fit).map(|f| (f, None))
            }
            Method::PathAic | Method::PathBic => {
                let criterion = cfg.method.criterion().expect("path method");
                let grid = default_lambda_grid(data, &cfg.fit, cfg.path_points, cfg.path_ratio)?;
                let path = compute_path(data, &grid, &cfg.fit)?;
                let k = path.selected(criterion);
                let chosen = path.fits.into_iter().nth(k).expect("selected index in range");
                let supp = support(&chosen.params.sigma2);
                Ok((chosen, Some(supp)))
            }
        }
    });
    let runtime_secs = start.elapsed().as_secs_f64();
    match result {
        Ok((f, supp)) => ReplicateRecord {
            index,
            seed,
            ok: true,
            error: None,
            converged: f.converged,
            runtime_secs,
            beta: f.params.beta.iter().copied().collect(),
            sigma2: f.params.sigma2.iter().copied().collect(),
            lambda: f.lambda,
            support: supp,
        },
        Err(e) => ReplicateRecord {
            index,
            seed,
            ok: false,
            error: Some(e.to_string()),
            converged: false,
            runtime_secs,
            beta: Vec::new(),
            sigma2: Vec::new(),
            lambda: f64::NAN,
            support: None,
        },
    }
}

fn mean_sd(columns: &[Vec<f64>]) -> (Vec<f64>, Option<Vec<f64>>) {
    let r = columns.len();
    if r == 0 {
        return (Vec::new(), None);
    }
    let k = columns[0].len();
    let mean: Vec<f64> = (0..k)
        .map(|j| columns.iter().map(|c| c[j]).sum::<f64>() / r as f64)
        .collect();
    let sd = (r > 1).then(|| {
        (0..k)
            .map(|j| {
                let ss: f64 = columns.iter().map(|c| (c[j] - mean[j]).powi(2)).sum();
                (ss / (r - 1) as f64).sqrt()
            })
            .collect()
    });
    (mean, sd)
}

/// Run all replicates on the current rayon pool. Failures are recorded in the
/// outcome rather than returned; only an invalid design is an error.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyOutcome> {
    if cfg.replicates == 0 {
        return Err(VcmmError::domain("replicate count must be positive"));
    }
    cfg.fit.validate()?;
    // Validates the design and provides the truth.
    let reference = cfg.design.simulate(cfg.seed)?;
    let records: Vec<ReplicateRecord> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| run_one(cfg, r))
        .collect();
    let ok: Vec<&ReplicateRecord> = records.iter().filter(|r| r.ok).collect();
    let truth_beta: Vec<f64> = reference.truth.beta.iter().copied().collect();
    let truth_sigma2: Vec<f64> = reference.truth.sigma2.iter().copied().collect();
    let (runtime, runtime_sd) = mean_sd(&ok.iter().map(|r| vec![r.runtime_secs]).collect::<Vec<_>>());
    let (beta_mean, beta_sd) = mean_sd(&ok.iter().map(|r| r.beta.clone()).collect::<Vec<_>>());
    let (sigma2_mean, sigma2_sd) = mean_sd(&ok.iter().map(|r| r.sigma2.clone()).collect::<Vec<_>>());
    let mse_beta = if ok.is_empty() {
        f64::NAN
    } else {
        ok.iter()
            .map(|r| {
                r.beta.iter().zip(&truth_beta).map(|(b, t)| (b - t).powi(2)).sum::<f64>()
                    / truth_beta.len() as f64
            })
            .sum::<f64>()
            / ok.len() as f64
    };
    let selection = cfg.method.criterion().map(|_| {
        let truth: BTreeSet<usize> = support(&reference.truth.sigma2).into_iter().collect();
        let fitted: Vec<BTreeSet<usize>> = ok
            .iter()
            .map(|r| r.support.clone().unwrap_or_default().into_iter().collect())
            .collect();
        selection_metrics(&truth, &fitted)
    });
    let summary = StudySummary {
        method: cfg.method,
        replicates: cfg.replicates,
        failed: records.len() - ok.len(),
        not_converged: ok.iter().filter(|r| !r.converged).count(),
        truth_beta,
        truth_sigma2,
        runtime_mean: runtime.first().copied().unwrap_or(f64::NAN),
        runtime_sd: runtime_sd.map(|v| v[0]),
        beta_mean,
        beta_sd,
        sigma2_mean,
        sigma2_sd,
        mse_beta,
        selection,
    };
    Ok(StudyOutcome { records, summary })
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|source| VcmmError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Write `replicates.csv`, `summary.csv`, `summary.json` and, for path
/// methods, `selection.csv` into `dir`.
pub fn write_study(dir: &Path, outcome: &StudyOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| VcmmError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let s = &outcome.summary;
    let p = s.truth_beta.len();
    let m = s.truth_sigma2.len();
    let mut param_cols: Vec<String> = (1..=p).map(|k| format!("beta_{k}")).collect();
    param_cols.extend((1..=m).map(|k| format!("sigma2_{k}")));

    let mut lines = vec![format!(
        "replicate,seed,ok,converged,runtime_secs,lambda,{},support,error",
        param_cols.join(",")
    )];
    for r in &outcome.records {
        let params: Vec<String> = if r.ok {
            r.beta.iter().chain(&r.sigma2).map(|&v| fmt_f64(v)).collect()
        } else {
            vec![String::new(); p + m]
        };
        let support = r
            .support
            .as_ref()
            .map(|s| s.iter().map(|i| (i + 1).to_string()).collect::<Vec<_>>().join(" "))
            .unwrap_or_default();
        let error = r.error.as_deref().unwrap_or("").replace(['"', ',', '\n'], " ");
        lines.push(format!(
            "{},{},{},{},{},{},{},{},{}",
            r.index,
            r.seed,
            r.ok,
            r.converged,
            fmt_f64(r.runtime_secs),
            if r.ok { fmt_f64(r.lambda) } else { String::new() },
            params.join(","),
            support,
            error
        ));
    }
    write_lines(&dir.join("replicates.csv"), &lines)?;

    let truth: Vec<String> = s.truth_beta.iter().chain(&s.truth_sigma2).map(|&v| fmt_f64(v)).collect();
    let mean: Vec<String> = s.beta_mean.iter().chain(&s.sigma2_mean).map(|&v| fmt_f64(v)).collect();
    let sd: Vec<String> = match (&s.beta_sd, &s.sigma2_sd) {
        (Some(b), Some(v)) => b.iter().chain(v).map(|&x| fmt_f64(x)).collect(),
        _ => vec![String::new(); p + m],
    };
    let summary = vec![
        format!("statistic,method,replicates,failed,runtime_secs,{}", param_cols.join(",")),
        format!("truth,{},{},{},,{}", s.method.name(), s.replicates, s.failed, truth.join(",")),
        format!(
            "mean,{},{},{},{},{}",
            s.method.name(),
            s.replicates,
            s.failed,
            fmt_f64(s.runtime_mean),
            mean.join(",")
        ),
        format!(
            "sd,{},{},{},{},{}",
            s.method.name(),
            s.replicates,
            s.failed,
            opt(s.runtime_sd),
            sd.join(",")
        ),
    ];
    write_lines(&dir.join("summary.csv"), &summary)?;

    if let Some(sel) = &s.selection {
        write_lines(
            &dir.join("selection.csv"),
            &[
                "method,replicates,true_positive,false_positive,exact,over".to_string(),
                format!(
                    "{},{},{},{},{},{}",
                    s.method.name(),
                    s.replicates - s.failed,
                    fmt_f64(sel.true_positive),
                    fmt_f64(sel.false_positive),
                    fmt_f64(sel.exact),
                    fmt_f64(sel.over)
                ),
            ],
        )?;
    }
    write_json(&dir.join("summary.json"), s)
}
