//! Experiment harness behind the `pdpha` binary: method tokens, per-method
//! runs with per-instance timing, and evaluation reports with gaps against a
//! reference method.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use pdpha_core::baselines::{brute_force, exact_dp, nearest_neighbor, simulated_annealing, SAConfig};
use pdpha_core::decoder::{best_of_samples, encode_chunk, greedy_chunk};
use pdpha_core::env::RouteRecord;
use pdpha_core::instances::Instance;
use pdpha_core::model::PolicyModel;
use rayon::prelude::*;

/// First line of every report file.
pub const REPORT_MAGIC: &str = "# pdpha-report v1";

/// A solver named on the command line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Method {
    Dp,
    BruteForce,
    Annealing,
    NearestNeighbor,
    Greedy(Option<PathBuf>),
    Sample(usize, Option<PathBuf>),
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (head, ckpt) = match s.split_once(':') {
            Some((h, p)) if !p.is_empty() => (h, Some(PathBuf::from(p))),
            Some(_) => return Err(format!("method `{s}` has an empty checkpoint path")),
            None => (s, None),
        };
        let classic = |m: Method| if ckpt.is_some() { Err(format!("method `{head}` takes no checkpoint")) } else { Ok(m) };
        match head {
            "dp" => classic(Method::Dp),
            "bf" => classic(Method::BruteForce),
            "sa" => classic(Method::Annealing),
            "nn" => classic(Method::NearestNeighbor),
            "greedy" => Ok(Method::Greedy(ckpt)),
            _ => match head.strip_prefix("sample").map(str::parse::<usize>) {
                Some(Ok(k)) if k > 0 => Ok(Method::Sample(k, ckpt)),
                _ => Err(format!("unknown method `{s}` (expected dp, bf, sa, nn, greedy[:CKPT] or sampleN[:CKPT])")),
            },
        }
    }
}

impl fmt::Display for Method {
    /// Report label; checkpoints are named by file name only so reports do
    /// not depend on the directory they were produced in.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let with_ckpt = |f: &mut fmt::Formatter<'_>, head: String, ckpt: &Option<PathBuf>| match ckpt {
            Some(p) => write!(f, "{head}:{}", p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())),
            None => f.write_str(&head),
        };
        match self {
            Method::Dp => f.write_str("dp"),
            Method::BruteForce => f.write_str("bf"),
            Method::Annealing => f.write_str("sa"),
            Method::NearestNeighbor => f.write_str("nn"),
            Method::Greedy(c) => with_ckpt(f, "greedy".into(), c),
            Method::Sample(k, c) => with_ckpt(f, format!("sample{k}"), c),
        }
    }
}

impl Method {
    pub fn checkpoint(&self) -> Option<&Path> {
        match self {
            Method::Greedy(c) | Method::Sample(_, c) => c.as_deref(),
            _ => None,
        }
    }

    pub fn is_neural(&self) -> bool {
        matches!(self, Method::Greedy(_) | Method::Sample(..))
    }

    /// Binds a bare `greedy`/`sampleN` token to `ckpt`.
    pub fn with_default_checkpoint(self, ckpt: &Path) -> Self {
        match self {
            Method::Greedy(None) => Method::Greedy(Some(ckpt.to_path_buf())),
            Method::Sample(k, None) => Method::Sample(k, Some(ckpt.to_path_buf())),
            m => m,
        }
    }
}

/// Parses a comma-separated method list.
pub fn parse_methods(list: &str) -> std::result::Result<Vec<Method>, String> {
    list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    /// Worker threads; 1 runs everything on the calling thread.
    pub jobs: usize,
    /// Encoder batch size for the neural methods.
    pub batch: usize,
    pub seed: u64,
    /// Record wall-clock times; otherwise every time is reported as zero.
    pub timing: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            batch: 64,
            seed: 0,
            timing: true,
        }
    }
}

/// Seed of instance `k` for the stochastic methods (splitmix64 finalizer).
pub fn instance_seed(seed: u64, k: usize) -> u64 {
    let mut z = seed.wrapping_add((k as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Loads checkpoints once per path.
#[derive(Default)]
pub struct ModelCache {
    models: HashMap<PathBuf, Arc<PolicyModel>>,
}

impl ModelCache {
    pub fn get(&mut self, path: &Path) -> Result<Arc<PolicyModel>> {
        if let Some(m) = self.models.get(path) {
            return Ok(m.clone());
        }
        let (model, _) = PolicyModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        let model = Arc::new(model);
        self.models.insert(path.to_path_buf(), model.clone());
        Ok(model)
    }
}

/// Routes of one method, in instance order.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodRun {
    pub label: String,
    pub routes: Vec<RouteRecord>,
}

impl MethodRun {
    pub fn objectives(&self) -> Vec<f64> {
        self.routes.iter().map(|r| r.objective).collect()
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().context("building worker pool")
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

/// Runs `method` on every instance. Neural methods encode `opts.batch`
/// instances at a time; their per-instance time is the chunk's encoding time
/// split evenly plus the instance's own decoding time (greedy decoding is
/// batched, so it is split evenly too).
pub fn run_method(method: &Method, instances: &[Instance], opts: &RunOptions, models: &mut ModelCache) -> Result<MethodRun> {
    let label = method.to_string();
    let model = match method.checkpoint() {
        Some(p) => Some(models.get(p)?),
        None if method.is_neural() => bail!("method `{label}` needs a checkpoint (use `{label}:PATH`)"),
        None => None,
    };
    let pool = pool(opts.jobs)?;
    let solved: Vec<(Vec<usize>, f64)> = pool.install(|| -> Result<_> {
        match method {
            Method::Greedy(_) => {
                let model = model.as_deref().expect("checked above");
                let chunks: Vec<Vec<(Vec<usize>, f64)>> = instances
                    .par_chunks(opts.batch.max(1))
                    .map(|chunk| {
                        let (out, secs) = timed(|| greedy_chunk(model, chunk));
                        let per = secs / chunk.len() as f64;
                        Ok(out?.into_iter().map(|r| (r.perm, per)).collect())
                    })
                    .collect::<Result<_>>()?;
                Ok(chunks.into_iter().flatten().collect())
            }
            Method::Sample(samples, _) => {
                let model = model.as_deref().expect("checked above");
                let bs = opts.batch.max(1);
                let chunks: Vec<Vec<(Vec<usize>, f64)>> = instances
                    .par_chunks(bs)
                    .enumerate()
                    .map(|(c, chunk)| {
                        let (embs, secs) = timed(|| encode_chunk(model, chunk));
                        let embs = embs?;
                        let per = secs / chunk.len() as f64;
                        chunk
                            .iter()
                            .zip(&embs)
                            .enumerate()
                            .map(|(i, (inst, emb))| {
                                let seed = instance_seed(opts.seed, c * bs + i);
                                let (r, t) = timed(|| best_of_samples(model, inst, emb, *samples, seed));
                                Ok((r?.perm, per + t))
                            })
                            .collect()
                    })
                    .collect::<Result<_>>()?;
                Ok(chunks.into_iter().flatten().collect())
            }
            _ => instances
                .par_iter()
                .enumerate()
                .map(|(k, inst)| {
                    let (perm, t) = timed(|| -> Result<Vec<usize>> {
                        Ok(match method {
                            Method::Dp => exact_dp(inst)?.perm,
                            Method::BruteForce => brute_force(inst)?.perm,
                            Method::NearestNeighbor => nearest_neighbor(inst).perm,
                            Method::Annealing => {
                                let cfg = SAConfig {
                                    seed: instance_seed(opts.seed, k),
                                    ..SAConfig::default()
                                };
                                simulated_annealing(inst, &cfg)?.perm
                            }
                            Method::Greedy(_) | Method::Sample(..) => unreachable!(),
                        })
                    });
                    Ok((perm.with_context(|| format!("{label} on instance {k}"))?, t))
                })
                .collect(),
        }
    })?;
    let routes = instances
        .iter()
        .zip(solved)
        .map(|(inst, (perm, t))| RouteRecord::evaluate(inst, perm, Some(if opts.timing { t } else { 0.0 })))
        .collect();
    Ok(MethodRun { label, routes })
}

/// What gaps are measured against.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Reference {
    /// The per-instance minimum over all methods in the report.
    Best,
    Method(Method),
}

impl FromStr for Reference {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "best" {
            Ok(Reference::Best)
        } else {
            s.parse().map(Reference::Method)
        }
    }
}

impl fmt::Display for Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reference::Best => f.write_str("best"),
            Reference::Method(m) => m.fmt(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub instances: usize,
    pub feasible: usize,
    pub mean_objective: f64,
    /// Excess of the mean objective over the reference mean, in percent.
    pub gap_pct: f64,
    pub mean_time_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub reference: String,
    pub reference_mean: f64,
    pub rows: Vec<ReportRow>,
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    xs.sum::<f64>() / n as f64
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "method,instances,feasible,mean_objective,gap_pct,mean_time_s";

    pub fn from_runs(runs: &[MethodRun], reference: &Reference) -> Result<Self> {
        let count = runs.first().map_or(0, |r| r.routes.len());
        if runs.iter().any(|r| r.routes.len() != count) {
            bail!("every method must cover the same instances");
        }
        let ref_objs: Vec<f64> = match reference {
            Reference::Best => (0..count)
                .map(|k| {
                    runs.iter()
                        .map(|r| &r.routes[k])
                        .filter(|r| r.feasible)
                        .map(|r| r.objective)
                        .fold(f64::INFINITY, f64::min)
                })
                .collect(),
            Reference::Method(m) => {
                let label = m.to_string();
                runs.iter()
                    .find(|r| r.label == label)
                    .ok_or_else(|| anyhow!("reference `{label}` is not among the methods"))?
                    .objectives()
            }
        };
        let reference_mean = mean(ref_objs.iter().copied());
        let rows = runs
            .iter()
            .map(|r| {
                let mean_objective = mean(r.routes.iter().map(|x| x.objective));
                ReportRow {
                    method: r.label.clone(),
                    instances: r.routes.len(),
                    feasible: r.routes.iter().filter(|x| x.feasible).count(),
                    mean_objective,
                    gap_pct: 100.0 * (mean_objective / reference_mean - 1.0),
                    mean_time_s: mean(r.routes.iter().map(|x| x.time_s.unwrap_or(0.0))),
                }
            })
            .collect();
        Ok(Self {
            reference: reference.to_string(),
            reference_mean,
            rows,
        })
    }

    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Reference comment, column header and one line per method.
    pub fn write_block<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# reference: {}", self.reference)?;
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{:.6},{:.4},{:.6}",
                r.method, r.instances, r.feasible, r.mean_objective, r.gap_pct, r.mean_time_s
            )?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{REPORT_MAGIC}")?;
        self.write_block(w)
    }

    pub fn to_csv(&self) -> String {
        let mut out = Vec::new();
        self.write_csv(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("utf-8")
    }

    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>9}  {:>10}  {:>8}  {:>10}", "method", "feasible", "objective", "gap %", "time (s)");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>9}  {:>10.4}  {:>8.2}  {:>10.5}",
                r.method,
                format!("{}/{}", r.feasible, r.instances),
                r.mean_objective,
                r.gap_pct,
                r.mean_time_s
            );
        }
        let _ = writeln!(s, "gaps relative to {} (mean objective {:.4})", self.reference, self.reference_mean);
        s
    }
}

/// Runs every method (plus the reference method when it is not listed) and
/// builds the report.
pub fn bench(instances: &[Instance], methods: &[Method], reference: &Reference, opts: &RunOptions) -> Result<(EvalReport, Vec<MethodRun>)> {
    let mut methods = methods.to_vec();
    if let Reference::Method(m) = reference {
        if !methods.contains(m) {
            methods.push(m.clone());
        }
    }
    let mut models = ModelCache::default();
    let runs = methods
        .iter()
        .map(|m| run_method(m, instances, opts, &mut models))
        .collect::<Result<Vec<_>>>()?;
    Ok((EvalReport::from_runs(&runs, reference)?, runs))
}

/// One evaluation setting of a generalization experiment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Setting {
    pub n: usize,
    /// `None` for uniform coordinates, otherwise the Gaussian standard deviation.
    pub sdv: Option<f64>,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.sdv {
            None => write!(f, "n={} uniform", self.n),
            Some(s) => write!(f, "n={} gaussian sdv={s}", self.n),
        }
    }
}

/// Report file with one block per setting.
pub fn write_settings_csv<W: Write>(mut w: W, blocks: &[(Setting, EvalReport)]) -> std::io::Result<()> {
    writeln!(w, "{REPORT_MAGIC}")?;
    for (setting, report) in blocks {
        writeln!(w, "# setting: {setting}")?;
        report.write_block(&mut w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_tokens_round_trip() {
        for tok in ["dp", "bf", "sa", "nn", "greedy", "sample16", "greedy:m.pdpha", "sample1280:x.pdpha"] {
            assert_eq!(tok.parse::<Method>().unwrap().to_string(), tok);
        }
        assert_eq!("greedy:runs/a/m.pdpha".parse::<Method>().unwrap().to_string(), "greedy:m.pdpha");
        for bad in ["cplex", "sample0", "sample", "samplex:a", "dp:a", "greedy:"] {
            assert!(bad.parse::<Method>().is_err(), "{bad}");
        }
    }

    #[test]
    fn instance_seeds_differ() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|k| instance_seed(7, k)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(instance_seed(7, 0), instance_seed(8, 0));
    }
}
