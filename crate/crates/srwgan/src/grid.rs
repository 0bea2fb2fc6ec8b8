//! Hyperparameter grid search.
//!
//! A grid names value lists for some of the searched hyperparameters. Every
//! value must lie in its search domain. Runs are independent:
//! run `i` trains with run index `i` under the base seed, so results do not
//! depend on the number of worker threads.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use srwgan_core::data::FeatureDataset;
use srwgan_core::evaluation::EvalReport;
use srwgan_core::model::{HyperParams, ALIGNMENT_GRID, HEAD_DIM_GRID, LAMBDA_GRID};
use srwgan_core::rng::{derive_seed, index, stream_rng, Stream};

use crate::commands::train_run;
use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const AXES: [&str; 7] = ["head_dim", "alpha", "beta", "delta", "lambda_a", "lambda_c", "lambda_m"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub head_dim: Option<Vec<usize>>,
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    #[serde(default)]
    pub beta: Option<Vec<f64>>,
    #[serde(default)]
    pub delta: Option<Vec<f64>>,
    #[serde(default)]
    pub lambda_a: Option<Vec<f64>>,
    #[serde(default)]
    pub lambda_c: Option<Vec<f64>>,
    #[serde(default)]
    pub lambda_m: Option<Vec<f64>>,
    /// Evaluate a seeded random subset of this many points instead of the
    /// full Cartesian product.
    #[serde(default)]
    pub sample: Option<usize>,
}

/// One point: the value of every axis, in [`AXES`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub index: usize,
    pub values: [f64; 7],
}

impl GridPoint {
    pub fn apply(&self, h: &mut HyperParams) {
        let v = self.values;
        h.head_dim = v[0] as usize;
        h.alignment.alpha = v[1];
        h.alignment.beta = v[2];
        h.alignment.delta = v[3];
        h.reg.lambda_a = v[4];
        h.reg.lambda_c = v[5];
        h.reg.lambda_m = v[6];
    }
}

fn in_domain(v: f64, grid: &[f64]) -> bool {
    grid.iter().any(|g| (g - v).abs() <= 1e-12 * g.abs())
}

impl GridSpec {
    fn axes(&self) -> [Option<Vec<f64>>; 7] {
        [
            self.head_dim.as_ref().map(|v| v.iter().map(|&x| x as f64).collect()),
            self.alpha.clone(),
            self.beta.clone(),
            self.delta.clone(),
            self.lambda_a.clone(),
            self.lambda_c.clone(),
            self.lambda_m.clone(),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let axes = self.axes();
        if axes.iter().all(Option::is_none) {
            return Err(Error::Config("empty grid: no axis given".into()));
        }
        for (name, axis) in AXES.iter().zip(&axes) {
            let Some(values) = axis else { continue };
            if values.is_empty() {
                return Err(Error::Config(format!("empty grid: axis {name} has no values")));
            }
            for &v in values {
                let ok = match *name {
                    "head_dim" => HEAD_DIM_GRID.contains(&(v as usize)),
                    "alpha" | "beta" | "delta" => in_domain(v, &ALIGNMENT_GRID),
                    _ => in_domain(v, &LAMBDA_GRID),
                };
                if !ok {
                    return Err(Error::Config(format!("{name} = {v} is outside the search domain")));
                }
            }
        }
        if self.sample == Some(0) {
            return Err(Error::Config("empty grid: sample = 0".into()));
        }
        Ok(())
    }

    /// Points of the Cartesian product, first axis slowest. Axes without
    /// values keep the base value.
    pub fn points(&self, base: &HyperParams, seed: u64) -> Result<Vec<GridPoint>> {
        self.validate()?;
        let b = base;
        let defaults = [
            b.head_dim as f64,
            b.alignment.alpha,
            b.alignment.beta,
            b.alignment.delta,
            b.reg.lambda_a,
            b.reg.lambda_c,
            b.reg.lambda_m,
        ];
        let axes: Vec<Vec<f64>> =
            self.axes().into_iter().zip(defaults).map(|(a, d)| a.unwrap_or_else(|| vec![d])).collect();
        let mut points = vec![[0.0; 7]];
        for (k, axis) in axes.iter().enumerate() {
            points = points
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |&v| {
                        let mut q = p;
                        q[k] = v;
                        q
                    })
                })
                .collect();
        }
        let mut chosen: Vec<usize> = (0..points.len()).collect();
        if let Some(k) = self.sample.filter(|&k| k < points.len()) {
            let mut rng = stream_rng(seed, 0, Stream::Shots);
            for i in 0..k {
                let j = i + index(&mut rng, chosen.len() - i);
                chosen.swap(i, j);
            }
            chosen.truncate(k);
            chosen.sort_unstable();
        }
        Ok(chosen.into_iter().map(|i| GridPoint { index: i, values: points[i] }).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub rank: usize,
    pub point: GridPoint,
    pub report: EvalReport,
}

/// Ranking key: `H` where the mode has one, unseen accuracy otherwise.
fn score(r: &EvalReport) -> f64 {
    r.harmonic.unwrap_or(r.unseen)
}

/// Worker count from `SRWGAN_THREADS`, defaulting to the available cores.
pub fn thread_count() -> usize {
    std::env::var("SRWGAN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Trains and evaluates every point, ranked by `H` descending (ties by
/// point index).
pub fn run_grid(base: &RunConfig, spec: &GridSpec, ds: &FeatureDataset, threads: usize) -> Result<Vec<GridResult>> {
    base.validate()?;
    let points = spec.points(&base.train.hyper, base.train.seed)?;
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(points.len()));
    let first_error = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, points.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(point) = points.get(i) else { break };
                if first_error.lock().unwrap().is_some() {
                    break;
                }
                let mut cfg = base.clone();
                point.apply(&mut cfg.train.hyper);
                cfg.train.run_index = point.index as u64;
                cfg.eval.seed = derive_seed(base.eval.seed, point.index as u64);
                match train_run(&cfg, ds, None) {
                    Ok((_, report)) => results.lock().unwrap().push((*point, report)),
                    Err(e) => {
                        first_error.lock().unwrap().get_or_insert(e);
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    let mut rows = results.into_inner().unwrap();
    rows.sort_by(|a, b| score(&b.1).total_cmp(&score(&a.1)).then(a.0.index.cmp(&b.0.index)));
    Ok(rows.into_iter().enumerate().map(|(i, (point, report))| GridResult { rank: i + 1, point, report }).collect())
}

pub const GRID_CSV_HEADER: &str =
    "rank,run_index,head_dim,alpha,beta,delta,lambda_a,lambda_c,lambda_m,unseen,seen,harmonic";

pub fn grid_csv(results: &[GridResult]) -> String {
    let mut s = format!("{GRID_CSV_HEADER}\n");
    for r in results {
        let v = r.point.values;
        let o = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.rank,
            r.point.index,
            v[0] as usize,
            v[1],
            v[2],
            v[3],
            v[4],
            v[5],
            v[6],
            r.report.unseen,
            o(r.report.seen),
            o(r.report.harmonic)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_has_four_points() {
        let spec = GridSpec { lambda_c: Some(vec![1.0, 0.5]), lambda_m: Some(vec![0.1, 0.01]), ..Default::default() };
        let pts = spec.points(&HyperParams::default(), 0).unwrap();
        assert_eq!(pts.len(), 4);
        let pairs: Vec<(f64, f64)> = pts.iter().map(|p| (p.values[5], p.values[6])).collect();
        assert_eq!(pairs, [(1.0, 0.1), (1.0, 0.01), (0.5, 0.1), (0.5, 0.01)]);
        assert_eq!(pts[3].index, 3);
    }

    #[test]
    fn untouched_axes_keep_base_values() {
        let mut base = HyperParams::default();
        base.head_dim = 7;
        let spec = GridSpec { alpha: Some(vec![1e-3]), ..Default::default() };
        let p = spec.points(&base, 0).unwrap()[0];
        let mut h = base;
        p.apply(&mut h);
        assert_eq!(h, HyperParams { alignment: srwgan_core::alignment::AlignmentWeights { alpha: 1e-3, ..base.alignment }, ..base });
    }

    #[test]
    fn domain_is_enforced() {
        for spec in [
            GridSpec { lambda_c: Some(vec![0.3]), ..Default::default() },
            GridSpec { beta: Some(vec![1e-6]), ..Default::default() },
            GridSpec { head_dim: Some(vec![64]), ..Default::default() },
        ] {
            assert!(matches!(spec.validate(), Err(Error::Config(_))));
        }
        let ok = GridSpec { lambda_m: Some(LAMBDA_GRID.to_vec()), head_dim: Some(HEAD_DIM_GRID.to_vec()), ..Default::default() };
        ok.validate().unwrap();
    }

    #[test]
    fn empty_grids_are_errors() {
        assert!(GridSpec::default().validate().is_err());
        assert!(GridSpec { lambda_c: Some(vec![]), ..Default::default() }.validate().is_err());
        assert!(GridSpec { lambda_c: Some(vec![1.0]), sample: Some(0), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn random_subset_is_seeded_and_distinct() {
        let spec = GridSpec { lambda_c: Some(LAMBDA_GRID.to_vec()), lambda_m: Some(LAMBDA_GRID.to_vec()), sample: Some(5), ..Default::default() };
        let a = spec.points(&HyperParams::default(), 3).unwrap();
        let b = spec.points(&HyperParams::default(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(a.windows(2).all(|w| w[0].index < w[1].index));
    }
}
