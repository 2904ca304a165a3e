//! Brute-force oracles for the analytic and searched code paths, and a
//! suite that cross-checks them on seeded random cases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::{BlockKind, GeneratorArch, NormKind, Shape, TemplateOptions};
use crate::error::{Error, Result};
use crate::ka::{ka, ka_gram, FeatureMatrix};
use crate::macs::arch_macs;
use crate::net::{generate, init_params};
use crate::prune::{candidate_thresholds, pruned_macs, search_threshold, PruneBudget};
use crate::tensor::Tensor;

pub const VERIFY_SEED: u64 = 0xCA7;

/// Relative tolerance for floating-point oracle comparisons.
pub const FLOAT_TOL: f64 = 1e-5;

/// Counts the scalar multiplies performed when `arch` actually runs on a
/// single sample of shape `input`.
pub fn oracle_macs(arch: &GeneratorArch, input: Shape) -> Result<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(VERIFY_SEED);
    let store = init_params::<f32, _>(arch, &mut rng);
    let x = Tensor::from_fn([1, input.c, input.h, input.w], |_| rng.gen_range(-1.0..1.0));
    Ok(generate(arch, &store, &x)?.1)
}

/// Smallest feasible candidate threshold, found by trying every candidate
/// in ascending order.
pub fn oracle_threshold(arch: &GeneratorArch, budget: &PruneBudget) -> Result<f32> {
    let mut last_cost = 0;
    for tau in candidate_thresholds(arch)? {
        last_cost = pruned_macs(arch, tau, budget.floor, budget.input_shape)?;
        if last_cost <= budget.target_macs {
            return Ok(tau);
        }
    }
    Err(Error::BudgetInfeasible {
        target: budget.target_macs,
        minimum: last_cost,
    })
}

/// Kernel alignment evaluated element by element in f64.
pub fn oracle_ka(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f32> {
    if x.rows != y.rows {
        return Err(Error::BatchMismatch {
            left: x.rows,
            right: y.rows,
        });
    }
    let n = x.rows;
    let at = |m: &FeatureMatrix, r: usize, c: usize| m.data[r * m.cols + c] as f64;
    let frob_sq = |a: &FeatureMatrix, b: &FeatureMatrix| {
        let mut total = 0.0;
        for i in 0..a.cols {
            for j in 0..b.cols {
                let mut s = 0.0;
                for r in 0..n {
                    s += at(a, r, i) * at(b, r, j);
                }
                total += s * s;
            }
        }
        total
    };
    let xx = frob_sq(x, x).sqrt();
    let yy = frob_sq(y, y).sqrt();
    if xx == 0.0 {
        return Err(Error::DegenerateInput("||XᵀX||_F is zero"));
    }
    if yy == 0.0 {
        return Err(Error::DegenerateInput("||YᵀY||_F is zero"));
    }
    Ok((frob_sq(y, x) / (xx * yy)) as f32)
}

/// Generator for case `index` of a sweep; independent of evaluation order.
pub fn case_rng(index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(VERIFY_SEED);
    rng.set_stream(index);
    rng
}

/// A small random template with random normalization scales. Some scale
/// sets are quantized so that ties occur.
pub fn random_small_arch<R: Rng + ?Sized>(rng: &mut R) -> GeneratorArch {
    let kind = if rng.gen_bool(0.5) {
        BlockKind::Plain
    } else {
        BlockKind::IncRes
    };
    let norm = if rng.gen_bool(0.5) {
        NormKind::Instance
    } else {
        NormKind::Batch
    };
    let size = [8, 12, 16][rng.gen_range(0..3)];
    let mut arch = TemplateOptions::new(
        rng.gen_range(2..=8),
        rng.gen_range(1..=3),
        rng.gen_range(1..=3),
        rng.gen_range(1..=3),
        kind,
    )
    .with_norm(norm)
    .with_size(size, size)
    .build()
    .expect("template parameters are in range");
    arch.randomize_scales(rng, 1.0, 0.5);
    if rng.gen_bool(0.3) {
        for (gamma, _) in arch.norms_mut() {
            gamma.iter_mut().for_each(|g| *g = (*g * 10.0).round() / 10.0);
        }
    }
    arch
}

/// `p × p` orthogonal matrix (row-major) from Gram-Schmidt on Gaussian
/// columns.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, p: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(p);
    while cols.len() < p {
        let mut v: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        for q in &cols {
            let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
    }
    let mut out = vec![0.0; p * p];
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            out[i * p + j] = v;
        }
    }
    out
}

/// `X · U` for a row-major `p × p` matrix `U`.
pub fn right_multiply(x: &FeatureMatrix, u: &[f64]) -> FeatureMatrix {
    let p = x.cols;
    assert_eq!(u.len(), p * p);
    let mut data = vec![0.0f32; x.rows * p];
    for r in 0..x.rows {
        for j in 0..p {
            let s: f64 = (0..p).map(|k| x.data[r * p + k] as f64 * u[k * p + j]).sum();
            data[r * p + j] = s as f32;
        }
    }
    FeatureMatrix::new(x.rows, p, data, x.layer_id.clone())
}

pub fn random_features<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> FeatureMatrix {
    let data = (0..rows * cols).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    FeatureMatrix::new(rows, cols, data, "random")
}

fn rel_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= FLOAT_TOL * a.abs().max(b.abs()).max(1.0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
    pub ok: bool,
}

impl SuiteReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn run_check(name: &str, cases: Vec<Box<dyn Fn() -> bool + Send + Sync + '_>>) -> CheckResult {
    let failures = cases.par_iter().filter(|case| !case()).count();
    CheckResult {
        name: name.into(),
        cases: cases.len(),
        failures,
    }
}

type Case<'a> = Box<dyn Fn() -> bool + Send + Sync + 'a>;

fn macs_agree(arch: &GeneratorArch) -> bool {
    let input = arch.input();
    match (oracle_macs(arch, input), arch_macs(arch, input)) {
        (Ok(a), Ok(b)) => a == b.total,
        _ => false,
    }
}

/// Analytic MACs against executed multiply counts.
pub fn check_macs(random_cases: usize) -> CheckResult {
    let mut cases: Vec<Case> = vec![
        Box::new(|| {
            let a = GeneratorArch::empty("empty", Shape::new(3, 8, 8));
            oracle_macs(&a, a.input()).ok() == Some(0) && macs_agree(&a)
        }),
        Box::new(|| {
            let a = TemplateOptions::new(6, 1, 1, 3, BlockKind::Plain).with_size(8, 8).build();
            a.map(|a| macs_agree(&a)).unwrap_or(false)
        }),
        Box::new(|| {
            let a = TemplateOptions::new(6, 1, 1, 3, BlockKind::IncRes).with_size(8, 8).build();
            a.map(|a| macs_agree(&a)).unwrap_or(false)
        }),
    ];
    for i in 0..random_cases as u64 {
        cases.push(Box::new(move || macs_agree(&random_small_arch(&mut case_rng(i)))));
    }
    run_check("macs_by_execution", cases)
}

/// Budgets spread from well below the floor-limited minimum to above the
/// unpruned cost.
fn threshold_case(index: u64) -> bool {
    let mut rng = case_rng(1_000 + index);
    let arch = random_small_arch(&mut rng);
    let floor = rng.gen_range(1..=4);
    let Ok(full) = arch_macs(&arch, arch.input()) else {
        return false;
    };
    let target = ((full.total as f64 * rng.gen_range(0.02..1.1)) as u64).max(1);
    let Ok(budget) = PruneBudget::new(target, floor, arch.input()) else {
        return false;
    };
    match (search_threshold(&arch, &budget), oracle_threshold(&arch, &budget)) {
        (Ok(s), Ok(o)) => {
            let achieved = pruned_macs(&arch, s.threshold, floor, arch.input());
            s.threshold.to_bits() == o.to_bits() && matches!(achieved, Ok(m) if m <= target)
        }
        (Err(Error::BudgetInfeasible { minimum: a, .. }), Err(Error::BudgetInfeasible { minimum: b, .. })) => a == b,
        _ => false,
    }
}

/// Binary-searched thresholds against the linear scan.
pub fn check_threshold(random_cases: usize) -> CheckResult {
    let mut cases: Vec<Case> = vec![Box::new(|| {
        let arch = random_small_arch(&mut case_rng(999));
        let full = arch_macs(&arch, arch.input()).map(|c| c.total).unwrap_or(0);
        let Ok(b) = PruneBudget::new(full, 8, arch.input()) else {
            return false;
        };
        matches!(
            (search_threshold(&arch, &b), oracle_threshold(&arch, &b)),
            (Ok(s), Ok(o)) if s.threshold == 0.0 && o == 0.0 && s.vacuous
        )
    })];
    cases.push(Box::new(|| {
        let arch = random_small_arch(&mut case_rng(998));
        let Ok(b) = PruneBudget::new(1, 8, arch.input()) else {
            return false;
        };
        matches!(
            (search_threshold(&arch, &b), oracle_threshold(&arch, &b)),
            (Err(Error::BudgetInfeasible { .. }), Err(Error::BudgetInfeasible { .. }))
        )
    }));
    for i in 0..random_cases as u64 {
        cases.push(Box::new(move || threshold_case(i)));
    }
    run_check("threshold_search", cases)
}

fn ka_case(index: u64) -> bool {
    let mut rng = case_rng(2_000 + index);
    let n = rng.gen_range(2..=10);
    let (px, py) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
    let x = random_features(&mut rng, n, px);
    let y = random_features(&mut rng, n, py);
    let (Ok(o), Ok(a), Ok(g)) = (oracle_ka(&x, &y), ka(&x, &y), ka_gram(&x, &y)) else {
        return false;
    };
    let self_one = oracle_ka(&x, &x).map(|v| rel_close(v as f64, 1.0)).unwrap_or(false);
    let u = random_orthogonal(&mut rng, y.cols);
    let rotated = oracle_ka(&x, &right_multiply(&y, &u)).map(|v| rel_close(v as f64, o as f64));
    rel_close(o as f64, a as f64) && rel_close(o as f64, g as f64) && self_one && rotated.unwrap_or(false)
}

/// Kernel alignment routes against the element-wise form.
pub fn check_ka(random_cases: usize) -> CheckResult {
    let cases: Vec<Case> = (0..random_cases as u64)
        .map(|i| Box::new(move || ka_case(i)) as Case)
        .collect();
    run_check("kernel_alignment", cases)
}

/// The full suite with its standard case counts.
pub fn run_suite() -> SuiteReport {
    let checks = vec![check_macs(20), check_threshold(100), check_ka(50)];
    let ok = checks.iter().all(|c| c.failures == 0);
    SuiteReport { checks, ok }
}
