//! Deterministic policy evaluation, multi-seed aggregation, optimality gaps,
//! and report emission (markdown tables plus CSV files).
//!
//! Evaluation is greedy: the highest-logit valid action, dropout off. On a
//! fixed instance that makes every episode identical, so variance in the
//! reported numbers comes from training seeds (and, for the Random
//! baseline, from its own sampling).

use crate::env::ScheduleState;
use crate::graph::{build_graph, update_features};
use crate::instance::JsspInstance;
use crate::nn::{Mode, PolicyModel};
use crate::ppo::CurvePoint;
use crate::stats::{paired_t_test, TTestResult};

/// Runs `episodes` greedy episodes and returns their makespans.
pub fn evaluate(model: &PolicyModel, inst: &JsspInstance, episodes: usize) -> Vec<u64> {
    let mut graph = build_graph(inst);
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = ScheduleState::reset(inst);
        update_features(&mut graph, &state, inst);
        while !state.is_terminal() {
            let mask = state.action_mask(inst);
            let fwd = model.forward(&graph, &mask, Mode::Eval);
            state.step(fwd.greedy_action(), inst);
            update_features(&mut graph, &state, inst);
        }
        out.push(state.makespan());
    }
    out
}

/// Per-seed evaluation episodes of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedEval {
    pub seed: u64,
    pub makespans: Vec<u64>,
}

impl SeedEval {
    pub fn mean(&self) -> f64 {
        self.makespans.iter().map(|&m| m as f64).sum::<f64>() / self.makespans.len() as f64
    }
}

/// Aggregated evaluation of one method on one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub instance: String,
    pub method: String,
    pub per_seed: Vec<SeedEval>,
    /// Mean of the per-seed means.
    pub grand_mean: f64,
    /// Sample standard deviation (n-1) across the per-seed means.
    pub std_across_seeds: f64,
    pub gap_percent: Option<f64>,
}

impl EvalResult {
    pub fn new(
        instance: &str,
        method: &str,
        per_seed: Vec<SeedEval>,
        optimum: Option<u64>,
    ) -> Self {
        assert!(!per_seed.is_empty(), "need at least one seed");
        let means: Vec<f64> = per_seed.iter().map(SeedEval::mean).collect();
        let n = means.len() as f64;
        let grand_mean = means.iter().sum::<f64>() / n;
        let std_across_seeds = if means.len() > 1 {
            (means.iter().map(|m| (m - grand_mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let gap_percent = optimum.map(|opt| 100.0 * (grand_mean - opt as f64) / opt as f64);
        Self {
            instance: instance.to_string(),
            method: method.to_string(),
            per_seed,
            grand_mean,
            std_across_seeds,
            gap_percent,
        }
    }

    pub fn seed_means(&self) -> Vec<f64> {
        self.per_seed.iter().map(SeedEval::mean).collect()
    }
}

/// A paired comparison of two methods on the same instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub instance: String,
    pub ours: String,
    pub baseline: String,
    /// Relative improvement `100 * (baseline - ours) / baseline`.
    pub delta_percent: f64,
    pub ours_mean: f64,
    pub baseline_mean: f64,
    pub test: TTestResult,
}

/// Pairs the per-seed means of `ours` against `baseline` by seed. A
/// deterministic baseline evaluated once is broadcast as a constant vector.
pub fn compare(ours: &EvalResult, baseline: &EvalResult) -> Comparison {
    assert_eq!(ours.instance, baseline.instance, "compare within one instance");
    let a = ours.seed_means();
    let mut b = baseline.seed_means();
    if b.len() == 1 && a.len() > 1 {
        b = vec![b[0]; a.len()];
    }
    assert_eq!(a.len(), b.len(), "seed counts must match for pairing");
    let test = paired_t_test(&a, &b);
    Comparison {
        instance: ours.instance.clone(),
        ours: ours.method.clone(),
        baseline: baseline.method.clone(),
        delta_percent: 100.0 * (baseline.grand_mean - ours.grand_mean) / baseline.grand_mean,
        ours_mean: ours.grand_mean,
        baseline_mean: baseline.grand_mean,
        test,
    }
}

/// `**` for p < 0.01, `*` for p < 0.05, empty otherwise.
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    }
    else {
        ""
    }
}

/// Markdown report: a makespan/gap table per instance plus the paired-test
/// summary. Stars on a method row mark its significance against the method
/// it was compared to.
pub fn build_report(results: &[EvalResult], tests: &[Comparison]) -> String {
    let mut out = String::new();
    let mut instances: Vec<&str> = results.iter().map(|r| r.instance.as_str()).collect();
    instances.dedup();

    for instance in instances {
        let rows: Vec<&EvalResult> = results.iter().filter(|r| r.instance == instance).collect();
        out.push_str(&format!("## {instance}\n\n"));
        out.push_str("| Method | Makespan | Gap (%) |\n|---|---|---|\n");
        for r in &rows {
            let stars = tests
                .iter()
                .find(|t| t.instance == instance && t.baseline == r.method)
                .map(|t| significance_stars(t.test.p))
                .unwrap_or("");
            let gap = r
                .gap_percent
                .map(|g| format!("{g:.2}"))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "| {} | {:.1} ± {:.1}{} | {} |\n",
                r.method, r.grand_mean, r.std_across_seeds, stars, gap
            ));
        }
        if let Some(opt) = rows.iter().find_map(|r| {
            r.gap_percent
                .map(|g| r.grand_mean / (1.0 + g / 100.0))
        }) {
            out.push_str(&format!("| optimal | {opt:.0} | 0.00 |\n"));
        }
        out.push('\n');

        let trows: Vec<&Comparison> = tests.iter().filter(|t| t.instance == instance).collect();
        if !trows.is_empty() {
            out.push_str(&format!("### Paired t-tests ({instance})\n\n"));
            out.push_str(
                "| Comparison | Δ (%) | Ours | Baseline | p-value |\n|---|---|---|---|---|\n",
            );
            for t in trows {
                out.push_str(&format!(
                    "| {} vs {} | {:+.2} | {:.1} | {:.1} | {:.4}{} |\n",
                    t.ours,
                    t.baseline,
                    t.delta_percent,
                    t.ours_mean,
                    t.baseline_mean,
                    t.test.p,
                    significance_stars(t.test.p)
                ));
            }
            out.push('\n');
        }
    }
    out
}

/// CSV schema: `instance,method,mean,std,gap_percent,n_seeds,episodes_per_seed`.
pub fn results_csv(results: &[EvalResult]) -> String {
    let mut out = String::from("instance,method,mean,std,gap_percent,n_seeds,episodes_per_seed\n");
    for r in results {
        let gap = r.gap_percent.map(|g| g.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.instance,
            r.method,
            r.grand_mean,
            r.std_across_seeds,
            gap,
            r.per_seed.len(),
            r.per_seed[0].makespans.len(),
        ));
    }
    out
}

/// CSV schema:
/// `instance,ours,baseline,delta_percent,ours_mean,baseline_mean,t,p,df,degenerate,significance`.
pub fn ttests_csv(tests: &[Comparison]) -> String {
    let mut out =
        String::from("instance,ours,baseline,delta_percent,ours_mean,baseline_mean,t,p,df,degenerate,significance\n");
    for c in tests {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            c.instance,
            c.ours,
            c.baseline,
            c.delta_percent,
            c.ours_mean,
            c.baseline_mean,
            c.test.t,
            c.test.p,
            c.test.df,
            c.test.degenerate,
            significance_stars(c.test.p),
        ));
    }
    out
}

/// CSV schema: `env_steps,seed,arch,instance,eval_mean,eval_std`.
pub fn curves_csv(rows: &[(u64, String, String, CurvePoint)]) -> String {
    let mut out = String::from("env_steps,seed,arch,instance,eval_mean,eval_std\n");
    for (seed, arch, instance, point) in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            point.env_steps, seed, arch, instance, point.eval_mean, point.eval_std
        ));
    }
    out
}
