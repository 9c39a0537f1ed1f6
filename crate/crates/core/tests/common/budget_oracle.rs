//! Random token streams and a non-streaming reference for the budget filter.
#![allow(dead_code)]

use nanolab::budget::{check_well_formed, filter_stream, BudgetConfig};
use rand::Rng;

use super::rng;

pub const OPEN: usize = 1;
pub const CLOSE: usize = 2;
pub const NL: usize = 3;

pub fn config(budget: usize, grace: usize) -> BudgetConfig {
    BudgetConfig {
        budget,
        grace,
        open_id: OPEN,
        close_id: CLOSE,
        newline_id: NL,
    }
}

/// Word tokens are 4..20. `close_prob` is the per-token chance the model
/// closes by itself; `nl_prob` the chance of a newline.
pub fn random_stream(r: &mut impl Rng, len: usize, nl_prob: f64, close_prob: f64) -> Vec<usize> {
    let prefix = r.gen_range(0..4);
    let mut s: Vec<usize> = (0..prefix).map(|_| r.gen_range(4..20)).collect();
    s.push(OPEN);
    while s.len() < len {
        let t = if r.gen_bool(close_prob) {
            CLOSE
        } else if r.gen_bool(nl_prob) {
            NL
        } else {
            r.gen_range(4..20)
        };
        s.push(t);
    }
    s
}

/// Expected output computed from the whole stream at once: find where the
/// think span starts, the first natural close, and the first newline at or
/// after the budget, then splice.
pub fn reference_output(cfg: &BudgetConfig, s: &[usize]) -> Vec<usize> {
    let Some(open) = s.iter().position(|&t| t == cfg.open_id) else {
        return s.to_vec();
    };
    let think = &s[open + 1..];
    let natural = think.iter().position(|&t| t == cfg.close_id);
    // think-token number k (1-based) sits at think[k - 1]
    let cap = (cfg.budget + cfg.grace).max(1);
    let forced = (cfg.budget.max(1)..=cap)
        .find(|&k| k <= think.len() && think[k - 1] == cfg.newline_id)
        .or_else(|| (cap <= think.len()).then_some(cap));
    let mut out = s.to_vec();
    match (natural, forced) {
        (Some(n), Some(k)) if n < k => {}
        (_, Some(k)) => out.insert(open + 1 + k, cfg.close_id),
        _ => {}
    }
    out
}

#[derive(Debug, Default)]
pub struct BudgetSuite {
    pub streams: usize,
    pub max_inserted: usize,
    pub insert_out_of_window: usize,
    pub closure_free_not_well_formed: usize,
    pub natural_altered: usize,
    pub reference_mismatch: usize,
}

impl BudgetSuite {
    pub fn passed(&self) -> bool {
        self.max_inserted <= 1
            && self.insert_out_of_window == 0
            && self.closure_free_not_well_formed == 0
            && self.natural_altered == 0
            && self.reference_mismatch == 0
    }
}

/// Runs `n` random streams with grace 500 and random budgets. A third never
/// close and run past `budget + grace` (these must come out well-formed), a
/// third close on their own before the budget, the rest are unconstrained.
pub fn run_suite(n: usize, seed: u64) -> BudgetSuite {
    let mut r = rng(seed);
    let mut suite = BudgetSuite { streams: n, ..Default::default() };
    for i in 0..n {
        let budget = r.gen_range(0..120);
        let cfg = config(budget, 500);
        let kind = i % 3;
        let s = match kind {
            // never closes; long enough to reach budget + grace
            0 => {
                let nl = [0.0, 0.002, 0.05][r.gen_range(0..3)];
                random_stream(&mut r, budget + 520, nl, 0.0)
            }
            // closes by itself strictly before the budget
            1 if budget >= 2 => {
                let mut s = random_stream(&mut r, budget + 40, 0.01, 0.0);
                let open = s.iter().position(|&t| t == OPEN).unwrap();
                s[open + r.gen_range(1..budget)] = CLOSE;
                s
            }
            // anything goes
            _ => {
                let len = r.gen_range(1..budget + 600);
                random_stream(&mut r, len, 0.01, 0.003)
            }
        };
        let (out, m) = filter_stream(cfg, &s);
        let inserted = out.len() - s.len();
        suite.max_inserted = suite.max_inserted.max(inserted);
        if let Some(p) = m.inserted_at {
            if p < budget || p > budget + 500 {
                suite.insert_out_of_window += 1;
            }
        }
        if kind == 0 && !check_well_formed(&out, CLOSE).well_formed {
            suite.closure_free_not_well_formed += 1;
        }
        if m.natural_close && m.inserted_at.is_none() && out != s {
            suite.natural_altered += 1;
        }
        if kind == 1 && budget >= 2 && out != s {
            suite.natural_altered += 1;
        }
        if out != reference_output(&cfg, &s) {
            suite.reference_mismatch += 1;
        }
    }
    suite
}
