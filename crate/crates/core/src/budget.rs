//! Streaming thinking-budget filter. Once the think span reaches its budget,
//! the close tag goes in at the next newline, or after `budget + grace` think
//! tokens if no newline shows up.

use serde::{Deserialize, Serialize};

pub const DEFAULT_GRACE: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub budget: usize,
    #[serde(default = "default_grace")]
    pub grace: usize,
    pub open_id: usize,
    pub close_id: usize,
    pub newline_id: usize,
}

fn default_grace() -> usize {
    DEFAULT_GRACE
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    PreThink,
    Thinking,
    AwaitingNewline,
    Closed,
}

/// Filter state for one stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BudgetFilter {
    cfg: BudgetConfig,
    phase: Phase,
    think_count: usize,
    inserted_at: Option<usize>,
    natural_close: bool,
    emitted: Vec<usize>,
}

impl BudgetFilter {
    pub fn new(cfg: BudgetConfig) -> Self {
        Self {
            cfg,
            phase: Phase::PreThink,
            think_count: 0,
            inserted_at: None,
            natural_close: false,
            emitted: Vec::new(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn think_count(&self) -> usize {
        self.think_count
    }

    /// Think-token count after which the filter placed the close tag.
    pub fn inserted_at(&self) -> Option<usize> {
        self.inserted_at
    }

    pub fn natural_close(&self) -> bool {
        self.natural_close
    }

    pub fn emitted(&self) -> &[usize] {
        &self.emitted
    }

    /// Pure transition: the next state and the tokens emitted for `token`.
    pub fn step(&self, token: usize) -> (Self, Vec<usize>) {
        let mut next = self.clone();
        let out = next.feed(token);
        (next, out)
    }

    /// Consumes one model token and returns what the filter emits for it.
    pub fn feed(&mut self, token: usize) -> Vec<usize> {
        let c = &self.cfg;
        let mut out = vec![token];
        match self.phase {
            Phase::PreThink => {
                if token == c.open_id {
                    self.phase = Phase::Thinking;
                }
            }
            Phase::Thinking | Phase::AwaitingNewline => {
                self.think_count += 1;
                let n = self.think_count;
                if token == c.close_id {
                    self.phase = Phase::Closed;
                    self.natural_close = true;
                } else if (n >= c.budget && token == c.newline_id) || n >= c.budget + c.grace {
                    out.push(c.close_id);
                    self.phase = Phase::Closed;
                    self.inserted_at = Some(n);
                } else if n >= c.budget {
                    self.phase = Phase::AwaitingNewline;
                }
            }
            Phase::Closed => {}
        }
        self.emitted.extend_from_slice(&out);
        out
    }

    pub fn feed_all(&mut self, tokens: impl IntoIterator<Item = usize>) -> Vec<usize> {
        tokens.into_iter().flat_map(|t| self.feed(t)).collect()
    }

    pub fn metrics(&self) -> FilterMetrics {
        let wf = check_well_formed(&self.emitted, self.cfg.close_id);
        FilterMetrics {
            well_formed: wf.well_formed,
            inserted_at: self.inserted_at,
            natural_close: self.natural_close,
            close_count: wf.close_count,
            close_positions: wf.close_positions,
            think_tokens: self.think_count,
        }
    }
}

/// Runs a whole stream through a fresh filter.
pub fn filter_stream(cfg: BudgetConfig, tokens: &[usize]) -> (Vec<usize>, FilterMetrics) {
    let mut f = BudgetFilter::new(cfg);
    let out = f.feed_all(tokens.iter().copied());
    (out, f.metrics())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterMetrics {
    pub well_formed: bool,
    pub inserted_at: Option<usize>,
    pub natural_close: bool,
    pub close_count: usize,
    pub close_positions: Vec<usize>,
    pub think_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WellFormed {
    pub well_formed: bool,
    pub close_count: usize,
    /// Stream positions of every close tag.
    pub close_positions: Vec<usize>,
}

/// Well-formed means exactly one close tag.
pub fn check_well_formed(tokens: &[usize], close_id: usize) -> WellFormed {
    let close_positions: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == close_id)
        .map(|(i, _)| i)
        .collect();
    WellFormed {
        well_formed: close_positions.len() == 1,
        close_count: close_positions.len(),
        close_positions,
    }
}
