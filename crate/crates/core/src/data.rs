use std::collections::HashMap;

use crate::error::{GcmError, Result};

/// One query session: `T` item slots with click outcomes.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub id: String,
    /// Dense item indices into [`SessionLog::item_names`].
    pub items: Vec<usize>,
    pub clicks: Vec<bool>,
    /// `covariates[t-1][c]`: value of covariate column `c` at position `t`.
    /// Empty when the log declares no covariate columns.
    pub covariates: Vec<Vec<f64>>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.clicks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty()
    }

    /// Item at 1-based position `t`.
    pub fn item_at(&self, t: usize) -> usize {
        self.items[t - 1]
    }

    pub fn clicked(&self, t: usize) -> bool {
        self.clicks[t - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionLog {
    pub list_size: usize,
    pub covariate_names: Vec<String>,
    pub item_names: Vec<String>,
    pub sessions: Vec<Session>,
}

impl SessionLog {
    pub fn new(list_size: usize, covariate_names: Vec<String>) -> Self {
        SessionLog {
            list_size,
            covariate_names,
            item_names: Vec::new(),
            sessions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn item_count(&self) -> usize {
        self.item_names.len()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    /// Checks the per-session invariants against the dataset-level `T`.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.sessions.iter().enumerate() {
            if s.items.len() != self.list_size || s.clicks.len() != self.list_size {
                return Err(GcmError::schema(format!(
                    "session {i} (`{}`) has {} items and {} clicks, expected {}",
                    s.id,
                    s.items.len(),
                    s.clicks.len(),
                    self.list_size
                )));
            }
            if let Some(&v) = s.items.iter().find(|&&v| v >= self.item_names.len()) {
                return Err(GcmError::schema(format!(
                    "session {i} references unknown item index {v}"
                )));
            }
            let expected_cov = if self.covariate_names.is_empty() { 0 } else { self.list_size };
            if s.covariates.len() != expected_cov
                || s.covariates.iter().any(|row| row.len() != self.covariate_names.len())
            {
                return Err(GcmError::schema(format!(
                    "session {i} covariates do not match {} columns × {} positions",
                    self.covariate_names.len(),
                    self.list_size
                )));
            }
        }
        Ok(())
    }

    /// Number of times each item was shown.
    pub fn impressions(&self) -> Vec<usize> {
        let mut counts = vec![0; self.item_names.len()];
        for s in &self.sessions {
            for &v in &s.items {
                counts[v] += 1;
            }
        }
        counts
    }

    /// Re-indexes items against `names`. Items missing from `names` receive
    /// indices past its end so per-item lookups fall back to the block prior.
    pub fn reindexed(&self, names: &[String]) -> SessionLog {
        let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut extra: Vec<String> = Vec::new();
        let mapping: Vec<usize> = self
            .item_names
            .iter()
            .map(|n| match index.get(n.as_str()) {
                Some(&i) => i,
                None => {
                    extra.push(n.clone());
                    names.len() + extra.len() - 1
                }
            })
            .collect();
        let mut item_names = names.to_vec();
        item_names.extend(extra);
        SessionLog {
            list_size: self.list_size,
            covariate_names: self.covariate_names.clone(),
            item_names,
            sessions: self
                .sessions
                .iter()
                .map(|s| Session {
                    items: s.items.iter().map(|&v| mapping[v]).collect(),
                    ..s.clone()
                })
                .collect(),
        }
    }
}

/// Interns item names into dense indices while a log is being assembled.
#[derive(Debug, Default)]
pub struct ItemInterner {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl ItemInterner {
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn into_names(self) -> Vec<String> {
        self.names
    }
}
