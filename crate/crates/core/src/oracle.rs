//! Black-box prediction access to a suspect model.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::data::Dataset;
use crate::error::{Error, OracleError, Result};
use crate::nn::loss::nll;
use crate::nn::MlpModel;

/// Anything that answers class-probability queries. Every row sent counts as
/// one sample query against the oracle's counter.
pub trait PredictionOracle: Send + Sync {
    fn predict_proba(&self, rows: &[&[f64]]) -> Result<Vec<Vec<f64>>, OracleError>;

    /// Sample queries answered so far. Never decreases.
    fn query_count(&self) -> u64;
}

impl<T: PredictionOracle + ?Sized> PredictionOracle for &T {
    fn predict_proba(&self, rows: &[&[f64]]) -> Result<Vec<Vec<f64>>, OracleError> {
        (**self).predict_proba(rows)
    }

    fn query_count(&self) -> u64 {
        (**self).query_count()
    }
}

impl<T: PredictionOracle + ?Sized> PredictionOracle for Arc<T> {
    fn predict_proba(&self, rows: &[&[f64]]) -> Result<Vec<Vec<f64>>, OracleError> {
        (**self).predict_proba(rows)
    }

    fn query_count(&self) -> u64 {
        (**self).query_count()
    }
}

/// Monotone query counter with an optional hard budget.
#[derive(Debug, Default)]
pub struct QueryCounter {
    count: AtomicU64,
    budget: Option<u64>,
}

impl QueryCounter {
    pub fn new(budget: Option<u64>) -> Self {
        Self { count: AtomicU64::new(0), budget }
    }

    pub fn get(&self) -> u64 {
        self.count.load(Ordering::SeqCst)
    }

    pub fn budget(&self) -> Option<u64> {
        self.budget
    }

    /// Claims `n` queries, or refuses without changing the count.
    pub fn reserve(&self, n: u64) -> Result<(), OracleError> {
        let mut current = self.count.load(Ordering::SeqCst);
        loop {
            if let Some(budget) = self.budget {
                if current + n > budget {
                    return Err(OracleError::BudgetExceeded { used: current, budget, requested: n });
                }
            }
            match self
                .count
                .compare_exchange(current, current + n, Ordering::SeqCst, Ordering::SeqCst)
            {
                Ok(_) => return Ok(()),
                Err(actual) => current = actual,
            }
        }
    }
}

/// In-process oracle over a model.
#[derive(Debug)]
pub struct LocalOracle {
    model: Arc<MlpModel>,
    counter: QueryCounter,
}

impl LocalOracle {
    pub fn new(model: MlpModel) -> Self {
        Self::with_budget(model, None)
    }

    pub fn with_budget(model: MlpModel, budget: Option<u64>) -> Self {
        Self {
            model: Arc::new(model),
            counter: QueryCounter::new(budget),
        }
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }
}

impl PredictionOracle for LocalOracle {
    fn predict_proba(&self, rows: &[&[f64]]) -> Result<Vec<Vec<f64>>, OracleError> {
        // validate before charging the budget
        self.model
            .check_rows(rows)
            .map_err(|e| OracleError::Rejected(e.to_string()))?;
        self.counter.reserve(rows.len() as u64)?;
        self.model
            .forward_proba(rows)
            .map_err(|e| OracleError::Rejected(e.to_string()))
    }

    fn query_count(&self) -> u64 {
        self.counter.get()
    }
}

/// Oracle backed by a closure from feature row to probability row.
pub struct FnOracle<F> {
    f: F,
    counter: QueryCounter,
}

impl<F> FnOracle<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self { f, counter: QueryCounter::new(None) }
    }
}

impl<F> PredictionOracle for FnOracle<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    fn predict_proba(&self, rows: &[&[f64]]) -> Result<Vec<Vec<f64>>, OracleError> {
        self.counter.reserve(rows.len() as u64)?;
        Ok(rows.iter().map(|r| (self.f)(r)).collect())
    }

    fn query_count(&self) -> u64 {
        self.counter.get()
    }
}

/// Queries every row once and returns the oracle's probability rows.
pub fn query_all(oracle: &dyn PredictionOracle, rows: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let probs = oracle
        .predict_proba(rows)
        .map_err(|source| Error::Oracle { index: 0, source })?;
    if probs.len() != rows.len() {
        return Err(Error::Oracle {
            index: probs.len().min(rows.len()),
            source: OracleError::Protocol(format!("{} answers for {} queries", probs.len(), rows.len())),
        });
    }
    Ok(probs)
}

/// Per-sample cross-entropy of the oracle's predictions, one query per row.
pub fn sample_losses(oracle: &dyn PredictionOracle, data: &Dataset) -> Result<Vec<f64>> {
    let rows = data.rows();
    let probs = query_all(oracle, &rows)?;
    probs
        .iter()
        .zip(data.labels())
        .enumerate()
        .map(|(i, (p, &y))| {
            p.get(y).map(|&py| nll(py)).ok_or_else(|| Error::Oracle {
                index: i,
                source: OracleError::Protocol(format!("answer {i} has {} classes, label is {y}", p.len())),
            })
        })
        .collect()
}
