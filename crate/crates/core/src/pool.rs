//! Labeled/unlabeled bookkeeping over immutable per-domain sample stores.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::nn::RngStream;

/// A sample of the pool, ordered lexicographically by `(domain, index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ItemRef {
    pub domain: usize,
    pub index: usize,
}

impl ItemRef {
    pub fn new(domain: usize, index: usize) -> Self {
        Self { domain, index }
    }
}

/// Items chosen for annotation in one round.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueryBatch {
    pub items: Vec<ItemRef>,
}

impl QueryBatch {
    pub fn new(mut items: Vec<ItemRef>) -> Self {
        items.sort_unstable();
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct DomainPool {
    pub data: Arc<DomainDataset>,
    labeled: BTreeSet<usize>,
    unlabeled: BTreeSet<usize>,
}

impl DomainPool {
    pub fn labeled(&self) -> &BTreeSet<usize> {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &BTreeSet<usize> {
        &self.unlabeled
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct PoolState {
    domains: Vec<DomainPool>,
}

impl PoolState {
    /// Everything unlabeled.
    pub fn new(datasets: Vec<Arc<DomainDataset>>) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::validation("pool needs at least one domain"));
        }
        let domains = datasets
            .into_iter()
            .enumerate()
            .map(|(k, data)| {
                if data.is_empty() {
                    return Err(Error::validation(format!("domain {k} is empty")));
                }
                Ok(DomainPool {
                    unlabeled: (0..data.len()).collect(),
                    labeled: BTreeSet::new(),
                    data,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { domains })
    }

    /// Labels `ceil(fraction · n_k)` uniformly drawn items in every domain.
    pub fn init_split(
        datasets: Vec<Arc<DomainDataset>>,
        init_fraction: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if !(init_fraction > 0.0 && init_fraction <= 1.0) {
            return Err(Error::validation(format!(
                "init_fraction must lie in (0, 1], got {init_fraction}"
            )));
        }
        let mut pool = Self::new(datasets)?;
        for (k, d) in pool.domains.iter_mut().enumerate() {
            let n = d.len();
            let count = ceil_fraction(init_fraction, n);
            if count == 0 {
                return Err(Error::validation(format!(
                    "init_fraction {init_fraction} labels nothing in domain {k}"
                )));
            }
            let all: Vec<usize> = (0..n).collect();
            let mut drng = rng.derive(&format!("domain{k}"));
            for i in drng.choose_multiple(&all, count) {
                d.unlabeled.remove(&i);
                d.labeled.insert(i);
            }
        }
        Ok(pool)
    }

    pub fn domains(&self) -> &[DomainPool] {
        &self.domains
    }

    pub fn domain(&self, k: usize) -> &DomainPool {
        &self.domains[k]
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn total(&self) -> usize {
        self.domains.iter().map(DomainPool::len).sum()
    }

    pub fn labeled_total(&self) -> usize {
        self.domains.iter().map(|d| d.labeled.len()).sum()
    }

    pub fn unlabeled_total(&self) -> usize {
        self.domains.iter().map(|d| d.unlabeled.len()).sum()
    }

    pub fn labeled_counts(&self) -> Vec<usize> {
        self.domains.iter().map(|d| d.labeled.len()).collect()
    }

    pub fn unlabeled_counts(&self) -> Vec<usize> {
        self.domains.iter().map(|d| d.unlabeled.len()).collect()
    }

    pub fn pool_sizes(&self) -> Vec<usize> {
        self.domains.iter().map(DomainPool::len).collect()
    }

    pub fn is_unlabeled(&self, item: ItemRef) -> bool {
        self.domains
            .get(item.domain)
            .is_some_and(|d| d.unlabeled.contains(&item.index))
    }

    /// Unlabeled items of every domain in `(domain, index)` order.
    pub fn unlabeled_items(&self) -> Vec<ItemRef> {
        self.domains
            .iter()
            .enumerate()
            .flat_map(|(k, d)| d.unlabeled.iter().map(move |&i| ItemRef::new(k, i)))
            .collect()
    }

    pub fn labeled_items(&self) -> Vec<ItemRef> {
        self.domains
            .iter()
            .enumerate()
            .flat_map(|(k, d)| d.labeled.iter().map(move |&i| ItemRef::new(k, i)))
            .collect()
    }

    /// Moves every batch item from unlabeled to labeled. Fails without
    /// modifying anything if an item is not currently unlabeled.
    pub fn annotate(&mut self, batch: &QueryBatch) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &item in &batch.items {
            if !self.is_unlabeled(item) || !seen.insert(item) {
                return Err(Error::Invariant(format!(
                    "item {item:?} is not an unlabeled pool member"
                )));
            }
        }
        for item in &batch.items {
            let d = &mut self.domains[item.domain];
            d.unlabeled.remove(&item.index);
            d.labeled.insert(item.index);
        }
        Ok(())
    }
}

/// `ceil(fraction · n)`, tolerant of round-off just above an integer.
pub fn ceil_fraction(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}
