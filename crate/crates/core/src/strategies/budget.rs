use crate::error::{Error, Result};

/// Splits `budget` across domains in proportion to `weights` (largest
/// remainder, ties to the lower domain id), then caps each share at
/// `capacity[k]` and hands overflow to the next domains in remainder order
/// that still have room.
///
/// Exact integer arithmetic: the share of domain `k` is `budget·w_k / Σw`.
pub fn allocate_budget(weights: &[usize], capacity: &[usize], budget: usize) -> Result<Vec<usize>> {
    if weights.len() != capacity.len() {
        return Err(Error::validation(format!(
            "{} weights but {} capacities",
            weights.len(),
            capacity.len()
        )));
    }
    if budget == 0 {
        return Err(Error::validation("round budget must be >= 1"));
    }
    let cap_total: usize = capacity.iter().sum();
    if budget > cap_total {
        return Err(Error::validation(format!(
            "budget {budget} exceeds the {cap_total} selectable items"
        )));
    }
    let total: u128 = weights.iter().map(|&w| w as u128).sum();
    if total == 0 {
        return Err(Error::validation("all domain weights are zero"));
    }

    let b = budget as u128;
    let mut alloc: Vec<usize> = weights
        .iter()
        .map(|&w| (b * w as u128 / total) as usize)
        .collect();
    // Remainders share the denominator `total`, so comparing numerators is exact.
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&i, &j| {
        let ri = b * weights[i] as u128 % total;
        let rj = b * weights[j] as u128 % total;
        rj.cmp(&ri).then(i.cmp(&j))
    });
    // Never more leftover units than domains with a nonzero remainder.
    let leftover = budget - alloc.iter().sum::<usize>();
    for &k in order.iter().take(leftover) {
        alloc[k] += 1;
    }

    let mut leftover = 0;
    for (a, &c) in alloc.iter_mut().zip(capacity) {
        if *a > c {
            leftover += *a - c;
            *a = c;
        }
    }
    while leftover > 0 {
        for &k in &order {
            if leftover == 0 {
                break;
            }
            if alloc[k] < capacity[k] {
                alloc[k] += 1;
                leftover -= 1;
            }
        }
    }
    Ok(alloc)
}
