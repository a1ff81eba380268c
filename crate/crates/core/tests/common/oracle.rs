//! Brute-force references for scheduling and replica selection.

/// A server in a uniform-length instance.
#[derive(Debug, Clone, Copy)]
pub struct OServer {
    pub slots: u32,
    /// Price per CPU second.
    pub price: f64,
}

/// Cost and makespan of every assignment of `n` equal jobs of length `len_s`.
pub fn enumerate(n: usize, servers: &[OServer], len_s: f64) -> Vec<(f64, f64)> {
    let m = servers.len();
    let total = m.pow(n as u32);
    let mut out = Vec::with_capacity(total);
    for code in 0..total {
        let mut counts = vec![0u32; m];
        let mut c = code;
        for _ in 0..n {
            counts[c % m] += 1;
            c /= m;
        }
        let mut cost = 0.0;
        let mut makespan: f64 = 0.0;
        for (k, s) in servers.iter().enumerate() {
            cost += counts[k] as f64 * len_s * s.price;
            let rounds = counts[k].div_ceil(s.slots);
            makespan = makespan.max(rounds as f64 * len_s);
        }
        out.push((cost, makespan));
    }
    out
}

/// Cheapest cost whose makespan meets `deadline_s`.
pub fn min_cost(n: usize, servers: &[OServer], len_s: f64, deadline_s: f64) -> Option<f64> {
    enumerate(n, servers, len_s)
        .into_iter()
        .filter(|&(_, mk)| mk <= deadline_s + 1e-9)
        .map(|(c, _)| c)
        .min_by(f64::total_cmp)
}

/// Shortest makespan whose cost fits `budget`.
pub fn min_makespan(n: usize, servers: &[OServer], len_s: f64, budget: f64) -> Option<f64> {
    enumerate(n, servers, len_s)
        .into_iter()
        .filter(|&(c, _)| c <= budget + 1e-9)
        .map(|(_, mk)| mk)
        .min_by(f64::total_cmp)
}

/// Index minimizing `key` over all candidates, lowest index on ties.
pub fn argmin_by<T>(items: &[T], key: impl Fn(&T) -> (f64, f64)) -> Option<usize> {
    let mut best: Option<(usize, (f64, f64))> = None;
    for (i, it) in items.iter().enumerate() {
        let k = key(it);
        if best.is_none_or(|(_, b)| k < b) {
            best = Some((i, k));
        }
    }
    best.map(|(i, _)| i)
}
