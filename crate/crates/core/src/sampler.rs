//! Gaussian-guided perplexity sampling and extreme-perplexity selection.
//!
//! Promotion data is chosen in three passes:
//!
//! 1. **Binning.** `M = ceil((p_max - p_min) / w)` bins; bin `i` covers
//!    `[p_min + i·w, p_min + (i+1)·w)` and the last bin is closed at `p_max`.
//!    Records outside `[p_min, p_max]` are discarded.
//! 2. **Targets.** Each bin gets the normal density `d_i` at its center `x_i`,
//!    and `T_i = floor(N · d_i / Σ d_j)`. The remainder `N - Σ T_i` is handed out
//!    one unit at a time by descending fractional part, ties to the lower bin.
//! 3. **Length-prioritized fill.** Bins in ascending order; within a bin,
//!    candidates by descending length (ties by id). A candidate is admitted while
//!    the bin is below `T_i` and its query has fewer than `d` selections.
//!
//! Every ordering used here is total, so the selection is a pure function of the
//! record set and the target.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{Corpus, TrajectoryRecord};

/// Fractional parts closer than this are treated as tied when distributing the remainder.
const FRACTION_RESOLUTION: f64 = 1e-9;

/// Sentinel for "no per-query cap".
pub const UNBOUNDED: usize = usize::MAX;

/// Target distribution and limits for promotion sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianTarget {
    pub mu: f64,
    pub sigma: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub bin_width: f64,
    pub total: usize,
    /// Maximum selected responses per query; [`UNBOUNDED`] disables the cap.
    pub max_per_query: usize,
}

impl Default for GaussianTarget {
    fn default() -> Self {
        GaussianTarget {
            mu: 2.5,
            sigma: 0.25,
            p_min: 1.0,
            p_max: 5.0,
            bin_width: 0.05,
            total: 50_000,
            max_per_query: 1,
        }
    }
}

impl GaussianTarget {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.mu.is_finite()) {
            return fail(format!("mu must be finite, got {}", self.mu));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return fail(format!("sigma must be > 0, got {}", self.sigma));
        }
        if !(self.p_min.is_finite() && self.p_max.is_finite() && 1.0 <= self.p_min && self.p_min < self.p_max) {
            return fail(format!(
                "PPL range must satisfy 1 <= p_min < p_max, got [{}, {}]",
                self.p_min, self.p_max
            ));
        }
        if !(self.bin_width > 0.0 && self.bin_width <= self.p_max - self.p_min) {
            return fail(format!(
                "bin width must be in (0, p_max - p_min], got {}",
                self.bin_width
            ));
        }
        if self.total == 0 {
            return fail("total must be positive".into());
        }
        if self.max_per_query == 0 {
            return fail("max_per_query must be positive".into());
        }
        Ok(())
    }

    /// `ceil((p_max - p_min) / w)`, with quotients within 1e-9 of an integer
    /// snapped to it so that e.g. 4 / 0.05 gives 80 bins.
    pub fn bin_count(&self) -> usize {
        let q = (self.p_max - self.p_min) / self.bin_width;
        let r = q.round();
        let m = if (q - r).abs() <= 1e-9 * r.max(1.0) { r } else { q.ceil() };
        m.max(1.0) as usize
    }

    /// Bin edges; the last edge is `p_max`.
    pub fn edges(&self) -> Vec<f64> {
        let m = self.bin_count();
        (0..=m)
            .map(|i| {
                if i == m {
                    self.p_max
                } else {
                    self.p_min + i as f64 * self.bin_width
                }
            })
            .collect()
    }

    /// Bin index of a perplexity, or `None` if it lies outside `[p_min, p_max]`.
    pub fn bin_of(&self, ppl: f64, edges: &[f64]) -> Option<usize> {
        if !(ppl >= self.p_min && ppl <= self.p_max) {
            return None;
        }
        let m = edges.len() - 1;
        let mut i = (((ppl - self.p_min) / self.bin_width).floor() as usize).min(m - 1);
        // settle floating-point disagreements against the stored edges
        while i > 0 && ppl < edges[i] {
            i -= 1;
        }
        while i + 1 < m && ppl >= edges[i + 1] {
            i += 1;
        }
        Some(i)
    }

    /// Normal density at `x`.
    pub fn density(&self, x: f64) -> f64 {
        let z = (x - self.mu) / self.sigma;
        (-0.5 * z * z).exp() / (self.sigma * (2.0 * std::f64::consts::PI).sqrt())
    }
}

/// Per-bin geometry, quotas and realized counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinAllocation {
    pub bin_count: usize,
    pub edges: Vec<f64>,
    pub centers: Vec<f64>,
    pub densities: Vec<f64>,
    pub targets: Vec<usize>,
    pub selected_per_bin: Vec<usize>,
}

impl BinAllocation {
    /// Geometry and densities only; targets and selections are zero.
    pub fn skeleton(target: &GaussianTarget) -> Self {
        let edges = target.edges();
        let centers: Vec<f64> = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let densities = centers.iter().map(|&x| target.density(x)).collect();
        let m = centers.len();
        BinAllocation {
            bin_count: m,
            edges,
            centers,
            densities,
            targets: vec![0; m],
            selected_per_bin: vec![0; m],
        }
    }

    pub fn total_target(&self) -> usize {
        self.targets.iter().sum()
    }

    pub fn total_selected(&self) -> usize {
        self.selected_per_bin.iter().sum()
    }

    /// `bin_center,density,target,selected` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["bin_center", "density", "target", "selected"])
            .expect("in-memory write");
        for i in 0..self.bin_count {
            w.write_record([
                self.centers[i].to_string(),
                self.densities[i].to_string(),
                self.targets[i].to_string(),
                self.selected_per_bin[i].to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii csv")
    }
}

/// Toggles for the two places where the literal procedure leaves a choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerOptions {
    /// Hand out `N - Σ floor(·)` by largest remainder so that `Σ T_i == N`.
    pub remainder_topup: bool,
    /// Reassign quota left unused by under-supplied bins to bins with spare supply.
    pub redistribute: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        SamplerOptions {
            remainder_topup: true,
            redistribute: false,
        }
    }
}

/// Records grouped by bin, plus how many were dropped as out of range.
#[derive(Debug, Clone)]
pub struct BinnedRecords<'a> {
    pub allocation: BinAllocation,
    pub bins: Vec<Vec<&'a TrajectoryRecord>>,
    pub discarded: usize,
}

fn require<T: Copy>(record: &TrajectoryRecord, value: Option<T>, field: &str, stage: &'static str) -> Result<T> {
    value.ok_or_else(|| Error::Precondition {
        stage,
        id: record.id.clone(),
        message: format!("{field} is missing"),
    })
}

/// Assigns records to bins. Every record must carry `ppl` and `length`.
pub fn bin_records<'a>(corpus: &'a Corpus, target: &GaussianTarget) -> Result<BinnedRecords<'a>> {
    target.validate()?;
    let allocation = BinAllocation::skeleton(target);
    let mut bins = vec![Vec::new(); allocation.bin_count];
    let mut discarded = 0;
    for record in corpus {
        let ppl = require(record, record.ppl, "ppl", "select-promote")?;
        require(record, record.length, "length", "select-promote")?;
        match target.bin_of(ppl, &allocation.edges) {
            Some(i) => bins[i].push(record),
            None => discarded += 1,
        }
    }
    Ok(BinnedRecords {
        allocation,
        bins,
        discarded,
    })
}

/// Integer apportionment of `total` proportional to `weights`.
///
/// Floors first; with `topup`, the leftover units go to the largest fractional
/// parts (resolved at [`FRACTION_RESOLUTION`], ties to the lower index).
pub fn apportion(weights: &[f64], total: usize, topup: bool) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || !(sum > 0.0) {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * (w / sum)).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    if topup {
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<(u64, usize)> = quotas
            .iter()
            .enumerate()
            .map(|(i, q)| (((q - q.floor()) / FRACTION_RESOLUTION).round() as u64, i))
            .collect();
        order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in order.iter().cycle().take(total.saturating_sub(assigned)) {
            counts[i] += 1;
        }
    }
    counts
}

/// Fills in `T_i` from the densities.
pub fn allocate_targets(mut alloc: BinAllocation, target: &GaussianTarget, options: SamplerOptions) -> BinAllocation {
    alloc.targets = apportion(&alloc.densities, target.total, options.remainder_topup);
    alloc.selected_per_bin = vec![0; alloc.bin_count];
    alloc
}

/// Descending length, then ascending id.
fn by_length_desc(a: &&TrajectoryRecord, b: &&TrajectoryRecord) -> Ordering {
    b.length.cmp(&a.length).then_with(|| a.id.cmp(&b.id))
}

/// Result of promotion sampling.
#[derive(Debug, Clone)]
pub struct PromotionSelection {
    pub selected: Corpus,
    pub allocation: BinAllocation,
    /// Records outside `[p_min, p_max]`.
    pub discarded: usize,
}

/// One pass of the length-prioritized fill. Returns selected records per bin.
fn fill_bins<'a>(
    bins: &[Vec<&'a TrajectoryRecord>],
    targets: &[usize],
    cap: usize,
) -> Vec<Vec<&'a TrajectoryRecord>> {
    let mut per_query: HashMap<&str, usize> = HashMap::new();
    bins.iter()
        .zip(targets)
        .map(|(bin, &quota)| {
            let mut taken = Vec::new();
            for &record in bin {
                if taken.len() >= quota {
                    break;
                }
                let count = per_query.entry(record.query.as_str()).or_insert(0);
                if *count < cap {
                    *count += 1;
                    taken.push(record);
                }
            }
            taken
        })
        .collect()
}

/// Candidates in each bin that could still be admitted given the final query counts.
fn spare_supply(bins: &[Vec<&TrajectoryRecord>], chosen: &[Vec<&TrajectoryRecord>], cap: usize) -> Vec<usize> {
    let mut per_query: HashMap<&str, usize> = HashMap::new();
    for r in chosen.iter().flatten() {
        *per_query.entry(r.query.as_str()).or_insert(0) += 1;
    }
    bins.iter()
        .zip(chosen)
        .map(|(bin, taken)| {
            let taken: HashSet<&str> = taken.iter().map(|t| t.id.as_str()).collect();
            let mut extra: HashMap<&str, usize> = HashMap::new();
            bin.iter()
                .filter(|r| !taken.contains(r.id.as_str()))
                .filter(|r| {
                    let used = per_query.get(r.query.as_str()).copied().unwrap_or(0);
                    let e = extra.entry(r.query.as_str()).or_insert(0);
                    if used + *e < cap {
                        *e += 1;
                        true
                    } else {
                        false
                    }
                })
                .count()
        })
        .collect()
}

/// Gaussian-guided promotion sampling over verified-correct records.
pub fn select_promotion(
    corpus: &Corpus,
    target: &GaussianTarget,
    options: SamplerOptions,
) -> Result<PromotionSelection> {
    let BinnedRecords {
        allocation,
        mut bins,
        discarded,
    } = bin_records(corpus, target)?;
    for bin in &mut bins {
        bin.sort_by(by_length_desc);
    }
    let mut allocation = allocate_targets(allocation, target, options);
    let cap = target.max_per_query;
    let mut chosen = fill_bins(&bins, &allocation.targets, cap);

    if options.redistribute {
        // each round moves unused quota onto bins that still have admissible candidates
        for _ in 0..=allocation.bin_count {
            let shortfall: usize = allocation
                .targets
                .iter()
                .zip(&chosen)
                .map(|(t, c)| t - c.len())
                .sum();
            if shortfall == 0 {
                break;
            }
            let spare = spare_supply(&bins, &chosen, cap);
            let open: Vec<usize> = (0..allocation.bin_count)
                .filter(|&i| chosen[i].len() == allocation.targets[i] && spare[i] > 0)
                .collect();
            if open.is_empty() {
                break;
            }
            for i in 0..allocation.bin_count {
                allocation.targets[i] = allocation.targets[i].min(chosen[i].len());
            }
            let weights: Vec<f64> = open.iter().map(|&i| allocation.densities[i]).collect();
            let mut extra = apportion(&weights, shortfall, true);
            // bins cannot take more than their spare supply; pass the excess on by density order
            let mut overflow = 0;
            for (k, &i) in open.iter().enumerate() {
                let add = extra[k].min(spare[i]);
                overflow += extra[k] - add;
                extra[k] = add;
            }
            let mut by_density: Vec<usize> = (0..open.len()).collect();
            by_density.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
            for &k in &by_density {
                let room = spare[open[k]] - extra[k];
                let add = room.min(overflow);
                extra[k] += add;
                overflow -= add;
            }
            for (k, &i) in open.iter().enumerate() {
                allocation.targets[i] += extra[k];
            }
            let next = fill_bins(&bins, &allocation.targets, cap);
            let progressed = next.iter().map(Vec::len).sum::<usize>() > chosen.iter().map(Vec::len).sum::<usize>();
            chosen = next;
            if !progressed {
                break;
            }
        }
        // quotas that could not be met are reduced to what was realized
        let spare = spare_supply(&bins, &chosen, cap);
        for i in 0..allocation.bin_count {
            if chosen[i].len() < allocation.targets[i] && spare[i] == 0 {
                allocation.targets[i] = chosen[i].len();
            }
        }
    }

    allocation.selected_per_bin = chosen.iter().map(Vec::len).collect();
    let selected = Corpus::from_records(chosen.into_iter().flatten().cloned().collect())?;
    if selected.len() > target.total {
        return Err(Error::Invariant(format!(
            "selected {} records with a budget of {}",
            selected.len(),
            target.total
        )));
    }
    Ok(PromotionSelection {
        selected,
        allocation,
        discarded,
    })
}

/// Sort direction for [`select_extreme`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    LowestPpl,
    HighestPpl,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lowest" | "lowest-ppl" | "lowest_ppl" => Ok(Direction::LowestPpl),
            "highest" | "highest-ppl" | "highest_ppl" => Ok(Direction::HighestPpl),
            other => Err(Error::Config(format!("unknown direction {other:?}; expected lowest or highest"))),
        }
    }
}

/// Greedy selection of the `count` lowest- (or highest-) perplexity records,
/// ties by id, at most `max_per_query` per query.
pub fn select_extreme(corpus: &Corpus, count: usize, direction: Direction, max_per_query: usize) -> Result<Corpus> {
    if count == 0 {
        return Err(Error::domain("selection count must be positive"));
    }
    if max_per_query == 0 {
        return Err(Error::domain("max_per_query must be positive"));
    }
    let mut ranked: Vec<(f64, &TrajectoryRecord)> = corpus
        .iter()
        .map(|r| Ok((require(r, r.ppl, "ppl", "select-suppress")?, r)))
        .collect::<Result<_>>()?;
    ranked.sort_by(|(pa, a), (pb, b)| {
        let primary = match direction {
            Direction::LowestPpl => pa.total_cmp(pb),
            Direction::HighestPpl => pb.total_cmp(pa),
        };
        primary.then_with(|| a.id.cmp(&b.id))
    });
    let mut per_query: HashMap<&str, usize> = HashMap::new();
    let mut out = Vec::new();
    for (_, record) in ranked {
        if out.len() == count {
            break;
        }
        let c = per_query.entry(record.query.as_str()).or_insert(0);
        if *c < max_per_query {
            *c += 1;
            out.push(record.clone());
        }
    }
    Corpus::from_records(out)
}
