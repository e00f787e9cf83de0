#![allow(dead_code)]

use std::collections::HashMap;

use oxa_core::record::{Corpus, TrajectoryRecord};
use oxa_core::sampler::{select_extreme, select_promotion, Direction, GaussianTarget, SamplerOptions, UNBOUNDED};
use proptest::prelude::*;

pub fn scored(id: String, query: String, ppl: f64, length: u64, verified: bool) -> TrajectoryRecord {
    let mut r = TrajectoryRecord::new(id, query, "response");
    r.ppl = Some(ppl);
    r.length = Some(length);
    r.verified = Some(verified);
    r
}

/// Small corpora with repeated queries, tied lengths and tied perplexities, and
/// some perplexities outside the default `[1, 5]` range.
pub fn arb_records() -> impl Strategy<Value = Vec<TrajectoryRecord>> {
    let ppl = prop_oneof![
        3 => 1.0..5.0f64,
        1 => prop::sample::select(vec![1.0, 2.0, 2.5, 2.55, 3.0, 5.0, 0.9, 5.2, 7.0]),
    ];
    prop::collection::vec((0u8..12, ppl, 1u64..8, any::<bool>()), 0..120).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (q, ppl, len, ok))| scored(format!("id{i:04}"), format!("q{q}"), ppl, len, ok))
            .collect()
    })
}

pub fn arb_target() -> impl Strategy<Value = GaussianTarget> {
    (
        1.5..3.5f64,
        0.1..1.0f64,
        prop::sample::select(vec![0.05, 0.1, 0.25, 0.5]),
        1usize..60,
        prop::sample::select(vec![1, 2, 3, UNBOUNDED]),
    )
        .prop_map(|(mu, sigma, bin_width, total, cap)| GaussianTarget {
            mu,
            sigma,
            p_min: 1.0,
            p_max: 5.0,
            bin_width,
            total,
            max_per_query: cap,
        })
}

/// Plain re-statement of the suppression rule: sort by (ppl, id), walk, take
/// while the query has room, stop at `count`.
pub fn naive_suppression(failed: &[TrajectoryRecord], count: usize, cap: usize) -> Vec<String> {
    let mut rows: Vec<&TrajectoryRecord> = failed.iter().collect();
    rows.sort_by(|a, b| a.ppl.unwrap().partial_cmp(&b.ppl.unwrap()).unwrap().then(a.id.cmp(&b.id)));
    let mut used: HashMap<&str, usize> = HashMap::new();
    let mut out = Vec::new();
    for r in rows {
        if out.len() == count {
            break;
        }
        let u = used.entry(&r.query).or_default();
        if *u < cap {
            *u += 1;
            out.push(r.id.clone());
        }
    }
    out.sort();
    out
}

fn in_bin(ppl: f64, lo: f64, hi: f64, last: bool) -> bool {
    lo <= ppl && (ppl < hi || (last && ppl <= hi))
}

/// Checks the promotion and suppression invariants on one corpus.
pub fn check_selection(records: &[TrajectoryRecord], target: &GaussianTarget, suppress_count: usize) -> Result<(), String> {
    let corpus = Corpus::from_records(records.to_vec()).map_err(|e| e.to_string())?;
    let correct = corpus.filter(|r| r.verified == Some(true));
    let failed = corpus.filter(|r| r.verified == Some(false));
    let sel = select_promotion(&correct, target, SamplerOptions::default()).map_err(|e| e.to_string())?;
    let cap = target.max_per_query;

    let mut per_query: HashMap<&str, usize> = HashMap::new();
    for r in &sel.selected {
        *per_query.entry(&r.query).or_default() += 1;
        let p = r.ppl.unwrap();
        if !(target.p_min..=target.p_max).contains(&p) {
            return Err(format!("selected ppl {p} outside range"));
        }
        if r.verified != Some(true) {
            return Err(format!("selected unverified record {}", r.id));
        }
    }
    if let Some((q, n)) = per_query.iter().find(|(_, &n)| n > cap) {
        return Err(format!("query {q} selected {n} times with cap {cap}"));
    }
    if sel.selected.len() > target.total {
        return Err("selected more than the budget".into());
    }

    // Within each bin, a candidate ranked ahead of the last selected one, or any
    // candidate of an unfilled bin, can only be skipped because its query is full.
    let edges = &sel.allocation.edges;
    let m = sel.allocation.bin_count;
    for i in 0..m {
        let mut cands: Vec<&TrajectoryRecord> = correct
            .iter()
            .filter(|r| in_bin(r.ppl.unwrap(), edges[i], edges[i + 1], i + 1 == m))
            .collect();
        cands.sort_by(|a, b| b.length.cmp(&a.length).then(a.id.cmp(&b.id)));
        let chosen: Vec<bool> = cands.iter().map(|r| sel.selected.get(&r.id).is_some()).collect();
        let n_sel = chosen.iter().filter(|&&c| c).count();
        if n_sel != sel.allocation.selected_per_bin[i] {
            return Err(format!("bin {i}: report says {} selected, found {n_sel}", sel.allocation.selected_per_bin[i]));
        }
        if n_sel > sel.allocation.targets[i] {
            return Err(format!("bin {i} over its target"));
        }
        let last = chosen.iter().rposition(|&c| c);
        let unfilled = n_sel < sel.allocation.targets[i];
        for (k, r) in cands.iter().enumerate() {
            let ahead = last.is_some_and(|l| k < l);
            if !chosen[k] && (ahead || unfilled) && per_query.get(r.query.as_str()).copied().unwrap_or(0) < cap {
                return Err(format!("bin {i}: {} skipped while its query had room", r.id));
            }
        }
    }

    // order independence
    let mut reversed = records.to_vec();
    reversed.reverse();
    let again = select_promotion(
        &Corpus::from_records(reversed).unwrap().filter(|r| r.verified == Some(true)),
        target,
        SamplerOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    if again.selected != sel.selected || again.allocation != sel.allocation {
        return Err("selection depends on input order".into());
    }

    if !failed.is_empty() {
        let sup = select_extreme(&failed, suppress_count, Direction::LowestPpl, cap).map_err(|e| e.to_string())?;
        let got: Vec<String> = sup.iter().map(|r| r.id.clone()).collect();
        let want = naive_suppression(failed.records(), suppress_count, cap);
        if got != want {
            return Err(format!("suppression {got:?} != greedy prefix {want:?}"));
        }
    }
    Ok(())
}
