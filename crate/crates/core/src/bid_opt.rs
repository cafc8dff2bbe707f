//! Bid assignment from predicted revenue per click.
//!
//! Under a linear expected-click model `E[CLK_g(b)] = c_g * b` and first-price
//! accounting, expected spend is `c_g * b^2` and expected revenue is
//! `c_g * b * rpc_g`. Maximizing total revenue under a spend budget puts every
//! group at the same revenue-per-spend level `s`, with `bid_g = rpc_g / s`.
//!
//! Two modes:
//! - target-RPS: the operator supplies `s` directly;
//! - budget: `s` solves `sum c_g (rpc_g / s)^2 = B`, in closed form
//!   `s* = sqrt(sum c_g rpc_g^2 / B)` (a bisection fallback is kept for
//!   non-quadratic cost models).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Per-group economics entering the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupEconomics {
    pub group_id: String,
    /// Predicted revenue per click; non-negative.
    pub rpc: f64,
    /// Slope of the expected-click model. In simulation this is ground truth;
    /// on real data it is estimated as historical clicks over historical bid.
    pub click_slope: Option<f64>,
}

/// Bidding mode recorded in the plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BidMode {
    TargetRps,
    Budget,
}

impl std::fmt::Display for BidMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BidMode::TargetRps => write!(f, "target-rps"),
            BidMode::Budget => write!(f, "budget"),
        }
    }
}

/// The optimizer output: per-group bids at one common revenue-per-spend level.
#[derive(Debug, Clone, PartialEq)]
pub struct BidPlan {
    pub mode: BidMode,
    pub bids: BTreeMap<String, f64>,
    /// The equalized revenue-per-spend level.
    pub common_rps: f64,
    /// `sum c_g b_g^2` over groups with a known click slope.
    pub projected_spend: f64,
    /// `sum c_g b_g rpc_g` over groups with a known click slope.
    pub projected_revenue: f64,
    pub budget: Option<f64>,
    /// Groups skipped in budget mode because their click slope is unknown.
    pub excluded_groups: Vec<String>,
}

impl BidPlan {
    /// One-line summary: `mode,common_rps,spend,revenue,budget`.
    pub fn summary_line(&self) -> String {
        let budget = self.budget.map(|b| b.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.mode, self.common_rps, self.projected_spend, self.projected_revenue, budget
        )
    }
}

fn projections(groups: &[GroupEconomics], bids: &BTreeMap<String, f64>) -> (f64, f64) {
    let mut spend = 0.0;
    let mut revenue = 0.0;
    for g in groups {
        let (Some(c), Some(&b)) = (g.click_slope, bids.get(&g.group_id)) else { continue };
        spend += c * b * b;
        revenue += c * b * g.rpc;
    }
    (spend, revenue)
}

fn validate_groups(groups: &[GroupEconomics]) -> Result<()> {
    for g in groups {
        if !(g.rpc.is_finite() && g.rpc >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "group `{}` has invalid rpc {}",
                g.group_id, g.rpc
            )));
        }
        if let Some(c) = g.click_slope {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "group `{}` has invalid click slope {c}",
                    g.group_id
                )));
            }
        }
    }
    Ok(())
}

/// Bids at an operator-supplied revenue-per-spend target: `bid = rpc / target`.
pub fn bid_target_rps(groups: &[GroupEconomics], rps_target: f64) -> Result<BidPlan> {
    if !(rps_target.is_finite() && rps_target > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rps target must be positive, got {rps_target}"
        )));
    }
    validate_groups(groups)?;
    let bids: BTreeMap<String, f64> = groups
        .iter()
        .map(|g| (g.group_id.clone(), if g.rpc > 0.0 { g.rpc / rps_target } else { 0.0 }))
        .collect();
    let (projected_spend, projected_revenue) = projections(groups, &bids);
    Ok(BidPlan {
        mode: BidMode::TargetRps,
        bids,
        common_rps: rps_target,
        projected_spend,
        projected_revenue,
        budget: None,
        excluded_groups: Vec::new(),
    })
}

/// Revenue-maximizing bids under a spend budget.
///
/// Groups with positive rpc but an unknown click slope cannot enter the spend
/// constraint and are excluded (listed in the plan); groups with zero rpc bid
/// zero.
pub fn bid_budget(groups: &[GroupEconomics], budget: f64) -> Result<BidPlan> {
    if !(budget.is_finite() && budget > 0.0) {
        return Err(Error::InvalidArgument(format!("budget must be positive, got {budget}")));
    }
    validate_groups(groups)?;

    let mut excluded = Vec::new();
    let mut active: Vec<&GroupEconomics> = Vec::new();
    for g in groups {
        if g.rpc <= 0.0 {
            continue;
        }
        match g.click_slope {
            Some(_) => active.push(g),
            None => excluded.push(g.group_id.clone()),
        }
    }
    if active.is_empty() {
        return Err(Error::NoPositiveRpc);
    }

    let weighted_sq: f64 = active
        .iter()
        .map(|g| g.click_slope.expect("active") * g.rpc * g.rpc)
        .sum();
    let s_star = (weighted_sq / budget).sqrt();

    let mut bids = BTreeMap::new();
    for g in groups {
        let bid = if g.rpc > 0.0 && g.click_slope.is_some() { g.rpc / s_star } else { 0.0 };
        if g.rpc > 0.0 && g.click_slope.is_none() {
            continue; // excluded from the plan entirely
        }
        bids.insert(g.group_id.clone(), bid);
    }
    let (projected_spend, projected_revenue) = projections(groups, &bids);
    Ok(BidPlan {
        mode: BidMode::Budget,
        bids,
        common_rps: s_star,
        projected_spend,
        projected_revenue,
        budget: Some(budget),
        excluded_groups: excluded,
    })
}

/// Bisection fallback for the common-RPS level, for cost models where the
/// closed form does not apply. Spend is strictly decreasing in `s`, so the
/// bracket always converges. Tolerance is relative on spend.
pub fn solve_rps_bisection(groups: &[GroupEconomics], budget: f64, tol: f64) -> Result<f64> {
    if !(budget.is_finite() && budget > 0.0) {
        return Err(Error::InvalidArgument(format!("budget must be positive, got {budget}")));
    }
    let active: Vec<&GroupEconomics> = groups
        .iter()
        .filter(|g| g.rpc > 0.0 && g.click_slope.is_some())
        .collect();
    if active.is_empty() {
        return Err(Error::NoPositiveRpc);
    }
    let spend_at = |s: f64| -> f64 {
        active
            .iter()
            .map(|g| {
                let b = g.rpc / s;
                g.click_slope.expect("active") * b * b
            })
            .sum()
    };
    let mut lo = 1e-9;
    let mut hi = 1.0;
    while spend_at(hi) > budget {
        hi *= 2.0;
        if hi > 1e18 {
            return Err(Error::NonFinite { context: "bisection bracket".into() });
        }
    }
    while spend_at(lo) < budget {
        lo /= 2.0;
        if lo < 1e-300 {
            return Err(Error::NonFinite { context: "bisection bracket".into() });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let s = spend_at(mid);
        if ((s - budget) / budget).abs() <= tol {
            return Ok(mid);
        }
        if s > budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Relative spread of the optimality quotient `rpc_g / (2 b_g)` across groups
/// with positive rpc. An optimal plan has spread ~0.
pub fn kkt_check(plan: &BidPlan, groups: &[GroupEconomics]) -> f64 {
    let mut quotients = Vec::new();
    for g in groups {
        if g.rpc <= 0.0 {
            continue;
        }
        let Some(&bid) = plan.bids.get(&g.group_id) else { continue };
        if bid <= 0.0 {
            continue;
        }
        quotients.push(g.rpc / (2.0 * bid));
    }
    if quotients.len() <= 1 {
        return 0.0;
    }
    let mean: f64 = quotients.iter().sum::<f64>() / quotients.len() as f64;
    quotients.iter().map(|q| (q - mean).abs() / mean).fold(0.0, f64::max)
}

/// Exhaustive grid-search oracle for instances of at most three groups:
/// maximizes `sum c b rpc` subject to `sum c b^2 <= budget`.
pub fn brute_force_optimum(
    groups: &[GroupEconomics],
    budget: f64,
    grid_step: f64,
) -> Result<(Vec<f64>, f64)> {
    if groups.len() > 3 {
        return Err(Error::InvalidArgument(format!(
            "brute-force oracle supports at most 3 groups, got {}",
            groups.len()
        )));
    }
    if !(grid_step.is_finite() && grid_step > 0.0) {
        return Err(Error::InvalidArgument("grid_step must be positive".into()));
    }
    if !(budget.is_finite() && budget > 0.0) {
        return Err(Error::InvalidArgument("budget must be positive".into()));
    }
    let slopes: Vec<f64> = groups
        .iter()
        .map(|g| {
            g.click_slope.ok_or_else(|| {
                Error::InvalidArgument(format!("group `{}` needs a click slope", g.group_id))
            })
        })
        .collect::<Result<_>>()?;
    let steps: Vec<usize> = slopes
        .iter()
        .map(|&c| ((budget / c).sqrt() / grid_step).floor() as usize)
        .collect();

    struct Search<'a> {
        groups: &'a [GroupEconomics],
        slopes: &'a [f64],
        steps: &'a [usize],
        grid_step: f64,
        budget: f64,
        bids: Vec<f64>,
        best_bids: Vec<f64>,
        best_rev: f64,
    }

    impl Search<'_> {
        fn recurse(&mut self, k: usize, spend: f64, revenue: f64) {
            if k == self.groups.len() {
                if revenue > self.best_rev {
                    self.best_rev = revenue;
                    self.best_bids.clone_from_slice(&self.bids);
                }
                return;
            }
            for step in 0..=self.steps[k] {
                let b = step as f64 * self.grid_step;
                let s = spend + self.slopes[k] * b * b;
                if s > self.budget {
                    break;
                }
                self.bids[k] = b;
                self.recurse(k + 1, s, revenue + self.slopes[k] * b * self.groups[k].rpc);
            }
            self.bids[k] = 0.0;
        }
    }

    let mut search = Search {
        groups,
        slopes: &slopes,
        steps: &steps,
        grid_step,
        budget,
        bids: vec![0.0; groups.len()],
        best_bids: vec![0.0; groups.len()],
        best_rev: 0.0,
    };
    search.recurse(0, 0.0, 0.0);
    Ok((search.best_bids, search.best_rev))
}

// ---------------------------------------------------------------------------
// CSV interfaces
// ---------------------------------------------------------------------------

/// Parses group economics (`group_id,rpc,click_slope`; empty slope = unknown).
pub fn parse_economics_str(text: &str, origin: &str) -> Result<Vec<GroupEconomics>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::BadFormat { path: origin.into(), line: 1, msg: e.to_string() })?
        .clone();
    for (i, expected) in ["group_id", "rpc", "click_slope"].iter().enumerate() {
        match headers.get(i) {
            Some(h) if h == *expected => {}
            other => {
                return Err(Error::BadHeader {
                    path: origin.to_string(),
                    column: other.unwrap_or("<missing>").to_string(),
                    expected: (*expected).to_string(),
                })
            }
        }
    }
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for row in reader.records() {
        let record = row.map_err(|e| Error::BadFormat {
            path: origin.into(),
            line: 0,
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let gid = record.get(0).unwrap_or("").trim().to_string();
        if gid.is_empty() {
            return Err(Error::MalformedField {
                path: origin.into(),
                line,
                field: "group_id".into(),
                msg: "must be non-empty".into(),
            });
        }
        if !seen.insert(gid.clone()) {
            return Err(Error::DuplicateKey { path: origin.into(), line, key: gid });
        }
        let rpc: f64 = record.get(1).unwrap_or("").trim().parse().map_err(|_| {
            Error::MalformedField {
                path: origin.into(),
                line,
                field: "rpc".into(),
                msg: "must be a real number".into(),
            }
        })?;
        if !rpc.is_finite() || rpc < 0.0 {
            return Err(Error::MalformedField {
                path: origin.into(),
                line,
                field: "rpc".into(),
                msg: "must be finite and non-negative".into(),
            });
        }
        let slope_raw = record.get(2).unwrap_or("").trim();
        let click_slope = if slope_raw.is_empty() {
            None
        } else {
            let c: f64 = slope_raw.parse().map_err(|_| Error::MalformedField {
                path: origin.into(),
                line,
                field: "click_slope".into(),
                msg: "must be a real number".into(),
            })?;
            if !c.is_finite() || c <= 0.0 {
                return Err(Error::MalformedField {
                    path: origin.into(),
                    line,
                    field: "click_slope".into(),
                    msg: "must be finite and positive".into(),
                });
            }
            Some(c)
        };
        out.push(GroupEconomics { group_id: gid, rpc, click_slope });
    }
    Ok(out)
}

pub fn read_economics(path: &Path) -> Result<Vec<GroupEconomics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_economics_str(&text, &path.display().to_string())
}

/// Writes bids as `group_id,bid`.
pub fn write_bids(path: &Path, plan: &BidPlan) -> Result<()> {
    let mut out = String::from("group_id,bid\n");
    for (gid, bid) in &plan.bids {
        let _ = writeln!(out, "{gid},{bid}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn econ(id: &str, rpc: f64, c: Option<f64>) -> GroupEconomics {
        GroupEconomics { group_id: id.into(), rpc, click_slope: c }
    }

    #[test]
    fn target_rps_divides_directly() {
        let groups = vec![econ("a", 2.0, Some(1.0)), econ("b", 1.0, Some(1.0))];
        let plan = bid_target_rps(&groups, 1.0).unwrap();
        assert_eq!(plan.bids["a"], 2.0);
        assert_eq!(plan.bids["b"], 1.0);
        let plan = bid_target_rps(&groups, 2.0).unwrap();
        assert_eq!(plan.bids["a"], 1.0);
        assert_eq!(plan.bids["b"], 0.5);
        let zero = bid_target_rps(&[econ("z", 0.0, Some(1.0))], 1.0).unwrap();
        assert_eq!(zero.bids["z"], 0.0);
        assert!(bid_target_rps(&groups, 0.0).is_err());
        assert!(bid_target_rps(&groups, -1.0).is_err());
    }

    #[test]
    fn budget_mode_matches_closed_form_instances() {
        // c=(1,1), rpc=(2,1), B=5 -> s*=1, bids (2,1), spend 5, revenue 5.
        let groups = vec![econ("a", 2.0, Some(1.0)), econ("b", 1.0, Some(1.0))];
        let plan = bid_budget(&groups, 5.0).unwrap();
        assert!((plan.common_rps - 1.0).abs() < 1e-12);
        assert!((plan.bids["a"] - 2.0).abs() < 1e-9);
        assert!((plan.bids["b"] - 1.0).abs() < 1e-9);
        assert!((plan.projected_spend - 5.0).abs() < 5.0 * 1e-9);
        assert!((plan.projected_revenue - 5.0).abs() < 1e-9);
        assert_eq!(kkt_check(&plan, &groups), 0.0);

        // c=(1,2), rpc=(3,1), B=11 -> s*=1, bids (3,1), spend 11.
        let groups = vec![econ("a", 3.0, Some(1.0)), econ("b", 1.0, Some(2.0))];
        let plan = bid_budget(&groups, 11.0).unwrap();
        assert!((plan.bids["a"] - 3.0).abs() < 1e-9);
        assert!((plan.bids["b"] - 1.0).abs() < 1e-9);
        assert!((plan.projected_spend - 11.0).abs() < 11.0 * 1e-9);
    }

    #[test]
    fn quadrupled_budget_doubles_bids() {
        let groups = vec![econ("a", 2.0, Some(0.7)), econ("b", 0.5, Some(1.3))];
        let p1 = bid_budget(&groups, 3.0).unwrap();
        let p4 = bid_budget(&groups, 12.0).unwrap();
        for id in ["a", "b"] {
            assert!((p4.bids[id] - 2.0 * p1.bids[id]).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbed_bid_breaks_kkt() {
        let groups = vec![econ("a", 2.0, Some(1.0)), econ("b", 1.0, Some(1.0))];
        let mut plan = bid_budget(&groups, 5.0).unwrap();
        *plan.bids.get_mut("a").unwrap() *= 1.1;
        assert!(kkt_check(&plan, &groups) > 0.04);
    }

    #[test]
    fn single_group_kkt_is_vacuous() {
        let groups = vec![econ("a", 2.0, Some(1.0))];
        let plan = bid_budget(&groups, 4.0).unwrap();
        assert_eq!(kkt_check(&plan, &groups), 0.0);
    }

    #[test]
    fn all_zero_rpc_is_an_error() {
        let groups = vec![econ("a", 0.0, Some(1.0)), econ("b", 0.0, Some(2.0))];
        assert!(matches!(bid_budget(&groups, 5.0), Err(Error::NoPositiveRpc)));
    }

    #[test]
    fn missing_slope_groups_are_excluded_with_note() {
        let groups = vec![econ("a", 2.0, Some(1.0)), econ("b", 1.0, None), econ("z", 0.0, None)];
        let plan = bid_budget(&groups, 4.0).unwrap();
        assert_eq!(plan.excluded_groups, vec!["b".to_string()]);
        assert!(!plan.bids.contains_key("b"));
        assert_eq!(plan.bids["z"], 0.0);
        assert!((plan.projected_spend - 4.0).abs() < 1e-9);
    }

    #[test]
    fn bisection_agrees_with_closed_form() {
        let groups = vec![
            econ("a", 1.7, Some(0.4)),
            econ("b", 0.6, Some(2.1)),
            econ("c", 3.1, Some(0.9)),
        ];
        let budget = 7.3;
        let closed = bid_budget(&groups, budget).unwrap().common_rps;
        let bisect = solve_rps_bisection(&groups, budget, 1e-12).unwrap();
        assert!(
            (closed - bisect).abs() / closed < 1e-9,
            "closed {closed} vs bisect {bisect}"
        );
    }

    #[test]
    fn oracle_stays_within_grid_resolution_of_solver() {
        let groups = vec![econ("a", 2.0, Some(1.0)), econ("b", 1.0, Some(1.0))];
        let plan = bid_budget(&groups, 5.0).unwrap();
        let (bids, revenue) = brute_force_optimum(&groups, 5.0, 0.01).unwrap();
        assert!(revenue <= plan.projected_revenue * 1.005);
        assert!(revenue >= plan.projected_revenue * 0.99);
        assert!((bids[0] - 2.0).abs() < 0.05);
        assert!((bids[1] - 1.0).abs() < 0.05);
    }

    #[test]
    fn vanishing_budget_drives_bids_to_zero() {
        let groups = vec![econ("a", 2.0, Some(1.0)), econ("b", 1.0, Some(1.0))];
        let (bids, _) = brute_force_optimum(&groups, 1e-6, 1e-4).unwrap();
        assert!(bids.iter().all(|&b| b < 0.01));
        let plan = bid_budget(&groups, 1e-6).unwrap();
        assert!(plan.bids.values().all(|&b| b < 0.01));
    }

    #[test]
    fn dominant_group_beats_single_group_allocations() {
        let groups = vec![econ("big", 100.0, Some(1.0)), econ("tiny", 0.01, Some(1.0))];
        let budget = 4.0;
        let (_, oracle_rev) = brute_force_optimum(&groups, budget, 0.01).unwrap();
        // Spending the whole budget on either single group:
        for g in &groups {
            let b = (budget / g.click_slope.unwrap()).sqrt();
            let single = g.click_slope.unwrap() * b * g.rpc;
            assert!(oracle_rev + 1e-9 >= single, "oracle {oracle_rev} < single {single}");
        }
    }

    #[test]
    fn equal_rps_invariant_holds_in_both_modes() {
        let groups = vec![
            econ("a", 1.7, Some(0.4)),
            econ("b", 0.6, Some(2.1)),
            econ("c", 3.1, Some(0.9)),
            econ("z", 0.0, Some(1.0)),
        ];
        for plan in [bid_budget(&groups, 7.3).unwrap(), bid_target_rps(&groups, 1.4).unwrap()] {
            for g in &groups {
                if g.rpc > 0.0 {
                    let ratio = g.rpc / plan.bids[&g.group_id];
                    assert!(
                        ((ratio - plan.common_rps) / plan.common_rps).abs() < 1e-9,
                        "{ratio} vs {}",
                        plan.common_rps
                    );
                }
            }
        }
    }

    #[test]
    fn economics_csv_parses_and_validates() {
        let text = "group_id,rpc,click_slope\ng_0,2,1\ng_1,1,\n";
        let groups = parse_economics_str(text, "mem").unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[1].click_slope, None);
        assert!(parse_economics_str("group_id,rpc,click_slope\ng,-1,1\n", "mem").is_err());
        assert!(parse_economics_str("group_id,rpc,click_slope\ng,1,0\n", "mem").is_err());
        assert!(parse_economics_str("bad,header,row\n", "mem").is_err());
    }
}
