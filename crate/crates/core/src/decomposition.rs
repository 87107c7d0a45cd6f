//! Correlation-energy decomposition.
//!
//! Mean matched correlations from four capture conditions (lens or pinhole,
//! with or without dark current) are treated as additive correlation energies
//! on a scale where the total power is 1:
//!
//! ```text
//! lens,    dark current present : spn  + los = lens_with_dark
//! pinhole, dark current present : spn        = pinhole_with_dark
//! lens,    dark removed         : prnu + los = lens_no_dark
//! pinhole, dark removed         : prnu       = pinhole_no_dark
//! spn = prnu + fpn
//! ```
//!
//! The lens term is obtained twice (with and without dark current); the two
//! values should agree.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::median_sorted;

/// Default tolerance on the disagreement between the two lens estimates.
pub const LOS_CONSISTENCY_TOLERANCE: f64 = 0.002;

/// Mean matched-camera correlation under each capture condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionMeans {
    pub lens_with_dark: f64,
    pub pinhole_with_dark: f64,
    pub lens_no_dark: f64,
    pub pinhole_no_dark: f64,
}

impl ConditionMeans {
    pub fn new(lens_with_dark: f64, pinhole_with_dark: f64, lens_no_dark: f64, pinhole_no_dark: f64) -> Result<Self> {
        let m = ConditionMeans {
            lens_with_dark,
            pinhole_with_dark,
            lens_no_dark,
            pinhole_no_dark,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("{name} = {v} is not a correlation in [-1, 1]")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("lens_with_dark", self.lens_with_dark),
            ("pinhole_with_dark", self.pinhole_with_dark),
            ("lens_no_dark", self.lens_no_dark),
            ("pinhole_no_dark", self.pinhole_no_dark),
        ]
    }

    pub fn scaled(&self, c: f64) -> Self {
        ConditionMeans {
            lens_with_dark: self.lens_with_dark * c,
            pinhole_with_dark: self.pinhole_with_dark * c,
            lens_no_dark: self.lens_no_dark * c,
            pinhole_no_dark: self.pinhole_no_dark * c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyDecomposition {
    pub spn: f64,
    pub prnu: f64,
    pub fpn: f64,
    pub los: f64,
    /// Lens term recomputed from the dark-corrected conditions.
    pub los_check: f64,
    pub los_delta: f64,
    pub extended_fingerprint: f64,
    pub residual_uncorrelated: f64,
    pub warnings: Vec<String>,
}

/// Solves the four-condition model. Never fails; implausible inputs produce warnings.
pub fn solve(means: &ConditionMeans) -> EnergyDecomposition {
    solve_with_tolerance(means, LOS_CONSISTENCY_TOLERANCE)
}

pub fn solve_with_tolerance(means: &ConditionMeans, los_tolerance: f64) -> EnergyDecomposition {
    let spn = means.pinhole_with_dark;
    let los = means.lens_with_dark - means.pinhole_with_dark;
    let prnu = means.pinhole_no_dark;
    let los_check = means.lens_no_dark - means.pinhole_no_dark;
    let fpn = spn - prnu;
    let extended_fingerprint = spn + los;

    let mut warnings = Vec::new();
    if means.lens_with_dark < means.pinhole_with_dark {
        warnings.push("lens_with_dark below pinhole_with_dark".to_string());
    }
    if means.lens_no_dark < means.pinhole_no_dark {
        warnings.push("lens_no_dark below pinhole_no_dark".to_string());
    }
    if fpn < 0.0 {
        warnings.push(format!("negative dark-current energy {fpn:.6}"));
    }
    if los < 0.0 {
        warnings.push(format!("negative lens energy {los:.6}"));
    }
    let los_delta = (los - los_check).abs();
    if los_delta > los_tolerance {
        warnings.push(format!(
            "lens estimates disagree by {los_delta:.6} (tolerance {los_tolerance})"
        ));
    }

    EnergyDecomposition {
        spn,
        prnu,
        fpn,
        los,
        los_check,
        los_delta,
        extended_fingerprint,
        residual_uncorrelated: 1.0 - extended_fingerprint,
        warnings,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Identifier {
    Prnu,
    Fpn,
    Los,
    Spn,
    SpnLos,
    Residual,
}

impl Identifier {
    pub const ALL: [Identifier; 6] = [
        Identifier::Prnu,
        Identifier::Fpn,
        Identifier::Los,
        Identifier::Spn,
        Identifier::SpnLos,
        Identifier::Residual,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Identifier::Prnu => "PRNU",
            Identifier::Fpn => "FPN",
            Identifier::Los => "LOS",
            Identifier::Spn => "SPN",
            Identifier::SpnLos => "SPN+LOS",
            Identifier::Residual => "residual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnpEntry {
    pub identifier: Identifier,
    /// Raw solved energy.
    pub energy: f64,
    /// Fraction of total power, floored at 0.
    pub ratio: f64,
    /// `10 log10(ratio)`; negative infinity when the ratio is 0.
    pub snp_db: f64,
}

/// Shares of the extended fingerprint (PRNU + FPN + LOS).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FingerprintShares {
    pub prnu: f64,
    pub fpn: f64,
    pub los: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnpTable {
    pub entries: Vec<SnpEntry>,
    pub shares: FingerprintShares,
}

impl SnpTable {
    pub fn get(&self, id: Identifier) -> &SnpEntry {
        self.entries
            .iter()
            .find(|e| e.identifier == id)
            .expect("every identifier has an entry")
    }
}

/// Signal-to-power in decibels.
pub fn snp_db(ratio: f64) -> f64 {
    if ratio > 0.0 {
        10.0 * ratio.log10()
    } else {
        f64::NEG_INFINITY
    }
}

/// Expresses each energy as a fraction of unit total power.
pub fn snp_table(d: &EnergyDecomposition) -> SnpTable {
    let energies = [
        (Identifier::Prnu, d.prnu),
        (Identifier::Fpn, d.fpn),
        (Identifier::Los, d.los),
        (Identifier::Spn, d.spn),
        (Identifier::SpnLos, d.extended_fingerprint),
        (Identifier::Residual, d.residual_uncorrelated),
    ];
    let entries: Vec<SnpEntry> = energies
        .into_iter()
        .map(|(identifier, energy)| {
            let ratio = energy.max(0.0);
            SnpEntry {
                identifier,
                energy,
                ratio,
                snp_db: snp_db(ratio),
            }
        })
        .collect();
    let (p, f, l) = (d.prnu.max(0.0), d.fpn.max(0.0), d.los.max(0.0));
    let total = p + f + l;
    let shares = if total > 0.0 {
        FingerprintShares {
            prnu: p / total,
            fpn: f / total,
            los: l / total,
        }
    } else {
        FingerprintShares {
            prnu: 0.0,
            fpn: 0.0,
            los: 0.0,
        }
    };
    SnpTable { entries, shares }
}

/// Aligned plain-text report of a decomposition and its SNP table.
pub fn render_text(d: &EnergyDecomposition, t: &SnpTable) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<10} {:>10} {:>9} {:>10} {:>9}", "identifier", "energy", "ratio %", "SNP dB", "share %");
    for e in &t.entries {
        let share = match e.identifier {
            Identifier::Prnu => format!("{:>9.2}", t.shares.prnu * 100.0),
            Identifier::Fpn => format!("{:>9.2}", t.shares.fpn * 100.0),
            Identifier::Los => format!("{:>9.2}", t.shares.los * 100.0),
            _ => format!("{:>9}", "-"),
        };
        let _ = writeln!(
            s,
            "{:<10} {:>10.5} {:>9.2} {:>10.3} {}",
            e.identifier.label(),
            e.energy,
            e.ratio * 100.0,
            e.snp_db,
            share
        );
    }
    let _ = writeln!(s, "lens check {:.5} (delta {:.5})", d.los_check, d.los_delta);
    for w in &d.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

/// CSV form: one row per identifier.
pub fn render_csv(t: &SnpTable) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["identifier", "energy", "ratio", "snp_db", "extended_share"])?;
    for e in &t.entries {
        let share = match e.identifier {
            Identifier::Prnu => t.shares.prnu.to_string(),
            Identifier::Fpn => t.shares.fpn.to_string(),
            Identifier::Los => t.shares.los.to_string(),
            _ => String::new(),
        };
        w.write_record([
            e.identifier.label().to_string(),
            e.energy.to_string(),
            e.ratio.to_string(),
            e.snp_db.to_string(),
            share,
        ])?;
    }
    w.into_inner().map_err(|e| Error::Validation(format!("csv flush: {e}")))
}

/// Five-number summary plus mean, mode and skew direction of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub group: String,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    /// Most frequent value after rounding to 3 decimals (smallest on ties).
    pub mode: f64,
    pub range: f64,
    /// Sign of the third central moment: -1, 0 or 1.
    pub skew_sign: i8,
}

/// Summary of one group using Tukey hinges (the median joins both halves
/// when the count is odd).
pub fn summarize(group: &str, values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() {
        return Err(Error::Grouping(format!("group `{group}` is empty")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = median_sorted(&v);
    let (lower, upper) = if n % 2 == 1 {
        (&v[..=n / 2], &v[n / 2..])
    } else {
        (&v[..n / 2], &v[n / 2..])
    };
    let mean = v.iter().sum::<f64>() / n as f64;

    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for x in &v {
        *counts.entry((x * 1000.0).round() as i64).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    let mode_key = counts
        .iter()
        .find(|(_, &c)| c == best)
        .map(|(k, _)| *k)
        .unwrap_or(0);

    let m3 = v.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n as f64;
    let scale = v.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max).powi(3);
    let skew_sign = if m3.abs() <= 1e-12 * scale || scale == 0.0 {
        0
    } else if m3 > 0.0 {
        1
    } else {
        -1
    };

    Ok(BoxStats {
        group: group.to_string(),
        n,
        min: v[0],
        q1: median_sorted(lower),
        median,
        q3: median_sorted(upper),
        max: v[n - 1],
        mean,
        mode: mode_key as f64 / 1000.0,
        range: v[n - 1] - v[0],
        skew_sign,
    })
}

/// Summaries for every group, in key order.
pub fn box_stats(groups: &BTreeMap<String, Vec<f64>>) -> Result<Vec<BoxStats>> {
    groups.iter().map(|(k, v)| summarize(k, v)).collect()
}

pub fn box_stats_csv(stats: &[BoxStats]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if stats.is_empty() {
        w.write_record([
            "group", "n", "min", "q1", "median", "q3", "max", "mean", "mode", "range", "skew_sign",
        ])?;
    }
    for s in stats {
        w.serialize(s)?;
    }
    w.into_inner().map_err(|e| Error::Validation(format!("csv flush: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn golden_means() -> ConditionMeans {
        ConditionMeans::new(0.0865, 0.0666, 0.0844, 0.0644).unwrap()
    }

    #[test]
    fn published_decomposition() {
        let d = solve(&golden_means());
        assert!((d.los - 0.0199).abs() < 5e-5);
        assert!((d.los_check - 0.0200).abs() < 5e-5);
        assert_eq!(d.prnu, 0.0644);
        assert_eq!(d.spn, 0.0666);
        assert!((d.fpn - 0.0022).abs() < 1e-4);
        assert!(d.los_delta < LOS_CONSISTENCY_TOLERANCE);
        assert!(d.warnings.is_empty(), "{:?}", d.warnings);
    }

    #[test]
    fn published_snp_table() {
        let t = snp_table(&solve(&golden_means()));
        assert!((t.get(Identifier::Residual).ratio * 100.0 - 91.35).abs() < 1e-9);
        assert!((t.get(Identifier::Prnu).ratio * 100.0 - 6.44).abs() < 1e-9);
        assert!((t.get(Identifier::SpnLos).ratio * 100.0 - 8.65).abs() < 1e-9);
        assert!((t.shares.prnu * 100.0 - 74.45).abs() < 0.01);
        assert!((t.shares.los * 100.0 - 23.01).abs() < 0.01);
        assert!((t.shares.fpn * 100.0 - 2.54).abs() < 0.01);
    }

    #[test]
    fn equal_means_degenerate() {
        let d = solve(&ConditionMeans::new(0.05, 0.05, 0.05, 0.05).unwrap());
        assert_eq!((d.los, d.fpn, d.prnu, d.spn), (0.0, 0.0, 0.05, 0.05));
    }

    #[test]
    fn warnings_raised() {
        let d = solve(&ConditionMeans::new(0.05, 0.06, 0.03, 0.07).unwrap());
        assert!(d.warnings.iter().any(|w| w.contains("negative lens")));
        assert!(d.warnings.iter().any(|w| w.contains("disagree")));
        assert!(ConditionMeans::new(1.5, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn db_values() {
        assert_eq!(snp_db(1.0), 0.0);
        assert!((snp_db(0.5) + 3.0103).abs() < 1e-4);
        assert_eq!(snp_db(0.0), f64::NEG_INFINITY);
        let d = solve(&ConditionMeans::new(0.05, 0.06, 0.05, 0.06).unwrap());
        let t = snp_table(&d);
        assert_eq!(t.get(Identifier::Los).ratio, 0.0);
        assert_eq!(t.get(Identifier::Los).snp_db, f64::NEG_INFINITY);
        assert!(t.get(Identifier::Los).energy < 0.0);
    }

    #[test]
    fn box_stats_examples() {
        let one = summarize("g", &[0.07]).unwrap();
        assert_eq!((one.min, one.q1, one.median, one.q3, one.max, one.mean, one.mode), (0.07, 0.07, 0.07, 0.07, 0.07, 0.07, 0.07));
        assert_eq!(one.range, 0.0);
        assert_eq!(one.skew_sign, 0);

        let s = summarize("g", &[5.0, 1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!((s.median, s.q1, s.q3, s.range), (3.0, 2.0, 4.0, 4.0));
        assert_eq!(s.skew_sign, 0);

        let even = summarize("g", &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!((even.q1, even.median, even.q3), (2.0, 3.5, 5.0));

        let skewed = summarize("g", &[0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(skewed.skew_sign, 1);
        assert_eq!(skewed.mode, 0.0);
        let left = summarize("g", &[0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(left.skew_sign, -1);

        let mut groups = BTreeMap::new();
        groups.insert("empty".to_string(), vec![]);
        assert!(matches!(box_stats(&groups), Err(Error::Grouping(_))));
    }

    #[test]
    fn reports_render() {
        let d = solve(&golden_means());
        let t = snp_table(&d);
        let text = render_text(&d, &t);
        assert!(text.contains("PRNU"));
        assert!(text.contains("91.35"));
        let csv = String::from_utf8(render_csv(&t).unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 7);
    }

    proptest! {
        #[test]
        fn solve_identities(a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0, d in -1.0f64..1.0, k in 0.01f64..10.0) {
            let m = ConditionMeans { lens_with_dark: a, pinhole_with_dark: b, lens_no_dark: c, pinhole_no_dark: d };
            let e = solve(&m);
            prop_assert!((e.spn - (e.prnu + e.fpn)).abs() < 1e-12);
            prop_assert!((e.extended_fingerprint - (e.spn + e.los)).abs() < 1e-12);
            prop_assert!((e.residual_uncorrelated + e.extended_fingerprint - 1.0).abs() < 1e-12);
            let s = solve(&m.scaled(k));
            for (x, y) in [(e.spn, s.spn), (e.prnu, s.prnu), (e.fpn, s.fpn), (e.los, s.los), (e.los_check, s.los_check)] {
                prop_assert!((x * k - y).abs() < 1e-12);
            }
        }

        #[test]
        fn snp_consistency(a in 0.0f64..0.5, b in 0.0f64..0.5, c in 0.0f64..0.5, d in 0.0f64..0.5) {
            let t = snp_table(&solve(&ConditionMeans { lens_with_dark: a, pinhole_with_dark: b, lens_no_dark: c, pinhole_no_dark: d }));
            let sum = t.shares.prnu + t.shares.fpn + t.shares.los;
            prop_assert!(sum == 0.0 || (sum - 1.0).abs() < 1e-9);
            for e in &t.entries {
                if e.ratio > 0.0 {
                    prop_assert!((e.snp_db - 10.0 * e.ratio.log10()).abs() < 1e-9);
                }
            }
            let r = [t.get(Identifier::Prnu).ratio, t.get(Identifier::SpnLos).ratio];
            if r[0] > 0.0 && r[1] > 0.0 {
                let lhs = snp_db(r[0]) - snp_db(r[1]);
                prop_assert!((lhs - 10.0 * (r[0] / r[1]).log10()).abs() < 1e-9);
            }
        }

        #[test]
        fn ratios_monotone(x in 0.0f64..1.0, y in 0.0f64..1.0) {
            prop_assume!(x != y);
            let (lo, hi) = if x < y { (x, y) } else { (y, x) };
            prop_assume!(lo > 0.0);
            prop_assert!(snp_db(lo) < snp_db(hi));
        }
    }
}
