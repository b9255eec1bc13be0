//! Descriptive deliberation statistics and the inferential utilities used by
//! reports: percentile bootstrap CIs, the Mann-Whitney U test, and the pooled
//! two-proportion z-test.

use std::collections::BTreeMap;

use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{Outcome, Transcript, Verdict};

pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 2000;
pub const DEFAULT_CONFIDENCE_LEVEL: f64 = 0.95;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("agent {0:?} appears in no summary")]
    UnknownAgent(String),
}

/// Per-transcript digest used by every aggregate. Aborted transcripts carry
/// no usable rounds and yield no summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dilemma_id: String,
    pub rounds_used: u32,
    pub outcome: Outcome,
    /// True iff some later-round verdict differs from the agent's round-1
    /// verdict.
    pub cov: BTreeMap<String, bool>,
    pub round1: BTreeMap<String, Verdict>,
    pub finals: BTreeMap<String, Verdict>,
}

impl RunSummary {
    pub fn from_transcript(t: &Transcript) -> Option<RunSummary> {
        if matches!(t.outcome, Outcome::Aborted { .. }) {
            return None;
        }
        let rounds = t.rounds();
        let first = rounds.first()?;
        let mut round1 = BTreeMap::new();
        for turn in first.iter() {
            round1.insert(turn.agent.clone(), turn.verdict);
        }
        let mut cov: BTreeMap<String, bool> =
            round1.keys().map(|a| (a.clone(), false)).collect();
        for round in &rounds[1..] {
            for turn in round.iter() {
                if round1.get(&turn.agent) != Some(&turn.verdict) {
                    cov.insert(turn.agent.clone(), true);
                }
            }
        }
        let mut finals = BTreeMap::new();
        for turn in rounds.last()?.iter() {
            finals.insert(turn.agent.clone(), turn.verdict);
        }
        Some(RunSummary {
            dilemma_id: t.dilemma_id.clone(),
            rounds_used: rounds.len() as u32,
            outcome: t.outcome.clone(),
            cov,
            round1,
            finals,
        })
    }
}

/// Summarize every non-aborted transcript.
pub fn summarize_all(transcripts: &[Transcript]) -> Vec<RunSummary> {
    transcripts
        .iter()
        .filter_map(RunSummary::from_transcript)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateWithCi {
    pub rate: f64,
    pub ci: (f64, f64),
}

/// Fraction of dilemmas in which the agent changed its round-1 verdict, with
/// a percentile bootstrap CI resampling dilemmas.
pub fn cov_rate(
    summaries: &[RunSummary],
    agent: &str,
    n_resamples: usize,
    seed: u64,
) -> Result<RateWithCi, MetricsError> {
    let flags: Vec<f64> = summaries
        .iter()
        .filter_map(|s| s.cov.get(agent).map(|&b| f64::from(u8::from(b))))
        .collect();
    if flags.is_empty() {
        return Err(MetricsError::UnknownAgent(agent.to_string()));
    }
    let rate = flags.iter().sum::<f64>() / flags.len() as f64;
    let ci = bootstrap_ci(
        &flags,
        |xs| xs.iter().map(|x| **x).sum::<f64>() / xs.len() as f64,
        n_resamples,
        DEFAULT_CONFIDENCE_LEVEL,
        seed,
    );
    Ok(RateWithCi { rate, ci })
}

/// Histogram bucket: consensus in a given round, or never.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RoundsBucket {
    Round(u32),
    NoConsensus,
}

impl std::fmt::Display for RoundsBucket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RoundsBucket::Round(r) => write!(f, "{r}"),
            RoundsBucket::NoConsensus => write!(f, "no_consensus"),
        }
    }
}

/// Proportion of dilemmas reaching consensus in each round, plus the
/// no-consensus mass. Proportions sum to 1 for nonempty input.
pub fn rounds_histogram(summaries: &[RunSummary]) -> BTreeMap<RoundsBucket, f64> {
    let mut counts: BTreeMap<RoundsBucket, usize> = BTreeMap::new();
    for s in summaries {
        let bucket = match &s.outcome {
            Outcome::Consensus { round, .. } => RoundsBucket::Round(*round),
            _ => RoundsBucket::NoConsensus,
        };
        *counts.entry(bucket).or_default() += 1;
    }
    let n = summaries.len() as f64;
    counts
        .into_iter()
        .map(|(k, c)| (k, c as f64 / n))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerdictSelector<'a> {
    /// The named agent's round-1 verdicts across dilemmas.
    Round1PerAgent(&'a str),
    /// Consensus verdicts, with residual mass on no-consensus.
    PostConsensus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictDistribution {
    pub verdicts: BTreeMap<Verdict, f64>,
    pub no_consensus: f64,
}

pub fn verdict_distribution(
    summaries: &[RunSummary],
    selector: VerdictSelector<'_>,
) -> VerdictDistribution {
    let mut counts: BTreeMap<Verdict, usize> = BTreeMap::new();
    let mut nc = 0usize;
    let mut total = 0usize;
    for s in summaries {
        match selector {
            VerdictSelector::Round1PerAgent(agent) => {
                if let Some(v) = s.round1.get(agent) {
                    *counts.entry(*v).or_default() += 1;
                    total += 1;
                }
            }
            VerdictSelector::PostConsensus => {
                match &s.outcome {
                    Outcome::Consensus { verdict, .. } => {
                        *counts.entry(*verdict).or_default() += 1
                    }
                    _ => nc += 1,
                }
                total += 1;
            }
        }
    }
    let denom = if total == 0 { 1.0 } else { total as f64 };
    VerdictDistribution {
        verdicts: counts
            .into_iter()
            .map(|(k, c)| (k, c as f64 / denom))
            .collect(),
        no_consensus: nc as f64 / denom,
    }
}

/// Percentile interval endpoints over an ascending-sorted replicate list.
pub(crate) fn percentile_bounds(sorted: &[f64], level: f64) -> (f64, f64) {
    assert!(!sorted.is_empty(), "percentile over empty replicates");
    let b = sorted.len();
    let alpha = 1.0 - level;
    let lo = (((alpha / 2.0) * b as f64).floor() as usize).min(b - 1);
    let hi = ((((1.0 - alpha / 2.0) * b as f64).floor() as usize)).min(b - 1);
    (sorted[lo], sorted[hi])
}

/// Percentile bootstrap CI for an arbitrary statistic, resampling `samples`
/// with replacement. Deterministic given the seed.
pub fn bootstrap_ci<T, F>(
    samples: &[T],
    statistic: F,
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> (f64, f64)
where
    F: Fn(&[&T]) -> f64,
{
    assert!(!samples.is_empty(), "bootstrap over empty samples");
    assert!(n_resamples > 0, "bootstrap needs at least one resample");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(n_resamples);
    let mut draw: Vec<&T> = Vec::with_capacity(samples.len());
    for _ in 0..n_resamples {
        draw.clear();
        for _ in 0..samples.len() {
            draw.push(&samples[rng.random_range(0..samples.len())]);
        }
        stats.push(statistic(&draw));
    }
    stats.sort_by(f64::total_cmp);
    percentile_bounds(&stats, level)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of the first sample, midranks for ties.
    pub u: f64,
    pub p_two_sided: f64,
    /// True when the p-value came from exhaustive label enumeration.
    pub exact: bool,
}

/// Threshold below which the exact permutation distribution is enumerated.
pub const MWU_EXACT_LIMIT: usize = 16;

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> MannWhitney {
    assert!(!a.is_empty() && !b.is_empty(), "both samples must be nonempty");
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let mut pooled: Vec<(f64, u8)> = a
        .iter()
        .map(|&v| (v, 0u8))
        .chain(b.iter().map(|&v| (v, 1u8)))
        .collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));

    let mut ranks = vec![0.0f64; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for r in ranks.iter_mut().take(j).skip(i) {
            *r = midrank;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let r_a: f64 = pooled
        .iter()
        .zip(&ranks)
        .filter(|((_, g), _)| *g == 0)
        .map(|(_, r)| *r)
        .sum();
    let u = r_a - (na * (na + 1)) as f64 / 2.0;
    let mu = (na * nb) as f64 / 2.0;

    if n <= MWU_EXACT_LIMIT {
        // Exhaustive relabeling: every na-subset of the pooled ranks is an
        // equally likely group assignment under the null.
        let threshold = (u - mu).abs() - 1e-12;
        let mut extreme = 0u64;
        let mut total = 0u64;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != na {
                continue;
            }
            total += 1;
            let mut r_sum = 0.0;
            for (bit, r) in ranks.iter().enumerate() {
                if mask & (1 << bit) != 0 {
                    r_sum += r;
                }
            }
            let u_perm = r_sum - (na * (na + 1)) as f64 / 2.0;
            if (u_perm - mu).abs() >= threshold {
                extreme += 1;
            }
        }
        MannWhitney {
            u,
            p_two_sided: extreme as f64 / total as f64,
            exact: true,
        }
    } else {
        let nf = n as f64;
        let sigma2 =
            (na * nb) as f64 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
        if sigma2 <= 0.0 {
            // fully tied pool: no evidence either way
            return MannWhitney {
                u,
                p_two_sided: 1.0,
                exact: false,
            };
        }
        let z = ((u - mu).abs() - 0.5).max(0.0) / sigma2.sqrt();
        MannWhitney {
            u,
            p_two_sided: (2.0 * (1.0 - normal_cdf(z))).min(1.0),
            exact: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZTest {
    pub z: f64,
    pub p_two_sided: f64,
}

/// Pooled two-proportion z-test. Degenerate pooled variance collapses to
/// (0, 1) when the observed proportions agree; the opposite case cannot
/// arise from integer counts but is mapped to an infinite z defensively.
pub fn two_proportion_z(x1: u64, n1: u64, x2: u64, n2: u64) -> ZTest {
    assert!(n1 > 0 && n2 > 0, "sample sizes must be positive");
    assert!(x1 <= n1 && x2 <= n2, "successes cannot exceed trials");
    let p1 = x1 as f64 / n1 as f64;
    let p2 = x2 as f64 / n2 as f64;
    let pooled = (x1 + x2) as f64 / (n1 + n2) as f64;
    let var = pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64);
    if var <= 0.0 {
        if p1 == p2 {
            return ZTest {
                z: 0.0,
                p_two_sided: 1.0,
            };
        }
        return ZTest {
            z: if p1 > p2 { f64::INFINITY } else { f64::NEG_INFINITY },
            p_two_sided: 0.0,
        };
    }
    let z = (p1 - p2) / var.sqrt();
    ZTest {
        z,
        p_two_sided: (2.0 * (1.0 - normal_cdf(z.abs()))).min(1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{DeliberationConfig, DeliberationFormat, Turn};
    use proptest::prelude::*;

    fn turn(agent: &str, round: u32, verdict: Verdict, seq: u32) -> Turn {
        Turn {
            agent: agent.into(),
            round,
            verdict,
            explanation: "e".into(),
            raw: format!(
                "I am {agent}. This is Round {round}.\nMy current verdict: {verdict}.\n\nHere's my thinking: e"
            ),
            seq,
            round_mismatch: false,
        }
    }

    fn transcript(id: &str, rounds: &[(Verdict, Verdict)], outcome: Outcome) -> Transcript {
        let config = DeliberationConfig::new(
            DeliberationFormat::Synchronous,
            vec!["A".into(), "B".into()],
        );
        let mut turns = Vec::new();
        for (r, &(va, vb)) in rounds.iter().enumerate() {
            turns.push(turn("A", (r + 1) as u32, va, 2 * r as u32));
            turns.push(turn("B", (r + 1) as u32, vb, 2 * r as u32 + 1));
        }
        Transcript {
            dilemma_id: id.into(),
            config,
            turns,
            outcome,
        }
    }

    fn consensus(v: Verdict, round: u32) -> Outcome {
        Outcome::Consensus { verdict: v, round }
    }

    #[test]
    fn summary_flags_cov_against_round_one() {
        let t = transcript(
            "d",
            &[(Verdict::NTA, Verdict::YTA), (Verdict::YTA, Verdict::YTA)],
            consensus(Verdict::YTA, 2),
        );
        let s = RunSummary::from_transcript(&t).unwrap();
        assert_eq!(s.rounds_used, 2);
        assert_eq!(s.cov["A"], true);
        assert_eq!(s.cov["B"], false);
        assert_eq!(s.round1["A"], Verdict::NTA);
        assert_eq!(s.finals["A"], Verdict::YTA);

        let aborted = Transcript {
            outcome: Outcome::Aborted {
                reason: crate::protocol::AbortReason::ParseFailure {
                    agent: "A".into(),
                    round: 1,
                    detail: "x".into(),
                },
            },
            ..t
        };
        assert!(RunSummary::from_transcript(&aborted).is_none());
    }

    #[test]
    fn cov_rate_counts_dilemmas() {
        let ts = [
            transcript(
                "d1",
                &[(Verdict::NTA, Verdict::YTA), (Verdict::YTA, Verdict::YTA)],
                consensus(Verdict::YTA, 2),
            ),
            transcript("d2", &[(Verdict::NTA, Verdict::NTA)], consensus(Verdict::NTA, 1)),
        ];
        let summaries = summarize_all(&ts);
        let a = cov_rate(&summaries, "A", 200, 7).unwrap();
        assert_eq!(a.rate, 0.5);
        assert!(a.ci.0 <= a.rate && a.rate <= a.ci.1);
        let b = cov_rate(&summaries, "B", 200, 7).unwrap();
        assert_eq!(b.rate, 0.0);
        assert!(cov_rate(&summaries, "Z", 10, 0).is_err());
    }

    #[test]
    fn histogram_buckets() {
        let all_r1 = [transcript("d", &[(Verdict::NTA, Verdict::NTA)], consensus(Verdict::NTA, 1))];
        let h = rounds_histogram(&summarize_all(&all_r1));
        assert_eq!(h[&RoundsBucket::Round(1)], 1.0);

        let mixed = [
            transcript(
                "d1",
                &[(Verdict::NTA, Verdict::YTA), (Verdict::YTA, Verdict::YTA)],
                consensus(Verdict::YTA, 2),
            ),
            transcript("d2", &[(Verdict::NTA, Verdict::YTA)], Outcome::NoConsensus),
        ];
        let h = rounds_histogram(&summarize_all(&mixed));
        assert_eq!(h[&RoundsBucket::Round(2)], 0.5);
        assert_eq!(h[&RoundsBucket::NoConsensus], 0.5);
        assert!((h.values().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn verdict_distributions() {
        let ts = [
            transcript("d1", &[(Verdict::NTA, Verdict::NTA)], consensus(Verdict::NTA, 1)),
            transcript("d2", &[(Verdict::NTA, Verdict::YTA)], Outcome::NoConsensus),
            transcript("d3", &[(Verdict::YTA, Verdict::YTA)], consensus(Verdict::YTA, 1)),
        ];
        let s = summarize_all(&ts);
        let r1 = verdict_distribution(&s, VerdictSelector::Round1PerAgent("A"));
        assert!((r1.verdicts[&Verdict::NTA] - 2.0 / 3.0).abs() < 1e-12);
        assert!((r1.verdicts[&Verdict::YTA] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r1.no_consensus, 0.0);

        let post = verdict_distribution(&s, VerdictSelector::PostConsensus);
        assert!((post.verdicts[&Verdict::NTA] - 1.0 / 3.0).abs() < 1e-12);
        assert!((post.no_consensus - 1.0 / 3.0).abs() < 1e-12);
        let total: f64 = post.verdicts.values().sum::<f64>() + post.no_consensus;
        assert!((total - 1.0).abs() < 1e-12);

        let single = [transcript("d", &[(Verdict::NAH, Verdict::NAH)], consensus(Verdict::NAH, 1))];
        let post = verdict_distribution(&summarize_all(&single), VerdictSelector::PostConsensus);
        assert_eq!(post.verdicts[&Verdict::NAH], 1.0);
    }

    #[test]
    fn bootstrap_degenerate_and_deterministic() {
        let constant = [2.5; 10];
        let mean = |xs: &[&f64]| xs.iter().map(|x| **x).sum::<f64>() / xs.len() as f64;
        assert_eq!(bootstrap_ci(&constant, mean, 100, 0.95, 0), (2.5, 2.5));

        let xs: Vec<f64> = (0..400).map(|i| f64::from(i % 2)).collect();
        let ci1 = bootstrap_ci(&xs, mean, 2000, 0.95, 42);
        let ci2 = bootstrap_ci(&xs, mean, 2000, 0.95, 42);
        assert_eq!(ci1, ci2);
        // binomial half-width at n=400 is 1.96*sqrt(.25/400) ~ 0.049
        assert!(ci1.0 < 0.5 && 0.5 < ci1.1);
        assert!((ci1.1 - ci1.0) < 0.12);
        assert!((ci1.1 - ci1.0) > 0.05);
    }

    #[test]
    fn mwu_known_cases() {
        let tied = mann_whitney_u(&[1.0, 1.0], &[1.0, 1.0]);
        assert_eq!(tied.p_two_sided, 1.0);

        let sep = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(sep.u, 0.0);
        assert!(sep.exact);
        assert!((sep.p_two_sided - 1.0 / 3.0).abs() < 1e-12);

        let big_a: Vec<f64> = (0..12).map(f64::from).collect();
        let big_b: Vec<f64> = (0..12).map(|i| f64::from(i) + 0.5).collect();
        let approx = mann_whitney_u(&big_a, &big_b);
        assert!(!approx.exact);
        assert!(approx.p_two_sided > 0.0 && approx.p_two_sided <= 1.0);
    }

    proptest! {
        #[test]
        fn mwu_u_symmetry(a in proptest::collection::vec(0i8..4, 1..8),
                          b in proptest::collection::vec(0i8..4, 1..8)) {
            let af: Vec<f64> = a.iter().map(|&x| f64::from(x)).collect();
            let bf: Vec<f64> = b.iter().map(|&x| f64::from(x)).collect();
            let uab = mann_whitney_u(&af, &bf);
            let uba = mann_whitney_u(&bf, &af);
            prop_assert!((uab.u + uba.u - (af.len() * bf.len()) as f64).abs() < 1e-9);
            prop_assert!((uab.p_two_sided - uba.p_two_sided).abs() < 1e-9);
        }

        #[test]
        fn statistics_ignore_input_order(seedlike in 0u64..1000) {
            let mut ts = Vec::new();
            for i in 0..6 {
                let v1 = Verdict::ALL[(seedlike as usize + i) % 5];
                let v2 = Verdict::ALL[(seedlike as usize + 2 * i) % 5];
                let outcome = if v1 == v2 {
                    consensus(v1, 1)
                } else {
                    Outcome::NoConsensus
                };
                ts.push(transcript(&format!("d{i}"), &[(v1, v2)], outcome));
            }
            let forward = summarize_all(&ts);
            ts.reverse();
            let backward = summarize_all(&ts);
            prop_assert_eq!(rounds_histogram(&forward), rounds_histogram(&backward));
            let da = verdict_distribution(&forward, VerdictSelector::Round1PerAgent("A"));
            let db = verdict_distribution(&backward, VerdictSelector::Round1PerAgent("A"));
            prop_assert_eq!(da, db);
            let hist = rounds_histogram(&forward);
            let mass: f64 = hist.values().sum();
            prop_assert!((mass - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn z_test_known_values() {
        let same = two_proportion_z(50, 100, 50, 100);
        assert_eq!(same.z, 0.0);
        assert_eq!(same.p_two_sided, 1.0);

        let t = two_proportion_z(60, 100, 40, 100);
        assert!((t.z - 2.8284271).abs() < 1e-6);
        assert!((t.p_two_sided - 0.004678).abs() < 1e-5);

        let degenerate = two_proportion_z(0, 10, 0, 5);
        assert_eq!(degenerate.z, 0.0);
        assert_eq!(degenerate.p_two_sided, 1.0);
        let full = two_proportion_z(10, 10, 5, 5);
        assert_eq!(full.p_two_sided, 1.0);
    }

    #[test]
    fn normal_cdf_reference_points() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-12);
        assert!((normal_cdf(-1.959963984540054) - 0.025).abs() < 1e-12);
    }
}
