//! Offline corpus ingestion.
//!
//! A raw submission dump goes through four stages: edit-addendum stripping,
//! submission filtering, crowd-verdict tallying over top-level comments, and
//! disagreement ranking. The output is a corpus of dilemmas ordered by how
//! much the crowd disagreed about them.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{ConnectorError, Verdict};

/// Minimum cleaned body length, in characters, for a usable dilemma.
pub const MIN_BODY_CHARS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawComment {
    pub id: String,
    pub body: String,
    #[serde(default)]
    pub is_top_level: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSubmission {
    pub id: String,
    pub author: String,
    #[serde(default)]
    pub flair: Option<String>,
    pub title: String,
    pub body: String,
    /// Unix seconds.
    pub created_at: i64,
    #[serde(default)]
    pub comments: Vec<RawComment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub origin: String,
    /// Unix seconds; zero for synthetic dilemmas.
    pub ingested_at: i64,
}

/// A usable dilemma. The body is cleaned: `strip_edits` is a fixpoint on it
/// and it is at least [`MIN_BODY_CHARS`] characters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dilemma {
    pub id: String,
    pub title: String,
    pub body: String,
    pub source: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Meta,
    Deleted,
    Removed,
    TooShort,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RejectReason::Meta => "meta",
            RejectReason::Deleted => "deleted",
            RejectReason::Removed => "removed",
            RejectReason::TooShort => "too_short",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FilterOutcome {
    Keep(Dilemma),
    Reject(RejectReason),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusPost {
    pub dilemma: Dilemma,
    pub verdict_counts: BTreeMap<Verdict, u64>,
    /// Shannon entropy of the verdict proportions, in nats.
    pub disagreement: f64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CorpusError {
    #[error("verdict counts are all zero")]
    EmptyCounts,
}

// Line-initial edit addendum: optional markdown emphasis, then
// EDIT / UPDATE / ETA followed by a colon, digits, or end of token.
static EDIT_MARKER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?mi)^[ \t]*(?:[*_~]+[ \t]*)*(?:EDIT|UPDATE|ETA)\d*\b").unwrap());

/// Truncate `text` at the first line-initial edit addendum and drop trailing
/// whitespace. Idempotent: the truncated prefix contains no marker.
pub fn strip_edits(text: &str) -> String {
    match EDIT_MARKER_RE.find(text) {
        Some(m) => text[..m.start()].trim_end().to_string(),
        None => text.to_string(),
    }
}

/// Decide whether a submission yields a usable dilemma.
///
/// Rejection reasons, checked in order: a meta post (flair or username marks
/// it), a `[deleted]` body, a `[removed]` body, or a cleaned body shorter
/// than [`MIN_BODY_CHARS`] characters.
pub fn filter_submission(sub: &RawSubmission, source: Provenance) -> FilterOutcome {
    let flair_is_meta = sub
        .flair
        .as_deref()
        .is_some_and(|f| f.to_ascii_lowercase().contains("meta"));
    if flair_is_meta || sub.author == "AutoModerator" {
        return FilterOutcome::Reject(RejectReason::Meta);
    }
    match sub.body.trim() {
        "[deleted]" => return FilterOutcome::Reject(RejectReason::Deleted),
        "[removed]" => return FilterOutcome::Reject(RejectReason::Removed),
        _ => {}
    }
    let cleaned = strip_edits(&sub.body);
    if cleaned.chars().count() < MIN_BODY_CHARS {
        return FilterOutcome::Reject(RejectReason::TooShort);
    }
    FilterOutcome::Keep(Dilemma {
        id: sub.id.clone(),
        title: sub.title.clone(),
        body: cleaned,
        source,
    })
}

/// Fallback classifier for comments the verdict regex cannot resolve.
pub trait VerdictJudge {
    fn classify(&self, text: &str) -> Result<Option<Verdict>, ConnectorError>;
}

static COMMENT_VERDICT_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(NTA|YTA|ESH|NAH|INFO)\b").unwrap());

/// Extract the crowd verdict from a comment. The earliest word-boundary
/// occurrence of a verdict code wins; the fallback judge, when given, decides
/// comments with no code at all. A judge failure is an error, distinct from
/// an absent verdict.
pub fn classify_comment(
    text: &str,
    fallback: Option<&dyn VerdictJudge>,
) -> Result<Option<Verdict>, ConnectorError> {
    if let Some(m) = COMMENT_VERDICT_RE.find(text) {
        return Ok(Verdict::from_code(m.as_str()));
    }
    match fallback {
        Some(judge) => judge.classify(text),
        None => Ok(None),
    }
}

/// Shannon entropy of the verdict proportions, in nats. Maximal at ln 5 for
/// a uniform split. Errors when every count is zero.
pub fn disagreement_entropy(counts: &BTreeMap<Verdict, u64>) -> Result<f64, CorpusError> {
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Err(CorpusError::EmptyCounts);
    }
    let total = total as f64;
    let mut h = 0.0;
    for &c in counts.values() {
        if c > 0 {
            let p = c as f64 / total;
            h -= p * p.ln();
        }
    }
    Ok(h)
}

fn rank_cmp(a: &CorpusPost, b: &CorpusPost) -> std::cmp::Ordering {
    b.disagreement
        .total_cmp(&a.disagreement)
        .then_with(|| a.dilemma.id.cmp(&b.dilemma.id))
}

/// The `k` most-disputed posts, descending by disagreement, ties broken by
/// ascending dilemma id. Selects before sorting, so only the returned prefix
/// is ever ordered.
pub fn select_top_k(mut posts: Vec<CorpusPost>, k: usize) -> Vec<CorpusPost> {
    if k == 0 {
        return Vec::new();
    }
    if k < posts.len() {
        posts.select_nth_unstable_by(k - 1, rank_cmp);
        posts.truncate(k);
    }
    posts.sort_by(rank_cmp);
    posts
}

/// Counters reported by a corpus build.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub submissions: u64,
    pub kept: u64,
    pub rejected: BTreeMap<RejectReason, u64>,
    /// Kept submissions dropped because no comment yielded a verdict.
    pub no_verdict_comments: u64,
    pub comments_seen: u64,
    pub comments_classified: u64,
}

/// Run the full ingestion pipeline over a submission dump and keep the top
/// `k` posts by disagreement. Only top-level comments are tallied.
pub fn build_corpus<I>(
    submissions: I,
    judge: Option<&dyn VerdictJudge>,
    origin: &str,
    ingested_at: i64,
    k: usize,
) -> Result<(Vec<CorpusPost>, IngestStats), ConnectorError>
where
    I: IntoIterator<Item = RawSubmission>,
{
    let mut stats = IngestStats::default();
    let mut posts = Vec::new();
    for sub in submissions {
        stats.submissions += 1;
        let source = Provenance {
            origin: origin.to_string(),
            ingested_at,
        };
        let dilemma = match filter_submission(&sub, source) {
            FilterOutcome::Keep(d) => d,
            FilterOutcome::Reject(reason) => {
                *stats.rejected.entry(reason).or_insert(0) += 1;
                continue;
            }
        };
        let mut counts: BTreeMap<Verdict, u64> = BTreeMap::new();
        for comment in sub.comments.iter().filter(|c| c.is_top_level) {
            stats.comments_seen += 1;
            if let Some(v) = classify_comment(&comment.body, judge)? {
                stats.comments_classified += 1;
                *counts.entry(v).or_insert(0) += 1;
            }
        }
        match disagreement_entropy(&counts) {
            Ok(disagreement) => {
                stats.kept += 1;
                posts.push(CorpusPost {
                    dilemma,
                    verdict_counts: counts,
                    disagreement,
                });
            }
            Err(CorpusError::EmptyCounts) => {
                stats.no_verdict_comments += 1;
            }
        }
    }
    Ok((select_top_k(posts, k), stats))
}

/// Deterministic placeholder dilemma for simulations and tests. The body
/// satisfies the cleaned-dilemma invariants.
pub fn synthetic_dilemma(id: &str) -> Dilemma {
    let filler = "My roommate and I split chores on a schedule we both agreed to at the \
start of the lease. Last month I covered three of their kitchen weeks in a row because \
they were buried at work, and when my own crunch came around I asked them to swap back. \
They said the swaps were favors, not debts, and that I was keeping score like an \
accountant. I reminded them of the agreement, they called me petty in the group chat, \
and now half our friends think I am blowing a small thing out of proportion. ";
    let mut body = format!("Synthetic dilemma {id}.\n\n");
    while body.chars().count() < MIN_BODY_CHARS + 200 {
        body.push_str(filler);
    }
    Dilemma {
        id: id.to_string(),
        title: format!("Synthetic dilemma {id}"),
        body: body.trim_end().to_string(),
        source: Provenance {
            origin: "synthetic".into(),
            ingested_at: 0,
        },
    }
}

#[cfg(test)]
pub(crate) use synthetic_dilemma as test_dilemma;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(v: &[(Verdict, u64)]) -> BTreeMap<Verdict, u64> {
        v.iter().copied().collect()
    }

    #[test]
    fn strip_edits_truncates_at_marker() {
        assert_eq!(
            strip_edits("Some dilemma text.\n\nEDIT 2: thanks everyone"),
            "Some dilemma text."
        );
        assert_eq!(strip_edits("Body text.\nETA: forgot"), "Body text.");
        assert_eq!(strip_edits("Body text.\n**Update:** we talked"), "Body text.");
        assert_eq!(strip_edits("Body.\n  edit2: fix"), "Body.");
        assert_eq!(strip_edits("UPDATE: gone"), "");
    }

    #[test]
    fn strip_edits_ignores_non_markers() {
        let kept = "He updated me later that day.\nEditors note was silly.\nNo edit marker.";
        assert_eq!(strip_edits(kept), kept);
    }

    #[test]
    fn strip_edits_spec_example_round_trips() {
        let text = "Body text.\nEDIT: more info";
        let once = strip_edits(text);
        assert_eq!(once, "Body text.");
        assert_eq!(strip_edits(&once), once);
    }

    proptest! {
        #[test]
        fn strip_edits_is_idempotent(
            prefix in "[a-zA-Z .\n]{0,200}",
            marker in prop::sample::select(vec!["EDIT:", "Update 2:", "eta", "**EDIT**"]),
            suffix in "[a-zA-Z .\n]{0,100}",
        ) {
            let text = format!("{prefix}\n{marker} {suffix}");
            let once = strip_edits(&text);
            prop_assert_eq!(strip_edits(&once), once.clone());
            // Output is always a prefix of the input.
            prop_assert!(text.starts_with(once.trim_end()));
        }
    }

    fn base_submission(body: &str) -> RawSubmission {
        RawSubmission {
            id: "s1".into(),
            author: "regular_user".into(),
            flair: None,
            title: "AITA for testing?".into(),
            body: body.into(),
            created_at: 1_700_000_000,
            comments: vec![],
        }
    }

    fn provenance() -> Provenance {
        Provenance {
            origin: "dump".into(),
            ingested_at: 1,
        }
    }

    fn long_body() -> String {
        "A sentence about a quarrel. ".repeat(50)
    }

    #[test]
    fn filter_rejects_in_documented_order() {
        let mut meta = base_submission(&long_body());
        meta.flair = Some("META".into());
        assert_eq!(
            filter_submission(&meta, provenance()),
            FilterOutcome::Reject(RejectReason::Meta)
        );

        let mut automod = base_submission(&long_body());
        automod.author = "AutoModerator".into();
        assert_eq!(
            filter_submission(&automod, provenance()),
            FilterOutcome::Reject(RejectReason::Meta)
        );

        assert_eq!(
            filter_submission(&base_submission("[deleted]"), provenance()),
            FilterOutcome::Reject(RejectReason::Deleted)
        );
        assert_eq!(
            filter_submission(&base_submission("[removed]"), provenance()),
            FilterOutcome::Reject(RejectReason::Removed)
        );
        assert_eq!(
            filter_submission(&base_submission("too short"), provenance()),
            FilterOutcome::Reject(RejectReason::TooShort)
        );
    }

    #[test]
    fn filter_measures_length_after_stripping() {
        // 1500 characters of body, but only ~600 precede the edit marker.
        let body = format!(
            "{}\nEDIT: {}",
            "x".repeat(600),
            "y".repeat(900)
        );
        assert_eq!(
            filter_submission(&base_submission(&body), provenance()),
            FilterOutcome::Reject(RejectReason::TooShort)
        );
    }

    #[test]
    fn filter_keep_produces_clean_dilemma() {
        let body = format!("{}\n\nEDIT: thanks for the gold", long_body());
        let FilterOutcome::Keep(d) = filter_submission(&base_submission(&body), provenance())
        else {
            panic!("expected keep");
        };
        assert!(d.body.chars().count() >= MIN_BODY_CHARS);
        assert_eq!(strip_edits(&d.body), d.body);
        assert_eq!(d.title, "AITA for testing?");
        assert_eq!(d.source.origin, "dump");
    }

    #[test]
    fn classify_takes_earliest_code() {
        assert_eq!(
            classify_comment("NTA, he can buy his own.", None).unwrap(),
            Some(Verdict::NTA)
        );
        assert_eq!(
            classify_comment("I think ESH but leaning YTA", None).unwrap(),
            Some(Verdict::ESH)
        );
        assert_eq!(
            classify_comment("nta all the way", None).unwrap(),
            Some(Verdict::NTA)
        );
    }

    #[test]
    fn classify_respects_word_boundaries() {
        // "contact" and "pintana" both embed nta mid-word: neither counts.
        assert_eq!(classify_comment("please contact me", None).unwrap(), None);
        assert_eq!(classify_comment("the pintana paradox", None).unwrap(), None);
        assert_eq!(
            classify_comment("You're the asshole, full stop.", None).unwrap(),
            None
        );
    }

    #[test]
    fn classify_falls_back_to_judge() {
        struct Fixed(Option<Verdict>);
        impl VerdictJudge for Fixed {
            fn classify(&self, _t: &str) -> Result<Option<Verdict>, ConnectorError> {
                Ok(self.0)
            }
        }
        struct Broken;
        impl VerdictJudge for Broken {
            fn classify(&self, _t: &str) -> Result<Option<Verdict>, ConnectorError> {
                Err(ConnectorError::Transport("down".into()))
            }
        }
        let text = "you are absolutely in the wrong here";
        assert_eq!(
            classify_comment(text, Some(&Fixed(Some(Verdict::YTA)))).unwrap(),
            Some(Verdict::YTA)
        );
        // Regex wins before the fallback is consulted.
        assert_eq!(
            classify_comment("YTA.", Some(&Fixed(Some(Verdict::NAH)))).unwrap(),
            Some(Verdict::YTA)
        );
        assert!(classify_comment(text, Some(&Broken)).is_err());
    }

    #[test]
    fn entropy_matches_known_values() {
        let uniform = counts(&Verdict::ALL.map(|v| (v, 20)));
        assert!((disagreement_entropy(&uniform).unwrap() - 5f64.ln()).abs() < 1e-12);

        let single = counts(&[(Verdict::NTA, 7)]);
        assert_eq!(disagreement_entropy(&single).unwrap(), 0.0);

        let split = counts(&[(Verdict::NTA, 30), (Verdict::YTA, 10)]);
        let expected = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((disagreement_entropy(&split).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.5623).abs() < 1e-4);

        assert_eq!(
            disagreement_entropy(&BTreeMap::new()),
            Err(CorpusError::EmptyCounts)
        );
    }

    #[test]
    fn entropy_is_permutation_invariant() {
        let a = counts(&[(Verdict::NTA, 3), (Verdict::ESH, 9), (Verdict::INFO, 1)]);
        let b = counts(&[(Verdict::YTA, 9), (Verdict::NAH, 1), (Verdict::NTA, 3)]);
        assert!(
            (disagreement_entropy(&a).unwrap() - disagreement_entropy(&b).unwrap()).abs() < 1e-15
        );
    }

    fn post(id: &str, disagreement: f64) -> CorpusPost {
        CorpusPost {
            dilemma: synthetic_dilemma(id),
            verdict_counts: counts(&[(Verdict::NTA, 1)]),
            disagreement,
        }
    }

    #[test]
    fn top_k_orders_and_breaks_ties_by_id() {
        let posts = vec![
            post("a", 0.9),
            post("b", 1.2),
            post("c", 1.2),
            post("d", 0.1),
        ];
        let picked = select_top_k(posts, 3);
        let ids: Vec<&str> = picked.iter().map(|p| p.dilemma.id.as_str()).collect();
        assert_eq!(ids, ["b", "c", "a"]);
    }

    #[test]
    fn top_k_handles_degenerate_k() {
        let posts = vec![post("a", 0.5), post("b", 0.7)];
        assert!(select_top_k(posts.clone(), 0).is_empty());
        let picked = select_top_k(posts, 10);
        let all: Vec<&str> = picked.iter().map(|p| p.dilemma.id.as_str()).collect();
        assert_eq!(all, ["b", "a"]);
    }

    proptest! {
        #[test]
        fn top_k_agrees_with_sort_oracle(
            entropies in prop::collection::vec(0.0f64..=1.609, 0..40),
            k in 0usize..45,
        ) {
            let posts: Vec<CorpusPost> = entropies
                .iter()
                .enumerate()
                .map(|(i, &e)| post(&format!("id{i:03}"), e))
                .collect();
            let mut oracle = posts.clone();
            oracle.sort_by(|a, b| {
                b.disagreement
                    .total_cmp(&a.disagreement)
                    .then_with(|| a.dilemma.id.cmp(&b.dilemma.id))
            });
            oracle.truncate(k);
            let got = select_top_k(posts, k);
            let got_ids: Vec<&str> = got.iter().map(|p| p.dilemma.id.as_str()).collect();
            let oracle_ids: Vec<&str> = oracle.iter().map(|p| p.dilemma.id.as_str()).collect();
            prop_assert_eq!(got_ids, oracle_ids);
        }
    }

    #[test]
    fn build_corpus_counts_and_ranks() {
        let mut disputed = base_submission(&long_body());
        disputed.id = "disputed".into();
        disputed.comments = vec![
            RawComment {
                id: "c1".into(),
                body: "NTA at all".into(),
                is_top_level: true,
            },
            RawComment {
                id: "c2".into(),
                body: "YTA clearly".into(),
                is_top_level: true,
            },
            RawComment {
                id: "c3".into(),
                body: "nested reply saying ESH".into(),
                is_top_level: false,
            },
        ];
        let mut unanimous = base_submission(&long_body());
        unanimous.id = "unanimous".into();
        unanimous.comments = vec![RawComment {
            id: "c4".into(),
            body: "NTA".into(),
            is_top_level: true,
        }];
        let mut silent = base_submission(&long_body());
        silent.id = "silent".into();
        let mut short = base_submission("tiny");
        short.id = "short".into();

        let (posts, stats) = build_corpus(
            vec![disputed, unanimous, silent, short],
            None,
            "dump",
            7,
            10,
        )
        .unwrap();
        assert_eq!(stats.submissions, 4);
        assert_eq!(stats.kept, 2);
        assert_eq!(stats.no_verdict_comments, 1);
        assert_eq!(stats.rejected[&RejectReason::TooShort], 1);
        assert_eq!(stats.comments_seen, 3);
        assert_eq!(stats.comments_classified, 3);
        let ids: Vec<&str> = posts.iter().map(|p| p.dilemma.id.as_str()).collect();
        assert_eq!(ids, ["disputed", "unanimous"]);
        assert!(posts[0].disagreement > posts[1].disagreement);
    }
}
