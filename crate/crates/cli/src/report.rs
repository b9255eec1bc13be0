//! Run-level analytics documents: analysis.json, fit.json, and the final
//! report bundle with its plot-data files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use deliberata_core::inference::{ModelEffects, ModelParams};
use deliberata_core::metrics::{
    cov_rate, mann_whitney_u, rounds_histogram, summarize_all, verdict_distribution, MannWhitney,
    RateWithCi, RunSummary, VerdictDistribution, VerdictSelector,
};
use deliberata_core::protocol::{Outcome, Transcript, Verdict};
use deliberata_core::store::{
    fnv1a64_seeded, load_jsonl, load_manifest, load_transcripts, RunManifest, RunPaths,
    SCHEMA_VERSION,
};
use deliberata_core::values::{
    inherited_values, pairwise_similarities, value_occurrence_diff, SimilaritySample,
    ValueAnnotation, ValueOccurrenceDiff, ValueRegistry,
};

use crate::CliError;

/// Everything a run directory can hold, with the optional pieces optional.
#[derive(Debug)]
pub struct RunData {
    pub run_id: String,
    pub manifest: Option<RunManifest>,
    pub transcripts: Vec<Transcript>,
    pub annotations: Option<Vec<ValueAnnotation>>,
    pub fit: Option<FitDoc>,
}

/// Load a run directory. Required inputs are checked up front and every
/// missing one is named in a single error. The manifest is optional so that
/// replay-persisted bundles (which mix configurations) stay analyzable.
pub fn load_run(run: &Path, need_annotations: bool, need_fit: bool) -> Result<RunData, CliError> {
    let paths = RunPaths {
        root: run.to_path_buf(),
    };
    let mut missing = Vec::new();
    if !paths.transcripts().exists() {
        missing.push("transcripts.jsonl");
    }
    if need_annotations && !paths.annotations().exists() {
        missing.push("annotations.jsonl");
    }
    if need_fit && !paths.fit().exists() {
        missing.push("fit.json");
    }
    if !missing.is_empty() {
        return Err(CliError::Validation(format!(
            "missing inputs in {}: {}",
            run.display(),
            missing.join(", ")
        )));
    }
    let manifest = if paths.manifest().exists() {
        Some(load_manifest(&paths)?)
    } else {
        None
    };
    let transcripts = load_transcripts(&paths.transcripts())?.records;
    let annotations = if paths.annotations().exists() {
        Some(load_jsonl::<ValueAnnotation>(&paths.annotations())?.records)
    } else {
        None
    };
    let fit = if paths.fit().exists() {
        let text = std::fs::read_to_string(paths.fit()).map_err(|e| {
            CliError::Validation(format!("cannot read {}: {e}", paths.fit().display()))
        })?;
        Some(serde_json::from_str::<FitDoc>(&text).map_err(|e| {
            CliError::Validation(format!("cannot parse {}: {e}", paths.fit().display()))
        })?)
    } else {
        None
    };
    let run_id = manifest
        .as_ref()
        .map(|m| m.run_id.clone())
        .unwrap_or_else(|| {
            run.file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into())
        });
    Ok(RunData {
        run_id,
        manifest,
        transcripts,
        annotations,
        fit,
    })
}

/// The persisted shape of fit.json. The optimizer trace is summarized, not
/// stored; parameters and the effect table are kept in full.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDoc {
    pub schema_version: u32,
    pub run_id: String,
    pub lambda: f64,
    pub include_phi: bool,
    pub n_rows: usize,
    pub iterations: usize,
    pub final_loss: f64,
    pub converged: bool,
    pub grad_norm: f64,
    /// Transcripts rejected during design construction, one line each.
    pub design_errors: Vec<String>,
    pub params: ModelParams,
    pub table: BTreeMap<String, ModelEffects>,
    pub bootstrap: Option<BootstrapMeta>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapMeta {
    pub replicates: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanWithN {
    pub mean: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityByAgreement {
    pub agree: MeanWithN,
    pub disagree: MeanWithN,
    pub mwu: MannWhitney,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FirstLastSimilarity {
    pub first: MeanWithN,
    pub last: MeanWithN,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityDoc {
    pub mean_by_round: BTreeMap<u32, MeanWithN>,
    pub by_agreement: Option<SimilarityByAgreement>,
    pub consensus_first_last: Option<FirstLastSimilarity>,
    pub no_consensus_first_last: Option<FirstLastSimilarity>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisDoc {
    pub schema_version: u32,
    pub run_id: String,
    pub n_transcripts: usize,
    pub n_aborted: usize,
    pub consensus_rate: f64,
    pub rounds_histogram: BTreeMap<String, f64>,
    pub cov: BTreeMap<String, RateWithCi>,
    pub round1_verdicts: BTreeMap<String, VerdictDistribution>,
    pub consensus_verdicts: VerdictDistribution,
    /// Present when the run has annotations.
    pub similarity: Option<SimilarityDoc>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn build_analysis(data: &RunData, resamples: usize, seed: u64) -> Result<AnalysisDoc, CliError> {
    let summaries = summarize_all(&data.transcripts);
    if summaries.is_empty() {
        return Err(CliError::Validation(
            "no usable transcripts: the run is empty or every transcript aborted".into(),
        ));
    }
    let n_aborted = data.transcripts.len() - summaries.len();
    let n_consensus = summaries
        .iter()
        .filter(|s| matches!(s.outcome, Outcome::Consensus { .. }))
        .count();
    let hist: BTreeMap<String, f64> = rounds_histogram(&summaries)
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();

    let mut agents: BTreeSet<String> = BTreeSet::new();
    for t in &data.transcripts {
        agents.extend(t.config.agent_order.iter().cloned());
    }
    let mut cov = BTreeMap::new();
    let mut round1_verdicts = BTreeMap::new();
    for agent in &agents {
        // Per-agent sub-seed so CIs stay stable when the roster changes.
        let agent_seed = fnv1a64_seeded(agent.as_bytes(), seed);
        if let Ok(rate) = cov_rate(&summaries, agent, resamples, agent_seed) {
            cov.insert(agent.clone(), rate);
        }
        round1_verdicts.insert(
            agent.clone(),
            verdict_distribution(&summaries, VerdictSelector::Round1PerAgent(agent)),
        );
    }

    Ok(AnalysisDoc {
        schema_version: SCHEMA_VERSION,
        run_id: data.run_id.clone(),
        n_transcripts: data.transcripts.len(),
        n_aborted,
        consensus_rate: n_consensus as f64 / summaries.len() as f64,
        rounds_histogram: hist,
        cov,
        round1_verdicts,
        consensus_verdicts: verdict_distribution(&summaries, VerdictSelector::PostConsensus),
        similarity: data
            .annotations
            .as_ref()
            .map(|anns| build_similarity(&data.transcripts, &summaries, anns)),
    })
}

fn build_similarity(
    transcripts: &[Transcript],
    summaries: &[RunSummary],
    anns: &[ValueAnnotation],
) -> SimilarityDoc {
    let usable: BTreeSet<&str> = summaries.iter().map(|s| s.dilemma_id.as_str()).collect();
    let mut samples: Vec<SimilaritySample> = Vec::new();
    for t in transcripts {
        if usable.contains(t.dilemma_id.as_str()) {
            samples.extend(pairwise_similarities(t, anns));
        }
    }

    let mut by_round: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for s in &samples {
        by_round.entry(s.round).or_default().push(s.jaccard);
    }
    let mean_by_round = by_round
        .into_iter()
        .map(|(r, xs)| {
            (
                r,
                MeanWithN {
                    mean: mean(&xs),
                    n: xs.len(),
                },
            )
        })
        .collect();

    let agree: Vec<f64> = samples.iter().filter(|s| s.agree).map(|s| s.jaccard).collect();
    let disagree: Vec<f64> = samples
        .iter()
        .filter(|s| !s.agree)
        .map(|s| s.jaccard)
        .collect();
    let by_agreement = (!agree.is_empty() && !disagree.is_empty()).then(|| SimilarityByAgreement {
        agree: MeanWithN {
            mean: mean(&agree),
            n: agree.len(),
        },
        disagree: MeanWithN {
            mean: mean(&disagree),
            n: disagree.len(),
        },
        mwu: mann_whitney_u(&agree, &disagree),
    });

    let consensus_ids: BTreeSet<&str> = summaries
        .iter()
        .filter(|s| matches!(s.outcome, Outcome::Consensus { .. }))
        .map(|s| s.dilemma_id.as_str())
        .collect();
    let last_round: BTreeMap<&str, u32> = summaries
        .iter()
        .map(|s| (s.dilemma_id.as_str(), s.rounds_used))
        .collect();
    let mut groups: BTreeMap<bool, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in &samples {
        let Some(&last) = last_round.get(s.dilemma_id.as_str()) else {
            continue;
        };
        let slot = groups
            .entry(consensus_ids.contains(s.dilemma_id.as_str()))
            .or_default();
        if s.round == 1 {
            slot.0.push(s.jaccard);
        }
        if s.round == last {
            slot.1.push(s.jaccard);
        }
    }
    let pick = |key: bool| {
        groups
            .get(&key)
            .filter(|(f, l)| !f.is_empty() && !l.is_empty())
            .map(|(f, l)| FirstLastSimilarity {
                first: MeanWithN {
                    mean: mean(f),
                    n: f.len(),
                },
                last: MeanWithN {
                    mean: mean(l),
                    n: l.len(),
                },
            })
    };

    SimilarityDoc {
        mean_by_round,
        by_agreement,
        consensus_first_last: pick(true),
        no_consensus_first_last: pick(false),
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InheritedSummary {
    /// Change-of-verdict turns with usable annotations.
    pub cov_events: usize,
    /// Those whose new values include one first voiced by an opponent.
    pub events_with_inherited: usize,
    pub skipped: usize,
    pub value_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub lambda: f64,
    pub include_phi: bool,
    pub n_rows: usize,
    pub converged: bool,
    pub table: BTreeMap<String, ModelEffects>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportDoc {
    pub schema_version: u32,
    pub run_id: String,
    pub analysis: AnalysisDoc,
    /// Occurrence-rate change per value, round 1 vs each dilemma's final
    /// round.
    pub value_occurrence: Vec<ValueOccurrenceDiff>,
    pub inherited: InheritedSummary,
    pub fit: FitSummary,
}

pub fn build_report(data: &RunData, resamples: usize, seed: u64) -> Result<ReportDoc, CliError> {
    let analysis = build_analysis(data, resamples, seed)?;
    let anns = data
        .annotations
        .as_ref()
        .expect("load_run enforces annotations for reports");
    let fit = data
        .fit
        .as_ref()
        .expect("load_run enforces fit.json for reports");

    let summaries = summarize_all(&data.transcripts);
    let last_round: BTreeMap<&str, u32> = summaries
        .iter()
        .map(|s| (s.dilemma_id.as_str(), s.rounds_used))
        .collect();
    let first: Vec<ValueAnnotation> = anns
        .iter()
        .filter(|a| a.round == 1 && last_round.contains_key(a.dilemma_id.as_str()))
        .cloned()
        .collect();
    let last: Vec<ValueAnnotation> = anns
        .iter()
        .filter(|a| last_round.get(a.dilemma_id.as_str()) == Some(&a.round))
        .cloned()
        .collect();
    let registry = ValueRegistry::canonical();
    let value_occurrence = value_occurrence_diff(
        &first,
        &last,
        registry,
        resamples,
        fnv1a64_seeded(b"value-occurrence", seed),
    )
    .map_err(|e| CliError::Validation(format!("value occurrence: {e}")))?;

    let mut inherited = InheritedSummary::default();
    for t in &data.transcripts {
        let rep = inherited_values(t, anns);
        inherited.skipped += rep.skipped.len();
        for ev in rep.events {
            inherited.cov_events += 1;
            if !ev.inherited.is_empty() {
                inherited.events_with_inherited += 1;
                for v in ev.inherited {
                    *inherited.value_counts.entry(v).or_default() += 1;
                }
            }
        }
    }

    Ok(ReportDoc {
        schema_version: SCHEMA_VERSION,
        run_id: analysis.run_id.clone(),
        analysis,
        value_occurrence,
        inherited,
        fit: FitSummary {
            lambda: fit.lambda,
            include_phi: fit.include_phi,
            n_rows: fit.n_rows,
            converged: fit.converged,
            table: fit.table.clone(),
        },
    })
}

fn write_csv(
    path: &Path,
    build: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    build(&mut w).map_err(|e| CliError::Validation(format!("csv build failed: {e}")))?;
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Validation(format!("csv flush failed: {e}")))?;
    std::fs::write(path, bytes)
        .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// Write the plot-data files next to report.json. Returns how many files
/// were written.
pub fn write_plots(dir: &Path, doc: &ReportDoc) -> Result<usize, CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Validation(format!("cannot create {}: {e}", dir.display())))?;
    let mut written = 0usize;

    write_csv(&dir.join("rounds_histogram.csv"), |w| {
        w.write_record(["bucket", "proportion"])?;
        for (bucket, p) in &doc.analysis.rounds_histogram {
            w.write_record([bucket.as_str(), &num(*p)])?;
        }
        Ok(())
    })?;
    written += 1;

    write_csv(&dir.join("cov_rates.csv"), |w| {
        w.write_record(["agent", "rate", "ci_lo", "ci_hi"])?;
        for (agent, r) in &doc.analysis.cov {
            w.write_record([agent.as_str(), &num(r.rate), &num(r.ci.0), &num(r.ci.1)])?;
        }
        Ok(())
    })?;
    written += 1;

    write_csv(&dir.join("verdict_distributions.csv"), |w| {
        w.write_record(["selector", "verdict", "proportion"])?;
        for (agent, dist) in &doc.analysis.round1_verdicts {
            let selector = format!("round1:{agent}");
            for v in Verdict::ALL {
                let p = dist.verdicts.get(&v).copied().unwrap_or(0.0);
                w.write_record([selector.as_str(), v.code(), &num(p)])?;
            }
        }
        let dist = &doc.analysis.consensus_verdicts;
        for v in Verdict::ALL {
            let p = dist.verdicts.get(&v).copied().unwrap_or(0.0);
            w.write_record(["consensus", v.code(), &num(p)])?;
        }
        w.write_record(["consensus", "no_consensus", &num(dist.no_consensus)])?;
        Ok(())
    })?;
    written += 1;

    if let Some(sim) = &doc.analysis.similarity {
        write_csv(&dir.join("similarity_by_round.csv"), |w| {
            w.write_record(["round", "mean_jaccard", "n"])?;
            for (round, m) in &sim.mean_by_round {
                w.write_record([&round.to_string(), &num(m.mean), &m.n.to_string()])?;
            }
            Ok(())
        })?;
        written += 1;

        write_csv(&dir.join("similarity_by_agreement.csv"), |w| {
            w.write_record(["group", "mean_jaccard", "n", "mwu_u", "mwu_p"])?;
            if let Some(ba) = &sim.by_agreement {
                let (u, p) = (num(ba.mwu.u), num(ba.mwu.p_two_sided));
                w.write_record([
                    "agree",
                    &num(ba.agree.mean),
                    &ba.agree.n.to_string(),
                    &u,
                    &p,
                ])?;
                w.write_record([
                    "disagree",
                    &num(ba.disagree.mean),
                    &ba.disagree.n.to_string(),
                    &u,
                    &p,
                ])?;
            }
            Ok(())
        })?;
        written += 1;

        write_csv(&dir.join("similarity_first_last.csv"), |w| {
            w.write_record(["outcome", "first_mean", "first_n", "last_mean", "last_n"])?;
            for (label, group) in [
                ("consensus", &sim.consensus_first_last),
                ("no_consensus", &sim.no_consensus_first_last),
            ] {
                if let Some(g) = group {
                    w.write_record([
                        label,
                        &num(g.first.mean),
                        &g.first.n.to_string(),
                        &num(g.last.mean),
                        &g.last.n.to_string(),
                    ])?;
                }
            }
            Ok(())
        })?;
        written += 1;
    }

    write_csv(&dir.join("value_occurrence.csv"), |w| {
        w.write_record([
            "value",
            "rate_first",
            "rate_last",
            "diff",
            "ci_lo",
            "ci_hi",
            "significant",
        ])?;
        for d in &doc.value_occurrence {
            w.write_record([
                d.value.as_str(),
                &num(d.rate_a),
                &num(d.rate_b),
                &num(d.diff),
                &num(d.ci.0),
                &num(d.ci.1),
                if d.significant { "true" } else { "false" },
            ])?;
        }
        Ok(())
    })?;
    written += 1;

    write_csv(&dir.join("inherited_values.csv"), |w| {
        w.write_record(["value", "count"])?;
        for (value, count) in &doc.inherited.value_counts {
            w.write_record([value.as_str(), &count.to_string()])?;
        }
        Ok(())
    })?;
    written += 1;

    write_csv(&dir.join("fit_table.csv"), |w| {
        w.write_record([
            "model",
            "parameter",
            "estimate",
            "odds_ratio",
            "ci_lo",
            "ci_hi",
        ])?;
        for (model, effects) in &doc.fit.table {
            for (name, rep) in [
                ("alpha", &effects.alpha),
                ("gamma_prev", &effects.gamma_prev),
                ("gamma_within", &effects.gamma_within),
            ] {
                let (lo, hi) = rep
                    .ci
                    .map(|(a, b)| (num(a), num(b)))
                    .unwrap_or_default();
                w.write_record([
                    model.as_str(),
                    name,
                    &num(rep.estimate),
                    &num(rep.odds_ratio),
                    &lo,
                    &hi,
                ])?;
            }
        }
        Ok(())
    })?;
    written += 1;

    Ok(written)
}
