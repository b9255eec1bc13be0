//! The eight pipeline subcommands.
//!
//! `deliberate` and `simulate` share one batch runner: a manifest-backed,
//! resumable loop that deliberates pending dilemmas up to the parallelism
//! bound and appends transcripts as they finish.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use deliberata_core::agents::{build_connector, load_agents_file, AgentKind, AgentSpec, AgentsFile};
use deliberata_core::corpus::{build_corpus, synthetic_dilemma, CorpusPost, Dilemma, RawSubmission};
use deliberata_core::inference::{
    attach_cis, build_design, fit as fit_model, fit_bootstrap_ci, DesignOptions, FitOptions,
};
use deliberata_core::prompts::PromptLibrary;
use deliberata_core::protocol::{
    run_deliberation, AbortReason, AgentConnector, DeliberationConfig, Outcome, Transcript,
    DEFAULT_PARSE_RETRIES,
};
use deliberata_core::store::{
    append_jsonl, append_transcript, derive_run_id, fnv1a64_seeded, load_jsonl, load_transcripts,
    resume, save_manifest, write_json_atomic, DilemmaStatus, ManifestConfig, RunManifest, RunPaths,
    SCHEMA_VERSION,
};
use deliberata_core::values::{annotate_transcript, ValueRegistry};

use crate::fixtures::{self, Fixture};
use crate::report::{self, BootstrapMeta, FitDoc};
use crate::{
    AnalyzeArgs, AnnotateArgs, CliError, DeliberateArgs, FitArgs, Globals, IngestArgs, ReplayArgs,
    ReportArgs, SimulateArgs,
};

fn unix_now() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

/// Replace a JSONL artifact wholesale. Used for artifacts that are rebuilt
/// in full, where append-crash recovery buys nothing.
fn write_jsonl_fresh<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| {
                CliError::Validation(format!("cannot create {}: {e}", parent.display()))
            })?;
        }
    }
    match std::fs::remove_file(path) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => {
            return Err(CliError::Validation(format!(
                "cannot replace {}: {e}",
                path.display()
            )))
        }
    }
    for r in records {
        append_jsonl(path, r)?;
    }
    Ok(())
}

pub fn ingest(args: &IngestArgs) -> Result<(), CliError> {
    if args.top_k == 0 {
        return Err(CliError::Validation("--top-k must be positive".into()));
    }
    let load = load_jsonl::<RawSubmission>(&args.input)?;
    if load.truncated > 0 {
        eprintln!(
            "warning: dropped {} truncated trailing line in {}",
            load.truncated,
            args.input.display()
        );
    }
    let ingested_at = args
        .ingested_at
        .unwrap_or_else(|| load.records.iter().map(|s| s.created_at).max().unwrap_or(0));
    let (posts, stats) = build_corpus(load.records, None, &args.origin, ingested_at, args.top_k)
        .map_err(|e| CliError::Transport(e.to_string()))?;
    write_jsonl_fresh(&args.output, &posts)?;
    let rejected: u64 = stats.rejected.values().sum();
    println!(
        "ingest: {} submissions, {} kept, {} rejected, {} without verdict comments; wrote {} ranked posts to {}",
        stats.submissions,
        stats.kept,
        rejected,
        stats.no_verdict_comments,
        posts.len(),
        args.output.display()
    );
    Ok(())
}

/// Resolve roster names against the agents file, preserving order.
fn resolve_roster(file: &AgentsFile, names: &[String]) -> Result<Vec<AgentSpec>, CliError> {
    let mut specs = Vec::with_capacity(names.len());
    for name in names {
        match file.get(name) {
            Some(spec) => specs.push(spec.clone()),
            None => {
                return Err(CliError::Validation(format!(
                    "agent {name:?} is not in the roster file"
                )))
            }
        }
    }
    Ok(specs)
}

struct BatchSpec<'a> {
    roster: Vec<AgentSpec>,
    config: DeliberationConfig,
    dilemmas: Vec<Dilemma>,
    runs_root: &'a Path,
    seed: u64,
    parallel: usize,
}

struct BatchOutcome {
    run_id: String,
    root: std::path::PathBuf,
    attempted: usize,
    done: usize,
    aborted: usize,
    first_transport: Option<String>,
    first_parse: Option<String>,
}

impl BatchOutcome {
    fn skipped(&self, total: usize) -> usize {
        total - self.attempted
    }

    /// A batch where every attempt died is a hard failure; partial results
    /// stay on disk for the next resume either way.
    fn into_result(self) -> Result<(), CliError> {
        if self.attempted > 0 && self.done == 0 && self.aborted == self.attempted {
            if let Some(detail) = self.first_transport {
                return Err(CliError::Transport(format!(
                    "every deliberation aborted; first transport failure: {detail}"
                )));
            }
            return Err(CliError::Validation(format!(
                "every deliberation aborted by parse failure; first: {}",
                self.first_parse.unwrap_or_default()
            )));
        }
        Ok(())
    }
}

fn abort_reason_text(reason: &AbortReason) -> String {
    match reason {
        AbortReason::ParseFailure {
            agent,
            round,
            detail,
        } => format!("parse failure: {agent} round {round}: {detail}"),
        AbortReason::Transport {
            agent,
            round,
            detail,
        } => format!("transport: {agent} round {round}: {detail}"),
    }
}

/// Deliberate one dilemma with freshly built connectors. Synthetic agents
/// get a seed derived from (run seed, dilemma, agent) so every transcript is
/// an independent, reproducible draw.
fn run_one(
    dilemma: &Dilemma,
    roster: &[AgentSpec],
    config: &DeliberationConfig,
    prompts: &PromptLibrary,
    seed: u64,
) -> Result<Transcript, CliError> {
    let dilemma_seed = fnv1a64_seeded(dilemma.id.as_bytes(), seed);
    let mut connectors: Vec<Box<dyn AgentConnector>> = Vec::with_capacity(roster.len());
    for spec in roster {
        let agent_seed = fnv1a64_seeded(spec.name.as_bytes(), dilemma_seed);
        connectors.push(build_connector(spec, Some(agent_seed))?);
    }
    run_deliberation(dilemma, config, &mut connectors, prompts).map_err(Into::into)
}

fn run_batch(spec: BatchSpec<'_>) -> Result<BatchOutcome, CliError> {
    spec.config.validate()?;
    let prompts = PromptLibrary::builtin();
    let n = spec.config.agent_order.len();
    // Fail before any side effect if this format/goal/arity combination has
    // no prompt.
    for i in 0..n {
        prompts.render_agent_prompt(spec.config.format, spec.config.goal_variant, i + 1, n)?;
    }

    let ids: Vec<String> = spec.dilemmas.iter().map(|d| d.id.clone()).collect();
    let mut seen = BTreeSet::new();
    for id in &ids {
        if !seen.insert(id.as_str()) {
            return Err(CliError::Validation(format!(
                "corpus contains dilemma {id:?} twice"
            )));
        }
    }
    if ids.is_empty() {
        return Err(CliError::Validation("no dilemmas to deliberate".into()));
    }

    let manifest_config = ManifestConfig {
        agents: spec.roster.iter().map(|a| a.name.clone()).collect(),
        deliberation: spec.config.clone(),
        seed: spec.seed,
        prompts_hash: prompts.digest(),
    };
    let run_id = derive_run_id(&manifest_config)?;
    let paths = RunPaths::new(spec.runs_root, &run_id);

    let mut manifest = if paths.manifest().exists() {
        let m = deliberata_core::store::load_manifest(&paths)?;
        if m.config != manifest_config {
            return Err(CliError::Validation(format!(
                "run directory {} holds a different configuration",
                paths.root.display()
            )));
        }
        m
    } else {
        RunManifest::new(manifest_config, ids.clone(), unix_now())?
    };

    // Reconcile transcripts already on disk: a crash window between append
    // and manifest save leaves a finished transcript with a pending status,
    // which would otherwise be deliberated twice.
    let mut on_disk: Vec<Transcript> = Vec::new();
    let mut rewrite = false;
    if paths.transcripts().exists() {
        let load = load_transcripts(&paths.transcripts())?;
        rewrite = load.truncated > 0;
        on_disk = load.records;
        for t in &on_disk {
            if manifest.status.get(&t.dilemma_id) == Some(&DilemmaStatus::Pending) {
                match &t.outcome {
                    Outcome::Aborted { reason } => {
                        manifest.mark_aborted(
                            &t.dilemma_id,
                            abort_reason_text(reason),
                            unix_now(),
                        )?;
                    }
                    _ => manifest.mark_done(&t.dilemma_id, unix_now())?,
                }
            }
        }
    }

    let pending = resume(&manifest, &ids)?;
    let pending_set: BTreeSet<&str> = pending.iter().map(String::as_str).collect();

    // Aborted dilemmas are retried, so their stale transcripts must go.
    let before = on_disk.len();
    on_disk.retain(|t| !pending_set.contains(t.dilemma_id.as_str()));
    if rewrite || on_disk.len() != before {
        write_jsonl_fresh(&paths.transcripts(), &on_disk)?;
    }
    save_manifest(&paths, &manifest)?;

    let todo: Vec<&Dilemma> = spec
        .dilemmas
        .iter()
        .filter(|d| pending_set.contains(d.id.as_str()))
        .collect();

    let mut outcome = BatchOutcome {
        run_id,
        root: paths.root.clone(),
        attempted: todo.len(),
        done: 0,
        aborted: 0,
        first_transport: None,
        first_parse: None,
    };

    for chunk in todo.chunks(spec.parallel.max(1)) {
        let results: Vec<Result<Transcript, CliError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|dilemma| {
                    let roster = &spec.roster;
                    let config = &spec.config;
                    let prompts = &prompts;
                    let seed = spec.seed;
                    scope.spawn(move || run_one(dilemma, roster, config, prompts, seed))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("deliberation worker panicked"))
                .collect()
        });
        for result in results {
            let t = result?;
            append_transcript(&paths.transcripts(), &t)?;
            match &t.outcome {
                Outcome::Aborted { reason } => {
                    outcome.aborted += 1;
                    let text = abort_reason_text(reason);
                    match reason {
                        AbortReason::Transport { .. } => {
                            outcome.first_transport.get_or_insert(text.clone());
                        }
                        AbortReason::ParseFailure { .. } => {
                            outcome.first_parse.get_or_insert(text.clone());
                        }
                    }
                    manifest.mark_aborted(&t.dilemma_id, text, unix_now())?;
                }
                _ => {
                    outcome.done += 1;
                    manifest.mark_done(&t.dilemma_id, unix_now())?;
                }
            }
            save_manifest(&paths, &manifest)?;
        }
    }
    Ok(outcome)
}

pub fn deliberate(globals: &Globals, args: &DeliberateArgs) -> Result<(), CliError> {
    let agents_file = load_agents_file(&globals.config)?;
    let roster = resolve_roster(&agents_file, &args.roster)?;
    let corpus = load_jsonl::<CorpusPost>(&args.corpus)?;
    let mut dilemmas: Vec<Dilemma> = corpus.records.into_iter().map(|p| p.dilemma).collect();
    if let Some(limit) = args.limit {
        dilemmas.truncate(limit);
    }
    let total = dilemmas.len();
    let config = DeliberationConfig {
        format: args.format.into(),
        max_rounds: args.max_rounds,
        goal_variant: args.goal.into(),
        agent_order: args.roster.clone(),
        parse_retries: DEFAULT_PARSE_RETRIES,
    };
    let outcome = run_batch(BatchSpec {
        roster,
        config,
        dilemmas,
        runs_root: &args.runs_dir,
        seed: globals.seed,
        parallel: globals.parallel,
    })?;
    println!(
        "run {}: {} deliberated, {} aborted, {} already done -> {}",
        outcome.run_id,
        outcome.done,
        outcome.aborted,
        outcome.skipped(total),
        outcome.root.display()
    );
    outcome.into_result()
}

pub fn simulate(globals: &Globals, args: &SimulateArgs) -> Result<(), CliError> {
    if args.n_dilemmas == 0 {
        return Err(CliError::Validation("--n-dilemmas must be positive".into()));
    }
    let agents_file = load_agents_file(&globals.config)?;
    let roster = resolve_roster(&agents_file, &args.roster)?;
    for spec in &roster {
        if !matches!(spec.kind, AgentKind::Synthetic(_)) {
            return Err(CliError::Validation(format!(
                "simulate requires synthetic agents; {:?} is not synthetic",
                spec.name
            )));
        }
    }
    let dilemmas: Vec<Dilemma> = (0..args.n_dilemmas)
        .map(|i| synthetic_dilemma(&format!("sim{i:05}")))
        .collect();
    let total = dilemmas.len();
    let config = DeliberationConfig {
        format: args.format.into(),
        max_rounds: args.max_rounds,
        goal_variant: args.goal.into(),
        agent_order: args.roster.clone(),
        parse_retries: DEFAULT_PARSE_RETRIES,
    };
    let outcome = run_batch(BatchSpec {
        roster,
        config,
        dilemmas,
        runs_root: &args.runs_dir,
        seed: globals.seed,
        parallel: globals.parallel,
    })?;
    println!(
        "run {}: {} simulated, {} aborted, {} already done -> {}",
        outcome.run_id,
        outcome.done,
        outcome.aborted,
        outcome.skipped(total),
        outcome.root.display()
    );
    outcome.into_result()
}

pub fn annotate(globals: &Globals, args: &AnnotateArgs) -> Result<(), CliError> {
    let paths = RunPaths {
        root: args.run.clone(),
    };
    if !paths.transcripts().exists() {
        return Err(CliError::Validation(format!(
            "missing {}; run deliberate or simulate first",
            paths.transcripts().display()
        )));
    }
    let transcripts = load_transcripts(&paths.transcripts())?;
    let agents_file = load_agents_file(&globals.config)?;
    let spec = agents_file.get(&args.judge).ok_or_else(|| {
        CliError::Validation(format!("judge {:?} is not in the roster file", args.judge))
    })?;
    if matches!(spec.kind, AgentKind::Synthetic(_)) {
        return Err(CliError::Validation(format!(
            "judge {:?} is synthetic; a judge must be scripted or remote",
            args.judge
        )));
    }
    let mut judge = build_connector(spec, None)?;
    let registry = ValueRegistry::canonical();
    let prompts = PromptLibrary::builtin();

    let mut annotations = Vec::new();
    let mut failed = 0usize;
    let mut first_failure: Option<String> = None;
    for t in &transcripts.records {
        let report = annotate_transcript(t, judge.as_mut(), registry, &prompts, &spec.name)?;
        failed += report.failed_turns.len();
        if first_failure.is_none() {
            first_failure = report.failed_turns.first().map(|f| f.detail.clone());
        }
        annotations.extend(report.annotations);
    }
    if !annotations.is_empty() && failed == annotations.len() {
        return Err(CliError::Transport(format!(
            "judge produced no usable annotation; first failure: {}",
            first_failure.unwrap_or_default()
        )));
    }
    write_jsonl_fresh(&paths.annotations(), &annotations)?;
    println!(
        "annotated {} turns across {} transcripts ({} failed) -> {}",
        annotations.len(),
        transcripts.records.len(),
        failed,
        paths.annotations().display()
    );
    Ok(())
}

pub fn analyze(globals: &Globals, args: &AnalyzeArgs) -> Result<(), CliError> {
    let data = report::load_run(&args.run, false, false)?;
    let doc = report::build_analysis(&data, args.resamples, globals.seed)?;
    let out = args.run.join("analysis.json");
    write_json_atomic(&out, &doc)?;
    println!(
        "analysis: {} transcripts ({} aborted), consensus rate {:.3} -> {}",
        doc.n_transcripts,
        doc.n_aborted,
        doc.consensus_rate,
        out.display()
    );
    Ok(())
}

pub fn fit(globals: &Globals, args: &FitArgs) -> Result<(), CliError> {
    let data = report::load_run(&args.run, false, false)?;
    let paths = RunPaths {
        root: args.run.clone(),
    };
    let design = build_design(&data.transcripts, &DesignOptions::default());
    if design.rows.is_empty() {
        return Err(CliError::Validation(
            "no design rows could be built from the run's transcripts".into(),
        ));
    }
    let opts = FitOptions {
        lambda: args.lambda,
        include_phi: !args.no_phi,
        ..Default::default()
    };
    let mut result = fit_model(&design.rows, &opts)?;
    let bootstrap = if args.bootstrap > 0 {
        let boot = fit_bootstrap_ci(&design.rows, args.bootstrap, globals.seed, &opts)?;
        attach_cis(&mut result, &boot);
        Some(BootstrapMeta {
            replicates: args.bootstrap,
            dropped: boot.dropped,
        })
    } else {
        None
    };
    let doc = FitDoc {
        schema_version: SCHEMA_VERSION,
        run_id: data.run_id.clone(),
        lambda: args.lambda,
        include_phi: !args.no_phi,
        n_rows: result.n_rows,
        iterations: result.loss_trace.len(),
        final_loss: result.loss_trace.last().copied().unwrap_or(f64::NAN),
        converged: result.converged,
        grad_norm: result.grad_norm,
        design_errors: design.errors,
        params: result.params,
        table: result.table,
        bootstrap,
    };
    write_json_atomic(&paths.fit(), &doc)?;
    println!(
        "fit: {} rows, {} iterations, converged={} -> {}",
        doc.n_rows,
        doc.iterations,
        doc.converged,
        paths.fit().display()
    );
    for (model, effects) in &doc.table {
        println!(
            "  {model}: alpha {:+.4} (OR {:.3}), gamma_prev {:+.4} (OR {:.3}), gamma_within {:+.4} (OR {:.3})",
            effects.alpha.estimate,
            effects.alpha.odds_ratio,
            effects.gamma_prev.estimate,
            effects.gamma_prev.odds_ratio,
            effects.gamma_within.estimate,
            effects.gamma_within.odds_ratio,
        );
    }
    Ok(())
}

pub fn replay(args: &ReplayArgs) -> Result<(), CliError> {
    let loaded = match &args.fixtures {
        Some(dir) => fixtures::load_dir(dir)?,
        None => fixtures::load_builtin()?,
    };
    if loaded.is_empty() {
        return Err(CliError::Validation("no fixtures to replay".into()));
    }
    let mut failures = 0usize;
    let mut replayed: Vec<(&Fixture, Transcript)> = Vec::new();
    for fixture in &loaded {
        let transcript = fixtures::replay_one(fixture)?;
        let diffs = fixtures::check(fixture, &transcript);
        if diffs.is_empty() {
            println!("replay {}: ok", fixture.name);
        } else {
            failures += 1;
            println!("replay {}: MISMATCH", fixture.name);
            for d in &diffs {
                println!("  {d}");
            }
        }
        replayed.push((fixture, transcript));
    }
    if let Some(runs_dir) = &args.runs_dir {
        // Fixture bundles mix formats, so no single config snapshot fits a
        // manifest; the transcripts alone feed the downstream commands.
        let dir = runs_dir.join("replay");
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::Validation(format!("cannot create {}: {e}", dir.display())))?;
        let transcripts: Vec<&Transcript> = replayed.iter().map(|(_, t)| t).collect();
        write_jsonl_fresh(&dir.join("transcripts.jsonl"), &transcripts)?;
        println!("persisted {} transcripts -> {}", transcripts.len(), dir.display());
    }
    if failures > 0 {
        return Err(CliError::Mismatch(format!(
            "{failures} of {} fixtures mismatched",
            loaded.len()
        )));
    }
    Ok(())
}

pub fn report(globals: &Globals, args: &ReportArgs) -> Result<(), CliError> {
    let data = report::load_run(&args.run, true, true)?;
    let paths = RunPaths {
        root: args.run.clone(),
    };
    let doc = report::build_report(&data, args.resamples, globals.seed)?;
    write_json_atomic(&paths.report(), &doc)?;
    let plots = args.run.join("plots");
    let n_files = report::write_plots(&plots, &doc)?;
    println!(
        "report: {} -> {} + {} plot files in {}",
        doc.run_id,
        paths.report().display(),
        n_files,
        plots.display()
    );
    Ok(())
}
