#!/usr/bin/env python3
"""Smoke test for the deliberata_py extension module.

Builds the cdylib with cargo, stages it under the import name, then walks
every exported function with known-answer checks. Exits non-zero on the
first failure.
"""

import json
import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def build_and_import():
    subprocess.run(
        ["cargo", "build", "-p", "deliberata-py"],
        cwd=REPO,
        check=True,
    )
    lib = REPO / "target" / "debug" / "libdeliberata_py.so"
    if not lib.exists():
        sys.exit(f"built library not found at {lib}")
    stage = Path(tempfile.mkdtemp(prefix="deliberata-py-"))
    shutil.copy2(lib, stage / "deliberata_py.so")
    sys.path.insert(0, str(stage))
    import deliberata_py

    return deliberata_py


def check(name, ok, detail=""):
    if ok:
        print(f"smoke {name}: PASS")
    else:
        sys.exit(f"smoke {name}: FAIL {detail}")


def main():
    d = build_and_import()

    check("import", bool(d.version()), d.version())

    codes = d.verdict_codes()
    check("verdicts", codes == ["NTA", "YTA", "ESH", "NAH", "INFO"], codes)

    names = d.value_names()
    check(
        "registry",
        len(names) == 48 and len(set(names)) == 48 and "Personal autonomy" in names,
        f"{len(names)} names",
    )

    stripped = d.strip_edits("She said no.\n\nEDIT: thanks for the gold.")
    check("strip_edits", stripped == "She said no.", repr(stripped))

    check(
        "classify_comment",
        d.classify_comment("YTA. You broke the agreement.") == "YTA"
        and d.classify_comment("hard to say, depends on the lease terms") is None,
    )

    uniform = {c: 7 for c in codes}
    ent = d.disagreement_entropy(uniform)
    check("entropy", abs(ent - math.log(5)) < 1e-12, ent)

    j = d.jaccard(["a", "b"], ["b", "c"])
    check("jaccard", abs(j - 1 / 3) < 1e-15 and d.jaccard([], []) == 1.0, j)

    parsed = d.parse_judge_output('{"answers": ["Personal autonomy", "Honest communication"]}')
    check("judge_parse", parsed == ["Honest communication", "Personal autonomy"], parsed)

    verdict, explanation, mismatch = d.parse_turn(
        "My current verdict: NAH.\n\nHere's my thinking: both acted in good faith.", 2
    )
    check(
        "parse_turn",
        verdict == "NAH" and explanation == "both acted in good faith." and not mismatch,
        (verdict, explanation, mismatch),
    )

    prompt = d.render_agent_prompt("round_robin", "correctness_priority", 2, 3)
    check("agent_prompt", "Agent 2" in prompt and len(prompt) > 200, f"{len(prompt)} chars")

    judge_prompt = d.render_judge_prompt()
    check("judge_prompt", names[0] in judge_prompt, f"{len(judge_prompt)} chars")

    digest = d.prompt_digest()
    check("digest", len(digest) == 16 and int(digest, 16) >= 0, digest)

    dilemma = {
        "id": "smoke-1",
        "title": "AITA for testing the bindings",
        "body": "A short synthetic dilemma used only to exercise the engine.",
        "source": {"origin": "smoke", "ingested_at": 0},
    }
    config = {
        "format": "synchronous",
        "max_rounds": 4,
        "goal_variant": "correctness_priority",
        "agent_order": ["A", "B"],
        "parse_retries": 2,
    }
    turn = "My current verdict: YTA.\n\nHere's my thinking: scripted."
    roster = [
        {"name": "A", "kind": "scripted", "script": [turn]},
        {"name": "B", "kind": "scripted", "script": [turn]},
    ]
    transcript = json.loads(
        d.run_deliberation(json.dumps(dilemma), json.dumps(config), json.dumps(roster))
    )
    check(
        "scripted_run",
        transcript["outcome"] == {"kind": "consensus", "verdict": "YTA", "round": 1},
        transcript["outcome"],
    )

    synth = [
        {"name": "A", "kind": "synthetic", "seed": 1, "params": {"alpha": 1.5, "gamma_within": 1.0}},
        {"name": "B", "kind": "synthetic", "seed": 2, "params": {"alpha": 1.5, "gamma_within": 1.0}},
    ]
    rr_config = dict(config, format="round_robin")
    transcripts = []
    for i in range(20):
        dil = dict(dilemma, id=f"smoke-{i:02}")
        transcripts.append(
            json.loads(d.run_deliberation(json.dumps(dil), json.dumps(rr_config), json.dumps(synth)))
        )
    summaries = json.loads(d.summarize(json.dumps(transcripts)))
    check("summarize", len(summaries) == 20, len(summaries))

    design = json.loads(d.build_design(json.dumps(transcripts)))
    check(
        "design",
        not design["errors"] and len(design["rows"]) >= 40,
        f"{len(design['rows'])} rows, errors {design['errors']}",
    )

    fit = json.loads(d.fit(json.dumps(design["rows"]), include_phi=False))
    check(
        "fit",
        fit["converged"] and sorted(fit["table"]) == ["A", "B"],
        f"converged={fit['converged']}",
    )
    effects = fit["table"]["A"]["alpha"]
    check(
        "odds_ratio",
        effects["odds_ratio"] == math.exp(effects["estimate"]),
        effects,
    )

    u, p, exact = d.mann_whitney_u([1.0, 2.0], [1.0, 2.0])
    check("mann_whitney", u == 2.0 and p == 1.0 and exact, (u, p, exact))

    z, pz = d.two_proportion_z(5, 10, 5, 10)
    check("two_proportion", z == 0.0 and pz == 1.0, (z, pz))

    lo, hi = d.bootstrap_mean_ci([3.0] * 10, n_resamples=200, seed=7)
    check("bootstrap", lo == 3.0 and hi == 3.0, (lo, hi))

    print("smoke test: all checks passed")


if __name__ == "__main__":
    main()
