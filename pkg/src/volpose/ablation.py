"""Paired training runs that check the architecture orderings.

Each suite trains a few configurations over several seeds at an equal step
budget and checks, per seed, that the expected configuration reaches a
strictly lower test MPJPE. A comparison passes when the ordering holds for a
majority of seeds; a suite passes when all its comparisons do.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError
from .skeleton import make_toy_skeleton
from .trainer import TrainConfig, make_dataset, run_experiment

logger = logging.getLogger(__name__)

DEFAULT_STEPS = 2000  # largest budget that keeps table2 under 30 min on one core

# name -> overrides of the base TrainConfig
CONFIGS = {
    "coord": {"arch": "coord"},
    "volume_16": {"ladder": (16,)},
    "naive_16_16": {"ladder": (16, 16)},
    "c2f_1_16": {"ladder": (1, 16)},
    "naive_16_16_16": {"ladder": (16, 16, 16)},
    "c2f_1_2_16": {"ladder": (1, 2, 16)},
    "decoupled_1_16": {"ladder": (1, 16), "fuse_features": False},
}

# suite -> list of (expected lower MPJPE, expected higher MPJPE)
SUITES = {
    "table1": [("volume_16", "coord")],
    "table2": [("c2f_1_16", "naive_16_16"), ("c2f_1_2_16", "naive_16_16_16")],
    "table3": [("c2f_1_16", "decoupled_1_16")],
}


def thread_cap():
    raw = os.environ.get("VPK_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"VPK_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)


def config_key(config):
    doc = json.dumps(config.to_json(), sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def _summary(report):
    return {
        "test_mpjpe_mm": report["test_mpjpe_mm"],
        "test_recon_err_mm": report["test_recon_err_mm"],
        "test_mpjpe_argmax_mm": report.get("decode_stats", {}).get("test_mpjpe_argmax_mm"),
        "initial_loss": sum(report["loss_curve"][:50]) / len(report["loss_curve"][:50]),
        "final_loss": sum(report["loss_curve"][-50:]) / len(report["loss_curve"][-50:]),
    }


class RunCache:
    """Memoizes run summaries by config hash, optionally mirrored to a directory."""

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory else None
        self.memory = {}
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)

    def get(self, key):
        if key in self.memory:
            return self.memory[key]
        if self.directory and (self.directory / f"{key}.json").exists():
            with open(self.directory / f"{key}.json") as f:
                self.memory[key] = json.load(f)["summary"]
            return self.memory[key]
        return None

    def put(self, key, config, summary):
        self.memory[key] = summary
        if self.directory:
            doc = {"config": config.to_json(), "summary": summary}
            with open(self.directory / f"{key}.json", "w") as f:
                json.dump(doc, f, indent=2, sort_keys=True)
                f.write("\n")


def suite_configs(suite):
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    names = []
    for pair in SUITES[suite]:
        for name in pair:
            if name not in names:
                names.append(name)
    return names


def run_suite(suite, n_seeds=3, base=None, cache=None, skeleton=None, threads=None):
    """Train every configuration of ``suite`` for seeds ``base.seed .. base.seed+n_seeds-1``."""
    if n_seeds < 1:
        raise ConfigError("need at least one seed")
    base = base or TrainConfig(steps=DEFAULT_STEPS)
    skeleton = skeleton or make_toy_skeleton()
    cache = cache or RunCache()
    threads = threads or thread_cap()
    names = suite_configs(suite)
    seeds = [base.seed + i for i in range(n_seeds)]

    jobs = []
    for seed in seeds:
        for name in names:
            cfg = replace(base, seed=seed, **CONFIGS[name])
            cfg.validate()
            jobs.append((name, seed, cfg, config_key(cfg)))

    datasets = {}

    def dataset(seed):
        if seed not in datasets:
            datasets[seed] = make_dataset(skeleton, base.n_train, base.n_test, seed, replace(base, seed=seed))
        return datasets[seed]

    def work(job):
        name, seed, cfg, key = job
        hit = cache.get(key)
        if hit is not None:
            logger.info("%s seed %d: cached (%s)", name, seed, key)
            return hit
        logger.info("%s seed %d: training %d steps", name, seed, cfg.steps)
        report, _ = run_experiment(cfg, skeleton, dataset(seed))
        summary = _summary(report)
        cache.put(key, cfg, summary)
        return summary

    pending = [j for j in jobs if cache.get(j[3]) is None]
    for seed in sorted({j[1] for j in pending}):
        dataset(seed)  # build up front so worker threads never race on it
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]

    runs = {name: {} for name in names}
    for (name, seed, _, key), summary in zip(jobs, results):
        runs[name][str(seed)] = dict(summary, config_key=key)

    comparisons = []
    for better, worse in SUITES[suite]:
        per_seed = []
        for seed in seeds:
            a = runs[better][str(seed)]["test_mpjpe_mm"]
            b = runs[worse][str(seed)]["test_mpjpe_mm"]
            per_seed.append({"seed": seed, "lower": a, "higher": b, "holds": bool(a < b)})
        wins = sum(p["holds"] for p in per_seed)
        comparisons.append({
            "expected_lower": better,
            "expected_higher": worse,
            "per_seed": per_seed,
            "wins": wins,
            "verdict": "PASS" if 2 * wins > n_seeds else "FAIL",
        })
    return {
        "suite": suite,
        "seeds": seeds,
        "steps": base.steps,
        "decode": base.decode,
        "runs": runs,
        "comparisons": comparisons,
        "verdict": "PASS" if all(c["verdict"] == "PASS" for c in comparisons) else "FAIL",
    }


def format_result(result):
    lines = [f"suite {result['suite']}  steps {result['steps']}  seeds {result['seeds']}"]
    for c in result["comparisons"]:
        lines.append(f"  {c['expected_lower']} < {c['expected_higher']}:")
        for p in c["per_seed"]:
            mark = "ok" if p["holds"] else "inverted"
            lines.append(f"    seed {p['seed']}: {p['lower']:.2f} vs {p['higher']:.2f} mm  {mark}")
        lines.append(f"    {c['wins']}/{len(c['per_seed'])} seeds -> {c['verdict']}")
    lines.append(f"verdict: {result['verdict']}")
    return "\n".join(lines)
