"""Multi-seed synthetic benchmark: run the whole pipeline per seed and compare
the final masks with the vesselness prior they started from."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from denver.cli import run_command
from denver.config import RunConfig
from denver.errors import ConfigError


@dataclass
class BenchmarkThresholds:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    min_gain: float = 0.02
    min_dice: float = 0.70
    budget_minutes: float = 30.0

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "BenchmarkThresholds":
        raw = cfg.extra.get("acceptance", {})
        try:
            out = cls()
            if "seeds" in raw:
                out.seeds = [int(s) for s in raw["seeds"].split(",") if s.strip()]
            for key in ("min_gain", "min_dice", "budget_minutes"):
                if key in raw:
                    setattr(out, key, float(raw[key]))
        except ValueError as err:
            raise ConfigError(f"[acceptance]: {err}") from err
        if not out.seeds:
            raise ConfigError("[acceptance] seeds is empty")
        return out


@dataclass
class BenchmarkResult:
    rows: list[dict]
    thresholds: BenchmarkThresholds
    wall_time: float

    @property
    def mean_dice(self) -> float:
        return float(np.mean([r["dice"] for r in self.rows]))

    @property
    def mean_prior_dice(self) -> float:
        return float(np.mean([r["prior_dice"] for r in self.rows]))

    @property
    def gain(self) -> float:
        return self.mean_dice - self.mean_prior_dice

    def checks(self) -> dict:
        t = self.thresholds
        return {
            "gain": self.gain >= t.min_gain,
            "dice": self.mean_dice >= t.min_dice,
            "budget": self.wall_time < 60 * t.budget_minutes,
        }

    @property
    def passed(self) -> bool:
        return all(self.checks().values())

    def summary(self) -> str:
        lines = [f"{'seed':>4} {'prior':>7} {'final':>7} {'gain':>7} {'time s':>7}"]
        for r in self.rows:
            lines.append(f"{r['seed']:>4} {r['prior_dice']:7.4f} {r['dice']:7.4f} "
                         f"{r['dice'] - r['prior_dice']:+7.4f} {r['wall_time']:7.1f}")
        t = self.thresholds
        lines.append(f"mean {self.mean_prior_dice:7.4f} {self.mean_dice:7.4f} {self.gain:+7.4f} "
                     f"{self.wall_time:7.1f}")
        lines.append(f"need gain >= {t.min_gain}, dice >= {t.min_dice}, time < {t.budget_minutes} min: "
                     + ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in self.checks().items()))
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {
            "rows": self.rows,
            "mean_dice": self.mean_dice,
            "mean_prior_dice": self.mean_prior_dice,
            "gain": self.gain,
            "wall_time": self.wall_time,
            "checks": self.checks(),
            "passed": self.passed,
        }


def run_benchmark(cfg: RunConfig, root, thresholds: BenchmarkThresholds | None = None,
                  progress=None) -> BenchmarkResult:
    """``run-all`` for every seed under ``root/seed_<k>``; the report lands in ``root/benchmark.json``."""
    if not cfg.run.is_synth:
        raise ConfigError("the benchmark needs run.input = synth")
    thresholds = thresholds or BenchmarkThresholds.from_config(cfg)
    root = Path(root)
    rows = []
    start = time.perf_counter()
    for seed in thresholds.seeds:
        seeded = cfg.with_seed(seed)
        seeded.run = replace(seeded.run, output=str(root / f"seed_{seed}"))
        t0 = time.perf_counter()
        manifests = run_command("run-all", seeded)
        ev = manifests["eval"]
        rows.append({
            "seed": seed,
            "dice": ev["mean"]["dice"],
            "prior_dice": ev["prior_mean"]["dice"],
            "cl_dice": ev["mean"]["cl_dice"],
            "prior_cl_dice": ev["prior_mean"]["cl_dice"],
            "wall_time": time.perf_counter() - t0,
        })
        if progress:
            progress(rows[-1])
    result = BenchmarkResult(rows, thresholds, time.perf_counter() - start)
    (root / "benchmark.json").write_text(json.dumps(result.to_json(), indent=2))
    return result
