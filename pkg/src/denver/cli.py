"""Command line driver: ``denver <stage> --config FILE [--set section.key=value ...]``.

Stages read their inputs from and write their artifacts to one output
directory::

    frames/ gt_masks/ gt_flows/      synth
    prior/ flows/                    preprocess
    stage1/                          background checkpoint, renders, loss trace
    stage2/                          masks, soft masks, canonical foreground, layer flows
    eval/                            metric reports for the final and the prior masks
    manifests/<stage>.json           config, seed, artifact hashes, wall time

Each stage checks the manifest of the stages it depends on and refuses to
run if those artifacts are missing or were modified since they were written.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import shutil
import sys
import time
from pathlib import Path

from filelock import FileLock, Timeout

from denver import __version__
from denver.config import RunConfig, load_config
from denver.errors import (
    ConfigError,
    DenverError,
    FormatError,
    InputError,
    NumericError,
    StageOrderError,
)
from denver.imaging_io import (
    MaskSequence,
    list_images,
    load_arrays,
    load_binary_masks,
    load_clip,
    save_arrays,
    save_binary_masks,
    save_frames,
    save_soft_masks,
)
from denver.metrics_eval import evaluate_sequence
from denver.optical_flow import estimate_flows, load_flows, save_flows
from denver.stage1_background import fit_background, save_checkpoint
from denver.stage2_decompose import run_stage2
from denver.synth_gen import annotated_frames, generate_video, write_sample
from denver.vessel_prior import make_prior_masks

log = logging.getLogger("denver")

STAGES = ("synth", "preprocess", "stage1", "stage2", "eval")
DEPENDS = {
    "synth": (),
    "preprocess": ("synth",),
    "stage1": ("synth",),
    "stage2": ("preprocess", "stage1"),
    "eval": ("preprocess", "stage2"),
}
EXIT_CODES = {ConfigError: 2, StageOrderError: 3, InputError: 4, FormatError: 4, NumericError: 5}
EXIT_BUSY = 6


class Layout:
    """Paths inside one run directory."""

    def __init__(self, root):
        self.root = Path(root)

    frames = property(lambda self: self.root / "frames")
    gt_masks = property(lambda self: self.root / "gt_masks")
    prior = property(lambda self: self.root / "prior")
    flows = property(lambda self: self.root / "flows")
    stage1 = property(lambda self: self.root / "stage1")
    stage2 = property(lambda self: self.root / "stage2")
    eval = property(lambda self: self.root / "eval")
    manifests = property(lambda self: self.root / "manifests")
    lock = property(lambda self: self.root / ".lock")

    def manifest(self, stage) -> Path:
        return self.manifests / f"{stage}.json"


# ---------------------------------------------------------------------------
# manifests


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _artifact_files(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        files.extend(sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p])
    return files


def write_manifest(layout: Layout, stage, cfg: RunConfig, outputs, wall_time, inputs=None, extra=None):
    files = _artifact_files(outputs)
    data = {
        "stage": stage,
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.snapshot(),
        "inputs": inputs or {},
        "artifacts": {str(p.relative_to(layout.root)): sha256(p) for p in files},
        "wall_time": wall_time,
        **(extra or {}),
    }
    layout.manifests.mkdir(parents=True, exist_ok=True)
    layout.manifest(stage).write_text(json.dumps(data, indent=2, sort_keys=True))
    return data


def read_manifest(layout: Layout, stage) -> dict:
    path = layout.manifest(stage)
    if not path.is_file():
        raise StageOrderError(f"stage {stage!r} has not been run in {layout.root} (no {path.name})")
    return json.loads(path.read_text())


def verify_stage(layout: Layout, stage) -> dict:
    """Check that a finished stage's artifacts are still on disk and unchanged."""
    manifest = read_manifest(layout, stage)
    for rel, digest in manifest["artifacts"].items():
        path = layout.root / rel
        if not path.is_file():
            raise StageOrderError(f"{rel} from stage {stage!r} is missing; rerun {stage}")
        if sha256(path) != digest:
            raise StageOrderError(f"{rel} changed since stage {stage!r} wrote it; rerun {stage}")
    return {rel: digest for rel, digest in manifest["artifacts"].items()}


def _required_inputs(layout: Layout, cfg: RunConfig, stage) -> dict:
    inputs = {}
    for dep in DEPENDS[stage]:
        if dep == "synth" and not cfg.run.is_synth:
            continue
        inputs.update(verify_stage(layout, dep))
    return inputs


# ---------------------------------------------------------------------------
# stage helpers


def _fresh(*dirs):
    """Empty stage-owned output directories so manifests list only new artifacts."""
    for d in dirs:
        shutil.rmtree(d, ignore_errors=True)
        d.mkdir(parents=True)


def _load_frames(layout: Layout, cfg: RunConfig):
    source = layout.frames if cfg.run.is_synth else Path(cfg.run.input)
    if not list_images(source):
        raise StageOrderError(f"no frames in {source}; run synth first")
    return load_clip(source)


def _write_trace(rows, path):
    if not rows:
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: "" if v is None else (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _annotated(cfg: RunConfig, gt: MaskSequence) -> list[int]:
    if cfg.run.annotated != "auto":
        return [int(t) for t in cfg.run.annotated.split(",")]
    frames = annotated_frames(gt.masks, cfg.run.annotated_fraction)
    if not frames:
        raise InputError("ground truth is empty in every frame; nothing to evaluate")
    return frames


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig) -> dict:
    layout = Layout(cfg.output)
    if not cfg.run.is_synth:
        raise ConfigError(f"synth needs run.input = synth, got {cfg.run.input!r}")
    start = time.perf_counter()
    sample = generate_video(cfg.synth)
    _fresh(layout.frames, layout.gt_masks, layout.root / "gt_flows")
    write_sample(sample, layout.root)
    outputs = [layout.frames, layout.gt_masks, layout.root / "gt_flows", layout.root / "manifest.json"]
    return write_manifest(layout, "synth", cfg, outputs, time.perf_counter() - start,
                          extra={"annotated_frames": sample.annotated_frames(cfg.run.annotated_fraction)})


def cmd_preprocess(cfg: RunConfig) -> dict:
    layout = Layout(cfg.output)
    inputs = _required_inputs(layout, cfg, "preprocess")
    start = time.perf_counter()
    clip = _load_frames(layout, cfg)
    prior = make_prior_masks(clip, cfg.vesselness, cfg.prior)
    _fresh(layout.prior, layout.flows)
    save_binary_masks(prior.masks, layout.prior, "mask")
    save_flows(estimate_flows(clip, cfg.flow), layout.flows)
    return write_manifest(layout, "preprocess", cfg, [layout.prior, layout.flows],
                          time.perf_counter() - start, inputs)


def cmd_stage1(cfg: RunConfig) -> dict:
    layout = Layout(cfg.output)
    inputs = _required_inputs(layout, cfg, "stage1")
    clip = _load_frames(layout, cfg)
    fit = fit_background(clip, cfg.stage1)
    out = layout.stage1
    _fresh(out)
    save_checkpoint(out / "background_model.arr", fit.model, cfg.stage1)
    save_arrays(out / "background.arr", {"background": fit.background, "flows": fit.pixel_flows()},
                {"frame_ids": clip.frame_ids})
    save_frames(fit.background, out / "background", "background")
    _write_trace(fit.loss_trace, out / "loss_trace.csv")
    return write_manifest(layout, "stage1", cfg, [out], fit.wall_time, inputs)


def cmd_stage2(cfg: RunConfig) -> dict:
    layout = Layout(cfg.output)
    inputs = _required_inputs(layout, cfg, "stage2")
    clip = _load_frames(layout, cfg)
    prior = load_binary_masks(layout.prior)
    guidance = load_flows(layout.flows, clip.num_frames)
    arrays, _ = load_arrays(layout.stage1 / "background.arr")
    result = run_stage2(clip, prior, guidance, arrays["background"], cfg.stage2,
                        background_flows=arrays["flows"])
    out = layout.stage2
    _fresh(out)
    save_binary_masks(result.binary_masks.masks, out / "masks", "mask")
    save_soft_masks(result.soft_masks, out / "soft_masks.arr")
    save_frames(result.canonical_fg[None], out, "canonical_fg")
    save_arrays(out / "layer_flows.arr", {
        "background": result.layer_flows.background.flows,
        "foreground": result.layer_flows.foreground.flows,
    })
    _write_trace(result.loss_trace, out / "loss_trace.csv")
    return write_manifest(layout, "stage2", cfg, [out], result.wall_time, inputs)


def cmd_eval(cfg: RunConfig) -> dict:
    layout = Layout(cfg.output)
    inputs = _required_inputs(layout, cfg, "eval")
    start = time.perf_counter()
    gt_dir = Path(cfg.run.gt_dir) if cfg.run.gt_dir else layout.gt_masks
    if not gt_dir.is_dir():
        raise ConfigError("eval needs ground truth: run synth or set run.gt_dir")
    gt = load_binary_masks(gt_dir)
    preds = load_binary_masks(layout.stage2 / "masks")
    prior = load_binary_masks(layout.prior)
    if gt.masks.shape != preds.masks.shape:
        raise InputError(f"ground truth {gt.masks.shape} does not match predictions {preds.masks.shape}")
    frames = _annotated(cfg, gt)
    report = evaluate_sequence(preds.masks, gt.masks, frames, cfg.run.tau)
    baseline = evaluate_sequence(prior.masks, gt.masks, frames, cfg.run.tau)
    out = layout.eval
    _fresh(out)
    report.to_csv(out / "report.csv")
    baseline.to_csv(out / "report_prior.csv")
    (out / "report.txt").write_text(
        f"frames: {', '.join(map(str, frames))}\n\nfinal masks\n{report.table()}\n\n"
        f"prior masks\n{baseline.table()}\n")
    return write_manifest(layout, "eval", cfg, [out], time.perf_counter() - start, inputs,
                          extra={"mean": report.mean, "prior_mean": baseline.mean})


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "stage1": cmd_stage1,
    "stage2": cmd_stage2,
    "eval": cmd_eval,
}


def cmd_run_all(cfg: RunConfig) -> dict:
    """Every stage in order; synth is skipped for a frame-directory input, eval without ground truth."""
    manifests = {}
    for stage in STAGES:
        if stage == "synth" and not cfg.run.is_synth:
            continue
        if stage == "eval" and not cfg.run.is_synth and not cfg.run.gt_dir:
            log.info("no ground truth configured; skipping eval")
            continue
        log.info("running %s", stage)
        manifests[stage] = COMMANDS[stage](cfg)
    return manifests


COMMANDS["run-all"] = cmd_run_all


def run_command(name, cfg: RunConfig, lock_timeout: float = 0.0):
    """Run one command while holding the output directory's lock file."""
    layout = Layout(cfg.output)
    layout.root.mkdir(parents=True, exist_ok=True)
    with FileLock(str(layout.lock), timeout=lock_timeout):
        return COMMANDS[name](cfg)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="denver", description="Vessel segmentation by layer decomposition.")
    parser.add_argument("--version", action="version", version=f"denver {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config file; omitted keys keep their defaults")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        run_command(args.command, cfg)
    except Timeout:
        print(f"denver: another command holds the lock on {cfg.output}", file=sys.stderr)
        return EXIT_BUSY
    except DenverError as err:
        print(f"denver: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_CODES.get(type(err), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
