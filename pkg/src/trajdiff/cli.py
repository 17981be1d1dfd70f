"""Command-line pipeline: gen-data, train, sample, refine, eval.

Every subcommand accepts ``--config file.json`` whose keys use the flag names
(dashes or underscores); explicit flags override the file.  The effective
settings are written to ``<out>/resolved_config.json``.  Exit codes are 0 on
success, 1 on runtime errors and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .alignment import MODES, TaConfig
from .dataset import Dataset, build_dataset, generate_configs, load_batch, read_tensor, write_tensor
from .denoiser import DenoiserSpec, TrainConfig, init_state, load_checkpoint
from .diffusion import make_schedule
from .errors import ShapeMismatch, TrajDiffError
from .fem import ConstraintConfig
from .kernels import field_conditioning, kernel_conditioning
from .metrics import evaluate_batch, evaluate_sample
from .simp import SimpSettings, refine
from .trainer import generate, load_corpus, train

log = logging.getLogger("trajdiff")


# -- helpers ----------------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM of densities in [0, 1] (row 0 at the top)."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def side_by_side(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sep = np.ones((a.shape[0], 1))
    return np.concatenate([a, sep, b], axis=1)


def _sample_paths(directory: Path) -> list[Path]:
    return sorted(p for p in directory.glob("*.domt"))


def _record_index(dataset: Dataset, sample_id: str) -> int:
    for i, rec in enumerate(dataset.manifest["records"]):
        if rec["id"] == sample_id:
            return i
    raise TrajDiffError(f"sample {sample_id} not found in dataset")


def _write_resolved(out: Path, args: argparse.Namespace) -> None:
    out.mkdir(parents=True, exist_ok=True)
    values = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    with open(out / "resolved_config.json", "w") as fh:
        json.dump(values, fh, indent=2, sort_keys=True, default=str)


def _load_samples(samples_dir: Path, dataset: Dataset):
    paths = _sample_paths(samples_dir)
    if not paths:
        raise TrajDiffError(f"no .domt samples in {samples_dir}")
    ids = [p.stem for p in paths]
    indices = [_record_index(dataset, s) for s in ids]
    return ids, indices, [read_tensor(p).astype(np.float64) for p in paths]


def _read_timing(samples_dir: Path) -> dict:
    path = samples_dir / "timing.csv"
    if not path.exists():
        return {}
    with open(path) as fh:
        return {row["id"]: float(row["sampling_s"]) for row in csv.DictReader(fh)}


# -- subcommands ------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    _write_resolved(out, args)
    configs = generate_configs(args.n, args.seed, (args.grid, args.grid))
    settings = SimpSettings(max_iters=args.max_iters)
    manifest = build_dataset(
        configs, settings, out, seed=args.seed, kernel_alpha=args.alpha, with_field=args.field, workers=args.threads
    )
    log.info("wrote %d samples (%d skipped) to %s", manifest["sample_count"], len(manifest["skipped"]), out)
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    _write_resolved(out, args)
    dataset = Dataset.open(args.data)
    ta = TaConfig(args.ta, args.weight, args.weight, args.weight, args.step_map)
    last = out / "last.pt"
    if args.resume and last.exists():
        state, schedule, payload = load_checkpoint(last)
        if payload["manifest_hash"] != dataset.hash:
            raise TrajDiffError("checkpoint was trained on a different dataset")
        log.info("resuming from iteration %d", state.iteration)
    else:
        schedule = make_schedule(args.timesteps)
        spec = DenoiserSpec(base_width=args.width)
        state = init_state(spec, args.seed, TrainConfig(lr=args.lr), with_perf=(ta.mode == "perf"))
    corpus = load_corpus(dataset)
    train(
        state, corpus, schedule, ta, args.iters, out, dataset.hash,
        batch_size=args.batch_size, checkpoint_every=args.checkpoint_every, probe_every=args.probe_every,
        extra={"ta": ta.mode, "grid": dataset.manifest["grid"]},
    )
    return 0


def _configs_for(args) -> tuple[list[str], list[ConstraintConfig]]:
    dataset = Dataset.open(args.data)
    n = len(dataset) if args.limit is None else min(args.limit, len(dataset))
    ids = [dataset.record(i)["id"] for i in range(n)]
    return ids, [dataset.config(i) for i in range(n)]


def cmd_sample(args) -> int:
    out = Path(args.out)
    _write_resolved(out, args)
    state, schedule, payload = load_checkpoint(args.checkpoint)
    ids, configs = _configs_for(args)
    grid = payload["extra"].get("grid")
    stride = state.model.spec.stride
    for cfg in configs:
        if (grid is not None and list(cfg.shape) != list(grid)) or cfg.nx % stride or cfg.ny % stride:
            raise ShapeMismatch(f"config grid {cfg.shape} does not fit checkpoint grid {grid}")

    rows = []
    for sample_id, cfg in zip(ids, configs):
        t0 = time.perf_counter()
        cond = kernel_conditioning(cfg, args.alpha).channels
        t_kernel = time.perf_counter() - t0
        t_field = float("nan")
        if args.field_timing:
            t0 = time.perf_counter()
            field_conditioning(cfg)
            t_field = time.perf_counter() - t0
        x, times, calls = generate(
            state.model, torch.from_numpy(cond[None].astype(np.float32)), args.steps,
            args.seed + int(sample_id), schedule,
        )
        write_tensor(out / f"{sample_id}.domt", x[0].astype(np.float32))
        write_pgm(out / f"{sample_id}.pgm", x[0])
        rows.append((sample_id, t_kernel, t_field, times[0], calls[0]))

    with open(out / "timing.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("id", "preprocess_kernel_s", "preprocess_field_s", "sampling_s", "denoiser_calls"))
        writer.writerows(rows)
    arr = np.array([r[1:4] for r in rows], dtype=float)
    summary = {
        "samples": len(rows),
        "steps": args.steps,
        "denoiser_calls_per_sample": sorted({r[4] for r in rows}),
        "preprocess_kernel_s": float(np.mean(arr[:, 0])),
        "preprocess_field_s": float(np.mean(arr[:, 1])) if args.field_timing else None,
        "sampling_s": float(np.mean(arr[:, 2])),
    }
    with open(out / "timing_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    log.info("timing %s", summary)
    return 0


def cmd_refine(args) -> int:
    out = Path(args.out)
    _write_resolved(out, args)
    dataset = Dataset.open(args.data)
    ids, indices, samples = _load_samples(Path(args.samples), dataset)
    header = ("id", "ce_before", "ce_after", "vfe_before", "vfe_after", "fm_before", "fm_after",
              "ld_before", "ld_after", "uns_before", "uns_after")
    rows = []
    for sample_id, idx, x in zip(ids, indices, samples):
        cfg = dataset.config(idx)
        ref = dataset.meta(idx)["final_compliance"]
        before = evaluate_sample(idx, x, cfg, ref)
        try:
            refined, _ = refine(x, cfg, args.opt_steps)
        except TrajDiffError as exc:
            log.warning("refinement failed for %s: %s", sample_id, exc)
            refined = x
        after = evaluate_sample(idx, refined, cfg, ref)
        write_tensor(out / f"{sample_id}.domt", refined.astype(np.float32))
        write_pgm(out / f"{sample_id}.pgm", refined)
        rows.append((sample_id, before.ce, after.ce, before.vfe, after.vfe, int(before.fm), int(after.fm),
                     int(before.ld), int(after.ld), int(before.uns), int(after.uns)))
    with open(out / "deltas.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    _write_resolved(out, args)
    dataset = Dataset.open(args.data)
    samples_dir = Path(args.samples)
    ids, indices, samples = _load_samples(samples_dir, dataset)
    batch = load_batch(dataset, indices)
    timing = _read_timing(samples_dir)
    report = evaluate_batch(
        samples, batch["configs"], list(batch["final_compliance"]),
        [timing.get(s, 0.0) for s in ids], threshold=args.threshold,
    )
    report.write(out)
    if args.images:
        for sample_id, x, ref in zip(ids, samples, batch["x0"]):
            write_pgm(out / f"{sample_id}_vs_ref.pgm", side_by_side(x, ref))
    log.info("aggregate %s", report.aggregate)
    return 0


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajdiff", description="Topology generation with trajectory-aligned diffusion.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON file of default values")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, default=1)
        if seed:
            p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen-data", help="generate configs and run SIMP on each")
    common(p)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--field", action="store_true", help="also store FIELD conditioning")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a denoiser")
    common(p)
    p.add_argument("--data")
    p.add_argument("--ta", choices=MODES, default="none")
    p.add_argument("--weight", type=float, default=1.0)
    p.add_argument("--step-map", choices=("block", "mod"), default="block")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--timesteps", type=int, default=1000)
    p.add_argument("--checkpoint-every", type=int, default=1000)
    p.add_argument("--probe-every", type=int, default=1000)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw one design per config")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--steps", type=int, default=2)
    p.add_argument("--limit", type=int)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--no-field-timing", dest="field_timing", action="store_false")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("refine", help="run a few SIMP iterations on samples")
    common(p, seed=False)
    p.add_argument("--samples")
    p.add_argument("--data")
    p.add_argument("--opt-steps", type=int, default=10)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="score samples against dataset references")
    common(p, seed=False)
    p.add_argument("--samples")
    p.add_argument("--data")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--images", action="store_true", help="write generated|reference PGMs")
    p.set_defaults(func=cmd_eval)
    return parser


REQUIRED = {
    "gen-data": ("out",),
    "train": ("out", "data"),
    "sample": ("out", "checkpoint", "data"),
    "refine": ("out", "samples", "data"),
    "eval": ("out", "samples", "data"),
}


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config) as fh:
                defaults = {k.replace("-", "_"): v for k, v in json.load(fh).items()}
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read --config: {exc}")
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        unknown = set(defaults) - {a.dest for a in subparser._actions}
        if unknown:
            parser.error(f"unknown config keys: {sorted(unknown)}")
        subparser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    missing = [f"--{k.replace('_', '-')}" for k in REQUIRED[args.command] if getattr(args, k) is None]
    if missing:
        parser.error(f"{args.command}: missing required {', '.join(missing)}")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except (TrajDiffError, ValueError, OSError) as exc:
        print(f"trajdiff {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
