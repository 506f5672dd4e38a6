"""Command-line interface.

    motionxfer synth     --out DATA
    motionxfer train     --data DATA --out RUN [--stage init|multivideo|all] [--resume CKPT]
    motionxfer finetune  --checkpoint CKPT --data DATA --person ID --out STATE
    motionxfer transfer  --checkpoint CKPT --state STATE --data DATA --driver ID --out DIR
    motionxfer eval      --checkpoint CKPT --data DATA --out DIR
    motionxfer gradcheck

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from . import config as cfgmod
from . import evalkit, gradsuite, renderer, tensorio, trainer
from .losses import LossError
from .synthworld import Dataset, generate_dataset

log = logging.getLogger("motionxfer")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad command-line input; maps to exit code 1."""


# ---------------------------------------------------------------- helpers


def set_threads(n: int) -> None:
    if n < 1:
        raise UsageError("--threads must be >= 1")
    torch.set_num_threads(n)
    # single-threaded runs are the bit-reproducible reference mode
    torch.use_deterministic_algorithms(n == 1)


def load_config(args: argparse.Namespace) -> cfgmod.RunConfig:
    overrides: dict = {}
    for item in args.set or []:
        overrides = cfgmod.merge(overrides, cfgmod.parse_override(item))
    return cfgmod.load(args.config, args.preset, overrides)


def prepare_out(path: Path, force: bool, kind: str = "directory") -> Path:
    if path.exists() and (path.is_file() or any(path.iterdir())):
        if not force:
            raise UsageError(f"{path} exists and is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def require_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def open_dataset(path: str | Path) -> Dataset:
    p = Path(path)
    if not (p / "index.json").is_file():
        raise UsageError(f"no dataset at {p} (index.json missing); run 'motionxfer synth' first")
    return Dataset(p)


def write_json(path: Path, obj: Any) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def frame_slice(text: str | None, n: int) -> np.ndarray:
    if not text:
        return np.arange(n)
    try:
        parts = [int(p) if p else None for p in text.split(":")]
    except ValueError:
        raise UsageError(f"--frames expects start:stop[:step], got {text!r}") from None
    if len(parts) == 1:
        return np.arange(n)[parts[0]:parts[0] + 1]
    return np.arange(n)[slice(*parts[:3])]


def delimited(rows: Sequence[Sequence[Any]], delimiter: str = "\t") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    for r in rows:
        w.writerow(["" if v is None else (f"{v:.6f}" if isinstance(v, float) else v) for v in r])
    return buf.getvalue()


# ---------------------------------------------------------------- commands


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force to regenerate)")
    root = generate_dataset(cfg.dataset_config(), out, force=args.force)
    index = json.loads((root / "index.json").read_text())
    rows = [["person", "split", "frames"]]
    counts: dict[str, int] = {}
    for f in index["frames"]:
        counts[f["person"]] = counts.get(f["person"], 0) + 1
    for p in index["persons"]:
        rows.append([p["id"], p["split"], counts.get(p["id"], 0)])
    write_json(root / "config.json", cfg.to_json())
    sys.stdout.write(delimited(rows))
    return EXIT_OK


def _run_stages(t: trainer.Trainer, stage: str, ckpt: Path) -> None:
    save = lambda tr: tr.save(ckpt)  # noqa: E731
    if stage in ("init", "all") and t.progress.stage in ("none", "init"):
        t.stage_init(on_epoch=save)
        t.save(ckpt)
    if stage in ("multivideo", "all"):
        t.stage_multivideo(on_epoch=save)
        t.save(ckpt)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    ds = open_dataset(args.data)
    if ds.world != cfg.world:
        raise UsageError("dataset world settings differ from the run configuration")
    out = Path(args.out)
    if args.resume:
        out.mkdir(parents=True, exist_ok=True)
    else:
        prepare_out(out, args.force)
    ckpt = out / "checkpoint.pgtc"
    model = trainer.Model(cfg.model.geometry, cfg.model.texture, cfg.model.seed)
    t = trainer.Trainer(ds, model, cfg.train, out / "train.jsonl")
    t.extra_meta = {"run": cfg.to_json()}
    if args.resume:
        t.restore(require_file(args.resume, "checkpoint"))
        log.info("resumed at stage %s after %d epochs", t.progress.stage, t.progress.epoch)
    write_json(out / "config.json", cfg.to_json())
    try:
        _run_stages(t, args.stage, ckpt)
    finally:
        if (out / "train.jsonl").exists():
            from .plotting import training_curves

            training_curves(out / "train.jsonl", out / "training_curves.png")
    sys.stdout.write(delimited([["checkpoint", "stage", "epoch", "step"],
                                [str(ckpt), t.progress.stage, t.progress.epoch, t.progress.step]]))
    return EXIT_OK


def _load_model(path: str) -> tuple[trainer.Model, dict]:
    return trainer.load_model(require_file(path, "checkpoint"))


def _sources_for(ds: Dataset, person: str, cfg: cfgmod.RunConfig) -> tuple[np.ndarray, np.ndarray]:
    e = cfg.eval
    return evalkit.source_and_held_out(ds.n_frames(person), e.sources, e.source_pool, e.held_out_stride, e.seed)


def _check_person(ds: Dataset, person: str) -> None:
    if person not in ds.persons:
        raise UsageError(f"unknown person {person!r}; available: {', '.join(ds.persons)}")


def cmd_finetune(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    model, meta = _load_model(args.checkpoint)
    ds = open_dataset(args.data)
    _check_person(ds, args.person)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists (use --force to overwrite)")
    src_idx, _ = _sources_for(ds, args.person, cfg)
    state = trainer.finetune_fewshot(model, ds.get(args.person, src_idx), cfg.finetune,
                                     cfg.train.weights, cfg.train.betas)
    extra = {"run": cfg.to_json(), "person": args.person, "sources": src_idx.tolist(), "history": state.history}
    trainer.save_personal_state(out, state, meta["model"], extra)
    first, last = state.history[0]["L_test"], state.history[-1]["L_test"]
    sys.stdout.write(delimited([["person", "sources", "L_test_initial", "L_test_final"],
                                [args.person, len(src_idx), first, last]]))
    return EXIT_OK


def cmd_transfer(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    model, _ = _load_model(args.checkpoint)
    state = trainer.load_personal_state(require_file(args.state, "personal state"), model)
    ds = open_dataset(args.data)
    _check_person(ds, args.driver)
    out = prepare_out(Path(args.out), args.force)
    frames = frame_slice(args.frames, ds.n_frames(args.driver))
    write_json(out / "config.json", {"run": cfg.to_json(), "driver": args.driver, "frames": frames.tolist()})
    if len(frames) == 0:
        warnings.warn("empty pose sequence; nothing rendered", RuntimeWarning, stacklevel=1)
        log.warning("empty pose sequence; nothing rendered")
        return EXIT_OK
    driving = ds.get(args.driver, frames)
    report, images = evalkit.eval_transfer(state, driving, frames.tolist(), args.driver, cfg.to_json())
    _, scores, uvs = trainer.transfer(state, driving["stickman"])
    (out / "frames").mkdir()
    (out / "bundles").mkdir()
    for i, f in enumerate(frames):
        renderer.save_png(out / "frames" / f"{f:06d}.png", images[i])
        tensorio.save_bundle(out / "bundles" / f"{f:06d}.tns",
                             {"image": images[i].numpy(), "part_scores": scores[i].numpy(), "uv": uvs[i].numpy()})
    report.write(out / "report.json")
    from .plotting import contact_sheet

    k = min(len(frames), cfg.eval.contact_sheet_frames)
    pick = np.linspace(0, len(frames) - 1, k).round().astype(int)
    contact_sheet(out / "contact_sheet.png", [state.source_images[0]], driving["stickman"][pick], images[pick],
                  title=f"transfer onto driver {args.driver}")
    sys.stdout.write(delimited(report.csv_rows()))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    from .plotting import contact_sheet, metric_plot

    cfg = load_config(args)
    model, _ = _load_model(args.checkpoint)
    ds = open_dataset(args.data)
    persons = args.person or ds.person_ids("test")
    for p in persons:
        _check_person(ds, p)
    out = prepare_out(Path(args.out), args.force)
    ft = cfg.finetune if not args.no_finetune else replace(cfg.finetune, geometry_steps=0, embedding_steps=0)
    reports = []
    for i, p in enumerate(persons):
        src_idx, held = _sources_for(ds, p, cfg)
        sources = ds.get(p, src_idx)
        state = trainer.finetune_fewshot(model, sources, ft, cfg.train.weights, cfg.train.betas)
        held_frames = ds.get(p, held)
        rec, images = evalkit.eval_reconstruction(state, held_frames, held.tolist(), p, cfg.to_json())
        reports.append(rec)
        others = [q for q in ds.person_ids("test") + ds.person_ids("train") if q != p]
        if others:
            driver = others[0]
            d_frames = np.arange(ds.n_frames(driver))[:: cfg.eval.held_out_stride]
            tr_rep, _ = evalkit.eval_transfer(state, ds.get(driver, d_frames), d_frames.tolist(),
                                              f"{driver}->{p}", cfg.to_json())
            reports.append(tr_rep)
        k = min(len(held), cfg.eval.contact_sheet_frames)
        pick = np.linspace(0, len(held) - 1, k).round().astype(int)
        contact_sheet(out / f"contact_{p}.png", [sources["image"][0]], held_frames["stickman"][pick],
                      images[pick], held_frames["image"][pick], title=f"reconstruction of {p}")
    doc = {
        "config": cfg.to_json(),
        "checkpoint": str(args.checkpoint),
        "finetuned": not args.no_finetune,
        "sequences": [r.to_json() for r in reports],
        "lpips": evalkit.UNSUPPORTED,
        "freid": evalkit.UNSUPPORTED,
    }
    write_json(out / "report.json", doc)
    rows = [reports[0].csv_rows()[0]] + [r for rep in reports for r in rep.csv_rows()[1:]]
    (out / "metrics.csv").write_text(delimited(rows, ","))
    metric_plot(reports, out / "metrics.png")
    summary = [["sequence", "kind", "frames", "ssim", "masked_l1", "pose_error"]]
    for r in reports:
        a = r.aggregate()
        summary.append([r.sequence, r.kind, a["frames"], a["ssim"], a["masked_l1"], a["pose_error"]])
    sys.stdout.write(delimited(summary))
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    outcomes = gradsuite.run(args.only or None)
    for o in outcomes:
        print(o.line())
    failed = [o.name for o in outcomes if not o.passed]
    print(f"{len(outcomes) - len(failed)}/{len(outcomes)} checks passed")
    return EXIT_INVALID if failed else EXIT_OK


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # usage errors are validation failures
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration layered over the preset")
    common.add_argument("--preset", default="desk", choices=cfgmod.PRESETS, help="base preset (default: desk)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. train.lr=1e-3 (repeatable)")
    common.add_argument("--threads", type=int, default=1, help="CPU threads; 1 is bit-reproducible (default: 1)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="motionxfer", description="Pose-guided motion transfer on a synthetic world.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", required=True, help="dataset directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="initialization and multi-video training")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="run directory (checkpoint, log, figures)")
    s.add_argument("--stage", choices=("init", "multivideo", "all"), default="all", help="stages to run")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("finetune", parents=[common], help="few-shot personalization to one person")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--person", required=True)
    s.add_argument("--out", required=True, help="personal state file")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("transfer", parents=[common], help="render a personalized model in another sequence's poses")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--state", required=True, help="personal state from 'finetune'")
    s.add_argument("--data", required=True)
    s.add_argument("--driver", required=True, help="person whose poses drive the output")
    s.add_argument("--frames", help="start:stop[:step] slice of the driving sequence")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("eval", parents=[common], help="reconstruction and transfer metrics with figures")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--person", action="append", help="evaluate only these persons (default: test split)")
    s.add_argument("--no-finetune", action="store_true", help="skip few-shot fine-tuning")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--only", action="append", choices=list(gradsuite.CHECKS), help="run only these checks")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        set_threads(args.threads)
        return args.func(args)
    except (UsageError, cfgmod.ConfigError, FileExistsError, tensorio.CorruptFileError,
            trainer.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (trainer.TrainingError, LossError, RuntimeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
