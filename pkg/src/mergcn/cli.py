"""``mergcn`` command line: synth, graph, train, eval and gradcheck.

Exit codes are 0 on success, 1 on runtime failure and 2 on usage errors.
A ``--config`` file holds flat ``key = value`` lines whose keys are the
long flag names of the chosen subcommand; flags given on the command line
win over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .container import ContainerError
from .data import ManifestError, SyntheticConfig, generate_synthetic, load_manifest
from .evaluation import (
    KFOLD,
    LOSO,
    SplitError,
    TrainConfig,
    TrainingAborted,
    cross_validate,
    evaluate,
    kfold_splits,
    loso_splits,
)
from .gradcheck import tiny_model_check
from .graph import AuVocabulary, GraphError, ZeroOccurrenceWarning, build_adjacency, build_vocabulary, format_adjacency
from .model import CNN_ONLY, MER_GCN, ModelError, load_checkpoint

log = logging.getLogger("mergcn")

GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


def read_config_file(path) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mergcn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value file with defaults for this command")
        return p

    p = add("synth", "write a synthetic dataset and manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--subjects", type=int, default=4)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per", type=int, default=2, help="sequences per class per subject")
    p.add_argument("--t", type=int, default=8, help="frames per sequence")
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--noise", type=float, default=SyntheticConfig.noise_std)
    p.add_argument("--amplitude", type=float, default=SyntheticConfig.bump_amplitude)
    p.add_argument("--subject-offset", type=float, default=SyntheticConfig.subject_offset_std)
    p.add_argument("--dropout", type=float, default=SyntheticConfig.dropout_prob)
    p.add_argument("--seed", type=int, default=0)

    p = add("graph", "build and export the AU co-occurrence adjacency")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="write the adjacency text here instead of stdout")
    p.add_argument("--exclude-subject", help="build from the records of every other subject")
    p.add_argument("--vocab", type=_int_list, help="explicit AU vocabulary, e.g. 1,2,4")

    p = add("train", "cross-validate a model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--strategy", choices=[LOSO, KFOLD], default=LOSO)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--variant", choices=[MER_GCN, CNN_ONLY], default=MER_GCN)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--momentum", type=float, default=TrainConfig.momentum)
    p.add_argument("--clip", type=float, default=TrainConfig.clip_norm, help="global norm clip; 0 disables")
    p.add_argument("--width", type=float, default=TrainConfig.width_scale, help="channel width scale")
    p.add_argument("--head-init-std", type=float, default=TrainConfig.head_init_std)
    p.add_argument("--class-weights", action="store_true")
    p.add_argument("--out", default="run", help="directory for results.json and fold checkpoints")

    p = add("eval", "evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--subject", action="append", help="only records of this subject (repeatable)")
    p.add_argument("--ids", help="comma-separated record ids to evaluate")
    p.add_argument("--out", help="write metrics JSON here")

    p = add("gradcheck", "finite-difference check of the tiny end-to-end model")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--samples", type=int, default=2, help="coordinates per parameter")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", action="store_true", help="plant a wrong backward rule (negative control)")
    return parser


def parse_args(argv: Optional[Sequence[str]]) -> argparse.Namespace:
    parser = build_parser()
    # A first lenient pass finds the command and config file, so that file
    # values can satisfy required flags before the real parse.
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("-v", "--verbose", action="store_true")
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    early, _ = pre.parse_known_args(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    if early.config and early.command in subparsers:
        sub = subparsers[early.command]
        known = {a.dest for a in sub._actions}
        try:
            values = read_config_file(early.config)
        except OSError as exc:
            parser.error(f"cannot read config file: {exc}")
        except UsageError as exc:
            parser.error(str(exc))
        unknown = sorted(set(values) - known - {"config"})
        if unknown:
            parser.error(f"unknown keys in {early.config}: {', '.join(unknown)}")
        for action in sub._actions:
            if action.dest in values:
                action.required = False
                if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                    values[action.dest] = values[action.dest].lower() in ("1", "true", "yes", "on")
        sub.set_defaults(**values)
    return parser.parse_args(argv)


def effective_config(args: argparse.Namespace) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(vars(args).items())}


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = SyntheticConfig(
        n_subjects=args.subjects,
        n_classes=args.classes,
        sequences_per_class_per_subject=args.per,
        t=args.t,
        channels=args.channels,
        noise_std=args.noise,
        bump_amplitude=args.amplitude,
        subject_offset_std=args.subject_offset,
        dropout_prob=args.dropout,
        seed=args.seed,
    )
    manifest = generate_synthetic(cfg, args.out)
    print(f"{len(manifest)} records written to {Path(args.out) / 'manifest.jsonl'}")
    return 0


def cmd_graph(args) -> int:
    manifest = load_manifest(args.manifest)
    records = manifest.records
    if args.exclude_subject is not None:
        records = [r for r in records if r.subject != args.exclude_subject]
        if len(records) == len(manifest.records):
            raise UsageError(f"subject {args.exclude_subject!r} does not occur in the manifest")
    if not records:
        raise UsageError("no records left to build the graph from")
    annotations = [r.aus for r in records]
    vocab = AuVocabulary(args.vocab) if args.vocab else build_vocabulary(annotations)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroOccurrenceWarning)
        adj = build_adjacency(annotations, vocab)
    text = format_adjacency(adj)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"n={adj.n} zero_columns={len(adj.zero_columns())}")
    return 0


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    if args.strategy == LOSO:
        plan = loso_splits(manifest)
    else:
        plan = kfold_splits(manifest, args.k, args.seed)
    config = TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        momentum=args.momentum,
        clip_norm=args.clip if args.clip and args.clip > 0 else None,
        width_scale=args.width,
        seed=args.seed,
        model_variant=args.variant,
        in_channels=_channels(manifest),
        head_init_std=args.head_init_std,
        class_weights=args.class_weights,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    result = cross_validate(manifest, plan, config, jobs=args.jobs, checkpoint_dir=out)
    payload = {
        "cli": effective_config(args),
        "train_config": config.to_dict(),
        "strategy": plan.strategy,
        "k": plan.k,
        "n_folds": len(plan),
        "class_names": list(manifest.class_names),
        "seconds": time.perf_counter() - start,
        **result.to_dict(),
    }
    (out / "results.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    for f in result.folds:
        print(f"fold {f.index}: accuracy {f.metrics.accuracy:.4f} ({f.metrics.n_eval} sequences)")
    print(f"pooled accuracy {result.pooled.accuracy:.4f} over {len(plan)} folds; results in {out / 'results.json'}")
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    ids = [r.id for r in manifest.records]
    if args.subject:
        ids = [r.id for r in manifest.records if r.subject in set(args.subject)]
    if args.ids is not None:
        wanted = [i for i in args.ids.split(",") if i]
        known = set(manifest.by_id())
        missing = [i for i in wanted if i not in known]
        if missing:
            raise UsageError(f"unknown record ids: {', '.join(missing)}")
        ids = [i for i in ids if i in set(wanted)]
    if not ids:
        raise UsageError("the selection is empty; nothing to evaluate")
    model = load_checkpoint(args.checkpoint)
    if model.n_classes != len(manifest.class_names):
        raise ModelError(
            f"checkpoint has n_classes={model.n_classes} but the manifest has {len(manifest.class_names)} classes"
        )
    if tuple(model.class_names) != tuple(manifest.class_names):
        raise ModelError(f"class names differ: checkpoint {list(model.class_names)} vs manifest {list(manifest.class_names)}")
    subset = manifest.subset(ids)
    channels = _channels(subset)
    if channels != model.config.backbone.in_channels:
        raise ModelError(f"checkpoint expects {model.config.backbone.in_channels} channels, data has {channels}")
    metrics = evaluate(model, subset)
    print(f"accuracy {metrics.accuracy:.4f} on {metrics.n_eval} sequences")
    width = max(len(n) for n in manifest.class_names)
    for name, row in zip(manifest.class_names, metrics.confusion):
        print(f"  {name:<{width}}  " + " ".join(f"{v:3d}" for v in row))
    if args.out:
        Path(args.out).write_text(
            json.dumps({"cli": effective_config(args), **metrics.to_dict()}, indent=2, sort_keys=True)
        )
    return 0


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    result = tiny_model_check(eps=args.eps, samples=args.samples, seed=args.seed, corrupt=args.corrupt)
    elapsed = time.perf_counter() - start
    print(
        f"eps={args.eps:g} checked={len(result.checks)} kinked={len(result.kinked)} "
        f"max_rel_error={result.max_rel_error:.3e} ({elapsed:.1f}s)"
    )
    if result.passed(GRADCHECK_TOL):
        print(f"PASS (< {GRADCHECK_TOL:g})")
        return 0
    w = result.worst
    print(
        f"FAIL: worst {w.param}{list(w.index)} analytic={w.analytic:.6g} numeric={w.numeric:.6g}",
        file=sys.stderr,
    )
    return 1


def _channels(manifest) -> int:
    from .data import load_sequence

    return load_sequence(manifest.records[0], manifest.base_dir).shape[0]


COMMANDS = {
    "synth": cmd_synth,
    "graph": cmd_graph,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mergcn {args.command}: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"mergcn {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ManifestError, ContainerError, GraphError, ModelError, SplitError, ValueError) as exc:
        print(f"mergcn {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
